#pragma once
// Procedural scene/sequence generation, centerline rasterization, the
// block-mask pretraining corruption, and the eight-perturbation harness.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "tscg/cgdm.hpp"
#include "tscg/grid.hpp"
#include "tscg/local_mapper.hpp"

namespace tscg {

struct SceneConfig {
  int frames = 8;
  GridSpec spec{64, 32, 0.5};
  ClassSet class_set = ClassSet::hd3();
  double step_m = 2.0;            // ego advance per frame along the road
  double traj_noise_m = 0.15;     // lateral/longitudinal pose noise
  double yaw_noise_rad = 0.03;
  double road_half_width_m = 3.5;
  double curvature_scale = 1.0;   // 0 = straight road
  double crossing_every_m = 18.0; // pedestrian crossing spacing
};

struct SceneFrame {
  SemanticGrid gt;
  Pose2 global_pose;
  std::vector<PerspectiveImage> images;  // may be empty until rendered
};

struct SceneSequence {
  std::vector<SceneFrame> frames;
  std::vector<std::array<double, 2>> centerline;  // global polyline
  std::uint64_t seed = 0;
  SceneConfig config;
};

SceneSequence generate_scene(std::uint64_t seed, const SceneConfig& config);

// Supercover rasterization of an ego-frame polyline into one grid channel
// (out points at spec.cells() floats).
void raster_polyline(const std::vector<std::array<double, 2>>& pts_ego,
                     const GridSpec& spec, float* out, float value = 1.0f);

CenterlineGrid rasterize_centerline(const SceneSequence& seq, int frame_index);

// Zero out a seeded subset of patch x patch blocks so the masked-cell
// fraction lands as close to `ratio` as block granularity allows.
SemanticGrid random_mask(const SemanticGrid& grid, double ratio, int patch,
                         std::uint64_t seed);

enum class CorruptionKind {
  Brightness, CameraCrash, ColorQuant, Dark, Fog, FrameLost, MotionBlur, Snow
};
enum class Severity { Easy, Mid, Hard };

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::Brightness;
  Severity severity = Severity::Easy;
};

const char* to_string(CorruptionKind k);
const char* to_string(Severity s);
std::optional<CorruptionKind> corruption_from_string(const std::string& s);
std::optional<Severity> severity_from_string(const std::string& s);

// The fixed severity parameter table, serializable so reports can record
// the exact values used.
std::string severity_table_json();

// Degrades perspective images only; ground truth is never touched.
// Severities are nested per kind (a harder level extends the easier one)
// so signal-level distortion is monotone for a fixed seed.
SceneSequence corrupt(const SceneSequence& seq, const CorruptionSpec& spec,
                      std::uint64_t seed);

// Dataset directory persistence: manifest.json + one BGF per frame gt.
void save_dataset(const std::string& dir, const std::vector<SceneSequence>& sequences);
std::vector<SceneSequence> load_dataset(const std::string& dir);

// Rendering helper: make sure every frame of `seq` carries images.
void ensure_images(SceneSequence& seq, const CameraRig& rig);

}  // namespace tscg
