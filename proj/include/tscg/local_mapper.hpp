#pragma once
// Synthetic local mapping: perspective rendering of ground-plane semantics,
// inverse perspective mapping back to BEV, and a per-cell logistic decode
// head. All geometry assumes semantics live at z = 0.

#include <vector>

#include "tscg/grid.hpp"

namespace tscg {

struct CameraModel {
  double focal_px = 0;
  double u0 = 0, v0 = 0;          // principal point
  int height_px = 0, width_px = 0;
  // Mount pose in the ego frame.
  double mount_x = 0, mount_y = 0, mount_z = 0;
  double mount_yaw = 0;    // about ego z
  double mount_pitch = 0;  // positive looks down

  void validate() const;
};

struct CameraRig {
  std::vector<CameraModel> cameras;

  // Six cameras at evenly spaced yaw, matching image size and intrinsics.
  static CameraRig surround(int height_px, int width_px, double hfov_rad,
                            double mount_z, double pitch_rad);
  void validate() const;
};

// Per-class scalar field over image pixels, channel-major then row-major.
struct PerspectiveImage {
  int camera_index = 0;
  int channels = 0;
  int height = 0, width = 0;
  std::vector<float> data;

  PerspectiveImage() = default;
  PerspectiveImage(int cam, int ch, int h, int w);
  float& at(int c, int v, int u) {
    return data[(static_cast<std::size_t>(c) * height + v) * width + u];
  }
  float at(int c, int v, int u) const {
    return data[(static_cast<std::size_t>(c) * height + v) * width + u];
  }
};

PerspectiveImage render_perspective(const SemanticGrid& gt, const CameraModel& cam,
                                    int camera_index = 0);

std::vector<PerspectiveImage> render_rig(const SemanticGrid& gt, const CameraRig& rig);

// Project each BEV cell center into every camera; average the bilinear
// samples of all cameras that see it. Cells no camera sees stay 0.
FeatureGrid ipm_warp(const std::vector<PerspectiveImage>& images, const CameraRig& rig,
                     const GridSpec& spec);

// Per-class affine + logistic head over feature channels.
struct DecodeHead {
  int channels = 0;
  int n_classes = 0;
  std::vector<float> weights;  // [n_classes][channels]
  std::vector<float> bias;     // [n_classes]

  DecodeHead() = default;
  DecodeHead(int ch, int classes);
};

SemanticGrid decode_map(const FeatureGrid& features, const DecodeHead& head,
                        const ClassSet& classes);

void write_pgm(const std::string& path, const PerspectiveImage& img, int channel);

}  // namespace tscg
