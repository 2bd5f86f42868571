#pragma once
// Grid containers, pose algebra and the BGF on-disk format.
//
// Coordinate convention (fixed project-wide): the ego vehicle sits at the
// exact grid center; x points forward, y points left. Row index grows
// toward the rear (-x), column index grows toward the right (-y), so a
// rendered image reads top = forward. Cell (i,j) has metric center
//   x = (rows/2 - i - 0.5) * res,   y = (cols/2 - j - 0.5) * res.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace tscg {

struct GridSpec {
  int rows = 0;            // cell count along ego-forward axis
  int cols = 0;            // cell count along ego-left axis
  double resolution_m = 0; // meters per (square) cell

  void validate() const;  // throws std::invalid_argument on bad spec
  bool operator==(const GridSpec&) const = default;

  std::size_t cells() const { return static_cast<std::size_t>(rows) * cols; }

  // Metric center of cell (i,j) in the ego frame.
  std::array<double, 2> cell_center(int i, int j) const {
    return {(rows / 2.0 - i - 0.5) * resolution_m,
            (cols / 2.0 - j - 0.5) * resolution_m};
  }
  // Inverse of cell_center; returns fractional indices.
  std::array<double, 2> metric_to_cell(double x, double y) const {
    return {rows / 2.0 - x / resolution_m - 0.5,
            cols / 2.0 - y / resolution_m - 0.5};
  }
};

struct ClassSet {
  std::vector<std::string> names;

  static ClassSet hd3();   // {Divider, PedCrossing, Boundary}
  static ClassSet sem6();  // {Drivable, PedCrossing, Walkway, StopLine, CarParking, Divider}

  int size() const { return static_cast<int>(names.size()); }
  bool operator==(const ClassSet&) const = default;
};

// Multi-channel real-valued raster, channel-major then row-major.
struct FeatureGrid {
  GridSpec spec;
  int channels = 0;
  std::vector<float> data;

  FeatureGrid() = default;
  FeatureGrid(GridSpec s, int ch, float fill = 0.0f);

  float& at(int c, int i, int j) {
    return data[(static_cast<std::size_t>(c) * spec.rows + i) * spec.cols + j];
  }
  float at(int c, int i, int j) const {
    return data[(static_cast<std::size_t>(c) * spec.rows + i) * spec.cols + j];
  }
  float* channel(int c) { return data.data() + static_cast<std::size_t>(c) * spec.cells(); }
  const float* channel(int c) const {
    return data.data() + static_cast<std::size_t>(c) * spec.cells();
  }
  void check_finite(const char* what) const;  // throws on NaN/Inf
};

// Per-class occupancy probabilities in [0,1]; values are clamped at
// construction so the invariant holds for the object's whole lifetime.
struct SemanticGrid {
  GridSpec spec;
  ClassSet classes;
  std::vector<float> data;

  SemanticGrid() = default;
  SemanticGrid(GridSpec s, ClassSet cs, float fill = 0.0f);
  // Adopts raw values, clamping each into [0,1].
  static SemanticGrid from_values(GridSpec s, ClassSet cs, std::vector<float> values);

  float& at(int c, int i, int j) {
    return data[(static_cast<std::size_t>(c) * spec.rows + i) * spec.cols + j];
  }
  float at(int c, int i, int j) const {
    return data[(static_cast<std::size_t>(c) * spec.rows + i) * spec.cols + j];
  }
  float* channel(int c) { return data.data() + static_cast<std::size_t>(c) * spec.cells(); }
  const float* channel(int c) const {
    return data.data() + static_cast<std::size_t>(c) * spec.cells();
  }
  FeatureGrid as_features() const;  // copy into an unconstrained raster
};

// Planar ego pose; yaw normalized to (-pi, pi].
struct Pose2 {
  double x_m = 0, y_m = 0, yaw_rad = 0;

  Pose2() = default;
  Pose2(double x, double y, double yaw);
};

using Mat3 = std::array<double, 9>;  // row-major 3x3

Mat3 mat3_mul(const Mat3& a, const Mat3& b);
Mat3 mat3_inverse(const Mat3& m);  // throws on singular
Mat3 mat3_identity();

// Homogeneous rigid transform of a relative pose.
Mat3 pose_to_matrix(const Pose2& rel);

// Relative pose mapping points expressed in the previous ego frame into the
// current ego frame: pose_to_matrix(result) * p_prev = p_cur.
Pose2 relative_pose(const Pose2& global_prev, const Pose2& global_cur);

// BGF file format: "BGF1" magic, u32 LE header length, UTF-8 JSON header,
// then channel-major row-major raw little-endian f32. Bit-exact round trip.
void write_grid(const std::string& path, const FeatureGrid& g,
                const std::vector<std::string>& class_names = {});
void write_grid(const std::string& path, const SemanticGrid& g);

struct LoadedGrid {
  GridSpec spec;
  int channels = 0;
  std::vector<std::string> class_names;  // empty for plain feature grids
  std::vector<float> data;

  FeatureGrid as_features() const;
  SemanticGrid as_semantic() const;  // requires class_names
};
LoadedGrid read_grid(const std::string& path);

}  // namespace tscg
