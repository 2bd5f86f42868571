#include "tscg/grid.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace tscg {

void GridSpec::validate() const {
  if (rows < 2 || cols < 2) throw std::invalid_argument("GridSpec: rows/cols must be >= 2");
  if (!(resolution_m > 0) || !std::isfinite(resolution_m))
    throw std::invalid_argument("GridSpec: resolution_m must be positive");
}

ClassSet ClassSet::hd3() { return {{"Divider", "PedCrossing", "Boundary"}}; }
ClassSet ClassSet::sem6() {
  return {{"Drivable", "PedCrossing", "Walkway", "StopLine", "CarParking", "Divider"}};
}

FeatureGrid::FeatureGrid(GridSpec s, int ch, float fill) : spec(s), channels(ch) {
  spec.validate();
  if (ch < 1) throw std::invalid_argument("FeatureGrid: channels must be >= 1");
  data.assign(static_cast<std::size_t>(ch) * spec.cells(), fill);
}

void FeatureGrid::check_finite(const char* what) const {
  for (float v : data)
    if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite value in ") + what);
}

SemanticGrid::SemanticGrid(GridSpec s, ClassSet cs, float fill) : spec(s), classes(std::move(cs)) {
  spec.validate();
  if (classes.size() < 1) throw std::invalid_argument("SemanticGrid: empty class set");
  data.assign(static_cast<std::size_t>(classes.size()) * spec.cells(),
              std::clamp(fill, 0.0f, 1.0f));
}

SemanticGrid SemanticGrid::from_values(GridSpec s, ClassSet cs, std::vector<float> values) {
  SemanticGrid g(s, std::move(cs));
  if (values.size() != g.data.size())
    throw std::invalid_argument("SemanticGrid: payload size mismatch");
  for (float& v : values) {
    if (std::isnan(v)) v = 0.0f;
    v = std::clamp(v, 0.0f, 1.0f);
  }
  g.data = std::move(values);
  return g;
}

FeatureGrid SemanticGrid::as_features() const {
  FeatureGrid f(spec, classes.size());
  f.data = data;
  return f;
}

namespace {
double normalize_yaw(double yaw) {
  yaw = std::remainder(yaw, 2.0 * M_PI);  // (-pi, pi] up to the -pi edge
  if (yaw <= -M_PI) yaw = M_PI;
  return yaw;
}
}  // namespace

Pose2::Pose2(double x, double y, double yaw) : x_m(x), y_m(y), yaw_rad(normalize_yaw(yaw)) {
  if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(yaw))
    throw std::invalid_argument("Pose2: non-finite component");
}

Mat3 mat3_identity() { return {1, 0, 0, 0, 1, 0, 0, 0, 1}; }

Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      r[i * 3 + j] = a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
  return r;
}

Mat3 mat3_inverse(const Mat3& m) {
  const double det = m[0] * (m[4] * m[8] - m[5] * m[7]) -
                     m[1] * (m[3] * m[8] - m[5] * m[6]) +
                     m[2] * (m[3] * m[7] - m[4] * m[6]);
  if (!std::isfinite(det) || std::abs(det) < 1e-300)
    throw std::runtime_error("mat3_inverse: singular matrix");
  const double id = 1.0 / det;
  Mat3 r;
  r[0] = (m[4] * m[8] - m[5] * m[7]) * id;
  r[1] = (m[2] * m[7] - m[1] * m[8]) * id;
  r[2] = (m[1] * m[5] - m[2] * m[4]) * id;
  r[3] = (m[5] * m[6] - m[3] * m[8]) * id;
  r[4] = (m[0] * m[8] - m[2] * m[6]) * id;
  r[5] = (m[2] * m[3] - m[0] * m[5]) * id;
  r[6] = (m[3] * m[7] - m[4] * m[6]) * id;
  r[7] = (m[1] * m[6] - m[0] * m[7]) * id;
  r[8] = (m[0] * m[4] - m[1] * m[3]) * id;
  return r;
}

Mat3 pose_to_matrix(const Pose2& rel) {
  if (!std::isfinite(rel.x_m) || !std::isfinite(rel.y_m) || !std::isfinite(rel.yaw_rad))
    throw std::invalid_argument("pose_to_matrix: non-finite pose");
  const double c = std::cos(rel.yaw_rad), s = std::sin(rel.yaw_rad);
  return {c, -s, rel.x_m, s, c, rel.y_m, 0, 0, 1};
}

Pose2 relative_pose(const Pose2& global_prev, const Pose2& global_cur) {
  // world = M_cur * p_cur = M_prev * p_prev  =>  p_cur = M_cur^-1 M_prev p_prev
  const double dyaw = global_prev.yaw_rad - global_cur.yaw_rad;
  const double dx = global_prev.x_m - global_cur.x_m;
  const double dy = global_prev.y_m - global_cur.y_m;
  const double c = std::cos(global_cur.yaw_rad), s = std::sin(global_cur.yaw_rad);
  return Pose2(c * dx + s * dy, -s * dx + c * dy, dyaw);
}

namespace {

void write_grid_impl(const std::string& path, const GridSpec& spec, int channels,
                     const std::vector<std::string>& class_names,
                     const std::vector<float>& payload) {
  nlohmann::json h;
  h["rows"] = spec.rows;
  h["cols"] = spec.cols;
  h["channels"] = channels;
  h["resolution_m"] = spec.resolution_m;
  h["classes"] = class_names;
  h["dtype"] = "f32";
  const std::string hs = h.dump();

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("write_grid: cannot open " + path);
  f.write("BGF1", 4);
  const std::uint32_t hlen = static_cast<std::uint32_t>(hs.size());
  char lenb[4] = {static_cast<char>(hlen & 0xff), static_cast<char>((hlen >> 8) & 0xff),
                  static_cast<char>((hlen >> 16) & 0xff), static_cast<char>((hlen >> 24) & 0xff)};
  f.write(lenb, 4);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  static_assert(sizeof(float) == 4);
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * 4));
  if (!f) throw std::runtime_error("write_grid: write failed for " + path);
}

}  // namespace

void write_grid(const std::string& path, const FeatureGrid& g,
                const std::vector<std::string>& class_names) {
  write_grid_impl(path, g.spec, g.channels, class_names, g.data);
}

void write_grid(const std::string& path, const SemanticGrid& g) {
  write_grid_impl(path, g.spec, g.classes.size(), g.classes.names, g.data);
}

LoadedGrid read_grid(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_grid: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (f.gcount() != 4 || std::memcmp(magic, "BGF1", 4) != 0)
    throw std::runtime_error("read_grid: bad magic at byte offset 0 in " + path);
  unsigned char lenb[4];
  f.read(reinterpret_cast<char*>(lenb), 4);
  if (f.gcount() != 4) throw std::runtime_error("read_grid: truncated header length at byte offset 4");
  const std::uint32_t hlen = lenb[0] | (lenb[1] << 8) | (lenb[2] << 16) |
                             (static_cast<std::uint32_t>(lenb[3]) << 24);
  std::string hs(hlen, '\0');
  f.read(hs.data(), hlen);
  if (f.gcount() != static_cast<std::streamsize>(hlen))
    throw std::runtime_error("read_grid: truncated JSON header at byte offset 8");

  nlohmann::json h;
  try {
    h = nlohmann::json::parse(hs);
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string("read_grid: malformed header JSON at byte offset 8: ") + e.what());
  }
  if (h.value("dtype", "") != "f32") throw std::runtime_error("read_grid: unsupported dtype");

  LoadedGrid out;
  out.spec.rows = h.at("rows").get<int>();
  out.spec.cols = h.at("cols").get<int>();
  out.spec.resolution_m = h.at("resolution_m").get<double>();
  out.channels = h.at("channels").get<int>();
  out.class_names = h.value("classes", std::vector<std::string>{});
  out.spec.validate();
  if (out.channels < 1) throw std::runtime_error("read_grid: bad channel count");

  const std::size_t n = static_cast<std::size_t>(out.channels) * out.spec.cells();
  out.data.resize(n);
  f.read(reinterpret_cast<char*>(out.data.data()), static_cast<std::streamsize>(n * 4));
  if (f.gcount() != static_cast<std::streamsize>(n * 4))
    throw std::runtime_error("read_grid: truncated payload, expected " + std::to_string(n * 4) +
                             " bytes after offset " + std::to_string(8 + hlen));
  return out;
}

FeatureGrid LoadedGrid::as_features() const {
  FeatureGrid g(spec, channels);
  g.data = data;
  return g;
}

SemanticGrid LoadedGrid::as_semantic() const {
  if (static_cast<int>(class_names.size()) != channels)
    throw std::runtime_error("LoadedGrid: class names do not match channel count");
  return SemanticGrid::from_values(spec, ClassSet{class_names}, data);
}

}  // namespace tscg
