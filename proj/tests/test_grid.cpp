#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "tscg/grid.hpp"

using namespace tscg;
namespace fs = std::filesystem;

namespace {
std::string tmpfile(const char* name) {
  return (fs::temp_directory_path() / name).string();
}
}  // namespace

TEST_CASE("grid spec validation and cell geometry") {
  CHECK_THROWS(GridSpec{0, 4, 0.5}.validate());
  CHECK_THROWS(GridSpec{4, -1, 0.5}.validate());
  CHECK_THROWS(GridSpec{4, 4, 0.0}.validate());

  GridSpec s{64, 32, 0.5};
  s.validate();
  CHECK(s.cells() == 2048);
  // ego sits at the exact center: the four central cells are half a cell away
  auto c = s.cell_center(31, 15);
  CHECK(c[0] == doctest::Approx(0.25));
  CHECK(c[1] == doctest::Approx(0.25));
  c = s.cell_center(32, 16);
  CHECK(c[0] == doctest::Approx(-0.25));
  CHECK(c[1] == doctest::Approx(-0.25));
  // top-left cell is forward-left
  c = s.cell_center(0, 0);
  CHECK(c[0] == doctest::Approx(15.75));
  CHECK(c[1] == doctest::Approx(7.75));

  for (int i : {0, 5, 63})
    for (int j : {0, 17, 31}) {
      auto cc = s.cell_center(i, j);
      auto ij = s.metric_to_cell(cc[0], cc[1]);
      CHECK(ij[0] == doctest::Approx(i).epsilon(1e-12));
      CHECK(ij[1] == doctest::Approx(j).epsilon(1e-12));
    }
}

TEST_CASE("class sets") {
  CHECK(ClassSet::hd3().names ==
        std::vector<std::string>{"Divider", "PedCrossing", "Boundary"});
  CHECK(ClassSet::sem6().size() == 6);
}

TEST_CASE("semantic grid clamps on construction and adoption") {
  GridSpec s{4, 4, 1.0};
  SemanticGrid g(s, ClassSet::hd3(), 2.0f);
  CHECK(g.at(0, 0, 0) == 1.0f);
  std::vector<float> vals(3 * 16, -0.5f);
  vals[5] = 0.25f;
  auto h = SemanticGrid::from_values(s, ClassSet::hd3(), std::move(vals));
  CHECK(h.data[0] == 0.0f);
  CHECK(h.data[5] == 0.25f);
}

TEST_CASE("pose matrix basics") {
  // a robot 2 m ahead sees the old origin 2 m behind
  Pose2 prev(0, 0, 0), cur(2, 0, 0);
  Pose2 rel = relative_pose(prev, cur);
  CHECK(rel.x_m == doctest::Approx(-2.0));
  CHECK(rel.y_m == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(rel.yaw_rad == doctest::Approx(0.0).epsilon(1e-12));

  // mapping a point expressed in the previous frame into the current frame
  Mat3 m = pose_to_matrix(relative_pose(Pose2(1, 2, 0.3), Pose2(4, -1, 1.1)));
  // global point of prev-frame point p
  const double px = 0.7, py = -0.4;
  const double gx = 1 + std::cos(0.3) * px - std::sin(0.3) * py;
  const double gy = 2 + std::sin(0.3) * px + std::cos(0.3) * py;
  // expressed in cur frame
  const double dx = gx - 4, dy = gy + 1;
  const double ex = std::cos(1.1) * dx + std::sin(1.1) * dy;
  const double ey = -std::sin(1.1) * dx + std::cos(1.1) * dy;
  CHECK(m[0] * px + m[1] * py + m[2] == doctest::Approx(ex).epsilon(1e-12));
  CHECK(m[3] * px + m[4] * py + m[5] == doctest::Approx(ey).epsilon(1e-12));
}

TEST_CASE("pose composition with its inverse is identity within 1e-9") {
  std::mt19937_64 gen(7);
  std::uniform_real_distribution<double> d(-5.0, 5.0);
  for (int k = 0; k < 100; ++k) {
    Pose2 a(d(gen), d(gen), d(gen));
    Pose2 b(d(gen), d(gen), d(gen));
    Mat3 ab = pose_to_matrix(relative_pose(a, b));
    Mat3 ba = pose_to_matrix(relative_pose(b, a));
    Mat3 id = mat3_mul(ab, ba);
    const Mat3 expect = mat3_identity();
    for (int i = 0; i < 9; ++i) CHECK(std::abs(id[i] - expect[i]) < 1e-9);
  }
}

TEST_CASE("mat3 inverse round trip and singular detection") {
  Mat3 m = pose_to_matrix(Pose2(1.5, -2.0, 0.7));
  Mat3 mi = mat3_inverse(m);
  Mat3 id = mat3_mul(m, mi);
  for (int i = 0; i < 9; ++i) CHECK(std::abs(id[i] - mat3_identity()[i]) < 1e-12);
  CHECK_THROWS(mat3_inverse(Mat3{0, 0, 0, 0, 0, 0, 0, 0, 0}));
}

TEST_CASE("BGF round trip is bit-exact for both grid kinds") {
  GridSpec s{6, 10, 0.25};
  std::mt19937_64 gen(11);
  std::uniform_real_distribution<double> d(-3.0, 3.0);

  FeatureGrid f(s, 4);
  for (auto& v : f.data) v = static_cast<float>(d(gen));
  const std::string p1 = tmpfile("tscg_grid_f.bgf");
  write_grid(p1, f);
  LoadedGrid lf = read_grid(p1);
  CHECK(lf.spec == s);
  CHECK(lf.channels == 4);
  CHECK(lf.class_names.empty());
  CHECK(lf.data == f.data);  // bit-exact

  SemanticGrid g(s, ClassSet::hd3());
  for (auto& v : g.data) v = static_cast<float>(std::abs(d(gen)) / 3.0);
  const std::string p2 = tmpfile("tscg_grid_s.bgf");
  write_grid(p2, g);
  LoadedGrid lg = read_grid(p2);
  CHECK(lg.class_names == g.classes.names);
  CHECK(lg.data == g.data);
  SemanticGrid g2 = lg.as_semantic();
  CHECK(g2.data == g.data);
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("BGF rejects malformed files with a byte offset in the message") {
  const std::string p = tmpfile("tscg_grid_bad.bgf");
  {
    std::ofstream out(p, std::ios::binary);
    out << "NOPE";
  }
  CHECK_THROWS_WITH_AS(read_grid(p), doctest::Contains("offset"), std::runtime_error);

  // valid header, truncated payload
  GridSpec s{4, 4, 1.0};
  FeatureGrid f(s, 2, 1.0f);
  write_grid(p, f);
  const auto full = fs::file_size(p);
  fs::resize_file(p, full - 8);
  CHECK_THROWS_AS(read_grid(p), std::runtime_error);
  fs::remove(p);
}

TEST_CASE("loaded feature grid rejects semantic interpretation without names") {
  const std::string p = tmpfile("tscg_grid_f2.bgf");
  write_grid(p, FeatureGrid(GridSpec{2, 2, 1.0}, 1, 0.5f));
  CHECK_THROWS(read_grid(p).as_semantic());
  fs::remove(p);
}
