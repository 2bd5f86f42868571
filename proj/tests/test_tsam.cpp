#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "doctest.h"
#include "tscg/tsam.hpp"

using namespace tscg;

namespace {

std::mt19937_64 gen(99);

void fill_random(std::vector<float>& v, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  for (auto& x : v) x = static_cast<float>(d(gen));
}

// double-precision brute-force 3x3 convolution oracle
std::vector<double> conv_oracle(const std::vector<float>& in, int c_in, int rows,
                                int cols, const Conv3x3Layer& l) {
  std::vector<double> out(static_cast<std::size_t>(l.c_out) * rows * cols, 0.0);
  for (int co = 0; co < l.c_out; ++co)
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) {
        double acc = l.b[co];
        for (int ci = 0; ci < c_in; ++ci)
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              const int r = i + di, c = j + dj;
              if (r < 0 || r >= rows || c < 0 || c >= cols) continue;
              acc += static_cast<double>(
                         l.w[((static_cast<std::size_t>(co) * c_in + ci) * 9) +
                             (di + 1) * 3 + (dj + 1)]) *
                     in[(static_cast<std::size_t>(ci) * rows + r) * cols + c];
            }
        out[(static_cast<std::size_t>(co) * rows + i) * cols + j] = acc;
      }
  return out;
}

FusionParams random_fusion(int n_map, int width) {
  FusionParams p;
  p.phi1 = Conv3x3Layer(n_map, width);
  p.phi2 = Conv3x3Layer(2 * n_map, width);
  p.phi3 = Conv3x3Layer(width, n_map);
  // modest scales keep activations O(1) so f32 kernel rounding stays below
  // the 1e-6 comparison tolerance against the double oracle
  fill_random(p.phi1.w, 0.12);
  fill_random(p.phi1.b, 0.05);
  fill_random(p.phi2.w, 0.12);
  fill_random(p.phi2.b, 0.05);
  fill_random(p.phi3.w, 0.12);
  fill_random(p.phi3.b, 0.05);
  return p;
}

}  // namespace

TEST_CASE("align_grid with the identity transform is bit-exact") {
  const GridSpec s{16, 12, 0.5};
  FeatureGrid f(s, 3);
  fill_random(f.data);
  for (auto mode : {Interp::Nearest, Interp::Bilinear}) {
    InterpPolicy pol;
    pol.mode = mode;
    FeatureGrid out = align_grid(f, mat3_identity(), pol);
    CHECK(out.data == f.data);
  }
}

TEST_CASE("integer translation round trips exactly on interior cells") {
  const GridSpec s{16, 16, 0.5};
  FeatureGrid f(s, 2);
  fill_random(f.data);
  // moving the ego 2 cells forward shifts content 2 rows toward the rear
  const Mat3 fwd = pose_to_matrix(Pose2(-2 * s.resolution_m, 0, 0));
  const Mat3 back = pose_to_matrix(Pose2(2 * s.resolution_m, 0, 0));
  FeatureGrid shifted = align_grid(f, fwd);
  FeatureGrid restored = align_grid(shifted, back);
  for (int c = 0; c < f.channels; ++c)
    for (int i = 2; i < s.rows - 2; ++i)
      for (int j = 2; j < s.cols - 2; ++j)
        CHECK(restored.at(c, i, j) == f.at(c, i, j));
}

TEST_CASE("pure translation moves the expected cell") {
  const GridSpec s{8, 8, 1.0};
  FeatureGrid f(s, 1);
  f.at(0, 2, 3) = 1.0f;
  // prev pose maps into cur by a forward step of 1 m: content appears 1 row lower
  const Mat3 m = pose_to_matrix(Pose2(-1.0, 0, 0));
  FeatureGrid out = align_grid(f, m);
  CHECK(out.at(0, 3, 3) == 1.0f);
  CHECK(out.at(0, 2, 3) == 0.0f);
}

TEST_CASE("out-of-extent cells take the policy fill value") {
  const GridSpec s{8, 8, 1.0};
  FeatureGrid f(s, 1, 1.0f);
  InterpPolicy pol;
  pol.oob_fill = -7.0f;
  const Mat3 m = pose_to_matrix(Pose2(-100.0, 0, 0));  // far outside
  FeatureGrid out = align_grid(f, m, pol);
  for (float v : out.data) CHECK(v == -7.0f);
}

TEST_CASE("rotation by pi flips the grid center-symmetrically (nearest)") {
  const GridSpec s{8, 8, 1.0};
  FeatureGrid f(s, 1);
  fill_random(f.data);
  InterpPolicy pol;
  pol.mode = Interp::Nearest;
  FeatureGrid out = align_grid(f, pose_to_matrix(Pose2(0, 0, M_PI)), pol);
  for (int i = 0; i < s.rows; ++i)
    for (int j = 0; j < s.cols; ++j)
      CHECK(out.at(0, i, j) == f.at(0, s.rows - 1 - i, s.cols - 1 - j));
}

TEST_CASE("fusion ops match brute-force oracles on 100 random 8x8 instances") {
  const GridSpec s{8, 8, 0.5};
  const int n_map = 2, width = 3;
  for (int trial = 0; trial < 100; ++trial) {
    FusionParams p = random_fusion(n_map, width);
    ClassSet cs;
    cs.names = {"a", "b"};
    SemanticGrid prev(s, cs), cur(s, cs);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : prev.data) v = static_cast<float>(u(gen));
    for (auto& v : cur.data) v = static_cast<float>(u(gen));
    FeatureGrid pf(s, n_map), cf(s, n_map);
    fill_random(pf.data, 0.5);
    fill_random(cf.data, 0.5);

    // F_m = ReLU(phi1(prev_aligned + cur)); identity alignment here
    FeatureGrid f_m = fuse_map_level(prev, cur, p);
    std::vector<float> sum(prev.data.size());
    for (std::size_t q = 0; q < sum.size(); ++q) sum[q] = prev.data[q] + cur.data[q];
    auto want_m = conv_oracle(sum, n_map, s.rows, s.cols, p.phi1);
    for (std::size_t q = 0; q < f_m.data.size(); ++q)
      CHECK(std::abs(f_m.data[q] - std::max(0.0, want_m[q])) < 1e-6);

    // F_b = phi2(concat(align(prev_feat), cur_feat)) with identity m_ego
    FeatureGrid f_b = fuse_feature_level(pf, cf, mat3_identity(), p);
    std::vector<float> cat(pf.data.size() + cf.data.size());
    std::copy(pf.data.begin(), pf.data.end(), cat.begin());
    std::copy(cf.data.begin(), cf.data.end(), cat.begin() + pf.data.size());
    auto want_b = conv_oracle(cat, 2 * n_map, s.rows, s.cols, p.phi2);
    for (std::size_t q = 0; q < f_b.data.size(); ++q)
      CHECK(std::abs(f_b.data[q] - want_b[q]) < 1e-6);

    // F_f = phi3(F_m + F_b)
    FeatureGrid f_f = fuse_final(f_m, f_b, p);
    std::vector<float> sum2(f_m.data.size());
    for (std::size_t q = 0; q < sum2.size(); ++q) sum2[q] = f_m.data[q] + f_b.data[q];
    auto want_f = conv_oracle(sum2, width, s.rows, s.cols, p.phi3);
    for (std::size_t q = 0; q < f_f.data.size(); ++q)
      CHECK(std::abs(f_f.data[q] - want_f[q]) < 1e-6);
  }
}

TEST_CASE("fusion validates channel wiring") {
  FusionParams p = random_fusion(2, 3);
  p.phi2 = Conv3x3Layer(3, 3);  // wrong: must eat 2*N channels
  CHECK_THROWS(p.validate());
}
