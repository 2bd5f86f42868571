#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "tscg/kernels.hpp"

using namespace tscg;

namespace {

std::mt19937_64 gen(12345);

std::vector<float> randv(std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(d(gen));
  return v;
}

// independent nested-loop oracle for the forward convolution
std::vector<float> conv_oracle(const std::vector<float>& in, int c_in, int rows,
                               int cols, const std::vector<float>& w,
                               const std::vector<float>& b, int c_out) {
  std::vector<float> out(static_cast<std::size_t>(c_out) * rows * cols, 0.0f);
  for (int co = 0; co < c_out; ++co)
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) {
        double acc = b[co];
        for (int ci = 0; ci < c_in; ++ci)
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              const int r = i + di, c = j + dj;
              if (r < 0 || r >= rows || c < 0 || c >= cols) continue;
              acc += static_cast<double>(
                         w[((static_cast<std::size_t>(co) * c_in + ci) * 9) +
                           (di + 1) * 3 + (dj + 1)]) *
                     in[(static_cast<std::size_t>(ci) * rows + r) * cols + c];
            }
        out[(static_cast<std::size_t>(co) * rows + i) * cols + j] =
            static_cast<float>(acc);
      }
  return out;
}

void check_close(const std::vector<float>& a, const std::vector<float>& b,
                 double tol = 1e-4) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double scale = std::max(1.0, std::abs(static_cast<double>(a[i])));
    REQUIRE(std::abs(static_cast<double>(a[i]) - b[i]) <= tol * scale);
  }
}

struct Case {
  int c_in, c_out, rows, cols;
};

std::vector<Case> cases() {
  return {{1, 1, 3, 3},  {2, 3, 5, 7},   {3, 2, 8, 8},    {4, 4, 16, 32},
          {1, 5, 7, 33}, {6, 1, 13, 11}, {16, 16, 12, 20}};
}

}  // namespace

TEST_CASE("conv3x3 forward matches the nested-loop oracle on both backends") {
  for (const auto& cs : cases()) {
    auto in = randv(static_cast<std::size_t>(cs.c_in) * cs.rows * cs.cols);
    auto w = randv(static_cast<std::size_t>(cs.c_out) * cs.c_in * 9, 0.5);
    auto b = randv(cs.c_out, 0.1);
    auto want = conv_oracle(in, cs.c_in, cs.rows, cs.cols, w, b, cs.c_out);

    std::vector<float> got(want.size());
    kernels::scalar_backend().conv3x3(in.data(), cs.c_in, cs.rows, cs.cols, w.data(),
                                      b.data(), cs.c_out, got.data());
    check_close(got, want);
    if (kernels::avx2_supported()) {
      std::fill(got.begin(), got.end(), -99.0f);
      kernels::avx2_backend().conv3x3(in.data(), cs.c_in, cs.rows, cs.cols, w.data(),
                                      b.data(), cs.c_out, got.data());
      check_close(got, want);
    }
  }
}

TEST_CASE("conv3x3 backward-data equals the scalar reference on AVX2") {
  if (!kernels::avx2_supported()) return;
  for (const auto& cs : cases()) {
    auto gout = randv(static_cast<std::size_t>(cs.c_out) * cs.rows * cs.cols);
    auto w = randv(static_cast<std::size_t>(cs.c_out) * cs.c_in * 9, 0.5);
    std::vector<float> a(static_cast<std::size_t>(cs.c_in) * cs.rows * cs.cols, 0.0f);
    std::vector<float> b = a;
    kernels::scalar_backend().conv3x3_bwd_data(gout.data(), cs.c_out, cs.rows, cs.cols,
                                               w.data(), cs.c_in, a.data());
    kernels::avx2_backend().conv3x3_bwd_data(gout.data(), cs.c_out, cs.rows, cs.cols,
                                             w.data(), cs.c_in, b.data());
    check_close(a, b);
  }
}

TEST_CASE("conv3x3 backward-data is the adjoint of the forward map") {
  // <conv(x), y> == <x, conv_bwd_data(y)> for every backend
  const Case cs{3, 2, 6, 9};
  auto x = randv(static_cast<std::size_t>(cs.c_in) * cs.rows * cs.cols);
  auto y = randv(static_cast<std::size_t>(cs.c_out) * cs.rows * cs.cols);
  auto w = randv(static_cast<std::size_t>(cs.c_out) * cs.c_in * 9, 0.5);
  std::vector<float> zero_b(cs.c_out, 0.0f);
  for (const auto* bk : {&kernels::scalar_backend(),
                         kernels::avx2_supported() ? &kernels::avx2_backend() : nullptr}) {
    if (!bk) continue;
    std::vector<float> fx(y.size());
    bk->conv3x3(x.data(), cs.c_in, cs.rows, cs.cols, w.data(), zero_b.data(), cs.c_out,
                fx.data());
    std::vector<float> bty(x.size(), 0.0f);
    bk->conv3x3_bwd_data(y.data(), cs.c_out, cs.rows, cs.cols, w.data(), cs.c_in,
                         bty.data());
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < fx.size(); ++i) lhs += static_cast<double>(fx[i]) * y[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += static_cast<double>(x[i]) * bty[i];
    REQUIRE(lhs == doctest::Approx(rhs).epsilon(1e-4));
  }
}

TEST_CASE("conv3x3 weight gradient matches finite differences") {
  const Case cs{2, 2, 5, 6};
  auto in = randv(static_cast<std::size_t>(cs.c_in) * cs.rows * cs.cols);
  auto w = randv(static_cast<std::size_t>(cs.c_out) * cs.c_in * 9, 0.5);
  auto b = randv(cs.c_out, 0.1);
  auto gout = randv(static_cast<std::size_t>(cs.c_out) * cs.rows * cs.cols);

  auto loss = [&](const std::vector<float>& wi, const std::vector<float>& bi) {
    std::vector<float> out(gout.size());
    kernels::scalar_backend().conv3x3(in.data(), cs.c_in, cs.rows, cs.cols, wi.data(),
                                      bi.data(), cs.c_out, out.data());
    double s = 0;
    for (std::size_t q = 0; q < out.size(); ++q) s += static_cast<double>(out[q]) * gout[q];
    return s;
  };

  for (const auto* bk : {&kernels::scalar_backend(),
                         kernels::avx2_supported() ? &kernels::avx2_backend() : nullptr}) {
    if (!bk) continue;
    std::vector<float> gw(w.size(), 0.0f), gb(b.size(), 0.0f);
    bk->conv3x3_bwd_weights(in.data(), cs.c_in, cs.rows, cs.cols, gout.data(), cs.c_out,
                            gw.data(), gb.data());
    const float h = 1e-2f;
    for (std::size_t q = 0; q < w.size(); q += 7) {
      auto wp = w, wm = w;
      wp[q] += h;
      wm[q] -= h;
      const double fd = (loss(wp, b) - loss(wm, b)) / (2.0 * h);
      REQUIRE(gw[q] == doctest::Approx(fd).epsilon(2e-3));
    }
    for (int c = 0; c < cs.c_out; ++c) {
      auto bp = b, bm = b;
      bp[c] += h;
      bm[c] -= h;
      const double fd = (loss(w, bp) - loss(w, bm)) / (2.0 * h);
      REQUIRE(gb[c] == doctest::Approx(fd).epsilon(2e-3));
    }
  }
}

TEST_CASE("elementwise kernels agree across backends") {
  if (!kernels::avx2_supported()) return;
  auto x = randv(1003), y = randv(1003);
  std::vector<float> a(x.size()), b(x.size());

  kernels::scalar_backend().relu(x.data(), a.data(), x.size());
  kernels::avx2_backend().relu(x.data(), b.data(), x.size());
  CHECK(a == b);

  kernels::scalar_backend().sigmoid(x.data(), a.data(), x.size());
  kernels::avx2_backend().sigmoid(x.data(), b.data(), x.size());
  check_close(a, b, 1e-6);

  kernels::scalar_backend().axpby(x.size(), 1.5f, x.data(), -0.25f, y.data(), a.data());
  kernels::avx2_backend().axpby(x.size(), 1.5f, x.data(), -0.25f, y.data(), b.data());
  check_close(a, b, 1e-6);

  const float d1 = kernels::scalar_backend().dot(x.size(), x.data(), y.data());
  const float d2 = kernels::avx2_backend().dot(x.size(), x.data(), y.data());
  CHECK(d1 == doctest::Approx(d2).epsilon(1e-4));

  kernels::scalar_backend().relu_bwd(x.size(), x.data(), y.data(), a.data());
  kernels::avx2_backend().relu_bwd(x.size(), x.data(), y.data(), b.data());
  CHECK(a == b);
}

TEST_CASE("backend selection is explicit and reversible") {
  const std::string before = kernels::active().name;
  kernels::set_backend("scalar");
  CHECK(std::string(kernels::active().name) == "scalar");
  if (kernels::avx2_supported()) {
    kernels::set_backend("avx2");
    CHECK(std::string(kernels::active().name) == "avx2");
  }
  CHECK_THROWS(kernels::set_backend("neon"));
  kernels::set_backend(before);
}
