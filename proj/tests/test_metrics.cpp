#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "doctest.h"
#include "tscg/metrics.hpp"

using namespace tscg;

namespace {

const GridSpec kSpec{4, 4, 1.0};

SemanticGrid rand_binary(std::mt19937_64& gen, const GridSpec& s, const ClassSet& cs,
                         double p_on = 0.5) {
  std::uniform_real_distribution<double> d(0.0, 1.0);
  SemanticGrid g(s, cs);
  for (auto& v : g.data) v = d(gen) < p_on ? 1.0f : 0.0f;
  return g;
}

SemanticGrid rand_probs(std::mt19937_64& gen, const GridSpec& s, const ClassSet& cs) {
  std::uniform_real_distribution<double> d(0.02, 0.98);
  SemanticGrid g(s, cs);
  for (auto& v : g.data) v = static_cast<float>(d(gen));
  return g;
}

}  // namespace

TEST_CASE("focal loss hand value: y=1, p=0.5, gamma=2 gives ln(2)/4") {
  GridSpec one{2, 2, 1.0};  // every cell identical, so the mean is the cell value
  ClassSet cs;
  cs.names = {"only"};
  SemanticGrid y(one, cs, 1.0f), p(one, cs, 0.5f);
  LossConfig cfg;
  cfg.gamma = 2.0;
  CHECK(focal_loss(y, p, cfg) == doctest::Approx(std::log(2.0) / 4.0).epsilon(1e-9));
}

TEST_CASE("focal loss with gamma=0 equals mean BCE within 1e-9") {
  std::mt19937_64 gen(5);
  auto y = rand_binary(gen, kSpec, ClassSet::hd3());
  auto p = rand_probs(gen, kSpec, ClassSet::hd3());
  LossConfig cfg;
  cfg.gamma = 0.0;

  double bce = 0;
  for (int c = 0; c < 3; ++c) {
    double acc = 0;
    for (std::size_t q = 0; q < kSpec.cells(); ++q) {
      const double yy = y.channel(c)[q], pp = p.channel(c)[q];
      acc += -(yy * std::log(pp) + (1 - yy) * std::log(1 - pp));
    }
    bce += acc / kSpec.cells();
  }
  bce /= 3.0;
  CHECK(focal_loss(y, p, cfg) == doctest::Approx(bce).epsilon(1e-9));
}

TEST_CASE("focal loss rejects non-binary targets and shape mismatch") {
  SemanticGrid y(kSpec, ClassSet::hd3(), 0.3f);
  SemanticGrid p(kSpec, ClassSet::hd3(), 0.5f);
  CHECK_THROWS(focal_loss(y, p, LossConfig{}));
  SemanticGrid y2(GridSpec{2, 2, 1.0}, ClassSet::hd3(), 0.0f);
  CHECK_THROWS(focal_loss(y2, p, LossConfig{}));
}

TEST_CASE("analytic focal gradient matches central differences, gamma in {0,1,2}") {
  std::mt19937_64 gen(9);
  auto y = rand_binary(gen, kSpec, ClassSet::hd3());
  auto p = rand_probs(gen, kSpec, ClassSet::hd3());
  for (double gamma : {0.0, 1.0, 2.0}) {
    LossConfig cfg;
    cfg.gamma = gamma;
    auto grad = focal_loss_grad(y, p, cfg);
    const double h = 1e-6;
    for (std::size_t q = 0; q < p.data.size(); q += 5) {
      SemanticGrid pp = p, pm = p;
      pp.data[q] += static_cast<float>(h);
      pm.data[q] -= static_cast<float>(h);
      // recompute in double: perturb via from_values to keep the clamp
      const double fd = (focal_loss(y, pp, cfg) - focal_loss(y, pm, cfg)) /
                        (static_cast<double>(pp.data[q]) - pm.data[q]);
      const double rel = std::abs(grad[q] - fd) / std::max(1e-8, std::abs(fd));
      CHECK(rel < 1e-4);
    }
  }
}

TEST_CASE("focal gradient is zero where the clamp is active") {
  GridSpec one{2, 2, 1.0};
  ClassSet cs;
  cs.names = {"only"};
  SemanticGrid y(one, cs, 1.0f);
  SemanticGrid p(one, cs, 0.5f);
  p.data[0] = 0.0f;  // clamped to epsilon inside the loss
  p.data[1] = 1.0f;  // clamped to 1 - epsilon
  auto g = focal_loss_grad(y, p, LossConfig{});
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 0.0);
  CHECK(g[2] != 0.0);
}

TEST_CASE("IoU matches a counting oracle exactly on 1000 random pairs") {
  std::mt19937_64 gen(21);
  const GridSpec s{16, 16, 1.0};
  ClassSet cs;
  cs.names = {"a"};
  for (int trial = 0; trial < 1000; ++trial) {
    auto pred = rand_binary(gen, s, cs, 0.3);
    auto gt = rand_binary(gen, s, cs, 0.3);
    long inter = 0, uni = 0;
    for (std::size_t q = 0; q < s.cells(); ++q) {
      const bool a = pred.data[q] > 0.5f, b = gt.data[q] > 0.5f;
      inter += a && b;
      uni += a || b;
    }
    const double want = uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
    CHECK(iou(pred, gt, 0) == want);  // exact, both sides count integers
  }
}

TEST_CASE("IoU of two empty grids is 1 and threshold is strict") {
  SemanticGrid a(kSpec, ClassSet::hd3(), 0.0f);
  SemanticGrid b(kSpec, ClassSet::hd3(), 0.0f);
  CHECK(iou(a, b, 0) == 1.0);
  // exactly-at-threshold counts as empty
  SemanticGrid c(kSpec, ClassSet::hd3(), 0.5f);
  CHECK(iou(c, b, 1, 0.5) == 1.0);
}

TEST_CASE("miou report aggregates classes and serializes") {
  std::mt19937_64 gen(3);
  auto pred = rand_binary(gen, kSpec, ClassSet::hd3());
  auto gt = rand_binary(gen, kSpec, ClassSet::hd3());
  EvalReport r = miou(pred, gt);
  REQUIRE(r.class_iou.size() == 3);
  double mean = (r.class_iou[0] + r.class_iou[1] + r.class_iou[2]) / 3.0;
  CHECK(r.miou == doctest::Approx(mean).epsilon(1e-12));
  CHECK(r.to_json().find("miou") != std::string::npos);
  CHECK(r.to_table().find("mIoU") != std::string::npos);
  auto table = report_table({r, r}, {"row_a", "row_b"});
  CHECK(table.find("row_a") != std::string::npos);
  CHECK(table.find("row_b") != std::string::npos);
}
