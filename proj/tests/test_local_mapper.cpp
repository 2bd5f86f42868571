#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "tscg/local_mapper.hpp"
#include "tscg/metrics.hpp"

using namespace tscg;
namespace fs = std::filesystem;

namespace {
const GridSpec kSpec{64, 32, 0.5};

CameraModel forward_cam() {
  CameraModel c;
  c.width_px = 64;
  c.height_px = 40;
  c.focal_px = 32.0 / std::tan(35.0 * M_PI / 180.0);
  c.u0 = 31.5;
  c.v0 = 19.5;
  c.mount_z = 1.5;
  c.mount_pitch = 0.35;
  return c;
}
}  // namespace

TEST_CASE("camera validation") {
  CameraModel c = forward_cam();
  c.validate();
  c.focal_px = 0;
  CHECK_THROWS(c.validate());
  c = forward_cam();
  c.mount_z = 0;  // camera on the ground sees no ground plane
  CHECK_THROWS(c.validate());
  CameraRig rig = CameraRig::surround(40, 64, 70 * M_PI / 180, 1.5, 0.35);
  rig.validate();
  CHECK(rig.cameras.size() == 6);
}

TEST_CASE("optical axis hits the ground where the geometry says") {
  // the center pixel's ray meets z=0 at x = mount_z / tan(pitch)
  CameraModel cam = forward_cam();
  const double d = cam.mount_z / std::tan(cam.mount_pitch);
  SemanticGrid gt(kSpec, ClassSet::hd3());
  // occupy a 3x3 block around that ground point in class 0
  const auto ij = kSpec.metric_to_cell(d, 0.0);
  const int ci = static_cast<int>(std::lround(ij[0]));
  const int cj = static_cast<int>(std::lround(ij[1]));
  for (int i = ci - 1; i <= ci + 1; ++i)
    for (int j = cj - 1; j <= cj + 1; ++j) gt.at(0, i, j) = 1.0f;

  PerspectiveImage img = render_perspective(gt, cam);
  CHECK(img.height == 40);
  CHECK(img.width == 64);
  // v0/u0 are fractional (pixel centers), so probe the four center pixels
  float best = 0;
  for (int v = 19; v <= 20; ++v)
    for (int u = 31; u <= 32; ++u) best = std::max(best, img.at(0, v, u));
  CHECK(best == 1.0f);
  // other classes stay dark
  for (int v = 0; v < img.height; ++v)
    for (int u = 0; u < img.width; ++u) CHECK(img.at(1, v, u) == 0.0f);
}

TEST_CASE("pixels above the horizon never sample the ground") {
  CameraModel cam = forward_cam();
  SemanticGrid gt(kSpec, ClassSet::hd3(), 1.0f);  // everything occupied
  PerspectiveImage img = render_perspective(gt, cam);
  // top row rays point above the horizontal for this pitch/fov
  for (int u = 0; u < img.width; ++u) CHECK(img.at(0, 0, u) == 0.0f);
  // bottom row looks steeply down and must see the occupied plane
  CHECK(img.at(0, img.height - 1, img.width / 2) == 1.0f);
}

TEST_CASE("ipm round trip separates occupied from empty cells") {
  CameraRig rig = CameraRig::surround(40, 64, 70 * M_PI / 180, 1.5, 0.35);
  SemanticGrid gt(kSpec, ClassSet::hd3());
  // a thick cross through the ego cell, plus a side blob in class 1
  for (int i = 20; i < 44; ++i)
    for (int j = 14; j < 18; ++j) gt.at(0, i, j) = 1.0f;
  for (int i = 28; i < 36; ++i)
    for (int j = 4; j < 12; ++j) gt.at(1, i, j) = 1.0f;

  auto images = render_rig(gt, rig);
  CHECK(images.size() == 6);
  FeatureGrid feat = ipm_warp(images, rig, kSpec);
  CHECK(feat.channels == 3);

  for (int c = 0; c < 2; ++c) {
    double on = 0, off = 0;
    int n_on = 0, n_off = 0;
    for (int i = 0; i < kSpec.rows; ++i)
      for (int j = 0; j < kSpec.cols; ++j) {
        if (gt.at(c, i, j) > 0.5f) {
          on += feat.at(c, i, j);
          ++n_on;
        } else {
          off += feat.at(c, i, j);
          ++n_off;
        }
      }
    on /= n_on;
    off /= n_off;
    CHECK(on > 0.5);
    CHECK(off < 0.1);
    CHECK(on - off > 0.4);
  }
  for (float v : feat.data) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("decode head with a confident diagonal recovers the map") {
  const int n = 3;
  DecodeHead head(n, n);
  for (int c = 0; c < n; ++c) {
    head.weights[c * n + c] = 20.0f;
    head.bias[c] = -10.0f;
  }
  SemanticGrid gt(kSpec, ClassSet::hd3());
  for (int i = 10; i < 30; ++i) gt.at(2, i, 20) = 1.0f;
  SemanticGrid out = decode_map(gt.as_features(), head, ClassSet::hd3());
  EvalReport r = miou(out, gt);
  CHECK(r.miou == 1.0);
}

TEST_CASE("decode head shape checks") {
  DecodeHead head(2, 3);
  FeatureGrid f(kSpec, 3);
  CHECK_THROWS(decode_map(f, head, ClassSet::hd3()));
}

TEST_CASE("pgm writer emits a valid header") {
  PerspectiveImage img(0, 1, 4, 6);
  img.at(0, 1, 2) = 0.5f;
  const std::string p = (fs::temp_directory_path() / "tscg_cam.pgm").string();
  write_pgm(p, img, 0);
  std::ifstream in(p, std::ios::binary);
  std::string magic;
  int w, h, maxv;
  in >> magic >> w >> h >> maxv;
  CHECK(magic == "P5");
  CHECK(w == 6);
  CHECK(h == 4);
  CHECK(maxv == 255);
  fs::remove(p);
}
