#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "tscg/synth.hpp"

using namespace tscg;
namespace fs = std::filesystem;

namespace {

SceneConfig small_config() {
  SceneConfig cfg;
  cfg.frames = 4;
  cfg.spec = {32, 16, 0.5};
  cfg.road_half_width_m = 2.5;
  return cfg;
}

double image_mse(const SceneSequence& a, const SceneSequence& b) {
  double acc = 0;
  std::size_t n = 0;
  for (std::size_t f = 0; f < a.frames.size(); ++f)
    for (std::size_t k = 0; k < a.frames[f].images.size(); ++k) {
      const auto& x = a.frames[f].images[k].data;
      const auto& y = b.frames[f].images[k].data;
      for (std::size_t q = 0; q < x.size(); ++q) {
        const double d = static_cast<double>(x[q]) - y[q];
        acc += d * d;
      }
      n += x.size();
    }
  return acc / n;
}

std::string tmpdir(const char* name) {
  return (fs::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("scene generation is deterministic in the seed and validates input") {
  const SceneConfig cfg = small_config();
  SceneSequence a = generate_scene(5, cfg);
  SceneSequence b = generate_scene(5, cfg);
  REQUIRE(a.frames.size() == 4);
  for (std::size_t f = 0; f < a.frames.size(); ++f) {
    CHECK(a.frames[f].gt.data == b.frames[f].gt.data);
    CHECK(a.frames[f].global_pose.x_m == b.frames[f].global_pose.x_m);
    CHECK(a.frames[f].global_pose.yaw_rad == b.frames[f].global_pose.yaw_rad);
  }
  CHECK(a.centerline == b.centerline);
  SceneSequence c = generate_scene(6, cfg);
  CHECK(a.frames[0].gt.data != c.frames[0].gt.data);

  SceneConfig bad = cfg;
  bad.frames = 1;
  CHECK_THROWS(generate_scene(1, bad));
  bad = cfg;
  bad.road_half_width_m = 100.0;
  CHECK_THROWS(generate_scene(1, bad));
}

TEST_CASE("generated scenes contain the expected structures") {
  SceneSequence seq = generate_scene(11, small_config());
  bool any_crossing = false;
  for (const auto& fr : seq.frames) {
    const auto& gt = fr.gt;
    double divider = 0, boundary = 0, crossing = 0;
    for (std::size_t q = 0; q < gt.spec.cells(); ++q) {
      divider += gt.channel(0)[q];
      crossing += gt.channel(1)[q];
      boundary += gt.channel(2)[q];
    }
    CHECK(divider > 0);
    CHECK(boundary > divider);  // two road edges vs one centerline
    any_crossing |= crossing > 0;
    for (float v : gt.data) CHECK((v == 0.0f || v == 1.0f));
  }
  CHECK(any_crossing);

  // six-class scenes fill area classes too
  SceneConfig cfg6 = small_config();
  cfg6.class_set = ClassSet::sem6();
  SceneSequence s6 = generate_scene(11, cfg6);
  double drivable = 0;
  for (std::size_t q = 0; q < s6.config.spec.cells(); ++q)
    drivable += s6.frames[0].gt.channel(0)[q];
  CHECK(drivable > 50);  // the road surface is an area, not a line
}

TEST_CASE("polyline rasterization is supercover-connected") {
  const GridSpec s{16, 16, 1.0};
  std::vector<float> out(s.cells(), 0.0f);

  // a segment within a single cell marks exactly that cell
  raster_polyline({{2.1, 3.1}, {2.3, 3.3}}, s, out.data());
  const auto ij = s.metric_to_cell(2.2, 3.2);
  const int mi = static_cast<int>(std::lround(ij[0]));
  const int mj = static_cast<int>(std::lround(ij[1]));
  int count = 0;
  for (float v : out) count += v == 1.0f;
  CHECK(count == 1);
  CHECK(out[static_cast<std::size_t>(mi) * s.cols + mj] == 1.0f);

  // a diagonal crossing the grid yields a 4-connected chain touching both ends
  std::fill(out.begin(), out.end(), 0.0f);
  raster_polyline({{-7.5, -7.5}, {7.5, 7.5}}, s, out.data());
  std::set<std::pair<int, int>> cells;
  for (int i = 0; i < s.rows; ++i)
    for (int j = 0; j < s.cols; ++j)
      if (out[static_cast<std::size_t>(i) * s.cols + j] == 1.0f) cells.insert({i, j});
  CHECK(cells.size() >= 31);  // supercover of a 16-cell diagonal
  for (auto [i, j] : cells) {
    if (cells.size() == 1) break;
    int neighbors = 0;
    neighbors += cells.count({i - 1, j});
    neighbors += cells.count({i + 1, j});
    neighbors += cells.count({i, j - 1});
    neighbors += cells.count({i, j + 1});
    CHECK(neighbors >= 1);  // edge-connected, no diagonal-only hops
  }

  // a segment far outside the grid marks nothing
  std::fill(out.begin(), out.end(), 0.0f);
  raster_polyline({{100.0, 100.0}, {120.0, 100.0}}, s, out.data());
  for (float v : out) CHECK(v == 0.0f);
}

TEST_CASE("centerline rasterization produces a binary path near the ego") {
  SceneSequence seq = generate_scene(3, small_config());
  CenterlineGrid cl = rasterize_centerline(seq, 1);
  int on = 0;
  for (float v : cl.data) {
    CHECK((v == 0.0f || v == 1.0f));
    on += v == 1.0f;
  }
  CHECK(on >= seq.config.spec.rows / 2);  // the road runs through the window
  CHECK_THROWS(rasterize_centerline(seq, 99));
}

TEST_CASE("random_mask hits the requested fraction and only zeroes blocks") {
  const GridSpec s{64, 32, 0.5};
  SemanticGrid g(s, ClassSet::hd3(), 1.0f);
  double frac_sum = 0;
  const int trials = 2000;
  for (int k = 0; k < trials; ++k) {
    SemanticGrid m = random_mask(g, 0.5, 8, 1000 + k);
    std::size_t zero = 0;
    for (std::size_t q = 0; q < s.cells(); ++q) {
      const bool z0 = m.channel(0)[q] == 0.0f;
      // masking hits all channels identically
      CHECK((m.channel(1)[q] == 0.0f) == z0);
      CHECK((m.channel(2)[q] == 0.0f) == z0);
      zero += z0;
    }
    frac_sum += static_cast<double>(zero) / s.cells();
    if (k == 0) {
      // zeros come in full 8x8 blocks
      for (int bi = 0; bi < s.rows / 8; ++bi)
        for (int bj = 0; bj < s.cols / 8; ++bj) {
          int z = 0;
          for (int i = bi * 8; i < bi * 8 + 8; ++i)
            for (int j = bj * 8; j < bj * 8 + 8; ++j) z += m.at(0, i, j) == 0.0f;
          CHECK((z == 0 || z == 64));
        }
    }
  }
  CHECK(std::abs(frac_sum / trials - 0.5) < 0.02);

  // edge ratios and argument validation
  SemanticGrid id = random_mask(g, 0.0, 8, 1);
  CHECK(id.data == g.data);
  SemanticGrid full = random_mask(g, 1.0, 8, 1);
  for (float v : full.data) CHECK(v == 0.0f);
  CHECK_THROWS(random_mask(g, -0.1, 8, 1));
  CHECK_THROWS(random_mask(g, 0.5, 0, 1));
}

TEST_CASE("corruption name round trips and the parameter table serializes") {
  using K = CorruptionKind;
  for (K k : {K::Brightness, K::CameraCrash, K::ColorQuant, K::Dark, K::Fog, K::FrameLost,
              K::MotionBlur, K::Snow}) {
    auto back = corruption_from_string(to_string(k));
    REQUIRE(back.has_value());
    CHECK(*back == k);
  }
  for (Severity s : {Severity::Easy, Severity::Mid, Severity::Hard}) {
    auto back = severity_from_string(to_string(s));
    REQUIRE(back.has_value());
    CHECK(*back == s);
  }
  CHECK(!corruption_from_string("Sandstorm").has_value());
  CHECK(!severity_from_string("Impossible").has_value());
  const std::string table = severity_table_json();
  for (const char* key : {"Brightness", "CameraCrash", "ColorQuant", "Dark", "Fog",
                          "FrameLost", "MotionBlur", "Snow"})
    CHECK(table.find(key) != std::string::npos);
}

TEST_CASE("corruptions degrade images monotonically and never touch gt") {
  SceneSequence seq = generate_scene(21, small_config());
  const CameraRig rig = CameraRig::surround(32, 48, 70 * M_PI / 180, 1.5, 0.35);
  ensure_images(seq, rig);

  SceneSequence bare = generate_scene(21, small_config());
  CHECK_THROWS(corrupt(bare, CorruptionSpec{}, 1));  // images required

  using K = CorruptionKind;
  for (K k : {K::Brightness, K::CameraCrash, K::ColorQuant, K::Dark, K::Fog, K::FrameLost,
              K::MotionBlur, K::Snow}) {
    double prev = -1.0;
    for (Severity sv : {Severity::Easy, Severity::Mid, Severity::Hard}) {
      SceneSequence c = corrupt(seq, CorruptionSpec{k, sv}, 77);
      // deterministic in the seed
      SceneSequence c2 = corrupt(seq, CorruptionSpec{k, sv}, 77);
      CHECK(image_mse(c, c2) == 0.0);
      // gt and poses unchanged
      for (std::size_t f = 0; f < seq.frames.size(); ++f) {
        CHECK(c.frames[f].gt.data == seq.frames[f].gt.data);
        CHECK(c.frames[f].global_pose.x_m == seq.frames[f].global_pose.x_m);
      }
      const double mse = image_mse(seq, c);
      INFO(to_string(k) << " " << to_string(sv));
      CHECK(mse > prev);  // strictly increasing with severity
      prev = mse;
      for (const auto& fr : c.frames)
        for (const auto& im : fr.images)
          for (float v : im.data) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
          }
    }
  }
}

TEST_CASE("dataset save/load round trips and re-saving is byte-identical") {
  std::vector<SceneSequence> data;
  data.push_back(generate_scene(1, small_config()));
  data.push_back(generate_scene(2, small_config()));
  const std::string d1 = tmpdir("tscg_ds1"), d2 = tmpdir("tscg_ds2");
  save_dataset(d1, data);
  std::vector<SceneSequence> loaded = load_dataset(d1);
  REQUIRE(loaded.size() == 2);
  for (std::size_t s = 0; s < 2; ++s) {
    CHECK(loaded[s].seed == data[s].seed);
    CHECK(loaded[s].centerline == data[s].centerline);
    CHECK(loaded[s].config.spec == data[s].config.spec);
    CHECK(loaded[s].config.class_set.names == data[s].config.class_set.names);
    REQUIRE(loaded[s].frames.size() == data[s].frames.size());
    for (std::size_t f = 0; f < loaded[s].frames.size(); ++f) {
      CHECK(loaded[s].frames[f].gt.data == data[s].frames[f].gt.data);  // bit-exact
      CHECK(loaded[s].frames[f].global_pose.x_m == data[s].frames[f].global_pose.x_m);
      CHECK(loaded[s].frames[f].global_pose.y_m == data[s].frames[f].global_pose.y_m);
      CHECK(loaded[s].frames[f].global_pose.yaw_rad == data[s].frames[f].global_pose.yaw_rad);
    }
  }
  // a second generation of the saved tree is byte-identical
  save_dataset(d2, loaded);
  for (const auto& entry : fs::recursive_directory_iterator(d1)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), d1);
    std::ifstream f1(entry.path(), std::ios::binary), f2(fs::path(d2) / rel, std::ios::binary);
    REQUIRE(f2.good());
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
  }
  CHECK_THROWS(load_dataset(tmpdir("tscg_ds_missing")));
  fs::remove_all(d1);
  fs::remove_all(d2);
}
