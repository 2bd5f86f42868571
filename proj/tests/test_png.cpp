#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdint>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "tscg/png_io.hpp"

using namespace tscg;
namespace fs = std::filesystem;

namespace {

std::string tmpfile(const char* name) {
  return (fs::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

std::uint32_t be32(const std::string& s, std::size_t off) {
  return (static_cast<std::uint32_t>(static_cast<unsigned char>(s[off])) << 24) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + 1])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + 2])) << 8) |
         static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + 3]));
}

}  // namespace

TEST_CASE("the class palette starts blue, green, purple") {
  const auto blue = class_color(0);
  CHECK(blue[2] > blue[0]);
  CHECK(blue[2] > blue[1]);
  const auto green = class_color(1);
  CHECK(green[1] > green[0]);
  CHECK(green[1] > green[2]);
  const auto purple = class_color(2);  // red and blue high, green low
  CHECK(purple[0] > purple[1]);
  CHECK(purple[2] > purple[1]);
  CHECK(class_color(6) == class_color(0));  // wraps
}

TEST_CASE("png writer emits a valid signature and IHDR") {
  const std::string p = tmpfile("tscg_raw.png");
  std::vector<unsigned char> rgb(5 * 3 * 3, 128);
  write_png(p, 5, 3, rgb);
  const std::string s = slurp(p);
  REQUIRE(s.size() > 33);
  const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  for (int k = 0; k < 8; ++k) CHECK(static_cast<unsigned char>(s[k]) == sig[k]);
  CHECK(s.substr(12, 4) == "IHDR");
  CHECK(be32(s, 16) == 5);   // width
  CHECK(be32(s, 20) == 3);   // height
  CHECK(s.find("IDAT") != std::string::npos);
  CHECK(s.substr(s.size() - 8, 4) == "IEND");
  fs::remove(p);

  CHECK_THROWS(write_png(tmpfile("tscg_bad.png"), 4, 4, rgb));  // wrong buffer size
}

TEST_CASE("semantic png scales the grid and is deterministic") {
  GridSpec spec{8, 4, 0.5};
  SemanticGrid g(spec, ClassSet::hd3());
  g.at(0, 1, 1) = 1.0f;
  g.at(1, 2, 2) = 0.9f;
  g.at(2, 3, 3) = 0.8f;
  const std::string p1 = tmpfile("tscg_sem1.png"), p2 = tmpfile("tscg_sem2.png");
  write_semantic_png(p1, g, 0.5, 4);
  write_semantic_png(p2, g, 0.5, 4);
  const std::string s1 = slurp(p1), s2 = slurp(p2);
  CHECK(s1 == s2);
  CHECK(be32(s1, 16) == 16);  // 4 cols * scale 4
  CHECK(be32(s1, 20) == 32);
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("heat png checks the channel index") {
  FeatureGrid f(GridSpec{4, 4, 1.0}, 2, 0.5f);
  const std::string p = tmpfile("tscg_heat.png");
  write_heat_png(p, f, 1, 2);
  CHECK(fs::file_size(p) > 0);
  CHECK_THROWS(write_heat_png(p, f, 5, 2));
  fs::remove(p);
}
