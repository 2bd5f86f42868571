#include "tscg/png_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace tscg {

namespace {

void put_u32be(std::vector<unsigned char>& v, std::uint32_t x) {
  v.push_back(static_cast<unsigned char>(x >> 24));
  v.push_back(static_cast<unsigned char>(x >> 16));
  v.push_back(static_cast<unsigned char>(x >> 8));
  v.push_back(static_cast<unsigned char>(x));
}

void write_chunk(std::ofstream& out, const char type[4],
                 const std::vector<unsigned char>& data) {
  std::vector<unsigned char> buf;
  put_u32be(buf, static_cast<std::uint32_t>(data.size()));
  buf.insert(buf.end(), type, type + 4);
  buf.insert(buf.end(), data.begin(), data.end());
  const auto crc = crc32(0, buf.data() + 4, static_cast<uInt>(buf.size() - 4));
  put_u32be(buf, static_cast<std::uint32_t>(crc));
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
}

constexpr unsigned char kPalette[][3] = {
    {60, 120, 230},   // blue
    {60, 200, 90},    // green
    {170, 80, 200},   // purple
    {230, 180, 60},   // amber
    {230, 90, 90},    // red
    {90, 220, 220},   // cyan
};
constexpr unsigned char kBackground[3] = {40, 40, 40};

}  // namespace

std::array<unsigned char, 3> class_color(int index) {
  const int npal = static_cast<int>(sizeof(kPalette) / sizeof(kPalette[0]));
  const auto* c = kPalette[((index % npal) + npal) % npal];
  return {c[0], c[1], c[2]};
}

void write_png(const std::string& path, int width, int height,
               const std::vector<unsigned char>& rgb) {
  if (width < 1 || height < 1 ||
      rgb.size() != static_cast<std::size_t>(width) * height * 3)
    throw std::invalid_argument("write_png: buffer size does not match dimensions");

  // filter byte 0 in front of each scanline
  std::vector<unsigned char> raw;
  raw.reserve(static_cast<std::size_t>(height) * (width * 3 + 1));
  for (int y = 0; y < height; ++y) {
    raw.push_back(0);
    const auto* row = rgb.data() + static_cast<std::size_t>(y) * width * 3;
    raw.insert(raw.end(), row, row + static_cast<std::size_t>(width) * 3);
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> z(zlen);
  if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("write_png: deflate failed");
  z.resize(zlen);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_png: cannot open " + path);
  static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  out.write(reinterpret_cast<const char*>(sig), 8);

  std::vector<unsigned char> ihdr;
  put_u32be(ihdr, static_cast<std::uint32_t>(width));
  put_u32be(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(2);  // RGB
  ihdr.push_back(0);  // deflate
  ihdr.push_back(0);  // filtering
  ihdr.push_back(0);  // no interlace
  write_chunk(out, "IHDR", ihdr);
  write_chunk(out, "IDAT", z);
  write_chunk(out, "IEND", {});
  if (!out) throw std::runtime_error("write_png: write failed for " + path);
}

void write_semantic_png(const std::string& path, const SemanticGrid& grid,
                        double threshold, int scale) {
  if (scale < 1) throw std::invalid_argument("write_semantic_png: scale must be >= 1");
  const int rows = grid.spec.rows, cols = grid.spec.cols;
  const int W = cols * scale, H = rows * scale;
  std::vector<unsigned char> rgb(static_cast<std::size_t>(W) * H * 3);
  const int npal = static_cast<int>(sizeof(kPalette) / sizeof(kPalette[0]));
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      int best = -1;
      float bestp = static_cast<float>(threshold);
      for (int c = 0; c < grid.classes.size(); ++c)
        if (grid.at(c, i, j) > bestp) {  // strict: ties keep the earlier class
          bestp = grid.at(c, i, j);
          best = c;
        }
      const unsigned char* col = best < 0 ? kBackground : kPalette[best % npal];
      for (int dy = 0; dy < scale; ++dy)
        for (int dx = 0; dx < scale; ++dx) {
          auto* px = rgb.data() +
                     (static_cast<std::size_t>(i * scale + dy) * W + j * scale + dx) * 3;
          px[0] = col[0];
          px[1] = col[1];
          px[2] = col[2];
        }
    }
  write_png(path, W, H, rgb);
}

void write_heat_png(const std::string& path, const FeatureGrid& grid, int channel,
                    int scale) {
  if (scale < 1) throw std::invalid_argument("write_heat_png: scale must be >= 1");
  if (channel < 0 || channel >= grid.channels)
    throw std::invalid_argument("write_heat_png: channel out of range");
  const int rows = grid.spec.rows, cols = grid.spec.cols;
  const int W = cols * scale, H = rows * scale;
  std::vector<unsigned char> rgb(static_cast<std::size_t>(W) * H * 3);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      const float v = std::clamp(grid.at(channel, i, j), 0.0f, 1.0f);
      const auto g = static_cast<unsigned char>(v * 255.0f + 0.5f);
      for (int dy = 0; dy < scale; ++dy)
        for (int dx = 0; dx < scale; ++dx) {
          auto* px = rgb.data() +
                     (static_cast<std::size_t>(i * scale + dy) * W + j * scale + dx) * 3;
          px[0] = px[1] = px[2] = g;
        }
    }
  write_png(path, W, H, rgb);
}

}  // namespace tscg
