#pragma once
// Minimal PNG output (RGB8, zlib-deflated) for visualizing grids.

#include <array>
#include <string>

#include "tscg/grid.hpp"

namespace tscg {

// Fixed render palette by class index: blue, green, purple, amber, red,
// cyan; indices past the end wrap around.
std::array<unsigned char, 3> class_color(int index);

// Per cell the highest-probability class above `threshold` gets its palette
// color; ties resolve to the lower class index; background is dark gray.
// `scale` is an integer nearest-neighbor upscale.
void write_semantic_png(const std::string& path, const SemanticGrid& grid,
                        double threshold = 0.5, int scale = 4);

// One feature channel as a grayscale heat map; values clamped to [0,1].
void write_heat_png(const std::string& path, const FeatureGrid& grid, int channel,
                    int scale = 4);

// Raw RGB8 row-major encoder used by the helpers above.
void write_png(const std::string& path, int width, int height,
               const std::vector<unsigned char>& rgb);

}  // namespace tscg
