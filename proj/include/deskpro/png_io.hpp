#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace deskpro {

struct PngImage {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 (gray) or 3 (rgb)
  std::vector<uint8_t> pixels;  // row-major, interleaved
};

// 8-bit, non-interlaced gray or RGB only. Encoding is deterministic
// (fixed zlib level, filter 0 on every row).
void write_png(const std::filesystem::path& path, const PngImage& img);
PngImage read_png(const std::filesystem::path& path);

}  // namespace deskpro
