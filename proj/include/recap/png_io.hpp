#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace recap {

// Interleaved 8-bit RGB image. The corpus stores frames in this form; the
// float view used by the models is exactly value/255.
struct ImageU8 {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> rgb;  // height*width*3, row-major

  static ImageU8 filled(int h, int w, uint8_t r, uint8_t g, uint8_t b);
  uint8_t& at(int y, int x, int c) { return rgb[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  uint8_t at(int y, int x, int c) const { return rgb[(static_cast<size_t>(y) * width + x) * 3 + c]; }
};

// Minimal PNG codec (8-bit RGB, non-interlaced). The encoder always emits
// filter type 0 with a fixed zlib level so identical pixels give identical
// bytes; the decoder handles all five scanline filters.
std::vector<uint8_t> encode_png(const ImageU8& img);
ImageU8 decode_png(const std::vector<uint8_t>& bytes);

void write_file(const std::string& path, const std::vector<uint8_t>& bytes);
std::vector<uint8_t> read_file(const std::string& path);

uint32_t crc32_of(const std::vector<uint8_t>& bytes);

}  // namespace recap
