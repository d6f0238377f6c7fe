#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ddn {

/// 8-bit grayscale raster, row-major.
struct GrayImage8 {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;

    std::uint8_t& at(int x, int y) { return pixels[std::size_t(y) * width + x]; }
    std::uint8_t at(int x, int y) const { return pixels[std::size_t(y) * width + x]; }
};

/// 8-bit RGB raster, row-major, interleaved.
struct RgbImage8 {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels; // 3 * width * height
};

/// Quantize v in [0,1] to 8 bits, round half up.
std::uint8_t quantize8(float v);

void write_pgm(const GrayImage8& img, const std::string& path); // binary P5, maxval 255
void write_ppm(const RgbImage8& img, const std::string& path);  // binary P6, maxval 255

GrayImage8 read_pgm(const std::string& path);

} // namespace ddn
