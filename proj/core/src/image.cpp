#include "ddn/image.hpp"

#include <cmath>
#include <fstream>

#include "ddn/errors.hpp"

namespace ddn {

std::uint8_t quantize8(float v) {
    const float scaled = 255.0f * v;
    long q = std::lround(scaled); // half away from zero == half up for v >= 0
    if (q < 0) q = 0;
    if (q > 255) q = 255;
    return std::uint8_t(q);
}

void write_pgm(const GrayImage8& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open for writing: " + path);
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              std::streamsize(img.pixels.size()));
    if (!out) throw io_error("write failed: " + path);
}

void write_ppm(const RgbImage8& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open for writing: " + path);
    out << "P6\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              std::streamsize(img.pixels.size()));
    if (!out) throw io_error("write failed: " + path);
}

GrayImage8 read_pgm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open for reading: " + path);
    std::string tag;
    int w = 0, h = 0, maxval = 0;
    in >> tag >> w >> h >> maxval;
    if (tag != "P5" || maxval != 255 || w <= 0 || h <= 0)
        throw format_error(path + ": not a maxval-255 binary PGM");
    in.get(); // single whitespace after header
    GrayImage8 img{w, h, std::vector<std::uint8_t>(std::size_t(w) * h)};
    in.read(reinterpret_cast<char*>(img.pixels.data()), std::streamsize(img.pixels.size()));
    if (std::size_t(in.gcount()) != img.pixels.size())
        throw format_error(path + ": truncated pixel payload");
    return img;
}

} // namespace ddn
