#include "ddn/volume.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ddn/binio.hpp"
#include "ddn/errors.hpp"

namespace ddn {

namespace {

constexpr std::uint32_t kVolumeVersion = 1;
constexpr std::uint32_t kFieldVersion = 1;
constexpr std::uint32_t kMaxDim = 1u << 16; // 65536 voxels per axis is already absurd

void check_dims(const std::string& path, std::uint32_t dx, std::uint32_t dy, std::uint32_t dz,
                std::size_t header_end) {
    if (dx == 0 || dy == 0 || dz == 0 || dx > kMaxDim || dy > kMaxDim || dz > kMaxDim)
        throw format_error(path + ": dim out of range at byte offset " +
                           std::to_string(header_end));
}

} // namespace

Volume3::Volume3(int dx_, int dy_, int dz_, float fill)
    : dx(dx_), dy(dy_), dz(dz_),
      data(std::size_t(dx_) * dy_ * dz_, fill) {}

DisplacementField::DisplacementField(int dx_, int dy_, int dz_)
    : dx(dx_), dy(dy_), dz(dz_) {
    const std::size_t n = std::size_t(dx_) * dy_ * dz_;
    ux.assign(n, 0.0f);
    uy.assign(n, 0.0f);
    uz.assign(n, 0.0f);
}

Volume3 load_volume(const std::string& path) {
    BinReader in(path);
    in.expect_magic("DDNV");
    const std::uint32_t version = in.u32();
    if (version != kVolumeVersion)
        throw format_error(path + ": unsupported DDNV version " + std::to_string(version));
    const std::uint32_t dx = in.u32();
    const std::uint32_t dy = in.u32();
    const std::uint32_t dz = in.u32();
    check_dims(path, dx, dy, dz, in.offset());

    Volume3 vol;
    vol.dx = int(dx);
    vol.dy = int(dy);
    vol.dz = int(dz);
    vol.sx = in.f32();
    vol.sy = in.f32();
    vol.sz = in.f32();
    vol.data.resize(std::size_t(dx) * dy * dz);
    in.f32_array(vol.data.data(), vol.data.size());
    in.expect_eof();
    return vol;
}

void save_volume(const Volume3& vol, const std::string& path) {
    BinWriter out(path);
    out.magic("DDNV");
    out.u32(kVolumeVersion);
    out.u32(std::uint32_t(vol.dx));
    out.u32(std::uint32_t(vol.dy));
    out.u32(std::uint32_t(vol.dz));
    out.f32(vol.sx);
    out.f32(vol.sy);
    out.f32(vol.sz);
    out.f32_array(vol.data.data(), vol.data.size());
    out.close();
}

DisplacementField load_field(const std::string& path) {
    BinReader in(path);
    in.expect_magic("DDNF");
    const std::uint32_t version = in.u32();
    if (version != kFieldVersion)
        throw format_error(path + ": unsupported DDNF version " + std::to_string(version));
    const std::uint32_t dx = in.u32();
    const std::uint32_t dy = in.u32();
    const std::uint32_t dz = in.u32();
    check_dims(path, dx, dy, dz, in.offset());

    DisplacementField f{int(dx), int(dy), int(dz)};
    in.f32_array(f.ux.data(), f.ux.size());
    in.f32_array(f.uy.data(), f.uy.size());
    in.f32_array(f.uz.data(), f.uz.size());
    in.expect_eof();
    return f;
}

void save_field(const DisplacementField& f, const std::string& path) {
    BinWriter out(path);
    out.magic("DDNF");
    out.u32(kFieldVersion);
    out.u32(std::uint32_t(f.dx));
    out.u32(std::uint32_t(f.dy));
    out.u32(std::uint32_t(f.dz));
    out.f32_array(f.ux.data(), f.ux.size());
    out.f32_array(f.uy.data(), f.uy.size());
    out.f32_array(f.uz.data(), f.uz.size());
    out.close();
}

Volume3 normalize_intensity(const Volume3& vol) {
    if (vol.data.empty()) throw config_error("normalize_intensity: empty volume");
    const auto [mn_it, mx_it] = std::minmax_element(vol.data.begin(), vol.data.end());
    const float mn = *mn_it, mx = *mx_it;

    Volume3 out = vol;
    if (mx == mn) {
        std::fill(out.data.begin(), out.data.end(), 0.0f);
        return out;
    }
    const float inv = 1.0f / (mx - mn);
    for (auto& v : out.data) v = (v - mn) * inv;
    return out;
}

float trilinear_sample(const Volume3& vol, float x, float y, float z) {
    const auto clampf = [](float v, float hi) {
        return v < 0.0f ? 0.0f : (v > hi ? hi : v);
    };
    x = clampf(x, float(vol.dx - 1));
    y = clampf(y, float(vol.dy - 1));
    z = clampf(z, float(vol.dz - 1));

    const int x0 = int(x), y0 = int(y), z0 = int(z); // nonnegative after clamp
    const int x1 = std::min(x0 + 1, vol.dx - 1);
    const int y1 = std::min(y0 + 1, vol.dy - 1);
    const int z1 = std::min(z0 + 1, vol.dz - 1);
    const float fx = x - float(x0);
    const float fy = y - float(y0);
    const float fz = z - float(z0);

    const float c000 = vol.at(x0, y0, z0), c100 = vol.at(x1, y0, z0);
    const float c010 = vol.at(x0, y1, z0), c110 = vol.at(x1, y1, z0);
    const float c001 = vol.at(x0, y0, z1), c101 = vol.at(x1, y0, z1);
    const float c011 = vol.at(x0, y1, z1), c111 = vol.at(x1, y1, z1);

    const float c00 = c000 + (c100 - c000) * fx;
    const float c10 = c010 + (c110 - c010) * fx;
    const float c01 = c001 + (c101 - c001) * fx;
    const float c11 = c011 + (c111 - c011) * fx;
    const float c0 = c00 + (c10 - c00) * fy;
    const float c1 = c01 + (c11 - c01) * fy;
    return c0 + (c1 - c0) * fz;
}

std::vector<float> extract_slice(const Volume3& vol, Axis axis, int index,
                                 int& width, int& height) {
    const auto in_range = [&](int extent) {
        if (index < 0 || index >= extent)
            throw config_error("slice index " + std::to_string(index) +
                               " out of range [0, " + std::to_string(extent) + ")");
    };
    std::vector<float> out;
    switch (axis) {
    case Axis::X:
        in_range(vol.dx);
        width = vol.dy; height = vol.dz;
        out.resize(std::size_t(width) * height);
        for (int z = 0; z < vol.dz; ++z)
            for (int y = 0; y < vol.dy; ++y)
                out[std::size_t(z) * width + y] = vol.at(index, y, z);
        break;
    case Axis::Y:
        in_range(vol.dy);
        width = vol.dx; height = vol.dz;
        out.resize(std::size_t(width) * height);
        for (int z = 0; z < vol.dz; ++z)
            for (int x = 0; x < vol.dx; ++x)
                out[std::size_t(z) * width + x] = vol.at(x, index, z);
        break;
    case Axis::Z:
        in_range(vol.dz);
        width = vol.dx; height = vol.dy;
        out.resize(std::size_t(width) * height);
        for (int y = 0; y < vol.dy; ++y)
            for (int x = 0; x < vol.dx; ++x)
                out[std::size_t(y) * width + x] = vol.at(x, y, index);
        break;
    }
    return out;
}

void export_slice_gray(const Volume3& vol, Axis axis, int index, const std::string& path) {
    int w = 0, h = 0;
    const std::vector<float> slice = extract_slice(vol, axis, index, w, h);
    GrayImage8 img{w, h, std::vector<std::uint8_t>(slice.size())};
    for (std::size_t i = 0; i < slice.size(); ++i) img.pixels[i] = quantize8(slice[i]);
    write_pgm(img, path);
}

} // namespace ddn
