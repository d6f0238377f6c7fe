#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ddn/image.hpp"

namespace ddn {

/// Dense 3D scalar image, x varying fastest, then y, then z.
/// Spacing is physical units per voxel (micrometres); it is carried through
/// I/O but the registration algorithms operate purely in voxel units.
struct Volume3 {
    int dx = 0, dy = 0, dz = 0;
    float sx = 1.0f, sy = 1.0f, sz = 1.0f;
    std::vector<float> data;

    Volume3() = default;
    Volume3(int dx_, int dy_, int dz_, float fill = 0.0f);

    std::size_t size() const { return data.size(); }
    std::size_t index(int x, int y, int z) const {
        return (std::size_t(z) * dy + y) * dx + x;
    }
    float at(int x, int y, int z) const { return data[index(x, y, z)]; }
    float& at(int x, int y, int z) { return data[index(x, y, z)]; }

    bool same_dims(const Volume3& o) const {
        return dx == o.dx && dy == o.dy && dz == o.dz;
    }
};

/// Per-voxel displacement in voxel units: warped(p) = source(p + u(p)).
struct DisplacementField {
    int dx = 0, dy = 0, dz = 0;
    std::vector<float> ux, uy, uz;

    DisplacementField() = default;
    DisplacementField(int dx_, int dy_, int dz_);

    std::size_t size() const { return ux.size(); }
    std::size_t index(int x, int y, int z) const {
        return (std::size_t(z) * dy + y) * dx + x;
    }
};

/// DDNV volume file: "DDNV", u32 version=1, u32 dx,dy,dz, f32 sx,sy,sz,
/// then dx*dy*dz f32 little-endian, x fastest.
Volume3 load_volume(const std::string& path);
void save_volume(const Volume3& vol, const std::string& path);

/// DDNF displacement field file: "DDNF", u32 version=1, u32 dx,dy,dz,
/// then the ux, uy, uz arrays, each dx*dy*dz f32 little-endian, x fastest.
DisplacementField load_field(const std::string& path);
void save_field(const DisplacementField& f, const std::string& path);

/// (v - min) / (max - min) elementwise; constant volumes map to all zeros.
Volume3 normalize_intensity(const Volume3& vol);

/// Trilinear interpolation at continuous voxel coordinates; coordinates
/// outside [0, dim-1] clamp to the border.
float trilinear_sample(const Volume3& vol, float x, float y, float z);

enum class Axis { X, Y, Z };

/// Extract a 2D slice perpendicular to `axis`. Orientation:
///   X slice -> width dy, height dz;  Y -> width dx, height dz;
///   Z slice -> width dx, height dy.
std::vector<float> extract_slice(const Volume3& vol, Axis axis, int index,
                                 int& width, int& height);

/// 8-bit PGM export of a slice; volume values must lie in [0,1].
void export_slice_gray(const Volume3& vol, Axis axis, int index, const std::string& path);

} // namespace ddn
