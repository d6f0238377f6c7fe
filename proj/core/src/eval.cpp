#include "ddn/eval.hpp"

#include <cmath>
#include <sstream>

#include "ddn/errors.hpp"
#include "ddn/infer.hpp"
#include "ddn/random.hpp"
#include "ddn/warp.hpp"

namespace ddn {

double global_ncc(const Volume3& a, const Volume3& b) {
    if (!a.same_dims(b)) throw config_error("global_ncc: dims differ");
    const std::size_t n = a.size();
    double sa = 0.0, sb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sa += double(a.data[i]);
        sb += double(b.data[i]);
    }
    const double abar = sa / double(n), bbar = sb / double(n);
    double cross = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double da = double(a.data[i]) - abar;
        const double db = double(b.data[i]) - bbar;
        cross += da * db;
        va += da * da;
        vb += db * db;
    }
    if (va <= 0.0 || vb <= 0.0)
        throw numeric_error("global_ncc: undefined for constant input");
    return cross / std::sqrt(va * vb);
}

double mutual_information(const Volume3& a, const Volume3& b, int bins) {
    if (!a.same_dims(b)) throw config_error("mutual_information: dims differ");
    if (bins < 2) throw config_error("mutual_information: bins must be >= 2");

    const std::size_t n = a.size();
    std::vector<double> joint(std::size_t(bins) * bins, 0.0);
    const auto bin_of = [&](float v) {
        if (v < 0.0f || v > 1.0f)
            throw config_error("mutual_information: values must lie in [0,1]");
        const int i = int(double(v) * bins);
        return std::min(i, bins - 1);
    };
    for (std::size_t i = 0; i < n; ++i)
        joint[std::size_t(bin_of(a.data[i])) * bins + bin_of(b.data[i])] += 1.0;

    const double inv_n = 1.0 / double(n);
    std::vector<double> pa(std::size_t(bins), 0.0), pb(std::size_t(bins), 0.0);
    for (int i = 0; i < bins; ++i)
        for (int j = 0; j < bins; ++j) {
            const double p = joint[std::size_t(i) * bins + j] * inv_n;
            pa[std::size_t(i)] += p;
            pb[std::size_t(j)] += p;
        }
    double mi = 0.0;
    for (int i = 0; i < bins; ++i)
        for (int j = 0; j < bins; ++j) {
            const double p = joint[std::size_t(i) * bins + j] * inv_n;
            if (p > 0.0) mi += p * std::log(p / (pa[std::size_t(i)] * pb[std::size_t(j)]));
        }
    return mi;
}

namespace {

// control-node coordinates along one axis: 0, g, 2g, ..., plus dim-1
std::vector<int> node_coords(int dim, int g) {
    std::vector<int> out;
    for (int v = 0; v < dim; v += g) out.push_back(v);
    if (out.back() != dim - 1) out.push_back(dim - 1);
    return out;
}

} // namespace

DisplacementField gaussian_deformation(int dx, int dy, int dz, int grid_spacing, double sigma,
                                       std::uint64_t seed) {
    if (grid_spacing < 2) throw config_error("gaussian_deformation: grid_spacing must be >= 2");
    if (sigma < 0.0) throw config_error("gaussian_deformation: sigma must be >= 0");

    const std::vector<int> nx = node_coords(dx, grid_spacing);
    const std::vector<int> ny = node_coords(dy, grid_spacing);
    const std::vector<int> nz = node_coords(dz, grid_spacing);
    const std::size_t gx = nx.size(), gy = ny.size(), gz = nz.size();

    // node samples; boundary-layer nodes zeroed so the interpolated field
    // vanishes on the volume faces
    std::vector<float> cux(gx * gy * gz), cuy(gx * gy * gz), cuz(gx * gy * gz);
    Rng rng(seed);
    for (std::size_t k = 0; k < gz; ++k)
        for (std::size_t j = 0; j < gy; ++j)
            for (std::size_t i = 0; i < gx; ++i) {
                const std::size_t idx = (k * gy + j) * gx + i;
                const float vx = float(rng.normal(0.0, sigma));
                const float vy = float(rng.normal(0.0, sigma));
                const float vz = float(rng.normal(0.0, sigma));
                const bool boundary = i == 0 || i + 1 == gx || j == 0 || j + 1 == gy ||
                                      k == 0 || k + 1 == gz;
                cux[idx] = boundary ? 0.0f : vx;
                cuy[idx] = boundary ? 0.0f : vy;
                cuz[idx] = boundary ? 0.0f : vz;
            }

    // per-axis cell index and interpolation fraction for every voxel
    const auto axis_lerp = [](const std::vector<int>& nodes, int dim) {
        std::vector<int> cell(static_cast<std::size_t>(dim));
        std::vector<float> frac(static_cast<std::size_t>(dim));
        std::size_t c = 0;
        for (int v = 0; v < dim; ++v) {
            while (c + 2 < nodes.size() && v >= nodes[c + 1]) ++c;
            const int lo = nodes[c];
            const int hi = nodes[c + 1 < nodes.size() ? c + 1 : c];
            cell[std::size_t(v)] = int(c);
            frac[std::size_t(v)] = hi > lo ? float(v - lo) / float(hi - lo) : 0.0f;
        }
        return std::pair(cell, frac);
    };
    const auto [cellx, fracx] = axis_lerp(nx, dx);
    const auto [celly, fracy] = axis_lerp(ny, dy);
    const auto [cellz, fracz] = axis_lerp(nz, dz);

    DisplacementField field(dx, dy, dz);
    const auto interp = [&](const std::vector<float>& c, std::size_t i0, std::size_t i1,
                            std::size_t j0, std::size_t j1, std::size_t k0, std::size_t k1,
                            float fx, float fy, float fz) {
        const auto at = [&](std::size_t i, std::size_t j, std::size_t k) {
            return c[(k * gy + j) * gx + i];
        };
        const float c00 = at(i0, j0, k0) + (at(i1, j0, k0) - at(i0, j0, k0)) * fx;
        const float c10 = at(i0, j1, k0) + (at(i1, j1, k0) - at(i0, j1, k0)) * fx;
        const float c01 = at(i0, j0, k1) + (at(i1, j0, k1) - at(i0, j0, k1)) * fx;
        const float c11 = at(i0, j1, k1) + (at(i1, j1, k1) - at(i0, j1, k1)) * fx;
        const float c0 = c00 + (c10 - c00) * fy;
        const float c1 = c01 + (c11 - c01) * fy;
        return c0 + (c1 - c0) * fz;
    };

    for (int z = 0; z < dz; ++z)
        for (int y = 0; y < dy; ++y)
            for (int x = 0; x < dx; ++x) {
                const std::size_t i0 = std::size_t(cellx[std::size_t(x)]);
                const std::size_t j0 = std::size_t(celly[std::size_t(y)]);
                const std::size_t k0 = std::size_t(cellz[std::size_t(z)]);
                const std::size_t i1 = std::min(i0 + 1, gx - 1);
                const std::size_t j1 = std::min(j0 + 1, gy - 1);
                const std::size_t k1 = std::min(k0 + 1, gz - 1);
                const float fx = fracx[std::size_t(x)];
                const float fy = fracy[std::size_t(y)];
                const float fz = fracz[std::size_t(z)];
                const std::size_t vi = field.index(x, y, z);
                field.ux[vi] = interp(cux, i0, i1, j0, j1, k0, k1, fx, fy, fz);
                field.uy[vi] = interp(cuy, i0, i1, j0, j1, k0, k1, fx, fy, fz);
                field.uz[vi] = interp(cuz, i0, i1, j0, j1, k0, k1, fx, fy, fz);
            }
    return field;
}

GrayImage8 difference_image(const std::vector<float>& a, const std::vector<float>& b, int width,
                            int height) {
    if (a.size() != b.size() || a.size() != std::size_t(width) * height)
        throw config_error("difference_image: size mismatch");
    GrayImage8 img{width, height, std::vector<std::uint8_t>(a.size())};
    for (std::size_t i = 0; i < a.size(); ++i)
        img.pixels[i] = quantize8(1.0f - std::abs(a[i] - b[i]));
    return img;
}

RgbImage8 overlay_rg(const std::vector<float>& tgt, const std::vector<float>& reg, int width,
                     int height) {
    if (tgt.size() != reg.size() || tgt.size() != std::size_t(width) * height)
        throw config_error("overlay_rg: size mismatch");
    RgbImage8 img{width, height, std::vector<std::uint8_t>(tgt.size() * 3)};
    for (std::size_t i = 0; i < tgt.size(); ++i) {
        img.pixels[3 * i + 0] = quantize8(tgt[i]);
        img.pixels[3 * i + 1] = quantize8(reg[i]);
        img.pixels[3 * i + 2] = 0;
    }
    return img;
}

std::string ValidationReport::csv() const {
    std::ostringstream os;
    os.precision(12);
    os << cc_before << "," << mi_before << "," << cc_after << "," << mi_after;
    return os.str();
}

ValidationReport validation_run(DdnModel<float>& model, const Volume3& vol, int grid_spacing,
                                double sigma, std::uint64_t seed, double overlap, int mi_bins) {
    const DisplacementField field =
        gaussian_deformation(vol.dx, vol.dy, vol.dz, grid_spacing, sigma, seed);
    const Volume3 deformed = warp_volume(vol, field);
    const RegisterResult reg = register_volume(model, deformed, vol, overlap);

    ValidationReport report;
    report.cc_before = global_ncc(deformed, vol);
    report.mi_before = mutual_information(deformed, vol, mi_bins);
    report.cc_after = global_ncc(reg.warped, vol);
    report.mi_after = mutual_information(reg.warped, vol, mi_bins);
    return report;
}

} // namespace ddn
