#include "ddn/patches.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>

#include "ddn/binio.hpp"
#include "ddn/random.hpp"
#include "ddn/threading.hpp"

namespace ddn {

namespace {

constexpr std::uint32_t kPatchVersion = 1;

// separable Gaussian, sigma = 1 voxel, radius 3, replicate borders
std::vector<float> gaussian_smooth(const Volume3& vol) {
    constexpr int radius = 3;
    std::array<float, 2 * radius + 1> kern{};
    {
        double sum = 0.0;
        for (int i = -radius; i <= radius; ++i) {
            kern[std::size_t(i + radius)] = float(std::exp(-0.5 * i * i));
            sum += kern[std::size_t(i + radius)];
        }
        for (auto& k : kern) k = float(double(k) / sum);
    }
    const int dx = vol.dx, dy = vol.dy, dz = vol.dz;
    std::vector<float> a = vol.data, b(a.size());
    const auto clampi = [](int v, int hi) { return v < 0 ? 0 : (v > hi ? hi : v); };

    // x
    parallel_for(std::int64_t(dz) * dy, [&](std::int64_t line) {
        const std::size_t base = std::size_t(line) * dx;
        for (int x = 0; x < dx; ++x) {
            float acc = 0.0f;
            for (int i = -radius; i <= radius; ++i)
                acc += kern[std::size_t(i + radius)] * a[base + std::size_t(clampi(x + i, dx - 1))];
            b[base + std::size_t(x)] = acc;
        }
    });
    // y
    parallel_for(dz, [&](std::int64_t z) {
        const std::size_t zbase = std::size_t(z) * dy * dx;
        for (int y = 0; y < dy; ++y)
            for (int x = 0; x < dx; ++x) {
                float acc = 0.0f;
                for (int i = -radius; i <= radius; ++i)
                    acc += kern[std::size_t(i + radius)] *
                           b[zbase + std::size_t(clampi(y + i, dy - 1)) * dx + std::size_t(x)];
                a[zbase + std::size_t(y) * dx + std::size_t(x)] = acc;
            }
    });
    // z
    const std::size_t plane = std::size_t(dy) * dx;
    parallel_for(dy, [&](std::int64_t y) {
        for (int x = 0; x < dx; ++x) {
            const std::size_t base = std::size_t(y) * dx + std::size_t(x);
            for (int z = 0; z < dz; ++z) {
                float acc = 0.0f;
                for (int i = -radius; i <= radius; ++i)
                    acc += kern[std::size_t(i + radius)] *
                           a[std::size_t(clampi(z + i, dz - 1)) * plane + base];
                b[std::size_t(z) * plane + base] = acc;
            }
        }
    });
    return b;
}

// the 26 neighbor offsets with precomputed inverse lengths
struct Dir {
    int dx, dy, dz;
    float inv_len;
};

std::array<Dir, 26> neighbor_dirs() {
    std::array<Dir, 26> dirs{};
    int i = 0;
    for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                if (dx == 0 && dy == 0 && dz == 0) continue;
                dirs[std::size_t(i++)] = {dx, dy, dz,
                                          1.0f / std::sqrt(float(dx * dx + dy * dy + dz * dz))};
            }
    return dirs;
}

} // namespace

Volume3 edge_map(const Volume3& vol, const EdgeParams& params) {
    params.validate();
    const int dx = vol.dx, dy = vol.dy, dz = vol.dz;
    const std::size_t total = vol.size();

    const std::vector<float> smooth = gaussian_smooth(vol);

    // central differences with clamped neighbors
    std::vector<float> gx(total), gy(total), gz(total), mag(total);
    const std::size_t plane = std::size_t(dy) * dx;
    parallel_for(dz, [&](std::int64_t z64) {
        const int z = int(z64);
        for (int y = 0; y < dy; ++y)
            for (int x = 0; x < dx; ++x) {
                const std::size_t i = std::size_t(z) * plane + std::size_t(y) * dx + x;
                const auto sample = [&](int xx, int yy, int zz) {
                    xx = std::clamp(xx, 0, dx - 1);
                    yy = std::clamp(yy, 0, dy - 1);
                    zz = std::clamp(zz, 0, dz - 1);
                    return smooth[std::size_t(zz) * plane + std::size_t(yy) * dx + xx];
                };
                gx[i] = 0.5f * (sample(x + 1, y, z) - sample(x - 1, y, z));
                gy[i] = 0.5f * (sample(x, y + 1, z) - sample(x, y - 1, z));
                gz[i] = 0.5f * (sample(x, y, z + 1) - sample(x, y, z - 1));
                mag[i] = std::sqrt(gx[i] * gx[i] + gy[i] * gy[i] + gz[i] * gz[i]);
            }
    });

    Volume3 out(dx, dy, dz);
    out.sx = vol.sx; out.sy = vol.sy; out.sz = vol.sz;

    const float maxmag = *std::max_element(mag.begin(), mag.end());
    if (maxmag <= 0.0f) return out; // constant input: no edges
    const float invmax = 1.0f / maxmag;
    for (auto& m : mag) m *= invmax;

    static const std::array<Dir, 26> dirs = neighbor_dirs();

    // non-maximum suppression along the quantized gradient direction;
    // the asymmetric tie-break keeps two-voxel plateaus one voxel thick
    std::vector<std::uint8_t> survives(total, 0);
    parallel_for(dz, [&](std::int64_t z64) {
        const int z = int(z64);
        for (int y = 0; y < dy; ++y)
            for (int x = 0; x < dx; ++x) {
                const std::size_t i = std::size_t(z) * plane + std::size_t(y) * dx + x;
                const float m = mag[i];
                if (m <= 0.0f) continue;
                float best = -2.0f;
                const Dir* bdir = &dirs[0];
                for (const auto& d : dirs) {
                    const float cosv =
                        (gx[i] * d.dx + gy[i] * d.dy + gz[i] * d.dz) * d.inv_len;
                    if (cosv > best) {
                        best = cosv;
                        bdir = &d;
                    }
                }
                const auto mag_at = [&](int xx, int yy, int zz) -> float {
                    if (xx < 0 || xx >= dx || yy < 0 || yy >= dy || zz < 0 || zz >= dz)
                        return 0.0f;
                    return mag[std::size_t(zz) * plane + std::size_t(yy) * dx + xx];
                };
                const float fwd = mag_at(x + bdir->dx, y + bdir->dy, z + bdir->dz);
                const float bwd = mag_at(x - bdir->dx, y - bdir->dy, z - bdir->dz);
                if (m > bwd && m >= fwd) survives[i] = 1;
            }
    });

    // hysteresis: strong seeds, then 26-connected weak growth
    std::vector<std::uint8_t> kept(total, 0);
    std::deque<std::size_t> frontier;
    for (std::size_t i = 0; i < total; ++i)
        if (survives[i] && mag[i] >= params.t_high) {
            kept[i] = 1;
            frontier.push_back(i);
        }
    while (!frontier.empty()) {
        const std::size_t i = frontier.front();
        frontier.pop_front();
        const int z = int(i / plane);
        const int y = int((i % plane) / std::size_t(dx));
        const int x = int(i % std::size_t(dx));
        for (const auto& d : dirs) {
            const int xx = x + d.dx, yy = y + d.dy, zz = z + d.dz;
            if (xx < 0 || xx >= dx || yy < 0 || yy >= dy || zz < 0 || zz >= dz) continue;
            const std::size_t j = std::size_t(zz) * plane + std::size_t(yy) * dx + xx;
            if (!kept[j] && survives[j] && mag[j] >= params.t_low) {
                kept[j] = 1;
                frontier.push_back(j);
            }
        }
    }

    for (std::size_t i = 0; i < total; ++i) out.data[i] = kept[i] ? 1.0f : 0.0f;
    return out;
}

double informativeness(std::span<const float> edge_patch) {
    if (edge_patch.empty()) return 0.0;
    double acc = 0.0;
    for (const float v : edge_patch) acc += double(v);
    return acc / double(edge_patch.size());
}

namespace {

std::vector<float> copy_patch(const Volume3& vol, int ox, int oy, int oz, int p) {
    std::vector<float> out(std::size_t(p) * p * p);
    std::size_t k = 0;
    for (int z = 0; z < p; ++z)
        for (int y = 0; y < p; ++y) {
            const std::size_t base = vol.index(ox, oy + y, oz + z);
            for (int x = 0; x < p; ++x) out[k++] = vol.data[base + std::size_t(x)];
        }
    return out;
}

double patch_mean(const Volume3& vol, int ox, int oy, int oz, int p) {
    double acc = 0.0;
    for (int z = 0; z < p; ++z)
        for (int y = 0; y < p; ++y) {
            const std::size_t base = vol.index(ox, oy + y, oz + z);
            for (int x = 0; x < p; ++x) acc += double(vol.data[base + std::size_t(x)]);
        }
    return acc / (double(p) * p * p);
}

} // namespace

SampleResult sample_patch_pairs(const Volume3& src, const Volume3& tgt, const EdgeParams& params,
                                std::size_t count, int patch_size, double threshold,
                                std::uint64_t seed) {
    if (!src.same_dims(tgt)) throw config_error("sample_patch_pairs: src/tgt dims differ");
    if (patch_size < 1 || patch_size > src.dx || patch_size > src.dy || patch_size > src.dz)
        throw config_error("sample_patch_pairs: patch_size exceeds a volume dim");

    const Volume3 src_edges = edge_map(src, params);
    const Volume3 tgt_edges = edge_map(tgt, params);

    SampleResult result;
    result.set.patch_size = patch_size;
    result.set.pairs.reserve(count);

    Rng rng(seed);
    const std::uint64_t rx = std::uint64_t(src.dx - patch_size) + 1;
    const std::uint64_t ry = std::uint64_t(src.dy - patch_size) + 1;
    const std::uint64_t rz = std::uint64_t(src.dz - patch_size) + 1;

    const std::size_t budget = 100 * count;
    for (std::size_t tries = 0; tries < budget && result.set.pairs.size() < count; ++tries) {
        const int ox = int(rng.uniform_index(rx));
        const int oy = int(rng.uniform_index(ry));
        const int oz = int(rng.uniform_index(rz));
        if (patch_mean(src_edges, ox, oy, oz, patch_size) < threshold) continue;
        if (patch_mean(tgt_edges, ox, oy, oz, patch_size) < threshold) continue;
        PatchPair pair;
        pair.ox = ox;
        pair.oy = oy;
        pair.oz = oz;
        pair.src = copy_patch(src, ox, oy, oz, patch_size);
        pair.tgt = copy_patch(tgt, ox, oy, oz, patch_size);
        result.set.pairs.push_back(std::move(pair));
    }
    result.budget_exhausted = result.set.pairs.size() < count;
    return result;
}

void write_patch_dataset(const PatchPairSet& set, const std::string& path) {
    BinWriter out(path);
    out.magic("DDNP");
    out.u32(kPatchVersion);
    out.u32(std::uint32_t(set.patch_size));
    out.u64(set.pairs.size());
    for (const auto& pair : set.pairs) {
        out.u32(std::uint32_t(pair.ox));
        out.u32(std::uint32_t(pair.oy));
        out.u32(std::uint32_t(pair.oz));
        out.f32_array(pair.src.data(), pair.src.size());
        out.f32_array(pair.tgt.data(), pair.tgt.size());
    }
    out.close();
}

PatchPairSet read_patch_dataset(const std::string& path) {
    BinReader in(path);
    in.expect_magic("DDNP");
    const std::uint32_t version = in.u32();
    if (version != kPatchVersion)
        throw format_error(path + ": unsupported DDNP version " + std::to_string(version));
    const std::uint32_t p = in.u32();
    if (p == 0 || p > 4096)
        throw format_error(path + ": patch size out of range at byte offset 8");
    const std::uint64_t count = in.u64();
    const std::size_t voxels = std::size_t(p) * p * p;

    PatchPairSet set;
    set.patch_size = int(p);
    set.pairs.resize(count);
    for (auto& pair : set.pairs) {
        pair.ox = int(in.u32());
        pair.oy = int(in.u32());
        pair.oz = int(in.u32());
        pair.src.resize(voxels);
        pair.tgt.resize(voxels);
        in.f32_array(pair.src.data(), voxels);
        in.f32_array(pair.tgt.data(), voxels);
    }
    in.expect_eof();
    return set;
}

} // namespace ddn
