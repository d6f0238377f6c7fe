#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ddn/errors.hpp"
#include "ddn/volume.hpp"

namespace ddn {

/// Double-threshold hysteresis parameters on the [0,1]-normalized gradient
/// magnitude.
struct EdgeParams {
    float t_low = 0.02f;
    float t_high = 0.5f;

    void validate() const {
        if (!(0.0f <= t_low && t_low < t_high && t_high <= 1.0f))
            throw config_error("EdgeParams: need 0 <= t_low < t_high <= 1");
    }
};

/// Canny-style 3D edge detector: Gaussian smoothing (sigma = 1 voxel),
/// central-difference gradient, magnitude normalized to [0,1] by its maximum,
/// non-maximum suppression along the direction quantized to the nearest of
/// the 26 neighbor offsets, then hysteresis: voxels >= t_high are kept,
/// voxels >= t_low are kept iff 26-connected to a kept strong voxel.
/// Output values are exactly 0 or 1.
Volume3 edge_map(const Volume3& vol, const EdgeParams& params);

/// Arithmetic mean of a binary patch.
double informativeness(std::span<const float> edge_patch);

struct PatchPair {
    int ox = 0, oy = 0, oz = 0; // voxel offset in the parent volumes
    std::vector<float> src;     // p^3 values, x fastest
    std::vector<float> tgt;

    bool operator==(const PatchPair&) const = default;
};

struct PatchPairSet {
    int patch_size = 0;
    std::vector<PatchPair> pairs;

    bool operator==(const PatchPairSet&) const = default;
};

struct SampleResult {
    PatchPairSet set;
    bool budget_exhausted = false; // fewer than `count` accepted
};

/// Draws uniformly random patch origins with a seeded generator and accepts a
/// candidate iff the informativeness of BOTH edge patches at that origin is
/// >= threshold. Stops after `count` accepted pairs or 100*count candidates.
SampleResult sample_patch_pairs(const Volume3& src, const Volume3& tgt, const EdgeParams& params,
                                std::size_t count, int patch_size, double threshold,
                                std::uint64_t seed);

/// DDNP dataset file: "DDNP", u32 version=1, u32 patch_size, u64 count, then
/// per pair u32 ox,oy,oz and the p^3 f32 src and tgt values, x fastest.
void write_patch_dataset(const PatchPairSet& set, const std::string& path);
PatchPairSet read_patch_dataset(const std::string& path);

} // namespace ddn
