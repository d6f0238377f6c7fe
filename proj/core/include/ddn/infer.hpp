#pragma once

#include <array>
#include <functional>
#include <vector>

#include "ddn/model.hpp"
#include "ddn/volume.hpp"

namespace ddn {

/// Tile origins covering a volume with patches of size p. Origins step by
/// stride = p * (1 - overlap); the last origin per axis clamps to dim - p so
/// tiles never leave the volume and every voxel is covered.
struct TilePlan {
    int patch_size = 0;
    int stride = 0;
    std::vector<std::array<int, 3>> origins;
};

TilePlan tile_volume(int dx, int dy, int dz, int p, double overlap);

/// Separable tent window for overlap blending: per axis
/// w(i) = max(1 - |2i/(p-1) - 1|, 1e-3), multiplied over the three axes.
std::vector<float> blend_weights(int p);

/// Per-tile flow predictor: maps (1,1,p,p,p) src/tgt tiles to a (1,3,p,p,p)
/// flow in voxel units.
using TileFlowFn =
    std::function<Tensor5<float>(const Tensor5<float>& src_tile, const Tensor5<float>& tgt_tile)>;

/// Runs `fn` on every tile of the plan and blends the per-tile flows into a
/// whole-volume displacement field with tent-window weighted averaging.
DisplacementField stitch_tiles(const TileFlowFn& fn, const Volume3& src, const Volume3& tgt,
                               int patch_size, double overlap);

struct RegisterResult {
    DisplacementField field;
    Volume3 warped;
};

/// Whole-volume registration: tile, infer per tile (batch-norm in infer
/// mode), blend flows, then warp src once by the stitched field.
RegisterResult register_volume(DdnModel<float>& model, const Volume3& src, const Volume3& tgt,
                               double overlap = 0.5);

} // namespace ddn
