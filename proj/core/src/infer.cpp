#include "ddn/infer.hpp"

#include <algorithm>
#include <cmath>

#include "ddn/threading.hpp"
#include "ddn/warp.hpp"

namespace ddn {

namespace {

std::vector<int> axis_origins(int dim, int p, int stride) {
    std::vector<int> out;
    for (int o = 0; o + p <= dim; o += stride) out.push_back(o);
    if (out.empty() || out.back() != dim - p) out.push_back(dim - p);
    return out;
}

Tensor5<float> copy_tile(const Volume3& vol, int ox, int oy, int oz, int p) {
    Tensor5<float> out({1, 1, p, p, p});
    std::size_t k = 0;
    for (int z = 0; z < p; ++z)
        for (int y = 0; y < p; ++y) {
            const std::size_t base = vol.index(ox, oy + y, oz + z);
            for (int x = 0; x < p; ++x) out.data[k++] = vol.data[base + std::size_t(x)];
        }
    return out;
}

} // namespace

TilePlan tile_volume(int dx, int dy, int dz, int p, double overlap) {
    if (p < 1 || p > dx || p > dy || p > dz)
        throw config_error("tile_volume: patch size exceeds a volume dim");
    if (overlap < 0.0 || overlap > 0.9)
        throw config_error("tile_volume: overlap must lie in [0, 0.9]");

    TilePlan plan;
    plan.patch_size = p;
    plan.stride = std::max(1, int(std::llround(double(p) * (1.0 - overlap))));

    const std::vector<int> xs = axis_origins(dx, p, plan.stride);
    const std::vector<int> ys = axis_origins(dy, p, plan.stride);
    const std::vector<int> zs = axis_origins(dz, p, plan.stride);
    plan.origins.reserve(xs.size() * ys.size() * zs.size());
    for (const int z : zs)
        for (const int y : ys)
            for (const int x : xs) plan.origins.push_back({x, y, z});
    return plan;
}

std::vector<float> blend_weights(int p) {
    std::vector<float> axis(static_cast<std::size_t>(p));
    for (int i = 0; i < p; ++i) {
        const double t = p > 1 ? 2.0 * double(i) / double(p - 1) - 1.0 : 0.0;
        axis[std::size_t(i)] = float(std::max(1.0 - std::abs(t), 1e-3));
    }
    std::vector<float> out(std::size_t(p) * p * p);
    std::size_t k = 0;
    for (int z = 0; z < p; ++z)
        for (int y = 0; y < p; ++y)
            for (int x = 0; x < p; ++x)
                out[k++] = axis[std::size_t(z)] * axis[std::size_t(y)] * axis[std::size_t(x)];
    return out;
}

DisplacementField stitch_tiles(const TileFlowFn& fn, const Volume3& src, const Volume3& tgt,
                               int patch_size, double overlap) {
    if (!src.same_dims(tgt)) throw config_error("stitch_tiles: src/tgt dims differ");
    const TilePlan plan = tile_volume(src.dx, src.dy, src.dz, patch_size, overlap);
    const int p = patch_size;
    const std::vector<float> weights = blend_weights(p);
    const std::size_t voxels = src.size();
    const std::size_t tile_voxels = std::size_t(p) * p * p;

    std::vector<double> acc_ux(voxels, 0.0), acc_uy(voxels, 0.0), acc_uz(voxels, 0.0);
    std::vector<double> acc_w(voxels, 0.0);

    // tiles are inferred in parallel chunks but committed in plan order, so
    // the accumulators see a fixed summation order regardless of threads
    const std::size_t chunk = std::size_t(std::max(4 * max_threads(), 8));
    std::vector<Tensor5<float>> flows(std::min(chunk, plan.origins.size()));
    for (std::size_t begin = 0; begin < plan.origins.size(); begin += chunk) {
        const std::size_t end = std::min(begin + chunk, plan.origins.size());
        parallel_for(std::int64_t(end - begin), [&](std::int64_t j) {
            const auto& o = plan.origins[begin + std::size_t(j)];
            flows[std::size_t(j)] = fn(copy_tile(src, o[0], o[1], o[2], p),
                                       copy_tile(tgt, o[0], o[1], o[2], p));
        });
        for (std::size_t t = begin; t < end; ++t) {
            const auto& o = plan.origins[t];
            const Tensor5<float>& flow = flows[t - begin];
            if (!(flow.shape == Shape5{1, 3, p, p, p}))
                throw config_error("stitch_tiles: tile flow must be (1, 3, p, p, p)");
            const float* fx = flow.channel(0, 0);
            const float* fy = flow.channel(0, 1);
            const float* fz = flow.channel(0, 2);
            std::size_t k = 0;
            for (int z = 0; z < p; ++z)
                for (int y = 0; y < p; ++y) {
                    std::size_t vi = (std::size_t(o[2] + z) * src.dy + std::size_t(o[1] + y)) *
                                         src.dx + std::size_t(o[0]);
                    for (int x = 0; x < p; ++x, ++k, ++vi) {
                        const double w = double(weights[k]);
                        acc_ux[vi] += w * double(fx[k]);
                        acc_uy[vi] += w * double(fy[k]);
                        acc_uz[vi] += w * double(fz[k]);
                        acc_w[vi] += w;
                    }
                }
        }
    }

    DisplacementField field(src.dx, src.dy, src.dz);
    for (std::size_t i = 0; i < voxels; ++i) {
        if (!(acc_w[i] > 0.0))
            throw numeric_error("stitch_tiles: uncovered voxel (zero blend weight)");
        field.ux[i] = float(acc_ux[i] / acc_w[i]);
        field.uy[i] = float(acc_uy[i] / acc_w[i]);
        field.uz[i] = float(acc_uz[i] / acc_w[i]);
    }
    return field;
}

RegisterResult register_volume(DdnModel<float>& model, const Volume3& src, const Volume3& tgt,
                               double overlap) {
    if (!src.same_dims(tgt)) throw config_error("register_volume: src/tgt dims differ");
    const int p = model.config.patch_size;
    const TileFlowFn fn = [&model](const Tensor5<float>& s, const Tensor5<float>& t) {
        Graph<float> g;
        const auto flows = ddn_forward(g, model, g.input(s), g.input(t), RunMode::infer);
        return g.val(flows.fused_flow);
    };
    RegisterResult result;
    result.field = stitch_tiles(fn, src, tgt, p, overlap);
    result.warped = warp_volume(src, result.field);
    return result;
}

} // namespace ddn
