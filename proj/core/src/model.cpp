#include "ddn/model.hpp"

#include <cmath>

#include "ddn/random.hpp"

namespace ddn {

void DdnConfig::validate() const {
    if (patch_size < 8) throw config_error("DdnConfig: patch_size must be >= 8");
    if (patch_size % 2 != 0) throw config_error("DdnConfig: patch_size must be a multiple of 2");
    if (units_per_block < 1) throw config_error("DdnConfig: units_per_block must be >= 1");
    if (growth < 1) throw config_error("DdnConfig: growth must be >= 1");
    if (kernel < 1 || kernel % 2 == 0) throw config_error("DdnConfig: kernel must be odd");
    if (base_channels < 2) throw config_error("DdnConfig: base_channels must be >= 2");
    if (transition_channels() < 1) throw config_error("DdnConfig: transition would drop to 0 channels");
    if (!(leaky_slope > 0.0f)) throw config_error("DdnConfig: leaky_slope must be positive");
}

template <typename T>
Parameter<T>& DdnModel<T>::find(const std::string& name) {
    for (auto& p : params)
        if (p.name == name) return p;
    throw config_error("DdnModel: no parameter named " + name);
}

template <typename T>
const Parameter<T>& DdnModel<T>::find(const std::string& name) const {
    for (const auto& p : params)
        if (p.name == name) return p;
    throw config_error("DdnModel: no parameter named " + name);
}

template <typename T>
std::size_t DdnModel<T>::count_params() const {
    std::size_t total = 0;
    for (const auto& p : params)
        if (p.trainable) total += p.value.size();
    return total;
}

template <typename T>
void DdnModel<T>::zero_grads() {
    for (auto& p : params) p.zero_grad();
}

namespace {

template <typename T>
void add_conv(DdnModel<T>& m, Rng& rng, const std::string& prefix, int cin, int cout, int k,
              bool zero_init) {
    Tensor5<T> w({cout, cin, k, k, k});
    if (!zero_init) {
        const double limit = std::sqrt(6.0 / (double(cin) * k * k * k));
        for (auto& v : w.data) v = T(rng.uniform(-limit, limit));
    }
    m.params.emplace_back(prefix + ".w", std::move(w));
    m.params.emplace_back(prefix + ".b", Tensor5<T>({1, cout, 1, 1, 1}));
}

template <typename T>
void add_bn(DdnModel<T>& m, const std::string& prefix, int c) {
    m.params.emplace_back(prefix + ".gamma", Tensor5<T>({1, c, 1, 1, 1}, T(1)));
    m.params.emplace_back(prefix + ".beta", Tensor5<T>({1, c, 1, 1, 1}));
    m.params.emplace_back(prefix + ".rmean", Tensor5<T>({1, c, 1, 1, 1}), false);
    m.params.emplace_back(prefix + ".rvar", Tensor5<T>({1, c, 1, 1, 1}, T(1)), false);
}

} // namespace

template <typename T>
DdnModel<T> build_ddn(const DdnConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    DdnModel<T> m;
    m.config = cfg;
    Rng rng(seed);

    const int k = cfg.kernel;
    add_conv(m, rng, "stem", 2, cfg.base_channels, k, false);

    int c = cfg.base_channels;
    for (int u = 0; u < cfg.units_per_block; ++u) {
        const std::string prefix = "db1.u" + std::to_string(u);
        add_bn(m, prefix + ".bn", c);
        add_conv(m, rng, prefix + ".conv", c, cfg.growth, k, false);
        c += cfg.growth;
    }

    add_conv(m, rng, "trans", cfg.block1_channels(), cfg.transition_channels(), 1, false);

    c = cfg.transition_channels();
    for (int u = 0; u < cfg.units_per_block; ++u) {
        const std::string prefix = "db2.u" + std::to_string(u);
        add_bn(m, prefix + ".bn", c);
        add_conv(m, rng, prefix + ".conv", c, cfg.growth, k, false);
        c += cfg.growth;
    }

    add_conv(m, rng, "head.global", cfg.block1_channels(), 3, 1, false);
    add_conv(m, rng, "head.local", cfg.block2_channels(), 3, 1, false);
    // zero so that the fused flow starts at the identity deformation
    add_conv(m, rng, "head.fusion", 6, 3, 3, true);
    return m;
}

namespace {

// one dense unit: bn -> leaky_relu -> conv, then append to the feature list
template <typename T>
typename Graph<T>::Id dense_block(Graph<T>& g, DdnModel<T>& m, const std::string& block,
                                  typename Graph<T>::Id block_in, RunMode mode) {
    const auto& cfg = m.config;
    std::vector<typename Graph<T>::Id> features{block_in};
    typename Graph<T>::Id current = block_in;
    for (int u = 0; u < cfg.units_per_block; ++u) {
        const std::string prefix = block + ".u" + std::to_string(u);
        auto bn = g.batch_norm(current,
                               g.param(m.find(prefix + ".bn.gamma")),
                               g.param(m.find(prefix + ".bn.beta")),
                               m.find(prefix + ".bn.rmean"), m.find(prefix + ".bn.rvar"),
                               mode, T(cfg.bn_momentum), T(cfg.bn_eps));
        auto act = g.leaky_relu(bn, T(cfg.leaky_slope));
        auto conv = g.conv3d(act, g.param(m.find(prefix + ".conv.w")),
                             g.param(m.find(prefix + ".conv.b")), 1, Pad::same);
        features.push_back(conv);
        current = g.concat_channels(features);
    }
    return current;
}

} // namespace

template <typename T>
DdnFlowIds<T> ddn_forward(Graph<T>& g, DdnModel<T>& model, typename Graph<T>::Id src,
                          typename Graph<T>::Id tgt, RunMode mode) {
    const auto& cfg = model.config;
    const Shape5 ss = g.val(src).shape;
    if (ss.c != 1 || ss.d != cfg.patch_size || ss.h != cfg.patch_size || ss.w != cfg.patch_size)
        throw config_error("ddn_forward: src patch shape " + ss.str() + " does not match config");
    if (!(g.val(tgt).shape == ss))
        throw config_error("ddn_forward: src/tgt shape mismatch");

    auto x = g.concat_channels({src, tgt});
    auto stem = g.conv3d(x, g.param(model.find("stem.w")), g.param(model.find("stem.b")), 1,
                         Pad::same);

    auto block1 = dense_block(g, model, "db1", stem, mode);
    auto global_flow = g.conv3d(block1, g.param(model.find("head.global.w")),
                                g.param(model.find("head.global.b")), 1, Pad::same);

    auto trans = g.conv3d(block1, g.param(model.find("trans.w")),
                          g.param(model.find("trans.b")), 1, Pad::same);
    auto pooled = g.avg_pool2(trans);

    auto block2 = dense_block(g, model, "db2", pooled, mode);
    auto local_flow = g.conv3d(block2, g.param(model.find("head.local.w")),
                               g.param(model.find("head.local.b")), 1, Pad::same);

    // displacements predicted on the half-resolution grid are in coarse voxel
    // units; doubling the values converts them to full-resolution units
    auto local_up = g.scale(g.upsample_trilinear2(local_flow), T(2));
    auto both = g.concat_channels({global_flow, local_up});
    auto fused = g.conv3d(both, g.param(model.find("head.fusion.w")),
                          g.param(model.find("head.fusion.b")), 1, Pad::same);
    return {global_flow, local_flow, fused};
}

template <typename T>
DdnFlows<T> ddn_forward(DdnModel<T>& model, const Tensor5<T>& src, const Tensor5<T>& tgt,
                        RunMode mode) {
    Graph<T> g;
    auto ids = ddn_forward(g, model, g.input(src), g.input(tgt), mode);
    return {g.val(ids.global_flow), g.val(ids.local_flow), g.val(ids.fused_flow)};
}

template struct DdnModel<float>;
template struct DdnModel<double>;
template DdnModel<float> build_ddn<float>(const DdnConfig&, std::uint64_t);
template DdnModel<double> build_ddn<double>(const DdnConfig&, std::uint64_t);
template DdnFlowIds<float> ddn_forward<float>(Graph<float>&, DdnModel<float>&, Graph<float>::Id,
                                              Graph<float>::Id, RunMode);
template DdnFlowIds<double> ddn_forward<double>(Graph<double>&, DdnModel<double>&,
                                                Graph<double>::Id, Graph<double>::Id, RunMode);
template DdnFlows<float> ddn_forward<float>(DdnModel<float>&, const Tensor5<float>&,
                                            const Tensor5<float>&, RunMode);
template DdnFlows<double> ddn_forward<double>(DdnModel<double>&, const Tensor5<double>&,
                                              const Tensor5<double>&, RunMode);

} // namespace ddn
