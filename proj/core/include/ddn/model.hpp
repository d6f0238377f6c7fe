#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ddn/graph.hpp"
#include "ddn/tensor.hpp"

namespace ddn {

/// Architecture of the dense deformation network. Two dense blocks of
/// `units_per_block` units each (unit = batch_norm -> leaky_relu -> conv,
/// densely connected), one transition (1^3 conv halving channels + 2^3
/// average pooling) between them, a global flow head before the transition,
/// a local flow head after, and a fusion head combining both flows.
struct DdnConfig {
    int patch_size = 32;    // multiple of 2, >= 8
    int units_per_block = 4;
    int growth = 8;         // channels added per unit
    int kernel = 3;         // odd
    float leaky_slope = 0.2f;
    int base_channels = 16; // stem conv output channels (dense block 1 input)
    float bn_momentum = 0.9f;
    float bn_eps = 1e-5f;

    void validate() const; // throws config_error

    int block1_channels() const { return base_channels + units_per_block * growth; }
    int transition_channels() const { return block1_channels() / 2; }
    int block2_channels() const { return transition_channels() + units_per_block * growth; }

    bool operator==(const DdnConfig&) const = default;
};

template <typename T>
struct DdnModel {
    DdnConfig config;
    std::vector<Parameter<T>> params;

    Parameter<T>& find(const std::string& name);
    const Parameter<T>& find(const std::string& name) const;

    /// Trainable scalar count; running statistics are excluded.
    std::size_t count_params() const;

    void zero_grads();

    template <typename U>
    DdnModel<U> cast() const {
        DdnModel<U> out;
        out.config = config;
        out.params.reserve(params.size());
        for (const auto& p : params)
            out.params.emplace_back(p.name, p.value.template cast<U>(), p.trainable);
        return out;
    }
};

/// Deterministic initialization from the seed. Conv weights are He-style
/// scaled uniform, biases zero, batch-norm affines identity. The fusion head
/// is zero-initialized so a fresh model produces an identically zero fused
/// flow (identity deformation); the global/local heads keep random weights
/// so that gradient can reach them through the fusion conv once training
/// starts.
template <typename T>
DdnModel<T> build_ddn(const DdnConfig& cfg, std::uint64_t seed);

template <typename T>
struct DdnFlowIds {
    typename Graph<T>::Id global_flow;
    typename Graph<T>::Id local_flow;
    typename Graph<T>::Id fused_flow;
};

/// Wires the network into an existing graph. src/tgt are graph nodes holding
/// (N, 1, p, p, p) patches. Train mode uses batch statistics and updates the
/// model's running stats in place.
template <typename T>
DdnFlowIds<T> ddn_forward(Graph<T>& g, DdnModel<T>& model, typename Graph<T>::Id src,
                          typename Graph<T>::Id tgt, RunMode mode);

template <typename T>
struct DdnFlows {
    Tensor5<T> global_flow; // 3 x p^3
    Tensor5<T> local_flow;  // 3 x (p/2)^3
    Tensor5<T> fused_flow;  // 3 x p^3
};

/// Standalone forward pass on raw patch tensors.
template <typename T>
DdnFlows<T> ddn_forward(DdnModel<T>& model, const Tensor5<T>& src, const Tensor5<T>& tgt,
                        RunMode mode);

extern template struct DdnModel<float>;
extern template struct DdnModel<double>;
extern template DdnModel<float> build_ddn<float>(const DdnConfig&, std::uint64_t);
extern template DdnModel<double> build_ddn<double>(const DdnConfig&, std::uint64_t);
extern template DdnFlowIds<float> ddn_forward<float>(Graph<float>&, DdnModel<float>&,
                                                     Graph<float>::Id, Graph<float>::Id, RunMode);
extern template DdnFlowIds<double> ddn_forward<double>(Graph<double>&, DdnModel<double>&,
                                                       Graph<double>::Id, Graph<double>::Id, RunMode);
extern template DdnFlows<float> ddn_forward<float>(DdnModel<float>&, const Tensor5<float>&,
                                                   const Tensor5<float>&, RunMode);
extern template DdnFlows<double> ddn_forward<double>(DdnModel<double>&, const Tensor5<double>&,
                                                     const Tensor5<double>&, RunMode);

} // namespace ddn
