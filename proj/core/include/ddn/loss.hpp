#pragma once

#include "ddn/graph.hpp"

namespace ddn {

/// Training objective: windowed negative squared cross-correlation plus
/// lambda * diffusion regularization of the flow.
struct LossConfig {
    float lambda_smooth = 1.0f;
    int cc_window = 9; // odd, >= 3
    float eps = 1e-5f;
    bool global_cc = false; // ablation switch: whole-patch CC instead of windows

    void validate() const {
        if (lambda_smooth < 0.0f) throw config_error("LossConfig: lambda_smooth must be >= 0");
        if (cc_window < 3 || cc_window % 2 == 0)
            throw config_error("LossConfig: cc_window must be odd and >= 3");
        if (!(eps > 0.0f)) throw config_error("LossConfig: eps must be positive");
    }
};

template <typename T>
struct LossNodes {
    typename Graph<T>::Id warped;
    typename Graph<T>::Id similarity; // in [-1, 0]
    typename Graph<T>::Id smooth;     // >= 0
    typename Graph<T>::Id total;
};

/// total = ncc_loss(warp(src, flow), tgt) + lambda * diffusion_reg(flow)
template <typename T>
LossNodes<T> total_loss(Graph<T>& g, typename Graph<T>::Id src, typename Graph<T>::Id tgt,
                        typename Graph<T>::Id flow, const LossConfig& cfg);

extern template LossNodes<float> total_loss<float>(Graph<float>&, Graph<float>::Id,
                                                   Graph<float>::Id, Graph<float>::Id,
                                                   const LossConfig&);
extern template LossNodes<double> total_loss<double>(Graph<double>&, Graph<double>::Id,
                                                     Graph<double>::Id, Graph<double>::Id,
                                                     const LossConfig&);

} // namespace ddn
