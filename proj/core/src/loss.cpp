#include "ddn/loss.hpp"

namespace ddn {

template <typename T>
LossNodes<T> total_loss(Graph<T>& g, typename Graph<T>::Id src, typename Graph<T>::Id tgt,
                        typename Graph<T>::Id flow, const LossConfig& cfg) {
    cfg.validate();
    LossNodes<T> out;
    out.warped = g.warp_trilinear(src, flow);
    out.similarity = g.ncc_loss(out.warped, tgt, cfg.cc_window, T(cfg.eps), cfg.global_cc);
    out.smooth = g.diffusion_reg(flow);
    out.total = g.add(out.similarity, g.scale(out.smooth, T(cfg.lambda_smooth)));
    return out;
}

template LossNodes<float> total_loss<float>(Graph<float>&, Graph<float>::Id, Graph<float>::Id,
                                            Graph<float>::Id, const LossConfig&);
template LossNodes<double> total_loss<double>(Graph<double>&, Graph<double>::Id,
                                              Graph<double>::Id, Graph<double>::Id,
                                              const LossConfig&);

} // namespace ddn
