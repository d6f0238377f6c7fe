#pragma once

#include <functional>
#include <vector>

#include "ddn/graph.hpp"

namespace ddn {

/// Builds a scalar loss over the given differentiable leaves; called once per
/// finite-difference evaluation, so it must be deterministic.
using LossBuilder =
    std::function<Graph<double>::Id(Graph<double>&, const std::vector<Graph<double>::Id>&)>;

/// Central finite differences against reverse-mode gradients for every
/// coordinate of every input. Returns the max relative error
/// |a - b| / max(1e-8, |a| + |b|).
double grad_check(std::vector<Tensor5<double>> inputs, const LossBuilder& build,
                  double eps = 1e-3);

/// Same check against an externally managed parameter set: eval(true) must
/// zero the grads, run forward+backward and leave dL/dtheta in each
/// Parameter::grad; eval(false) returns the loss only.
double grad_check_params(std::vector<Parameter<double>*> params,
                         const std::function<double(bool with_grad)>& eval, double eps = 1e-3);

struct GradCheckResult {
    std::string name;
    double max_rel_err = 0.0;
    double threshold = 0.0;

    bool pass() const { return max_rel_err < threshold; }
};

/// Finite-difference verification of every differentiable op (f64): conv3d
/// (same/valid/strided), batch_norm (train/infer), leaky_relu, concat,
/// avg_pool, upsample, warp, ncc_loss (windowed/global), diffusion_reg,
/// total_loss, and the full network composite. `size` bounds the spatial
/// extents. Thresholds: 1e-4 per op, 1e-3 for the composite.
std::vector<GradCheckResult> gradcheck_suite(int size, double eps, std::uint64_t seed);

} // namespace ddn
