#include "ddn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ddn/loss.hpp"
#include "ddn/model.hpp"
#include "ddn/random.hpp"

namespace ddn {

namespace {
double rel_err(double a, double b) {
    return std::abs(a - b) / std::max(1e-8, std::abs(a) + std::abs(b));
}
} // namespace

double grad_check(std::vector<Tensor5<double>> inputs, const LossBuilder& build, double eps) {
    // analytic gradients
    std::vector<Tensor5<double>> grads;
    {
        Graph<double> g;
        std::vector<Graph<double>::Id> ids;
        ids.reserve(inputs.size());
        for (auto& t : inputs) ids.push_back(g.variable(t));
        const auto loss = build(g, ids);
        g.backward(loss);
        for (auto id : ids) grads.push_back(g.grad(id));
    }

    auto eval = [&](const std::vector<Tensor5<double>>& vals) {
        Graph<double> g;
        std::vector<Graph<double>::Id> ids;
        for (const auto& t : vals) ids.push_back(g.input(t));
        return double(g.scalar_val(build(g, ids)));
    };

    double worst = 0.0;
    for (std::size_t t = 0; t < inputs.size(); ++t) {
        for (std::size_t i = 0; i < inputs[t].size(); ++i) {
            const double keep = inputs[t].data[i];
            inputs[t].data[i] = keep + eps;
            const double lp = eval(inputs);
            inputs[t].data[i] = keep - eps;
            const double lm = eval(inputs);
            inputs[t].data[i] = keep;
            const double fd = (lp - lm) / (2.0 * eps);
            worst = std::max(worst, rel_err(fd, grads[t].data[i]));
        }
    }
    return worst;
}

double grad_check_params(std::vector<Parameter<double>*> params,
                         const std::function<double(bool)>& eval, double eps) {
    eval(true);
    std::vector<Tensor5<double>> grads;
    grads.reserve(params.size());
    for (auto* p : params) grads.push_back(p->grad);

    double worst = 0.0;
    for (std::size_t t = 0; t < params.size(); ++t) {
        auto& val = params[t]->value;
        for (std::size_t i = 0; i < val.size(); ++i) {
            const double keep = val.data[i];
            val.data[i] = keep + eps;
            const double lp = eval(false);
            val.data[i] = keep - eps;
            const double lm = eval(false);
            val.data[i] = keep;
            const double fd = (lp - lm) / (2.0 * eps);
            worst = std::max(worst, rel_err(fd, grads[t].data[i]));
        }
    }
    return worst;
}

// ---------------------------------------------------------------------------
// op suite
// ---------------------------------------------------------------------------

namespace {

using Gd = Graph<double>;

Tensor5<double> random_tensor(Rng& rng, Shape5 s, double lo, double hi) {
    Tensor5<double> t(s);
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// nonlinear scalar readout so misrouted gradients change the answer
Gd::Id readout(Gd& g, Gd::Id x) { return g.sum(g.leaky_relu(x, 0.3)); }

} // namespace

std::vector<GradCheckResult> gradcheck_suite(int size, double eps, std::uint64_t seed) {
    if (size < 5) throw config_error("gradcheck_suite: size must be >= 5");
    const int s = std::min(size, 6);
    std::vector<GradCheckResult> results;
    Rng rng(seed);
    constexpr double kOpTol = 1e-4;
    constexpr double kCompositeTol = 1e-3;

    auto run = [&](const std::string& name, std::vector<Tensor5<double>> inputs,
                   const LossBuilder& build, double tol) {
        results.push_back({name, grad_check(std::move(inputs), build, eps), tol});
    };

    run("conv3d(same)",
        {random_tensor(rng, {2, 2, s, s, s}, -1, 1), random_tensor(rng, {3, 2, 3, 3, 3}, -0.5, 0.5),
         random_tensor(rng, {1, 3, 1, 1, 1}, -0.5, 0.5)},
        [](Gd& g, const std::vector<Gd::Id>& in) {
            return readout(g, g.conv3d(in[0], in[1], in[2], 1, Pad::same));
        },
        kOpTol);
    run("conv3d(valid)",
        {random_tensor(rng, {1, 2, s, s, s}, -1, 1), random_tensor(rng, {2, 2, 3, 3, 3}, -0.5, 0.5),
         random_tensor(rng, {1, 2, 1, 1, 1}, -0.5, 0.5)},
        [](Gd& g, const std::vector<Gd::Id>& in) {
            return readout(g, g.conv3d(in[0], in[1], in[2], 1, Pad::valid));
        },
        kOpTol);
    run("conv3d(stride2)",
        {random_tensor(rng, {1, 2, s, s, s}, -1, 1), random_tensor(rng, {2, 2, 3, 3, 3}, -0.5, 0.5),
         random_tensor(rng, {1, 2, 1, 1, 1}, -0.5, 0.5)},
        [](Gd& g, const std::vector<Gd::Id>& in) {
            return readout(g, g.conv3d(in[0], in[1], in[2], 2, Pad::same));
        },
        kOpTol);

    for (const RunMode mode : {RunMode::train, RunMode::infer}) {
        const bool train = mode == RunMode::train;
        run(train ? "batch_norm(train)" : "batch_norm(infer)",
            {random_tensor(rng, {2, 3, 4, 4, 4}, -1, 1), random_tensor(rng, {1, 3, 1, 1, 1}, 0.5, 1.5),
             random_tensor(rng, {1, 3, 1, 1, 1}, -0.5, 0.5)},
            [mode](Gd& g, const std::vector<Gd::Id>& in) {
                // running stats owned here so repeated evaluations start equal
                Parameter<double> rmean("rmean", Tensor5<double>({1, 3, 1, 1, 1}, 0.1), false);
                Parameter<double> rvar("rvar", Tensor5<double>({1, 3, 1, 1, 1}, 0.8), false);
                return readout(g, g.batch_norm(in[0], in[1], in[2], rmean, rvar, mode, 0.9, 1e-5));
            },
            kOpTol);
    }

    run("leaky_relu", {random_tensor(rng, {2, 2, s, s, s}, -1, 1)},
        [](Gd& g, const std::vector<Gd::Id>& in) { return g.sum(g.leaky_relu(in[0], 0.2)); },
        kOpTol);

    run("concat_channels",
        {random_tensor(rng, {1, 2, 4, 4, 4}, -1, 1), random_tensor(rng, {1, 3, 4, 4, 4}, -1, 1)},
        [](Gd& g, const std::vector<Gd::Id>& in) {
            return readout(g, g.concat_channels({in[0], in[1]}));
        },
        kOpTol);

    run("avg_pool2", {random_tensor(rng, {2, 2, 4, s, s}, -1, 1)},
        [](Gd& g, const std::vector<Gd::Id>& in) { return readout(g, g.avg_pool2(in[0])); },
        kOpTol);

    run("upsample_trilinear2", {random_tensor(rng, {1, 2, 3, 3, 3}, -1, 1)},
        [](Gd& g, const std::vector<Gd::Id>& in) {
            return readout(g, g.upsample_trilinear2(in[0]));
        },
        kOpTol);

    run("scale+add",
        {random_tensor(rng, {1, 2, 3, 3, 3}, -1, 1), random_tensor(rng, {1, 2, 3, 3, 3}, -1, 1)},
        [](Gd& g, const std::vector<Gd::Id>& in) {
            return readout(g, g.add(g.scale(in[0], 1.7), in[1]));
        },
        kOpTol);

    // flow offsets in (0.1, 0.45): sample coordinates stay away from lattice
    // points and the clamp kinks, where the derivative jumps
    run("warp_trilinear",
        {random_tensor(rng, {1, 1, s, s, s}, 0, 1), random_tensor(rng, {1, 3, s, s, s}, 0.1, 0.45)},
        [](Gd& g, const std::vector<Gd::Id>& in) {
            return readout(g, g.warp_trilinear(in[0], in[1]));
        },
        kOpTol);

    run("ncc_loss(window)",
        {random_tensor(rng, {2, 1, s, s, s}, 0, 1), random_tensor(rng, {2, 1, s, s, s}, 0, 1)},
        [](Gd& g, const std::vector<Gd::Id>& in) {
            return g.ncc_loss(in[0], in[1], 5, 1e-5, false);
        },
        kOpTol);
    run("ncc_loss(global)",
        {random_tensor(rng, {2, 1, s, s, s}, 0, 1), random_tensor(rng, {2, 1, s, s, s}, 0, 1)},
        [](Gd& g, const std::vector<Gd::Id>& in) {
            return g.ncc_loss(in[0], in[1], 0, 1e-5, true);
        },
        kOpTol);

    run("diffusion_reg", {random_tensor(rng, {2, 3, 5, 5, 5}, -1, 1)},
        [](Gd& g, const std::vector<Gd::Id>& in) { return g.diffusion_reg(in[0]); }, kOpTol);

    {
        LossConfig lcfg;
        lcfg.cc_window = 5;
        lcfg.lambda_smooth = 0.7f;
        run("total_loss",
            {random_tensor(rng, {1, 1, s, s, s}, 0, 1),
             random_tensor(rng, {1, 1, s, s, s}, 0, 1),
             random_tensor(rng, {1, 3, s, s, s}, 0.1, 0.45)},
            [lcfg](Gd& g, const std::vector<Gd::Id>& in) {
                return total_loss(g, in[0], in[1], in[2], lcfg).total;
            },
            kOpTol);
    }

    // end-to-end: loss o warp o network on an 8^3 toy; the fusion head is
    // nudged off zero so flows sit away from the sampling kinks at lattice
    // points
    {
        DdnConfig cfg;
        cfg.patch_size = 8;
        cfg.units_per_block = 2;
        cfg.growth = 3;
        cfg.base_channels = 4;
        DdnModel<double> model = build_ddn<double>(cfg, seed ^ 0xddull);
        auto& fusion_w = model.find("head.fusion.w");
        auto& fusion_b = model.find("head.fusion.b");
        for (auto& v : fusion_w.value.data) v = rng.uniform(-0.02, 0.02);
        fusion_b.value.data = {0.23, 0.31, 0.17};

        const Tensor5<double> src = random_tensor(rng, {1, 1, 8, 8, 8}, 0, 1);
        const Tensor5<double> tgt = random_tensor(rng, {1, 1, 8, 8, 8}, 0, 1);
        LossConfig lcfg;
        lcfg.cc_window = 5;

        std::vector<Parameter<double>*> params;
        for (auto& p : model.params)
            if (p.trainable) params.push_back(&p);

        const auto eval = [&](bool with_grad) {
            Graph<double> g;
            const auto flows = ddn_forward(g, model, g.input(src), g.input(tgt), RunMode::train);
            const auto loss = total_loss(g, g.input(src), g.input(tgt), flows.fused_flow, lcfg);
            if (with_grad) {
                model.zero_grads();
                g.backward(loss.total);
            }
            return double(g.scalar_val(loss.total));
        };
        // the composite crosses dozens of piecewise-linear activations, where
        // a wide central difference straddles kinks; the step must shrink
        // until the crossing probability is negligible (f64 keeps the
        // cancellation noise far below the threshold)
        const double composite_eps = std::min(eps, 1e-6);
        results.push_back(
            {"ddn_composite", grad_check_params(params, eval, composite_eps), kCompositeTol});
    }

    return results;
}

} // namespace ddn
