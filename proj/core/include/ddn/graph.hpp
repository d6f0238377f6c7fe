#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "ddn/tensor.hpp"

namespace ddn {

enum class RunMode { train, infer };
enum class Pad { same, valid };

/// Define-by-run reverse-mode graph over Tensor5<T>. Node creation runs the
/// forward computation immediately; backward() walks the tape in reverse.
/// Creation order is the topological order.
///
/// Reductions inside every op are sequenced over fixed structural partitions
/// (channels, rows), so results are bitwise reproducible for any thread count.
template <typename T>
class Graph {
public:
    using Id = std::int32_t;

    Graph();
    ~Graph();
    Graph(Graph&&) noexcept;
    Graph& operator=(Graph&&) noexcept;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Leaf that never needs a gradient.
    Id input(Tensor5<T> v);
    /// Differentiable leaf with local gradient storage.
    Id variable(Tensor5<T> v);
    /// Leaf bound to a Parameter; backward() accumulates into p.grad
    /// (only if p.trainable).
    Id param(Parameter<T>& p);

    /// Cross-correlation convolution, weights (Cout, Cin, k, k, k) packed as
    /// Tensor5 {n=Cout, c=Cin, d=h=w=k}, bias (1, Cout, 1, 1, 1).
    /// Pad::same zero-pads so output extents are ceil(input / stride);
    /// k must be odd for Pad::same.
    Id conv3d(Id x, Id w, Id b, int stride = 1, Pad pad = Pad::same);

    /// Per-channel batch normalization. Train mode normalizes by batch
    /// statistics over (N, D, H, W) and updates the running stats as
    /// r <- momentum * r + (1 - momentum) * batch; infer mode uses the
    /// running stats. run_mean/run_var shapes are (1, C, 1, 1, 1).
    Id batch_norm(Id x, Id gamma, Id beta, Parameter<T>& run_mean, Parameter<T>& run_var,
                  RunMode mode, T momentum, T eps);

    Id leaky_relu(Id x, T slope);

    /// Channel concatenation; all inputs share N, D, H, W.
    Id concat_channels(const std::vector<Id>& xs);

    /// Non-overlapping 2x2x2 averaging; odd trailing extents drop the last plane.
    Id avg_pool2(Id x);

    /// Align-corners trilinear upsampling to (2D, 2H, 2W).
    Id upsample_trilinear2(Id x);

    Id scale(Id x, T alpha);
    Id add(Id a, Id b);

    /// Backward-warp src by flow: out(p) = trilinear(src, p + flow(p)),
    /// border-clamped. src (N, C, D, H, W); flow (N, 3, D, H, W) with
    /// channels (ux, uy, uz) in voxel units (x along W, y along H, z along D).
    Id warp_trilinear(Id src, Id flow);

    /// Windowed squared cross-correlation loss, -mean_p CC(p), CC in [0,1].
    /// Windows of size w^3 centered at each voxel, zero-padded at borders.
    /// global_window ignores w and correlates over the whole spatial domain.
    Id ncc_loss(Id a, Id b, int window, T eps, bool global_window = false);

    /// Mean over voxels and components of the squared forward differences
    /// of a 3-channel flow; differences at the last plane are zero.
    Id diffusion_reg(Id flow);

    /// Scalar sum of all elements.
    Id sum(Id x);

    const Tensor5<T>& val(Id id) const;
    /// Gradient accumulated at a node (valid after backward()).
    const Tensor5<T>& grad(Id id) const;
    T scalar_val(Id id) const;

    /// Reverse-topological gradient accumulation from a scalar loss node.
    void backward(Id loss);

    std::size_t node_count() const;

    /// Per-node NaN/Inf assertion on forward outputs (throws numeric_error).
    /// On by default.
    void set_check_finite(bool on);

private:
    struct State;
    std::unique_ptr<State> state_;
};

extern template class Graph<float>;
extern template class Graph<double>;

} // namespace ddn
