#include "ddn/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "ddn/threading.hpp"

namespace ddn {

namespace {

// ---------------------------------------------------------------------------
// shared kernel helpers
// ---------------------------------------------------------------------------

struct ConvGeom {
    int Do, Ho, Wo;
    int pd, ph, pw;
};

ConvGeom conv_geometry(const Shape5& x, int k, int stride, Pad pad) {
    ConvGeom g{};
    if (pad == Pad::same) {
        g.Do = (x.d + stride - 1) / stride;
        g.Ho = (x.h + stride - 1) / stride;
        g.Wo = (x.w + stride - 1) / stride;
        g.pd = std::max((g.Do - 1) * stride + k - x.d, 0) / 2;
        g.ph = std::max((g.Ho - 1) * stride + k - x.h, 0) / 2;
        g.pw = std::max((g.Wo - 1) * stride + k - x.w, 0) / 2;
    } else {
        if (x.d < k || x.h < k || x.w < k)
            throw config_error("conv3d: input smaller than kernel for valid padding");
        g.Do = (x.d - k) / stride + 1;
        g.Ho = (x.h - k) / stride + 1;
        g.Wo = (x.w - k) / stride + 1;
        g.pd = g.ph = g.pw = 0;
    }
    return g;
}

// Inclusive-range helpers for the x-fastest inner loops.
inline int div_ceil(int a, int b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); }
inline int div_floor(int a, int b) { return a >= 0 ? a / b : -div_ceil(-a, b); }

// ---------------------------------------------------------------------------
// stride-1 convolution fast path
//
// One zero-padded copy of the sample (extents + k - 1, data at the pad
// offset) removes all bounds logic from the tap loops; outputs are computed
// in fixed 16-wide register tiles so each tap is one load + one fma.
// ---------------------------------------------------------------------------

constexpr int kConvTile = 16;

template <typename T>
void pad_sample(const Tensor5<T>& x, int n, int pd, int ph, int pw, int Dp, int Hp, int Wp,
                std::vector<T>& out) {
    const int Ci = x.shape.c, D = x.shape.d, H = x.shape.h, W = x.shape.w;
    out.assign(std::size_t(Ci) * Dp * Hp * Wp, T(0));
    parallel_for(Ci, [&](std::int64_t ci) {
        for (int z = 0; z < D; ++z)
            for (int y = 0; y < H; ++y) {
                const T* src = x.ptr(n, int(ci), z, y, 0);
                T* dst = out.data() +
                         ((std::size_t(ci) * Dp + z + pd) * Hp + (y + ph)) * Wp + pw;
                std::copy(src, src + W, dst);
            }
    });
}

// y(n,co,od,oh,ow) (+)= bias + sum_taps xpad(ci,od+kd,oh+kh,ow+kw) * w(co,ci,taps)
// xpad extents: (Ci, Dp, Hp, Wp) with Dp/Hp/Wp = source extent + k - 1.
template <typename T, int KT, bool ACCUM>
void conv_rows_s1(const T* __restrict xpad, const T* __restrict w, const T* bias,
                  Tensor5<T>& y, int n, int Ci, int k_rt, int Dp, int Hp, int Wp) {
    const int Co = y.shape.c, Do = y.shape.d, Ho = y.shape.h, Wo = y.shape.w;
    const int k = KT > 0 ? KT : k_rt;
    const std::size_t plane = std::size_t(Hp) * Wp;
    const std::size_t chan = std::size_t(Dp) * plane;

    parallel_for(Co, [&](std::int64_t co64) {
        const int co = int(co64);
        const T b = bias ? bias[co] : T(0);
        const T* wco = w + std::size_t(co) * Ci * k * k * k;
        for (int od = 0; od < Do; ++od)
            for (int oh = 0; oh < Ho; ++oh) {
                T* __restrict yrow = y.ptr(n, co, od, oh, 0);
                int ow = 0;
                for (; ow + kConvTile <= Wo; ow += kConvTile) {
                    T acc[kConvTile] = {};
                    const T* wp = wco;
                    for (int ci = 0; ci < Ci; ++ci) {
                        const T* xci = xpad + std::size_t(ci) * chan;
                        for (int kd = 0; kd < k; ++kd)
                            for (int kh = 0; kh < k; ++kh) {
                                const T* __restrict xr = xci + std::size_t(od + kd) * plane +
                                                         std::size_t(oh + kh) * Wp + ow;
                                for (int kw = 0; kw < k; ++kw) {
                                    const T wv = *wp++;
                                    for (int j = 0; j < kConvTile; ++j)
                                        acc[j] += wv * xr[kw + j];
                                }
                            }
                    }
                    if constexpr (ACCUM)
                        for (int j = 0; j < kConvTile; ++j) yrow[ow + j] += acc[j] + b;
                    else
                        for (int j = 0; j < kConvTile; ++j) yrow[ow + j] = acc[j] + b;
                }
                for (; ow < Wo; ++ow) {
                    T acc = 0;
                    const T* wp = wco;
                    for (int ci = 0; ci < Ci; ++ci) {
                        const T* xci = xpad + std::size_t(ci) * chan;
                        for (int kd = 0; kd < k; ++kd)
                            for (int kh = 0; kh < k; ++kh) {
                                const T* xr = xci + std::size_t(od + kd) * plane +
                                              std::size_t(oh + kh) * Wp + ow;
                                for (int kw = 0; kw < k; ++kw) acc += *wp++ * xr[kw];
                            }
                    }
                    if constexpr (ACCUM)
                        yrow[ow] += acc + b;
                    else
                        yrow[ow] = acc + b;
                }
            }
    });
}

template <typename T, bool ACCUM>
void conv_rows_s1_dispatch(const T* xpad, const T* w, const T* bias, Tensor5<T>& y, int n,
                           int Ci, int k, int Dp, int Hp, int Wp) {
    if (k == 1)
        conv_rows_s1<T, 1, ACCUM>(xpad, w, bias, y, n, Ci, k, Dp, Hp, Wp);
    else if (k == 3)
        conv_rows_s1<T, 3, ACCUM>(xpad, w, bias, y, n, Ci, k, Dp, Hp, Wp);
    else
        conv_rows_s1<T, 0, ACCUM>(xpad, w, bias, y, n, Ci, k, Dp, Hp, Wp);
}

template <typename T>
void conv3d_forward_s1(const Tensor5<T>& x, const Tensor5<T>& w, const Tensor5<T>& b,
                       const ConvGeom& g, Tensor5<T>& y) {
    const int Ci = x.shape.c, k = w.shape.d;
    // the tap loops read [0, Do + k - 2] per axis
    const int Dp = g.Do + k - 1, Hp = g.Ho + k - 1, Wp = g.Wo + k - 1;
    std::vector<T> xpad;
    for (int n = 0; n < x.shape.n; ++n) {
        pad_sample(x, n, g.pd, g.ph, g.pw, Dp, Hp, Wp, xpad);
        conv_rows_s1_dispatch<T, false>(xpad.data(), w.data.data(), b.data.data(), y, n, Ci, k,
                                        Dp, Hp, Wp);
    }
}

// dL/dx for stride 1 as a full correlation: pad gy by (k-1-pad) and convolve
// with the channel-transposed, spatially flipped kernel.
template <typename T>
void conv3d_backward_data_s1(const Tensor5<T>& w, const Tensor5<T>& gy, const ConvGeom& g,
                             Tensor5<T>& gx) {
    const int Ci = gx.shape.c, Co = w.shape.n, k = w.shape.d;

    Tensor5<T> wflip({Ci, Co, k, k, k});
    for (int co = 0; co < Co; ++co)
        for (int ci = 0; ci < Ci; ++ci)
            for (int kd = 0; kd < k; ++kd)
                for (int kh = 0; kh < k; ++kh)
                    for (int kw = 0; kw < k; ++kw)
                        wflip.at(ci, co, kd, kh, kw) =
                            w.at(co, ci, k - 1 - kd, k - 1 - kh, k - 1 - kw);

    const int Dp = gx.shape.d + k - 1, Hp = gx.shape.h + k - 1, Wp = gx.shape.w + k - 1;
    std::vector<T> gypad;
    for (int n = 0; n < gx.shape.n; ++n) {
        pad_sample(gy, n, k - 1 - g.pd, k - 1 - g.ph, k - 1 - g.pw, Dp, Hp, Wp, gypad);
        conv_rows_s1_dispatch<T, true>(gypad.data(), wflip.data.data(), nullptr, gx, n, Co, k,
                                       Dp, Hp, Wp);
    }
}

// Generic-stride forward, used only off the s=1 path.
template <typename T>
void conv3d_forward_generic(const Tensor5<T>& x, const Tensor5<T>& w, const Tensor5<T>& b,
                            int s, const ConvGeom& g, Tensor5<T>& y) {
    const int N = x.shape.n, Ci = x.shape.c, D = x.shape.d, H = x.shape.h, W = x.shape.w;
    const int Co = w.shape.n, k = w.shape.d;
    const std::size_t wcstride = std::size_t(Ci) * k * k * k;

    parallel_for(std::int64_t(N) * Co, [&](std::int64_t job) {
        const int n = int(job / Co), co = int(job % Co);
        const T bias = b.data[std::size_t(co)];
        const T* wbase = w.data.data() + std::size_t(co) * wcstride;
        for (int od = 0; od < g.Do; ++od) {
            const int id0 = od * s - g.pd;
            for (int oh = 0; oh < g.Ho; ++oh) {
                const int ih0 = oh * s - g.ph;
                T* yrow = y.ptr(n, co, od, oh, 0);
                for (int ow = 0; ow < g.Wo; ++ow) yrow[ow] = bias;
                for (int ci = 0; ci < Ci; ++ci) {
                    const T* wch = wbase + std::size_t(ci) * k * k * k;
                    for (int kd = 0; kd < k; ++kd) {
                        const int id = id0 + kd;
                        if (id < 0 || id >= D) continue;
                        for (int kh = 0; kh < k; ++kh) {
                            const int ih = ih0 + kh;
                            if (ih < 0 || ih >= H) continue;
                            const T* xrow = x.ptr(n, ci, id, ih, 0);
                            const T* wrow = wch + (std::size_t(kd) * k + kh) * k;
                            for (int kw = 0; kw < k; ++kw) {
                                const T wv = wrow[kw];
                                const int off = kw - g.pw;
                                const int lo = std::max(0, div_ceil(-off, s));
                                const int hi = std::min(g.Wo, div_floor(W - 1 - off, s) + 1);
                                for (int ow = lo; ow < hi; ++ow)
                                    yrow[ow] += wv * xrow[ow * s + off];
                            }
                        }
                    }
                }
            }
        }
    });
}

// Generic-stride dL/dx: per-voxel gather with divisibility checks.
template <typename T>
void conv3d_backward_data_generic(const Tensor5<T>& w, const Tensor5<T>& gy, int s,
                                  const ConvGeom& g, Tensor5<T>& gx) {
    const int N = gx.shape.n, Ci = gx.shape.c, D = gx.shape.d, H = gx.shape.h, W = gx.shape.w;
    const int Co = w.shape.n, k = w.shape.d;

    parallel_for(std::int64_t(N) * Ci, [&](std::int64_t job) {
        const int n = int(job / Ci), ci = int(job % Ci);
        for (int id = 0; id < D; ++id)
            for (int ih = 0; ih < H; ++ih)
                for (int iw = 0; iw < W; ++iw) {
                    T acc = 0;
                    for (int co = 0; co < Co; ++co)
                        for (int kd = 0; kd < k; ++kd) {
                            const int odn = id + g.pd - kd;
                            if (odn % s != 0) continue;
                            const int od = odn / s;
                            if (od < 0 || od >= g.Do) continue;
                            for (int kh = 0; kh < k; ++kh) {
                                const int ohn = ih + g.ph - kh;
                                if (ohn % s != 0) continue;
                                const int oh = ohn / s;
                                if (oh < 0 || oh >= g.Ho) continue;
                                for (int kw = 0; kw < k; ++kw) {
                                    const int own = iw + g.pw - kw;
                                    if (own % s != 0) continue;
                                    const int ow = own / s;
                                    if (ow < 0 || ow >= g.Wo) continue;
                                    acc += w.at(co, ci, kd, kh, kw) * gy.at(n, co, od, oh, ow);
                                }
                            }
                        }
                    gx.at(n, ci, id, ih, iw) += acc;
                }
    });
}

// dL/dw and dL/db for stride 1, on the padded input. Per (co, ci, kd, kh)
// the k taps along w are reduced in fixed 16-wide lane partials so the sums
// vectorize without reassociation; one output channel per job keeps every
// reduction sequenced within a single worker.
template <typename T, int KT>
void conv3d_backward_filter_s1(const Tensor5<T>& x, const Tensor5<T>& gy, const ConvGeom& g,
                               Tensor5<T>& gw, Tensor5<T>& gb) {
    const int N = x.shape.n, Ci = x.shape.c;
    const int Co = gw.shape.n;
    const int k = KT > 0 ? KT : gw.shape.d;
    const int Do = gy.shape.d, Ho = gy.shape.h, Wo = gy.shape.w;
    const int Dp = Do + k - 1, Hp = Ho + k - 1, Wp = Wo + k - 1;
    const std::size_t plane = std::size_t(Hp) * Wp;
    const std::size_t chan = std::size_t(Dp) * plane;
    const std::size_t taps = std::size_t(Ci) * k * k * k;
    constexpr int kMaxK = 7;
    static_assert(KT <= kMaxK);

    std::vector<double> acc(std::size_t(Co) * taps, 0.0);
    std::vector<double> bacc(std::size_t(Co), 0.0);
    std::vector<T> xpad;

    for (int n = 0; n < N; ++n) {
        pad_sample(x, n, g.pd, g.ph, g.pw, Dp, Hp, Wp, xpad);
        parallel_for(Co, [&](std::int64_t co64) {
            const int co = int(co64);
            double* aco = acc.data() + std::size_t(co) * taps;
            {
                T blanes[kConvTile] = {};
                T btail = 0;
                for (int od = 0; od < Do; ++od)
                    for (int oh = 0; oh < Ho; ++oh) {
                        const T* __restrict gyrow = gy.ptr(n, co, od, oh, 0);
                        int ow = 0;
                        for (; ow + kConvTile <= Wo; ow += kConvTile)
                            for (int j = 0; j < kConvTile; ++j) blanes[j] += gyrow[ow + j];
                        for (; ow < Wo; ++ow) btail += gyrow[ow];
                    }
                double bsum = double(btail);
                for (int j = 0; j < kConvTile; ++j) bsum += double(blanes[j]);
                bacc[std::size_t(co)] += bsum;
            }
            for (int ci = 0; ci < Ci; ++ci) {
                const T* xci = xpad.data() + std::size_t(ci) * chan;
                for (int kd = 0; kd < k; ++kd)
                    for (int kh = 0; kh < k; ++kh) {
                        T lanes[KT > 0 ? KT : kMaxK][kConvTile] = {};
                        T tails[KT > 0 ? KT : kMaxK] = {};
                        for (int od = 0; od < Do; ++od)
                            for (int oh = 0; oh < Ho; ++oh) {
                                const T* __restrict gyrow = gy.ptr(n, co, od, oh, 0);
                                const T* __restrict xr = xci + std::size_t(od + kd) * plane +
                                                         std::size_t(oh + kh) * Wp;
                                int ow = 0;
                                for (; ow + kConvTile <= Wo; ow += kConvTile)
                                    for (int kw = 0; kw < k; ++kw)
                                        for (int j = 0; j < kConvTile; ++j)
                                            lanes[kw][j] += gyrow[ow + j] * xr[ow + kw + j];
                                for (; ow < Wo; ++ow)
                                    for (int kw = 0; kw < k; ++kw)
                                        tails[kw] += gyrow[ow] * xr[ow + kw];
                            }
                        double* arow =
                            aco + (std::size_t(ci) * k * k + std::size_t(kd) * k + kh) * k;
                        for (int kw = 0; kw < k; ++kw) {
                            double sum = double(tails[kw]);
                            for (int j = 0; j < kConvTile; ++j) sum += double(lanes[kw][j]);
                            arow[kw] += sum;
                        }
                    }
            }
        });
    }

    for (std::size_t i = 0; i < gw.size(); ++i) gw.data[i] += T(acc[i]);
    for (int co = 0; co < Co; ++co) gb.data[std::size_t(co)] += T(bacc[std::size_t(co)]);
}

template <typename T>
void conv3d_backward_filter_s1_dispatch(const Tensor5<T>& x, const Tensor5<T>& gy,
                                        const ConvGeom& g, Tensor5<T>& gw, Tensor5<T>& gb) {
    const int k = gw.shape.d;
    if (k == 1)
        conv3d_backward_filter_s1<T, 1>(x, gy, g, gw, gb);
    else if (k == 3)
        conv3d_backward_filter_s1<T, 3>(x, gy, g, gw, gb);
    else if (k <= 7)
        conv3d_backward_filter_s1<T, 0>(x, gy, g, gw, gb);
    else
        throw config_error("conv3d: kernels larger than 7 are not supported");
}

// Generic-stride dL/dw and dL/db.
template <typename T>
void conv3d_backward_filter_generic(const Tensor5<T>& x, const Tensor5<T>& gy, int s,
                                    const ConvGeom& g, Tensor5<T>& gw, Tensor5<T>& gb) {
    const int N = x.shape.n, Ci = x.shape.c, D = x.shape.d, H = x.shape.h, W = x.shape.w;
    const int Co = gw.shape.n, k = gw.shape.d;
    const std::size_t taps = std::size_t(Ci) * k * k * k;

    parallel_for(Co, [&](std::int64_t co64) {
        const int co = int(co64);
        std::vector<double> acc(taps, 0.0);
        double bacc = 0.0;
        for (int n = 0; n < N; ++n) {
            for (int od = 0; od < g.Do; ++od) {
                const int id0 = od * s - g.pd;
                for (int oh = 0; oh < g.Ho; ++oh) {
                    const int ih0 = oh * s - g.ph;
                    const T* gyrow = gy.ptr(n, co, od, oh, 0);
                    double rowsum = 0.0;
                    for (int ow = 0; ow < g.Wo; ++ow) rowsum += double(gyrow[ow]);
                    bacc += rowsum;
                    for (int ci = 0; ci < Ci; ++ci) {
                        for (int kd = 0; kd < k; ++kd) {
                            const int id = id0 + kd;
                            if (id < 0 || id >= D) continue;
                            for (int kh = 0; kh < k; ++kh) {
                                const int ih = ih0 + kh;
                                if (ih < 0 || ih >= H) continue;
                                const T* xrow = x.ptr(n, ci, id, ih, 0);
                                double* arow = acc.data() + (std::size_t(ci) * k * k + std::size_t(kd) * k + kh) * k;
                                for (int kw = 0; kw < k; ++kw) {
                                    const int off = kw - g.pw;
                                    const int lo = std::max(0, div_ceil(-off, s));
                                    const int hi = std::min(g.Wo, div_floor(W - 1 - off, s) + 1);
                                    T dot = 0;
                                    for (int ow = lo; ow < hi; ++ow)
                                        dot += gyrow[ow] * xrow[ow * s + off];
                                    arow[kw] += double(dot);
                                }
                            }
                        }
                    }
                }
            }
        }
        T* gwbase = gw.data.data() + std::size_t(co) * taps;
        for (std::size_t t = 0; t < taps; ++t) gwbase[t] += T(acc[t]);
        gb.data[std::size_t(co)] += T(bacc);
    });
}

// Sliding-window box sum with zero padding outside the domain, separable
// along x, y, z. Input and output are D*H*W doubles.
void box_sum_3d(const std::vector<double>& in, std::vector<double>& out,
                std::vector<double>& tmp, int D, int H, int W, int win) {
    const int hw = (win - 1) / 2;
    tmp.resize(in.size());
    out.resize(in.size());

    // x pass: in -> out
    parallel_for(std::int64_t(D) * H, [&](std::int64_t line) {
        const double* src = in.data() + std::size_t(line) * W;
        double* dst = out.data() + std::size_t(line) * W;
        double run = 0.0;
        for (int x = 0; x < std::min(hw, W); ++x) run += src[x];
        for (int x = 0; x < W; ++x) {
            if (x + hw < W) run += src[x + hw];
            dst[x] = run;
            if (x - hw >= 0) run -= src[x - hw];
        }
    });
    // y pass: out -> tmp
    parallel_for(D, [&](std::int64_t z) {
        const double* src = out.data() + std::size_t(z) * H * W;
        double* dst = tmp.data() + std::size_t(z) * H * W;
        for (int x = 0; x < W; ++x) {
            double run = 0.0;
            for (int y = 0; y < std::min(hw, H); ++y) run += src[std::size_t(y) * W + x];
            for (int y = 0; y < H; ++y) {
                if (y + hw < H) run += src[std::size_t(y + hw) * W + x];
                dst[std::size_t(y) * W + x] = run;
                if (y - hw >= 0) run -= src[std::size_t(y - hw) * W + x];
            }
        }
    });
    // z pass: tmp -> out
    parallel_for(H, [&](std::int64_t y) {
        const std::size_t plane = std::size_t(H) * W;
        for (int x = 0; x < W; ++x) {
            const std::size_t base = std::size_t(y) * W + x;
            double run = 0.0;
            for (int z = 0; z < std::min(hw, D); ++z) run += tmp[std::size_t(z) * plane + base];
            for (int z = 0; z < D; ++z) {
                if (z + hw < D) run += tmp[std::size_t(z + hw) * plane + base];
                out[std::size_t(z) * plane + base] = run;
                if (z - hw >= 0) run -= tmp[std::size_t(z - hw) * plane + base];
            }
        }
    });
}

template <typename T>
bool all_finite(const Tensor5<T>& t) {
    for (const T v : t.data)
        if (!std::isfinite(double(v))) return false;
    return true;
}

} // namespace

// ---------------------------------------------------------------------------
// graph state
// ---------------------------------------------------------------------------

// Saved per-sample window moments for the windowed NCC backward pass.
struct NccCtx {
    // per sample: V doubles each
    std::vector<std::vector<double>> sa, sb, cross, vara, varb;
    // global variant: per-sample scalars
    std::vector<double> g_abar, g_bbar, g_cross, g_vara, g_varb;
};

template <typename T>
struct Graph<T>::State {
    enum class Op : std::uint8_t {
        leaf, conv3d, batch_norm, leaky_relu, concat, avg_pool2,
        upsample2, scale, add, warp, ncc, diffusion, sum_all
    };

    struct Node {
        Op op{};
        std::vector<Id> in;
        Tensor5<T> out;
        Tensor5<T> grad;
        bool needs_grad = false;

        Parameter<T>* par = nullptr;          // leaf
        int stride = 1;                       // conv
        Pad pad = Pad::same;                  // conv
        T alpha{};                            // scale factor / leaky slope
        RunMode mode = RunMode::infer;        // batch norm
        T momentum{}, eps{};                  // batch norm / ncc
        Parameter<T>* rmean = nullptr;        // batch norm
        Parameter<T>* rvar = nullptr;         // batch norm
        std::vector<double> saved_mean;       // batch norm
        std::vector<double> saved_invstd;     // batch norm
        int window = 0;                       // ncc
        bool global_cc = false;               // ncc
        std::shared_ptr<NccCtx> ncc;          // ncc
    };

    std::vector<Node> nodes;
    bool check_finite = true;

    Node& at(Id id) {
        if (id < 0 || std::size_t(id) >= nodes.size())
            throw config_error("graph: invalid node id");
        return nodes[std::size_t(id)];
    }

    Id push(Node&& n) {
        if (check_finite && !all_finite(n.out))
            throw numeric_error("graph: non-finite value in node " +
                                std::to_string(nodes.size()) + " output");
        nodes.push_back(std::move(n));
        return Id(nodes.size() - 1);
    }

    bool any_grad(const std::vector<Id>& ids) {
        for (Id i : ids)
            if (at(i).needs_grad) return true;
        return false;
    }
};

template <typename T> Graph<T>::Graph() : state_(std::make_unique<State>()) {}
template <typename T> Graph<T>::~Graph() = default;
template <typename T> Graph<T>::Graph(Graph&&) noexcept = default;
template <typename T> Graph<T>& Graph<T>::operator=(Graph&&) noexcept = default;

template <typename T>
void Graph<T>::set_check_finite(bool on) { state_->check_finite = on; }

template <typename T>
std::size_t Graph<T>::node_count() const { return state_->nodes.size(); }

template <typename T>
const Tensor5<T>& Graph<T>::val(Id id) const { return state_->at(id).out; }

template <typename T>
const Tensor5<T>& Graph<T>::grad(Id id) const {
    auto& n = state_->at(id);
    if (n.grad.size() != n.out.size())
        throw config_error("graph: gradient not computed for node " + std::to_string(id));
    return n.grad;
}

template <typename T>
T Graph<T>::scalar_val(Id id) const {
    const auto& t = state_->at(id).out;
    if (t.size() != 1) throw config_error("graph: node is not scalar");
    return t.data[0];
}

// ---------------------------------------------------------------------------
// leaves
// ---------------------------------------------------------------------------

template <typename T>
typename Graph<T>::Id Graph<T>::input(Tensor5<T> v) {
    typename State::Node n;
    n.op = State::Op::leaf;
    n.out = std::move(v);
    n.needs_grad = false;
    return state_->push(std::move(n));
}

template <typename T>
typename Graph<T>::Id Graph<T>::variable(Tensor5<T> v) {
    typename State::Node n;
    n.op = State::Op::leaf;
    n.out = std::move(v);
    n.needs_grad = true;
    return state_->push(std::move(n));
}

template <typename T>
typename Graph<T>::Id Graph<T>::param(Parameter<T>& p) {
    typename State::Node n;
    n.op = State::Op::leaf;
    n.out = p.value;
    n.par = &p;
    n.needs_grad = p.trainable;
    return state_->push(std::move(n));
}

// ---------------------------------------------------------------------------
// forward ops
// ---------------------------------------------------------------------------

template <typename T>
typename Graph<T>::Id Graph<T>::conv3d(Id x, Id w, Id b, int stride, Pad pad) {
    auto& xn = state_->at(x);
    auto& wn = state_->at(w);
    auto& bn = state_->at(b);
    const Shape5 xs = xn.out.shape, ws = wn.out.shape;
    if (ws.d != ws.h || ws.d != ws.w) throw config_error("conv3d: kernel must be cubic");
    const int k = ws.d;
    if (xs.c != ws.c) throw config_error("conv3d: channel mismatch (" + xs.str() + " vs " + ws.str() + ")");
    if (bn.out.shape.c != ws.n || bn.out.size() != std::size_t(ws.n))
        throw config_error("conv3d: bias must be (1, Cout, 1, 1, 1)");
    if (stride < 1) throw config_error("conv3d: stride must be >= 1");
    if (pad == Pad::same && k % 2 == 0) throw config_error("conv3d: same padding needs odd kernel");

    const ConvGeom g = conv_geometry(xs, k, stride, pad);
    typename State::Node n;
    n.op = State::Op::conv3d;
    n.in = {x, w, b};
    n.stride = stride;
    n.pad = pad;
    n.out = Tensor5<T>({xs.n, ws.n, g.Do, g.Ho, g.Wo});
    if (stride == 1)
        conv3d_forward_s1(xn.out, wn.out, bn.out, g, n.out);
    else
        conv3d_forward_generic(xn.out, wn.out, bn.out, stride, g, n.out);
    n.needs_grad = state_->any_grad(n.in);
    return state_->push(std::move(n));
}

template <typename T>
typename Graph<T>::Id Graph<T>::batch_norm(Id x, Id gamma, Id beta, Parameter<T>& run_mean,
                                           Parameter<T>& run_var, RunMode mode, T momentum, T eps) {
    auto& xn = state_->at(x);
    const Shape5 xs = xn.out.shape;
    const int C = xs.c;
    auto check_affine = [&](const Tensor5<T>& t, const char* what) {
        if (t.shape.c != C || t.size() != std::size_t(C))
            throw config_error(std::string("batch_norm: ") + what + " must be (1, C, 1, 1, 1)");
    };
    check_affine(state_->at(gamma).out, "gamma");
    check_affine(state_->at(beta).out, "beta");
    check_affine(run_mean.value, "running mean");
    check_affine(run_var.value, "running var");

    typename State::Node n;
    n.op = State::Op::batch_norm;
    n.in = {x, gamma, beta};
    n.mode = mode;
    n.momentum = momentum;
    n.eps = eps;
    n.rmean = &run_mean;
    n.rvar = &run_var;
    n.out = Tensor5<T>(xs);
    n.saved_mean.resize(std::size_t(C));
    n.saved_invstd.resize(std::size_t(C));

    const auto& xv = xn.out;
    const auto& gv = state_->at(gamma).out;
    const auto& bv = state_->at(beta).out;
    const std::size_t sp = xs.spatial();
    const double m = double(xs.n) * double(sp);

    auto& node = n; // captured by reference below
    parallel_for(C, [&](std::int64_t c64) {
        const int c = int(c64);
        double mean, invstd;
        if (mode == RunMode::train) {
            double acc = 0.0;
            for (int b0 = 0; b0 < xs.n; ++b0) {
                const T* p = xv.channel(b0, c);
                for (std::size_t i = 0; i < sp; ++i) acc += double(p[i]);
            }
            mean = acc / m;
            double vacc = 0.0;
            for (int b0 = 0; b0 < xs.n; ++b0) {
                const T* p = xv.channel(b0, c);
                for (std::size_t i = 0; i < sp; ++i) {
                    const double d = double(p[i]) - mean;
                    vacc += d * d;
                }
            }
            const double var = vacc / m;
            invstd = 1.0 / std::sqrt(var + double(eps));
            run_mean.value.data[std::size_t(c)] =
                momentum * run_mean.value.data[std::size_t(c)] + (T(1) - momentum) * T(mean);
            run_var.value.data[std::size_t(c)] =
                momentum * run_var.value.data[std::size_t(c)] + (T(1) - momentum) * T(var);
        } else {
            mean = double(run_mean.value.data[std::size_t(c)]);
            invstd = 1.0 / std::sqrt(double(run_var.value.data[std::size_t(c)]) + double(eps));
        }
        node.saved_mean[std::size_t(c)] = mean;
        node.saved_invstd[std::size_t(c)] = invstd;
        const T gm = gv.data[std::size_t(c)], bt = bv.data[std::size_t(c)];
        for (int b0 = 0; b0 < xs.n; ++b0) {
            const T* p = xv.channel(b0, c);
            T* q = node.out.channel(b0, c);
            for (std::size_t i = 0; i < sp; ++i)
                q[i] = gm * T((double(p[i]) - mean) * invstd) + bt;
        }
    });

    n.needs_grad = state_->any_grad(n.in);
    return state_->push(std::move(n));
}

template <typename T>
typename Graph<T>::Id Graph<T>::leaky_relu(Id x, T slope) {
    auto& xn = state_->at(x);
    typename State::Node n;
    n.op = State::Op::leaky_relu;
    n.in = {x};
    n.alpha = slope;
    n.out = Tensor5<T>(xn.out.shape);
    const std::size_t total = xn.out.size();
    const T* src = xn.out.data.data();
    T* dst = n.out.data.data();
    for (std::size_t i = 0; i < total; ++i) {
        const T v = src[i];
        dst[i] = v >= T(0) ? v : slope * v;
    }
    n.needs_grad = xn.needs_grad;
    return state_->push(std::move(n));
}

template <typename T>
typename Graph<T>::Id Graph<T>::concat_channels(const std::vector<Id>& xs) {
    if (xs.empty()) throw config_error("concat_channels: empty input list");
    const Shape5 s0 = state_->at(xs[0]).out.shape;
    int ctotal = 0;
    for (Id id : xs) {
        const Shape5 s = state_->at(id).out.shape;
        if (s.n != s0.n || s.d != s0.d || s.h != s0.h || s.w != s0.w)
            throw config_error("concat_channels: spatial/batch mismatch (" + s.str() +
                               " vs " + s0.str() + ")");
        ctotal += s.c;
    }
    typename State::Node n;
    n.op = State::Op::concat;
    n.in = xs;
    n.out = Tensor5<T>({s0.n, ctotal, s0.d, s0.h, s0.w});
    const std::size_t sp = s0.spatial();
    for (int b0 = 0; b0 < s0.n; ++b0) {
        int coff = 0;
        for (Id id : xs) {
            const auto& xv = state_->at(id).out;
            std::memcpy(n.out.channel(b0, coff), xv.channel(b0, 0),
                        sizeof(T) * sp * std::size_t(xv.shape.c));
            coff += xv.shape.c;
        }
    }
    n.needs_grad = state_->any_grad(n.in);
    return state_->push(std::move(n));
}

template <typename T>
typename Graph<T>::Id Graph<T>::avg_pool2(Id x) {
    auto& xn = state_->at(x);
    const Shape5 xs = xn.out.shape;
    const int Do = xs.d / 2, Ho = xs.h / 2, Wo = xs.w / 2;
    if (Do == 0 || Ho == 0 || Wo == 0) throw config_error("avg_pool2: extent below 2");
    typename State::Node n;
    n.op = State::Op::avg_pool2;
    n.in = {x};
    n.out = Tensor5<T>({xs.n, xs.c, Do, Ho, Wo});
    const auto& xv = xn.out;
    parallel_for(std::int64_t(xs.n) * xs.c, [&](std::int64_t job) {
        const int b0 = int(job / xs.c), c = int(job % xs.c);
        for (int od = 0; od < Do; ++od)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    T acc = 0;
                    for (int dz = 0; dz < 2; ++dz)
                        for (int dy = 0; dy < 2; ++dy)
                            for (int dx = 0; dx < 2; ++dx)
                                acc += xv.at(b0, c, 2 * od + dz, 2 * oh + dy, 2 * ow + dx);
                    n.out.at(b0, c, od, oh, ow) = acc * T(0.125);
                }
    });
    n.needs_grad = xn.needs_grad;
    return state_->push(std::move(n));
}

namespace {
// align-corners source index pairs for a doubled axis
struct UpAxis {
    std::vector<int> i0, i1;
    std::vector<double> f;
};
UpAxis upsample_axis(int in, int out) {
    UpAxis a;
    a.i0.resize(std::size_t(out));
    a.i1.resize(std::size_t(out));
    a.f.resize(std::size_t(out));
    const double scale = out > 1 ? double(in - 1) / double(out - 1) : 0.0;
    for (int o = 0; o < out; ++o) {
        const double src = scale * o;
        int i0 = int(src);
        if (i0 > in - 1) i0 = in - 1;
        const int i1 = std::min(i0 + 1, in - 1);
        a.i0[std::size_t(o)] = i0;
        a.i1[std::size_t(o)] = i1;
        a.f[std::size_t(o)] = src - double(i0);
    }
    return a;
}
} // namespace

template <typename T>
typename Graph<T>::Id Graph<T>::upsample_trilinear2(Id x) {
    auto& xn = state_->at(x);
    const Shape5 xs = xn.out.shape;
    const int Do = xs.d * 2, Ho = xs.h * 2, Wo = xs.w * 2;
    typename State::Node n;
    n.op = State::Op::upsample2;
    n.in = {x};
    n.out = Tensor5<T>({xs.n, xs.c, Do, Ho, Wo});
    const UpAxis az = upsample_axis(xs.d, Do), ay = upsample_axis(xs.h, Ho),
                 ax = upsample_axis(xs.w, Wo);
    const auto& xv = xn.out;
    parallel_for(std::int64_t(xs.n) * xs.c, [&](std::int64_t job) {
        const int b0 = int(job / xs.c), c = int(job % xs.c);
        for (int od = 0; od < Do; ++od) {
            const int z0 = az.i0[od], z1 = az.i1[od];
            const double fz = az.f[od];
            for (int oh = 0; oh < Ho; ++oh) {
                const int y0 = ay.i0[oh], y1 = ay.i1[oh];
                const double fy = ay.f[oh];
                T* orow = n.out.ptr(b0, c, od, oh, 0);
                const T* r00 = xv.ptr(b0, c, z0, y0, 0);
                const T* r01 = xv.ptr(b0, c, z0, y1, 0);
                const T* r10 = xv.ptr(b0, c, z1, y0, 0);
                const T* r11 = xv.ptr(b0, c, z1, y1, 0);
                for (int ow = 0; ow < Wo; ++ow) {
                    const int x0 = ax.i0[ow], x1 = ax.i1[ow];
                    const double fx = ax.f[ow];
                    const double c00 = double(r00[x0]) + (double(r00[x1]) - double(r00[x0])) * fx;
                    const double c01 = double(r01[x0]) + (double(r01[x1]) - double(r01[x0])) * fx;
                    const double c10 = double(r10[x0]) + (double(r10[x1]) - double(r10[x0])) * fx;
                    const double c11 = double(r11[x0]) + (double(r11[x1]) - double(r11[x0])) * fx;
                    const double c0 = c00 + (c01 - c00) * fy;
                    const double c1 = c10 + (c11 - c10) * fy;
                    orow[ow] = T(c0 + (c1 - c0) * fz);
                }
            }
        }
    });
    n.needs_grad = xn.needs_grad;
    return state_->push(std::move(n));
}

template <typename T>
typename Graph<T>::Id Graph<T>::scale(Id x, T alpha) {
    auto& xn = state_->at(x);
    typename State::Node n;
    n.op = State::Op::scale;
    n.in = {x};
    n.alpha = alpha;
    n.out = Tensor5<T>(xn.out.shape);
    for (std::size_t i = 0; i < n.out.size(); ++i) n.out.data[i] = alpha * xn.out.data[i];
    n.needs_grad = xn.needs_grad;
    return state_->push(std::move(n));
}

template <typename T>
typename Graph<T>::Id Graph<T>::add(Id a, Id b) {
    auto& an = state_->at(a);
    auto& bn = state_->at(b);
    if (!(an.out.shape == bn.out.shape)) throw config_error("add: shape mismatch");
    typename State::Node n;
    n.op = State::Op::add;
    n.in = {a, b};
    n.out = Tensor5<T>(an.out.shape);
    for (std::size_t i = 0; i < n.out.size(); ++i)
        n.out.data[i] = an.out.data[i] + bn.out.data[i];
    n.needs_grad = state_->any_grad(n.in);
    return state_->push(std::move(n));
}

template <typename T>
typename Graph<T>::Id Graph<T>::warp_trilinear(Id src, Id flow) {
    auto& sn = state_->at(src);
    auto& fn = state_->at(flow);
    const Shape5 ss = sn.out.shape, fs = fn.out.shape;
    if (fs.c != 3) throw config_error("warp_trilinear: flow must have 3 channels");
    if (ss.n != fs.n || ss.d != fs.d || ss.h != fs.h || ss.w != fs.w)
        throw config_error("warp_trilinear: spatial mismatch (" + ss.str() + " vs " + fs.str() + ")");

    typename State::Node n;
    n.op = State::Op::warp;
    n.in = {src, flow};
    n.out = Tensor5<T>(ss);
    const auto& sv = sn.out;
    const auto& fv = fn.out;
    const int D = ss.d, H = ss.h, W = ss.w;

    parallel_for(std::int64_t(ss.n) * ss.c, [&](std::int64_t job) {
        const int b0 = int(job / ss.c), c = int(job % ss.c);
        for (int z = 0; z < D; ++z)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    T xc = T(x) + fv.at(b0, 0, z, y, x);
                    T yc = T(y) + fv.at(b0, 1, z, y, x);
                    T zc = T(z) + fv.at(b0, 2, z, y, x);
                    xc = std::clamp(xc, T(0), T(W - 1));
                    yc = std::clamp(yc, T(0), T(H - 1));
                    zc = std::clamp(zc, T(0), T(D - 1));
                    const int x0 = int(xc), y0 = int(yc), z0 = int(zc);
                    const int x1 = std::min(x0 + 1, W - 1);
                    const int y1 = std::min(y0 + 1, H - 1);
                    const int z1 = std::min(z0 + 1, D - 1);
                    const T fx = xc - T(x0), fy = yc - T(y0), fz = zc - T(z0);
                    const T c000 = sv.at(b0, c, z0, y0, x0), c100 = sv.at(b0, c, z0, y0, x1);
                    const T c010 = sv.at(b0, c, z0, y1, x0), c110 = sv.at(b0, c, z0, y1, x1);
                    const T c001 = sv.at(b0, c, z1, y0, x0), c101 = sv.at(b0, c, z1, y0, x1);
                    const T c011 = sv.at(b0, c, z1, y1, x0), c111 = sv.at(b0, c, z1, y1, x1);
                    const T c00 = c000 + (c100 - c000) * fx;
                    const T c10 = c010 + (c110 - c010) * fx;
                    const T c01 = c001 + (c101 - c001) * fx;
                    const T c11 = c011 + (c111 - c011) * fx;
                    const T c0 = c00 + (c10 - c00) * fy;
                    const T c1 = c01 + (c11 - c01) * fy;
                    n.out.at(b0, c, z, y, x) = c0 + (c1 - c0) * fz;
                }
    });
    n.needs_grad = state_->any_grad(n.in);
    return state_->push(std::move(n));
}

template <typename T>
typename Graph<T>::Id Graph<T>::ncc_loss(Id a, Id b, int window, T eps, bool global_window) {
    auto& an = state_->at(a);
    auto& bn = state_->at(b);
    const Shape5 as = an.out.shape;
    if (!(as == bn.out.shape)) throw config_error("ncc_loss: shape mismatch");
    if (as.c != 1) throw config_error("ncc_loss: single-channel inputs required");
    if (!global_window && (window < 3 || window % 2 == 0))
        throw config_error("ncc_loss: window must be odd and >= 3");

    typename State::Node n;
    n.op = State::Op::ncc;
    n.in = {a, b};
    n.window = window;
    n.eps = eps;
    n.global_cc = global_window;
    n.out = Tensor5<T>({1, 1, 1, 1, 1});
    n.ncc = std::make_shared<NccCtx>();

    const int N = as.n, D = as.d, H = as.h, W = as.w;
    const std::size_t V = as.spatial();
    const auto& av = an.out;
    const auto& bv = bn.out;
    double loss_acc = 0.0;

    if (global_window) {
        auto& ctx = *n.ncc;
        ctx.g_abar.resize(N);
        ctx.g_bbar.resize(N);
        ctx.g_cross.resize(N);
        ctx.g_vara.resize(N);
        ctx.g_varb.resize(N);
        for (int s = 0; s < N; ++s) {
            const T* pa = av.channel(s, 0);
            const T* pb = bv.channel(s, 0);
            double sa = 0, sb = 0;
            for (std::size_t i = 0; i < V; ++i) { sa += double(pa[i]); sb += double(pb[i]); }
            const double abar = sa / double(V), bbar = sb / double(V);
            double cross = 0, vara = 0, varb = 0;
            for (std::size_t i = 0; i < V; ++i) {
                const double da = double(pa[i]) - abar, db = double(pb[i]) - bbar;
                cross += da * db;
                vara += da * da;
                varb += db * db;
            }
            ctx.g_abar[s] = abar; ctx.g_bbar[s] = bbar;
            ctx.g_cross[s] = cross; ctx.g_vara[s] = vara; ctx.g_varb[s] = varb;
            double cc = cross * cross / (vara * varb + double(eps));
            if (cc > 1.0) cc = 1.0;
            loss_acc += cc;
        }
        n.out.data[0] = T(-loss_acc / double(N));
    } else {
        auto& ctx = *n.ncc;
        ctx.sa.resize(N); ctx.sb.resize(N);
        ctx.cross.resize(N); ctx.vara.resize(N); ctx.varb.resize(N);
        const double nwin = double(window) * window * window;
        std::vector<double> bufa(V), bufb(V), bufaa(V), bufbb(V), bufab(V), tmp;
        for (int s = 0; s < N; ++s) {
            const T* pa = av.channel(s, 0);
            const T* pb = bv.channel(s, 0);
            std::vector<double> rawa(V), rawb(V), rawaa(V), rawbb(V), rawab(V);
            for (std::size_t i = 0; i < V; ++i) {
                const double x = double(pa[i]), y = double(pb[i]);
                rawa[i] = x; rawb[i] = y;
                rawaa[i] = x * x; rawbb[i] = y * y; rawab[i] = x * y;
            }
            box_sum_3d(rawa, bufa, tmp, D, H, W, window);
            box_sum_3d(rawb, bufb, tmp, D, H, W, window);
            box_sum_3d(rawaa, bufaa, tmp, D, H, W, window);
            box_sum_3d(rawbb, bufbb, tmp, D, H, W, window);
            box_sum_3d(rawab, bufab, tmp, D, H, W, window);

            auto& cr = ctx.cross[s]; auto& va = ctx.vara[s]; auto& vb = ctx.varb[s];
            cr.resize(V); va.resize(V); vb.resize(V);
            ctx.sa[s] = bufa; ctx.sb[s] = bufb;
            double acc = 0.0;
            for (std::size_t i = 0; i < V; ++i) {
                const double cross = bufab[i] - bufa[i] * bufb[i] / nwin;
                const double vara = bufaa[i] - bufa[i] * bufa[i] / nwin;
                const double varb = bufbb[i] - bufb[i] * bufb[i] / nwin;
                cr[i] = cross; va[i] = vara; vb[i] = varb;
                double cc = cross * cross / (vara * varb + double(eps));
                if (cc > 1.0) cc = 1.0;
                acc += cc;
            }
            loss_acc += acc;
        }
        n.out.data[0] = T(-loss_acc / (double(N) * double(V)));
    }
    n.needs_grad = state_->any_grad(n.in);
    return state_->push(std::move(n));
}

template <typename T>
typename Graph<T>::Id Graph<T>::diffusion_reg(Id flow) {
    auto& fn = state_->at(flow);
    const Shape5 fs = fn.out.shape;
    typename State::Node n;
    n.op = State::Op::diffusion;
    n.in = {flow};
    n.out = Tensor5<T>({1, 1, 1, 1, 1});
    const auto& fv = fn.out;
    const int D = fs.d, H = fs.h, W = fs.w;
    double acc = 0.0;
    for (int s = 0; s < fs.n; ++s)
        for (int c = 0; c < fs.c; ++c) {
            const T* p = fv.channel(s, c);
            double chan = 0.0;
            for (int z = 0; z < D; ++z)
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x) {
                        const std::size_t i = (std::size_t(z) * H + y) * W + x;
                        if (x + 1 < W) { const double d = double(p[i + 1]) - double(p[i]); chan += d * d; }
                        if (y + 1 < H) { const double d = double(p[i + W]) - double(p[i]); chan += d * d; }
                        if (z + 1 < D) { const double d = double(p[i + std::size_t(H) * W]) - double(p[i]); chan += d * d; }
                    }
            acc += chan;
        }
    const double denom = double(fs.n) * fs.c * double(fs.spatial());
    n.out.data[0] = T(acc / denom);
    n.needs_grad = fn.needs_grad;
    return state_->push(std::move(n));
}

template <typename T>
typename Graph<T>::Id Graph<T>::sum(Id x) {
    auto& xn = state_->at(x);
    typename State::Node n;
    n.op = State::Op::sum_all;
    n.in = {x};
    n.out = Tensor5<T>({1, 1, 1, 1, 1});
    double acc = 0.0;
    for (const T v : xn.out.data) acc += double(v);
    n.out.data[0] = T(acc);
    n.needs_grad = xn.needs_grad;
    return state_->push(std::move(n));
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename T>
void Graph<T>::backward(Id loss) {
    auto& nodes = state_->nodes;
    auto& ln = state_->at(loss);
    if (ln.out.size() != 1) throw config_error("backward: loss node must be scalar");

    for (auto& n : nodes)
        if (n.needs_grad) n.grad = Tensor5<T>(n.out.shape);
    if (!ln.needs_grad) return; // nothing trainable feeds the loss
    ln.grad.data[0] = T(1);

    for (std::int64_t idx = loss; idx >= 0; --idx) {
        auto& n = nodes[std::size_t(idx)];
        if (!n.needs_grad || n.op == State::Op::leaf) continue;

        switch (n.op) {
        case State::Op::conv3d: {
            auto& xn = nodes[std::size_t(n.in[0])];
            auto& wn = nodes[std::size_t(n.in[1])];
            auto& bn = nodes[std::size_t(n.in[2])];
            const int k = wn.out.shape.d;
            const ConvGeom g = conv_geometry(xn.out.shape, k, n.stride, n.pad);
            if (xn.needs_grad) {
                if (n.stride == 1)
                    conv3d_backward_data_s1(wn.out, n.grad, g, xn.grad);
                else
                    conv3d_backward_data_generic(wn.out, n.grad, n.stride, g, xn.grad);
            }
            if (wn.needs_grad || bn.needs_grad) {
                Tensor5<T> gw(wn.out.shape), gb(bn.out.shape);
                if (n.stride == 1)
                    conv3d_backward_filter_s1_dispatch(xn.out, n.grad, g, gw, gb);
                else
                    conv3d_backward_filter_generic(xn.out, n.grad, n.stride, g, gw, gb);
                if (wn.needs_grad)
                    for (std::size_t i = 0; i < gw.size(); ++i) wn.grad.data[i] += gw.data[i];
                if (bn.needs_grad)
                    for (std::size_t i = 0; i < gb.size(); ++i) bn.grad.data[i] += gb.data[i];
            }
            break;
        }
        case State::Op::batch_norm: {
            auto& xn = nodes[std::size_t(n.in[0])];
            auto& gn = nodes[std::size_t(n.in[1])];
            auto& btn = nodes[std::size_t(n.in[2])];
            const Shape5 xs = xn.out.shape;
            const std::size_t sp = xs.spatial();
            const double m = double(xs.n) * double(sp);
            parallel_for(xs.c, [&](std::int64_t c64) {
                const int c = int(c64);
                const double mean = n.saved_mean[std::size_t(c)];
                const double invstd = n.saved_invstd[std::size_t(c)];
                const double gm = double(gn.out.data[std::size_t(c)]);
                double dgamma = 0.0, dbeta = 0.0;
                for (int s = 0; s < xs.n; ++s) {
                    const T* px = xn.out.channel(s, c);
                    const T* pg = n.grad.channel(s, c);
                    for (std::size_t i = 0; i < sp; ++i) {
                        const double xhat = (double(px[i]) - mean) * invstd;
                        dgamma += double(pg[i]) * xhat;
                        dbeta += double(pg[i]);
                    }
                }
                if (gn.needs_grad) gn.grad.data[std::size_t(c)] += T(dgamma);
                if (btn.needs_grad) btn.grad.data[std::size_t(c)] += T(dbeta);
                if (!xn.needs_grad) return;
                if (n.mode == RunMode::infer) {
                    const double scale = gm * invstd;
                    for (int s = 0; s < xs.n; ++s) {
                        const T* pg = n.grad.channel(s, c);
                        T* pd = xn.grad.channel(s, c);
                        for (std::size_t i = 0; i < sp; ++i) pd[i] += T(double(pg[i]) * scale);
                    }
                } else {
                    // dL/dx via batch statistics
                    double sum_dxhat = 0.0, sum_dxhat_xc = 0.0;
                    for (int s = 0; s < xs.n; ++s) {
                        const T* px = xn.out.channel(s, c);
                        const T* pg = n.grad.channel(s, c);
                        for (std::size_t i = 0; i < sp; ++i) {
                            const double dxhat = double(pg[i]) * gm;
                            sum_dxhat += dxhat;
                            sum_dxhat_xc += dxhat * (double(px[i]) - mean);
                        }
                    }
                    const double dvar = sum_dxhat_xc * -0.5 * invstd * invstd * invstd;
                    const double dmean = -invstd * sum_dxhat;
                    for (int s = 0; s < xs.n; ++s) {
                        const T* px = xn.out.channel(s, c);
                        const T* pg = n.grad.channel(s, c);
                        T* pd = xn.grad.channel(s, c);
                        for (std::size_t i = 0; i < sp; ++i) {
                            const double dxhat = double(pg[i]) * gm;
                            const double xc = double(px[i]) - mean;
                            pd[i] += T(dxhat * invstd + dvar * 2.0 * xc / m + dmean / m);
                        }
                    }
                }
            });
            break;
        }
        case State::Op::leaky_relu: {
            auto& xn = nodes[std::size_t(n.in[0])];
            if (!xn.needs_grad) break;
            const std::size_t total = n.out.size();
            for (std::size_t i = 0; i < total; ++i) {
                const T v = xn.out.data[i];
                xn.grad.data[i] += n.grad.data[i] * (v >= T(0) ? T(1) : n.alpha);
            }
            break;
        }
        case State::Op::concat: {
            const Shape5 s0 = n.out.shape;
            const std::size_t sp = s0.spatial();
            for (int b0 = 0; b0 < s0.n; ++b0) {
                int coff = 0;
                for (Id id : n.in) {
                    auto& xn = nodes[std::size_t(id)];
                    const int ci = xn.out.shape.c;
                    if (xn.needs_grad) {
                        const T* src = n.grad.channel(b0, coff);
                        T* dst = xn.grad.channel(b0, 0);
                        for (std::size_t i = 0; i < sp * std::size_t(ci); ++i) dst[i] += src[i];
                    }
                    coff += ci;
                }
            }
            break;
        }
        case State::Op::avg_pool2: {
            auto& xn = nodes[std::size_t(n.in[0])];
            if (!xn.needs_grad) break;
            const Shape5 os = n.out.shape;
            parallel_for(std::int64_t(os.n) * os.c, [&](std::int64_t job) {
                const int b0 = int(job / os.c), c = int(job % os.c);
                for (int od = 0; od < os.d; ++od)
                    for (int oh = 0; oh < os.h; ++oh)
                        for (int ow = 0; ow < os.w; ++ow) {
                            const T share = n.grad.at(b0, c, od, oh, ow) * T(0.125);
                            for (int dz = 0; dz < 2; ++dz)
                                for (int dy = 0; dy < 2; ++dy)
                                    for (int dx = 0; dx < 2; ++dx)
                                        xn.grad.at(b0, c, 2 * od + dz, 2 * oh + dy, 2 * ow + dx) += share;
                        }
            });
            break;
        }
        case State::Op::upsample2: {
            auto& xn = nodes[std::size_t(n.in[0])];
            if (!xn.needs_grad) break;
            const Shape5 xs = xn.out.shape, os = n.out.shape;
            const UpAxis az = upsample_axis(xs.d, os.d), ay = upsample_axis(xs.h, os.h),
                         ax = upsample_axis(xs.w, os.w);
            parallel_for(std::int64_t(xs.n) * xs.c, [&](std::int64_t job) {
                const int b0 = int(job / xs.c), c = int(job % xs.c);
                for (int od = 0; od < os.d; ++od) {
                    const int z0 = az.i0[od], z1 = az.i1[od];
                    const double fz = az.f[od];
                    for (int oh = 0; oh < os.h; ++oh) {
                        const int y0 = ay.i0[oh], y1 = ay.i1[oh];
                        const double fy = ay.f[oh];
                        for (int ow = 0; ow < os.w; ++ow) {
                            const int x0 = ax.i0[ow], x1 = ax.i1[ow];
                            const double fx = ax.f[ow];
                            const double go = double(n.grad.at(b0, c, od, oh, ow));
                            const double wz[2] = {1.0 - fz, fz};
                            const double wy[2] = {1.0 - fy, fy};
                            const double wx[2] = {1.0 - fx, fx};
                            const int zi[2] = {z0, z1}, yi[2] = {y0, y1}, xi[2] = {x0, x1};
                            for (int a0 = 0; a0 < 2; ++a0)
                                for (int a1 = 0; a1 < 2; ++a1)
                                    for (int a2 = 0; a2 < 2; ++a2) {
                                        const double wgt = wz[a0] * wy[a1] * wx[a2];
                                        if (wgt != 0.0)
                                            xn.grad.at(b0, c, zi[a0], yi[a1], xi[a2]) +=
                                                T(go * wgt);
                                    }
                        }
                    }
                }
            });
            break;
        }
        case State::Op::scale: {
            auto& xn = nodes[std::size_t(n.in[0])];
            if (!xn.needs_grad) break;
            for (std::size_t i = 0; i < n.out.size(); ++i)
                xn.grad.data[i] += n.alpha * n.grad.data[i];
            break;
        }
        case State::Op::add: {
            for (Id id : n.in) {
                auto& xn = nodes[std::size_t(id)];
                if (!xn.needs_grad) continue;
                for (std::size_t i = 0; i < n.out.size(); ++i)
                    xn.grad.data[i] += n.grad.data[i];
            }
            break;
        }
        case State::Op::warp: {
            auto& sn = nodes[std::size_t(n.in[0])];
            auto& fn = nodes[std::size_t(n.in[1])];
            const Shape5 ss = sn.out.shape;
            const int D = ss.d, H = ss.h, W = ss.w;
            const auto& sv = sn.out;
            const auto& fv = fn.out;
            // one sample per job: the source scatter stays within a sample
            parallel_for(ss.n, [&](std::int64_t b64) {
                const int b0 = int(b64);
                for (int z = 0; z < D; ++z)
                    for (int y = 0; y < H; ++y)
                        for (int x = 0; x < W; ++x) {
                            const T vx = T(x) + fv.at(b0, 0, z, y, x);
                            const T vy = T(y) + fv.at(b0, 1, z, y, x);
                            const T vz = T(z) + fv.at(b0, 2, z, y, x);
                            const bool inx = vx > T(0) && vx < T(W - 1);
                            const bool iny = vy > T(0) && vy < T(H - 1);
                            const bool inz = vz > T(0) && vz < T(D - 1);
                            const T xc = std::clamp(vx, T(0), T(W - 1));
                            const T yc = std::clamp(vy, T(0), T(H - 1));
                            const T zc = std::clamp(vz, T(0), T(D - 1));
                            const int x0 = int(xc), y0 = int(yc), z0 = int(zc);
                            const int x1 = std::min(x0 + 1, W - 1);
                            const int y1 = std::min(y0 + 1, H - 1);
                            const int z1 = std::min(z0 + 1, D - 1);
                            const T fx = xc - T(x0), fy = yc - T(y0), fz = zc - T(z0);
                            const T wx[2] = {T(1) - fx, fx};
                            const T wy[2] = {T(1) - fy, fy};
                            const T wz[2] = {T(1) - fz, fz};
                            const int xi[2] = {x0, x1}, yi[2] = {y0, y1}, zi[2] = {z0, z1};
                            T gx = 0, gy = 0, gz = 0;
                            for (int c = 0; c < ss.c; ++c) {
                                const T go = n.grad.at(b0, c, z, y, x);
                                if (sn.needs_grad) {
                                    for (int a0 = 0; a0 < 2; ++a0)
                                        for (int a1 = 0; a1 < 2; ++a1)
                                            for (int a2 = 0; a2 < 2; ++a2)
                                                sn.grad.at(b0, c, zi[a0], yi[a1], xi[a2]) +=
                                                    go * wz[a0] * wy[a1] * wx[a2];
                                }
                                if (fn.needs_grad) {
                                    // d(out)/d(coordinate) per axis
                                    for (int a0 = 0; a0 < 2; ++a0)
                                        for (int a1 = 0; a1 < 2; ++a1) {
                                            const T dx_pair = sv.at(b0, c, zi[a0], yi[a1], x1) -
                                                              sv.at(b0, c, zi[a0], yi[a1], x0);
                                            gx += go * wz[a0] * wy[a1] * dx_pair;
                                            const T dy_pair = sv.at(b0, c, zi[a0], y1, xi[a1]) -
                                                              sv.at(b0, c, zi[a0], y0, xi[a1]);
                                            gy += go * wz[a0] * wx[a1] * dy_pair;
                                            const T dz_pair = sv.at(b0, c, z1, yi[a0], xi[a1]) -
                                                              sv.at(b0, c, z0, yi[a0], xi[a1]);
                                            gz += go * wy[a0] * wx[a1] * dz_pair;
                                        }
                                }
                            }
                            if (fn.needs_grad) {
                                if (inx) fn.grad.at(b0, 0, z, y, x) += gx;
                                if (iny) fn.grad.at(b0, 1, z, y, x) += gy;
                                if (inz) fn.grad.at(b0, 2, z, y, x) += gz;
                            }
                        }
            });
            break;
        }
        case State::Op::ncc: {
            auto& an = nodes[std::size_t(n.in[0])];
            auto& bn = nodes[std::size_t(n.in[1])];
            const Shape5 as = an.out.shape;
            const int N = as.n, D = as.d, H = as.h, W = as.w;
            const std::size_t V = as.spatial();
            const double go = double(n.grad.data[0]);
            const auto& ctx = *n.ncc;
            const double eps = double(n.eps);

            if (n.global_cc) {
                for (int s = 0; s < N; ++s) {
                    const double cross = ctx.g_cross[s], vara = ctx.g_vara[s], varb = ctx.g_varb[s];
                    const double den = vara * varb + eps;
                    const double cc = cross * cross / den;
                    if (cc >= 1.0) continue; // clamped: flat gradient
                    const double scale = -go / double(N);
                    const double ca = 2.0 * cross / den;
                    const double ka = 2.0 * cross * cross * varb / (den * den);
                    const double kb = 2.0 * cross * cross * vara / (den * den);
                    const T* pa = an.out.channel(s, 0);
                    const T* pb = bn.out.channel(s, 0);
                    for (std::size_t i = 0; i < V; ++i) {
                        const double da = double(pa[i]) - ctx.g_abar[s];
                        const double db = double(pb[i]) - ctx.g_bbar[s];
                        if (an.needs_grad)
                            an.grad.channel(s, 0)[i] += T(scale * (ca * db - ka * da));
                        if (bn.needs_grad)
                            bn.grad.channel(s, 0)[i] += T(scale * (ca * da - kb * db));
                    }
                }
                break;
            }

            const double nwin = double(n.window) * n.window * n.window;
            const double scale = -go / (double(N) * double(V));
            std::vector<double> alpha(V), alpha_bbar(V), alpha_abar(V), beta_a(V), beta_b(V), t1, t2, tmp;
            for (int s = 0; s < N; ++s) {
                const auto& sa = ctx.sa[s];
                const auto& sb = ctx.sb[s];
                const auto& cr = ctx.cross[s];
                const auto& va = ctx.vara[s];
                const auto& vb = ctx.varb[s];
                for (std::size_t i = 0; i < V; ++i) {
                    const double den = va[i] * vb[i] + eps;
                    const double cc = cr[i] * cr[i] / den;
                    const bool live = cc < 1.0;
                    const double al = live ? 2.0 * cr[i] / den : 0.0;
                    alpha[i] = al;
                    alpha_abar[i] = al * sa[i] / nwin;
                    alpha_bbar[i] = al * sb[i] / nwin;
                    beta_a[i] = live ? 2.0 * cr[i] * cr[i] * vb[i] / (den * den) : 0.0;
                    beta_b[i] = live ? 2.0 * cr[i] * cr[i] * va[i] / (den * den) : 0.0;
                }
                const T* pa = an.out.channel(s, 0);
                const T* pb = bn.out.channel(s, 0);
                if (an.needs_grad) {
                    std::vector<double> s_alpha(V), s_alpha_bbar(V), s_beta(V), s_beta_abar(V);
                    box_sum_3d(alpha, s_alpha, tmp, D, H, W, n.window);
                    box_sum_3d(alpha_bbar, s_alpha_bbar, tmp, D, H, W, n.window);
                    box_sum_3d(beta_a, s_beta, tmp, D, H, W, n.window);
                    t1.resize(V);
                    for (std::size_t i = 0; i < V; ++i) t1[i] = beta_a[i] * sa[i] / nwin;
                    box_sum_3d(t1, s_beta_abar, tmp, D, H, W, n.window);
                    T* gp = an.grad.channel(s, 0);
                    for (std::size_t i = 0; i < V; ++i) {
                        const double term = s_alpha[i] * double(pb[i]) - s_alpha_bbar[i] -
                                            s_beta[i] * double(pa[i]) + s_beta_abar[i];
                        gp[i] += T(scale * term);
                    }
                }
                if (bn.needs_grad) {
                    std::vector<double> s_alpha(V), s_alpha_abar(V), s_beta(V), s_beta_bbar(V);
                    box_sum_3d(alpha, s_alpha, tmp, D, H, W, n.window);
                    box_sum_3d(alpha_abar, s_alpha_abar, tmp, D, H, W, n.window);
                    box_sum_3d(beta_b, s_beta, tmp, D, H, W, n.window);
                    t2.resize(V);
                    for (std::size_t i = 0; i < V; ++i) t2[i] = beta_b[i] * sb[i] / nwin;
                    box_sum_3d(t2, s_beta_bbar, tmp, D, H, W, n.window);
                    T* gp = bn.grad.channel(s, 0);
                    for (std::size_t i = 0; i < V; ++i) {
                        const double term = s_alpha[i] * double(pa[i]) - s_alpha_abar[i] -
                                            s_beta[i] * double(pb[i]) + s_beta_bbar[i];
                        gp[i] += T(scale * term);
                    }
                }
            }
            break;
        }
        case State::Op::diffusion: {
            auto& fn = nodes[std::size_t(n.in[0])];
            if (!fn.needs_grad) break;
            const Shape5 fs = fn.out.shape;
            const int D = fs.d, H = fs.h, W = fs.w;
            const double denom = double(fs.n) * fs.c * double(fs.spatial());
            const double go = double(n.grad.data[0]);
            const double k = 2.0 * go / denom;
            parallel_for(std::int64_t(fs.n) * fs.c, [&](std::int64_t job) {
                const int s = int(job / fs.c), c = int(job % fs.c);
                const T* p = fn.out.channel(s, c);
                T* gp = fn.grad.channel(s, c);
                const std::size_t plane = std::size_t(H) * W;
                for (int z = 0; z < D; ++z)
                    for (int y = 0; y < H; ++y)
                        for (int x = 0; x < W; ++x) {
                            const std::size_t i = (std::size_t(z) * H + y) * W + x;
                            double acc = 0.0;
                            if (x + 1 < W) acc -= double(p[i + 1]) - double(p[i]);
                            if (x > 0) acc += double(p[i]) - double(p[i - 1]);
                            if (y + 1 < H) acc -= double(p[i + W]) - double(p[i]);
                            if (y > 0) acc += double(p[i]) - double(p[i - W]);
                            if (z + 1 < D) acc -= double(p[i + plane]) - double(p[i]);
                            if (z > 0) acc += double(p[i]) - double(p[i - plane]);
                            gp[i] += T(k * acc);
                        }
            });
            break;
        }
        case State::Op::sum_all: {
            auto& xn = nodes[std::size_t(n.in[0])];
            if (!xn.needs_grad) break;
            const T g = n.grad.data[0];
            for (std::size_t i = 0; i < xn.grad.size(); ++i) xn.grad.data[i] += g;
            break;
        }
        case State::Op::leaf:
            break;
        }
    }

    // deposit leaf gradients into bound parameters
    for (auto& n : nodes)
        if (n.op == State::Op::leaf && n.par && n.par->trainable && n.needs_grad)
            for (std::size_t i = 0; i < n.grad.size(); ++i)
                n.par->grad.data[i] += n.grad.data[i];
}

template class Graph<float>;
template class Graph<double>;

} // namespace ddn
