#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ddn/errors.hpp"

namespace ddn {

/// N x C x D x H x W, x (W) fastest, then H, D, channel, batch.
struct Shape5 {
    int n = 1, c = 1, d = 1, h = 1, w = 1;

    std::size_t count() const {
        return std::size_t(n) * c * d * h * w;
    }
    std::size_t spatial() const { return std::size_t(d) * h * w; }
    bool operator==(const Shape5&) const = default;

    std::string str() const {
        return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(d) +
               "x" + std::to_string(h) + "x" + std::to_string(w);
    }
};

/// Dense 5D array; the currency of the differentiable engine.
/// T is float in production and double in verification mode.
template <typename T>
struct Tensor5 {
    Shape5 shape;
    std::vector<T> data;

    Tensor5() = default;
    explicit Tensor5(Shape5 s, T fill = T(0)) : shape(s), data(s.count(), fill) {}

    static Tensor5 zeros(Shape5 s) { return Tensor5(s); }

    std::size_t size() const { return data.size(); }

    std::size_t index(int n, int c, int d, int h, int w) const {
        return (((std::size_t(n) * shape.c + c) * shape.d + d) * std::size_t(shape.h) + h) *
                   shape.w + w;
    }
    T at(int n, int c, int d, int h, int w) const { return data[index(n, c, d, h, w)]; }
    T& at(int n, int c, int d, int h, int w) { return data[index(n, c, d, h, w)]; }

    const T* channel(int n, int c) const { return data.data() + index(n, c, 0, 0, 0); }
    T* channel(int n, int c) { return data.data() + index(n, c, 0, 0, 0); }

    const T* ptr(int n, int c, int d, int h, int w) const {
        return data.data() + index(n, c, d, h, w);
    }
    T* ptr(int n, int c, int d, int h, int w) { return data.data() + index(n, c, d, h, w); }

    template <typename U>
    Tensor5<U> cast() const {
        Tensor5<U> out(shape);
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
        return out;
    }
};

/// Named tensor with optional gradient storage; running statistics are
/// parameters with trainable=false.
template <typename T>
struct Parameter {
    std::string name;
    Tensor5<T> value;
    Tensor5<T> grad;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string nm, Tensor5<T> v, bool train = true)
        : name(std::move(nm)), value(std::move(v)), grad(value.shape), trainable(train) {}

    void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T(0)); }
};

} // namespace ddn
