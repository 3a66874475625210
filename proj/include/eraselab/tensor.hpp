#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace eraselab {

// Dense row-major tensor. Just a shaped buffer; the hot paths in nn.hpp work
// on raw pointers and known dims.
template <class S>
struct Tensor {
    std::vector<int> dims;
    std::vector<S> data;

    Tensor() = default;
    explicit Tensor(std::initializer_list<int> d) : dims(d), data(count(dims), S(0)) {}
    explicit Tensor(std::vector<int> d) : dims(std::move(d)), data(count(dims), S(0)) {}

    static std::size_t count(const std::vector<int>& d) {
        std::size_t n = 1;
        for (int x : d) {
            if (x < 0)
                throw std::invalid_argument("tensor: negative dim");
            n *= static_cast<std::size_t>(x);
        }
        return n;
    }

    std::size_t size() const { return data.size(); }
    int dim(int i) const { return dims.at(static_cast<std::size_t>(i)); }
    S* ptr() { return data.data(); }
    const S* ptr() const { return data.data(); }
    S& operator[](std::size_t i) { return data[i]; }
    const S& operator[](std::size_t i) const { return data[i]; }

    // CHW addressing for image-shaped tensors
    S& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * dims[1] + y) * dims[2] + x]; }
    const S& at(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * dims[1] + y) * dims[2] + x];
    }

    void fill(S v) { std::fill(data.begin(), data.end(), v); }
    void zero() { fill(S(0)); }

    bool same_shape(const Tensor& o) const { return dims == o.dims; }

    std::span<S> span() { return {data.data(), data.size()}; }
    std::span<const S> span() const { return {data.data(), data.size()}; }
};

template <class S>
bool all_finite(std::span<const S> v) {
    for (S x : v)
        if (!std::isfinite(static_cast<double>(x)))
            return false;
    return true;
}

template <class S>
double sum_squared_diff(std::span<const S> a, std::span<const S> b) {
    if (a.size() != b.size())
        throw std::invalid_argument("sum_squared_diff: length mismatch");
    double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += d * d;
    }
    return acc;
}

template <class S>
void axpy(double a, std::span<const S> x, std::span<S> y) {
    if (x.size() != y.size())
        throw std::invalid_argument("axpy: length mismatch");
    for (std::size_t i = 0; i < x.size(); ++i)
        y[i] += static_cast<S>(a * static_cast<double>(x[i]));
}

template <class S>
double dot(std::span<const S> a, std::span<const S> b) {
    if (a.size() != b.size())
        throw std::invalid_argument("dot: length mismatch");
    double acc = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return acc;
}

template <class S>
double norm2(std::span<const S> a) {
    return std::sqrt(dot(a, a));
}

template <class S>
double cosine_similarity(std::span<const S> a, std::span<const S> b) {
    double na = norm2(a), nb = norm2(b);
    if (na == 0 || nb == 0)
        return 0;
    return dot(a, b) / (na * nb);
}

} // namespace eraselab
