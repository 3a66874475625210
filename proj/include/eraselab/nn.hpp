#pragma once

#include <Eigen/Core>

#include <cmath>
#include <span>
#include <stdexcept>

#include "eraselab/rng.hpp"
#include "eraselab/tensor.hpp"

namespace eraselab {

// 3x3 convolution layers (pad 1, stride 1 or 2) via im2col + GEMM, with
// hand-written backward passes. All shapes are CHW.

template <class S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MapRM = Eigen::Map<MatRM<S>>;
template <class S>
using CMapRM = Eigen::Map<const MatRM<S>>;

// cols is (c_in*9) x (ho*wo), row-major
template <class S>
void im2col3x3(const S* in, int c_in, int h, int w, int stride, S* cols) {
    int ho = h / stride, wo = w / stride;
    int patch = c_in * 9;
    std::size_t np = static_cast<std::size_t>(ho) * wo;
    for (int c = 0; c < c_in; ++c) {
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                S* dst = cols + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * np;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= h) {
                        for (int ox = 0; ox < wo; ++ox)
                            dst[static_cast<std::size_t>(oy) * wo + ox] = S(0);
                        continue;
                    }
                    const S* row = in + (static_cast<std::size_t>(c) * h + iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride + kx - 1;
                        dst[static_cast<std::size_t>(oy) * wo + ox] =
                            (ix < 0 || ix >= w) ? S(0) : row[ix];
                    }
                }
            }
        }
    }
    (void)patch;
}

// scatter-add transpose of im2col3x3
template <class S>
void col2im3x3(const S* cols, int c_in, int h, int w, int stride, S* din) {
    int ho = h / stride, wo = w / stride;
    std::size_t np = static_cast<std::size_t>(ho) * wo;
    for (int c = 0; c < c_in; ++c) {
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const S* src = cols + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * np;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= h)
                        continue;
                    S* row = din + (static_cast<std::size_t>(c) * h + iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride + kx - 1;
                        if (ix >= 0 && ix < w)
                            row[ix] += src[static_cast<std::size_t>(oy) * wo + ox];
                    }
                }
            }
        }
    }
}

// out[c_out, ho, wo] = W[c_out, c_in*9] . cols + b ; cols buffer supplied by caller
template <class S>
void conv3x3_forward(const S* in, int c_in, int h, int w, const S* weight, const S* bias,
                     int c_out, int stride, S* cols, S* out) {
    int ho = h / stride, wo = w / stride;
    std::size_t np = static_cast<std::size_t>(ho) * wo;
    im2col3x3(in, c_in, h, w, stride, cols);
    CMapRM<S> wm(weight, c_out, c_in * 9);
    CMapRM<S> cm(cols, c_in * 9, static_cast<Eigen::Index>(np));
    MapRM<S> om(out, c_out, static_cast<Eigen::Index>(np));
    om.noalias() = wm * cm;
    for (int co = 0; co < c_out; ++co)
        om.row(co).array() += bias[co];
}

// Accumulates dweight/dbias; overwrites din (pass nullptr to skip input grad).
// cols must hold im2col of the forward input (recomputed here from `in`).
template <class S>
void conv3x3_backward(const S* in, int c_in, int h, int w, const S* weight, int c_out, int stride,
                      const S* dout, S* cols, S* dweight, S* dbias, S* din, S* dcols) {
    int ho = h / stride, wo = w / stride;
    std::size_t np = static_cast<std::size_t>(ho) * wo;
    im2col3x3(in, c_in, h, w, stride, cols);
    CMapRM<S> cm(cols, c_in * 9, static_cast<Eigen::Index>(np));
    CMapRM<S> dom(dout, c_out, static_cast<Eigen::Index>(np));
    MapRM<S> dwm(dweight, c_out, c_in * 9);
    dwm.noalias() += dom * cm.transpose();
    for (int co = 0; co < c_out; ++co)
        dbias[co] += dom.row(co).sum();
    if (din != nullptr) {
        CMapRM<S> wm(weight, c_out, c_in * 9);
        MapRM<S> dcm(dcols, c_in * 9, static_cast<Eigen::Index>(np));
        dcm.noalias() = wm.transpose() * dom;
        std::fill(din, din + static_cast<std::size_t>(c_in) * h * w, S(0));
        col2im3x3(dcols, c_in, h, w, stride, din);
    }
}

template <class S>
void upsample2_forward(const S* in, int c, int h, int w, S* out) {
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * h; ++y) {
            const S* row = in + (static_cast<std::size_t>(ch) * h + y / 2) * w;
            S* orow = out + (static_cast<std::size_t>(ch) * 2 * h + y) * 2 * w;
            for (int x = 0; x < 2 * w; ++x)
                orow[x] = row[x / 2];
        }
}

template <class S>
void upsample2_backward(const S* dout, int c, int h, int w, S* din) {
    std::fill(din, din + static_cast<std::size_t>(c) * h * w, S(0));
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * h; ++y) {
            const S* orow = dout + (static_cast<std::size_t>(ch) * 2 * h + y) * 2 * w;
            S* row = din + (static_cast<std::size_t>(ch) * h + y / 2) * w;
            for (int x = 0; x < 2 * w; ++x)
                row[x / 2] += orow[x];
        }
}

template <class S>
inline S sigmoid(S x) {
    return S(1) / (S(1) + std::exp(-x));
}

// silu(x) = x * sigmoid(x), applied in place; `pre` keeps the pre-activation
template <class S>
void silu_forward(S* x, std::size_t n, S* pre) {
    for (std::size_t i = 0; i < n; ++i) {
        pre[i] = x[i];
        x[i] = x[i] * sigmoid(x[i]);
    }
}

template <class S>
void silu_backward(const S* pre, S* grad, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
        S s = sigmoid(pre[i]);
        grad[i] *= s * (S(1) + pre[i] * (S(1) - s));
    }
}

// out[r] = W[r,:] . x + b[r]
template <class S>
void linear_forward(const S* x, int n_in, const S* weight, const S* bias, int n_out, S* out) {
    CMapRM<S> wm(weight, n_out, n_in);
    Eigen::Map<const Eigen::Vector<S, Eigen::Dynamic>> xv(x, n_in);
    Eigen::Map<Eigen::Vector<S, Eigen::Dynamic>> ov(out, n_out);
    ov.noalias() = wm * xv;
    if (bias != nullptr)
        for (int r = 0; r < n_out; ++r)
            out[r] += bias[r];
}

template <class S>
void linear_backward(const S* x, int n_in, const S* weight, int n_out, const S* dout, S* dweight,
                     S* dbias, S* dx) {
    CMapRM<S> wm(weight, n_out, n_in);
    Eigen::Map<const Eigen::Vector<S, Eigen::Dynamic>> xv(x, n_in);
    Eigen::Map<const Eigen::Vector<S, Eigen::Dynamic>> dov(dout, n_out);
    if (dweight != nullptr) {
        MapRM<S> dwm(dweight, n_out, n_in);
        dwm.noalias() += dov * xv.transpose();
    }
    if (dbias != nullptr)
        for (int r = 0; r < n_out; ++r)
            dbias[r] += dout[r];
    if (dx != nullptr) {
        Eigen::Map<Eigen::Vector<S, Eigen::Dynamic>> dxv(dx, n_in);
        dxv.noalias() += wm.transpose() * dov;
    }
}

template <class S>
void softmax(std::span<const S> logits, std::span<S> out) {
    if (logits.size() != out.size() || logits.empty())
        throw std::invalid_argument("softmax: bad sizes");
    double mx = -1e300;
    for (S v : logits)
        mx = std::max(mx, static_cast<double>(v));
    double z = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        double e = std::exp(static_cast<double>(logits[i]) - mx);
        out[i] = static_cast<S>(e);
        z += e;
    }
    for (auto& v : out)
        v = static_cast<S>(static_cast<double>(v) / z);
}

// He-style init for conv/linear weight blocks
template <class S>
void init_normal(std::span<S> w, double stddev, Pcg32& rng) {
    for (auto& v : w)
        v = static_cast<S>(stddev * rng.gaussian());
}

} // namespace eraselab
