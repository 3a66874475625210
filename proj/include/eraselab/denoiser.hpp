#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "eraselab/nn.hpp"
#include "eraselab/rng.hpp"
#include "eraselab/tensor.hpp"

namespace eraselab {

// Conditional noise-prediction net: a small conv encoder/decoder (two
// downsampling stages, two upsampling stages, additive skips). The concept
// embedding and a sinusoidal step embedding are injected through learned
// per-stage channel projections. Differentiable w.r.t. both the flat
// parameter vector and the conditioning embedding.

struct DenoiserArch {
    int channels = 12;  // width of the outermost stage
    int emb_dim = 32;   // conditioning embedding size
    int time_dim = 32;  // sinusoidal step embedding size (even)
    int canvas = 16;    // H = W, divisible by 4
    int img_channels = 3;

    void validate() const {
        if (channels < 1 || emb_dim < 1 || time_dim < 2 || time_dim % 2 != 0)
            throw std::invalid_argument("denoiser arch: bad channels/emb_dim/time_dim");
        if (canvas % 4 != 0 || canvas < 4)
            throw std::invalid_argument("denoiser arch: canvas must be a multiple of 4");
    }

    bool operator==(const DenoiserArch&) const = default;
};

struct DenoiserLayout {
    int C, d, td, ic;
    std::size_t time_w, time_b;
    std::size_t stem_w, stem_b;
    std::size_t inj_c[5], inj_t[5]; // stage widths C, 2C, 4C, 2C, C
    std::size_t enc1_w, enc1_b, down1_w, down1_b, enc2_w, enc2_b, down2_w, down2_b;
    std::size_t mid_w, mid_b, up1_w, up1_b, dec1_w, dec1_b, up2_w, up2_b;
    std::size_t dec2_w, dec2_b, head_w, head_b;
    std::size_t total = 0;

    explicit DenoiserLayout(const DenoiserArch& a)
        : C(a.channels), d(a.emb_dim), td(a.time_dim), ic(a.img_channels) {
        auto alloc = [this](std::size_t n) {
            std::size_t off = total;
            total += n;
            return off;
        };
        time_w = alloc(std::size_t(td) * td);
        time_b = alloc(std::size_t(td));
        stem_w = alloc(std::size_t(C) * ic * 9);
        stem_b = alloc(std::size_t(C));
        int widths[5] = {C, 2 * C, 4 * C, 2 * C, C};
        for (int s = 0; s < 5; ++s) {
            inj_c[s] = alloc(std::size_t(widths[s]) * d);
            inj_t[s] = alloc(std::size_t(widths[s]) * td);
        }
        enc1_w = alloc(std::size_t(C) * C * 9);
        enc1_b = alloc(std::size_t(C));
        down1_w = alloc(std::size_t(2 * C) * C * 9);
        down1_b = alloc(std::size_t(2 * C));
        enc2_w = alloc(std::size_t(2 * C) * 2 * C * 9);
        enc2_b = alloc(std::size_t(2 * C));
        down2_w = alloc(std::size_t(4 * C) * 2 * C * 9);
        down2_b = alloc(std::size_t(4 * C));
        mid_w = alloc(std::size_t(4 * C) * 4 * C * 9);
        mid_b = alloc(std::size_t(4 * C));
        up1_w = alloc(std::size_t(2 * C) * 4 * C * 9);
        up1_b = alloc(std::size_t(2 * C));
        dec1_w = alloc(std::size_t(2 * C) * 2 * C * 9);
        dec1_b = alloc(std::size_t(2 * C));
        up2_w = alloc(std::size_t(C) * 2 * C * 9);
        up2_b = alloc(std::size_t(C));
        dec2_w = alloc(std::size_t(C) * C * 9);
        dec2_b = alloc(std::size_t(C));
        head_w = alloc(std::size_t(ic) * C * 9);
        head_b = alloc(std::size_t(ic));
    }
};

inline void sinusoidal_embedding(int t, int dim, double* out) {
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * i / half);
        out[2 * i] = std::sin(t * freq);
        out[2 * i + 1] = std::cos(t * freq);
    }
}

template <class S>
struct DenoiserWorkspace {
    Tensor<S> temb_raw, temb_pre, temb;
    Tensor<S> z;
    Tensor<S> a1p, a1, a2p, a2, a3p, a3, a4p, a4, a5p, a5, a6p, a6;
    Tensor<S> u1, a7p, a7, s1v, a8p, a8, u2, a9p, a9, s2v, a10p, a10;
    Tensor<S> out;
    // backward scratch (sized for the widest tensor at each resolution)
    Tensor<S> b1, b2, b3, m1, m2, m3, s1, s2, dtemb;
    std::vector<S> cols, dcols;

    explicit DenoiserWorkspace(const DenoiserArch& a) {
        int C = a.channels, hw = a.canvas, h2 = hw / 2, h4 = hw / 4, td = a.time_dim;
        auto t3 = [](int c, int s) { return Tensor<S>({c, s, s}); };
        temb_raw = Tensor<S>({td});
        temb_pre = Tensor<S>({td});
        temb = Tensor<S>({td});
        z = t3(a.img_channels, hw);
        a1p = t3(C, hw); a1 = t3(C, hw);
        a2p = t3(C, hw); a2 = t3(C, hw);
        a3p = t3(2 * C, h2); a3 = t3(2 * C, h2);
        a4p = t3(2 * C, h2); a4 = t3(2 * C, h2);
        a5p = t3(4 * C, h4); a5 = t3(4 * C, h4);
        a6p = t3(4 * C, h4); a6 = t3(4 * C, h4);
        u1 = t3(4 * C, h2);
        a7p = t3(2 * C, h2); a7 = t3(2 * C, h2);
        s1v = t3(2 * C, h2);
        a8p = t3(2 * C, h2); a8 = t3(2 * C, h2);
        u2 = t3(2 * C, hw);
        a9p = t3(C, hw); a9 = t3(C, hw);
        s2v = t3(C, hw);
        a10p = t3(C, hw); a10 = t3(C, hw);
        out = t3(a.img_channels, hw);
        int wide = std::max(4 * C, a.img_channels);
        b1 = t3(wide, hw); b2 = t3(wide, hw); b3 = t3(wide, hw);
        m1 = t3(4 * C, h2); m2 = t3(4 * C, h2); m3 = t3(4 * C, h2);
        s1 = t3(4 * C, h4); s2 = t3(4 * C, h4);
        dtemb = Tensor<S>({td});
        std::size_t max_cols = std::size_t(4 * C) * 9 * hw * hw;
        cols.resize(max_cols);
        dcols.resize(max_cols);
    }
};

template <class S>
class Denoiser {
  public:
    DenoiserArch arch;
    std::vector<S> params;

    Denoiser() : Denoiser(DenoiserArch{}) {}
    explicit Denoiser(const DenoiserArch& a) : arch(a), layout_(a) {
        arch.validate();
        params.assign(layout_.total, S(0));
    }

    std::size_t param_count() const { return layout_.total; }
    const DenoiserLayout& layout() const { return layout_; }

    DenoiserWorkspace<S> make_workspace() const { return DenoiserWorkspace<S>(arch); }

    void init(Pcg32& rng) {
        const DenoiserLayout& L = layout_;
        int C = L.C;
        auto block = [this](std::size_t off, std::size_t n) {
            return std::span<S>(params.data() + off, n);
        };
        init_normal(block(L.time_w, std::size_t(L.td) * L.td), 1.0 / std::sqrt(double(L.td)), rng);
        init_normal(block(L.stem_w, std::size_t(C) * L.ic * 9), std::sqrt(2.0 / (L.ic * 9)), rng);
        int widths[5] = {C, 2 * C, 4 * C, 2 * C, C};
        for (int s = 0; s < 5; ++s) {
            init_normal(block(L.inj_c[s], std::size_t(widths[s]) * L.d),
                        1.0 / std::sqrt(double(L.d)), rng);
            init_normal(block(L.inj_t[s], std::size_t(widths[s]) * L.td),
                        1.0 / std::sqrt(double(L.td)), rng);
        }
        auto conv_init = [&](std::size_t off, int co, int ci) {
            init_normal(block(off, std::size_t(co) * ci * 9), std::sqrt(2.0 / (ci * 9)), rng);
        };
        conv_init(L.enc1_w, C, C);
        conv_init(L.down1_w, 2 * C, C);
        conv_init(L.enc2_w, 2 * C, 2 * C);
        conv_init(L.down2_w, 4 * C, 2 * C);
        conv_init(L.mid_w, 4 * C, 4 * C);
        conv_init(L.up1_w, 2 * C, 4 * C);
        conv_init(L.dec1_w, 2 * C, 2 * C);
        conv_init(L.up2_w, C, 2 * C);
        conv_init(L.dec2_w, C, C);
        // head left at zero: the net starts out predicting zero noise
    }

    // predicted noise for (z_t, c, t); activations cached in ws for backward
    void forward(const Tensor<S>& z, std::span<const S> c, int t, DenoiserWorkspace<S>& ws) const {
        const DenoiserLayout& L = layout_;
        int C = L.C, hw = arch.canvas, h2 = hw / 2, h4 = hw / 4;
        if (static_cast<int>(c.size()) != L.d)
            throw std::invalid_argument("denoiser: embedding size mismatch");
        if (z.dims != std::vector<int>{L.ic, hw, hw})
            throw std::invalid_argument("denoiser: input shape mismatch");
        ws.z = z;

        std::vector<double> sraw(static_cast<std::size_t>(L.td));
        sinusoidal_embedding(t, L.td, sraw.data());
        for (int i = 0; i < L.td; ++i)
            ws.temb_raw[static_cast<std::size_t>(i)] = static_cast<S>(sraw[static_cast<std::size_t>(i)]);
        linear_forward(ws.temb_raw.ptr(), L.td, p(L.time_w), p(L.time_b), L.td, ws.temb.ptr());
        silu_forward(ws.temb.ptr(), static_cast<std::size_t>(L.td), ws.temb_pre.ptr());

        auto conv = [&](const Tensor<S>& in, int ci, int h, std::size_t w_off, std::size_t b_off,
                        int co, int stride, Tensor<S>& outb) {
            conv3x3_forward(in.ptr(), ci, h, h, p(w_off), p(b_off), co, stride, ws.cols.data(),
                            outb.ptr());
        };
        auto act = [&](Tensor<S>& x, Tensor<S>& pre) { silu_forward(x.ptr(), x.size(), pre.ptr()); };

        conv(ws.z, L.ic, hw, L.stem_w, L.stem_b, C, 1, ws.a1);
        inject(0, C, hw * hw, c, ws.temb, ws.a1.ptr());
        act(ws.a1, ws.a1p);
        conv(ws.a1, C, hw, L.enc1_w, L.enc1_b, C, 1, ws.a2);
        act(ws.a2, ws.a2p);
        conv(ws.a2, C, hw, L.down1_w, L.down1_b, 2 * C, 2, ws.a3);
        inject(1, 2 * C, h2 * h2, c, ws.temb, ws.a3.ptr());
        act(ws.a3, ws.a3p);
        conv(ws.a3, 2 * C, h2, L.enc2_w, L.enc2_b, 2 * C, 1, ws.a4);
        act(ws.a4, ws.a4p);
        conv(ws.a4, 2 * C, h2, L.down2_w, L.down2_b, 4 * C, 2, ws.a5);
        inject(2, 4 * C, h4 * h4, c, ws.temb, ws.a5.ptr());
        act(ws.a5, ws.a5p);
        conv(ws.a5, 4 * C, h4, L.mid_w, L.mid_b, 4 * C, 1, ws.a6);
        act(ws.a6, ws.a6p);
        upsample2_forward(ws.a6.ptr(), 4 * C, h4, h4, ws.u1.ptr());
        conv(ws.u1, 4 * C, h2, L.up1_w, L.up1_b, 2 * C, 1, ws.a7);
        inject(3, 2 * C, h2 * h2, c, ws.temb, ws.a7.ptr());
        act(ws.a7, ws.a7p);
        for (std::size_t i = 0; i < ws.s1v.size(); ++i)
            ws.s1v[i] = ws.a7[i] + ws.a4[i];
        conv(ws.s1v, 2 * C, h2, L.dec1_w, L.dec1_b, 2 * C, 1, ws.a8);
        act(ws.a8, ws.a8p);
        upsample2_forward(ws.a8.ptr(), 2 * C, h2, h2, ws.u2.ptr());
        conv(ws.u2, 2 * C, hw, L.up2_w, L.up2_b, C, 1, ws.a9);
        inject(4, C, hw * hw, c, ws.temb, ws.a9.ptr());
        act(ws.a9, ws.a9p);
        for (std::size_t i = 0; i < ws.s2v.size(); ++i)
            ws.s2v[i] = ws.a9[i] + ws.a2[i];
        conv(ws.s2v, C, hw, L.dec2_w, L.dec2_b, C, 1, ws.a10);
        act(ws.a10, ws.a10p);
        conv(ws.a10, C, hw, L.head_w, L.head_b, L.ic, 1, ws.out);
    }

    // Accumulates dL/dparams into dparams and dL/dc into dc; either span may
    // be empty to skip that output. Requires a prior forward() on ws with the
    // same (z, c, t).
    void backward(const Tensor<S>& dout, std::span<const S> c, DenoiserWorkspace<S>& ws,
                  std::span<S> dparams, std::span<S> dc) const {
        const DenoiserLayout& L = layout_;
        int C = L.C, hw = arch.canvas, h2 = hw / 2, h4 = hw / 4;
        bool want_p = !dparams.empty();
        bool want_c = !dc.empty();
        if (want_p && dparams.size() != params.size())
            throw std::invalid_argument("denoiser backward: dparams size mismatch");
        if (want_c && static_cast<int>(dc.size()) != L.d)
            throw std::invalid_argument("denoiser backward: dc size mismatch");
        ws.dtemb.zero();

        auto gp = [&](std::size_t off) { return want_p ? dparams.data() + off : nullptr; };
        auto conv_bwd = [&](const Tensor<S>& in, int ci, int h, std::size_t w_off,
                            std::size_t b_off, int co, int stride, const S* dup, S* din) {
            conv3x3_backward(in.ptr(), ci, h, h, p(w_off), co, stride, dup, ws.cols.data(),
                             gp(w_off), gp(b_off), din, ws.dcols.data());
        };
        auto inj_bwd = [&](int stage, int ch, int spatial, const S* dpre) {
            inject_backward(stage, ch, spatial, c, ws, dpre, dparams, dc, want_p, want_c);
        };

        S* d_a10 = ws.b1.ptr();
        conv_bwd(ws.a10, C, hw, L.head_w, L.head_b, L.ic, 1, dout.ptr(), d_a10);
        silu_backward(ws.a10p.ptr(), d_a10, ws.a10.size());
        S* d_s2v = ws.b2.ptr();
        conv_bwd(ws.s2v, C, hw, L.dec2_w, L.dec2_b, C, 1, d_a10, d_s2v);
        // skip split: s2v = a9 + a2
        S* d_a2_skip = ws.b3.ptr();
        std::copy(d_s2v, d_s2v + ws.s2v.size(), d_a2_skip);
        silu_backward(ws.a9p.ptr(), d_s2v, ws.a9.size()); // d_s2v is now d(a9 pre)
        inj_bwd(4, C, hw * hw, d_s2v);
        S* d_u2 = ws.b1.ptr(); // d_a10 dead
        conv_bwd(ws.u2, 2 * C, hw, L.up2_w, L.up2_b, C, 1, d_s2v, d_u2);
        S* d_a8 = ws.m1.ptr();
        upsample2_backward(d_u2, 2 * C, h2, h2, d_a8);
        silu_backward(ws.a8p.ptr(), d_a8, ws.a8.size());
        S* d_s1v = ws.m2.ptr();
        conv_bwd(ws.s1v, 2 * C, h2, L.dec1_w, L.dec1_b, 2 * C, 1, d_a8, d_s1v);
        // skip split: s1v = a7 + a4
        S* d_a4_skip = ws.m3.ptr();
        std::copy(d_s1v, d_s1v + ws.s1v.size(), d_a4_skip);
        silu_backward(ws.a7p.ptr(), d_s1v, ws.a7.size()); // now d(a7 pre)
        inj_bwd(3, 2 * C, h2 * h2, d_s1v);
        S* d_u1 = ws.m1.ptr(); // d_a8 dead
        conv_bwd(ws.u1, 4 * C, h2, L.up1_w, L.up1_b, 2 * C, 1, d_s1v, d_u1);
        S* d_a6 = ws.s1.ptr();
        upsample2_backward(d_u1, 4 * C, h4, h4, d_a6);
        silu_backward(ws.a6p.ptr(), d_a6, ws.a6.size());
        S* d_a5 = ws.s2.ptr();
        conv_bwd(ws.a5, 4 * C, h4, L.mid_w, L.mid_b, 4 * C, 1, d_a6, d_a5);
        silu_backward(ws.a5p.ptr(), d_a5, ws.a5.size());
        inj_bwd(2, 4 * C, h4 * h4, d_a5);
        S* d_a4 = ws.m1.ptr(); // d_u1 dead
        conv_bwd(ws.a4, 2 * C, h2, L.down2_w, L.down2_b, 4 * C, 2, d_a5, d_a4);
        for (std::size_t i = 0; i < ws.a4.size(); ++i)
            d_a4[i] += d_a4_skip[i];
        silu_backward(ws.a4p.ptr(), d_a4, ws.a4.size());
        S* d_a3 = ws.m2.ptr(); // d_s1v dead
        conv_bwd(ws.a3, 2 * C, h2, L.enc2_w, L.enc2_b, 2 * C, 1, d_a4, d_a3);
        silu_backward(ws.a3p.ptr(), d_a3, ws.a3.size());
        inj_bwd(1, 2 * C, h2 * h2, d_a3);
        S* d_a2 = ws.b1.ptr(); // d_u2 dead
        conv_bwd(ws.a2, C, hw, L.down1_w, L.down1_b, 2 * C, 2, d_a3, d_a2);
        for (std::size_t i = 0; i < ws.a2.size(); ++i)
            d_a2[i] += d_a2_skip[i];
        silu_backward(ws.a2p.ptr(), d_a2, ws.a2.size());
        S* d_a1 = ws.b2.ptr(); // d_s2v dead
        conv_bwd(ws.a1, C, hw, L.enc1_w, L.enc1_b, C, 1, d_a2, d_a1);
        silu_backward(ws.a1p.ptr(), d_a1, ws.a1.size());
        inj_bwd(0, C, hw * hw, d_a1);
        if (want_p)
            conv_bwd(ws.z, L.ic, hw, L.stem_w, L.stem_b, C, 1, d_a1, nullptr);

        if (want_p) {
            silu_backward(ws.temb_pre.ptr(), ws.dtemb.ptr(), static_cast<std::size_t>(L.td));
            linear_backward(ws.temb_raw.ptr(), L.td, p(L.time_w), L.td, ws.dtemb.ptr(),
                            dparams.data() + L.time_w, dparams.data() + L.time_b,
                            static_cast<S*>(nullptr));
        }
    }

  private:
    DenoiserLayout layout_;

    const S* p(std::size_t off) const { return params.data() + off; }

    void inject(int stage, int ch, int spatial, std::span<const S> c, const Tensor<S>& temb,
                S* h) const {
        const DenoiserLayout& L = layout_;
        const S* wc = p(L.inj_c[stage]);
        const S* wt = p(L.inj_t[stage]);
        for (int k = 0; k < ch; ++k) {
            double s = 0;
            for (int j = 0; j < L.d; ++j)
                s += double(wc[std::size_t(k) * L.d + j]) * double(c[std::size_t(j)]);
            for (int j = 0; j < L.td; ++j)
                s += double(wt[std::size_t(k) * L.td + j]) * double(temb[std::size_t(j)]);
            S add = static_cast<S>(s);
            S* hp = h + std::size_t(k) * spatial;
            for (int i = 0; i < spatial; ++i)
                hp[i] += add;
        }
    }

    void inject_backward(int stage, int ch, int spatial, std::span<const S> c,
                         DenoiserWorkspace<S>& ws, const S* dpre, std::span<S> dparams,
                         std::span<S> dc, bool want_p, bool want_c) const {
        const DenoiserLayout& L = layout_;
        const S* wc = p(L.inj_c[stage]);
        const S* wt = p(L.inj_t[stage]);
        for (int k = 0; k < ch; ++k) {
            double g = 0;
            const S* dp = dpre + std::size_t(k) * spatial;
            for (int i = 0; i < spatial; ++i)
                g += double(dp[i]);
            if (want_p) {
                S* dwc = dparams.data() + L.inj_c[stage] + std::size_t(k) * L.d;
                for (int j = 0; j < L.d; ++j)
                    dwc[j] += static_cast<S>(g * double(c[std::size_t(j)]));
                S* dwt = dparams.data() + L.inj_t[stage] + std::size_t(k) * L.td;
                for (int j = 0; j < L.td; ++j) {
                    dwt[j] += static_cast<S>(g * double(ws.temb[std::size_t(j)]));
                    ws.dtemb[std::size_t(j)] +=
                        static_cast<S>(g * double(wt[std::size_t(k) * L.td + j]));
                }
            }
            if (want_c)
                for (int j = 0; j < L.d; ++j)
                    dc[std::size_t(j)] += static_cast<S>(g * double(wc[std::size_t(k) * L.d + j]));
        }
    }
};

// Binds a denoiser to scratch space so callers can treat it as a pure
// z,c,t -> eps function. One DenoiserRef per thread.
template <class S>
struct DenoiserRef {
    const Denoiser<S>* net;
    DenoiserWorkspace<S>* ws;

    Tensor<S> eval(const Tensor<S>& z, std::span<const S> c, int t) const {
        net->forward(z, c, t, *ws);
        return ws->out;
    }
};

} // namespace eraselab
