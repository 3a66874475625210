#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "eraselab/denoiser.hpp"
#include "eraselab/optim.hpp"
#include "eraselab/rng.hpp"
#include "eraselab/schedule.hpp"
#include "eraselab/tensor.hpp"
#include "eraselab/threading.hpp"
#include "eraselab/toyworld.hpp"

namespace eraselab {

// Net is anything with eval(z, c, t) -> Tensor<S>; tests plug in stubs,
// production code uses DenoiserRef.

// One ancestral update z_t -> z_{t-1}. Posterior variance uses the
// (1-abar_{t-1})/(1-abar_t) * beta_t form; no noise is added at t=1.
template <class S>
void reverse_step(Tensor<S>& z, const Tensor<S>& eps_pred, int t, const DiffusionSchedule& sched,
                  Pcg32& rng) {
    sched.check_t(t);
    double beta = sched.beta_at(t);
    double alpha = sched.alpha_at(t);
    double abar = sched.alpha_bar_at(t);
    double mean_scale = 1.0 / std::sqrt(alpha);
    double eps_coef = beta / std::sqrt(1.0 - abar);
    double sigma = 0.0;
    if (t > 1)
        sigma = std::sqrt((1.0 - sched.alpha_bar_before(t)) / (1.0 - abar) * beta);
    for (std::size_t i = 0; i < z.size(); ++i) {
        double mu = mean_scale * (static_cast<double>(z.data[i]) -
                                  eps_coef * static_cast<double>(eps_pred.data[i]));
        if (t > 1)
            mu += sigma * rng.gaussian();
        z.data[i] = static_cast<S>(mu);
    }
}

// Runs the reverse chain from z_T down to z_{t_stop}. t_stop = 0 yields a
// finished sample; t_stop = T returns z_T untouched with zero net calls.
template <class Net, class S>
Tensor<S> reverse_chain(const Net& net, std::span<const S> c, Tensor<S> z,
                        const DiffusionSchedule& sched, int t_stop, Pcg32& rng) {
    if (t_stop < 0 || t_stop > sched.steps)
        throw std::out_of_range("reverse_chain: bad t_stop");
    for (int t = sched.steps; t > t_stop; --t) {
        Tensor<S> eps = net.eval(z, c, t);
        reverse_step(z, eps, t, sched, rng);
        if (!all_finite(std::span<const S>(z.data.data(), z.data.size())))
            throw std::runtime_error("reverse_chain: non-finite state at step " +
                                     std::to_string(t));
    }
    return z;
}

// Conditional ancestral sample, clamped to [-1, 1].
template <class Net, class S>
Tensor<S> sample(const Net& net, std::span<const S> c, Tensor<S> z_T,
                 const DiffusionSchedule& sched, Pcg32& rng) {
    Tensor<S> x = reverse_chain(net, c, std::move(z_T), sched, 0, rng);
    for (auto& v : x.data)
        v = std::clamp(v, S(-1), S(1));
    return x;
}

// Seeded sample: z_T and chain noise derive only from `seed`, never from the
// concept, so two models (or two concepts) given equal seeds see identical
// noise streams.
template <class Net, class S>
Tensor<S> sample_seeded(const Net& net, std::span<const S> c, std::vector<int> img_dims,
                        const DiffusionSchedule& sched, std::uint64_t seed,
                        std::vector<std::uint64_t>* seed_log = nullptr) {
    if (seed_log)
        seed_log->push_back(seed);
    Pcg32 zrng = substream(seed, "sample.zT");
    Tensor<S> z = gaussian_tensor<S>(std::move(img_dims), zrng);
    Pcg32 crng = substream(seed, "sample.chain");
    return sample(net, c, std::move(z), sched, crng);
}

// ---------------------------------------------------------------------------
// Training loss (per-example draws are replayable from the rng stream)

struct LossDraw {
    int example = 0;  // dataset index
    int t = 0;
    int label_slot = 0; // which of the example's concept ids conditions it
};

inline LossDraw draw_loss_sample(int dataset_size, int total_steps, Pcg32& rng) {
    LossDraw d;
    d.example = static_cast<int>(rng.below(static_cast<std::uint32_t>(dataset_size)));
    d.t = 1 + static_cast<int>(rng.below(static_cast<std::uint32_t>(total_steps)));
    d.label_slot = static_cast<int>(rng.below(4));
    return d;
}

// Mean over the batch of || eps - net(z_t, c, t) ||^2 with z_t from the
// forward corruption of a dataset image and c a uniformly chosen label of
// that image.
template <class Net, class S>
double denoise_loss(const Net& net, const DatasetT<S>& ds, const VocabularyT<S>& vocab,
                    const DiffusionSchedule& sched, int batch, Pcg32& rng) {
    if (batch < 1 || ds.size() == 0)
        throw std::invalid_argument("denoise_loss: empty batch or dataset");
    int hw = ds.canvas;
    double total = 0;
    for (int j = 0; j < batch; ++j) {
        LossDraw d = draw_loss_sample(ds.size(), sched.steps, rng);
        Tensor<S> x0({3, hw, hw});
        auto img = ds.image(d.example);
        std::copy(img.begin(), img.end(), x0.data.begin());
        Tensor<S> eps = gaussian_tensor<S>({3, hw, hw}, rng);
        Tensor<S> zt = forward_diffuse(x0, d.t, eps, sched);
        int cid = ds.labels[static_cast<std::size_t>(d.example)][static_cast<std::size_t>(d.label_slot)];
        Tensor<S> pred = net.eval(zt, vocab.embedding(cid), d.t);
        total += sum_squared_diff(pred.span(), eps.span());
    }
    return total / batch;
}

// ---------------------------------------------------------------------------
// Base training: joint gradient descent on denoiser parameters and concept
// embeddings, after which the embeddings freeze for good.

struct BaseTrainConfig {
    int steps = 4000;
    int batch = 32;
    double lr = 1e-3;
    double embedding_lr = 1e-2;
    int threads = 0;
    int log_every = 0; // 0 = silent
};

struct BaseTrainResult {
    double final_loss = 0;   // mean loss over the last logged window
    std::vector<double> loss_history;
};

// Batch gradients accumulate into a fixed number of chunks merged in chunk
// order, so training is bit-identical for any worker-thread count.
inline constexpr int kGradChunks = 8;

template <class S>
BaseTrainResult train_base(Denoiser<S>& net, VocabularyT<S>& vocab, const DatasetT<S>& ds,
                           const DiffusionSchedule& sched, const BaseTrainConfig& cfg,
                           std::uint64_t seed) {
    if (ds.size() == 0)
        throw std::invalid_argument("train_base: empty dataset");
    if (vocab.frozen)
        throw std::logic_error("train_base: vocabulary already frozen");
    int threads = cfg.threads > 0 ? cfg.threads : default_thread_count();
    int chunks = std::min(kGradChunks, std::max(1, cfg.batch));
    int hw = ds.canvas;
    std::size_t np = net.param_count();
    std::size_t ne = vocab.embeddings.size();

    Adam<S> opt_net(cfg.lr);
    Adam<S> opt_emb(cfg.embedding_lr);
    std::vector<std::vector<S>> gnet(static_cast<std::size_t>(chunks), std::vector<S>(np));
    std::vector<std::vector<S>> gemb(static_cast<std::size_t>(chunks), std::vector<S>(ne));
    std::vector<DenoiserWorkspace<S>> ws;
    ws.reserve(static_cast<std::size_t>(chunks));
    for (int i = 0; i < chunks; ++i)
        ws.push_back(net.make_workspace());
    std::vector<double> chunk_loss(static_cast<std::size_t>(chunks));

    BaseTrainResult res;
    double window = 0;
    int window_n = 0;
    for (int step = 0; step < cfg.steps; ++step) {
        for (int ch = 0; ch < chunks; ++ch) {
            std::fill(gnet[static_cast<std::size_t>(ch)].begin(),
                      gnet[static_cast<std::size_t>(ch)].end(), S(0));
            std::fill(gemb[static_cast<std::size_t>(ch)].begin(),
                      gemb[static_cast<std::size_t>(ch)].end(), S(0));
            chunk_loss[static_cast<std::size_t>(ch)] = 0;
        }
        parallel_for(static_cast<std::size_t>(chunks), [&](std::size_t ch) {
            auto& g = gnet[ch];
            auto& ge = gemb[ch];
            auto& w = ws[ch];
            std::span<S> gspan(g.data(), g.size());
            for (int j = static_cast<int>(ch); j < cfg.batch; j += chunks) {
                Pcg32 rng = substream(seed, "base.example",
                                      static_cast<std::uint64_t>(step) * cfg.batch + j);
                LossDraw d = draw_loss_sample(ds.size(), sched.steps, rng);
                Tensor<S> x0({3, hw, hw});
                auto img = ds.image(d.example);
                std::copy(img.begin(), img.end(), x0.data.begin());
                Tensor<S> eps = gaussian_tensor<S>({3, hw, hw}, rng);
                Tensor<S> zt = forward_diffuse(x0, d.t, eps, sched);
                int cid = ds.labels[static_cast<std::size_t>(d.example)]
                                   [static_cast<std::size_t>(d.label_slot)];
                net.forward(zt, vocab.embedding(cid), d.t, w);
                chunk_loss[ch] += sum_squared_diff(w.out.span(), eps.span());
                Tensor<S> dout({3, hw, hw});
                for (std::size_t i = 0; i < dout.size(); ++i)
                    dout.data[i] = S(2.0 / cfg.batch) * (w.out.data[i] - eps.data[i]);
                std::span<S> dc(ge.data() + static_cast<std::size_t>(cid) * vocab.dim,
                                static_cast<std::size_t>(vocab.dim));
                net.backward(dout, vocab.embedding(cid), w, gspan, dc);
            }
        }, threads);

        double loss = 0;
        for (int ch = 0; ch < chunks; ++ch)
            loss += chunk_loss[static_cast<std::size_t>(ch)];
        loss /= cfg.batch;
        if (!std::isfinite(loss))
            throw std::runtime_error("train_base: loss diverged at step " + std::to_string(step));
        res.loss_history.push_back(loss);
        window += loss;
        ++window_n;

        for (int ch = 1; ch < chunks; ++ch) {
            axpy(1.0, std::span<const S>(gnet[static_cast<std::size_t>(ch)].data(), np),
                 std::span<S>(gnet[0].data(), np));
            axpy(1.0, std::span<const S>(gemb[static_cast<std::size_t>(ch)].data(), ne),
                 std::span<S>(gemb[0].data(), ne));
        }
        opt_net.step(std::span<S>(net.params.data(), np), std::span<const S>(gnet[0].data(), np));
        opt_emb.step(std::span<S>(vocab.embeddings.ptr(), ne),
                     std::span<const S>(gemb[0].data(), ne));

        if (cfg.log_every > 0 && (step + 1) % cfg.log_every == 0) {
            std::fprintf(stderr, "[train_base] step %d/%d loss %.3f\n", step + 1, cfg.steps,
                         window / window_n);
            window = 0;
            window_n = 0;
        }
    }
    res.final_loss = res.loss_history.empty()
                         ? 0.0
                         : res.loss_history[res.loss_history.size() - 1];
    vocab.frozen = true;
    return res;
}

} // namespace eraselab
