#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "eraselab/denoiser.hpp"
#include "eraselab/diffusion.hpp"
#include "eraselab/gumbel.hpp"
#include "eraselab/optim.hpp"
#include "eraselab/rng.hpp"
#include "eraselab/schedule.hpp"
#include "eraselab/toyworld.hpp"

namespace eraselab {

enum class EraseMode { naive, fixed_anchor, adversarial_pgd, adversarial_gumbel };

inline const char* erase_mode_name(EraseMode m) {
    switch (m) {
    case EraseMode::naive: return "naive";
    case EraseMode::fixed_anchor: return "fixed_anchor";
    case EraseMode::adversarial_pgd: return "adversarial_pgd";
    case EraseMode::adversarial_gumbel: return "adversarial_gumbel";
    }
    return "?";
}

inline EraseMode erase_mode_from_name(const std::string& s) {
    if (s == "naive") return EraseMode::naive;
    if (s == "fixed_anchor") return EraseMode::fixed_anchor;
    if (s == "adversarial_pgd") return EraseMode::adversarial_pgd;
    if (s == "adversarial_gumbel") return EraseMode::adversarial_gumbel;
    throw std::invalid_argument("unknown erase mode: " + s);
}

struct ErasureConfig {
    std::vector<int> erase_ids;            // E
    int neutral_id = -1;                   // anchor for the erasing loss
    EraseMode mode = EraseMode::adversarial_gumbel;
    int fixed_anchor_id = -1;              // fixed_anchor mode only
    double preserve_weight = 1.0;          // lambda
    double search_step = 1e-3;             // eta, inner ascent step
    int search_iters = 2;                  // inner steps per outer step
    int search_top_k = 100;                // K, restricted set size
    double tau0 = 1.0;
    AnnealKind tau_anneal = AnnealKind::constant;
    double lr = 1e-4;                      // alpha, outer Adam step
    int outer_steps = 600;
    int t_min = 1;
    int t_max = 0;                         // 0 = schedule length
    std::uint64_t seed = 0;
    bool warm_start = false;               // carry simplex logits across outer steps
    int snapshot_every = 0;                // on_step callback cadence (0 = never)

    template <class S>
    void validate(const VocabularyT<S>& vocab, const DiffusionSchedule& sched) const {
        if (erase_ids.empty())
            throw std::invalid_argument("erase: erase set is empty");
        for (int id : erase_ids)
            if (id < 0 || id >= vocab.size())
                throw std::invalid_argument("erase: bad erase id " + std::to_string(id));
        if (neutral_id < 0 || neutral_id >= vocab.size())
            throw std::invalid_argument("erase: bad neutral id");
        for (int id : erase_ids)
            if (id == neutral_id)
                throw std::invalid_argument("erase: neutral concept cannot be erased");
        if (mode == EraseMode::fixed_anchor) {
            if (fixed_anchor_id < 0 || fixed_anchor_id >= vocab.size())
                throw std::invalid_argument("erase: fixed_anchor mode needs a valid anchor id");
            for (int id : erase_ids)
                if (id == fixed_anchor_id)
                    throw std::invalid_argument("erase: anchor cannot be in the erase set");
        }
        if (preserve_weight < 0)
            throw std::invalid_argument("erase: lambda must be >= 0");
        bool searches = mode == EraseMode::adversarial_pgd || mode == EraseMode::adversarial_gumbel;
        if (searches && !(search_step > 0))
            throw std::invalid_argument("erase: eta must be > 0");
        if (searches && search_iters < 0)
            throw std::invalid_argument("erase: search_iters must be >= 0");
        if (mode == EraseMode::adversarial_gumbel && search_top_k < 1)
            throw std::invalid_argument("erase: K must be >= 1");
        if (!(lr > 0))
            throw std::invalid_argument("erase: alpha must be > 0");
        if (outer_steps < 0)
            throw std::invalid_argument("erase: outer_steps must be >= 0");
        int tmax = t_max == 0 ? sched.steps : t_max;
        if (t_min < 1 || tmax < t_min || tmax > sched.steps)
            throw std::invalid_argument("erase: bad t range");
        if (!(tau0 > 0))
            throw std::invalid_argument("erase: tau0 must be > 0");
        // the remaining set must offer something besides the neutral concept
        bool has_non_neutral = false;
        for (int id = 0; id < vocab.size(); ++id) {
            bool in_e = false;
            for (int e : erase_ids)
                in_e |= (e == id);
            if (!in_e && id != neutral_id)
                has_non_neutral = true;
        }
        if (!has_non_neutral)
            throw std::invalid_argument("erase: erase set leaves no non-neutral concept");
    }
};

struct TraceRecord {
    int step = 0;
    int ce_id = -1;
    int ca_id = -1;                 // vocabulary id of the preserved concept, -1 if none
    bool ca_continuous = false;     // pgd mode: ca is an off-vocabulary embedding
    int ca_nearest_id = -1;         // nearest token to a continuous ca (trace/report aid)
    std::vector<double> inner_l2;   // preservation loss per inner search step
    double outer_l1 = 0;
    double outer_l2 = std::numeric_limits<double>::quiet_NaN();
    double tau = 0;
    int t_used = 0;
};

struct ErasureTrace {
    std::vector<TraceRecord> records;
};

// ---------------------------------------------------------------------------
// States and losses

// Draws t uniformly from [t_min, t_max], then runs the current model's
// reverse chain from pure noise down to z_t, conditioned on c. t == t_max ==
// schedule length short-circuits to the raw draw (zero net calls).
template <class Net, class S>
std::pair<Tensor<S>, int> make_inner_state(const Net& net, std::span<const S> c,
                                           std::vector<int> img_dims,
                                           const DiffusionSchedule& sched, int t_min, int t_max,
                                           Pcg32& rng) {
    if (t_max == 0)
        t_max = sched.steps;
    if (t_min < 1 || t_max < t_min || t_max > sched.steps)
        throw std::invalid_argument("make_inner_state: bad t range");
    int t = t_min + static_cast<int>(rng.below(static_cast<std::uint32_t>(t_max - t_min + 1)));
    Tensor<S> z = gaussian_tensor<S>(std::move(img_dims), rng);
    z = reverse_chain(net, c, std::move(z), sched, t, rng);
    return {std::move(z), t};
}

// || sanitized(z_t, c_e, t) - frozen(z_t, c_n, t) ||^2
template <class NetA, class NetB, class S>
double erasing_loss(const NetA& sanitized, const NetB& frozen, std::span<const S> c_erase,
                    std::span<const S> c_neutral, const Tensor<S>& z_t, int t) {
    Tensor<S> a = sanitized.eval(z_t, c_erase, t);
    Tensor<S> b = frozen.eval(z_t, c_neutral, t);
    return sum_squared_diff(a.span(), b.span());
}

// || sanitized(z_t, c_a, t) - frozen(z_t, c_a, t) ||^2
template <class NetA, class NetB, class S>
double preservation_loss(const NetA& sanitized, const NetB& frozen, std::span<const S> c_adv,
                         const Tensor<S>& z_t, int t) {
    Tensor<S> a = sanitized.eval(z_t, c_adv, t);
    Tensor<S> b = frozen.eval(z_t, c_adv, t);
    return sum_squared_diff(a.span(), b.span());
}

// Preservation loss plus its gradient w.r.t. the shared conditioning
// embedding. Both nets see c, so both contribute to dc.
template <class S>
double preservation_loss_grad_c(const Denoiser<S>& sanitized, const Denoiser<S>& frozen,
                                std::span<const S> c, const Tensor<S>& z_t, int t,
                                DenoiserWorkspace<S>& ws1, DenoiserWorkspace<S>& ws2,
                                std::span<S> dc) {
    sanitized.forward(z_t, c, t, ws1);
    frozen.forward(z_t, c, t, ws2);
    double loss = sum_squared_diff(ws1.out.span(), ws2.out.span());
    Tensor<S> dout(ws1.out.dims);
    for (std::size_t i = 0; i < dout.size(); ++i)
        dout.data[i] = S(2) * (ws1.out.data[i] - ws2.out.data[i]);
    std::fill(dc.begin(), dc.end(), S(0));
    sanitized.backward(dout, c, ws1, {}, dc);
    for (auto& v : dout.data)
        v = -v;
    frozen.backward(dout, c, ws2, {}, dc);
    return loss;
}

// ---------------------------------------------------------------------------
// Inner maximization

// Continuous ascent initialized at the erased concept's embedding. The result
// is generally off-vocabulary; fresh state per step.
template <class S>
std::vector<S> find_adversarial_concept_pgd(const Denoiser<S>& sanitized,
                                            const Denoiser<S>& frozen, std::span<const S> c_start,
                                            double eta, int iters,
                                            const DiffusionSchedule& sched, int t_min, int t_max,
                                            Pcg32& rng, std::vector<double>* inner_l2 = nullptr,
                                            DenoiserWorkspace<S>* ws1p = nullptr,
                                            DenoiserWorkspace<S>* ws2p = nullptr) {
    std::vector<S> c(c_start.begin(), c_start.end());
    std::vector<S> dc(c.size());
    std::optional<DenoiserWorkspace<S>> own1, own2;
    if (!ws1p)
        ws1p = &own1.emplace(sanitized.make_workspace());
    if (!ws2p)
        ws2p = &own2.emplace(frozen.make_workspace());
    DenoiserWorkspace<S>& ws1 = *ws1p;
    DenoiserWorkspace<S>& ws2 = *ws2p;
    std::vector<int> dims{sanitized.arch.img_channels, sanitized.arch.canvas,
                          sanitized.arch.canvas};
    for (int i = 0; i < iters; ++i) {
        auto [zt, t] = make_inner_state(DenoiserRef<S>{&sanitized, &ws1},
                                        std::span<const S>(c.data(), c.size()), dims, sched,
                                        t_min, t_max, rng);
        double l2 = preservation_loss_grad_c(sanitized, frozen,
                                             std::span<const S>(c.data(), c.size()), zt, t, ws1,
                                             ws2, std::span<S>(dc.data(), dc.size()));
        if (inner_l2)
            inner_l2->push_back(l2);
        if (!all_finite(std::span<const S>(dc.data(), dc.size())))
            throw std::runtime_error("pgd search: non-finite gradient at inner step " +
                                     std::to_string(i));
        axpy(eta, std::span<const S>(dc.data(), dc.size()), std::span<S>(c.data(), c.size()));
    }
    return c;
}

struct GumbelSearchResult {
    int ca_id = -1;
    SimplexState state;
    std::vector<double> inner_l2;
};

// Stochastic ascent on simplex logits (soft samples), then a hard draw picks
// the reported concept. Fresh gumbel noise and fresh state every inner step.
template <class S>
GumbelSearchResult find_adversarial_concept_gumbel(
    const Denoiser<S>& sanitized, const Denoiser<S>& frozen, const VocabularyT<S>& vocab,
    std::span<const int> restricted_ids, double eta, int iters, double tau,
    const DiffusionSchedule& sched, int t_min, int t_max, Pcg32& rng,
    std::vector<double> warm_logits = {}, DenoiserWorkspace<S>* ws1p = nullptr,
    DenoiserWorkspace<S>* ws2p = nullptr) {
    if (restricted_ids.empty())
        throw std::invalid_argument("gumbel search: empty restricted set");
    GumbelSearchResult res;
    res.state = make_simplex_state({restricted_ids.begin(), restricted_ids.end()}, tau);
    if (!warm_logits.empty()) {
        if (warm_logits.size() != res.state.logits.size())
            throw std::invalid_argument("gumbel search: warm logits size mismatch");
        res.state.logits = std::move(warm_logits);
    }
    std::optional<DenoiserWorkspace<S>> own1, own2;
    if (!ws1p)
        ws1p = &own1.emplace(sanitized.make_workspace());
    if (!ws2p)
        ws2p = &own2.emplace(frozen.make_workspace());
    DenoiserWorkspace<S>& ws1 = *ws1p;
    DenoiserWorkspace<S>& ws2 = *ws2p;
    std::vector<int> dims{sanitized.arch.img_channels, sanitized.arch.canvas,
                          sanitized.arch.canvas};
    std::vector<S> dc(static_cast<std::size_t>(vocab.dim));
    for (int i = 0; i < iters; ++i) {
        std::vector<double> w = gumbel_softmax_sample(res.state, rng, false);
        std::vector<S> cmix = mix_embeddings(std::span<const double>(w), vocab,
                                             std::span<const int>(res.state.concept_ids));
        auto [zt, t] = make_inner_state(DenoiserRef<S>{&sanitized, &ws1},
                                        std::span<const S>(cmix.data(), cmix.size()), dims,
                                        sched, t_min, t_max, rng);
        double l2 = preservation_loss_grad_c(sanitized, frozen,
                                             std::span<const S>(cmix.data(), cmix.size()), zt, t,
                                             ws1, ws2, std::span<S>(dc.data(), dc.size()));
        res.inner_l2.push_back(l2);
        std::vector<double> dw = mix_embeddings_backward(std::span<const S>(dc.data(), dc.size()),
                                                         vocab,
                                                         std::span<const int>(res.state.concept_ids));
        std::vector<double> dl = gumbel_softmax_backward(std::span<const double>(w),
                                                         std::span<const double>(dw), tau);
        bool finite = true;
        for (double v : dl)
            finite &= std::isfinite(v);
        if (!finite)
            throw std::runtime_error("gumbel search: non-finite gradient at inner step " +
                                     std::to_string(i));
        for (std::size_t j = 0; j < dl.size(); ++j)
            res.state.logits[j] += eta * dl[j];
    }
    std::vector<double> w = gumbel_softmax_sample(res.state, rng, true);
    for (std::size_t j = 0; j < w.size(); ++j)
        if (w[j] == 1.0)
            res.ca_id = res.state.concept_ids[j];
    return res;
}

// ---------------------------------------------------------------------------
// Outer minimization (the full fine-tuning loop)

template <class S>
struct EraseResult {
    Denoiser<S> model;
    ErasureTrace trace;
    bool diverged = false;
    int completed_steps = 0;
};

template <class S>
int nearest_concept_id(std::span<const S> c, const VocabularyT<S>& vocab) {
    int best = -1;
    double best_sim = -2;
    for (int id = 0; id < vocab.size(); ++id) {
        double sim = cosine_similarity(std::span<const S>(c), vocab.embedding(id));
        if (sim > best_sim) {
            best_sim = sim;
            best = id;
        }
    }
    return best;
}

// Fine-tunes a copy of `base` so the erase set's outputs collapse onto the
// neutral concept's, while the mode-specific preservation term pins the most
// affected remaining concept. `base` and the vocabulary are never modified.
template <class S>
EraseResult<S> erase(const Denoiser<S>& base, const VocabularyT<S>& vocab,
                     const ErasureConfig& cfg, const DiffusionSchedule& sched,
                     const std::function<void(const Denoiser<S>&, const TraceRecord&)>& on_snapshot =
                         nullptr) {
    cfg.validate(vocab, sched);
    if (!vocab.frozen)
        throw std::logic_error("erase: vocabulary must be frozen by base training first");

    EraseResult<S> res;
    res.model = base;
    Denoiser<S>& net = res.model;
    int t_max = cfg.t_max == 0 ? sched.steps : cfg.t_max;

    std::vector<int> restricted;
    if (cfg.mode == EraseMode::adversarial_gumbel)
        restricted = restrict_search_space(vocab, std::span<const int>(cfg.erase_ids),
                                           cfg.search_top_k);

    auto ws1 = net.make_workspace();
    auto ws2 = base.make_workspace();
    std::vector<S> grad(net.param_count());
    std::vector<S> prev_params;
    Adam<S> opt(cfg.lr);
    std::vector<int> dims{net.arch.img_channels, net.arch.canvas, net.arch.canvas};
    std::vector<double> warm_logits;

    for (int k = 0; k < cfg.outer_steps; ++k) {
        TraceRecord rec;
        rec.step = k;
        rec.tau = anneal(cfg.tau0, k, cfg.outer_steps, cfg.tau_anneal);

        Pcg32 ce_rng = substream(cfg.seed, "erase.ce", static_cast<std::uint64_t>(k));
        rec.ce_id = cfg.erase_ids[ce_rng.below(static_cast<std::uint32_t>(cfg.erase_ids.size()))];

        // one state per outer step, shared by the erasing and preservation terms
        Pcg32 state_rng = substream(cfg.seed, "erase.state", static_cast<std::uint64_t>(k));
        auto [zt, t] = make_inner_state(DenoiserRef<S>{&net, &ws1}, vocab.embedding(rec.ce_id),
                                        dims, sched, cfg.t_min, t_max, state_rng);
        rec.t_used = t;

        // mode-specific adversarial concept
        std::vector<S> ca_emb;
        Pcg32 inner_rng = substream(cfg.seed, "erase.inner", static_cast<std::uint64_t>(k));
        switch (cfg.mode) {
        case EraseMode::naive:
            break;
        case EraseMode::fixed_anchor: {
            rec.ca_id = cfg.fixed_anchor_id;
            auto e = vocab.embedding(rec.ca_id);
            ca_emb.assign(e.begin(), e.end());
            break;
        }
        case EraseMode::adversarial_pgd: {
            ca_emb = find_adversarial_concept_pgd(net, base, vocab.embedding(rec.ce_id),
                                                  cfg.search_step, cfg.search_iters, sched,
                                                  cfg.t_min, t_max, inner_rng, &rec.inner_l2,
                                                  &ws1, &ws2);
            rec.ca_continuous = true;
            rec.ca_nearest_id =
                nearest_concept_id(std::span<const S>(ca_emb.data(), ca_emb.size()), vocab);
            break;
        }
        case EraseMode::adversarial_gumbel: {
            GumbelSearchResult gs = find_adversarial_concept_gumbel(
                net, base, vocab, std::span<const int>(restricted), cfg.search_step,
                cfg.search_iters, rec.tau, sched, cfg.t_min, t_max, inner_rng,
                cfg.warm_start ? warm_logits : std::vector<double>{}, &ws1, &ws2);
            rec.ca_id = gs.ca_id;
            rec.ca_nearest_id = gs.ca_id;
            rec.inner_l2 = std::move(gs.inner_l2);
            if (cfg.warm_start)
                warm_logits = gs.state.logits;
            auto e = vocab.embedding(rec.ca_id);
            ca_emb.assign(e.begin(), e.end());
            break;
        }
        }

        // combined gradient step on the sanitized parameters
        std::fill(grad.begin(), grad.end(), S(0));
        net.forward(zt, vocab.embedding(rec.ce_id), t, ws1);
        base.forward(zt, vocab.embedding(cfg.neutral_id), t, ws2);
        rec.outer_l1 = sum_squared_diff(ws1.out.span(), ws2.out.span());
        Tensor<S> dout(ws1.out.dims);
        for (std::size_t i = 0; i < dout.size(); ++i)
            dout.data[i] = S(2) * (ws1.out.data[i] - ws2.out.data[i]);
        net.backward(dout, vocab.embedding(rec.ce_id), ws1,
                     std::span<S>(grad.data(), grad.size()), {});

        if (!ca_emb.empty()) {
            std::span<const S> ca(ca_emb.data(), ca_emb.size());
            net.forward(zt, ca, t, ws1);
            base.forward(zt, ca, t, ws2);
            rec.outer_l2 = sum_squared_diff(ws1.out.span(), ws2.out.span());
            if (cfg.preserve_weight != 0) {
                for (std::size_t i = 0; i < dout.size(); ++i)
                    dout.data[i] = S(2 * cfg.preserve_weight) * (ws1.out.data[i] - ws2.out.data[i]);
                net.backward(dout, ca, ws1, std::span<S>(grad.data(), grad.size()), {});
            }
        }

        double total = rec.outer_l1 +
                       (std::isnan(rec.outer_l2) ? 0.0 : cfg.preserve_weight * rec.outer_l2);
        if (!std::isfinite(total) || !all_finite(std::span<const S>(grad.data(), grad.size()))) {
            res.diverged = true;
            res.completed_steps = k;
            res.trace.records.push_back(std::move(rec));
            return res;
        }

        prev_params = net.params;
        opt.step(std::span<S>(net.params.data(), net.params.size()),
                 std::span<const S>(grad.data(), grad.size()));
        if (!all_finite(std::span<const S>(net.params.data(), net.params.size()))) {
            net.params = prev_params; // keep the last finite state
            res.diverged = true;
            res.completed_steps = k;
            res.trace.records.push_back(std::move(rec));
            return res;
        }

        if (on_snapshot && cfg.snapshot_every > 0 &&
            (k % cfg.snapshot_every == 0 || k + 1 == cfg.outer_steps))
            on_snapshot(net, rec);
        res.trace.records.push_back(std::move(rec));
    }
    res.completed_steps = cfg.outer_steps;
    return res;
}

} // namespace eraselab
