#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "eraselab/nn.hpp"
#include "eraselab/optim.hpp"
#include "eraselab/rng.hpp"
#include "eraselab/tensor.hpp"
#include "eraselab/threading.hpp"
#include "eraselab/toyworld.hpp"

namespace eraselab {

struct UnscorableConceptError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Maps vocabulary ids onto the scorer's class space. Only grounded concepts
// (shape, color, composite) are scorable.
struct ConceptClassMap {
    std::vector<ConceptKind> kind;
    std::vector<int> shape_class; // -1 when not applicable
    std::vector<int> color_class;

    template <class S>
    static ConceptClassMap build(const VocabularyT<S>& vocab) {
        ConceptClassMap m;
        int n = vocab.size();
        m.kind.resize(static_cast<std::size_t>(n));
        m.shape_class.assign(static_cast<std::size_t>(n), -1);
        m.color_class.assign(static_cast<std::size_t>(n), -1);
        auto shape_index = [](const std::string& tok) {
            for (int i = 0; i < 5; ++i)
                if (tok == shape_names()[static_cast<std::size_t>(i)])
                    return i;
            return -1;
        };
        auto color_index = [](const std::string& tok) {
            for (int i = 0; i < 5; ++i)
                if (tok == color_names()[static_cast<std::size_t>(i)])
                    return i;
            return -1;
        };
        for (const auto& c : vocab.concepts) {
            m.kind[static_cast<std::size_t>(c.id)] = c.kind;
            if (c.kind == ConceptKind::shape) {
                m.shape_class[static_cast<std::size_t>(c.id)] = shape_index(c.token);
            } else if (c.kind == ConceptKind::color) {
                m.color_class[static_cast<std::size_t>(c.id)] = color_index(c.token);
            } else if (c.kind == ConceptKind::composite) {
                auto sp = c.token.find(' ');
                if (sp == std::string::npos)
                    throw std::invalid_argument("composite token without space: " + c.token);
                m.color_class[static_cast<std::size_t>(c.id)] = color_index(c.token.substr(0, sp));
                m.shape_class[static_cast<std::size_t>(c.id)] = shape_index(c.token.substr(sp + 1));
            }
        }
        for (const auto& c : vocab.concepts) {
            auto i = static_cast<std::size_t>(c.id);
            bool need_shape = c.kind == ConceptKind::shape || c.kind == ConceptKind::composite;
            bool need_color = c.kind == ConceptKind::color || c.kind == ConceptKind::composite;
            if ((need_shape && m.shape_class[i] < 0) || (need_color && m.color_class[i] < 0))
                throw std::invalid_argument("unmapped grounded token: " + c.token);
        }
        return m;
    }

    bool scorable(int id) const { return is_grounded(kind[static_cast<std::size_t>(id)]); }
};

// Two-headed conv classifier over rendered scenes: one softmax over shapes,
// one over colors. phi() is the pooled penultimate feature vector that the
// sensitivity spectrum measures drift in.
template <class S>
class AlignmentScorerT {
  public:
    static constexpr int kC1 = 8, kC2 = 16, kC3 = 32, kClasses = 5;
    int canvas = 16;
    std::vector<S> params;
    double holdout_accuracy = 0;

    struct Layout {
        std::size_t c1_w, c1_b, c2_w, c2_b, c3_w, c3_b;
        std::size_t shape_w, shape_b, color_w, color_b;
        std::size_t total;
    };

    explicit AlignmentScorerT(int canvas_ = 16) : canvas(canvas_) {
        std::size_t off = 0;
        auto alloc = [&off](std::size_t n) {
            std::size_t o = off;
            off += n;
            return o;
        };
        lay_.c1_w = alloc(std::size_t(kC1) * 3 * 9);
        lay_.c1_b = alloc(kC1);
        lay_.c2_w = alloc(std::size_t(kC2) * kC1 * 9);
        lay_.c2_b = alloc(kC2);
        lay_.c3_w = alloc(std::size_t(kC3) * kC2 * 9);
        lay_.c3_b = alloc(kC3);
        lay_.shape_w = alloc(std::size_t(kClasses) * kC3);
        lay_.shape_b = alloc(kClasses);
        lay_.color_w = alloc(std::size_t(kClasses) * kC3);
        lay_.color_b = alloc(kClasses);
        lay_.total = off;
        params.assign(lay_.total, S(0));
    }

    const Layout& layout() const { return lay_; }
    std::size_t param_count() const { return lay_.total; }
    int feature_dim() const { return kC3; }

    void init(Pcg32& rng) {
        auto blk = [this](std::size_t off, std::size_t n) {
            return std::span<S>(params.data() + off, n);
        };
        init_normal(blk(lay_.c1_w, std::size_t(kC1) * 3 * 9), std::sqrt(2.0 / (3 * 9)), rng);
        init_normal(blk(lay_.c2_w, std::size_t(kC2) * kC1 * 9), std::sqrt(2.0 / (kC1 * 9)), rng);
        init_normal(blk(lay_.c3_w, std::size_t(kC3) * kC2 * 9), std::sqrt(2.0 / (kC2 * 9)), rng);
        init_normal(blk(lay_.shape_w, std::size_t(kClasses) * kC3), std::sqrt(1.0 / kC3), rng);
        init_normal(blk(lay_.color_w, std::size_t(kClasses) * kC3), std::sqrt(1.0 / kC3), rng);
    }

    struct Output {
        std::array<double, 5> shape_probs{};
        std::array<double, 5> color_probs{};
        std::vector<double> feature; // pooled activations, feature_dim() long
    };

    struct Cache {
        Tensor<S> h1p, h1, h2p, h2, h3p, h3;
        std::vector<S> feat, shape_logits, color_logits;
        std::vector<S> cols, dcols;
        Tensor<S> g1, g2, g3;
        explicit Cache(int hw) {
            int h2w = hw / 2, h4w = hw / 4;
            h1p = Tensor<S>({kC1, hw, hw});
            h1 = Tensor<S>({kC1, hw, hw});
            h2p = Tensor<S>({kC2, h2w, h2w});
            h2 = Tensor<S>({kC2, h2w, h2w});
            h3p = Tensor<S>({kC3, h4w, h4w});
            h3 = Tensor<S>({kC3, h4w, h4w});
            feat.resize(kC3);
            shape_logits.resize(kClasses);
            color_logits.resize(kClasses);
            cols.resize(std::size_t(kC2) * 9 * hw * hw);
            dcols.resize(std::size_t(kC2) * 9 * hw * hw);
            g1 = Tensor<S>({kC1, hw, hw});
            g2 = Tensor<S>({kC2, h2w, h2w});
            g3 = Tensor<S>({kC3, h4w, h4w});
        }
    };

    void forward(const S* img, Cache& c) const {
        int hw = canvas, h2w = hw / 2, h4w = hw / 4;
        conv3x3_forward(img, 3, hw, hw, p(lay_.c1_w), p(lay_.c1_b), kC1, 1, c.cols.data(),
                        c.h1.ptr());
        silu_forward(c.h1.ptr(), c.h1.size(), c.h1p.ptr());
        conv3x3_forward(c.h1.ptr(), kC1, hw, hw, p(lay_.c2_w), p(lay_.c2_b), kC2, 2,
                        c.cols.data(), c.h2.ptr());
        silu_forward(c.h2.ptr(), c.h2.size(), c.h2p.ptr());
        conv3x3_forward(c.h2.ptr(), kC2, h2w, h2w, p(lay_.c3_w), p(lay_.c3_b), kC3, 2,
                        c.cols.data(), c.h3.ptr());
        silu_forward(c.h3.ptr(), c.h3.size(), c.h3p.ptr());
        int sp = h4w * h4w;
        for (int ch = 0; ch < kC3; ++ch) {
            double s = 0;
            for (int i = 0; i < sp; ++i)
                s += double(c.h3.ptr()[std::size_t(ch) * sp + i]);
            c.feat[std::size_t(ch)] = static_cast<S>(s / sp);
        }
        linear_forward(c.feat.data(), kC3, p(lay_.shape_w), p(lay_.shape_b), kClasses,
                       c.shape_logits.data());
        linear_forward(c.feat.data(), kC3, p(lay_.color_w), p(lay_.color_b), kClasses,
                       c.color_logits.data());
    }

    Output score(std::span<const S> img) const {
        if (static_cast<int>(img.size()) != 3 * canvas * canvas)
            throw std::invalid_argument("scorer: image size mismatch");
        Cache c(canvas);
        forward(img.data(), c);
        Output o;
        std::array<double, 5> sl{}, cl{};
        for (int i = 0; i < kClasses; ++i) {
            sl[std::size_t(i)] = double(c.shape_logits[std::size_t(i)]);
            cl[std::size_t(i)] = double(c.color_logits[std::size_t(i)]);
        }
        softmax(std::span<const double>(sl), std::span<double>(o.shape_probs));
        softmax(std::span<const double>(cl), std::span<double>(o.color_probs));
        o.feature.assign(c.feat.begin(), c.feat.end());
        return o;
    }

    // Cross-entropy against (possibly soft) shape/color targets; accumulates
    // parameter gradients. Returns the summed CE of both heads.
    double train_backward(const S* img, std::span<const double> shape_target,
                          std::span<const double> color_target, Cache& c,
                          std::span<S> grad) const {
        forward(img, c);
        int hw = canvas, h2w = hw / 2, h4w = hw / 4, sp = h4w * h4w;
        std::array<double, 5> sl{}, cl{}, sp_probs{}, cp_probs{};
        for (int i = 0; i < kClasses; ++i) {
            sl[std::size_t(i)] = double(c.shape_logits[std::size_t(i)]);
            cl[std::size_t(i)] = double(c.color_logits[std::size_t(i)]);
        }
        softmax(std::span<const double>(sl), std::span<double>(sp_probs));
        softmax(std::span<const double>(cl), std::span<double>(cp_probs));
        double loss = 0;
        std::vector<S> dshape(kClasses), dcolor(kClasses);
        for (int i = 0; i < kClasses; ++i) {
            loss -= shape_target[std::size_t(i)] * std::log(std::max(sp_probs[std::size_t(i)], 1e-12));
            loss -= color_target[std::size_t(i)] * std::log(std::max(cp_probs[std::size_t(i)], 1e-12));
            dshape[std::size_t(i)] = static_cast<S>(sp_probs[std::size_t(i)] - shape_target[std::size_t(i)]);
            dcolor[std::size_t(i)] = static_cast<S>(cp_probs[std::size_t(i)] - color_target[std::size_t(i)]);
        }
        std::vector<S> dfeat(kC3, S(0));
        linear_backward(c.feat.data(), kC3, p(lay_.shape_w), kClasses, dshape.data(),
                        grad.data() + lay_.shape_w, grad.data() + lay_.shape_b, dfeat.data());
        linear_backward(c.feat.data(), kC3, p(lay_.color_w), kClasses, dcolor.data(),
                        grad.data() + lay_.color_w, grad.data() + lay_.color_b, dfeat.data());
        // GAP backward
        for (int ch = 0; ch < kC3; ++ch) {
            S g = static_cast<S>(double(dfeat[std::size_t(ch)]) / sp);
            for (int i = 0; i < sp; ++i)
                c.g3.ptr()[std::size_t(ch) * sp + i] = g;
        }
        silu_backward(c.h3p.ptr(), c.g3.ptr(), c.h3.size());
        conv3x3_backward(c.h2.ptr(), kC2, h2w, h2w, p(lay_.c3_w), kC3, 2, c.g3.ptr(),
                         c.cols.data(), grad.data() + lay_.c3_w, grad.data() + lay_.c3_b,
                         c.g2.ptr(), c.dcols.data());
        silu_backward(c.h2p.ptr(), c.g2.ptr(), c.h2.size());
        conv3x3_backward(c.h1.ptr(), kC1, hw, hw, p(lay_.c2_w), kC2, 2, c.g2.ptr(),
                         c.cols.data(), grad.data() + lay_.c2_w, grad.data() + lay_.c2_b,
                         c.g1.ptr(), c.dcols.data());
        silu_backward(c.h1p.ptr(), c.g1.ptr(), c.h1.size());
        conv3x3_backward(img, 3, hw, hw, p(lay_.c1_w), kC1, 1, c.g1.ptr(), c.cols.data(),
                         grad.data() + lay_.c1_w, grad.data() + lay_.c1_b, nullptr,
                         c.dcols.data());
        return loss;
    }

  private:
    Layout lay_{};
    const S* p(std::size_t off) const { return params.data() + off; }
};

using AlignmentScorer = AlignmentScorerT<float>;

// S(x, c): head posterior for shape/color concepts, product of the parts for
// composites. Neutral and distractor concepts have no score.
template <class S>
double concept_score(const AlignmentScorerT<S>& scorer, const typename AlignmentScorerT<S>::Output& out,
                     int concept_id, const ConceptClassMap& map) {
    (void)scorer;
    if (!map.scorable(concept_id))
        throw UnscorableConceptError("unscorable concept id " + std::to_string(concept_id) +
                                     " (" + kind_name(map.kind[std::size_t(concept_id)]) + ")");
    ConceptKind k = map.kind[std::size_t(concept_id)];
    int sc = map.shape_class[std::size_t(concept_id)];
    int cc = map.color_class[std::size_t(concept_id)];
    if (k == ConceptKind::shape)
        return out.shape_probs[std::size_t(sc)];
    if (k == ConceptKind::color)
        return out.color_probs[std::size_t(cc)];
    return out.shape_probs[std::size_t(sc)] * out.color_probs[std::size_t(cc)];
}

struct ScorerTrainConfig {
    int steps = 500;
    int batch = 64;
    double lr = 1e-3;
    double holdout_frac = 0.1;
    double blank_frac = 0.08;      // background-only examples with uniform targets
    double noise_max = 0.10;       // pixel noise augmentation, uniform in [0, max]
    double min_holdout_accuracy = 0.95;
    int threads = 0;
    int log_every = 0;
};

// accuracy = both heads top-1 correct
template <class S>
double scorer_accuracy(const AlignmentScorerT<S>& scorer, const DatasetT<S>& ds,
                       std::span<const int> indices, int threads = 0) {
    std::vector<int> hit(indices.size());
    parallel_for(indices.size(), [&](std::size_t i) {
        int ex = indices[i];
        auto out = scorer.score(ds.image(ex));
        int ps = static_cast<int>(std::max_element(out.shape_probs.begin(), out.shape_probs.end()) -
                                  out.shape_probs.begin());
        int pc = static_cast<int>(std::max_element(out.color_probs.begin(), out.color_probs.end()) -
                                  out.color_probs.begin());
        hit[i] = (ps == ds.pairs[std::size_t(ex)][0] && pc == ds.pairs[std::size_t(ex)][1]) ? 1 : 0;
    }, threads);
    double acc = 0;
    for (int h : hit)
        acc += h;
    return indices.empty() ? 0.0 : acc / double(indices.size());
}

template <class S>
AlignmentScorerT<S> train_scorer(const DatasetT<S>& ds, const WorldSpec& world,
                                 const ScorerTrainConfig& cfg, std::uint64_t seed) {
    if (ds.size() < 10)
        throw std::invalid_argument("train_scorer: dataset too small");
    AlignmentScorerT<S> scorer(ds.canvas);
    Pcg32 init_rng = substream(seed, "scorer.init");
    scorer.init(init_rng);

    // deterministic holdout split
    std::vector<int> perm(static_cast<std::size_t>(ds.size()));
    std::iota(perm.begin(), perm.end(), 0);
    Pcg32 shuffle_rng = substream(seed, "scorer.split");
    for (std::size_t i = perm.size(); i > 1; --i)
        std::swap(perm[i - 1], perm[shuffle_rng.below(static_cast<std::uint32_t>(i))]);
    std::size_t n_hold = static_cast<std::size_t>(std::max(1.0, cfg.holdout_frac * ds.size()));
    std::vector<int> hold(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_hold));
    std::vector<int> train(perm.begin() + static_cast<std::ptrdiff_t>(n_hold), perm.end());

    int threads = cfg.threads > 0 ? cfg.threads : default_thread_count();
    int chunks = std::min(8, cfg.batch);
    std::size_t np = scorer.param_count();
    std::vector<std::vector<S>> grads(static_cast<std::size_t>(chunks), std::vector<S>(np));
    std::vector<typename AlignmentScorerT<S>::Cache> caches;
    for (int i = 0; i < chunks; ++i)
        caches.emplace_back(ds.canvas);
    Adam<S> opt(cfg.lr);
    int hw = ds.canvas;
    std::size_t img_n = std::size_t(3) * hw * hw;

    for (int step = 0; step < cfg.steps; ++step) {
        for (auto& g : grads)
            std::fill(g.begin(), g.end(), S(0));
        parallel_for(static_cast<std::size_t>(chunks), [&](std::size_t ch) {
            std::vector<S> img(img_n);
            std::array<double, 5> ts{}, tc{};
            for (int j = static_cast<int>(ch); j < cfg.batch; j += chunks) {
                Pcg32 rng = substream(seed, "scorer.example",
                                      static_cast<std::uint64_t>(step) * cfg.batch + j);
                bool blank = rng.uniform() < cfg.blank_frac;
                if (blank) {
                    double bg = world.bg_min + (world.bg_max - world.bg_min) * rng.uniform();
                    std::fill(img.begin(), img.end(), static_cast<S>(2.0 * bg - 1.0));
                    ts.fill(0.2);
                    tc.fill(0.2);
                } else {
                    int ex = train[rng.below(static_cast<std::uint32_t>(train.size()))];
                    auto src = ds.image(ex);
                    std::copy(src.begin(), src.end(), img.begin());
                    ts.fill(0.0);
                    tc.fill(0.0);
                    ts[std::size_t(ds.pairs[std::size_t(ex)][0])] = 1.0;
                    tc[std::size_t(ds.pairs[std::size_t(ex)][1])] = 1.0;
                }
                double sigma = cfg.noise_max * rng.uniform();
                if (sigma > 0)
                    for (auto& v : img)
                        v = std::clamp(static_cast<S>(v + sigma * rng.gaussian()), S(-1), S(1));
                scorer.train_backward(img.data(), std::span<const double>(ts),
                                      std::span<const double>(tc), caches[ch],
                                      std::span<S>(grads[ch].data(), np));
            }
        }, threads);
        for (int ch = 1; ch < chunks; ++ch)
            axpy(1.0, std::span<const S>(grads[std::size_t(ch)].data(), np),
                 std::span<S>(grads[0].data(), np));
        for (auto& g : grads[0])
            g = static_cast<S>(double(g) / cfg.batch);
        opt.step(std::span<S>(scorer.params.data(), np), std::span<const S>(grads[0].data(), np));
        if (cfg.log_every > 0 && (step + 1) % cfg.log_every == 0)
            std::fprintf(stderr, "[train_scorer] step %d/%d\n", step + 1, cfg.steps);
    }

    scorer.holdout_accuracy = scorer_accuracy(scorer, ds, std::span<const int>(hold), threads);
    if (scorer.holdout_accuracy < cfg.min_holdout_accuracy)
        throw std::runtime_error("train_scorer: holdout accuracy " +
                                 std::to_string(scorer.holdout_accuracy) + " below required " +
                                 std::to_string(cfg.min_holdout_accuracy));
    return scorer;
}

} // namespace eraselab
