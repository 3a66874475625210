#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "eraselab/nn.hpp"
#include "eraselab/rng.hpp"
#include "eraselab/toyworld.hpp"

namespace eraselab {

// Relaxed categorical state over a restricted concept set: logits on the
// simplex plus a temperature. The inner maximization of the erasure loop
// ascends these logits.
struct SimplexState {
    std::vector<double> logits;      // one per restricted concept
    std::vector<int> concept_ids;    // the restricted set this indexes
    double temperature = 1.0;

    int size() const { return static_cast<int>(concept_ids.size()); }

    void validate() const {
        if (concept_ids.empty() || logits.size() != concept_ids.size())
            throw std::invalid_argument("simplex state: logits/ids size mismatch");
        if (!(temperature > 0))
            throw std::invalid_argument("simplex state: temperature must be > 0");
    }

    std::vector<double> weights() const {
        validate();
        std::vector<double> w(logits.size());
        softmax(std::span<const double>(logits), std::span<double>(w));
        return w;
    }
};

inline SimplexState make_simplex_state(std::vector<int> concept_ids, double temperature) {
    SimplexState s;
    s.concept_ids = std::move(concept_ids);
    s.logits.assign(s.concept_ids.size(), 0.0);
    s.temperature = temperature;
    s.validate();
    return s;
}

// w = softmax((logits + g) / tau) with g standard Gumbel. When hard, the
// result is the one-hot argmax of the soft weights (straight-through: the
// gradient contract stays that of the soft weights). The raw gumbel noise is
// returned via *noise_out when non-null so gradient code can replay it.
inline std::vector<double> gumbel_softmax_sample(const SimplexState& state, Pcg32& rng,
                                                 bool hard = false,
                                                 std::vector<double>* noise_out = nullptr) {
    state.validate();
    std::size_t n = state.logits.size();
    std::vector<double> pert(n);
    if (noise_out)
        noise_out->resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        double g = rng.gumbel();
        if (noise_out)
            (*noise_out)[i] = g;
        pert[i] = (state.logits[i] + g) / state.temperature;
    }
    std::vector<double> w(n);
    softmax(std::span<const double>(pert), std::span<double>(w));
    if (hard) {
        std::size_t arg = static_cast<std::size_t>(
            std::max_element(w.begin(), w.end()) - w.begin());
        std::fill(w.begin(), w.end(), 0.0);
        w[arg] = 1.0;
    }
    return w;
}

// soft weights for fixed, already-drawn noise (deterministic replay path)
inline std::vector<double> gumbel_softmax_with_noise(const SimplexState& state,
                                                     std::span<const double> noise) {
    state.validate();
    if (noise.size() != state.logits.size())
        throw std::invalid_argument("gumbel_softmax_with_noise: noise size mismatch");
    std::vector<double> pert(noise.size());
    for (std::size_t i = 0; i < noise.size(); ++i)
        pert[i] = (state.logits[i] + noise[i]) / state.temperature;
    std::vector<double> w(noise.size());
    softmax(std::span<const double>(pert), std::span<double>(w));
    return w;
}

// d(weights)/d(logits) applied to an upstream gradient:
//   dL/drho_j = (1/tau) * w_j * (dL/dw_j - sum_i w_i dL/dw_i)
inline std::vector<double> gumbel_softmax_backward(std::span<const double> weights,
                                                   std::span<const double> dweights,
                                                   double temperature) {
    if (weights.size() != dweights.size())
        throw std::invalid_argument("gumbel_softmax_backward: size mismatch");
    double inner = 0;
    for (std::size_t i = 0; i < weights.size(); ++i)
        inner += weights[i] * dweights[i];
    std::vector<double> dl(weights.size());
    for (std::size_t i = 0; i < weights.size(); ++i)
        dl[i] = weights[i] * (dweights[i] - inner) / temperature;
    return dl;
}

// c = sum_i w_i * embedding(ids[i]); an exact one-hot returns that concept's
// embedding row bitwise.
template <class S>
std::vector<S> mix_embeddings(std::span<const double> w, const VocabularyT<S>& vocab,
                              std::span<const int> concept_ids) {
    if (w.size() != concept_ids.size())
        throw std::invalid_argument("mix_embeddings: weights/ids length mismatch");
    if (w.empty())
        throw std::invalid_argument("mix_embeddings: empty mixture");
    for (std::size_t i = 0; i < w.size(); ++i)
        if (w[i] == 1.0) {
            bool one_hot = true;
            for (std::size_t j = 0; j < w.size(); ++j)
                if (j != i && w[j] != 0.0)
                    one_hot = false;
            if (one_hot) {
                auto e = vocab.embedding(concept_ids[i]);
                return std::vector<S>(e.begin(), e.end());
            }
        }
    std::vector<S> c(static_cast<std::size_t>(vocab.dim), S(0));
    for (std::size_t i = 0; i < w.size(); ++i) {
        auto e = vocab.embedding(concept_ids[i]);
        for (int j = 0; j < vocab.dim; ++j)
            c[static_cast<std::size_t>(j)] += static_cast<S>(w[i] * static_cast<double>(e[static_cast<std::size_t>(j)]));
    }
    return c;
}

// dL/dw_i = embedding(ids[i]) . dL/dc
template <class S>
std::vector<double> mix_embeddings_backward(std::span<const S> dc, const VocabularyT<S>& vocab,
                                            std::span<const int> concept_ids) {
    std::vector<double> dw(concept_ids.size());
    for (std::size_t i = 0; i < concept_ids.size(); ++i)
        dw[i] = dot(vocab.embedding(concept_ids[i]), dc);
    return dw;
}

// Restricted search space: the K concepts of C \ E most similar to the erase
// set, ranked by max-over-E embedding cosine (descending, ties by ascending
// id). K larger than |C \ E| clamps.
template <class S>
std::vector<int> restrict_search_space(const VocabularyT<S>& vocab,
                                       std::span<const int> erase_ids, int k) {
    if (k < 1)
        throw std::invalid_argument("restrict_search_space: K must be >= 1");
    if (erase_ids.empty())
        throw std::invalid_argument("restrict_search_space: empty erase set");
    std::vector<bool> erased(static_cast<std::size_t>(vocab.size()), false);
    for (int id : erase_ids) {
        if (id < 0 || id >= vocab.size())
            throw std::out_of_range("restrict_search_space: bad erase id");
        erased[static_cast<std::size_t>(id)] = true;
    }
    std::vector<std::pair<double, int>> ranked;
    for (int id = 0; id < vocab.size(); ++id) {
        if (erased[static_cast<std::size_t>(id)])
            continue;
        double best = -2.0;
        for (int e : erase_ids)
            best = std::max(best, cosine_similarity(vocab.embedding(id), vocab.embedding(e)));
        ranked.emplace_back(best, id);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first)
            return a.first > b.first;
        return a.second < b.second;
    });
    std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), ranked.size());
    std::vector<int> out;
    out.reserve(take);
    for (std::size_t i = 0; i < take; ++i)
        out.push_back(ranked[i].second);
    return out;
}

enum class AnnealKind { constant, exponential };

inline AnnealKind anneal_from_name(const std::string& s) {
    if (s == "constant") return AnnealKind::constant;
    if (s == "exponential") return AnnealKind::exponential;
    throw std::invalid_argument("unknown anneal kind: " + s);
}

inline constexpr double kAnnealFloor = 0.1;

inline double anneal(double tau0, int step, int total_steps, AnnealKind kind) {
    if (!(tau0 > 0))
        throw std::invalid_argument("anneal: tau0 must be > 0");
    if (kind == AnnealKind::constant)
        return tau0;
    if (total_steps <= 0)
        return tau0;
    double frac = std::clamp(double(step) / double(total_steps), 0.0, 1.0);
    return tau0 * std::pow(kAnnealFloor / tau0, frac);
}

} // namespace eraselab
