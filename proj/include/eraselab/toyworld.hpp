#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "eraselab/rng.hpp"
#include "eraselab/sha256.hpp"
#include "eraselab/tensor.hpp"
#include "eraselab/threading.hpp"

namespace eraselab {

enum class ConceptKind { shape, color, composite, neutral, distractor };

inline const char* kind_name(ConceptKind k) {
    switch (k) {
    case ConceptKind::shape: return "shape";
    case ConceptKind::color: return "color";
    case ConceptKind::composite: return "composite";
    case ConceptKind::neutral: return "neutral";
    case ConceptKind::distractor: return "distractor";
    }
    return "?";
}

inline ConceptKind kind_from_name(const std::string& s) {
    if (s == "shape") return ConceptKind::shape;
    if (s == "color") return ConceptKind::color;
    if (s == "composite") return ConceptKind::composite;
    if (s == "neutral") return ConceptKind::neutral;
    if (s == "distractor") return ConceptKind::distractor;
    throw std::invalid_argument("unknown concept kind: " + s);
}

struct Concept {
    int id = -1;
    std::string token;
    ConceptKind kind = ConceptKind::distractor;
};

inline bool is_grounded(ConceptKind k) {
    return k == ConceptKind::shape || k == ConceptKind::color || k == ConceptKind::composite;
}

// Conditioning vocabulary: tokens plus one learned embedding row per token.
// Embeddings are trainable until base training freezes them; every later
// stage treats them as read-only.
template <class S>
struct VocabularyT {
    std::vector<Concept> concepts;
    Tensor<S> embeddings; // [|C|, dim]
    int dim = 0;
    bool frozen = false;

    int size() const { return static_cast<int>(concepts.size()); }

    std::span<const S> embedding(int id) const {
        if (id < 0 || id >= size())
            throw std::out_of_range("vocabulary: bad concept id");
        return {embeddings.ptr() + static_cast<std::size_t>(id) * dim, static_cast<std::size_t>(dim)};
    }
    std::span<S> embedding_mut(int id) {
        if (frozen)
            throw std::logic_error("vocabulary: embeddings are frozen");
        return {embeddings.ptr() + static_cast<std::size_t>(id) * dim, static_cast<std::size_t>(dim)};
    }

    int find(const std::string& token) const {
        for (const auto& c : concepts)
            if (c.token == token)
                return c.id;
        return -1;
    }
    int require(const std::string& token) const {
        int id = find(token);
        if (id < 0)
            throw std::invalid_argument("vocabulary: unknown token '" + token + "'");
        return id;
    }

    int neutral_id() const {
        for (const auto& c : concepts)
            if (c.kind == ConceptKind::neutral)
                return c.id;
        throw std::logic_error("vocabulary: no neutral concept");
    }

    std::vector<int> grounded_ids() const {
        std::vector<int> out;
        for (const auto& c : concepts)
            if (is_grounded(c.kind))
                out.push_back(c.id);
        return out;
    }

    // Content hash over tokens, kinds and embedding values (as f32 LE bytes).
    std::string hash() const {
        Sha256 h;
        for (const auto& c : concepts) {
            h.update(c.token);
            h.update("\x1f");
            h.update(kind_name(c.kind));
            h.update("\x1e");
        }
        for (S v : embeddings.data) {
            float f = static_cast<float>(v);
            h.update(&f, sizeof(f));
        }
        return h.hex_digest();
    }
};

using Vocabulary = VocabularyT<float>;

// ---------------------------------------------------------------------------
// Scenes and rendering

enum class Shape { circle, square, triangle, cross, bar };
enum class Color { red, green, blue, yellow, magenta };

inline const std::array<const char*, 5>& shape_names() {
    static const std::array<const char*, 5> n = {"circle", "square", "triangle", "cross", "bar"};
    return n;
}
inline const std::array<const char*, 5>& color_names() {
    static const std::array<const char*, 5> n = {"red", "green", "blue", "yellow", "magenta"};
    return n;
}

inline std::array<float, 3> color_rgb(Color c) {
    switch (c) {
    case Color::red: return {1, 0, 0};
    case Color::green: return {0, 1, 0};
    case Color::blue: return {0, 0, 1};
    case Color::yellow: return {1, 1, 0};
    case Color::magenta: return {1, 0, 1};
    }
    return {0, 0, 0};
}

struct SceneSpec {
    Shape shape = Shape::circle;
    Color color = Color::red;
    int row = 8, col = 8;       // object center, pixels
    int size = 4;               // radius-like half extent, pixels
    double background = 0.5;    // gray level in [0,1]
};

inline bool shape_mask(Shape s, int dr, int dc, int size) {
    int ar = std::abs(dr), ac = std::abs(dc);
    switch (s) {
    case Shape::circle:
        return dr * dr + dc * dc <= size * size;
    case Shape::square:
        return ar <= size && ac <= size;
    case Shape::triangle: // apex up, base width 2*size+1
        return ar <= size && ac <= (dr + size) / 2 && dr >= -size;
    case Shape::cross:
        return (ac <= 1 && ar <= size) || (ar <= 1 && ac <= size);
    case Shape::bar: // horizontal bar, 3 px tall
        return ar <= 1 && ac <= size;
    }
    return false;
}

// Deterministic binary-mask rasterization onto a uniform background.
// Pixel values live in [-1, 1] (0..1 intensities mapped by 2v-1).
template <class S = float>
Tensor<S> render_scene(const SceneSpec& spec, int height = 16, int width = 16) {
    if (spec.size < 2)
        throw std::invalid_argument("render_scene: size below minimum (size >= 2)");
    if (spec.row - spec.size < 0 || spec.row + spec.size > height - 1)
        throw std::invalid_argument("render_scene: object exceeds canvas rows [" +
                                    std::to_string(spec.size) + ", " +
                                    std::to_string(height - 1 - spec.size) + "], got row " +
                                    std::to_string(spec.row));
    if (spec.col - spec.size < 0 || spec.col + spec.size > width - 1)
        throw std::invalid_argument("render_scene: object exceeds canvas cols [" +
                                    std::to_string(spec.size) + ", " +
                                    std::to_string(width - 1 - spec.size) + "], got col " +
                                    std::to_string(spec.col));
    if (spec.background < 0 || spec.background > 1)
        throw std::invalid_argument("render_scene: background_level outside [0, 1]");

    Tensor<S> img({3, height, width});
    S bg = static_cast<S>(2.0 * spec.background - 1.0);
    img.fill(bg);
    auto rgb = color_rgb(spec.color);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            if (shape_mask(spec.shape, y - spec.row, x - spec.col, spec.size))
                for (int ch = 0; ch < 3; ++ch)
                    img.at(ch, y, x) = static_cast<S>(2.0 * rgb[ch] - 1.0);
    return img;
}

// ---------------------------------------------------------------------------
// World spec, correlation plan, vocabulary, dataset

// Sampling weights over (shape, color) pairs. Zero-weight pairs are held out
// of training entirely; their composite tokens still exist in the vocabulary.
struct CorrelationPlan {
    std::array<std::array<double, 5>, 5> weight{}; // [shape][color]

    static CorrelationPlan uniform() {
        CorrelationPlan p;
        for (auto& row : p.weight)
            row.fill(1.0);
        return p;
    }

    // Default entangled plan: "red" rides on several shapes, "cross" is rare
    // and appears only with red/green. That gives (a) positive shape-color
    // mutual information and (b) a small marginal share for cross, so the
    // neutral concept's marginal does not lean on it.
    static CorrelationPlan default_entangled() {
        CorrelationPlan p = uniform();
        p.weight[static_cast<int>(Shape::circle)][static_cast<int>(Color::red)] = 3.0;
        p.weight[static_cast<int>(Shape::square)][static_cast<int>(Color::red)] = 3.0;
        p.weight[static_cast<int>(Shape::cross)] = {1.0, 0.6, 0.0, 0.0, 0.0};
        return p;
    }

    double total() const {
        double t = 0;
        for (const auto& row : weight)
            for (double v : row)
                t += v;
        return t;
    }

    void validate() const {
        for (const auto& row : weight)
            for (double v : row)
                if (!(v >= 0) || !std::isfinite(v))
                    throw std::invalid_argument("correlation plan: weights must be finite and >= 0");
        if (total() <= 0)
            throw std::invalid_argument("correlation plan: all weights are zero");
    }

    // MI of the (shape, color) joint implied by the plan, in nats
    double mutual_information() const {
        validate();
        double t = total();
        std::array<double, 5> ps{}, pc{};
        for (int s = 0; s < 5; ++s)
            for (int c = 0; c < 5; ++c) {
                ps[s] += weight[s][c] / t;
                pc[c] += weight[s][c] / t;
            }
        double mi = 0;
        for (int s = 0; s < 5; ++s)
            for (int c = 0; c < 5; ++c) {
                double p = weight[s][c] / t;
                if (p > 0)
                    mi += p * std::log(p / (ps[s] * pc[c]));
            }
        return mi;
    }
};

struct WorldSpec {
    int canvas = 16;
    int min_size = 3, max_size = 5;
    double bg_min = 0.3, bg_max = 0.7;
    CorrelationPlan plan = CorrelationPlan::default_entangled();
};

inline std::string composite_token(int shape, int color) {
    return std::string(color_names()[color]) + " " + shape_names()[shape];
}

// Token order is fixed: shapes, colors, composites (shape-major), neutral,
// distractors. Concept id equals position.
template <class S = float>
VocabularyT<S> build_vocabulary(const WorldSpec& spec, int dim, int n_distractors,
                                std::uint64_t seed) {
    (void)spec;
    if (dim < 8)
        throw std::invalid_argument("build_vocabulary: embedding dim must be >= 8");
    if (n_distractors < 0)
        throw std::invalid_argument("build_vocabulary: n_distractors must be >= 0");
    VocabularyT<S> v;
    auto add = [&v](const std::string& tok, ConceptKind k) {
        if (v.find(tok) >= 0)
            throw std::invalid_argument("build_vocabulary: duplicate token '" + tok + "'");
        v.concepts.push_back({static_cast<int>(v.concepts.size()), tok, k});
    };
    for (const char* s : shape_names())
        add(s, ConceptKind::shape);
    for (const char* c : color_names())
        add(c, ConceptKind::color);
    for (int s = 0; s < 5; ++s)
        for (int c = 0; c < 5; ++c)
            add(composite_token(s, c), ConceptKind::composite);
    add("photo", ConceptKind::neutral);
    for (int i = 0; i < n_distractors; ++i)
        add("tok" + std::to_string(i), ConceptKind::distractor);

    v.dim = dim;
    v.embeddings = Tensor<S>({v.size(), dim});
    for (int id = 0; id < v.size(); ++id) {
        Pcg32 rng = substream(seed, "vocab.embedding", static_cast<std::uint64_t>(id));
        for (int j = 0; j < dim; ++j)
            v.embeddings[static_cast<std::size_t>(id) * dim + j] = static_cast<S>(rng.gaussian());
    }
    return v;
}

// One training example: pixels plus the concept ids it instantiates
// (shape, color, composite, neutral -- the neutral tag is on every image).
template <class S>
struct DatasetT {
    int canvas = 16;
    Tensor<S> images;                        // [N, 3, H, W]
    std::vector<std::array<int, 4>> labels;  // shape, color, composite, neutral ids
    std::vector<std::array<int, 2>> pairs;   // (shape, color) enum indices per example

    int size() const { return static_cast<int>(labels.size()); }

    std::span<const S> image(int i) const {
        std::size_t n = static_cast<std::size_t>(3) * canvas * canvas;
        return {images.ptr() + static_cast<std::size_t>(i) * n, n};
    }
};

using Dataset = DatasetT<float>;

template <class S = float>
DatasetT<S> build_dataset(const WorldSpec& spec, const VocabularyT<S>& vocab, int n_per_pair,
                          std::uint64_t seed) {
    spec.plan.validate();
    if (n_per_pair < 1)
        throw std::invalid_argument("build_dataset: n_per_pair must be >= 1");
    int n = n_per_pair * 25;
    int hw = spec.canvas;

    // cumulative weights for inverse-CDF pair sampling
    std::array<double, 25> cum{};
    double acc = 0;
    for (int s = 0; s < 5; ++s)
        for (int c = 0; c < 5; ++c) {
            acc += spec.plan.weight[s][c];
            cum[s * 5 + c] = acc;
        }
    double total = acc;

    int neutral = vocab.neutral_id();
    DatasetT<S> ds;
    ds.canvas = hw;
    ds.images = Tensor<S>({n, 3, hw, hw});
    ds.labels.resize(static_cast<std::size_t>(n));
    ds.pairs.resize(static_cast<std::size_t>(n));
    std::size_t stride = static_cast<std::size_t>(3) * hw * hw;

    parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
        Pcg32 rng = substream(seed, "data.example", i);
        double u = rng.uniform() * total;
        int pair = 0;
        while (pair < 24 && u >= cum[pair])
            ++pair;
        int s = pair / 5, c = pair % 5;

        SceneSpec scene;
        scene.shape = static_cast<Shape>(s);
        scene.color = static_cast<Color>(c);
        scene.size = spec.min_size + static_cast<int>(rng.below(
                          static_cast<std::uint32_t>(spec.max_size - spec.min_size + 1)));
        int lo = scene.size, hi = hw - 1 - scene.size;
        scene.row = lo + static_cast<int>(rng.below(static_cast<std::uint32_t>(hi - lo + 1)));
        scene.col = lo + static_cast<int>(rng.below(static_cast<std::uint32_t>(hi - lo + 1)));
        scene.background = spec.bg_min + (spec.bg_max - spec.bg_min) * rng.uniform();

        Tensor<S> img = render_scene<S>(scene, hw, hw);
        std::copy(img.data.begin(), img.data.end(), ds.images.ptr() + i * stride);
        ds.labels[i] = {vocab.require(shape_names()[s]), vocab.require(color_names()[c]),
                        vocab.require(composite_token(s, c)), neutral};
        ds.pairs[i] = {s, c};
    });
    return ds;
}

} // namespace eraselab
