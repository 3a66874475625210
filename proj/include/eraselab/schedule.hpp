#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "eraselab/rng.hpp"
#include "eraselab/tensor.hpp"

namespace eraselab {

// Noise schedule for the forward corruption chain. Stored in double so the
// per-step coefficients are identical no matter which scalar the model runs.
struct DiffusionSchedule {
    int steps = 0;
    std::vector<double> beta;      // beta[t-1] for t in 1..T
    std::vector<double> alpha;     // 1 - beta
    std::vector<double> alpha_bar; // running product of alpha

    double beta_at(int t) const { return beta.at(static_cast<std::size_t>(t - 1)); }
    double alpha_at(int t) const { return alpha.at(static_cast<std::size_t>(t - 1)); }
    double alpha_bar_at(int t) const { return alpha_bar.at(static_cast<std::size_t>(t - 1)); }
    // convention: alpha_bar at t=0 is 1 (clean image)
    double alpha_bar_before(int t) const { return t <= 1 ? 1.0 : alpha_bar_at(t - 1); }

    void check_t(int t) const {
        if (t < 1 || t > steps)
            throw std::out_of_range("schedule: step " + std::to_string(t) + " outside [1, " +
                                    std::to_string(steps) + "]");
    }
};

// Defaults are rescaled for a short chain: with T=100 the end value 0.07
// drives alpha_bar[T] below 0.05, i.e. the terminal state is nearly pure
// noise. (The common (1e-4, 0.02) pair only does that for T around 1000.)
inline constexpr int kDefaultSteps = 100;
inline constexpr double kDefaultBetaStart = 1e-4;
inline constexpr double kDefaultBetaEnd = 0.07;

inline DiffusionSchedule make_schedule(int steps = kDefaultSteps,
                                       double beta_start = kDefaultBetaStart,
                                       double beta_end = kDefaultBetaEnd,
                                       const std::string& kind = "linear") {
    if (kind != "linear")
        throw std::invalid_argument("make_schedule: unknown kind '" + kind + "'");
    if (steps < 1)
        throw std::invalid_argument("make_schedule: steps must be >= 1");
    if (!(beta_start > 0) || !(beta_start <= beta_end) || !(beta_end < 1))
        throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
    DiffusionSchedule s;
    s.steps = steps;
    s.beta.resize(static_cast<std::size_t>(steps));
    s.alpha.resize(static_cast<std::size_t>(steps));
    s.alpha_bar.resize(static_cast<std::size_t>(steps));
    double prod = 1.0;
    for (int i = 0; i < steps; ++i) {
        double b = steps == 1 ? beta_start
                              : beta_start + (beta_end - beta_start) * i / double(steps - 1);
        s.beta[static_cast<std::size_t>(i)] = b;
        s.alpha[static_cast<std::size_t>(i)] = 1.0 - b;
        prod *= 1.0 - b;
        s.alpha_bar[static_cast<std::size_t>(i)] = prod;
    }
    return s;
}

// z_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps
template <class S>
Tensor<S> forward_diffuse(const Tensor<S>& x0, int t, const Tensor<S>& eps,
                          const DiffusionSchedule& sched) {
    sched.check_t(t);
    if (!x0.same_shape(eps))
        throw std::invalid_argument("forward_diffuse: eps shape differs from x0");
    double ab = sched.alpha_bar_at(t);
    S a = static_cast<S>(std::sqrt(ab));
    S b = static_cast<S>(std::sqrt(1.0 - ab));
    Tensor<S> z(x0.dims);
    for (std::size_t i = 0; i < x0.size(); ++i)
        z.data[i] = a * x0.data[i] + b * eps.data[i];
    return z;
}

template <class S>
Tensor<S> gaussian_tensor(std::vector<int> dims, Pcg32& rng) {
    Tensor<S> t(std::move(dims));
    for (auto& v : t.data)
        v = static_cast<S>(rng.gaussian());
    return t;
}

} // namespace eraselab
