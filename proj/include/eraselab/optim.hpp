#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace eraselab {

// Adam with moment state kept in double, so update trajectories do not depend
// on the scalar the model happens to run in.
template <class S>
struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::vector<double> m, v;
    long step_count = 0;

    Adam() = default;
    explicit Adam(double lr_) : lr(lr_) {}

    void step(std::span<S> params, std::span<const S> grads) {
        if (params.size() != grads.size())
            throw std::invalid_argument("adam: params/grads size mismatch");
        if (m.empty()) {
            m.assign(params.size(), 0.0);
            v.assign(params.size(), 0.0);
        } else if (m.size() != params.size()) {
            throw std::invalid_argument("adam: state size mismatch");
        }
        ++step_count;
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
        for (std::size_t i = 0; i < params.size(); ++i) {
            double g = static_cast<double>(grads[i]);
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            params[i] = static_cast<S>(static_cast<double>(params[i]) -
                                       lr * mhat / (std::sqrt(vhat) + eps));
        }
    }
};

} // namespace eraselab
