#pragma once

#include "srr/nn.hpp"

namespace srr {

// Adam with bias correction. Moments are stored per parameter in collection
// order and serialize into checkpoints so a resumed run continues
// bit-identically.
template <class S>
struct Adam {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t step_count = 0;
    std::vector<Tensor<S>> m, v;

    void init(const NamedParams<S>& params) {
        m.clear();
        v.clear();
        for (const auto& [name, p] : params) {
            m.emplace_back(p.val().shape());
            v.emplace_back(p.val().shape());
        }
    }

    void step(const NamedParams<S>& params) {
        check(m.size() == params.size(), "adam: parameter set changed");
        ++step_count;
        const S c1 = static_cast<S>(1.0 / (1.0 - std::pow(beta1, static_cast<double>(step_count))));
        const S c2 = static_cast<S>(1.0 / (1.0 - std::pow(beta2, static_cast<double>(step_count))));
        const S b1 = static_cast<S>(beta1), b2 = static_cast<S>(beta2);
        const S lr_s = static_cast<S>(lr), eps_s = static_cast<S>(eps);
        for (size_t i = 0; i < params.size(); ++i) {
            Tensor<S>& g = params[i].second.grad();
            Tensor<S>& w = params[i].second.mutable_val();
            Tensor<S>& mi = m[i];
            Tensor<S>& vi = v[i];
            for (int64_t j = 0; j < w.numel(); ++j) {
                mi[j] = b1 * mi[j] + (S(1) - b1) * g[j];
                vi[j] = b2 * vi[j] + (S(1) - b2) * g[j] * g[j];
                w[j] -= lr_s * (mi[j] * c1) / (std::sqrt(vi[j] * c2) + eps_s);
            }
        }
    }
};

}  // namespace srr
