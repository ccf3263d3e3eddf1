#pragma once

#include <sstream>

#include "srr/autograd.hpp"

namespace srr {

// Finite-difference gradient verification. Always runs in 64-bit: central
// differences at the spec'd step are meaningless in float.
struct GradCheckReport {
    struct Entry {
        std::string name;
        double max_rel_err = 0.0;
        int64_t worst_index = -1;
        double analytic = 0.0;
        double numeric = 0.0;
    };
    std::vector<Entry> entries;
    bool pass = false;
    double tolerance = 0.0;
    std::string failure;  // non-empty on non-finite gradients

    double max_rel_err() const {
        double m = 0;
        for (const auto& e : entries) m = std::max(m, e.max_rel_err);
        return m;
    }
    std::string summary() const {
        std::ostringstream os;
        os << (pass ? "PASS" : "FAIL") << " tol=" << tolerance;
        for (const auto& e : entries)
            os << "  " << e.name << ": " << e.max_rel_err << " @" << e.worst_index;
        if (!failure.empty()) os << "  [" << failure << "]";
        return os.str();
    }
};

// `build` re-runs the forward graph against the current leaf values and
// returns the output Var. `wrt` lists the leaves to differentiate (inputs
// and/or parameters); they must be the same leaves `build` reads, so an
// in-place perturbation is visible on the next call.
template <class F>
GradCheckReport grad_check(F&& build, const std::vector<std::pair<std::string, Var<double>>>& wrt,
                           double tolerance, double step = 1e-6, uint64_t seed = 1234) {
    GradCheckReport report;
    report.tolerance = tolerance;

    Var<double> out = build();
    Rng rng(derive_seed(seed, 0xfd));
    Tensor<double> projection = random_normal<double>(out.val().shape(), rng);
    auto scalar_loss = [&]() -> double {
        Var<double> o = build();
        check(o.val().same_shape(projection), "grad_check: output shape changed between builds");
        return (o.val().array() * projection.array()).sum();
    };

    Var<double> loss = dot_const(out, projection);
    backward(loss);

    std::vector<Tensor<double>> analytic;
    analytic.reserve(wrt.size());
    for (const auto& [name, v] : wrt) {
        check(v.requires_grad(), "grad_check: wrt leaf does not require grad");
        analytic.push_back(v.grad());
    }

    report.pass = true;
    for (size_t t = 0; t < wrt.size(); ++t) {
        GradCheckReport::Entry entry;
        entry.name = wrt[t].first;
        Tensor<double>& theta = wrt[t].second.mutable_val();
        for (int64_t i = 0; i < theta.numel(); ++i) {
            const double saved = theta[i];
            theta[i] = saved + step;
            const double up = scalar_loss();
            theta[i] = saved - step;
            const double down = scalar_loss();
            theta[i] = saved;
            const double fd = (up - down) / (2.0 * step);
            const double an = analytic[t][i];
            if (!std::isfinite(fd) || !std::isfinite(an)) {
                report.pass = false;
                report.failure = "non-finite gradient at " + entry.name + "[" +
                                 std::to_string(i) + "]";
                entry.max_rel_err = std::numeric_limits<double>::infinity();
                entry.worst_index = i;
                break;
            }
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-3});
            const double rel = std::abs(fd - an) / denom;
            if (rel > entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_index = i;
                entry.analytic = an;
                entry.numeric = fd;
            }
        }
        if (entry.max_rel_err > tolerance) report.pass = false;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace srr
