#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string_view>
#include <vector>

#include "pyreid/autograd.hpp"

namespace pyreid {

// Names of every differentiable primitive the engine provides.
inline const std::vector<std::string_view>& op_catalog() {
    static const std::vector<std::string_view> ops = {
        "add",          "sub",
        "mul",          "scale",
        "add_scalar",   "add_n",
        "matmul",       "add_rowwise",
        "conv2d",       "relu",
        "hinge",        "batch_norm",
        "global_max_pool", "global_avg_pool",
        "slice_rows",   "concat",
        "reshape",      "softmax_cross_entropy",
        "euclidean_distance", "row_distances",
        "gather_rows",  "sum",
        "mean",
    };
    return ops;
}

using ScalarFn = std::function<Var<double>(Graph<double>&, const Var<double>&)>;

struct GradCheckOptions {
    double eps = 1e-5;
    // Skip coordinates whose one-sided differences disagree sharply: the
    // perturbation straddles a ReLU/max kink there.
    bool skip_kinks = true;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;
};

// Compares the analytic gradient of f at x with central differences.
// Error per coordinate: |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
inline GradCheckReport finite_difference_check(const ScalarFn& f, const Tensor<double>& x,
                                               GradCheckOptions opt = {}) {
    auto eval = [&](const Tensor<double>& at) {
        Graph<double> g;
        auto v = g.input(at, false);
        auto out = f(g, v);
        if (out.value().size() != 1) {
            throw GraphError("finite_difference_check: f must return a scalar, got shape " +
                             shape_str(out.shape()));
        }
        return out.value()[0];
    };

    Tensor<double> analytic(x.shape(), 0.0);
    {
        Graph<double> g;
        auto v = g.input(x, true);
        auto out = f(g, v);
        if (out.value().size() != 1) {
            throw GraphError("finite_difference_check: f must return a scalar, got shape " +
                             shape_str(out.shape()));
        }
        if (out.requires_grad()) {
            g.backward(out);
            if (const auto* gr = g.grad(v)) analytic = *gr;
        }
    }

    GradCheckReport rep;
    const double f0 = eval(x);
    Tensor<double> probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        probe[i] = orig + opt.eps;
        const double fp = eval(probe);
        probe[i] = orig - opt.eps;
        const double fm = eval(probe);
        probe[i] = orig;

        if (opt.skip_kinks) {
            const double fwd = (fp - f0) / opt.eps;
            const double bwd = (f0 - fm) / opt.eps;
            if (std::abs(fwd - bwd) > 1e-6 + 0.1 * (std::abs(fwd) + std::abs(bwd))) {
                ++rep.skipped;
                continue;
            }
        }
        const double numeric = (fp - fm) / (2.0 * opt.eps);
        const double a = analytic[i];
        const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
        rep.max_rel_error = std::max(rep.max_rel_error, err);
        ++rep.checked;
    }
    return rep;
}

using LossFn = std::function<Var<double>(Graph<double>&)>;

// Same comparison for parameters bound inside f via Graph::parameter. At most
// `max_coords` coordinates per parameter are probed, evenly spaced.
inline GradCheckReport finite_difference_check_params(const LossFn& f, const std::vector<Parameter<double>*>& params,
                                                      GradCheckOptions opt = {}, std::size_t max_coords = 16) {
    auto eval = [&] {
        Graph<double> g;
        return f(g).value()[0];
    };
    for (auto* p : params) p->zero_grad();
    {
        Graph<double> g;
        auto out = f(g);
        if (out.value().size() != 1) {
            throw GraphError("finite_difference_check_params: f must return a scalar, got shape " +
                             shape_str(out.shape()));
        }
        g.backward(out);
    }
    GradCheckReport rep;
    const double f0 = eval();
    for (auto* p : params) {
        const std::size_t n = p->value.size();
        const std::size_t stride = std::max<std::size_t>(1, n / max_coords);
        for (std::size_t i = 0; i < n; i += stride) {
            const double orig = p->value[i];
            p->value[i] = orig + opt.eps;
            const double fp = eval();
            p->value[i] = orig - opt.eps;
            const double fm = eval();
            p->value[i] = orig;
            if (opt.skip_kinks) {
                const double fwd = (fp - f0) / opt.eps;
                const double bwd = (f0 - fm) / opt.eps;
                if (std::abs(fwd - bwd) > 1e-6 + 0.1 * (std::abs(fwd) + std::abs(bwd))) {
                    ++rep.skipped;
                    continue;
                }
            }
            const double numeric = (fp - fm) / (2.0 * opt.eps);
            const double a = p->grad[i];
            const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            rep.max_rel_error = std::max(rep.max_rel_error, err);
            ++rep.checked;
        }
    }
    return rep;
}

} // namespace pyreid
