#pragma once

#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "segface/autograd.hpp"
#include "segface/rng.hpp"

namespace segface {

struct GradCheckOptions {
    double eps = 1e-4;
    // Coordinates checked per parameter tensor: full check for tensors up to
    // this size, a seeded deterministic subsample above it.
    int64_t max_coords = 64;
    uint64_t seed = 0x5E6FACE5ULL;
};

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    int64_t worst_coord = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    int64_t coords_checked = 0;
};

// Central-difference check of the analytic gradients of a scalar function of
// a ParamSet. Runs in double precision. Returns the max relative error
// |analytic - numeric| / max(1e-8, |analytic| + |numeric|) over the checked
// coordinates.
inline GradCheckResult grad_check(ParamSet<double>& params,
                                  const std::function<Var<double>(Binder<double>&)>& fn,
                                  const GradCheckOptions& opts = {}) {
    auto eval = [&]() -> double {
        Binder<double> binder(params);
        Var<double> loss = fn(binder);
        if (loss.val().numel() != 1) throw ShapeError("grad_check: fn must return a scalar");
        return static_cast<double>(loss.val()[0]);
    };

    // Analytic gradients.
    params.zero_grads();
    {
        Binder<double> binder(params);
        Var<double> loss = fn(binder);
        if (loss.val().numel() != 1) throw ShapeError("grad_check: fn must return a scalar");
        if (!std::isfinite(loss.val()[0])) throw NumericError("grad_check: non-finite function value");
        backward(loss);
        binder.collect_grads();
    }

    GradCheckResult result;
    size_t param_index = 0;
    for (auto& [name, p] : params) {
        int64_t n = p.value.numel();
        std::vector<int64_t> coords;
        if (n <= opts.max_coords) {
            coords.resize(static_cast<size_t>(n));
            std::iota(coords.begin(), coords.end(), 0);
        } else {
            std::vector<int64_t> all(static_cast<size_t>(n));
            std::iota(all.begin(), all.end(), 0);
            Rng rng(hash3(opts.seed, static_cast<uint64_t>(param_index), 0xC0C0DEULL));
            shuffle(all, rng);
            coords.assign(all.begin(), all.begin() + static_cast<size_t>(opts.max_coords));
        }

        for (int64_t c : coords) {
            double orig = p.value[c];
            p.value[c] = orig + opts.eps;
            double fp = eval();
            p.value[c] = orig - opts.eps;
            double fm = eval();
            p.value[c] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw NumericError(cat("grad_check: non-finite function value while perturbing ", name));
            }
            double numeric = (fp - fm) / (2.0 * opts.eps);
            double analytic = p.grad[c];
            double rel = std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
            result.coords_checked++;
            if (rel > result.max_rel_err) {
                result.max_rel_err = rel;
                result.worst_param = name;
                result.worst_coord = c;
                result.worst_analytic = analytic;
                result.worst_numeric = numeric;
            }
        }
        param_index++;
    }
    return result;
}

}  // namespace segface
