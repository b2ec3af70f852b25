#pragma once

// Central-difference gradient verification. The numeric side lives entirely
// here and never touches the reverse-mode path it checks.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "schnet/errors.hpp"
#include "schnet/tensor.hpp"

namespace schnet {

template <typename T>
struct GradCheckEntry {
    std::string param;
    std::size_t index = 0;
    T analytic = T(0);
    T numeric = T(0);
    T rel_err = T(0);
    bool pass = false;
};

template <typename T>
struct GradCheckReport {
    std::vector<GradCheckEntry<T>> entries;
    std::size_t checked = 0;
    std::size_t failures = 0;
    T worst_rel_err = T(0);

    bool passed() const { return failures == 0; }

    // Worst entry per parameter name, in first-seen order.
    std::vector<GradCheckEntry<T>> worst_per_param() const {
        std::vector<GradCheckEntry<T>> out;
        for (const auto& e : entries) {
            auto it = std::find_if(out.begin(), out.end(),
                                   [&](const GradCheckEntry<T>& w) { return w.param == e.param; });
            if (it == out.end())
                out.push_back(e);
            else if (e.rel_err > it->rel_err)
                *it = e;
        }
        return out;
    }
};

// Compares reverse-mode gradients of loss_fn against central differences
// (loss(p+eps) - loss(p-eps)) / (2 eps), elementwise over every named
// parameter. loss_fn must be deterministic; f64 is the intended mode.
// Relative error metric: |a - n| / max(1, |n|).
template <typename T>
GradCheckReport<T> finite_diff_grad_check(
    const std::function<Tensor<T>()>& loss_fn,
    const std::vector<std::pair<std::string, Tensor<T>>>& params, T eps, T tol) {
    GradCheckReport<T> report;

    for (const auto& [name, p] : params) {
        Tensor<T> t = p;
        t.zero_grad();
    }
    Tensor<T> loss = loss_fn();
    if (!all_finite(loss))
        throw DataError("finite_diff_grad_check: non-finite loss at the unperturbed point");
    loss.backward();

    std::vector<std::vector<T>> analytic;
    analytic.reserve(params.size());
    for (auto& [name, p] : params) {
        if (p.has_grad())
            analytic.push_back(p.grad());
        else
            analytic.emplace_back(p.numel(), T(0));
    }

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const std::string& name = params[pi].first;
        Tensor<T> p = params[pi].second;
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const T saved = p.data()[i];
            p.data()[i] = saved + eps;
            T f_plus;
            {
                NoGradGuard ng;
                Tensor<T> lp = loss_fn();
                f_plus = lp.item();
            }
            p.data()[i] = saved - eps;
            T f_minus;
            {
                NoGradGuard ng;
                Tensor<T> lm = loss_fn();
                f_minus = lm.item();
            }
            p.data()[i] = saved;
            if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
                throw DataError("finite_diff_grad_check: non-finite loss perturbing " + name +
                                "[" + std::to_string(i) + "]");
            GradCheckEntry<T> e;
            e.param = name;
            e.index = i;
            e.analytic = analytic[pi][i];
            e.numeric = (f_plus - f_minus) / (T(2) * eps);
            e.rel_err = std::abs(e.analytic - e.numeric) /
                        std::max(T(1), std::abs(e.numeric));
            e.pass = e.rel_err < tol;
            report.worst_rel_err = std::max(report.worst_rel_err, e.rel_err);
            ++report.checked;
            if (!e.pass) ++report.failures;
            report.entries.push_back(std::move(e));
        }
    }
    return report;
}

}  // namespace schnet
