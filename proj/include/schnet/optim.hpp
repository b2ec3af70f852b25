#pragma once

// AdamW with decoupled weight decay (applied to weight matrices only) and
// the linear-warmup learning-rate schedule. Parameters update in
// registration order; state never holds entries for frozen tensors because
// only the trainable registry is handed in.

#include <cmath>
#include <vector>

#include "schnet/config.hpp"
#include "schnet/model.hpp"

namespace schnet {

// lr(t) = lr * (warmup_ratio + (1 - warmup_ratio) * t / warmup_iters) during
// warmup, then constant, or poly decay (1 - progress)^power when
// poly_power > 0.
inline double lr_at(const ScheduleConfig& s, double base_lr, std::size_t iter) {
    if (iter < s.warmup_iters) {
        return base_lr * (s.warmup_ratio + (1.0 - s.warmup_ratio) *
                                               static_cast<double>(iter) / s.warmup_iters);
    }
    if (s.poly_power > 0.0) {
        const double progress = static_cast<double>(iter - s.warmup_iters) /
                                static_cast<double>(s.total_iters - s.warmup_iters);
        return base_lr * std::pow(1.0 - progress, s.poly_power);
    }
    return base_lr;
}

template <typename T>
class AdamW {
  public:
    AdamW(std::vector<NamedParam<T>>& params, const OptimConfig& oc) : params_(params), oc_(oc) {
        for (const auto& p : params_) {
            m_.emplace_back(p.tensor.numel(), T(0));
            v_.emplace_back(p.tensor.numel(), T(0));
        }
    }

    void zero_grad() {
        for (auto& p : params_) {
            Tensor<T> t = p.tensor;
            if (!t.has_grad()) t.grad_mut().assign(t.numel(), T(0));
            t.zero_grad();
        }
    }

    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(oc_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(oc_.beta2, static_cast<double>(t_));
        const T b1 = static_cast<T>(oc_.beta1), b2 = static_cast<T>(oc_.beta2);
        const T eps = static_cast<T>(oc_.eps);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor<T> t = params_[i].tensor;
            const std::vector<T>& g = t.grad();
            T* theta = t.data();
            T* m = m_[i].data();
            T* v = v_[i].data();
            const T decay = params_[i].decay ? static_cast<T>(lr * oc_.weight_decay) : T(0);
            for (std::size_t j = 0; j < t.numel(); ++j) {
                const T gj = g[j];
                m[j] = b1 * m[j] + (T(1) - b1) * gj;
                v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
                const T mhat = m[j] / static_cast<T>(bc1);
                const T vhat = v[j] / static_cast<T>(bc2);
                theta[j] -= static_cast<T>(lr) * mhat / (std::sqrt(vhat) + eps);
                if (decay != T(0)) theta[j] -= decay * theta[j];
            }
        }
    }

    std::size_t step_count() const { return t_; }

  private:
    std::vector<NamedParam<T>>& params_;
    OptimConfig oc_;
    std::vector<std::vector<T>> m_, v_;
    std::size_t t_ = 0;
};

}  // namespace schnet
