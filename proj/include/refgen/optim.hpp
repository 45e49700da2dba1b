#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

#include "refgen/autograd.hpp"

namespace refgen {

struct AdamConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

// Bias-corrected Adam over a fixed parameter list.
class Adam {
   public:
    Adam(std::vector<Var> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        for (const auto& p : params_) {
            require(p.requires_grad(), "Adam: parameter does not require grad");
            m_.emplace_back(p.shape());
            v_.emplace_back(p.shape());
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    // One update at learning rate lr (the scheduler's value for this step).
    void step(float lr) {
        ++step_;
        const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(step_));
        const float step_size = static_cast<float>(lr / bc1);
        const float inv_bc2 = static_cast<float>(1.0 / bc2);
        for (std::size_t k = 0; k < params_.size(); ++k) {
            Node* node = params_[k].node();
            if (node->grad.empty()) continue;
            float* w = node->value.data();
            const float* g = node->grad.data();
            float* m = m_[k].data();
            float* v = v_[k].data();
            for (std::size_t i = 0; i < node->value.numel(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0f - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1.0f - cfg_.beta2) * g[i] * g[i];
                w[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_bc2) + cfg_.eps);
            }
        }
    }

    void step() { step(cfg_.lr); }

    // Clears the moment estimates of elements [offset, offset+count) of parameter k.
    void reset_moments(std::size_t k, std::size_t offset, std::size_t count) {
        require(k < params_.size() && offset + count <= m_[k].numel(), "Adam::reset_moments out of range");
        std::fill_n(m_[k].data() + offset, count, 0.0f);
        std::fill_n(v_[k].data() + offset, count, 0.0f);
    }

    std::size_t steps_taken() const { return step_; }
    const std::vector<Var>& params() const { return params_; }
    const AdamConfig& config() const { return cfg_; }

   private:
    std::vector<Var> params_;
    AdamConfig cfg_;
    std::vector<Tensor> m_, v_;
    std::size_t step_ = 0;
};

// Linear warmup over the first warmup_frac of steps, then cosine decay to zero.
struct WarmupCosine {
    float base_lr = 1e-3f;
    std::size_t total_steps = 1;
    float warmup_frac = 0.05f;

    float at(std::size_t step) const {
        const std::size_t warm = static_cast<std::size_t>(std::ceil(warmup_frac * static_cast<float>(total_steps)));
        if (warm > 0 && step < warm) return base_lr * static_cast<float>(step + 1) / static_cast<float>(warm);
        if (total_steps <= warm) return base_lr;
        const double progress = static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
        return static_cast<float>(0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress))));
    }
};

}  // namespace refgen
