#pragma once

#include "poslab/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace poslab {

// Standard Adam with bias correction. Moment buffers are laid out per
// parameter tensor in registration order; step() consumes and zeroes grads.
template <typename S>
class AdamState {
  public:
    struct Hyper {
        double lr = 1e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    AdamState() = default;
    AdamState(std::vector<Tensor<S>> params, Hyper hyper) : params_(std::move(params)), hyper_(hyper) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].numel(), S(0));
            v_[i].assign(params_[i].numel(), S(0));
        }
    }

    int64_t step_count() const { return step_; }
    const Hyper& hyper() const { return hyper_; }
    void set_lr(double lr) { hyper_.lr = lr; }

    void step() {
        ++step_;
        const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(step_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (p.grad().size() != p.numel())
                throw std::logic_error("adam_step: parameter has no gradient");
            S* w = p.data().data();
            S* g = p.grad().data();
            S* m = m_[i].data();
            S* v = v_[i].data();
            const size_t n = p.numel();
            for (size_t j = 0; j < n; ++j) {
                m[j] = static_cast<S>(hyper_.beta1 * m[j] + (1.0 - hyper_.beta1) * g[j]);
                v[j] = static_cast<S>(hyper_.beta2 * v[j] + (1.0 - hyper_.beta2) * static_cast<double>(g[j]) * g[j]);
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                w[j] -= static_cast<S>(hyper_.lr * mhat / (std::sqrt(vhat) + hyper_.eps));
            }
            p.zero_grad();
        }
    }

    void zero_grads() {
        for (auto& p : params_) p.zero_grad();
    }

  private:
    std::vector<Tensor<S>> params_;
    Hyper hyper_;
    std::vector<std::vector<S>> m_, v_;
    int64_t step_ = 0;
};

} // namespace poslab
