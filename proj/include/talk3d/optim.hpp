#pragma once

#include <map>
#include <string>

#include "talk3d/tensor.hpp"

namespace talk3d::ad {

/// Adam with bias correction. Moment buffers are keyed by parameter identity,
/// created on first step.
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    /// One update over the given parameters using their .grad buffers.
    /// Parameters without an allocated gradient are treated as zero-grad.
    void step(const std::vector<Tensor>& params);

    void zero_grad(const std::vector<Tensor>& params) {
        for (auto p : params) p.zero_grad();
    }

    std::int64_t step_count() const { return t_; }
    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

private:
    struct Moments {
        std::vector<double> m, v;
    };
    double lr_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::map<const TensorImpl*, Moments> state_;
};

}  // namespace talk3d::ad
