#pragma once

#include <map>
#include <string>

#include "iglab/tensor.hpp"

namespace iglab {

// Adam with bias correction. Moments are keyed by parameter name and
// lazily created with the parameter's shape on first use.
class AdamOptimizer {
public:
    explicit AdamOptimizer(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::map<std::string, Tensor*>& params, const std::map<std::string, Tensor>& grads);

    int64_t step_count() const { return step_; }
    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }

private:
    struct Moments {
        Vec m, v;
    };
    double lr_, beta1_, beta2_, eps_;
    int64_t step_ = 0;
    std::map<std::string, Moments> moments_;
};

}  // namespace iglab
