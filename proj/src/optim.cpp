#include "iglab/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace iglab {

void AdamOptimizer::step(std::map<std::string, Tensor*>& params, const std::map<std::string, Tensor>& grads) {
    ++step_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (auto& [name, p] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;  // params without a gradient this step are left alone
        const Tensor& g = git->second;
        if (g.shape != p->shape) throw std::runtime_error("optimizer: shape mismatch for " + name);
        Moments& mo = moments_[name];
        if (mo.m.empty()) {
            mo.m.assign(p->data.size(), 0.0);
            mo.v.assign(p->data.size(), 0.0);
        }
        for (size_t i = 0; i < p->data.size(); ++i) {
            double gi = g.data[i];
            mo.m[i] = beta1_ * mo.m[i] + (1.0 - beta1_) * gi;
            mo.v[i] = beta2_ * mo.v[i] + (1.0 - beta2_) * gi * gi;
            double mhat = mo.m[i] / bc1;
            double vhat = mo.v[i] / bc2;
            p->data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

}  // namespace iglab
