#include "escape/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace escape {

AdamW::AdamW(std::vector<Parameter*> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    if (cfg_.lr <= 0.0) throw std::invalid_argument("AdamW: lr must be positive");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Parameter* p : params_) {
        m_.emplace_back(static_cast<size_t>(p->tensor.numel()), 0.0);
        v_.emplace_back(static_cast<size_t>(p->tensor.numel()), 0.0);
    }
}

void AdamW::step() {
    ++step_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
        Parameter* p = params_[pi];
        auto w = p->tensor.mutable_data();
        auto g = p->tensor.grad();
        auto& m = m_[pi];
        auto& v = v_[pi];
        for (size_t i = 0; i < w.size(); ++i) {
            double gi = i < g.size() ? g[i] : 0.0;
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            w[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i]);
        }
    }
}

void AdamW::zero_grad() {
    for (Parameter* p : params_) p->tensor.zero_grad();
}

}  // namespace escape
