#pragma once

#include <vector>

#include "escape/checkpoint.hpp"

namespace escape {

struct AdamWConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Decoupled-weight-decay Adam over a fixed parameter list. State is keyed by
// position, so the parameter set must not change between steps.
class AdamW {
public:
    AdamW(std::vector<Parameter*> params, AdamWConfig cfg);

    // Consumes the grads currently stored on the parameters.
    void step();
    void zero_grad();
    int64_t step_count() const { return step_; }

private:
    std::vector<Parameter*> params_;
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    int64_t step_ = 0;
};

}  // namespace escape
