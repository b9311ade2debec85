#pragma once

#include <functional>
#include <string>
#include <vector>

#include "escape/checkpoint.hpp"

namespace escape {

struct GradCheckReport {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    int64_t coords_checked = 0;
    bool pass = false;
};

// Central-difference verification of reverse-mode gradients. `loss_fn` must
// rebuild the graph from the current parameter values and return a scalar.
// Relative error per coordinate is |a-n| / max(|a|, |n|, 1e-8).
GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn,
                                  const std::vector<Parameter*>& params, double eps, double tol);

}  // namespace escape
