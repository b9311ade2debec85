#include "escape/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace escape {

GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn,
                                  const std::vector<Parameter*>& params, double eps, double tol) {
    if (eps < 1e-6 || eps > 1e-3) throw std::invalid_argument("finite_diff_check: eps outside [1e-6, 1e-3]");

    for (Parameter* p : params) p->tensor.zero_grad();
    Tensor loss = loss_fn();
    if (!std::isfinite(loss.item())) throw std::runtime_error("finite_diff_check: non-finite loss");
    loss.backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (Parameter* p : params) {
        auto g = p->tensor.grad();
        analytic.emplace_back(g.begin(), g.end());
        if (analytic.back().empty()) analytic.back().assign(static_cast<size_t>(p->tensor.numel()), 0.0);
    }

    GradCheckReport report;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto w = params[pi]->tensor.mutable_data();
        for (size_t i = 0; i < w.size(); ++i) {
            double saved = w[i];
            w[i] = saved + eps;
            double fp = loss_fn().item();
            w[i] = saved - eps;
            double fm = loss_fn().item();
            w[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw std::runtime_error("finite_diff_check: non-finite perturbed loss");
            double numeric = (fp - fm) / (2.0 * eps);
            double a = analytic[pi][i];
            double abs_err = std::abs(a - numeric);
            double rel_err = abs_err / std::max({std::abs(a), std::abs(numeric), 1e-8});
            report.max_abs_err = std::max(report.max_abs_err, abs_err);
            report.max_rel_err = std::max(report.max_rel_err, rel_err);
            ++report.coords_checked;
        }
    }
    report.pass = report.max_rel_err <= tol;
    return report;
}

}  // namespace escape
