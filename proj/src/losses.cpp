#include "escape/losses.hpp"

#include <stdexcept>

namespace escape {

Tensor map_loss(const Tensor& probs, const Tensor& labels) { return bce_mean(probs, labels); }

Tensor image_loss(const std::vector<Tensor>& scores, const std::vector<Tensor>& labels) {
    if (scores.empty() || scores.size() != labels.size())
        throw std::invalid_argument("image_loss: score/label count mismatch");
    Tensor acc;
    for (size_t i = 0; i < scores.size(); ++i) {
        Tensor term = bce_mean(scores[i], labels[i]);
        acc = acc.defined() ? add(acc, term) : term;
    }
    return scale(acc, 1.0 / static_cast<double>(scores.size()));
}

Tensor joint_loss(const Tensor& map_term, const Tensor& image_term, double lambda) {
    return add(map_term, scale(image_term, lambda));
}

}  // namespace escape
