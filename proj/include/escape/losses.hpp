#pragma once

#include <vector>

#include "escape/tensor.hpp"

namespace escape {

// Grid-map segmentation loss: mean BCE over cells and categories.
// probs and labels are [H*W, K]; labels are 0/1 constants.
Tensor map_loss(const Tensor& probs, const Tensor& labels);

// Image segmentation loss: mean pixelwise BCE per category map, then mean
// over the categories that produced masks. Score and label maps are [img,img].
Tensor image_loss(const std::vector<Tensor>& scores, const std::vector<Tensor>& labels);

// Joint objective: map term plus lambda times the image term.
Tensor joint_loss(const Tensor& map_term, const Tensor& image_term, double lambda);

}  // namespace escape
