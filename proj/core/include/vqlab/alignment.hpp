#pragma once

#include <cstdint>

#include "vqlab/tensor.hpp"

namespace vqlab {

// Spatial grid of feature vectors, stored channel-last [H', W', C'].
// Vectors are NOT unit-normalized here; normalization happens inside the
// similarity.
struct PatchFeatureMap {
  Tensor features;
  int height() const { return features.dim(0); }
  int width() const { return features.dim(1); }
  int channels() const { return features.dim(2); }
};

// Resize + 1x1 convolution mapping post-VQ features [H, W, D] onto the
// frozen extractor's grid and channel width.
struct PfaAdapter {
  int out_h = 0, out_w = 0;
  Tensor w;  // [C', D, 1, 1]
  Tensor b;  // [C']
};

PfaAdapter make_pfa_adapter(int feat_dim, int out_channels, int out_h, int out_w,
                            std::uint64_t seed);

// Nearest-neighbor resize of the spatial grid, then the learnable per-position
// linear map. Gradients flow to the adapter weights and to vq_features.
PatchFeatureMap pfa_project(const Tensor& vq_features_hwd, const PfaAdapter& pfa);

// Patch-wise contrastive objective: mean over positions i of
//   -ln( exp(sim(pfa_i, fm_i)/tau) / sum_j exp(sim(pfa_i, fm_j)/tau) )
// with sim(a, b) = cosine similarity. Positives are same-position pairs,
// negatives all other positions of the fm map.
Tensor contrastive_align_loss(const PatchFeatureMap& f_pfa, const PatchFeatureMap& f_fm,
                              double tau);

// Frozen randomly initialized 2-layer convolutional extractor standing in for
// an external pretrained backbone. Weights never receive gradients; outputs
// are bit-identical for identical inputs.
struct FrozenExtractor {
  std::uint64_t seed = 0;
  int out_channels = 0;
  Tensor w1, b1;  // 1 -> hidden, stride 2
  Tensor w2, b2;  // hidden -> out_channels, stride 2
};

FrozenExtractor make_frozen_extractor(int out_channels, std::uint64_t seed);

// image is [H, W] or [1, 1, H, W]; output grid is H/4 x W/4.
PatchFeatureMap frozen_extract(const Tensor& image, const FrozenExtractor& fe);

}  // namespace vqlab
