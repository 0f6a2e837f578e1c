#pragma once

#include <cstdint>
#include <vector>

#include "vqlab/tensor.hpp"

namespace vqlab {

// One desk-scale sample: a noisy background with a single bright elliptical
// lesion; the mask is the ellipse support and is never empty.
struct SyntheticSample {
  Tensor image;           // [1, 1, S, S], values in [0, 1]
  std::vector<int> mask;  // S*S binary
  int id = 0;
  bool labeled = false;
};

// Deterministic per seed. The first ceil(labeled_ratio * n) samples are
// flagged labeled.
std::vector<SyntheticSample> gen_synthetic_dataset(int n, int size, std::uint64_t seed,
                                                   double labeled_ratio);

}  // namespace vqlab
