#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "vqlab/tensor.hpp"

namespace vqlab {

enum class Metric { euclidean };

std::string metric_name(Metric m);
Metric metric_from_name(const std::string& name);

// The learnable discrete vocabulary: K codewords of dimension D.
struct Codebook {
  int K = 0;
  int D = 0;
  Metric metric = Metric::euclidean;
  Tensor codewords;  // [K, D]
};

enum class InitScheme { uniform_random, kmeans_on_sample };

// Deterministic initialization. kmeans_on_sample requires `sample` [M, D] with
// M >= K and runs Lloyd iterations from a distance-weighted seeding. Exact
// duplicate codewords are perturbed and re-checked up to 3 times.
Codebook init_codebook(int K, int D, InitScheme scheme, std::uint64_t seed,
                       const Tensor* sample = nullptr);

// Throws if any two codewords coincide exactly.
void check_distinct_codewords(const Codebook& cb);

// Spatial grid of codeword indices plus the dequantized features.
struct QuantizedMap {
  int H = 0, W = 0, D = 0;
  std::vector<int> indices;  // H*W row-major, each in [0, K)
  Tensor dequantized;        // [H, W, D]; row h,w equals codewords[indices[h*W+w]]
  Tensor source;             // [H, W, D]; the pre-quantization features
};

// Nearest-codeword assignment per position; ties go to the lowest index.
QuantizedMap quantize(const Tensor& z_hwd, const Codebook& cb);

// Forward takes the dequantized codewords; backward passes the gradient to z
// unchanged. Codewords receive no gradient through this path.
Tensor ste_dequantize(const Tensor& z_hwd, const Codebook& cb);
Tensor ste_dequantize(const Tensor& z_hwd, const QuantizedMap& qm);

struct VqLosses {
  Tensor codebook_loss;    // mean||stopgrad(z) - q(z)||^2, grads to codewords
  Tensor commitment_loss;  // beta * mean||z - stopgrad(q(z))||^2, grads to z
};
VqLosses vq_losses(const Tensor& z_hwd, const QuantizedMap& qm, const Codebook& cb, double beta);

// mean_n H(p_n) - H(mean_n p_n) with p_n = softmax_j(-||z_n - c_j||^2 / tau_q).
// Minimizing sharpens per-position assignments while spreading batch usage.
Tensor entropy_regularizer(const Tensor& z_hwd, const Codebook& cb, double tau_q);

struct UtilizationRecord {
  long long step = 0;
  std::vector<long long> histogram;  // K counts
  double utilization = 0.0;          // nonzero bins / K
};

UtilizationRecord make_utilization_record(long long step, const std::vector<int>& indices, int K);
std::vector<UtilizationRecord> utilization_series(const std::vector<QuantizedMap>& history, int K);
double histogram_entropy(const std::vector<long long>& histogram);

struct PcaPoint {
  double x = 0.0, y = 0.0;
  bool active = false;
};

// 2D projection onto the top-2 principal components of the codewords, with a
// deterministic sign convention (largest-magnitude coordinate of each
// component is positive). D == 1 pads the second component with zeros.
std::vector<PcaPoint> pca_export(const Codebook& cb, const std::vector<bool>& active_mask);

// Codebook file: line 1 "K D metric", then K lines of D decimals.
void write_codebook_text(std::ostream& os, const Codebook& cb);
void save_codebook(const std::string& path, const Codebook& cb);
Codebook load_codebook(const std::string& path);

}  // namespace vqlab
