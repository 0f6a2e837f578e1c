#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "vqlab/codebook.hpp"

namespace vqlab {

// Distance fed into exp(-d) inside the transition kernel. Nearest-neighbor
// search is unaffected (argmin is the same either way).
enum class KernelMetric { euclidean, squared_euclidean };

std::string kernel_metric_name(KernelMetric m);
KernelMetric kernel_metric_from_name(const std::string& name);

// Row-stochastic transition matrix over codeword indices:
//   pi[i][i] = 1 - eps,
//   pi[i][j] = eps * exp(-d(c_i, c_j)) / Z_i  for j != i,
// with Z_i the sum of exp(-d(c_i, c_k)) over k != i.
struct PerturbationKernel {
  int K = 0;
  double eps = 0.0;
  std::vector<double> pi;    // K*K, row-major
  std::vector<double> dist;  // K*K symmetric, zero diagonal
};

// Marginal over codewords after perturbing a uniform prior: Q(c_j) =
// (1/K) * sum_i pi[i][j].
struct PerturbedMarginal {
  std::vector<double> q;
  double eps = 0.0;
};

// Closed-form dropout perturbation radius: kl = 0.5*(p/(1-p) + ln(1-p)).
struct DropoutKL {
  double p = 0.0;
  double sigma0_sq = 1.0;  // cancels in the closed form; kept for the derivation's intermediates
  double kl = 0.0;
};

PerturbationKernel transition_kernel(const Codebook& cb, double eps,
                                     KernelMetric metric = KernelMetric::euclidean);

PerturbedMarginal perturbed_marginal(const PerturbationKernel& kernel);

// -(1/K) * sum_j ln(K * Q(c_j)); errors on any zero entry. An all-equal
// marginal is uniform by construction and returns exactly 0.
double kl_qpm(const PerturbedMarginal& marginal);

// Independently resamples each position's index from its kernel row. The draw
// at a position depends only on (seed, position), so partitioning and
// evaluation order cannot change the result.
QuantizedMap sample_perturbed(const QuantizedMap& qm, const Codebook& cb,
                              const PerturbationKernel& kernel, std::uint64_t seed);

struct Eps1Bounds {
  double lower = 0.0;   // exp(d_min - d_max) / K
  double upper = 0.0;   // exp(d_max - d_min) / K
  double d_min = 0.0;
  double d_max = 0.0;
};

// Bounds on Q(. | eps = 1) from the extremal pairwise distances.
Eps1Bounds bounds_eps1(const Codebook& cb, KernelMetric metric = KernelMetric::euclidean);

DropoutKL kl_dropout(double p);

struct CompareRow {
  std::string kind;  // "qpm" or "dropout"
  double param = 0.0;
  double kl = 0.0;
};

// QPM-vs-dropout perturbation radii over parameter grids.
std::vector<CompareRow> compare_report(const Codebook& cb, const std::vector<double>& eps_grid,
                                       const std::vector<double>& p_grid,
                                       KernelMetric metric = KernelMetric::euclidean);

// CSV / text emitters for the formats above.
void write_kernel_text(std::ostream& os, const PerturbationKernel& kernel);
void write_marginal_csv(std::ostream& os, const PerturbedMarginal& marginal);
void write_compare_csv(std::ostream& os, const std::vector<CompareRow>& rows);

}  // namespace vqlab
