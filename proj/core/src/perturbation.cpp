#include "vqlab/perturbation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "vqlab/io.hpp"
#include "vqlab/rng.hpp"

namespace vqlab {

std::string kernel_metric_name(KernelMetric m) {
  return m == KernelMetric::euclidean ? "euclidean" : "squared_euclidean";
}

KernelMetric kernel_metric_from_name(const std::string& name) {
  if (name == "euclidean") return KernelMetric::euclidean;
  if (name == "squared_euclidean") return KernelMetric::squared_euclidean;
  throw std::runtime_error("unknown kernel metric: " + name);
}

namespace {

std::vector<double> pairwise_distances(const Codebook& cb, KernelMetric metric) {
  const int K = cb.K, D = cb.D;
  auto cv = cb.codewords.values();
  std::vector<double> dist(static_cast<std::size_t>(K) * K, 0.0);
  for (int i = 0; i < K; ++i) {
    for (int j = i + 1; j < K; ++j) {
      double acc = 0.0;
      for (int d = 0; d < D; ++d) {
        const double diff = cv[static_cast<std::size_t>(i) * D + d] - cv[static_cast<std::size_t>(j) * D + d];
        acc += diff * diff;
      }
      const double v = metric == KernelMetric::euclidean ? std::sqrt(acc) : acc;
      dist[static_cast<std::size_t>(i) * K + j] = v;
      dist[static_cast<std::size_t>(j) * K + i] = v;
    }
  }
  return dist;
}

}  // namespace

PerturbationKernel transition_kernel(const Codebook& cb, double eps, KernelMetric metric) {
  if (!(eps >= 0.0 && eps <= 1.0)) {
    throw std::invalid_argument("transition_kernel: eps must be in [0, 1], got " + format_real(eps));
  }
  if (cb.K < 2) {
    throw std::invalid_argument("transition_kernel: K must be >= 2 (normalizer Z_i is empty for K = 1)");
  }
  PerturbationKernel kernel;
  kernel.K = cb.K;
  kernel.eps = eps;
  kernel.dist = pairwise_distances(cb, metric);
  kernel.pi.assign(static_cast<std::size_t>(cb.K) * cb.K, 0.0);

  const int K = cb.K;
  std::vector<double> w(K);
  for (int i = 0; i < K; ++i) {
    // Shift by the row's minimum distance so Z_i cannot underflow to zero.
    double dmin = std::numeric_limits<double>::infinity();
    for (int j = 0; j < K; ++j) {
      if (j != i) dmin = std::min(dmin, kernel.dist[static_cast<std::size_t>(i) * K + j]);
    }
    double z = 0.0;
    for (int j = 0; j < K; ++j) {
      if (j == i) continue;
      w[j] = std::exp(dmin - kernel.dist[static_cast<std::size_t>(i) * K + j]);
      z += w[j];
    }
    double* row = &kernel.pi[static_cast<std::size_t>(i) * K];
    row[i] = 1.0 - eps;
    for (int j = 0; j < K; ++j) {
      if (j != i) row[j] = eps * (w[j] / z);
    }
  }
  return kernel;
}

PerturbedMarginal perturbed_marginal(const PerturbationKernel& kernel) {
  const int K = kernel.K;
  PerturbedMarginal m;
  m.eps = kernel.eps;
  m.q.assign(K, 0.0);
  // Diagonal first, then off-diagonals in row order: every column sums the
  // same value sequence when the codebook is equidistant, so the entries of a
  // uniform marginal come out bitwise identical.
  for (int j = 0; j < K; ++j) {
    double acc = kernel.pi[static_cast<std::size_t>(j) * K + j];
    for (int i = 0; i < K; ++i) {
      if (i != j) acc += kernel.pi[static_cast<std::size_t>(i) * K + j];
    }
    m.q[j] = acc / static_cast<double>(K);
  }
  return m;
}

double kl_qpm(const PerturbedMarginal& marginal) {
  const int K = static_cast<int>(marginal.q.size());
  if (K == 0) throw std::invalid_argument("kl_qpm: empty marginal");
  for (int j = 0; j < K; ++j) {
    if (!(marginal.q[j] > 0.0)) {
      throw std::runtime_error("kl_qpm: Q(" + std::to_string(j) + ") = " + format_real(marginal.q[j]) +
                               " is not positive");
    }
  }
  const bool all_equal = std::all_of(marginal.q.begin(), marginal.q.end(),
                                     [&](double v) { return v == marginal.q[0]; });
  if (all_equal) return 0.0;  // uniform by construction
  double acc = 0.0;
  for (int j = 0; j < K; ++j) acc += std::log(static_cast<double>(K) * marginal.q[j]);
  return -acc / static_cast<double>(K);
}

QuantizedMap sample_perturbed(const QuantizedMap& qm, const Codebook& cb,
                              const PerturbationKernel& kernel, std::uint64_t seed) {
  if (kernel.K != cb.K) {
    throw std::invalid_argument("sample_perturbed: kernel K = " + std::to_string(kernel.K) +
                                " does not match codebook K = " + std::to_string(cb.K));
  }
  const int K = kernel.K, D = cb.D;
  QuantizedMap out;
  out.H = qm.H;
  out.W = qm.W;
  out.D = qm.D;
  out.indices.resize(qm.indices.size());
  out.source = qm.source;
  auto cv = cb.codewords.values();
  std::vector<double> deq(static_cast<std::size_t>(qm.H) * qm.W * D);
  RngStream rng(seed, /*tag=*/0x71706d);
  for (std::size_t p = 0; p < qm.indices.size(); ++p) {
    const int i = qm.indices[p];
    if (i < 0 || i >= K) {
      throw std::invalid_argument("sample_perturbed: index " + std::to_string(i) + " out of range");
    }
    const std::span<const double> row{&kernel.pi[static_cast<std::size_t>(i) * K], static_cast<std::size_t>(K)};
    const int j = kernel.eps == 0.0 ? i : rng.categorical(p, row);
    out.indices[p] = j;
    const double* cj = &cv[static_cast<std::size_t>(j) * D];
    std::copy(cj, cj + D, &deq[p * D]);
  }
  out.dequantized = Tensor({qm.H, qm.W, D}, std::move(deq));
  return out;
}

Eps1Bounds bounds_eps1(const Codebook& cb, KernelMetric metric) {
  if (cb.K < 2) throw std::invalid_argument("bounds_eps1: K must be >= 2");
  const std::vector<double> dist = pairwise_distances(cb, metric);
  const int K = cb.K;
  double dmin = std::numeric_limits<double>::infinity();
  double dmax = 0.0;
  for (int i = 0; i < K; ++i) {
    for (int j = i + 1; j < K; ++j) {
      const double d = dist[static_cast<std::size_t>(i) * K + j];
      dmin = std::min(dmin, d);
      dmax = std::max(dmax, d);
    }
  }
  if (!(dmin > 0.0)) {
    throw std::runtime_error("bounds_eps1: duplicate codewords (d_min = 0) violate the codebook contract");
  }
  if (!std::isfinite(dmax)) {
    throw std::runtime_error("bounds_eps1: non-finite pairwise distance");
  }
  Eps1Bounds b;
  b.d_min = dmin;
  b.d_max = dmax;
  b.lower = std::exp(dmin - dmax) / static_cast<double>(K);
  b.upper = std::exp(dmax - dmin) / static_cast<double>(K);
  return b;
}

DropoutKL kl_dropout(double p) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw std::invalid_argument("kl_dropout: p must be in [0, 1), got " + format_real(p) +
                                " (the divergence is unbounded as p -> 1)");
  }
  DropoutKL d;
  d.p = p;
  d.sigma0_sq = 1.0;
  d.kl = 0.5 * (p / (1.0 - p) + std::log1p(-p));
  return d;
}

std::vector<CompareRow> compare_report(const Codebook& cb, const std::vector<double>& eps_grid,
                                       const std::vector<double>& p_grid, KernelMetric metric) {
  std::vector<CompareRow> rows;
  rows.reserve(eps_grid.size() + p_grid.size());
  for (double eps : eps_grid) {
    const PerturbationKernel kernel = transition_kernel(cb, eps, metric);
    rows.push_back({"qpm", eps, kl_qpm(perturbed_marginal(kernel))});
  }
  for (double p : p_grid) {
    rows.push_back({"dropout", p, kl_dropout(p).kl});
  }
  return rows;
}

void write_kernel_text(std::ostream& os, const PerturbationKernel& kernel) {
  const int K = kernel.K;
  for (int i = 0; i < K; ++i) {
    for (int j = 0; j < K; ++j) {
      os << format_real(kernel.pi[static_cast<std::size_t>(i) * K + j]) << (j + 1 == K ? "\n" : " ");
    }
  }
}

void write_marginal_csv(std::ostream& os, const PerturbedMarginal& marginal) {
  os << "j,Q\n";
  for (std::size_t j = 0; j < marginal.q.size(); ++j) {
    os << j << "," << format_real(marginal.q[j]) << "\n";
  }
}

void write_compare_csv(std::ostream& os, const std::vector<CompareRow>& rows) {
  os << "kind,param,kl\n";
  for (const auto& r : rows) {
    os << r.kind << "," << format_real(r.param) << "," << format_real(r.kl) << "\n";
  }
}

}  // namespace vqlab
