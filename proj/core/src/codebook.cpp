#include "vqlab/codebook.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "vqlab/io.hpp"
#include "vqlab/rng.hpp"

namespace vqlab {

std::string metric_name(Metric m) {
  switch (m) {
    case Metric::euclidean: return "euclidean";
  }
  return "euclidean";
}

Metric metric_from_name(const std::string& name) {
  if (name == "euclidean") return Metric::euclidean;
  throw std::runtime_error("unknown codebook metric: " + name);
}

namespace {

bool rows_equal(std::span<const double> v, int D, int a, int b) {
  for (int d = 0; d < D; ++d) {
    if (v[static_cast<std::size_t>(a) * D + d] != v[static_cast<std::size_t>(b) * D + d]) return false;
  }
  return true;
}

// Returns indices of rows that exactly duplicate an earlier row.
std::vector<int> duplicate_rows(const Tensor& codewords) {
  const int K = codewords.dim(0), D = codewords.dim(1);
  auto v = codewords.values();
  std::vector<int> dups;
  for (int i = 1; i < K; ++i) {
    for (int j = 0; j < i; ++j) {
      if (rows_equal(v, D, i, j)) {
        dups.push_back(i);
        break;
      }
    }
  }
  return dups;
}

double sqdist_rows(std::span<const double> a, std::size_t ai, std::span<const double> b,
                   std::size_t bi, int D) {
  double acc = 0.0;
  for (int d = 0; d < D; ++d) {
    const double diff = a[ai * D + d] - b[bi * D + d];
    acc += diff * diff;
  }
  return acc;
}

Tensor kmeans_codewords(int K, int D, const Tensor& sample, const RngStream& rng) {
  const int M = sample.dim(0);
  auto sv = sample.values();

  // Distance-weighted seeding, then Lloyd iterations.
  std::vector<int> chosen;
  chosen.push_back(static_cast<int>(rng.below(0, static_cast<std::uint64_t>(M))));
  std::vector<double> best_d(M, std::numeric_limits<double>::infinity());
  for (int k = 1; k < K; ++k) {
    double total = 0.0;
    for (int m = 0; m < M; ++m) {
      const double d = sqdist_rows(sv, static_cast<std::size_t>(m), sv,
                                   static_cast<std::size_t>(chosen.back()), D);
      best_d[m] = std::min(best_d[m], d);
      total += best_d[m];
    }
    int pick;
    if (total > 0.0) {
      const double u = rng.uniform(static_cast<std::uint64_t>(k)) * total;
      double cum = 0.0;
      pick = M - 1;
      for (int m = 0; m < M; ++m) {
        cum += best_d[m];
        if (u < cum) {
          pick = m;
          break;
        }
      }
    } else {
      pick = (chosen.back() + 1) % M;
    }
    chosen.push_back(pick);
  }

  std::vector<double> centers(static_cast<std::size_t>(K) * D);
  for (int k = 0; k < K; ++k) {
    for (int d = 0; d < D; ++d) {
      centers[static_cast<std::size_t>(k) * D + d] = sv[static_cast<std::size_t>(chosen[k]) * D + d];
    }
  }

  std::vector<int> assign(M, -1);
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    for (int m = 0; m < M; ++m) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int k = 0; k < K; ++k) {
        double acc = 0.0;
        for (int d = 0; d < D; ++d) {
          const double diff = sv[static_cast<std::size_t>(m) * D + d] -
                              centers[static_cast<std::size_t>(k) * D + d];
          acc += diff * diff;
        }
        if (acc < bd) {
          bd = acc;
          best = k;
        }
      }
      if (assign[m] != best) {
        assign[m] = best;
        changed = true;
      }
    }
    if (!changed) break;
    std::vector<double> sums(static_cast<std::size_t>(K) * D, 0.0);
    std::vector<int> counts(K, 0);
    for (int m = 0; m < M; ++m) {
      ++counts[assign[m]];
      for (int d = 0; d < D; ++d) {
        sums[static_cast<std::size_t>(assign[m]) * D + d] += sv[static_cast<std::size_t>(m) * D + d];
      }
    }
    for (int k = 0; k < K; ++k) {
      if (counts[k] == 0) continue;  // empty cluster keeps its previous center
      for (int d = 0; d < D; ++d) {
        centers[static_cast<std::size_t>(k) * D + d] = sums[static_cast<std::size_t>(k) * D + d] / counts[k];
      }
    }
  }
  return Tensor({K, D}, std::move(centers));
}

}  // namespace

Codebook init_codebook(int K, int D, InitScheme scheme, std::uint64_t seed, const Tensor* sample) {
  if (K < 2) throw std::invalid_argument("init_codebook: K must be >= 2, got " + std::to_string(K));
  if (D < 1) throw std::invalid_argument("init_codebook: D must be >= 1, got " + std::to_string(D));
  RngStream rng(seed, /*tag=*/0x636f6465);

  Tensor codewords;
  if (scheme == InitScheme::uniform_random) {
    std::vector<double> data(static_cast<std::size_t>(K) * D);
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = rng.uniform_in(i, -1.0, 1.0);
    codewords = Tensor({K, D}, std::move(data));
  } else {
    if (sample == nullptr || sample->rank() != 2 || sample->dim(1) != D) {
      throw std::invalid_argument("init_codebook: kmeans_on_sample requires a [M, " +
                                  std::to_string(D) + "] sample");
    }
    if (sample->dim(0) < K) {
      throw std::invalid_argument("init_codebook: kmeans sample has " + std::to_string(sample->dim(0)) +
                                  " vectors, need >= " + std::to_string(K));
    }
    codewords = kmeans_codewords(K, D, *sample, rng.sub(1));
  }

  for (int attempt = 0; attempt < 4; ++attempt) {
    const std::vector<int> dups = duplicate_rows(codewords);
    if (dups.empty()) {
      Codebook cb;
      cb.K = K;
      cb.D = D;
      cb.codewords = codewords;
      return cb;
    }
    if (attempt == 3) {
      throw std::runtime_error("init_codebook: duplicate codewords persist after 3 perturbations");
    }
    RngStream prng = rng.sub(0x70 + static_cast<std::uint64_t>(attempt));
    auto v = codewords.values();
    for (int i : dups) {
      for (int d = 0; d < D; ++d) {
        const std::size_t at = static_cast<std::size_t>(i) * D + d;
        v[at] += 1e-4 * (prng.uniform(at) - 0.5);
      }
    }
  }
  throw std::logic_error("init_codebook: unreachable");
}

void check_distinct_codewords(const Codebook& cb) {
  const std::vector<int> dups = duplicate_rows(cb.codewords);
  if (!dups.empty()) {
    throw std::runtime_error("codebook: duplicate codeword at index " + std::to_string(dups.front()));
  }
}

QuantizedMap quantize(const Tensor& z_hwd, const Codebook& cb) {
  if (z_hwd.rank() != 3 || z_hwd.dim(2) != cb.D) {
    throw std::invalid_argument("quantize: features " + shape_string(z_hwd.shape()) +
                                " do not match codeword dimension " + std::to_string(cb.D));
  }
  const int H = z_hwd.dim(0), W = z_hwd.dim(1), D = cb.D, K = cb.K;
  QuantizedMap qm;
  qm.H = H;
  qm.W = W;
  qm.D = D;
  qm.indices.resize(static_cast<std::size_t>(H) * W);
  auto zv = z_hwd.values();
  auto cv = cb.codewords.values();
  std::vector<double> deq(static_cast<std::size_t>(H) * W * D);
  for (std::size_t p = 0; p < qm.indices.size(); ++p) {
    const double* zp = &zv[p * D];
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) {
      const double* ck = &cv[static_cast<std::size_t>(k) * D];
      double acc = 0.0;
      for (int d = 0; d < D; ++d) {
        const double diff = zp[d] - ck[d];
        acc += diff * diff;
      }
      if (acc < bd) {  // strict: ties keep the lowest index
        bd = acc;
        best = k;
      }
    }
    qm.indices[p] = best;
    const double* ck = &cv[static_cast<std::size_t>(best) * D];
    std::copy(ck, ck + D, &deq[p * D]);
  }
  qm.dequantized = Tensor({H, W, D}, std::move(deq));
  qm.source = z_hwd.detached();
  return qm;
}

Tensor ste_dequantize(const Tensor& z_hwd, const Codebook& cb) {
  return ste_dequantize(z_hwd, quantize(z_hwd.detached(), cb));
}

Tensor ste_dequantize(const Tensor& z_hwd, const QuantizedMap& qm) {
  return ste_apply(z_hwd, qm.dequantized);
}

VqLosses vq_losses(const Tensor& z_hwd, const QuantizedMap& qm, const Codebook& cb, double beta) {
  const int P = qm.H * qm.W;
  Tensor z_flat = reshape(z_hwd, {P, qm.D});
  Tensor gathered = gather_rows(cb.codewords, qm.indices);
  VqLosses out;
  out.codebook_loss = squared_l2_distance(detach(z_flat), gathered);
  out.commitment_loss = scale(squared_l2_distance(z_flat, detach(gathered)), beta);
  return out;
}

Tensor entropy_regularizer(const Tensor& z_hwd, const Codebook& cb, double tau_q) {
  if (tau_q <= 0.0) throw std::invalid_argument("entropy_regularizer: tau_q must be > 0");
  const int P = z_hwd.dim(0) * z_hwd.dim(1);
  Tensor z_flat = reshape(z_hwd, {P, z_hwd.dim(2)});
  Tensor logits = scale(pairwise_sqdist(z_flat, cb.codewords), -1.0 / tau_q);
  Tensor logp = log_softmax(logits, 1);
  Tensor p = exp(logp);
  Tensor per_sample_neg_entropy = sum_axis(mul(p, logp), 1);  // [P]
  Tensor mean_entropy = neg(mean(per_sample_neg_entropy));
  Tensor p_bar = mean_axis(p, 0);  // [K]
  Tensor usage_entropy = neg(sum(xlogx(p_bar)));
  return sub(mean_entropy, usage_entropy);
}

UtilizationRecord make_utilization_record(long long step, const std::vector<int>& indices, int K) {
  UtilizationRecord rec;
  rec.step = step;
  rec.histogram.assign(static_cast<std::size_t>(K), 0);
  for (int idx : indices) {
    if (idx < 0 || idx >= K) {
      throw std::invalid_argument("utilization: index " + std::to_string(idx) + " out of range [0, " +
                                  std::to_string(K) + ")");
    }
    ++rec.histogram[static_cast<std::size_t>(idx)];
  }
  long long nonzero = 0;
  for (long long c : rec.histogram) nonzero += c > 0 ? 1 : 0;
  rec.utilization = static_cast<double>(nonzero) / static_cast<double>(K);
  return rec;
}

std::vector<UtilizationRecord> utilization_series(const std::vector<QuantizedMap>& history, int K) {
  std::vector<UtilizationRecord> out;
  out.reserve(history.size());
  for (std::size_t step = 0; step < history.size(); ++step) {
    out.push_back(make_utilization_record(static_cast<long long>(step), history[step].indices, K));
  }
  return out;
}

double histogram_entropy(const std::vector<long long>& histogram) {
  long long total = 0;
  for (long long c : histogram) total += c;
  if (total == 0) return 0.0;
  double h = 0.0;
  for (long long c : histogram) {
    if (c > 0) {
      const double p = static_cast<double>(c) / static_cast<double>(total);
      h -= p * std::log(p);
    }
  }
  return h;
}

namespace {

// Cyclic Jacobi eigensolver for a symmetric matrix; returns eigenvalues and
// the corresponding column eigenvectors, sorted by descending eigenvalue.
void symmetric_eigen(std::vector<double> a, int n, std::vector<double>& eigvals,
                     std::vector<double>& eigvecs) {
  std::vector<double> v(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i) * n + i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += a[static_cast<std::size_t>(p) * n + q] * a[static_cast<std::size_t>(p) * n + q];
    if (off < 1e-24) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = a[static_cast<std::size_t>(p) * n + q];
        if (std::fabs(apq) < 1e-300) continue;
        const double app = a[static_cast<std::size_t>(p) * n + p];
        const double aqq = a[static_cast<std::size_t>(q) * n + q];
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = a[static_cast<std::size_t>(k) * n + p];
          const double akq = a[static_cast<std::size_t>(k) * n + q];
          a[static_cast<std::size_t>(k) * n + p] = c * akp - s * akq;
          a[static_cast<std::size_t>(k) * n + q] = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = a[static_cast<std::size_t>(p) * n + k];
          const double aqk = a[static_cast<std::size_t>(q) * n + k];
          a[static_cast<std::size_t>(p) * n + k] = c * apk - s * aqk;
          a[static_cast<std::size_t>(q) * n + k] = s * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {
          const double vkp = v[static_cast<std::size_t>(k) * n + p];
          const double vkq = v[static_cast<std::size_t>(k) * n + q];
          v[static_cast<std::size_t>(k) * n + p] = c * vkp - s * vkq;
          v[static_cast<std::size_t>(k) * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](int x, int y) {
    return a[static_cast<std::size_t>(x) * n + x] > a[static_cast<std::size_t>(y) * n + y];
  });
  eigvals.resize(n);
  eigvecs.assign(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) {
    eigvals[i] = a[static_cast<std::size_t>(order[i]) * n + order[i]];
    for (int k = 0; k < n; ++k) {
      eigvecs[static_cast<std::size_t>(k) * n + i] = v[static_cast<std::size_t>(k) * n + order[i]];
    }
  }
}

}  // namespace

std::vector<PcaPoint> pca_export(const Codebook& cb, const std::vector<bool>& active_mask) {
  if (cb.K < 2) throw std::invalid_argument("pca_export: K must be >= 2");
  if (static_cast<int>(active_mask.size()) != cb.K) {
    throw std::invalid_argument("pca_export: active mask length " + std::to_string(active_mask.size()) +
                                " does not match K = " + std::to_string(cb.K));
  }
  const int K = cb.K, D = cb.D;
  auto cv = cb.codewords.values();
  std::vector<double> mean(D, 0.0);
  for (int k = 0; k < K; ++k)
    for (int d = 0; d < D; ++d) mean[d] += cv[static_cast<std::size_t>(k) * D + d];
  for (int d = 0; d < D; ++d) mean[d] /= K;
  std::vector<double> centered(static_cast<std::size_t>(K) * D);
  for (int k = 0; k < K; ++k)
    for (int d = 0; d < D; ++d)
      centered[static_cast<std::size_t>(k) * D + d] = cv[static_cast<std::size_t>(k) * D + d] - mean[d];

  const int ncomp = std::min(2, D);
  std::vector<double> comps(static_cast<std::size_t>(2) * D, 0.0);  // two rows of length D
  if (D == 1) {
    comps[0] = 1.0;
  } else {
    std::vector<double> cov(static_cast<std::size_t>(D) * D, 0.0);
    for (int k = 0; k < K; ++k) {
      for (int i = 0; i < D; ++i) {
        const double ci = centered[static_cast<std::size_t>(k) * D + i];
        for (int j = 0; j < D; ++j) {
          cov[static_cast<std::size_t>(i) * D + j] += ci * centered[static_cast<std::size_t>(k) * D + j];
        }
      }
    }
    std::vector<double> eigvals, eigvecs;
    symmetric_eigen(cov, D, eigvals, eigvecs);
    for (int c = 0; c < ncomp; ++c) {
      for (int d = 0; d < D; ++d) comps[static_cast<std::size_t>(c) * D + d] = eigvecs[static_cast<std::size_t>(d) * D + c];
    }
  }
  // Sign convention: largest-magnitude coordinate of each component positive.
  for (int c = 0; c < ncomp; ++c) {
    int arg = 0;
    for (int d = 1; d < D; ++d) {
      if (std::fabs(comps[static_cast<std::size_t>(c) * D + d]) > std::fabs(comps[static_cast<std::size_t>(c) * D + arg])) arg = d;
    }
    if (comps[static_cast<std::size_t>(c) * D + arg] < 0.0) {
      for (int d = 0; d < D; ++d) comps[static_cast<std::size_t>(c) * D + d] = -comps[static_cast<std::size_t>(c) * D + d];
    }
  }

  std::vector<PcaPoint> out(K);
  for (int k = 0; k < K; ++k) {
    double x = 0.0, y = 0.0;
    for (int d = 0; d < D; ++d) {
      x += centered[static_cast<std::size_t>(k) * D + d] * comps[d];
      y += centered[static_cast<std::size_t>(k) * D + d] * comps[static_cast<std::size_t>(D) + d];
    }
    out[k] = PcaPoint{x, D >= 2 ? y : 0.0, active_mask[static_cast<std::size_t>(k)]};
  }
  return out;
}

void write_codebook_text(std::ostream& os, const Codebook& cb) {
  os << cb.K << " " << cb.D << " " << metric_name(cb.metric) << "\n";
  auto v = cb.codewords.values();
  for (int k = 0; k < cb.K; ++k) {
    for (int d = 0; d < cb.D; ++d) {
      os << format_real(v[static_cast<std::size_t>(k) * cb.D + d]) << (d + 1 == cb.D ? "\n" : " ");
    }
  }
}

void save_codebook(const std::string& path, const Codebook& cb) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  write_codebook_text(os, cb);
}

Codebook load_codebook(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open: " + path);
  int K, D;
  std::string metric;
  if (!(is >> K >> D >> metric)) throw std::runtime_error(path + ": malformed codebook header");
  if (K < 2 || D < 1) throw std::runtime_error(path + ": invalid codebook dims K=" + std::to_string(K) + " D=" + std::to_string(D));
  std::vector<double> data(static_cast<std::size_t>(K) * D);
  for (auto& v : data) {
    if (!(is >> v)) throw std::runtime_error(path + ": truncated codebook data");
  }
  Codebook cb;
  cb.K = K;
  cb.D = D;
  cb.metric = metric_from_name(metric);
  cb.codewords = Tensor({K, D}, std::move(data));
  return cb;
}

}  // namespace vqlab
