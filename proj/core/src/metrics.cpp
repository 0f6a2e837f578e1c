#include "vqlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace vqlab {

namespace {

void validate_pair(const MaskPair& mp) {
  const std::size_t n = static_cast<std::size_t>(mp.H) * mp.W;
  if (mp.H <= 0 || mp.W <= 0 || mp.pred.size() != n || mp.gt.size() != n) {
    throw std::invalid_argument("mask pair: inconsistent dimensions H=" + std::to_string(mp.H) +
                                " W=" + std::to_string(mp.W));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if ((mp.pred[i] != 0 && mp.pred[i] != 1) || (mp.gt[i] != 0 && mp.gt[i] != 1)) {
      throw std::invalid_argument("mask pair: entries must be 0 or 1");
    }
  }
}

std::vector<std::pair<int, int>> boundary_pixels(const std::vector<int>& mask, int H, int W) {
  std::vector<std::pair<int, int>> out;
  auto at = [&](int r, int c) -> int {
    if (r < 0 || r >= H || c < 0 || c >= W) return 0;  // outside counts as background
    return mask[static_cast<std::size_t>(r) * W + c];
  };
  for (int r = 0; r < H; ++r) {
    for (int c = 0; c < W; ++c) {
      if (!at(r, c)) continue;
      if (!at(r - 1, c) || !at(r + 1, c) || !at(r, c - 1) || !at(r, c + 1)) out.emplace_back(r, c);
    }
  }
  return out;
}

void directed_distances(const std::vector<std::pair<int, int>>& from,
                        const std::vector<std::pair<int, int>>& to,
                        std::vector<double>& pool) {
  for (const auto& [r, c] : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& [r2, c2] : to) {
      const double dr = r - r2, dc = c - c2;
      best = std::min(best, dr * dr + dc * dc);
    }
    pool.push_back(std::sqrt(best));
  }
}

}  // namespace

OverlapScores dice_jaccard(const MaskPair& mp) {
  validate_pair(mp);
  long long inter = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < mp.pred.size(); ++i) {
    a += mp.pred[i];
    b += mp.gt[i];
    inter += mp.pred[i] & mp.gt[i];
  }
  if (a + b == 0) return {1.0, 1.0};  // both empty
  const long long uni = a + b - inter;
  OverlapScores s;
  s.dice = 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
  s.jaccard = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
  return s;
}

SurfaceScores surface_metrics(const MaskPair& mp) {
  validate_pair(mp);
  const auto ba = boundary_pixels(mp.pred, mp.H, mp.W);
  const auto bb = boundary_pixels(mp.gt, mp.H, mp.W);
  if (ba.empty() || bb.empty()) {
    throw std::invalid_argument(std::string("surface_metrics: ") +
                                (ba.empty() ? "pred" : "gt") + " mask is empty, boundary undefined");
  }
  std::vector<double> pool;
  pool.reserve(ba.size() + bb.size());
  directed_distances(ba, bb, pool);
  directed_distances(bb, ba, pool);
  // Canonical order keeps both metrics exactly symmetric in (pred, gt).
  std::sort(pool.begin(), pool.end());
  SurfaceScores s;
  s.hd95 = percentile_linear(pool, 0.95);
  double acc = 0.0;
  for (double d : pool) acc += d;
  s.asd = acc / static_cast<double>(pool.size());
  return s;
}

double percentile_linear(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile: empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("percentile: q must be in [0, 1]");
  std::sort(values.begin(), values.end());
  const double rank = q * static_cast<double>(values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(rank);
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return values[lo] * (1.0 - frac) + values[hi] * frac;
}

namespace {

double log_beta(double a, double b) { return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b); }

// Continued fraction for the incomplete beta (modified Lentz).
double incomplete_beta_cf(double x, double a, double b) {
  const double tiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 500; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < tiny) d = tiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < 1e-15) break;
  }
  return h;
}

}  // namespace

double regularized_incomplete_beta(double x, double a, double b) {
  if (!(x >= 0.0 && x <= 1.0) || a <= 0.0 || b <= 0.0) {
    throw std::invalid_argument("regularized_incomplete_beta: invalid arguments");
  }
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double front = std::exp(a * std::log(x) + b * std::log(1.0 - x) - log_beta(a, b));
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return front * incomplete_beta_cf(x, a, b) / a;
  }
  return 1.0 - std::exp(b * std::log(1.0 - x) + a * std::log(x) - log_beta(a, b)) *
                   incomplete_beta_cf(1.0 - x, b, a) / b;
}

double student_t_cdf(double t, double dof) {
  if (dof <= 0.0) throw std::invalid_argument("student_t_cdf: dof must be > 0");
  const double x = dof / (t * t + dof);
  const double half_tail = 0.5 * regularized_incomplete_beta(x, dof / 2.0, 0.5);
  return t >= 0.0 ? 1.0 - half_tail : half_tail;
}

TTestResult paired_t_test(std::span<const double> scores_a, std::span<const double> scores_b) {
  if (scores_a.size() != scores_b.size()) {
    throw std::invalid_argument("paired_t_test: sample sizes differ (" + std::to_string(scores_a.size()) +
                                " vs " + std::to_string(scores_b.size()) + ")");
  }
  const std::size_t n = scores_a.size();
  if (n < 2) throw std::invalid_argument("paired_t_test: need at least 2 pairs");
  std::vector<double> d(n);
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    d[i] = scores_a[i] - scores_b[i];
    mean += d[i];
  }
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : d) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n - 1);

  TTestResult r;
  if (var == 0.0) {
    // Zero variance of the differences: t = +-inf with p = 0 when the shift is
    // nonzero; identical samples give t = 0, p = 1.
    r.degenerate = true;
    if (mean > 0.0) {
      r.t = std::numeric_limits<double>::infinity();
      r.p = 0.0;
    } else if (mean < 0.0) {
      r.t = -std::numeric_limits<double>::infinity();
      r.p = 0.0;
    } else {
      r.t = 0.0;
      r.p = 1.0;
    }
    return r;
  }
  const double dof = static_cast<double>(n - 1);
  r.t = mean / std::sqrt(var / static_cast<double>(n));
  r.p = regularized_incomplete_beta(dof / (r.t * r.t + dof), dof / 2.0, 0.5);
  return r;
}

}  // namespace vqlab
