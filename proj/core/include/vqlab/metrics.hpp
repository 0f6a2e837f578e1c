#pragma once

#include <span>
#include <vector>

namespace vqlab {

// Pair of equal-shape binary masks (entries 0/1, row-major).
struct MaskPair {
  int H = 0, W = 0;
  std::vector<int> pred;
  std::vector<int> gt;
};

struct OverlapScores {
  double dice = 0.0;
  double jaccard = 0.0;
};

// dice = 2|A^B| / (|A|+|B|), jaccard = |A^B| / |AuB|. Two empty masks score
// (1, 1) by convention.
OverlapScores dice_jaccard(const MaskPair& mp);

struct SurfaceScores {
  double hd95 = 0.0;
  double asd = 0.0;
};

// Boundary pixels are mask pixels 4-adjacent to background (the array edge
// counts as background). Directed distances from each boundary pixel to the
// other mask's boundary are pooled both ways; HD95 is the 95th percentile
// (linear interpolation) of the pool and ASD its mean. Errors if either mask
// is empty.
SurfaceScores surface_metrics(const MaskPair& mp);

// Paired two-tailed t-test on index-matched score lists.
struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  bool degenerate = false;  // zero variance of the paired differences
};

TTestResult paired_t_test(std::span<const double> scores_a, std::span<const double> scores_b);

// Building blocks, exposed for direct use.
double regularized_incomplete_beta(double x, double a, double b);
double student_t_cdf(double t, double dof);
double percentile_linear(std::vector<double> values, double q);

}  // namespace vqlab
