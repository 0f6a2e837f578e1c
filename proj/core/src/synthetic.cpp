#include "vqlab/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "vqlab/rng.hpp"

namespace vqlab {

std::vector<SyntheticSample> gen_synthetic_dataset(int n, int size, std::uint64_t seed,
                                                   double labeled_ratio) {
  if (n < 4) throw std::invalid_argument("gen_synthetic_dataset: n must be >= 4, got " + std::to_string(n));
  if (size < 16) throw std::invalid_argument("gen_synthetic_dataset: size must be >= 16, got " + std::to_string(size));
  if (!(labeled_ratio >= 0.0 && labeled_ratio <= 1.0)) {
    throw std::invalid_argument("gen_synthetic_dataset: labeled_ratio must be in [0, 1]");
  }
  const int n_labeled = static_cast<int>(std::ceil(labeled_ratio * n));
  RngStream root(seed, /*tag=*/0xda7a);

  std::vector<SyntheticSample> out;
  out.reserve(n);
  const double s = static_cast<double>(size);
  for (int i = 0; i < n; ++i) {
    RngStream r = root.sub(static_cast<std::uint64_t>(i));
    const double base = r.uniform_in(0, 0.20, 0.45);
    const double cx = s * r.uniform_in(1, 0.30, 0.70);
    const double cy = s * r.uniform_in(2, 0.30, 0.70);
    const double ax = s * r.uniform_in(3, 0.12, 0.28);
    const double ay = s * r.uniform_in(4, 0.12, 0.28);
    const double theta = r.uniform_in(5, 0.0, 3.14159265358979323846);
    const double lift = r.uniform_in(6, 0.25, 0.50);
    const double ct = std::cos(theta), st = std::sin(theta);
    RngStream noise = r.sub(0x6e6f69);

    // Smooth intensity bumps make the background structured, so brightness
    // alone does not separate the lesion.
    constexpr int kBumps = 3;
    double bx[kBumps], by[kBumps], bs[kBumps], bamp[kBumps];
    RngStream rb = r.sub(0x62756d70);
    for (int b = 0; b < kBumps; ++b) {
      bx[b] = s * rb.uniform_in(4 * b, 0.0, 1.0);
      by[b] = s * rb.uniform_in(4 * b + 1, 0.0, 1.0);
      bs[b] = s * rb.uniform_in(4 * b + 2, 0.15, 0.35);
      bamp[b] = rb.uniform_in(4 * b + 3, -0.15, 0.15);
    }

    std::vector<double> img(static_cast<std::size_t>(size) * size);
    std::vector<int> mask(static_cast<std::size_t>(size) * size, 0);
    int inside_count = 0;
    for (int row = 0; row < size; ++row) {
      for (int col = 0; col < size; ++col) {
        const double dr = (row + 0.5) - cy;
        const double dc = (col + 0.5) - cx;
        const double rx = dc * ct + dr * st;
        const double ry = -dc * st + dr * ct;
        const bool inside = (rx / ax) * (rx / ax) + (ry / ay) * (ry / ay) <= 1.0;
        const std::size_t p = static_cast<std::size_t>(row) * size + col;
        double texture = 0.0;
        for (int b = 0; b < kBumps; ++b) {
          const double d2 = (row + 0.5 - by[b]) * (row + 0.5 - by[b]) +
                            (col + 0.5 - bx[b]) * (col + 0.5 - bx[b]);
          texture += bamp[b] * std::exp(-d2 / (2.0 * bs[b] * bs[b]));
        }
        double v = base + texture + (inside ? lift : 0.0) + 0.07 * noise.normal(p);
        img[p] = std::clamp(v, 0.0, 1.0);
        mask[p] = inside ? 1 : 0;
        inside_count += inside ? 1 : 0;
      }
    }
    if (inside_count == 0) {
      throw std::logic_error("gen_synthetic_dataset: empty lesion mask for sample " + std::to_string(i));
    }
    SyntheticSample sample;
    sample.image = Tensor({1, 1, size, size}, std::move(img));
    sample.mask = std::move(mask);
    sample.id = i;
    sample.labeled = i < n_labeled;
    out.push_back(std::move(sample));
  }
  return out;
}

}  // namespace vqlab
