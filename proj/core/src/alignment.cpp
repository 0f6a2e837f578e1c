#include "vqlab/alignment.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "vqlab/rng.hpp"

namespace vqlab {

PfaAdapter make_pfa_adapter(int feat_dim, int out_channels, int out_h, int out_w,
                            std::uint64_t seed) {
  if (feat_dim < 1 || out_channels < 1 || out_h < 1 || out_w < 1) {
    throw std::invalid_argument("make_pfa_adapter: dimensions must be positive");
  }
  RngStream rng(seed, /*tag=*/0x706661);
  const double sd = std::sqrt(2.0 / feat_dim);
  std::vector<double> w(static_cast<std::size_t>(out_channels) * feat_dim);
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = sd * rng.normal(i);
  PfaAdapter pfa;
  pfa.out_h = out_h;
  pfa.out_w = out_w;
  pfa.w = Tensor({out_channels, feat_dim, 1, 1}, std::move(w));
  pfa.b = Tensor::zeros({out_channels});
  return pfa;
}

PatchFeatureMap pfa_project(const Tensor& vq_features_hwd, const PfaAdapter& pfa) {
  if (vq_features_hwd.rank() != 3 || vq_features_hwd.dim(2) != pfa.w.dim(1)) {
    throw std::invalid_argument("pfa_project: features " + shape_string(vq_features_hwd.shape()) +
                                " do not match adapter input dim " + std::to_string(pfa.w.dim(1)));
  }
  const int h = vq_features_hwd.dim(0), w = vq_features_hwd.dim(1), d = vq_features_hwd.dim(2);
  Tensor x = nhwc_to_nchw(reshape(vq_features_hwd, {1, h, w, d}));
  x = nn_resize(x, pfa.out_h, pfa.out_w);
  x = conv2d(x, pfa.w, /*stride=*/1, /*pad=*/0);
  x = add_channel_bias(x, pfa.b);
  x = nchw_to_nhwc(x);
  return PatchFeatureMap{reshape(x, {pfa.out_h, pfa.out_w, pfa.w.dim(0)})};
}

namespace {

void check_nonzero_rows(const Tensor& flat, const char* which) {
  const int p = flat.dim(0), c = flat.dim(1);
  auto v = flat.values();
  for (int i = 0; i < p; ++i) {
    double nsq = 0.0;
    for (int j = 0; j < c; ++j) {
      const double x = v[static_cast<std::size_t>(i) * c + j];
      nsq += x * x;
    }
    if (nsq == 0.0) {
      throw std::invalid_argument(std::string("contrastive_align_loss: zero-norm ") + which +
                                  " patch at position " + std::to_string(i));
    }
  }
}

}  // namespace

Tensor contrastive_align_loss(const PatchFeatureMap& f_pfa, const PatchFeatureMap& f_fm,
                              double tau) {
  if (tau <= 0.0) throw std::invalid_argument("contrastive_align_loss: tau must be > 0");
  if (f_pfa.features.shape() != f_fm.features.shape()) {
    throw std::invalid_argument("contrastive_align_loss: incompatible shapes " +
                                shape_string(f_pfa.features.shape()) + " and " +
                                shape_string(f_fm.features.shape()));
  }
  const int p = f_pfa.height() * f_pfa.width();
  const int c = f_pfa.channels();
  Tensor a = reshape(f_pfa.features, {p, c});
  Tensor b = reshape(f_fm.features, {p, c});
  check_nonzero_rows(a, "pfa");
  check_nonzero_rows(b, "fm");
  Tensor u = normalize(a, 1);
  Tensor v = normalize(b, 1);
  Tensor sims = matmul(u, transpose2d(v));          // [P, P], cosine similarities
  Tensor lsm = log_softmax(scale(sims, 1.0 / tau), 1);
  return neg(mean(diagonal(lsm)));
}

FrozenExtractor make_frozen_extractor(int out_channels, std::uint64_t seed) {
  if (out_channels < 1) throw std::invalid_argument("make_frozen_extractor: out_channels must be >= 1");
  const int hidden = 8;
  RngStream rng(seed, /*tag=*/0x666d);
  FrozenExtractor fe;
  fe.seed = seed;
  fe.out_channels = out_channels;
  auto fill_normal = [](Tensor& t, const RngStream& s, double sd) {
    auto v = t.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = sd * s.normal(i);
  };
  fe.w1 = Tensor::zeros({hidden, 1, 3, 3});
  fe.b1 = Tensor::zeros({hidden});
  fe.w2 = Tensor::zeros({out_channels, hidden, 3, 3});
  fe.b2 = Tensor::zeros({out_channels});
  fill_normal(fe.w1, rng.sub(1), std::sqrt(2.0 / 9.0));
  fill_normal(fe.b1, rng.sub(2), 0.1);
  fill_normal(fe.w2, rng.sub(3), std::sqrt(2.0 / (9.0 * hidden)));
  fill_normal(fe.b2, rng.sub(4), 0.1);
  return fe;
}

PatchFeatureMap frozen_extract(const Tensor& image, const FrozenExtractor& fe) {
  Tensor x;
  if (image.rank() == 2) {
    x = reshape(image.detached(), {1, 1, image.dim(0), image.dim(1)});
  } else if (image.rank() == 4 && image.dim(0) == 1 && image.dim(1) == 1) {
    x = image.detached();
  } else {
    throw std::invalid_argument("frozen_extract: expected [H, W] or [1, 1, H, W] image, got " +
                                shape_string(image.shape()));
  }
  NoGradGuard guard;  // the extractor never contributes gradients
  x = relu(add_channel_bias(conv2d(x, fe.w1, /*stride=*/2, /*pad=*/1), fe.b1));
  x = add_channel_bias(conv2d(x, fe.w2, /*stride=*/2, /*pad=*/1), fe.b2);
  x = nchw_to_nhwc(x);
  return PatchFeatureMap{reshape(x, {x.dim(1), x.dim(2), fe.out_channels})};
}

}  // namespace vqlab
