#include <cmath>
#include <span>
#include <vector>

#include "doctest.h"
#include "vqlab/alignment.hpp"
#include "vqlab/rng.hpp"
#include "vqlab/tensor.hpp"

using namespace vqlab;

namespace {

Tensor random_tensor(std::vector<int> shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  RngStream rng(seed);
  Tensor t = Tensor::zeros(std::move(shape));
  auto v = t.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = rng.uniform_in(i, lo, hi);
  return t;
}

PfaAdapter identity_adapter(int d, int out_h, int out_w) {
  PfaAdapter pfa;
  pfa.out_h = out_h;
  pfa.out_w = out_w;
  pfa.w = Tensor::zeros({d, d, 1, 1});
  auto wv = pfa.w.values();
  for (int i = 0; i < d; ++i) wv[static_cast<std::size_t>(i) * d + i] = 1.0;
  pfa.b = Tensor::zeros({d});
  return pfa;
}

}  // namespace

TEST_CASE("pfa_project with identity map and matching dims is the identity") {
  Tensor x = random_tensor({4, 4, 3}, 1);
  const PfaAdapter pfa = identity_adapter(3, 4, 4);
  const PatchFeatureMap out = pfa_project(x, pfa);
  std::span<const double> a = x.values();
  std::span<const double> b = out.features.values();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("pfa_project 2x2 -> 1x1 keeps the top-left position") {
  Tensor x({2, 2, 1}, {10.0, 20.0, 30.0, 40.0});
  const PfaAdapter pfa = identity_adapter(1, 1, 1);
  CHECK(pfa_project(x, pfa).features.item() == 10.0);
}

TEST_CASE("pfa_project matches a direct matrix multiply") {
  const int d = 2, c = 3;
  Tensor x = random_tensor({3, 4, d}, 7);
  PfaAdapter pfa;
  pfa.out_h = 3;
  pfa.out_w = 4;
  pfa.w = random_tensor({c, d, 1, 1}, 8);
  pfa.b = random_tensor({c}, 9);
  const PatchFeatureMap out = pfa_project(x, pfa);
  auto wv = pfa.w.values();
  auto bv = pfa.b.values();
  for (int h = 0; h < 3; ++h) {
    for (int w = 0; w < 4; ++w) {
      for (int oc = 0; oc < c; ++oc) {
        double want = bv[oc];
        for (int ic = 0; ic < d; ++ic) {
          want += wv[static_cast<std::size_t>(oc) * d + ic] * x.value_at({h, w, ic});
        }
        CHECK(out.features.value_at({h, w, oc}) == doctest::Approx(want).epsilon(1e-14));
      }
    }
  }
}

TEST_CASE("pfa_project gradients reach both the adapter and the features") {
  Tensor x = random_tensor({4, 4, 2}, 11);
  x.set_requires_grad(true);
  PfaAdapter pfa;
  pfa.out_h = 2;
  pfa.out_w = 2;
  pfa.w = random_tensor({3, 2, 1, 1}, 12);
  pfa.w.set_requires_grad(true);
  pfa.b = Tensor::zeros({3});
  pfa.b.set_requires_grad(true);
  Tape tape;
  Tensor loss = mean(mul(pfa_project(x, pfa).features, pfa_project(x, pfa).features));
  tape.backward(loss);
  CHECK(x.has_grad());
  CHECK(pfa.w.has_grad());
  CHECK(pfa.b.has_grad());
}

TEST_CASE("contrastive_align_loss") {
  SUBCASE("single patch gives zero") {
    PatchFeatureMap a{Tensor({1, 1, 3}, {1.0, 2.0, 3.0})};
    PatchFeatureMap b{Tensor({1, 1, 3}, {0.5, -1.0, 2.0})};
    CHECK(contrastive_align_loss(a, b, 0.5).item() == 0.0);
  }
  SUBCASE("orthogonal identical two-patch maps at tau 1") {
    PatchFeatureMap a{Tensor({2, 1, 2}, {1.0, 0.0, 0.0, 1.0})};
    PatchFeatureMap b{Tensor({2, 1, 2}, {1.0, 0.0, 0.0, 1.0})};
    const double loss = contrastive_align_loss(a, b, 1.0).item();
    CHECK(loss == doctest::Approx(std::log(1.0 + std::exp(-1.0))).epsilon(1e-12));
    CHECK(loss == doctest::Approx(0.31326).epsilon(1e-4));
  }
  SUBCASE("scaling patch vectors leaves the loss unchanged") {
    Tensor fa = random_tensor({2, 2, 3}, 21, 0.2, 1.0);
    Tensor fb = random_tensor({2, 2, 3}, 22, 0.2, 1.0);
    const double base = contrastive_align_loss({fa}, {fb}, 0.3).item();
    Tensor fa_scaled = fa.clone();
    {
      auto v = fa_scaled.values();
      for (int c = 0; c < 3; ++c) v[c] *= 7.5;  // scale patch (0,0)
    }
    CHECK(contrastive_align_loss({fa_scaled}, {fb}, 0.3).item() == doctest::Approx(base).epsilon(1e-12));
  }
  SUBCASE("zero-norm patch is rejected with its position") {
    Tensor fa = Tensor::zeros({2, 1, 2});
    auto v = fa.values();
    v[0] = 1.0;  // patch 0 fine, patch 1 all zero
    PatchFeatureMap b{random_tensor({2, 1, 2}, 23, 0.5, 1.0)};
    CHECK_THROWS_WITH_AS(contrastive_align_loss({fa}, b, 1.0), doctest::Contains("position 1"),
                         std::invalid_argument);
  }
  SUBCASE("loss is non-negative") {
    for (int trial = 0; trial < 20; ++trial) {
      PatchFeatureMap a{random_tensor({3, 3, 4}, 100 + trial, 0.1, 1.0)};
      PatchFeatureMap b{random_tensor({3, 3, 4}, 200 + trial, 0.1, 1.0)};
      CHECK(contrastive_align_loss(a, b, 0.7).item() >= 0.0);
    }
  }
  SUBCASE("permuting positions identically in both maps leaves the loss unchanged") {
    Tensor fa = random_tensor({4, 1, 3}, 31, 0.1, 1.0);
    Tensor fb = random_tensor({4, 1, 3}, 32, 0.1, 1.0);
    const double base = contrastive_align_loss({fa}, {fb}, 0.5).item();
    const std::vector<int> perm = {2, 0, 3, 1};
    Tensor pa = Tensor::zeros({4, 1, 3});
    Tensor pb = Tensor::zeros({4, 1, 3});
    for (int i = 0; i < 4; ++i) {
      for (int c = 0; c < 3; ++c) {
        pa.values()[static_cast<std::size_t>(i) * 3 + c] = fa.value_at({perm[i], 0, c});
        pb.values()[static_cast<std::size_t>(i) * 3 + c] = fb.value_at({perm[i], 0, c});
      }
    }
    CHECK(contrastive_align_loss({pa}, {pb}, 0.5).item() == doctest::Approx(base).epsilon(1e-12));
  }
  SUBCASE("gradient check on f_pfa at tau 1") {
    PatchFeatureMap target{random_tensor({3, 3, 4}, 41, 0.2, 1.0)};
    auto f = [&](const Tensor& t) { return contrastive_align_loss({t}, target, 1.0); };
    CHECK(finite_diff_check(f, random_tensor({3, 3, 4}, 42, 0.2, 1.0), 1e-5) < 1e-4);
  }
  SUBCASE("gradient descent on f_pfa strictly decreases the loss") {
    PatchFeatureMap target{random_tensor({2, 2, 3}, 51, -1.0, 1.0)};
    Tensor param = random_tensor({2, 2, 3}, 52, -1.0, 1.0);
    param.set_requires_grad(true);
    double prev = 1e300;
    for (int step = 0; step < 100; ++step) {
      Tape tape;
      Tensor loss = contrastive_align_loss({param}, target, 0.5);
      const double v = loss.item();
      CHECK(v < prev);
      prev = v;
      tape.backward(loss);
      auto pv = param.values();
      auto g = param.grad();
      for (std::size_t i = 0; i < pv.size(); ++i) pv[i] -= 0.1 * g[i];
      param.zero_grad();
    }
  }
}

TEST_CASE("frozen extractor") {
  const FrozenExtractor fe = make_frozen_extractor(6, 77);
  Tensor img = random_tensor({16, 16}, 5, 0.0, 1.0);
  SUBCASE("bit-identical outputs for identical inputs") {
    const PatchFeatureMap a = frozen_extract(img, fe);
    const PatchFeatureMap b = frozen_extract(img, fe);
    auto av = a.features.values(), bv = b.features.values();
    for (std::size_t i = 0; i < av.size(); ++i) CHECK(av[i] == bv[i]);
    CHECK(a.features.shape() == std::vector<int>{4, 4, 6});
  }
  SUBCASE("no gradient reaches the extractor weights") {
    Tensor w_handle = fe.w1;
    Tape tape;
    const PatchFeatureMap out = frozen_extract(img, fe);
    CHECK_FALSE(out.features.requires_grad());
    CHECK(tape.node_count() == 0);
    CHECK_FALSE(w_handle.has_grad());
  }
  SUBCASE("different images give different feature maps") {
    Tensor img2 = random_tensor({16, 16}, 6, 0.0, 1.0);
    const PatchFeatureMap a = frozen_extract(img, fe);
    const PatchFeatureMap b = frozen_extract(img2, fe);
    bool any_diff = false;
    auto av = a.features.values(), bv = b.features.values();
    for (std::size_t i = 0; i < av.size(); ++i) any_diff = any_diff || av[i] != bv[i];
    CHECK(any_diff);
  }
  SUBCASE("same seed rebuilds the same extractor") {
    const FrozenExtractor fe2 = make_frozen_extractor(6, 77);
    auto a = fe.w1.values(), b = fe2.w1.values();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  }
}
