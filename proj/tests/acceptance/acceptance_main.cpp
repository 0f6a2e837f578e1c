// Acceptance suite: one check per criterion, each printing a [PASS]/[FAIL]
// line. Run with a criterion number (1-10) or no argument for all.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "vqlab/alignment.hpp"
#include "vqlab/codebook.hpp"
#include "vqlab/io.hpp"
#include "vqlab/metrics.hpp"
#include "vqlab/model.hpp"
#include "vqlab/perturbation.hpp"
#include "vqlab/rng.hpp"
#include "vqlab/synthetic.hpp"
#include "vqlab/tensor.hpp"
#include "vqlab/trainer.hpp"

using namespace vqlab;
namespace fs = std::filesystem;

namespace {

struct CheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require(bool ok, const std::string& what) {
  if (!ok) throw CheckFailure(what);
}

void require_close(double got, double want, double tol, const std::string& what) {
  if (!(std::fabs(got - want) <= tol)) {
    std::ostringstream os;
    os << what << ": got " << format_real(got) << ", want " << format_real(want) << " +- "
       << format_real(tol);
    throw CheckFailure(os.str());
  }
}

Codebook make_cb(const std::vector<std::vector<double>>& words) {
  const int K = static_cast<int>(words.size());
  const int D = static_cast<int>(words[0].size());
  std::vector<double> flat;
  for (const auto& w : words) flat.insert(flat.end(), w.begin(), w.end());
  return Codebook{K, D, Metric::euclidean, Tensor({K, D}, std::move(flat))};
}

Codebook random_codebook(std::uint64_t seed, int min_k, int max_k, int max_d) {
  RngStream r(seed);
  const int K = min_k + static_cast<int>(r.below(0, static_cast<std::uint64_t>(max_k - min_k + 1)));
  const int D = 1 + static_cast<int>(r.below(1, static_cast<std::uint64_t>(max_d)));
  Tensor words = Tensor::zeros({K, D});
  auto wv = words.values();
  RngStream rw = r.sub(2);
  for (std::size_t i = 0; i < wv.size(); ++i) wv[i] = rw.uniform_in(i, -2.0, 2.0);
  Codebook cb{K, D, Metric::euclidean, words};
  check_distinct_codewords(cb);
  return cb;
}

Tensor random_tensor(std::vector<int> shape, std::uint64_t seed, double lo, double hi) {
  RngStream rng(seed);
  Tensor t = Tensor::zeros(std::move(shape));
  auto v = t.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = rng.uniform_in(i, lo, hi);
  return t;
}

// Independent direct evaluation of Eqs. 4-6 used as the brute-force oracle.
struct QpmOracle {
  std::vector<double> q;
  double kl = 0.0;
};

QpmOracle qpm_oracle(const Codebook& cb, double eps) {
  const int K = cb.K, D = cb.D;
  auto cv = cb.codewords.values();
  auto dist = [&](int i, int j) {
    double acc = 0.0;
    for (int d = 0; d < D; ++d) {
      const double diff = cv[static_cast<std::size_t>(i) * D + d] - cv[static_cast<std::size_t>(j) * D + d];
      acc += diff * diff;
    }
    return std::sqrt(acc);
  };
  std::vector<std::vector<double>> pi(K, std::vector<double>(K, 0.0));
  for (int i = 0; i < K; ++i) {
    double z = 0.0;
    for (int k = 0; k < K; ++k) {
      if (k != i) z += std::exp(-dist(i, k));
    }
    for (int j = 0; j < K; ++j) pi[i][j] = j == i ? 1.0 - eps : eps * std::exp(-dist(i, j)) / z;
  }
  QpmOracle o;
  o.q.assign(K, 0.0);
  for (int j = 0; j < K; ++j) {
    for (int i = 0; i < K; ++i) o.q[j] += pi[i][j];
    o.q[j] /= K;
  }
  for (int j = 0; j < K; ++j) o.kl += std::log(K * o.q[j]);
  o.kl = -o.kl / K;
  return o;
}

double run_train_dice(const TrainConfig& cfg, const std::string& dir) {
  fs::remove_all(dir);
  const TrainResult res = train(cfg, dir);
  return res.test_metrics.dice_mean;
}

// ---- criteria -------------------------------------------------------------

void criterion1() {
  require(kl_dropout(0.0).kl == 0.0, "kl(0) must be exactly 0");
  double prev = kl_dropout(0.0).kl;
  for (int i = 1; i <= 99; ++i) {
    const double p = static_cast<double>(i) / 100.0;
    const double got = kl_dropout(p).kl;
    const double want = 0.5 * (p / (1.0 - p) + std::log(1.0 - p));
    require_close(got, want, 1e-12, "closed form at p=" + format_real(p));
    require(got > prev, "strict monotonicity violated at p=" + format_real(p));
    prev = got;
  }
  require_close(kl_dropout(0.99).kl, 0.5 * (0.99 / 0.01 + std::log(0.01)), 1e-9, "kl(0.99)");
  require_close(kl_dropout(0.99).kl, 47.197, 5e-4, "kl(0.99) headline value");
}

void criterion2() {
  for (int trial = 0; trial < 1000; ++trial) {
    const Codebook cb = random_codebook(20000 + trial, 2, 32, 8);
    const double eps = RngStream(trial).uniform(77);
    const auto kernel = transition_kernel(cb, eps);
    for (int i = 0; i < cb.K; ++i) {
      double row = 0.0;
      for (int j = 0; j < cb.K; ++j) row += kernel.pi[static_cast<std::size_t>(i) * cb.K + j];
      require(std::fabs(row - 1.0) < 1e-12,
              "row sum off by " + format_real(row - 1.0) + " at trial " + std::to_string(trial));
      require(kernel.pi[static_cast<std::size_t>(i) * cb.K + i] == 1.0 - eps,
              "self-transition not exactly 1-eps at trial " + std::to_string(trial));
    }
  }
  // reference configuration: K=4, eps=0.7
  const Codebook cb4 = random_codebook(31337, 4, 4, 3);
  const auto kernel = transition_kernel(cb4, 0.7);
  for (int i = 0; i < 4; ++i) {
    require_close(kernel.pi[static_cast<std::size_t>(i) * 4 + i], 0.30, 1e-15, "self-transition at eps 0.7");
    double off = 0.0;
    for (int j = 0; j < 4; ++j) {
      if (j != i) off += kernel.pi[static_cast<std::size_t>(i) * 4 + j];
    }
    require_close(off, 0.70, 1e-12, "off-diagonal mass at eps 0.7");
  }
}

void criterion3() {
  const std::vector<Codebook> equidistant = {
      make_cb({{0.0}, {5.0}}),
      make_cb({{0.0, 0.0}, {1.0, 0.0}, {0.5, std::sqrt(3.0) / 2.0}}),
      make_cb({{1.0, 1.0, 1.0}, {1.0, -1.0, -1.0}, {-1.0, 1.0, -1.0}, {-1.0, -1.0, 1.0}}),
  };
  for (const auto& cb : equidistant) {
    for (double eps : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      const auto m = perturbed_marginal(transition_kernel(cb, eps));
      for (double q : m.q) {
        require(q == m.q[0], "equidistant marginal not exactly uniform (K=" + std::to_string(cb.K) +
                                 ", eps=" + format_real(eps) + ")");
      }
      require(kl_qpm(m) == 0.0, "equidistant KL not exactly 0 (K=" + std::to_string(cb.K) +
                                    ", eps=" + format_real(eps) + ")");
    }
  }
  const Codebook worked = make_cb({{0.0}, {1.0}, {3.0}});
  const auto m = perturbed_marginal(transition_kernel(worked, 0.6));
  const QpmOracle o = qpm_oracle(worked, 0.6);
  for (int j = 0; j < 3; ++j) {
    require_close(m.q[j], o.q[j], 1e-3, "worked Q[" + std::to_string(j) + "] vs oracle");
  }
  require_close(kl_qpm(m), o.kl, 1e-3, "worked KL vs oracle");
  require_close(o.q[0], 0.3333, 1e-3, "oracle Q[0] headline");
  require_close(o.q[1], 0.4557, 1e-3, "oracle Q[1] headline");
  require_close(o.q[2], 0.2110, 1e-3, "oracle Q[2] headline");
  require_close(o.kl, 0.0483, 1e-3, "oracle KL headline");
}

void criterion4() {
  int violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Codebook cb = random_codebook(40000 + trial, 2, 32, 8);
    const auto b = bounds_eps1(cb);
    const auto m = perturbed_marginal(transition_kernel(cb, 1.0));
    const double qmin = *std::min_element(m.q.begin(), m.q.end());
    const double qmax = *std::max_element(m.q.begin(), m.q.end());
    if (!(b.lower <= qmin && qmax <= b.upper)) ++violations;
    const double kl = kl_qpm(m);
    require(std::isfinite(kl), "KL not finite at eps=1, trial " + std::to_string(trial));
  }
  require(violations == 0, std::to_string(violations) + " bound violations out of 1000");
}

void criterion5() {
  const int draws = 1000000;
  for (int config = 0; config < 20; ++config) {
    const Codebook cb = random_codebook(50000 + config, 2, 8, 4);
    const double eps = 0.1 + 0.9 * RngStream(config).uniform(5);
    const auto kernel = transition_kernel(cb, eps);
    const int start = static_cast<int>(RngStream(config).below(6, static_cast<std::uint64_t>(cb.K)));
    QuantizedMap single;
    single.H = 1;
    single.W = 1;
    single.D = cb.D;
    single.indices = {start};
    single.source = Tensor::zeros({1, 1, cb.D});
    single.dequantized = Tensor::zeros({1, 1, cb.D});
    std::vector<long long> counts(static_cast<std::size_t>(cb.K), 0);
    for (int t = 0; t < draws; ++t) {
      ++counts[static_cast<std::size_t>(
          sample_perturbed(single, cb, kernel, static_cast<std::uint64_t>(t)).indices[0])];
    }
    for (int j = 0; j < cb.K; ++j) {
      const double p = kernel.pi[static_cast<std::size_t>(start) * cb.K + j];
      const double emp = static_cast<double>(counts[static_cast<std::size_t>(j)]) / draws;
      if (p == 0.0) {
        require(counts[static_cast<std::size_t>(j)] == 0,
                "zero-probability entry sampled in config " + std::to_string(config));
      } else {
        const double tol = 3.0 * std::sqrt(p * (1.0 - p) / draws);
        require(std::fabs(emp - p) <= tol, "config " + std::to_string(config) + " entry " +
                                               std::to_string(j) + ": |" + format_real(emp) + " - " +
                                               format_real(p) + "| > " + format_real(tol));
      }
    }
  }
}

void criterion6() {
  // (a) every forward primitive against central finite differences at smooth
  // points; restarts push each case past 100 probed coordinates.
  double worst = 0.0;
  std::string worst_name;
  auto fd_case = [&](const std::string& name, const std::function<Tensor(const Tensor&)>& f,
                     const std::function<Tensor(std::uint64_t)>& make_x, int restarts) {
    for (int r = 0; r < restarts; ++r) {
      const double err = finite_diff_check(f, make_x(1000 + static_cast<std::uint64_t>(r)), 1e-5);
      if (err > worst) {
        worst = err;
        worst_name = name;
      }
      require(err < 1e-4, name + " finite-difference error " + format_real(err));
    }
  };
  auto rt = [](std::vector<int> shape, double lo, double hi) {
    return [shape, lo, hi](std::uint64_t seed) { return random_tensor(shape, seed, lo, hi); };
  };
  const Tensor b34 = random_tensor({3, 4}, 1, 1.2, 2.4);
  fd_case("add", [&](const Tensor& t) { return mean(add(t, b34)); }, rt({3, 4}, -1, 1), 5);
  fd_case("sub", [&](const Tensor& t) { return mean(sub(b34, t)); }, rt({3, 4}, -1, 1), 5);
  fd_case("mul", [&](const Tensor& t) { return mean(mul(t, b34)); }, rt({3, 4}, -1, 1), 5);
  fd_case("scale", [&](const Tensor& t) { return sum(scale(t, -1.7)); }, rt({3, 4}, -1, 1), 5);
  fd_case("add_scalar", [&](const Tensor& t) { return mean(add_scalar(t, 2.0)); }, rt({3, 4}, -1, 1), 5);
  fd_case("relu", [&](const Tensor& t) { return mean(relu(t)); }, rt({5, 5}, 0.2, 1.2), 5);
  fd_case("log", [&](const Tensor& t) { return mean(vqlab::log(t)); }, rt({5, 5}, 0.4, 2.0), 5);
  fd_case("exp", [&](const Tensor& t) { return mean(vqlab::exp(t)); }, rt({5, 5}, -1, 1), 5);
  fd_case("xlogx", [&](const Tensor& t) { return mean(xlogx(t)); }, rt({5, 5}, 0.3, 1.5), 5);
  fd_case("matmul", [&](const Tensor& t) { return mean(matmul(t, b34)); }, rt({4, 3}, -1, 1), 9);
  fd_case("transpose2d", [&](const Tensor& t) { return mean(mul(transpose2d(t), random_tensor({4, 3}, 7, -1, 1))); }, rt({3, 4}, -1, 1), 9);
  fd_case("diagonal", [&](const Tensor& t) { return mean(diagonal(t)); }, rt({5, 5}, -1, 1), 4);
  fd_case("softmax", [&](const Tensor& t) { return mean(mul(softmax(t, 1), b34)); }, rt({3, 4}, -2, 2), 9);
  fd_case("log_softmax", [&](const Tensor& t) { return mean(mul(log_softmax(t, 0), b34)); }, rt({3, 4}, -2, 2), 9);
  fd_case("normalize", [&](const Tensor& t) { return mean(mul(normalize(t, 1), b34)); }, rt({3, 4}, 0.3, 1.3), 9);
  fd_case("sum", [&](const Tensor& t) { return sum(t); }, rt({6, 5}, -1, 1), 4);
  fd_case("mean", [&](const Tensor& t) { return mean(t); }, rt({6, 5}, -1, 1), 4);
  fd_case("sum_axis", [&](const Tensor& t) { return mean(sum_axis(t, 1)); }, rt({6, 5}, -1, 1), 4);
  fd_case("mean_axis", [&](const Tensor& t) { return mean(mean_axis(t, 0)); }, rt({6, 5}, -1, 1), 4);
  fd_case("l1_distance", [&](const Tensor& t) { return l1_distance(t, b34); }, rt({3, 4}, 3.0, 4.0), 9);
  fd_case("squared_l2", [&](const Tensor& t) { return squared_l2_distance(t, b34); }, rt({3, 4}, -1, 1), 9);
  const Tensor wc = random_tensor({3, 2, 3, 3}, 2, -0.5, 0.5);
  const Tensor xc = random_tensor({1, 2, 6, 6}, 3, 0.1, 1.0);
  fd_case("conv2d_x_s1", [&](const Tensor& t) { return mean(conv2d(t, wc, 1, 1)); }, rt({1, 2, 6, 6}, 0.1, 1.0), 2);
  fd_case("conv2d_x_s2", [&](const Tensor& t) { return mean(conv2d(t, wc, 2, 1)); }, rt({1, 2, 6, 6}, 0.1, 1.0), 2);
  fd_case("conv2d_w", [&](const Tensor& t) { return mean(conv2d(xc, t, 2, 1)); }, rt({3, 2, 3, 3}, -0.5, 0.5), 2);
  const Tensor wt = random_tensor({2, 3, 3, 3}, 4, -0.5, 0.5);
  fd_case("convT_x", [&](const Tensor& t) { return mean(conv_transpose2d(t, wt, 2, 1, 1)); }, rt({1, 2, 6, 6}, 0.1, 1.0), 2);
  fd_case("convT_w", [&](const Tensor& t) { return mean(conv_transpose2d(xc, t, 2, 1, 1)); }, rt({2, 3, 3, 3}, -0.5, 0.5), 2);
  fd_case("add_channel_bias", [&](const Tensor& t) { return mean(add_channel_bias(xc, t)); }, rt({2}, -1, 1), 50);
  fd_case("nn_resize", [&](const Tensor& t) { return mean(mul(nn_resize(t, 3, 3), random_tensor({1, 2, 3, 3}, 5, -1, 1))); }, rt({1, 2, 6, 6}, -1, 1), 2);
  fd_case("reshape", [&](const Tensor& t) { return mean(mul(reshape(t, {4, 3}), random_tensor({4, 3}, 6, -1, 1))); }, rt({3, 4}, -1, 1), 9);
  fd_case("nchw_to_nhwc", [&](const Tensor& t) { return mean(mul(nchw_to_nhwc(t), random_tensor({1, 6, 6, 2}, 8, -1, 1))); }, rt({1, 2, 6, 6}, -1, 1), 2);
  fd_case("nhwc_to_nchw", [&](const Tensor& t) { return mean(mul(nhwc_to_nchw(t), random_tensor({1, 2, 6, 6}, 9, -1, 1))); }, rt({1, 6, 6, 2}, -1, 1), 2);
  fd_case("gather_rows", [&](const Tensor& t) { return mean(gather_rows(t, {1, 0, 2, 1})); }, rt({3, 6}, -1, 1), 6);
  fd_case("pairwise_sqdist", [&](const Tensor& t) { return mean(pairwise_sqdist(t, b34)); }, rt({5, 4}, -1, 1), 5);

  // (b) the patch-wise contrastive objective
  const PatchFeatureMap target{random_tensor({3, 3, 4}, 10, 0.2, 1.0)};
  fd_case("contrastive_align_loss",
          [&](const Tensor& t) { return contrastive_align_loss({t}, target, 1.0); },
          rt({3, 3, 4}, 0.2, 1.0), 3);

  // (c) total objective through weight slices with continuous influence. The
  // objective is piecewise constant in weights upstream of the quantization
  // (that is what the STE exists for; its surrogate is checked exactly in (d)),
  // so central differences are probed on the decoder, head and PFA weights,
  // and on the encoder through the commitment + entropy objective, which has
  // no STE on its path.
  {
    TrainConfig cfg;
    cfg.K = 16;
    cfg.D = 4;
    cfg.pfa_channels = 6;
    SegModel student = make_seg_model(cfg.K, cfg.D, 2, cfg.pfa_channels, 4, 4, 11);
    student.set_requires_grad(true);
    SegModel teacher = student.clone();
    teacher.set_requires_grad(false);
    const FrozenExtractor ext = make_frozen_extractor(cfg.pfa_channels, 12);
    const auto data = gen_synthetic_dataset(8, 16, 13, 0.5);
    TrainBatch batch;
    batch.labeled.push_back({data[0].image, data[0].mask});
    batch.labeled.push_back({data[1].image, data[1].mask});
    batch.unlabeled.push_back(data[4].image);
    batch.unlabeled.push_back(data[5].image);
    const auto kernel = transition_kernel(student.codebook, cfg.eps);
    const double h = 1e-5;

    const std::vector<std::pair<std::string, Tensor>> slices = {
        {"seg_dec.d1.w", student.seg_dec.d1.w},
        {"image_dec.d2.w", student.image_dec.d2.w},
        {"seg_dec.d3.b", student.seg_dec.d3.b},
        {"pfa.w", student.pfa.w},
    };
    for (const auto& [name, w_const] : slices) {
      Tensor w = w_const;
      std::vector<double> ad(3, 0.0);
      {
        Tape tape;
        const LossBreakdown lb = total_loss(batch, student, teacher, ext, kernel, cfg, 17);
        tape.backward(lb.total);
        for (int i = 0; i < 3; ++i) ad[i] = w.grad()[i];
        for (auto& p : student.parameters()) p.zero_grad();
      }
      for (int i = 0; i < 3; ++i) {
        auto wv = w.values();
        const double orig = wv[i];
        wv[i] = orig + h;
        const double fp = total_loss(batch, student, teacher, ext, kernel, cfg, 17).total.item();
        wv[i] = orig - h;
        const double fm = total_loss(batch, student, teacher, ext, kernel, cfg, 17).total.item();
        wv[i] = orig;
        const double fd = (fp - fm) / (2.0 * h);
        const double rel = std::fabs(ad[i] - fd) / (std::fabs(fd) + 1e-8);
        if (rel > worst) {
          worst = rel;
          worst_name = "total_loss/" + name;
        }
        require(rel < 1e-4, "total_loss " + name + "[" + std::to_string(i) +
                                "] finite-difference error " + format_real(rel));
      }
    }

    auto vq_objective = [&]() {
      const ForwardResult fr = forward(student, batch.labeled[0].image);
      const VqLosses v = vq_losses(fr.z_hwd, fr.qm, student.codebook, cfg.beta_commit);
      return add(v.commitment_loss, entropy_regularizer(fr.z_hwd, student.codebook, cfg.tau_q));
    };
    Tensor ew = student.encoder.c1.w;
    std::vector<double> ad(6, 0.0);
    {
      Tape tape;
      tape.backward(vq_objective());
      for (int i = 0; i < 6; ++i) ad[i] = ew.grad()[i];
      for (auto& p : student.parameters()) p.zero_grad();
    }
    for (int i = 0; i < 6; ++i) {
      auto wv = ew.values();
      const double orig = wv[i];
      wv[i] = orig + h;
      const double fp = vq_objective().item();
      wv[i] = orig - h;
      const double fm = vq_objective().item();
      wv[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double rel = std::fabs(ad[i] - fd) / (std::fabs(fd) + 1e-8);
      if (rel > worst) {
        worst = rel;
        worst_name = "vq-objective/encoder.c1.w";
      }
      require(rel < 1e-4, "encoder slice " + std::to_string(i) +
                              " finite-difference error through the VQ objective " + format_real(rel));
    }
  }

  // (d) STE gradient equals the identity-substitution oracle exactly
  {
    const Codebook cb = make_cb({{0.2, -0.1}, {1.5, 0.4}, {-0.7, 0.9}});
    Tensor z = random_tensor({3, 3, 2}, 14, -1.0, 1.5);
    z.set_requires_grad(true);
    const QuantizedMap qm = quantize(z.detached(), cb);
    std::vector<double> ste_grad;
    {
      Tape tape;
      Tensor y = ste_dequantize(z, qm);
      tape.backward(sum(mul(y, y)));
      auto g = z.grad();
      ste_grad.assign(g.begin(), g.end());
    }
    Tensor leaf = qm.dequantized.clone();
    leaf.set_requires_grad(true);
    {
      Tape tape;
      tape.backward(sum(mul(leaf, leaf)));
    }
    auto og = leaf.grad();
    require(ste_grad.size() == og.size(), "STE oracle size mismatch");
    for (std::size_t i = 0; i < og.size(); ++i) {
      require(ste_grad[i] == og[i], "STE gradient differs from the identity-substitution oracle at " +
                                        std::to_string(i));
    }
  }
  std::cerr << "  worst finite-difference rel err: " << format_real(worst) << " (" << worst_name
            << ")\n";
}

TrainConfig reference_config() {
  TrainConfig cfg;
  cfg.n = 200;
  cfg.image_size = 32;
  cfg.labeled_ratio = 0.1;
  cfg.iters = 2000;
  cfg.seed = 0;
  return cfg;
}

void criterion7() {
  TrainConfig full = reference_config();
  full.threads = 1;  // one desktop core

  TrainConfig supervised = full;
  supervised.lambda_u = 0.0;

  TrainConfig dropout = full;
  dropout.perturb_mode = "feature_dropout";
  dropout.dropout_rate = 0.9;

  const double dice_full = run_train_dice(full, "/tmp/vqlab_acc_c7_full");
  const double dice_sup = run_train_dice(supervised, "/tmp/vqlab_acc_c7_sup");
  const double dice_drop = run_train_dice(dropout, "/tmp/vqlab_acc_c7_drop");
  std::cerr << "  dice full=" << format_real(dice_full) << " supervised-only=" << format_real(dice_sup)
            << " dropout0.9=" << format_real(dice_drop) << "\n";
  require(dice_full > dice_sup,
          "full config must beat the lambda_u=0 ablation (" + format_real(dice_full) + " vs " +
              format_real(dice_sup) + ")");
  require(dice_full > dice_drop,
          "full config must beat the dropout-0.9 ablation (" + format_real(dice_full) + " vs " +
              format_real(dice_drop) + ")");
}

void criterion8() {
  std::vector<double> dice7, dice9;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    TrainConfig c7 = reference_config();
    c7.seed = seed;
    c7.threads = 4;
    TrainConfig c9 = c7;
    c9.eps = 0.9;
    dice7.push_back(run_train_dice(c7, "/tmp/vqlab_acc_c8_e7_" + std::to_string(seed)));
    dice9.push_back(run_train_dice(c9, "/tmp/vqlab_acc_c8_e9_" + std::to_string(seed)));
    std::cerr << "  seed " << seed << ": eps0.7 dice=" << format_real(dice7.back())
              << " eps0.9 dice=" << format_real(dice9.back()) << "\n";
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  const double m7 = median(dice7), m9 = median(dice9);
  std::cerr << "  median eps0.7=" << format_real(m7) << " median eps0.9=" << format_real(m9) << "\n";
  require(m7 > m9, "median Dice at eps 0.7 (" + format_real(m7) +
                       ") must strictly exceed eps 0.9 (" + format_real(m9) + ")");
}

void criterion9() {
  // overlap + surface metrics against exhaustive oracles
  RngStream rng(90);
  int surface_checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    RngStream r = rng.sub(trial);
    MaskPair mp;
    mp.H = 8;
    mp.W = 8;
    mp.pred.resize(64);
    mp.gt.resize(64);
    for (int i = 0; i < 64; ++i) {
      mp.pred[i] = r.uniform(2 * i) < 0.35 ? 1 : 0;
      mp.gt[i] = r.uniform(2 * i + 1) < 0.35 ? 1 : 0;
    }
    long long inter = 0, a = 0, b = 0;
    for (int i = 0; i < 64; ++i) {
      a += mp.pred[i];
      b += mp.gt[i];
      inter += mp.pred[i] & mp.gt[i];
    }
    const auto ov = dice_jaccard(mp);
    if (a + b == 0) {
      require(ov.dice == 1.0 && ov.jaccard == 1.0, "empty-empty convention");
    } else {
      require(ov.dice == 2.0 * static_cast<double>(inter) / static_cast<double>(a + b),
              "dice not exact at trial " + std::to_string(trial));
      const long long uni = a + b - inter;
      require(ov.jaccard == (uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni)),
              "jaccard not exact at trial " + std::to_string(trial));
    }
    if (a == 0 || b == 0) continue;
    ++surface_checked;
    // exhaustive all-pairs oracle
    auto boundary = [&](const std::vector<int>& m) {
      std::vector<std::pair<int, int>> out;
      auto at = [&](int rr, int cc) {
        return rr >= 0 && rr < 8 && cc >= 0 && cc < 8 ? m[rr * 8 + cc] : 0;
      };
      for (int rr = 0; rr < 8; ++rr)
        for (int cc = 0; cc < 8; ++cc)
          if (at(rr, cc) && (!at(rr - 1, cc) || !at(rr + 1, cc) || !at(rr, cc - 1) || !at(rr, cc + 1)))
            out.emplace_back(rr, cc);
      return out;
    };
    const auto ba = boundary(mp.pred), bb = boundary(mp.gt);
    std::vector<double> pool;
    auto directed = [&](const auto& from, const auto& to) {
      for (auto [rr, cc] : from) {
        double best = 1e300;
        for (auto [r2, c2] : to) {
          best = std::min(best, std::sqrt(double((rr - r2) * (rr - r2) + (cc - c2) * (cc - c2))));
        }
        pool.push_back(best);
      }
    };
    directed(ba, bb);
    directed(bb, ba);
    std::sort(pool.begin(), pool.end());
    const double rank = 0.95 * (pool.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(rank);
    const std::size_t hi = std::min(lo + 1, pool.size() - 1);
    const double hd95 = pool[lo] * (1.0 - (rank - lo)) + pool[hi] * (rank - lo);
    double asd = 0.0;
    for (double d : pool) asd += d;
    asd /= static_cast<double>(pool.size());
    const auto ss = surface_metrics(mp);
    require(std::fabs(ss.hd95 - hd95) < 1e-9, "hd95 differs from oracle at trial " + std::to_string(trial));
    require(std::fabs(ss.asd - asd) < 1e-9, "asd differs from oracle at trial " + std::to_string(trial));
  }
  require(surface_checked >= 50, "too few surface-defined pairs: " + std::to_string(surface_checked));

  // paired t-test against a numeric-integration CDF oracle
  auto pdf = [](double x, double v) {
    return std::exp(std::lgamma((v + 1.0) / 2.0) - std::lgamma(v / 2.0)) /
           std::sqrt(v * 3.14159265358979323846) * std::pow(1.0 + x * x / v, -(v + 1.0) / 2.0);
  };
  auto oracle_two_tailed = [&](double t, double dof) {
    const double T = std::fabs(t);
    const int n = 40000;
    const double h = T / n;
    double s = pdf(0.0, dof) + pdf(T, dof);
    for (int i = 1; i < n; ++i) s += pdf(i * h, dof) * (i % 2 ? 4.0 : 2.0);
    const double cdf = 0.5 + s * h / 3.0;
    return 2.0 * (1.0 - cdf);
  };
  const std::vector<std::pair<std::vector<double>, std::vector<double>>> cases = {
      {{0.60, 0.62, 0.61, 0.63}, {0.58, 0.59, 0.60, 0.60}},
      {{0.71, 0.69, 0.70, 0.72, 0.68}, {0.70, 0.70, 0.69, 0.70, 0.69}},
      {{1.2, 0.9, 1.1, 1.4, 1.0, 1.3}, {1.1, 1.0, 1.2, 1.1, 0.9, 1.2}},
  };
  for (const auto& [a, b] : cases) {
    const TTestResult r = paired_t_test(a, b);
    require(!r.degenerate, "unexpected degenerate t-test");
    const double want = oracle_two_tailed(r.t, static_cast<double>(a.size() - 1));
    require(std::fabs(r.p - want) < 1e-6,
            "t-test p " + format_real(r.p) + " vs oracle " + format_real(want));
  }
}

void criterion10() {
  const std::string cli = VQLAB_CLI_PATH;
  const std::string dir = "/tmp/vqlab_acc_c10";
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    std::ofstream cb(dir + "/cb.txt");
    cb << "4 2 euclidean\n0 0\n1 0\n0 1\n2 2\n";
  }
  auto sh = [&](const std::string& cmd) {
    const int rc = std::system(cmd.c_str());
    require(WEXITSTATUS(rc) == 0, "command failed: " + cmd);
  };
  auto same = [&](const std::string& a, const std::string& b, const std::string& what) {
    require(read_file(a) == read_file(b), what + " not byte-identical");
  };

  const std::vector<std::string> analytic = {
      "kl-curve --mode dropout --grid 0,0.25,0.5,0.75,0.9",
      "kl-curve --mode qpm --codebook " + dir + "/cb.txt --grid 0,0.5,1",
      "kernel --codebook " + dir + "/cb.txt --eps 0.7",
      "compare --codebook " + dir + "/cb.txt",
      "bounds --codebook " + dir + "/cb.txt",
      "codebook init --k 16 --d 4 --seed 9",
      "codebook export-pca --codebook " + dir + "/cb.txt",
      "ttest --a 0.6,0.7,0.8 --b 0.5,0.65,0.75",
  };
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const std::string a = dir + "/a" + std::to_string(i) + ".txt";
    const std::string b = dir + "/b" + std::to_string(i) + ".txt";
    sh(cli + " " + analytic[i] + " > " + a + " 2>/dev/null");
    sh(cli + " " + analytic[i] + " > " + b + " 2>/dev/null");
    same(a, b, "analytic command '" + analytic[i] + "'");
  }

  const std::string train_flags =
      " train --iters 30 --n 24 --image-size 16 --seed 3 --threads 1 --out ";
  sh(cli + train_flags + dir + "/run_a > " + dir + "/train_a.txt 2>/dev/null");
  sh(cli + train_flags + dir + "/run_b > " + dir + "/train_b.txt 2>/dev/null");
  // train stdout differs only in the out_dir line; compare from line 2 on
  const auto tail_of = [](std::string s) { return s.substr(s.find('\n') + 1); };
  require(tail_of(read_file(dir + "/train_a.txt")) == tail_of(read_file(dir + "/train_b.txt")),
          "train stdout not identical");
  for (const char* f : {"losses.csv", "utilization.csv", "metrics.json", "config.txt",
                        "student_codebook.txt", "student_encoder.c1.w.txt",
                        "codebook_pca_final.csv"}) {
    same(dir + "/run_a/" + f, dir + "/run_b/" + f, std::string("train artifact ") + f);
  }
}

struct Criterion {
  int id;
  const char* name;
  double time_budget_s;  // 0 = unbounded
  std::function<void()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {1, "dropout-KL closed form (Eq. 1)", 1.0, criterion1},
      {2, "QPM kernel correctness (Eq. 4)", 5.0, criterion2},
      {3, "perturbed marginal and KL (Eqs. 5-6)", 1.0, criterion3},
      {4, "eps=1 bounds and KL finiteness", 10.0, criterion4},
      {5, "Monte Carlo consistency of sample_perturbed", 30.0, criterion5},
      {6, "gradient integrity (primitives, align loss, total objective, STE)", 60.0, criterion6},
      {7, "directional semi-supervised gain", 900.0, criterion7},
      {8, "eps ablation ordering over 5 seeds", 0.0, criterion8},
      {9, "metrics vs exhaustive oracles; t-test vs reference CDF", 0.0, criterion9},
      {10, "byte-identical determinism of train and CLI analytics", 0.0, criterion10},
  };
  int selected = 0;
  if (argc > 1 && std::string(argv[1]) != "all") selected = std::atoi(argv[1]);

  int failures = 0;
  for (const auto& c : criteria) {
    if (selected != 0 && c.id != selected) continue;
    const auto start = std::chrono::steady_clock::now();
    std::string error;
    try {
      c.run();
    } catch (const std::exception& e) {
      error = e.what();
    }
    const double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (error.empty() && c.time_budget_s > 0.0 && elapsed > c.time_budget_s) {
      std::ostringstream os;
      os << "exceeded the " << c.time_budget_s << " s runtime budget (" << elapsed << " s)";
      error = os.str();
    }
    std::ostringstream line;
    line.setf(std::ios::fixed);
    line.precision(2);
    if (error.empty()) {
      line << "[PASS] C" << c.id << " " << c.name << " (" << elapsed << " s)";
    } else {
      line << "[FAIL] C" << c.id << " " << c.name << " (" << elapsed << " s): " << error;
      ++failures;
    }
    std::cout << line.str() << std::endl;
  }
  return failures;
}
