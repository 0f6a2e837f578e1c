#include "vqlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"
#include "vqlab/io.hpp"
#include "vqlab/metrics.hpp"
#include "vqlab/rng.hpp"

namespace fs = std::filesystem;

namespace vqlab {

void validate_config(const TrainConfig& cfg) {
  auto fail = [](const std::string& what) { throw std::invalid_argument("config: " + what); };
  if (!(cfg.eps >= 0.0 && cfg.eps <= 1.0)) fail("eps must be in [0, 1], got " + format_real(cfg.eps));
  if (cfg.lambda_u < 0.0 || cfg.lambda_a < 0.0 || cfg.lambda_q < 0.0) fail("loss weights must be >= 0");
  if (!(cfg.tau > 0.0)) fail("tau must be > 0, got " + format_real(cfg.tau));
  if (!(cfg.tau_q > 0.0)) fail("tau_q must be > 0");
  if (cfg.beta_commit < 0.0) fail("beta_commit must be >= 0");
  if (!(cfg.ema_alpha >= 0.0 && cfg.ema_alpha <= 1.0)) fail("ema_alpha must be in [0, 1]");
  if (cfg.K < 2) fail("K must be >= 2");
  if (cfg.D < 1) fail("D must be >= 1");
  if (!(cfg.labeled_ratio > 0.0 && cfg.labeled_ratio <= 1.0)) fail("labeled_ratio must be in (0, 1]");
  if (cfg.iters < 1) fail("iters must be >= 1");
  if (cfg.batch_labeled < 1) fail("batch_labeled must be >= 1");
  if (cfg.batch_unlabeled < 0) fail("batch_unlabeled must be >= 0");
  if (cfg.n < 4) fail("n must be >= 4");
  if (cfg.image_size < 16 || cfg.image_size % 4 != 0) fail("image_size must be >= 16 and divisible by 4");
  if (cfg.n_test < 1) fail("n_test must be >= 1");
  if (cfg.lr < 0.0) fail("lr must be >= 0");
  kernel_metric_from_name(cfg.kernel_metric);
  if (cfg.perturb_mode != "qpm" && cfg.perturb_mode != "feature_dropout" && cfg.perturb_mode != "none") {
    fail("perturb_mode must be qpm, feature_dropout or none, got '" + cfg.perturb_mode + "'");
  }
  if (!(cfg.dropout_rate >= 0.0 && cfg.dropout_rate < 1.0)) fail("dropout_rate must be in [0, 1)");
  if (cfg.pfa_channels < 1) fail("pfa_channels must be >= 1");
  if (cfg.threads < 1) fail("threads must be >= 1");
  if (cfg.log_every < 1) fail("log_every must be >= 1");
}

namespace {

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::runtime_error("config: key '" + key + "' expects a boolean, got '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw std::runtime_error("config: key '" + key + "' expects a number, got '" + v + "'");
  }
}

long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long x = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw std::runtime_error("config: key '" + key + "' expects an integer, got '" + v + "'");
  }
}

}  // namespace

TrainConfig config_from_map(const std::map<std::string, std::string>& kv) {
  TrainConfig cfg;
  for (const auto& [key, value] : kv) {
    if (key == "eps") cfg.eps = parse_double(key, value);
    else if (key == "lambda_u") cfg.lambda_u = parse_double(key, value);
    else if (key == "lambda_a") cfg.lambda_a = parse_double(key, value);
    else if (key == "tau") cfg.tau = parse_double(key, value);
    else if (key == "beta_commit") cfg.beta_commit = parse_double(key, value);
    else if (key == "ema_alpha") cfg.ema_alpha = parse_double(key, value);
    else if (key == "K") cfg.K = static_cast<int>(parse_int(key, value));
    else if (key == "D") cfg.D = static_cast<int>(parse_int(key, value));
    else if (key == "labeled_ratio") cfg.labeled_ratio = parse_double(key, value);
    else if (key == "iters") cfg.iters = parse_int(key, value);
    else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_int(key, value));
    else if (key == "batch_labeled") cfg.batch_labeled = static_cast<int>(parse_int(key, value));
    else if (key == "batch_unlabeled") cfg.batch_unlabeled = static_cast<int>(parse_int(key, value));
    else if (key == "n") cfg.n = static_cast<int>(parse_int(key, value));
    else if (key == "image_size") cfg.image_size = static_cast<int>(parse_int(key, value));
    else if (key == "n_test") cfg.n_test = static_cast<int>(parse_int(key, value));
    else if (key == "lr") cfg.lr = parse_double(key, value);
    else if (key == "lambda_q") cfg.lambda_q = parse_double(key, value);
    else if (key == "tau_q") cfg.tau_q = parse_double(key, value);
    else if (key == "kernel_metric") cfg.kernel_metric = value;
    else if (key == "perturb_mode") cfg.perturb_mode = value;
    else if (key == "dropout_rate") cfg.dropout_rate = parse_double(key, value);
    else if (key == "pfa_channels") cfg.pfa_channels = static_cast<int>(parse_int(key, value));
    else if (key == "threads") cfg.threads = static_cast<int>(parse_int(key, value));
    else if (key == "log_every") cfg.log_every = static_cast<int>(parse_int(key, value));
    else if (key == "eq9_mixed_target") cfg.eq9_mixed_target = parse_bool(key, value);
    else if (key == "augment") cfg.augment = parse_bool(key, value);
    else throw std::runtime_error("config: unknown key '" + key + "'");
  }
  validate_config(cfg);
  return cfg;
}

std::map<std::string, std::string> config_to_map(const TrainConfig& cfg) {
  std::map<std::string, std::string> kv;
  kv["eps"] = format_real(cfg.eps);
  kv["lambda_u"] = format_real(cfg.lambda_u);
  kv["lambda_a"] = format_real(cfg.lambda_a);
  kv["tau"] = format_real(cfg.tau);
  kv["beta_commit"] = format_real(cfg.beta_commit);
  kv["ema_alpha"] = format_real(cfg.ema_alpha);
  kv["K"] = std::to_string(cfg.K);
  kv["D"] = std::to_string(cfg.D);
  kv["labeled_ratio"] = format_real(cfg.labeled_ratio);
  kv["iters"] = std::to_string(cfg.iters);
  kv["seed"] = std::to_string(cfg.seed);
  kv["batch_labeled"] = std::to_string(cfg.batch_labeled);
  kv["batch_unlabeled"] = std::to_string(cfg.batch_unlabeled);
  kv["n"] = std::to_string(cfg.n);
  kv["image_size"] = std::to_string(cfg.image_size);
  kv["n_test"] = std::to_string(cfg.n_test);
  kv["lr"] = format_real(cfg.lr);
  kv["lambda_q"] = format_real(cfg.lambda_q);
  kv["tau_q"] = format_real(cfg.tau_q);
  kv["kernel_metric"] = cfg.kernel_metric;
  kv["perturb_mode"] = cfg.perturb_mode;
  kv["dropout_rate"] = format_real(cfg.dropout_rate);
  kv["pfa_channels"] = std::to_string(cfg.pfa_channels);
  kv["threads"] = std::to_string(cfg.threads);
  kv["log_every"] = std::to_string(cfg.log_every);
  kv["eq9_mixed_target"] = cfg.eq9_mixed_target ? "true" : "false";
  kv["augment"] = cfg.augment ? "true" : "false";
  return kv;
}

TrainConfig load_config(const std::string& path) { return config_from_map(load_key_value(path)); }

void save_config(const std::string& path, const TrainConfig& cfg) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  for (const auto& [k, v] : config_to_map(cfg)) os << k << "=" << v << "\n";
}

std::uint64_t test_set_seed(std::uint64_t train_seed) { return splitmix64(train_seed ^ 0x7e57da7aull); }

std::vector<int> pseudo_label(const Tensor& prob) {
  if (prob.rank() != 4 || prob.dim(0) != 1) {
    throw std::invalid_argument("pseudo_label: expected [1, C, H, W] probability map, got " +
                                shape_string(prob.shape()));
  }
  const int C = prob.dim(1), H = prob.dim(2), W = prob.dim(3);
  auto pv = prob.values();
  std::vector<int> out(static_cast<std::size_t>(H) * W);
  for (std::size_t p = 0; p < out.size(); ++p) {
    int best = 0;
    double bv = pv[p];
    for (int c = 1; c < C; ++c) {
      const double v = pv[static_cast<std::size_t>(c) * H * W + p];
      if (v > bv) {  // strict: ties keep class 0
        bv = v;
        best = c;
      }
    }
    out[p] = best;
  }
  return out;
}

MixedSample cutmix_pair(const Tensor& x1, const Tensor& x2, const std::vector<int>& y1,
                        const std::vector<int>& y2, std::uint64_t seed, double forced_fraction) {
  if (x1.shape() != x2.shape()) {
    throw std::invalid_argument("cutmix_pair: incompatible shapes " + shape_string(x1.shape()) +
                                " and " + shape_string(x2.shape()));
  }
  const int H = x1.dim(x1.rank() - 2), W = x1.dim(x1.rank() - 1);
  if (y1.size() != static_cast<std::size_t>(H) * W || y2.size() != y1.size()) {
    throw std::invalid_argument("cutmix_pair: label size does not match image grid");
  }
  RngStream rng(seed, /*tag=*/0x6d6978);
  double f = forced_fraction >= 0.0 ? forced_fraction : rng.uniform_in(0, 0.1, 0.4);
  f = std::clamp(f, 0.0, 1.0);
  const double side = std::sqrt(f);
  const int rh = static_cast<int>(std::lround(side * H));
  const int rw = static_cast<int>(std::lround(side * W));

  MixedSample out;
  out.image = x1.clone();
  out.labels = y1;
  out.area_fraction = static_cast<double>(rh) * rw / (static_cast<double>(H) * W);
  if (rh == 0 || rw == 0) return out;
  const int r0 = static_cast<int>(rng.below(1, static_cast<std::uint64_t>(H - rh + 1)));
  const int c0 = static_cast<int>(rng.below(2, static_cast<std::uint64_t>(W - rw + 1)));
  auto dst = out.image.values();
  auto src = x2.values();
  for (int r = r0; r < r0 + rh; ++r) {
    for (int c = c0; c < c0 + rw; ++c) {
      const std::size_t p = static_cast<std::size_t>(r) * W + c;
      dst[p] = src[p];
      out.labels[p] = y2[p];
    }
  }
  return out;
}

Tensor cross_entropy_loss(const std::vector<int>& target, const Tensor& logits) {
  if (logits.rank() != 4 || logits.dim(0) != 1) {
    throw std::invalid_argument("cross_entropy_loss: expected [1, C, H, W] logits, got " +
                                shape_string(logits.shape()));
  }
  const int C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  if (target.size() != static_cast<std::size_t>(H) * W) {
    throw std::invalid_argument("cross_entropy_loss: target has " + std::to_string(target.size()) +
                                " pixels, logits grid is " + std::to_string(H) + "x" + std::to_string(W));
  }
  Tensor onehot = Tensor::zeros(logits.shape());
  auto ov = onehot.values();
  for (std::size_t p = 0; p < target.size(); ++p) {
    const int c = target[p];
    if (c < 0 || c >= C) {
      throw std::invalid_argument("cross_entropy_loss: class " + std::to_string(c) + " out of range [0, " +
                                  std::to_string(C) + ")");
    }
    ov[static_cast<std::size_t>(c) * H * W + p] = 1.0;
  }
  Tensor lsm = log_softmax(logits, 1);
  return neg(scale(sum(mul(onehot, lsm)), 1.0 / (static_cast<double>(H) * W)));
}

namespace {

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag, std::uint64_t i) {
  return RngStream(base, tag).bits(i);
}

Tensor sum_tensors(const std::vector<Tensor>& ts) {
  if (ts.empty()) return Tensor::scalar(0.0);
  Tensor acc = ts[0];
  for (std::size_t i = 1; i < ts.size(); ++i) acc = add(acc, ts[i]);
  return acc;
}

PerturbSpec perturb_spec(const TrainConfig& cfg, const PerturbationKernel* kernel, std::uint64_t seed) {
  PerturbSpec spec;
  spec.seed = seed;
  if (cfg.perturb_mode == "qpm") {
    spec.mode = PerturbSpec::Mode::qpm;
    spec.kernel = kernel;
  } else if (cfg.perturb_mode == "feature_dropout") {
    spec.mode = PerturbSpec::Mode::feature_dropout;
    spec.dropout_rate = cfg.dropout_rate;
  }
  return spec;
}

Tensor align_term(const ForwardResult& fr, const SegModel& model, const FrozenExtractor& ext,
                  const Tensor& image, double tau) {
  PatchFeatureMap pfa_map = pfa_project(fr.vq_clean, model.pfa);
  PatchFeatureMap fm = frozen_extract(image, ext);
  return contrastive_align_loss(pfa_map, fm, tau);
}

// 90-degree clockwise rotations (k times); exact for masks.
Tensor rotate90_image(const Tensor& img, int k) {
  k = ((k % 4) + 4) % 4;
  if (k == 0) return img.clone();
  const int S = img.dim(img.rank() - 1);
  Tensor out = Tensor::zeros(img.shape());
  auto src = img.values();
  auto dst = out.values();
  for (int r = 0; r < S; ++r) {
    for (int c = 0; c < S; ++c) {
      int rr = r, cc = c;
      for (int t = 0; t < k; ++t) {
        const int nr = cc, nc = S - 1 - rr;
        rr = nr;
        cc = nc;
      }
      dst[static_cast<std::size_t>(rr) * S + cc] = src[static_cast<std::size_t>(r) * S + c];
    }
  }
  return out;
}

std::vector<int> rotate90_mask(const std::vector<int>& mask, int S, int k) {
  k = ((k % 4) + 4) % 4;
  if (k == 0) return mask;
  std::vector<int> out(mask.size());
  for (int r = 0; r < S; ++r) {
    for (int c = 0; c < S; ++c) {
      int rr = r, cc = c;
      for (int t = 0; t < k; ++t) {
        const int nr = cc, nc = S - 1 - rr;
        rr = nr;
        cc = nc;
      }
      out[static_cast<std::size_t>(rr) * S + cc] = mask[static_cast<std::size_t>(r) * S + c];
    }
  }
  return out;
}

Tensor intensity_jitter(const Tensor& img, double gain, double bias) {
  Tensor out = img.clone();
  auto v = out.values();
  for (auto& x : v) x = std::clamp(gain * x + bias, 0.0, 1.0);
  return out;
}

struct WorkItem {
  enum class Kind { labeled, unlabeled, cutmix };
  Kind kind = Kind::labeled;
  Tensor x;
  std::vector<int> target;
  std::uint64_t perturb_seed = 0;
};

struct ItemTensors {
  Tensor rec, seg, align, vq_cb, vq_commit, entropy;
  std::vector<int> indices;
};

ItemTensors eval_item(const WorkItem& it, const SegModel& model, const FrozenExtractor& ext,
                      const PerturbationKernel* kernel, const TrainConfig& cfg) {
  PerturbSpec spec;
  if (it.kind == WorkItem::Kind::unlabeled) spec = perturb_spec(cfg, kernel, it.perturb_seed);
  ForwardResult fr = forward(model, it.x, spec);
  ItemTensors t;
  t.indices = fr.qm.indices;
  t.seg = cross_entropy_loss(it.target, fr.seg_logits);
  if (it.kind != WorkItem::Kind::cutmix) {
    t.rec = l1_distance(fr.recon, it.x);
    t.align = align_term(fr, model, ext, it.x, cfg.tau);
  }
  VqLosses vq = vq_losses(fr.z_hwd, fr.qm, model.codebook, cfg.beta_commit);
  t.vq_cb = vq.codebook_loss;
  t.vq_commit = vq.commitment_loss;
  t.entropy = entropy_regularizer(fr.z_hwd, model.codebook, cfg.tau_q);
  return t;
}

// Weighted contribution of one item to the step objective. b_u == 0 means the
// unlabeled streams are disabled.
Tensor weighted_objective(const ItemTensors& t, WorkItem::Kind kind, int b_l, int b_u,
                          const TrainConfig& cfg) {
  const double align_w = cfg.lambda_a / static_cast<double>(b_l + b_u);
  const double stream_w = 1.0 / static_cast<double>(b_l + 2 * b_u);
  double main_w = 0.0;
  switch (kind) {
    case WorkItem::Kind::labeled: main_w = 1.0 / static_cast<double>(b_l); break;
    case WorkItem::Kind::unlabeled:
    case WorkItem::Kind::cutmix: main_w = cfg.lambda_u / static_cast<double>(b_u); break;
  }
  Tensor acc = scale(t.seg, main_w);
  if (t.rec.defined()) acc = add(acc, scale(t.rec, main_w));
  if (t.align.defined()) acc = add(acc, scale(t.align, align_w));
  acc = add(acc, scale(t.vq_cb, stream_w));
  acc = add(acc, scale(t.vq_commit, stream_w));
  acc = add(acc, scale(t.entropy, stream_w * cfg.lambda_q));
  return acc;
}

std::vector<std::vector<int>> teacher_pseudo_labels(const SegModel& teacher,
                                                    const std::vector<Tensor>& images) {
  NoGradGuard guard;
  std::vector<std::vector<int>> out;
  out.reserve(images.size());
  for (const Tensor& x : images) out.push_back(pseudo_label(forward(teacher, x).seg_prob));
  return out;
}

void mean_std(const std::vector<double>& xs, double& mean, double& sd) {
  mean = 0.0;
  sd = 0.0;
  if (xs.empty()) return;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) return;
  double acc = 0.0;
  for (double x : xs) acc += (x - mean) * (x - mean);
  sd = std::sqrt(acc / static_cast<double>(xs.size() - 1));
}

}  // namespace

Tensor labeled_loss(const Tensor& x, const std::vector<int>& y, const SegModel& model) {
  ForwardResult fr = forward(model, x);
  return add(l1_distance(fr.recon, x), cross_entropy_loss(y, fr.seg_logits));
}

Tensor unlabeled_loss(const std::vector<Tensor>& xs, const SegModel& student,
                      const SegModel& teacher, const PerturbationKernel& kernel,
                      std::uint64_t seed, const TrainConfig& cfg) {
  if (xs.empty()) throw std::invalid_argument("unlabeled_loss: empty batch");
  const int B = static_cast<int>(xs.size());
  const std::vector<std::vector<int>> pseudo = teacher_pseudo_labels(teacher, xs);
  std::vector<Tensor> parts;
  parts.reserve(xs.size());
  for (int i = 0; i < B; ++i) {
    const PerturbSpec spec = perturb_spec(cfg, &kernel, derive_seed(seed, 0x7074, static_cast<std::uint64_t>(i)));
    ForwardResult fr = forward(student, xs[i], spec);
    Tensor item = add(l1_distance(fr.recon, xs[i]), cross_entropy_loss(pseudo[i], fr.seg_logits));
    const int j = (i + 1) % B;
    MixedSample ms = cutmix_pair(xs[i], xs[j], pseudo[i], pseudo[j],
                                 derive_seed(seed, 0x6d78, static_cast<std::uint64_t>(i)));
    ForwardResult fa = forward(student, ms.image);
    item = add(item, cross_entropy_loss(cfg.eq9_mixed_target ? ms.labels : pseudo[i], fa.seg_logits));
    parts.push_back(item);
  }
  return scale(sum_tensors(parts), 1.0 / static_cast<double>(B));
}

LossBreakdown total_loss(const TrainBatch& batch, const SegModel& student, const SegModel& teacher,
                         const FrozenExtractor& extractor, const PerturbationKernel& kernel,
                         const TrainConfig& cfg, std::uint64_t step_seed) {
  if (batch.labeled.empty()) throw std::invalid_argument("total_loss: batch has no labeled samples");
  const bool use_unlabeled = cfg.lambda_u != 0.0 && !batch.unlabeled.empty();

  std::vector<Tensor> l_parts, align_parts;
  for (const auto& le : batch.labeled) {
    ForwardResult fr = forward(student, le.image);
    l_parts.push_back(add(l1_distance(fr.recon, le.image), cross_entropy_loss(le.mask, fr.seg_logits)));
    align_parts.push_back(align_term(fr, student, extractor, le.image, cfg.tau));
  }
  Tensor l_l = scale(sum_tensors(l_parts), 1.0 / static_cast<double>(batch.labeled.size()));

  Tensor l_u = Tensor::scalar(0.0);
  int b_u = 0;
  if (use_unlabeled) {
    b_u = static_cast<int>(batch.unlabeled.size());
    const std::vector<std::vector<int>> pseudo = teacher_pseudo_labels(teacher, batch.unlabeled);
    std::vector<Tensor> u_parts;
    for (int i = 0; i < b_u; ++i) {
      const PerturbSpec spec =
          perturb_spec(cfg, &kernel, derive_seed(step_seed, 0x7074, static_cast<std::uint64_t>(i)));
      ForwardResult fr = forward(student, batch.unlabeled[i], spec);
      Tensor item = add(l1_distance(fr.recon, batch.unlabeled[i]),
                        cross_entropy_loss(pseudo[i], fr.seg_logits));
      align_parts.push_back(align_term(fr, student, extractor, batch.unlabeled[i], cfg.tau));
      const int j = (i + 1) % b_u;
      MixedSample ms = cutmix_pair(batch.unlabeled[i], batch.unlabeled[j], pseudo[i], pseudo[j],
                                   derive_seed(step_seed, 0x6d78, static_cast<std::uint64_t>(i)));
      ForwardResult fa = forward(student, ms.image);
      item = add(item, cross_entropy_loss(cfg.eq9_mixed_target ? ms.labels : pseudo[i], fa.seg_logits));
      u_parts.push_back(item);
    }
    l_u = scale(sum_tensors(u_parts), 1.0 / static_cast<double>(b_u));
  }

  Tensor l_align = scale(sum_tensors(align_parts),
                         1.0 / static_cast<double>(batch.labeled.size() + b_u));
  LossBreakdown out;
  out.labeled = l_l;
  out.unlabeled = l_u;
  out.align = l_align;
  out.total = add(add(l_l, scale(l_u, cfg.lambda_u)), scale(l_align, cfg.lambda_a));
  return out;
}

EvalResult evaluate_model(const SegModel& model, const std::vector<SyntheticSample>& test_set) {
  NoGradGuard guard;
  EvalResult r;
  std::vector<double> dices, jacs, hds, asds;
  for (const auto& sample : test_set) {
    ForwardResult fr = forward(model, sample.image);
    const int S = sample.image.dim(3);
    MaskPair mp;
    mp.H = S;
    mp.W = S;
    mp.pred = pseudo_label(fr.seg_prob);
    mp.gt = sample.mask;
    const OverlapScores ov = dice_jaccard(mp);
    SampleMetrics sm;
    sm.id = sample.id;
    sm.dice = ov.dice;
    sm.jaccard = ov.jaccard;
    const bool pred_empty =
        std::none_of(mp.pred.begin(), mp.pred.end(), [](int v) { return v != 0; });
    if (pred_empty) {
      // No boundary to measure; penalize with the image diagonal.
      sm.pred_empty = true;
      sm.hd95 = sm.asd = std::hypot(static_cast<double>(S), static_cast<double>(S));
      ++r.pred_empty_count;
    } else {
      const SurfaceScores ss = surface_metrics(mp);
      sm.hd95 = ss.hd95;
      sm.asd = ss.asd;
    }
    dices.push_back(sm.dice);
    jacs.push_back(sm.jaccard);
    hds.push_back(sm.hd95);
    asds.push_back(sm.asd);
    r.per_sample.push_back(sm);
  }
  mean_std(dices, r.dice_mean, r.dice_std);
  mean_std(jacs, r.jaccard_mean, r.jaccard_std);
  mean_std(hds, r.hd95_mean, r.hd95_std);
  mean_std(asds, r.asd_mean, r.asd_std);
  return r;
}

std::string metrics_json_string(const EvalResult& result) {
  nlohmann::json j;
  j["n"] = result.per_sample.size();
  j["pred_empty_count"] = result.pred_empty_count;
  nlohmann::json per = nlohmann::json::array();
  for (const auto& s : result.per_sample) {
    per.push_back({{"id", s.id},
                   {"dice", s.dice},
                   {"jaccard", s.jaccard},
                   {"hd95", s.hd95},
                   {"asd", s.asd},
                   {"pred_empty", s.pred_empty}});
  }
  j["per_sample"] = per;
  j["aggregate"] = {{"dice_mean", result.dice_mean},     {"dice_std", result.dice_std},
                    {"jaccard_mean", result.jaccard_mean}, {"jaccard_std", result.jaccard_std},
                    {"hd95_mean", result.hd95_mean},     {"hd95_std", result.hd95_std},
                    {"asd_mean", result.asd_mean},       {"asd_std", result.asd_std}};
  return j.dump(2) + "\n";
}

void write_metrics_json(const std::string& path, const EvalResult& result) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os << metrics_json_string(result);
}

namespace {

struct ItemOut {
  double rec = 0.0, seg = 0.0, align = 0.0, vq_cb = 0.0, vq_commit = 0.0, entropy = 0.0;
  WorkItem::Kind kind = WorkItem::Kind::labeled;
  std::vector<int> indices;
  std::vector<std::vector<double>> grads;  // per master parameter; empty when untouched
};

// Evaluates items on private model clones (threads partition the items) and
// leaves gradient accumulation to the caller so the reduction order is fixed.
std::vector<ItemOut> run_items(const std::vector<WorkItem>& items, const SegModel& student,
                               const FrozenExtractor& ext, const PerturbationKernel* kernel,
                               const TrainConfig& cfg, int b_l, int b_u) {
  std::vector<ItemOut> outs(items.size());
  auto work = [&](std::size_t idx) {
    const WorkItem& it = items[idx];
    SegModel local = student.clone();
    ItemOut out;
    out.kind = it.kind;
    {
      Tape tape;
      ItemTensors t = eval_item(it, local, ext, kernel, cfg);
      Tensor obj = weighted_objective(t, it.kind, b_l, b_u, cfg);
      tape.backward(obj);
      out.seg = t.seg.item();
      out.rec = t.rec.defined() ? t.rec.item() : 0.0;
      out.align = t.align.defined() ? t.align.item() : 0.0;
      out.vq_cb = t.vq_cb.item();
      out.vq_commit = t.vq_commit.item();
      out.entropy = t.entropy.item();
      out.indices = std::move(t.indices);
    }
    const auto params = local.parameters();
    out.grads.resize(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto g = params[p].grad();
      if (!g.empty()) out.grads[p].assign(g.begin(), g.end());
    }
    outs[idx] = std::move(out);
  };
  const int nthreads = std::min<int>(cfg.threads, static_cast<int>(items.size()));
  if (nthreads <= 1) {
    for (std::size_t i = 0; i < items.size(); ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(nthreads);
    for (int t = 0; t < nthreads; ++t) {
      pool.emplace_back([&, t]() {
        for (std::size_t i = static_cast<std::size_t>(t); i < items.size(); i += nthreads) work(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  return outs;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const std::string& out_dir) {
  validate_config(cfg);
  fs::create_directories(out_dir);

  const auto dataset = gen_synthetic_dataset(cfg.n, cfg.image_size, cfg.seed, cfg.labeled_ratio);
  std::vector<int> labeled_pool, unlabeled_pool;
  for (int i = 0; i < cfg.n; ++i) (dataset[i].labeled ? labeled_pool : unlabeled_pool).push_back(i);
  if (labeled_pool.empty()) throw std::runtime_error("train: dataset has no labeled samples");
  const auto test_set = gen_synthetic_dataset(cfg.n_test, cfg.image_size, test_set_seed(cfg.seed), 1.0);

  SegModel student = make_seg_model(cfg.K, cfg.D, 2, cfg.pfa_channels, cfg.image_size / 4,
                                    cfg.image_size / 4, cfg.seed);
  student.set_requires_grad(true);
  SegModel teacher = student.clone();
  teacher.set_requires_grad(false);
  const FrozenExtractor extractor =
      make_frozen_extractor(cfg.pfa_channels, splitmix64(cfg.seed + 0xf00d));
  const KernelMetric kmetric = kernel_metric_from_name(cfg.kernel_metric);

  const bool use_unlabeled =
      cfg.lambda_u != 0.0 && cfg.batch_unlabeled > 0 && !unlabeled_pool.empty();
  const int b_l = cfg.batch_labeled;
  const int b_u = use_unlabeled ? cfg.batch_unlabeled : 0;

  std::ofstream losses_csv(fs::path(out_dir) / "losses.csv");
  if (!losses_csv) throw std::runtime_error("cannot open losses.csv in " + out_dir);
  losses_csv << "step,lr,total,loss_labeled,loss_unlabeled,loss_align,loss_vq_codebook,"
                "loss_vq_commitment,loss_entropy,utilization\n";
  std::vector<UtilizationRecord> util_records;
  std::vector<long long> cumulative_hist(static_cast<std::size_t>(cfg.K), 0);

  auto export_pca = [&](const std::string& tag) {
    std::vector<bool> active(static_cast<std::size_t>(cfg.K));
    for (int k = 0; k < cfg.K; ++k) active[static_cast<std::size_t>(k)] = cumulative_hist[static_cast<std::size_t>(k)] > 0;
    const auto pts = pca_export(student.codebook, active);
    std::ofstream os(fs::path(out_dir) / ("codebook_pca_" + tag + ".csv"));
    os << "x,y,active\n";
    for (const auto& p : pts) os << format_real(p.x) << "," << format_real(p.y) << "," << (p.active ? 1 : 0) << "\n";
  };
  export_pca("initial");

  RngStream r_batch(cfg.seed, 0xba7c4);
  RngStream r_aug(cfg.seed, 0xa06);
  RngStream r_step(cfg.seed, 0x57e9);

  for (long long step = 0; step < cfg.iters; ++step) {
    if (step == cfg.iters / 2 && step > 0) export_pca("mid");
    const double lr_t =
        cfg.lr * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(cfg.iters), 0.9);

    PerturbationKernel kernel;
    if (use_unlabeled && cfg.perturb_mode == "qpm") {
      kernel = transition_kernel(student.codebook, cfg.eps, kmetric);
    }

    // Assemble the augmented batch. The teacher always sees raw images; the
    // student's targets are rotated into its augmented frame.
    RngStream rs = r_batch.sub(static_cast<std::uint64_t>(step));
    RngStream ra = r_aug.sub(static_cast<std::uint64_t>(step));
    const std::uint64_t step_seed = r_step.bits(static_cast<std::uint64_t>(step));
    std::vector<WorkItem> items;
    items.reserve(static_cast<std::size_t>(b_l + 2 * b_u));
    for (int i = 0; i < b_l; ++i) {
      const auto& s = dataset[labeled_pool[rs.below(static_cast<std::uint64_t>(i), labeled_pool.size())]];
      RngStream rg = ra.sub(0x100 + static_cast<std::uint64_t>(i));
      const int k = cfg.augment ? static_cast<int>(rg.below(0, 4)) : 0;
      const double gain = cfg.augment ? rg.uniform_in(1, 0.9, 1.1) : 1.0;
      const double bias = cfg.augment ? rg.uniform_in(2, -0.05, 0.05) : 0.0;
      WorkItem it;
      it.kind = WorkItem::Kind::labeled;
      it.x = intensity_jitter(rotate90_image(s.image, k), gain, bias);
      it.target = rotate90_mask(s.mask, cfg.image_size, k);
      items.push_back(std::move(it));
    }
    if (use_unlabeled) {
      std::vector<Tensor> raw(static_cast<std::size_t>(b_u));
      std::vector<Tensor> aug(static_cast<std::size_t>(b_u));
      std::vector<int> rots(static_cast<std::size_t>(b_u));
      for (int i = 0; i < b_u; ++i) {
        const auto& s =
            dataset[unlabeled_pool[rs.below(0x200 + static_cast<std::uint64_t>(i), unlabeled_pool.size())]];
        RngStream rg = ra.sub(0x200 + static_cast<std::uint64_t>(i));
        rots[static_cast<std::size_t>(i)] = cfg.augment ? static_cast<int>(rg.below(0, 4)) : 0;
        raw[static_cast<std::size_t>(i)] = s.image;
        aug[static_cast<std::size_t>(i)] = intensity_jitter(
            rotate90_image(s.image, rots[static_cast<std::size_t>(i)]),
            cfg.augment ? rg.uniform_in(1, 0.9, 1.1) : 1.0,
            cfg.augment ? rg.uniform_in(2, -0.05, 0.05) : 0.0);
      }
      const std::vector<std::vector<int>> pseudo_raw = teacher_pseudo_labels(teacher, raw);
      std::vector<std::vector<int>> targets(static_cast<std::size_t>(b_u));
      for (int i = 0; i < b_u; ++i) {
        targets[static_cast<std::size_t>(i)] =
            rotate90_mask(pseudo_raw[static_cast<std::size_t>(i)], cfg.image_size, rots[static_cast<std::size_t>(i)]);
        WorkItem it;
        it.kind = WorkItem::Kind::unlabeled;
        it.x = aug[static_cast<std::size_t>(i)];
        it.target = targets[static_cast<std::size_t>(i)];
        it.perturb_seed = derive_seed(step_seed, 0x7074, static_cast<std::uint64_t>(i));
        items.push_back(std::move(it));
      }
      for (int i = 0; i < b_u; ++i) {
        const int j = (i + 1) % b_u;
        MixedSample ms = cutmix_pair(aug[static_cast<std::size_t>(i)], aug[static_cast<std::size_t>(j)],
                                     targets[static_cast<std::size_t>(i)], targets[static_cast<std::size_t>(j)],
                                     derive_seed(step_seed, 0x6d78, static_cast<std::uint64_t>(i)));
        WorkItem it;
        it.kind = WorkItem::Kind::cutmix;
        it.x = std::move(ms.image);
        it.target = cfg.eq9_mixed_target ? std::move(ms.labels) : targets[static_cast<std::size_t>(i)];
        items.push_back(std::move(it));
      }
    }

    const std::vector<ItemOut> outs =
        run_items(items, student, extractor, cfg.perturb_mode == "qpm" ? &kernel : nullptr, cfg, b_l, b_u);

    // Fixed-order reduction keeps results independent of the thread count.
    auto master_params = student.parameters();
    double acc_l = 0.0, acc_u = 0.0, acc_align = 0.0, acc_cb = 0.0, acc_commit = 0.0, acc_ent = 0.0;
    UtilizationRecord step_util;
    step_util.step = step;
    step_util.histogram.assign(static_cast<std::size_t>(cfg.K), 0);
    for (const ItemOut& out : outs) {
      for (std::size_t p = 0; p < master_params.size(); ++p) {
        if (out.grads[p].empty()) continue;
        auto g = master_params[p].grad_mut();
        const auto& src = out.grads[p];
        for (std::size_t k = 0; k < src.size(); ++k) g[k] += src[k];
      }
      switch (out.kind) {
        case WorkItem::Kind::labeled: acc_l += out.rec + out.seg; break;
        case WorkItem::Kind::unlabeled: acc_u += out.rec + out.seg; break;
        case WorkItem::Kind::cutmix: acc_u += out.seg; break;
      }
      acc_align += out.align;
      acc_cb += out.vq_cb;
      acc_commit += out.vq_commit;
      acc_ent += out.entropy;
      for (int idx : out.indices) ++step_util.histogram[static_cast<std::size_t>(idx)];
    }
    const int streams = b_l + 2 * b_u;
    const double l_l = acc_l / b_l;
    const double l_u = b_u > 0 ? acc_u / b_u : 0.0;
    const double l_align = acc_align / (b_l + b_u);
    const double vq_cb = acc_cb / streams;
    const double vq_commit = acc_commit / streams;
    const double entropy = acc_ent / streams;
    const double total = l_l + cfg.lambda_u * l_u + cfg.lambda_a * l_align;

    if (!std::isfinite(total) || !std::isfinite(vq_cb) || !std::isfinite(vq_commit) ||
        !std::isfinite(entropy)) {
      std::ostringstream msg;
      msg << "train: non-finite loss at step " << step << ": L_l=" << l_l << " L_u=" << l_u
          << " L_align=" << l_align << " vq_codebook=" << vq_cb << " vq_commitment=" << vq_commit
          << " entropy=" << entropy;
      throw std::runtime_error(msg.str());
    }

    for (auto& p : master_params) {
      if (!p.has_grad()) continue;
      auto v = p.values();
      auto g = p.grad();
      for (std::size_t k = 0; k < v.size(); ++k) v[k] -= lr_t * g[k];
      p.zero_grad();
    }
    check_distinct_codewords(student.codebook);
    ema_update(teacher, student, cfg.ema_alpha);

    long long nonzero = 0;
    for (std::size_t k = 0; k < step_util.histogram.size(); ++k) {
      cumulative_hist[k] += step_util.histogram[k];
      nonzero += step_util.histogram[k] > 0 ? 1 : 0;
    }
    step_util.utilization = static_cast<double>(nonzero) / static_cast<double>(cfg.K);

    if (step % cfg.log_every == 0 || step == cfg.iters - 1) {
      losses_csv << step << "," << format_real(lr_t) << "," << format_real(total) << ","
                 << format_real(l_l) << "," << format_real(l_u) << "," << format_real(l_align) << ","
                 << format_real(vq_cb) << "," << format_real(vq_commit) << ","
                 << format_real(entropy) << "," << format_real(step_util.utilization) << "\n";
      util_records.push_back(step_util);
    }
    if (cfg.iters >= 10 && step % std::max<long long>(1, cfg.iters / 10) == 0) {
      std::cerr << "vqlab train: step " << step << "/" << cfg.iters << " total=" << total << "\n";
    }
  }

  export_pca("final");
  {
    std::ofstream os(fs::path(out_dir) / "utilization.csv");
    os << "step,utilization,entropy_of_histogram\n";
    for (const auto& rec : util_records) {
      os << rec.step << "," << format_real(rec.utilization) << ","
         << format_real(histogram_entropy(rec.histogram)) << "\n";
    }
  }
  save_config((fs::path(out_dir) / "config.txt").string(), cfg);
  save_model(out_dir, "student", student);
  save_model(out_dir, "teacher", teacher);

  TrainResult result;
  result.out_dir = out_dir;
  result.test_metrics = evaluate_model(student, test_set);
  write_metrics_json((fs::path(out_dir) / "metrics.json").string(), result.test_metrics);
  return result;
}

}  // namespace vqlab
