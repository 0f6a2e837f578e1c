#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "vqlab/model.hpp"
#include "vqlab/synthetic.hpp"

namespace vqlab {

// All harness hyperparameters. Defaults follow the reference configuration
// (eps = 0.7, lambda_a = 5, lambda_u = 1, ema_alpha = 0.996, batch 8+4).
struct TrainConfig {
  double eps = 0.7;
  double lambda_u = 1.0;
  double lambda_a = 5.0;
  double tau = 0.1;
  double beta_commit = 0.25;
  double ema_alpha = 0.996;
  int K = 64;
  int D = 8;
  double labeled_ratio = 0.1;
  long long iters = 2000;
  std::uint64_t seed = 0;
  int batch_labeled = 8;
  int batch_unlabeled = 4;
  // Harness extensions.
  int n = 200;
  int image_size = 32;
  int n_test = 40;
  double lr = 0.1;
  double lambda_q = 0.1;  // entropy regularizer weight
  double tau_q = 1.0;
  std::string kernel_metric = "euclidean";
  std::string perturb_mode = "qpm";  // qpm | feature_dropout | none
  double dropout_rate = 0.5;         // used by feature_dropout
  int pfa_channels = 16;
  int threads = 1;
  int log_every = 10;
  bool eq9_mixed_target = true;  // cutmix segmentation target: mixed pseudo-label vs unmixed
  bool augment = true;           // rotation + intensity jitter on student inputs
};

void validate_config(const TrainConfig& cfg);
TrainConfig config_from_map(const std::map<std::string, std::string>& kv);
std::map<std::string, std::string> config_to_map(const TrainConfig& cfg);
TrainConfig load_config(const std::string& path);
void save_config(const std::string& path, const TrainConfig& cfg);

// Seed used for the held-out test split of a run.
std::uint64_t test_set_seed(std::uint64_t train_seed);

// Per-pixel argmax of a [1, C, H, W] probability map; ties pick class 0.
std::vector<int> pseudo_label(const Tensor& prob);

struct MixedSample {
  Tensor image;
  std::vector<int> labels;
  double area_fraction = 0.0;
};

// Pastes a rectangle of sample 2 into sample 1 (area fraction uniform in
// [0.1, 0.4], or forced_fraction when >= 0) and mixes the labels with the
// identical rectangle. Deterministic per seed.
MixedSample cutmix_pair(const Tensor& x1, const Tensor& x2, const std::vector<int>& y1,
                        const std::vector<int>& y2, std::uint64_t seed,
                        double forced_fraction = -1.0);

// Mean pixelwise cross-entropy of integer targets against [1, C, H, W] logits.
Tensor cross_entropy_loss(const std::vector<int>& target, const Tensor& logits);

// L1 reconstruction + segmentation cross-entropy on one labeled sample.
Tensor labeled_loss(const Tensor& x, const std::vector<int>& y, const SegModel& model);

// Mean over the unlabeled batch of reconstruction loss, pseudo-label
// segmentation loss on the perturbed stream, and the mixed-sample
// segmentation loss. No gradient reaches the teacher.
Tensor unlabeled_loss(const std::vector<Tensor>& xs, const SegModel& student,
                      const SegModel& teacher, const PerturbationKernel& kernel,
                      std::uint64_t seed, const TrainConfig& cfg);

struct LabeledExample {
  Tensor image;
  std::vector<int> mask;
};

struct TrainBatch {
  std::vector<LabeledExample> labeled;
  std::vector<Tensor> unlabeled;
};

struct LossBreakdown {
  Tensor total;  // L_l + lambda_u * L_u + lambda_a * L_align
  Tensor labeled;
  Tensor unlabeled;
  Tensor align;
};

LossBreakdown total_loss(const TrainBatch& batch, const SegModel& student, const SegModel& teacher,
                         const FrozenExtractor& extractor, const PerturbationKernel& kernel,
                         const TrainConfig& cfg, std::uint64_t step_seed);

struct SampleMetrics {
  int id = 0;
  double dice = 0.0, jaccard = 0.0, hd95 = 0.0, asd = 0.0;
  bool pred_empty = false;  // surface metrics penalized with the image diagonal
};

struct EvalResult {
  std::vector<SampleMetrics> per_sample;
  double dice_mean = 0.0, dice_std = 0.0;
  double jaccard_mean = 0.0, jaccard_std = 0.0;
  double hd95_mean = 0.0, hd95_std = 0.0;
  double asd_mean = 0.0, asd_std = 0.0;
  int pred_empty_count = 0;
};

EvalResult evaluate_model(const SegModel& model, const std::vector<SyntheticSample>& test_set);
std::string metrics_json_string(const EvalResult& result);
void write_metrics_json(const std::string& path, const EvalResult& result);

struct TrainResult {
  EvalResult test_metrics;
  std::string out_dir;
};

// Full training run; writes losses.csv, utilization.csv, metrics.json,
// codebook PCA snapshots and checkpoints under out_dir. Deterministic per
// config seed; aborts on any non-finite loss naming the step and breakdown.
TrainResult train(const TrainConfig& cfg, const std::string& out_dir);

}  // namespace vqlab
