#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vqlab/alignment.hpp"
#include "vqlab/codebook.hpp"
#include "vqlab/perturbation.hpp"
#include "vqlab/tensor.hpp"

namespace vqlab {

struct Conv2dLayer {
  Tensor w, b;
  int stride = 1, pad = 1;
};

struct ConvT2dLayer {
  Tensor w, b;
  int stride = 2, pad = 1, out_pad = 1;
};

// 3 conv stages (stride 2, 2, 1): image -> [1, D, H/4, W/4].
struct EncoderNet {
  Conv2dLayer c1, c2, c3;
};

// Two transposed-conv stages back to full resolution, then a 1-stride head.
struct DecoderNet {
  ConvT2dLayer d1, d2;
  Conv2dLayer d3;
};

// Student/teacher network: shared encoder + codebook, image decoder D_i,
// segmentation decoder D_s, and the PFA projection head.
struct SegModel {
  EncoderNet encoder;
  DecoderNet image_dec;
  DecoderNet seg_dec;
  Codebook codebook;
  PfaAdapter pfa;
  int num_classes = 2;

  // Fixed registration order; includes pfa weights and codebook.codewords.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  void set_requires_grad(bool on);
  SegModel clone() const;
};

SegModel make_seg_model(int K, int D, int num_classes, int pfa_channels, int pfa_h, int pfa_w,
                        std::uint64_t seed);

// How the segmentation stream's quantized features are perturbed. The
// reconstruction stream always uses the clean quantized features.
struct PerturbSpec {
  enum class Mode { none, qpm, feature_dropout };
  Mode mode = Mode::none;
  const PerturbationKernel* kernel = nullptr;  // qpm
  double dropout_rate = 0.0;                   // feature_dropout
  std::uint64_t seed = 0;
};

struct ForwardResult {
  Tensor recon;       // [1, 1, H, W]
  Tensor seg_logits;  // [1, C, H, W]
  Tensor seg_prob;    // [1, C, H, W], softmax over the class axis
  Tensor z_hwd;       // [h, w, D] encoder features (pre-quantization)
  Tensor vq_clean;    // [h, w, D] straight-through features, clean path
  QuantizedMap qm;    // clean quantization of z_hwd
  bool perturbed = false;
};

ForwardResult forward(const SegModel& model, const Tensor& image,
                      const PerturbSpec& perturb = {});

// theta_t <- alpha * theta_t + (1 - alpha) * theta_s, elementwise exact.
void ema_update(SegModel& teacher, const SegModel& student, double alpha);

// Checkpoints: one tensor text file per parameter plus a manifest and the
// codebook in its own format.
void save_model(const std::string& dir, const std::string& prefix, const SegModel& model);
SegModel load_model(const std::string& dir, const std::string& prefix);

}  // namespace vqlab
