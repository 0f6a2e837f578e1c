#include "vqlab/model.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "vqlab/io.hpp"
#include "vqlab/rng.hpp"

namespace vqlab {

namespace {

constexpr int kEnc1 = 8;
constexpr int kEnc2 = 16;
constexpr int kDec1 = 16;
constexpr int kDec2 = 8;

Tensor he_normal(std::vector<int> shape, int fan_in, const RngStream& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  auto v = t.values();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = sd * rng.normal(i);
  return t;
}

Tensor apply_conv(const Conv2dLayer& layer, const Tensor& x) {
  return add_channel_bias(conv2d(x, layer.w, layer.stride, layer.pad), layer.b);
}

Tensor apply_convt(const ConvT2dLayer& layer, const Tensor& x) {
  return add_channel_bias(conv_transpose2d(x, layer.w, layer.stride, layer.pad, layer.out_pad), layer.b);
}

Tensor decode(const DecoderNet& dec, const Tensor& feat) {
  Tensor t = relu(apply_convt(dec.d1, feat));
  t = relu(apply_convt(dec.d2, t));
  return apply_conv(dec.d3, t);
}

DecoderNet make_decoder(int in_ch, int out_ch, const RngStream& rng) {
  DecoderNet dec;
  dec.d1.w = he_normal({in_ch, kDec1, 3, 3}, in_ch * 9, rng.sub(0));
  dec.d1.b = Tensor::zeros({kDec1});
  dec.d2.w = he_normal({kDec1, kDec2, 3, 3}, kDec1 * 9, rng.sub(1));
  dec.d2.b = Tensor::zeros({kDec2});
  dec.d3 = Conv2dLayer{he_normal({out_ch, kDec2, 3, 3}, kDec2 * 9, rng.sub(2)), Tensor::zeros({out_ch}), 1, 1};
  return dec;
}

}  // namespace

SegModel make_seg_model(int K, int D, int num_classes, int pfa_channels, int pfa_h, int pfa_w,
                        std::uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("make_seg_model: num_classes must be >= 2");
  RngStream rng(seed, /*tag=*/0x6d6f64);
  SegModel m;
  m.num_classes = num_classes;
  m.encoder.c1 = Conv2dLayer{he_normal({kEnc1, 1, 3, 3}, 9, rng.sub(10)), Tensor::zeros({kEnc1}), 2, 1};
  m.encoder.c2 = Conv2dLayer{he_normal({kEnc2, kEnc1, 3, 3}, kEnc1 * 9, rng.sub(11)), Tensor::zeros({kEnc2}), 2, 1};
  m.encoder.c3 = Conv2dLayer{he_normal({D, kEnc2, 3, 3}, kEnc2 * 9, rng.sub(12)), Tensor::zeros({D}), 1, 1};
  m.image_dec = make_decoder(D, 1, rng.sub(20));
  m.seg_dec = make_decoder(D, num_classes, rng.sub(30));
  m.codebook = init_codebook(K, D, InitScheme::uniform_random, splitmix64(seed + 0x6362));
  m.pfa = make_pfa_adapter(D, pfa_channels, pfa_h, pfa_w, splitmix64(seed + 0x706661));
  return m;
}

std::vector<std::pair<std::string, Tensor>> SegModel::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(17);
  out.emplace_back("encoder.c1.w", encoder.c1.w);
  out.emplace_back("encoder.c1.b", encoder.c1.b);
  out.emplace_back("encoder.c2.w", encoder.c2.w);
  out.emplace_back("encoder.c2.b", encoder.c2.b);
  out.emplace_back("encoder.c3.w", encoder.c3.w);
  out.emplace_back("encoder.c3.b", encoder.c3.b);
  out.emplace_back("image_dec.d1.w", image_dec.d1.w);
  out.emplace_back("image_dec.d1.b", image_dec.d1.b);
  out.emplace_back("image_dec.d2.w", image_dec.d2.w);
  out.emplace_back("image_dec.d2.b", image_dec.d2.b);
  out.emplace_back("image_dec.d3.w", image_dec.d3.w);
  out.emplace_back("image_dec.d3.b", image_dec.d3.b);
  out.emplace_back("seg_dec.d1.w", seg_dec.d1.w);
  out.emplace_back("seg_dec.d1.b", seg_dec.d1.b);
  out.emplace_back("seg_dec.d2.w", seg_dec.d2.w);
  out.emplace_back("seg_dec.d2.b", seg_dec.d2.b);
  out.emplace_back("seg_dec.d3.w", seg_dec.d3.w);
  out.emplace_back("seg_dec.d3.b", seg_dec.d3.b);
  out.emplace_back("pfa.w", pfa.w);
  out.emplace_back("pfa.b", pfa.b);
  out.emplace_back("codebook", codebook.codewords);
  return out;
}

std::vector<Tensor> SegModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

void SegModel::set_requires_grad(bool on) {
  for (auto& t : parameters()) {
    Tensor h = t;
    h.set_requires_grad(on);
  }
}

SegModel SegModel::clone() const {
  SegModel m;
  m.num_classes = num_classes;
  auto cl = [](const Conv2dLayer& l) { return Conv2dLayer{l.w.clone(), l.b.clone(), l.stride, l.pad}; };
  auto clt = [](const ConvT2dLayer& l) {
    return ConvT2dLayer{l.w.clone(), l.b.clone(), l.stride, l.pad, l.out_pad};
  };
  m.encoder = EncoderNet{cl(encoder.c1), cl(encoder.c2), cl(encoder.c3)};
  m.image_dec = DecoderNet{clt(image_dec.d1), clt(image_dec.d2), cl(image_dec.d3)};
  m.seg_dec = DecoderNet{clt(seg_dec.d1), clt(seg_dec.d2), cl(seg_dec.d3)};
  m.codebook = Codebook{codebook.K, codebook.D, codebook.metric, codebook.codewords.clone()};
  m.pfa = PfaAdapter{pfa.out_h, pfa.out_w, pfa.w.clone(), pfa.b.clone()};
  return m;
}

ForwardResult forward(const SegModel& model, const Tensor& image, const PerturbSpec& perturb) {
  Tensor x;
  if (image.rank() == 2) {
    x = reshape(image, {1, 1, image.dim(0), image.dim(1)});
  } else if (image.rank() == 4 && image.dim(0) == 1) {
    x = image;
  } else {
    throw std::invalid_argument("forward: expected [H, W] or [1, 1, H, W] image, got " +
                                shape_string(image.shape()));
  }
  Tensor h = relu(apply_conv(model.encoder.c1, x));
  h = relu(apply_conv(model.encoder.c2, h));
  Tensor z = apply_conv(model.encoder.c3, h);  // [1, D, h, w]
  const int fh = z.dim(2), fw = z.dim(3), d = z.dim(1);

  ForwardResult fr;
  fr.z_hwd = reshape(nchw_to_nhwc(z), {fh, fw, d});
  fr.qm = quantize(fr.z_hwd.detached(), model.codebook);
  fr.vq_clean = ste_dequantize(fr.z_hwd, fr.qm);

  Tensor vq_seg = fr.vq_clean;
  if (perturb.mode == PerturbSpec::Mode::qpm) {
    if (perturb.kernel == nullptr) throw std::invalid_argument("forward: qpm perturbation needs a kernel");
    const QuantizedMap qp = sample_perturbed(fr.qm, model.codebook, *perturb.kernel, perturb.seed);
    vq_seg = ste_dequantize(fr.z_hwd, qp);
    fr.perturbed = true;
  } else if (perturb.mode == PerturbSpec::Mode::feature_dropout) {
    const double p = perturb.dropout_rate;
    if (!(p >= 0.0 && p < 1.0)) {
      throw std::invalid_argument("forward: dropout rate must be in [0, 1), got " + std::to_string(p));
    }
    Tensor mask = Tensor::zeros(fr.vq_clean.shape());
    auto mv = mask.values();
    RngStream rng(perturb.seed, /*tag=*/0x64726f70);
    const double keep_scale = 1.0 / (1.0 - p);
    for (std::size_t i = 0; i < mv.size(); ++i) mv[i] = rng.uniform(i) >= p ? keep_scale : 0.0;
    vq_seg = mul(fr.vq_clean, mask);
    fr.perturbed = true;
  }

  Tensor di_in = nhwc_to_nchw(reshape(fr.vq_clean, {1, fh, fw, d}));
  Tensor ds_in = fr.perturbed ? nhwc_to_nchw(reshape(vq_seg, {1, fh, fw, d})) : di_in;
  fr.recon = decode(model.image_dec, di_in);
  fr.seg_logits = decode(model.seg_dec, ds_in);
  fr.seg_prob = softmax(fr.seg_logits, 1);
  return fr;
}

void ema_update(SegModel& teacher, const SegModel& student, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("ema_update: alpha must be in [0, 1]");
  }
  auto tp = teacher.named_parameters();
  auto sp = student.named_parameters();
  for (std::size_t i = 0; i < tp.size(); ++i) {
    Tensor t = tp[i].second;
    const Tensor& s = sp[i].second;
    if (t.shape() != s.shape()) {
      throw std::invalid_argument("ema_update: parameter '" + tp[i].first + "' shape mismatch " +
                                  shape_string(t.shape()) + " vs " + shape_string(s.shape()));
    }
    auto tv = t.values();
    auto sv = s.values();
    for (std::size_t k = 0; k < tv.size(); ++k) tv[k] = alpha * tv[k] + (1.0 - alpha) * sv[k];
  }
}

void save_model(const std::string& dir, const std::string& prefix, const SegModel& model) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream manifest(fs::path(dir) / (prefix + "_manifest.txt"));
  if (!manifest) throw std::runtime_error("cannot open manifest for writing in " + dir);
  manifest << "meta num_classes " << model.num_classes << "\n";
  manifest << "meta pfa_out " << model.pfa.out_h << " " << model.pfa.out_w << "\n";
  for (const auto& [name, t] : model.named_parameters()) {
    if (name == "codebook") continue;
    const std::string file = prefix + "_" + name + ".txt";
    save_tensor_text((fs::path(dir) / file).string(), t);
    manifest << "tensor " << name << " " << file << "\n";
  }
  const std::string cb_file = prefix + "_codebook.txt";
  save_codebook((fs::path(dir) / cb_file).string(), model.codebook);
  manifest << "codebook " << cb_file << "\n";
}

SegModel load_model(const std::string& dir, const std::string& prefix) {
  namespace fs = std::filesystem;
  const fs::path mpath = fs::path(dir) / (prefix + "_manifest.txt");
  std::ifstream manifest(mpath);
  if (!manifest) throw std::runtime_error("cannot open: " + mpath.string());
  SegModel m;
  std::map<std::string, Tensor> tensors;
  std::string line;
  int pfa_h = 0, pfa_w = 0;
  while (std::getline(manifest, line)) {
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind.empty()) continue;
    if (kind == "meta") {
      std::string key;
      ls >> key;
      if (key == "num_classes") ls >> m.num_classes;
      if (key == "pfa_out") ls >> pfa_h >> pfa_w;
    } else if (kind == "tensor") {
      std::string name, file;
      ls >> name >> file;
      tensors[name] = load_tensor_text((fs::path(dir) / file).string());
    } else if (kind == "codebook") {
      std::string file;
      ls >> file;
      m.codebook = load_codebook((fs::path(dir) / file).string());
    } else {
      throw std::runtime_error(mpath.string() + ": unknown manifest entry '" + kind + "'");
    }
  }
  auto take = [&](const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::runtime_error(mpath.string() + ": missing parameter " + name);
    return it->second;
  };
  m.encoder.c1 = Conv2dLayer{take("encoder.c1.w"), take("encoder.c1.b"), 2, 1};
  m.encoder.c2 = Conv2dLayer{take("encoder.c2.w"), take("encoder.c2.b"), 2, 1};
  m.encoder.c3 = Conv2dLayer{take("encoder.c3.w"), take("encoder.c3.b"), 1, 1};
  m.image_dec = DecoderNet{{take("image_dec.d1.w"), take("image_dec.d1.b"), 2, 1, 1},
                           {take("image_dec.d2.w"), take("image_dec.d2.b"), 2, 1, 1},
                           {take("image_dec.d3.w"), take("image_dec.d3.b"), 1, 1}};
  m.seg_dec = DecoderNet{{take("seg_dec.d1.w"), take("seg_dec.d1.b"), 2, 1, 1},
                         {take("seg_dec.d2.w"), take("seg_dec.d2.b"), 2, 1, 1},
                         {take("seg_dec.d3.w"), take("seg_dec.d3.b"), 1, 1}};
  m.pfa = PfaAdapter{pfa_h, pfa_w, take("pfa.w"), take("pfa.b")};
  return m;
}

}  // namespace vqlab
