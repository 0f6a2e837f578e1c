#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vqlab/codebook.hpp"
#include "vqlab/io.hpp"
#include "vqlab/metrics.hpp"
#include "vqlab/perturbation.hpp"
#include "vqlab/synthetic.hpp"
#include "vqlab/trainer.hpp"

namespace fs = std::filesystem;
using namespace vqlab;

namespace {

void with_output(const std::string& out_path, const std::function<void(std::ostream&)>& fn) {
  if (out_path.empty()) {
    fn(std::cout);
    return;
  }
  std::ofstream os(out_path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + out_path);
  fn(os);
}

std::vector<double> parse_grid(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      std::size_t pos = 0;
      out.push_back(std::stod(item, &pos));
      if (pos != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw std::runtime_error("invalid number in list: '" + item + "'");
    }
  }
  return out;
}

// Index grid text: line 1 "H W", then H rows of W integers.
void write_indices(std::ostream& os, const QuantizedMap& qm) {
  os << qm.H << " " << qm.W << "\n";
  for (int r = 0; r < qm.H; ++r) {
    for (int c = 0; c < qm.W; ++c) {
      os << qm.indices[static_cast<std::size_t>(r) * qm.W + c] << (c + 1 == qm.W ? "\n" : " ");
    }
  }
}

QuantizedMap read_indices(const std::string& path, const Codebook& cb) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open: " + path);
  QuantizedMap qm;
  if (!(is >> qm.H >> qm.W) || qm.H <= 0 || qm.W <= 0) {
    throw std::runtime_error(path + ": malformed index grid header");
  }
  qm.D = cb.D;
  qm.indices.resize(static_cast<std::size_t>(qm.H) * qm.W);
  std::vector<double> deq(static_cast<std::size_t>(qm.H) * qm.W * cb.D);
  auto cv = cb.codewords.values();
  for (std::size_t p = 0; p < qm.indices.size(); ++p) {
    int idx;
    if (!(is >> idx)) throw std::runtime_error(path + ": truncated index grid");
    if (idx < 0 || idx >= cb.K) {
      throw std::runtime_error(path + ": index " + std::to_string(idx) + " out of range [0, " +
                               std::to_string(cb.K) + ")");
    }
    qm.indices[p] = idx;
    for (int d = 0; d < cb.D; ++d) deq[p * cb.D + d] = cv[static_cast<std::size_t>(idx) * cb.D + d];
  }
  qm.dequantized = Tensor({qm.H, qm.W, cb.D}, deq);
  qm.source = Tensor({qm.H, qm.W, cb.D}, std::move(deq));
  return qm;
}

Tensor load_feature_map(const std::string& path) {
  Tensor t = load_tensor_text(path);
  if (t.rank() != 3) {
    throw std::runtime_error(path + ": expected a rank-3 [H W D] feature map, got shape " +
                             shape_string(t.shape()));
  }
  return t;
}

PatchFeatureMap load_patch_map(const std::string& path) {
  Tensor t = load_tensor_text(path);
  if (t.rank() == 2) t = reshape(t, {t.dim(0), 1, t.dim(1)});
  if (t.rank() != 3) {
    throw std::runtime_error(path + ": expected a rank-2 [P C] or rank-3 [H W C] map, got shape " +
                             shape_string(t.shape()));
  }
  return PatchFeatureMap{t};
}

void emit_utilization_csv(std::ostream& os, const std::vector<UtilizationRecord>& recs) {
  os << "step,utilization,entropy_of_histogram\n";
  for (const auto& rec : recs) {
    os << rec.step << "," << format_real(rec.utilization) << ","
       << format_real(histogram_entropy(rec.histogram)) << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vqlab: vector-quantization perturbation laboratory"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic ellipse dataset");
  int gen_n = 16, gen_size = 32;
  std::uint64_t gen_seed = 0;
  double gen_ratio = 0.1;
  std::string gen_out;
  gen->add_option("--n", gen_n, "number of samples")->required();
  gen->add_option("--size", gen_size, "image side length");
  gen->add_option("--seed", gen_seed, "rng seed");
  gen->add_option("--labeled-ratio", gen_ratio, "fraction of labeled samples");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->callback([&] {
    const auto data = gen_synthetic_dataset(gen_n, gen_size, gen_seed, gen_ratio);
    fs::create_directories(gen_out);
    std::ofstream index(fs::path(gen_out) / "index.csv");
    index << "id,labeled\n";
    char name[64];
    for (const auto& s : data) {
      std::snprintf(name, sizeof(name), "sample_%04d", s.id);
      save_tensor_text((fs::path(gen_out) / (std::string(name) + "_image.txt")).string(),
                       reshape(s.image, {gen_size, gen_size}));
      std::vector<double> m(s.mask.begin(), s.mask.end());
      save_tensor_text((fs::path(gen_out) / (std::string(name) + "_mask.txt")).string(),
                       Tensor({gen_size, gen_size}, std::move(m)));
      index << s.id << "," << (s.labeled ? 1 : 0) << "\n";
    }
  });

  // codebook init | report | export-pca
  auto* cb_cmd = app.add_subcommand("codebook", "Codebook utilities");
  cb_cmd->require_subcommand(1);

  auto* cb_init = cb_cmd->add_subcommand("init", "Initialize a codebook");
  int ci_k = 64, ci_d = 8;
  std::string ci_scheme = "uniform_random", ci_sample, ci_out;
  std::uint64_t ci_seed = 0;
  cb_init->add_option("--k", ci_k, "codebook size")->required();
  cb_init->add_option("--d", ci_d, "codeword dimension")->required();
  cb_init->add_option("--scheme", ci_scheme, "uniform_random | kmeans_on_sample")
      ->check(CLI::IsMember({"uniform_random", "kmeans_on_sample"}));
  cb_init->add_option("--seed", ci_seed, "rng seed");
  cb_init->add_option("--sample", ci_sample, "tensor text [M D] sample (kmeans)");
  cb_init->add_option("--out", ci_out, "output codebook file");
  cb_init->callback([&] {
    Codebook cb;
    if (ci_scheme == "kmeans_on_sample") {
      if (ci_sample.empty()) throw std::runtime_error("codebook init: kmeans_on_sample requires --sample");
      const Tensor sample = load_tensor_text(ci_sample);
      cb = init_codebook(ci_k, ci_d, InitScheme::kmeans_on_sample, ci_seed, &sample);
    } else {
      cb = init_codebook(ci_k, ci_d, InitScheme::uniform_random, ci_seed);
    }
    with_output(ci_out, [&](std::ostream& os) { write_codebook_text(os, cb); });
  });

  auto* cb_report = cb_cmd->add_subcommand("report", "Utilization report for a feature map");
  std::string cr_cb, cr_features, cr_out;
  cb_report->add_option("--codebook", cr_cb)->required();
  cb_report->add_option("--features", cr_features, "tensor text [H W D]")->required();
  cb_report->add_option("--out", cr_out, "output CSV (default stdout)");
  cb_report->callback([&] {
    const Codebook cb = load_codebook(cr_cb);
    const QuantizedMap qm = quantize(load_feature_map(cr_features), cb);
    const auto rec = make_utilization_record(0, qm.indices, cb.K);
    with_output(cr_out, [&](std::ostream& os) { emit_utilization_csv(os, {rec}); });
  });

  auto* cb_pca = cb_cmd->add_subcommand("export-pca", "2D PCA projection of the codewords");
  std::string cp_cb, cp_features, cp_out;
  cb_pca->add_option("--codebook", cp_cb)->required();
  cb_pca->add_option("--features", cp_features, "optional [H W D] features marking active codewords");
  cb_pca->add_option("--out", cp_out, "output CSV (default stdout)");
  cb_pca->callback([&] {
    const Codebook cb = load_codebook(cp_cb);
    std::vector<bool> active(static_cast<std::size_t>(cb.K), true);
    if (!cp_features.empty()) {
      const QuantizedMap qm = quantize(load_feature_map(cp_features), cb);
      active.assign(static_cast<std::size_t>(cb.K), false);
      for (int idx : qm.indices) active[static_cast<std::size_t>(idx)] = true;
    }
    const auto pts = pca_export(cb, active);
    with_output(cp_out, [&](std::ostream& os) {
      os << "x,y,active\n";
      for (const auto& p : pts) {
        os << format_real(p.x) << "," << format_real(p.y) << "," << (p.active ? 1 : 0) << "\n";
      }
    });
  });

  // quantize
  auto* qz = app.add_subcommand("quantize", "Nearest-codeword assignment of a feature map");
  std::string qz_cb, qz_features, qz_out;
  qz->add_option("--codebook", qz_cb)->required();
  qz->add_option("--features", qz_features, "tensor text [H W D]")->required();
  qz->add_option("--out", qz_out, "output index grid (default stdout)");
  qz->callback([&] {
    const Codebook cb = load_codebook(qz_cb);
    const QuantizedMap qm = quantize(load_feature_map(qz_features), cb);
    with_output(qz_out, [&](std::ostream& os) { write_indices(os, qm); });
  });

  // kernel
  auto* kn = app.add_subcommand("kernel", "Transition kernel pi(j|i) of a codebook");
  std::string kn_cb, kn_metric = "euclidean", kn_out;
  double kn_eps = 0.7;
  kn->add_option("--codebook", kn_cb)->required();
  kn->add_option("--eps", kn_eps, "perturbation strength in [0, 1]")->required();
  kn->add_option("--metric", kn_metric)->check(CLI::IsMember({"euclidean", "squared_euclidean"}));
  kn->add_option("--out", kn_out, "output (default stdout)");
  kn->callback([&] {
    const Codebook cb = load_codebook(kn_cb);
    const auto kernel = transition_kernel(cb, kn_eps, kernel_metric_from_name(kn_metric));
    with_output(kn_out, [&](std::ostream& os) { write_kernel_text(os, kernel); });
  });

  // perturb
  auto* pt = app.add_subcommand("perturb", "Resample an index grid through the QPM kernel");
  std::string pt_cb, pt_indices, pt_metric = "euclidean", pt_out;
  double pt_eps = 0.7;
  std::uint64_t pt_seed = 0;
  pt->add_option("--codebook", pt_cb)->required();
  pt->add_option("--indices", pt_indices, "index grid file (see quantize)")->required();
  pt->add_option("--eps", pt_eps)->required();
  pt->add_option("--seed", pt_seed);
  pt->add_option("--metric", pt_metric)->check(CLI::IsMember({"euclidean", "squared_euclidean"}));
  pt->add_option("--out", pt_out, "output (default stdout)");
  pt->callback([&] {
    const Codebook cb = load_codebook(pt_cb);
    const QuantizedMap qm = read_indices(pt_indices, cb);
    const auto kernel = transition_kernel(cb, pt_eps, kernel_metric_from_name(pt_metric));
    const QuantizedMap out = sample_perturbed(qm, cb, kernel, pt_seed);
    with_output(pt_out, [&](std::ostream& os) { write_indices(os, out); });
  });

  // kl-curve
  auto* kc = app.add_subcommand("kl-curve", "Perturbation radius along a parameter grid");
  std::string kc_mode, kc_cb, kc_grid, kc_metric = "euclidean", kc_out;
  double kc_eps = -1.0, kc_p = -1.0;
  kc->add_option("--mode", kc_mode, "qpm | dropout")->required()->check(CLI::IsMember({"qpm", "dropout"}));
  kc->add_option("--codebook", kc_cb, "codebook file (qpm mode)");
  kc->add_option("--grid", kc_grid, "comma-separated parameter values");
  kc->add_option("--eps", kc_eps, "single eps value (qpm mode)");
  kc->add_option("--p", kc_p, "single dropout rate (dropout mode)");
  kc->add_option("--metric", kc_metric)->check(CLI::IsMember({"euclidean", "squared_euclidean"}));
  kc->add_option("--out", kc_out, "output CSV (default stdout)");
  kc->callback([&] {
    std::vector<double> grid = kc_grid.empty() ? std::vector<double>{} : parse_grid(kc_grid);
    std::vector<CompareRow> rows;
    if (kc_mode == "qpm") {
      if (kc_eps >= 0.0) grid.push_back(kc_eps);
      if (grid.empty()) throw std::runtime_error("kl-curve: qpm mode needs --grid or --eps");
      if (kc_cb.empty()) throw std::runtime_error("kl-curve: qpm mode needs --codebook");
      const Codebook cb = load_codebook(kc_cb);
      rows = compare_report(cb, grid, {}, kernel_metric_from_name(kc_metric));
    } else {
      if (kc_p >= 0.0) grid.push_back(kc_p);
      if (grid.empty()) throw std::runtime_error("kl-curve: dropout mode needs --grid or --p");
      for (double p : grid) rows.push_back({"dropout", p, kl_dropout(p).kl});
    }
    with_output(kc_out, [&](std::ostream& os) { write_compare_csv(os, rows); });
  });

  // bounds
  auto* bd = app.add_subcommand("bounds", "Closed-form bounds on Q(.|eps=1)");
  std::string bd_cb, bd_metric = "euclidean", bd_out;
  bd->add_option("--codebook", bd_cb)->required();
  bd->add_option("--metric", bd_metric)->check(CLI::IsMember({"euclidean", "squared_euclidean"}));
  bd->add_option("--out", bd_out, "output CSV (default stdout)");
  bd->callback([&] {
    const Codebook cb = load_codebook(bd_cb);
    const Eps1Bounds b = bounds_eps1(cb, kernel_metric_from_name(bd_metric));
    with_output(bd_out, [&](std::ostream& os) {
      os << "lower,upper,dmin,dmax\n";
      os << format_real(b.lower) << "," << format_real(b.upper) << "," << format_real(b.d_min) << ","
         << format_real(b.d_max) << "\n";
    });
  });

  // compare
  auto* cp = app.add_subcommand("compare", "QPM vs dropout perturbation radii");
  std::string cp2_cb, cp_eps_grid = "0,0.25,0.5,0.75,1", cp_p_grid = "0,0.25,0.5,0.75,0.9,0.99";
  std::string cp_metric = "euclidean", cp2_out;
  cp->add_option("--codebook", cp2_cb)->required();
  cp->add_option("--eps-grid", cp_eps_grid, "comma-separated eps values");
  cp->add_option("--p-grid", cp_p_grid, "comma-separated dropout rates");
  cp->add_option("--metric", cp_metric)->check(CLI::IsMember({"euclidean", "squared_euclidean"}));
  cp->add_option("--out", cp2_out, "output CSV (default stdout)");
  cp->callback([&] {
    const Codebook cb = load_codebook(cp2_cb);
    const auto rows = compare_report(cb, parse_grid(cp_eps_grid), parse_grid(cp_p_grid),
                                     kernel_metric_from_name(cp_metric));
    with_output(cp2_out, [&](std::ostream& os) { write_compare_csv(os, rows); });
  });

  // align-loss
  auto* al = app.add_subcommand("align-loss", "Patch-wise contrastive alignment loss");
  std::string al_pfa, al_fm, al_out;
  double al_tau = 0.1;
  al->add_option("--pfa", al_pfa, "tensor text [H W C] or [P C]")->required();
  al->add_option("--fm", al_fm, "tensor text [H W C] or [P C]")->required();
  al->add_option("--tau", al_tau, "temperature");
  al->add_option("--out", al_out, "output (default stdout)");
  al->callback([&] {
    const PatchFeatureMap a = load_patch_map(al_pfa);
    const PatchFeatureMap b = load_patch_map(al_fm);
    const double loss = contrastive_align_loss(a, b, al_tau).item();
    with_output(al_out, [&](std::ostream& os) { os << format_real(loss) << "\n"; });
  });

  // train
  auto* tr = app.add_subcommand("train", "Run the semi-supervised toy trainer");
  std::string tr_config, tr_out;
  TrainConfig tr_cfg;
  long long tr_iters = 0;
  std::uint64_t tr_seed = 0;
  double tr_eps = 0, tr_lu = 0, tr_la = 0, tr_dr = 0, tr_lr = 0;
  int tr_threads = 0, tr_n = 0, tr_size = 0;
  std::string tr_mode;
  tr->add_option("--config", tr_config, "key=value config file");
  tr->add_option("--out", tr_out, "run directory")->required();
  auto* o_iters = tr->add_option("--iters", tr_iters);
  auto* o_seed = tr->add_option("--seed", tr_seed);
  auto* o_eps = tr->add_option("--eps", tr_eps);
  auto* o_lu = tr->add_option("--lambda-u", tr_lu);
  auto* o_la = tr->add_option("--lambda-a", tr_la);
  auto* o_mode = tr->add_option("--perturb-mode", tr_mode)->check(CLI::IsMember({"qpm", "feature_dropout", "none"}));
  auto* o_dr = tr->add_option("--dropout-rate", tr_dr);
  auto* o_lr = tr->add_option("--lr", tr_lr);
  auto* o_threads = tr->add_option("--threads", tr_threads);
  auto* o_n = tr->add_option("--n", tr_n);
  auto* o_size = tr->add_option("--image-size", tr_size);
  tr->callback([&] {
    TrainConfig cfg = tr_config.empty() ? TrainConfig{} : load_config(tr_config);
    if (o_iters->count()) cfg.iters = tr_iters;
    if (o_seed->count()) cfg.seed = tr_seed;
    if (o_eps->count()) cfg.eps = tr_eps;
    if (o_lu->count()) cfg.lambda_u = tr_lu;
    if (o_la->count()) cfg.lambda_a = tr_la;
    if (o_mode->count()) cfg.perturb_mode = tr_mode;
    if (o_dr->count()) cfg.dropout_rate = tr_dr;
    if (o_lr->count()) cfg.lr = tr_lr;
    if (o_threads->count()) cfg.threads = tr_threads;
    if (o_n->count()) cfg.n = tr_n;
    if (o_size->count()) cfg.image_size = tr_size;
    const TrainResult res = train(cfg, tr_out);
    std::cout << "out_dir=" << res.out_dir << "\n";
    std::cout << "test_dice_mean=" << format_real(res.test_metrics.dice_mean) << "\n";
    std::cout << "test_jaccard_mean=" << format_real(res.test_metrics.jaccard_mean) << "\n";
    std::cout << "test_hd95_mean=" << format_real(res.test_metrics.hd95_mean) << "\n";
    std::cout << "test_asd_mean=" << format_real(res.test_metrics.asd_mean) << "\n";
  });

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a trained run on its held-out test set");
  std::string ev_run, ev_out;
  ev->add_option("--run", ev_run, "run directory produced by train")->required();
  ev->add_option("--out", ev_out, "metrics JSON path (default stdout)");
  ev->callback([&] {
    const TrainConfig cfg = load_config((fs::path(ev_run) / "config.txt").string());
    const SegModel student = load_model(ev_run, "student");
    const auto test_set =
        gen_synthetic_dataset(cfg.n_test, cfg.image_size, test_set_seed(cfg.seed), 1.0);
    const EvalResult r = evaluate_model(student, test_set);
    with_output(ev_out, [&](std::ostream& os) { os << metrics_json_string(r); });
  });

  // ttest
  auto* tt = app.add_subcommand("ttest", "Paired two-tailed t-test");
  std::string tt_a, tt_b, tt_csv, tt_out;
  tt->add_option("--a", tt_a, "comma-separated scores");
  tt->add_option("--b", tt_b, "comma-separated scores");
  tt->add_option("--csv", tt_csv, "file of 'a,b' rows (alternative to --a/--b)");
  tt->add_option("--out", tt_out, "output CSV (default stdout)");
  tt->callback([&] {
    std::vector<double> a, b;
    if (!tt_csv.empty()) {
      std::ifstream is(tt_csv);
      if (!is) throw std::runtime_error("cannot open: " + tt_csv);
      std::string line;
      while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw std::runtime_error(tt_csv + ": expected 'a,b' rows, got '" + line + "'");
        a.push_back(std::stod(line.substr(0, comma)));
        b.push_back(std::stod(line.substr(comma + 1)));
      }
    } else {
      if (tt_a.empty() || tt_b.empty()) throw std::runtime_error("ttest: need --a and --b (or --csv)");
      a = parse_grid(tt_a);
      b = parse_grid(tt_b);
    }
    const TTestResult r = paired_t_test(a, b);
    with_output(tt_out, [&](std::ostream& os) {
      os << "t,p,degenerate\n";
      os << format_real(r.t) << "," << format_real(r.p) << "," << (r.degenerate ? 1 : 0) << "\n";
    });
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
