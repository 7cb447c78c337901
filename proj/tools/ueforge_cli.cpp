// Command-line front end. Exit status: 0 success, 2 configuration error,
// 3 stage failure.
#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "ueforge/dataset.hpp"
#include "ueforge/diagnostics.hpp"
#include "ueforge/errors.hpp"
#include "ueforge/generation.hpp"
#include "ueforge/harness.hpp"
#include "ueforge/io.hpp"
#include "ueforge/model.hpp"
#include "ueforge/runspec.hpp"
#include "ueforge/training.hpp"

namespace fs = std::filesystem;
using namespace ueforge;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

struct ScheduleOpts {
  TrainConfig cfg;
  std::string decay = "20,26";
};

void add_schedule(CLI::App* cmd, ScheduleOpts& o) {
  cmd->add_option("--epochs", o.cfg.epochs, "Training epochs")->capture_default_str();
  cmd->add_option("--batch", o.cfg.batch_size, "Batch size")->capture_default_str();
  cmd->add_option("--lr", o.cfg.lr, "Initial learning rate")->capture_default_str();
  cmd->add_option("--decay-epochs", o.decay, "Comma-separated epochs where lr is multiplied by the decay factor")
      ->capture_default_str();
  cmd->add_option("--decay-factor", o.cfg.decay_factor, "Learning-rate decay factor")->capture_default_str();
  cmd->add_option("--momentum", o.cfg.momentum, "SGD momentum")->capture_default_str();
  cmd->add_option("--weight-decay", o.cfg.weight_decay, "L2 weight decay")->capture_default_str();
  cmd->add_option("--seed", o.cfg.seed, "Run seed")->capture_default_str();
}

std::vector<std::size_t> parse_sizes(const std::string& text, const std::string& what) {
  std::vector<std::size_t> out;
  if (text.empty() || text == "none") return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoul(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(what + ": '" + item + "' is not a non-negative integer");
    }
  }
  return out;
}

FreezeMask mask_arg(const std::string& text) {
  try {
    return FreezeMask::parse(text);
  } catch (const InputError& e) {
    throw ConfigError(e.what());
  }
}

NetConfig net_for(const Dataset& d) {
  NetConfig nc;
  nc.in_channels = d.channels;
  nc.height = d.height;
  nc.width = d.width;
  nc.classes = d.classes;
  return nc;
}

void print_log(const TrainLog& log) {
  for (const auto& e : log.epochs) {
    std::printf("epoch %3zu  lr %.5f  loss %.5f  train-acc %.4f\n", e.epoch, e.lr, e.loss, e.accuracy);
  }
}

Tensor delta_tensor(const Dataset& clean, const Dataset& perturbed, std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  const Tensor a = clean.batch(idx);
  const Tensor b = perturbed.batch(idx);
  std::vector<double> d(a.numel());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = b.data()[i] - a.data()[i];
  return Tensor(a.shape(), std::move(d));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ueforge: unlearnable-example generation and paradigm evaluation"};
  app.require_subcommand(1);

  // gen-data
  DataGenConfig gd;
  std::string gd_out = "data";
  auto* c_gen = app.add_subcommand("gen-data", "Render a procedural shape dataset (train.ueds, test.ueds)");
  c_gen->add_option("--seed", gd.seed)->capture_default_str();
  c_gen->add_option("--classes", gd.classes)->capture_default_str();
  c_gen->add_option("--n-train", gd.n_train)->capture_default_str();
  c_gen->add_option("--n-test", gd.n_test)->capture_default_str();
  c_gen->add_option("--size", gd.image_size, "Image side in pixels")->capture_default_str();
  c_gen->add_option("--family", gd.family, "Shape family (0, 1 disjoint; 2 union)")->capture_default_str();
  c_gen->add_option("--noise", gd.noise_sigma, "Background noise sigma")->capture_default_str();
  c_gen->add_option("--out", gd_out, "Output directory")->capture_default_str();

  // pretrain / sf-pretrain
  ScheduleOpts pre;
  std::string pre_data, pre_out = "pretrained.uewt";
  auto* c_pre = app.add_subcommand("pretrain", "Train a network from random init and save a checkpoint");
  add_schedule(c_pre, pre);
  c_pre->add_option("--data", pre_data, "Training set (.ueds)")->required();
  c_pre->add_option("--out", pre_out)->capture_default_str();

  ScheduleOpts sfp;
  std::string sfp_data, sfp_out = "sf-pretrained.uewt", sfp_aux = "1,2";
  auto* c_sfp = app.add_subcommand("sf-pretrain", "Pretraining with auxiliary shallow-stage classifiers");
  add_schedule(c_sfp, sfp);
  c_sfp->add_option("--data", sfp_data, "Training set (.ueds)")->required();
  c_sfp->add_option("--lambda-sf", sfp.cfg.lambda_sf, "Weight of the auxiliary losses")->capture_default_str();
  c_sfp->add_option("--aux-stages", sfp_aux, "Stages carrying auxiliary heads")->capture_default_str();
  c_sfp->add_option("--out", sfp_out)->capture_default_str();

  // gen-ue
  GenConfig gc;
  std::string ue_method = "emn", ue_data, ue_out = "perturbations.uepd", ue_freeze, ue_surrogate, ue_stages = "1";
  double ue_eta = -1.0;
  auto* c_ue = app.add_subcommand("gen-ue", "Generate unlearnable perturbations");
  c_ue->add_option("--method", ue_method, "emn or ssc")->capture_default_str();
  c_ue->add_option("--data", ue_data, "Clean training set (.ueds)")->required();
  c_ue->add_option("--eps", gc.epsilon, "L-infinity budget")->capture_default_str();
  c_ue->add_option("--lambda", gc.lambda, "Semantic alignment weight (ssc)")->capture_default_str();
  c_ue->add_option("--inner-steps", gc.inner_steps)->capture_default_str();
  c_ue->add_option("--eta", ue_eta, "Outer step size (default eps/4)");
  c_ue->add_option("--alpha", gc.alpha, "Inner learning rate")->capture_default_str();
  c_ue->add_option("--epochs", gc.epochs)->capture_default_str();
  c_ue->add_option("--batch", gc.batch_size)->capture_default_str();
  c_ue->add_option("--surrogate-freeze", ue_freeze, "Frozen surrogate components, e.g. stem+S1");
  c_ue->add_option("--surrogate", ue_surrogate, "Surrogate checkpoint (default: random for emn, reference copy for ssc)");
  c_ue->add_option("--reference", gc.reference_path, "Frozen reference checkpoint (ssc)");
  c_ue->add_option("--align-stages", ue_stages, "Stages entering the alignment term")->capture_default_str();
  c_ue->add_option("--seed", gc.seed)->capture_default_str();
  c_ue->add_option("--out", ue_out)->capture_default_str();

  // train
  ScheduleOpts tr;
  std::string tr_data, tr_perturb, tr_init, tr_freeze, tr_paradigm = "scratch", tr_out = "model.uewt";
  auto* c_tr = app.add_subcommand("train", "Train under a paradigm, optionally on perturbed data");
  add_schedule(c_tr, tr);
  c_tr->add_option("--data", tr_data, "Clean training set (.ueds)")->required();
  c_tr->add_option("--perturb", tr_perturb, "Perturbation set applied to the data (.uepd)");
  c_tr->add_option("--paradigm", tr_paradigm, "scratch, pf or sf-pf")->capture_default_str();
  c_tr->add_option("--init", tr_init, "Pretrained checkpoint (pf, sf-pf)");
  c_tr->add_option("--freeze", tr_freeze, "Frozen components (default stem+S1 for pf)");
  c_tr->add_option("--out", tr_out)->capture_default_str();

  // evaluate
  std::string ev_ckpt, ev_data;
  auto* c_ev = app.add_subcommand("evaluate", "Clean test accuracy of a checkpoint");
  c_ev->add_option("--checkpoint", ev_ckpt)->required();
  c_ev->add_option("--data", ev_data, "Test set (.ueds)")->required();

  // diagnose
  std::string dg_metric, dg_ckpt, dg_data, dg_perturb, dg_out, dg_run_id = "adhoc";
  std::size_t dg_examples = 256, dg_stage = 1;
  auto* c_dg = app.add_subcommand("diagnose", "Feature and spectral diagnostics of a perturbation set");
  c_dg->add_option("--metric", dg_metric)->required()->check(CLI::IsMember({"cossim", "ptr", "psd", "rsd", "residual"}));
  c_dg->add_option("--checkpoint", dg_ckpt);
  c_dg->add_option("--data", dg_data, "Clean dataset (.ueds)")->required();
  c_dg->add_option("--perturb", dg_perturb, "Perturbation set (.uepd)")->required();
  c_dg->add_option("--stage", dg_stage, "Tap for residual (0 = stem, 1..4)")->capture_default_str();
  c_dg->add_option("--examples", dg_examples, "Number of leading examples used")->capture_default_str();
  c_dg->add_option("--run-id", dg_run_id)->capture_default_str();
  c_dg->add_option("--out", dg_out, "CSV output (default stdout)");

  // run / grid / report
  std::string rn_spec, rn_out_dir;
  auto* c_rn = app.add_subcommand("run", "Execute one run specification");
  c_rn->add_option("--spec", rn_spec)->required();
  c_rn->add_option("--out-dir", rn_out_dir, "Override out_dir from the spec");

  std::string gr_spec, gr_out_dir, gr_summary;
  auto* c_gr = app.add_subcommand("grid", "Execute every cell of a grid specification");
  c_gr->add_option("--spec", gr_spec)->required();
  c_gr->add_option("--out-dir", gr_out_dir, "Override out_dir from the spec");
  c_gr->add_option("--summary", gr_summary, "Pivot CSV path (default <out_dir>/summary.csv)");

  std::string rp_dir, rp_out;
  auto* c_rp = app.add_subcommand("report", "Rebuild the pivot table from run directories");
  c_rp->add_option("--dir", rp_dir)->required();
  c_rp->add_option("--out", rp_out, "CSV output (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (c_gen->parsed()) {
      const auto split = gen_data(gd);
      fs::create_directories(gd_out);
      save_dataset(split.train, (fs::path(gd_out) / "train.ueds").string());
      save_dataset(split.test, (fs::path(gd_out) / "test.ueds").string());
      std::printf("wrote %zu train / %zu test images to %s\n", split.train.size(), split.test.size(), gd_out.c_str());
    } else if (c_pre->parsed() || c_sfp->parsed()) {
      const bool sf = c_sfp->parsed();
      auto& o = sf ? sfp : pre;
      o.cfg.decay_epochs = parse_sizes(o.decay, "--decay-epochs");
      const Dataset data = load_dataset(sf ? sfp_data : pre_data);
      StagedNet net(net_for(data), o.cfg.seed);
      TrainLog log;
      if (sf) {
        o.cfg.aux_stages = parse_sizes(sfp_aux, "--aux-stages");
        o.cfg.paradigm = Paradigm::SfPretrain;
        if (o.cfg.lambda_sf < 0.0) throw ConfigError("--lambda-sf must be >= 0");
        log = sf_pretrain(net, data, o.cfg);
      } else {
        o.cfg.paradigm = Paradigm::Pretrain;
        log = train(net, data, o.cfg);
      }
      print_log(log);
      save_checkpoint(net, sf ? sfp_out : pre_out);
    } else if (c_ue->parsed()) {
      const auto method = parse_method(ue_method);
      if (ue_eta >= 0.0) gc.eta = ue_eta;
      else if (c_ue->count("--eta")) throw ConfigError("--eta must be >= 0");
      gc.align_stages = parse_sizes(ue_stages, "--align-stages");
      if (!ue_freeze.empty()) gc.surrogate_freeze = mask_arg(ue_freeze);
      const Dataset data = load_dataset(ue_data);
      GenTrace trace;
      PerturbationSet ps;
      if (method == UeMethod::Emn) {
        StagedNet surrogate = ue_surrogate.empty() ? StagedNet(net_for(data), gc.seed)
                                                   : load_network(ue_surrogate, data.height, data.width);
        ps = generate_emn(data, surrogate, gc, &trace);
      } else {
        if (gc.reference_path.empty()) throw ConfigError("ssc needs --reference <checkpoint>");
        if (!fs::exists(gc.reference_path)) throw ConfigError("reference checkpoint '" + gc.reference_path + "' not found");
        const StagedNet ref = load_network(gc.reference_path, data.height, data.width);
        StagedNet surrogate = ue_surrogate.empty() ? ref.clone() : load_network(ue_surrogate, data.height, data.width);
        if (ue_surrogate.empty()) surrogate.reinit_head(gc.seed);
        ps = generate_ssc(data, surrogate, ref, gc, &trace);
      }
      for (const auto& e : trace.epochs) {
        std::printf("epoch %3zu  outer-ce %.5f", e.epoch, e.outer_ce);
        if (trace.has_rsem) std::printf("  rsem %.6f -> %.6f", e.rsem_before, e.rsem_after);
        std::printf("\n");
      }
      save_perturbations(ps, ue_out);
      std::printf("max |delta| = %.6f (budget %.6f)\n", ps.max_abs(), ps.epsilon);
    } else if (c_tr->parsed()) {
      tr.cfg.decay_epochs = parse_sizes(tr.decay, "--decay-epochs");
      tr.cfg.paradigm = parse_paradigm(tr_paradigm);
      if (tr.cfg.paradigm == Paradigm::Pretrain || tr.cfg.paradigm == Paradigm::SfPretrain) {
        throw ConfigError("use the pretrain / sf-pretrain subcommands for pretraining");
      }
      Dataset data = load_dataset(tr_data);
      if (!tr_perturb.empty()) data = apply(data, load_perturbations(tr_perturb));
      std::optional<StagedNet> net;
      if (tr.cfg.paradigm == Paradigm::Scratch) {
        net.emplace(net_for(data), tr.cfg.seed);
        if (!tr_freeze.empty()) tr.cfg.freeze = mask_arg(tr_freeze);
      } else {
        if (tr_init.empty()) throw ConfigError("paradigm " + tr_paradigm + " needs --init <checkpoint>");
        net.emplace(load_network(tr_init, data.height, data.width));
        net->reinit_head(tr.cfg.seed);
        tr.cfg.freeze = tr_freeze.empty() ? FreezeMask{Component::Stem, Component::S1} : mask_arg(tr_freeze);
      }
      print_log(train(*net, data, tr.cfg));
      save_checkpoint(*net, tr_out);
    } else if (c_ev->parsed()) {
      const Dataset test = load_dataset(ev_data);
      const StagedNet net = load_network(ev_ckpt, test.height, test.width);
      const auto r = evaluate(net, test);
      std::printf("accuracy %.6f (%zu/%zu)  loss %.6f\n", r.accuracy, r.correct, r.total, r.loss);
      for (std::size_t k = 0; k < r.per_class_accuracy.size(); ++k) {
        std::printf("  class %zu: %.4f\n", k, r.per_class_accuracy[k]);
      }
    } else if (c_dg->parsed()) {
      const Dataset clean = load_dataset(dg_data);
      const Dataset pert = apply(clean, load_perturbations(dg_perturb));
      const std::size_t n = std::min(dg_examples, clean.size());
      std::vector<std::size_t> idx(n);
      for (std::size_t i = 0; i < n; ++i) idx[i] = i;
      const Tensor x = clean.batch(idx);
      const Tensor delta = delta_tensor(clean, pert, n);
      std::vector<diag::MetricRecord> rows;
      const bool needs_net = dg_metric == "cossim" || dg_metric == "ptr" || dg_metric == "residual";
      if (needs_net && dg_ckpt.empty()) throw ConfigError("metric " + dg_metric + " needs --checkpoint");
      if (dg_metric == "cossim") {
        const StagedNet net = load_network(dg_ckpt, clean.height, clean.width);
        const auto c = diag::cosine_similarity(net, x, delta);
        for (std::size_t i = 0; i < c.stages.size(); ++i) rows.push_back({dg_run_id, "cossim", "S" + std::to_string(c.stages[i]), c.values[i]});
      } else if (dg_metric == "ptr") {
        const StagedNet net = load_network(dg_ckpt, clean.height, clean.width);
        for (std::size_t s = 0; s <= kNumStages; ++s) {
          rows.push_back({dg_run_id, "ptr", s == 0 ? "stem" : "S" + std::to_string(s), diag::ptr(net, x, delta, s).value});
        }
      } else if (dg_metric == "residual") {
        if (dg_stage > kNumStages) throw ConfigError("--stage must be in 0..4");
        const StagedNet net = load_network(dg_ckpt, clean.height, clean.width);
        const Tensor r = diag::feature_residual(net, x, delta, dg_stage);
        const std::size_t B = r.dim(0), C = r.dim(1), HW = r.dim(2) * r.dim(3);
        for (std::size_t c = 0; c < C; ++c) {
          double e = 0.0;
          for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t j = 0; j < HW; ++j) e += r.data()[(b * C + c) * HW + j] * r.data()[(b * C + c) * HW + j];
          }
          rows.push_back({dg_run_id, "residual_energy", "S" + std::to_string(dg_stage) + ".c" + std::to_string(c), e / static_cast<double>(B)});
        }
      } else {
        const auto p_delta = diag::mean_radial_psd(delta);
        const auto p_x = diag::mean_radial_psd(x);
        if (dg_metric == "psd") {
          for (std::size_t b = 0; b < p_delta.bins(); ++b) {
            rows.push_back({dg_run_id, "psd_delta", std::to_string(b), p_delta.power[b]});
            rows.push_back({dg_run_id, "psd_clean", std::to_string(b), p_x.power[b]});
          }
        } else {
          const auto r = diag::relative_spectral_density(p_delta, p_x);
          for (std::size_t b = 0; b < r.size(); ++b) rows.push_back({dg_run_id, "rsd", std::to_string(b), r[b].value_or(std::nan(""))});
        }
      }
      if (dg_out.empty()) std::cout << diag::format_metric_csv(rows);
      else diag::write_metric_csv(dg_out, rows);
    } else if (c_rn->parsed()) {
      RunSpec spec = spec_from_text(read_spec_file(rn_spec));
      if (!rn_out_dir.empty()) spec.out_dir = rn_out_dir;
      apply_env_overrides(spec);
      const auto r = run(spec, &std::cerr);
      std::printf("%s accuracy %.6f  %s\n", r.run_id.c_str(), r.report.accuracy, r.run_dir.c_str());
    } else if (c_gr->parsed()) {
      auto specs = expand_grid(read_spec_file(gr_spec));
      for (auto& s : specs) {
        if (!gr_out_dir.empty()) s.out_dir = gr_out_dir;
        apply_env_overrides(s);
      }
      const auto report = grid(specs, &std::cerr);
      const std::string summary = gr_summary.empty() ? (fs::path(specs.front().out_dir) / "summary.csv").string() : gr_summary;
      io::write_file_atomic(summary, report.summary_csv);
      std::cout << report.summary_csv;
      if (!report.ok()) {
        std::cerr << "one or more grid cells failed\n";
        return kExitStage;
      }
    } else if (c_rp->parsed()) {
      const auto csv = report_from_dir(rp_dir);
      if (rp_out.empty()) std::cout << csv;
      else io::write_file_atomic(rp_out, csv);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitStage;
  }
  return 0;
}
