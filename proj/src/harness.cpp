#include "ueforge/harness.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "ueforge/io.hpp"
#include "ueforge/model.hpp"

namespace fs = std::filesystem;

namespace ueforge {

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_short(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string key_of(const std::string& text) { return hex64(fnv1a64(text)); }

std::string data_key(const DataGenConfig& d) {
  std::ostringstream s;
  s << "seed=" << d.seed << ";classes=" << d.classes << ";n_train=" << d.n_train << ";n_test=" << d.n_test
    << ";size=" << d.image_size << ";family=" << d.family << ";noise=" << fmt(d.noise_sigma);
  return s.str();
}

std::string schedule_key(const TrainConfig& t) {
  std::ostringstream s;
  s << "epochs=" << t.epochs << ";batch=" << t.batch_size << ";lr=" << fmt(t.lr) << ";decay=";
  for (auto e : t.decay_epochs) s << e << ',';
  s << ";factor=" << fmt(t.decay_factor) << ";momentum=" << fmt(t.momentum) << ";wd=" << fmt(t.weight_decay);
  return s.str();
}

NetConfig net_config(const DataGenConfig& d) {
  NetConfig nc;
  nc.in_channels = 1;
  nc.height = d.image_size;
  nc.width = d.image_size;
  nc.classes = d.classes;
  return nc;
}

DataGenConfig with_family(DataGenConfig d, int family) {
  d.family = family;
  return d;
}

// Runs `fn`, attaching the stage name to any failure. Config errors keep their
// type so callers can map them to the config exit status.
template <typename Fn>
auto stage(const std::string& name, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const ConfigError& e) {
    throw ConfigError(name + ": " + e.what());
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

std::string join_sizes(const std::vector<std::size_t>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

}  // namespace

ArtifactCache::ArtifactCache(std::string dir, std::ostream* log) : dir_(std::move(dir)), log_(log) {
  fs::create_directories(dir_);
}

std::string ArtifactCache::path(const std::string& kind, const std::string& key, const std::string& ext) const {
  return (fs::path(dir_) / (kind + "-" + key_of(key) + ext)).string();
}

void ArtifactCache::note(const std::string& msg) const {
  if (log_) *log_ << msg << '\n';
}

DataSplit ArtifactCache::data(const DataGenConfig& cfg) {
  const auto key = data_key(cfg);
  const auto train_path = path("data", key, "-train.ueds");
  const auto test_path = path("data", key, "-test.ueds");
  if (!fs::exists(train_path) || !fs::exists(test_path)) {
    note("generating dataset family " + std::to_string(cfg.family) + " seed " + std::to_string(cfg.seed));
    auto split = gen_data(cfg);
    save_dataset(split.train, train_path);
    save_dataset(split.test, test_path);
    return split;
  }
  DataSplit split{load_dataset(train_path), load_dataset(test_path)};
  for (auto* d : {&split.train, &split.test}) {
    d->seed = cfg.seed;
    d->family = cfg.family;
  }
  split.train.split = "train";
  split.test.split = "test";
  return split;
}

std::string ArtifactCache::pretrained(const RunSpec& spec, int family, std::uint64_t seed, double lambda_sf) {
  const auto src = with_family(spec.data, family);
  std::ostringstream k;
  k << data_key(src) << "|" << schedule_key(spec.pretrain) << "|seed=" << seed << "|lambda_sf=" << fmt(lambda_sf)
    << "|aux=" << (lambda_sf > 0.0 ? join_sizes(spec.train.aux_stages) : "");
  const auto out = path(lambda_sf > 0.0 ? "sfpretrain" : "pretrain", k.str(), ".uewt");
  if (fs::exists(out)) return out;
  const auto split = data(src);
  note("pretraining on family " + std::to_string(family) + " (seed " + std::to_string(seed) +
       ", lambda_sf " + fmt_short(lambda_sf) + ")");
  StagedNet net(net_config(src), seed);
  TrainConfig t = spec.pretrain;
  t.seed = seed;
  t.freeze = FreezeMask{};
  t.lambda_sf = lambda_sf;
  t.aux_stages = spec.train.aux_stages;
  if (lambda_sf > 0.0) {
    t.paradigm = Paradigm::SfPretrain;
    sf_pretrain(net, split.train, t);
  } else {
    t.paradigm = Paradigm::Pretrain;
    train(net, split.train, t);
  }
  save_checkpoint(net, out);
  return out;
}

std::string ArtifactCache::reference(const RunSpec& spec) {
  if (!spec.gen.reference_path.empty()) {
    if (!fs::exists(spec.gen.reference_path)) {
      throw ConfigError("reference checkpoint '" + spec.gen.reference_path + "' does not exist");
    }
    return spec.gen.reference_path;
  }
  return pretrained(spec, spec.reference_family, spec.reference_seed, 0.0);
}

std::string ArtifactCache::perturbations(const RunSpec& spec) {
  if (spec.method == UeSource::None) throw UsageError("clean runs have no perturbations");
  const auto& g = spec.gen;
  std::ostringstream k;
  k << data_key(spec.data) << "|method=" << ue_source_name(spec.method) << "|eps=" << fmt(g.epsilon)
    << "|K=" << g.inner_steps << "|eta=" << fmt(g.outer_step()) << "|alpha=" << fmt(g.alpha) << "|T=" << g.epochs
    << "|B=" << g.batch_size << "|freeze=" << g.surrogate_freeze.to_string() << "|seed=" << g.seed;
  std::string ref_path;
  if (spec.method == UeSource::Ssc) {
    ref_path = reference(spec);
    k << "|lambda=" << fmt(g.lambda) << "|stages=" << join_sizes(g.align_stages) << "|ref=" << key_of(io::read_file(ref_path));
  }
  const auto out = path(std::string(ue_source_name(spec.method)), k.str(), ".uepd");
  if (fs::exists(out)) return out;

  const auto split = data(spec.data);
  const auto nc = net_config(spec.data);
  note("generating " + std::string(ue_source_name(spec.method)) + " perturbations");
  GenTrace trace;
  PerturbationSet ps;
  if (spec.method == UeSource::Emn) {
    StagedNet surrogate(nc, g.seed);
    ps = generate_emn(split.train, surrogate, g, &trace);
  } else {
    const StagedNet ref = load_network(ref_path, nc.height, nc.width);
    if (ref.config().classes != nc.classes) {
      throw DimensionError("reference network has " + std::to_string(ref.config().classes) + " classes, task has " +
                           std::to_string(nc.classes));
    }
    StagedNet surrogate = ref.clone();
    surrogate.reinit_head(g.seed);
    ps = generate_ssc(split.train, surrogate, ref, g, &trace);
  }
  std::vector<diag::MetricRecord> rows;
  for (const auto& e : trace.epochs) {
    const auto ep = std::to_string(e.epoch);
    rows.push_back({"", "gen_outer_ce", ep, e.outer_ce});
    if (trace.has_rsem) {
      rows.push_back({"", "gen_rsem_before", ep, e.rsem_before});
      rows.push_back({"", "gen_rsem_after", ep, e.rsem_after});
      rows.push_back({"", "gen_rsem_descent_fraction", ep,
                      static_cast<double>(e.rsem_descents) / static_cast<double>(e.batches)});
    }
  }
  diag::write_metric_csv(out + ".trace.csv", rows);
  save_perturbations(ps, out);
  return out;
}

std::string results_csv(const RunSpec& spec, const RunResult& result) {
  const std::string prefix = result.run_id + "," + std::string(paradigm_name(spec.paradigm)) + "," +
                             std::string(ue_source_name(spec.method)) + "," + spec.train.freeze.to_string() + "," +
                             fmt(spec.train.lambda_sf) + "," + std::to_string(spec.train.seed) + ",";
  std::string out = std::string(kResultsHeader) + "\n";
  for (const auto& e : result.train_log.epochs) {
    out += prefix + std::to_string(e.epoch) + ",train," + fmt(e.accuracy) + "," + fmt(e.loss) + "\n";
  }
  out += prefix + std::to_string(spec.train.epochs) + ",test," + fmt(result.report.accuracy) + "," +
         fmt(result.report.loss) + "\n";
  return out;
}

RunResult run(const RunSpec& spec_in, std::ostream* log) {
  RunSpec spec = spec_in;
  spec.train.paradigm = spec.paradigm;
  spec.validate();
  RunResult result;
  result.run_id = spec.run_id();
  result.run_dir = (fs::path(spec.out_dir) / result.run_id).string();
  ArtifactCache cache((fs::path(spec.out_dir) / "cache").string(), log);
  if (log) *log << "run " << result.run_id << (spec.name.empty() ? "" : " (" + spec.name + ")") << '\n';

  const DataSplit split = stage("gen-data", [&] { return cache.data(spec.data); });

  std::optional<PerturbationSet> ps;
  Dataset train_set = split.train;
  if (spec.method != UeSource::None) {
    ps = stage("gen-ue", [&] { return load_perturbations(cache.perturbations(spec)); });
    train_set = stage("gen-ue", [&] { return apply(split.train, *ps); });
  }

  const auto nc = net_config(spec.data);
  StagedNet net = stage("pretrain", [&] {
    if (spec.paradigm == Paradigm::Scratch) return StagedNet(nc, spec.train.seed);
    const double lsf = spec.paradigm == Paradigm::SfPf ? spec.train.lambda_sf : 0.0;
    StagedNet pre = load_network(cache.pretrained(spec, spec.pretrain_family, spec.pretrain_seed, lsf), nc.height, nc.width);
    if (pre.config() != nc) throw DimensionError("pretrained network does not match the task geometry");
    pre.reinit_head(spec.train.seed);
    return pre;
  });

  result.train_log = stage("train", [&] { return train(net, train_set, spec.train); });

  result.report = stage("evaluate", [&] {
    auto r = evaluate(net, split.test);
    r.paradigm = paradigm_name(spec.paradigm);
    r.freeze_mask = spec.train.freeze.to_string();
    r.method = ue_source_name(spec.method);
    r.seed = spec.train.seed;
    return r;
  });

  if (spec.diagnostics) {
    result.metrics = stage("diagnose", [&] {
      std::vector<diag::MetricRecord> rows;
      const std::size_t n = std::min(spec.diag_examples, split.train.size());
      std::vector<std::size_t> idx(n);
      for (std::size_t i = 0; i < n; ++i) idx[i] = i;
      const Tensor x = split.train.batch(idx);
      const Tensor xp = train_set.batch(idx);
      const Tensor delta(x.shape(), [&] {
        std::vector<double> d(x.numel());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = xp.data()[i] - x.data()[i];
        return d;
      }());
      const auto curve = diag::cosine_similarity(net, x, delta);
      for (std::size_t i = 0; i < curve.stages.size(); ++i) {
        rows.push_back({result.run_id, "cossim", "S" + std::to_string(curve.stages[i]), curve.values[i]});
      }
      for (std::size_t s = 0; s <= kNumStages; ++s) {
        const auto r = diag::ptr(net, x, delta, s);
        rows.push_back({result.run_id, "ptr", s == 0 ? "stem" : "S" + std::to_string(s), r.value});
      }
      if (ps) {
        const auto p_delta = diag::mean_radial_psd(delta);
        const auto p_x = diag::mean_radial_psd(x);
        const auto rsd = diag::relative_spectral_density(p_delta, p_x);
        for (std::size_t b = 0; b < rsd.size(); ++b) {
          rows.push_back({result.run_id, "psd_delta", std::to_string(b), p_delta.power[b]});
          rows.push_back({result.run_id, "psd_clean", std::to_string(b), p_x.power[b]});
          rows.push_back({result.run_id, "rsd", std::to_string(b), rsd[b].value_or(std::nan(""))});
        }
      }
      return rows;
    });
  }

  stage("write", [&] {
    fs::create_directories(result.run_dir);
    const fs::path dir(result.run_dir);
    io::write_file_atomic((dir / "spec.txt").string(), spec.canonical());
    save_checkpoint(net, (dir / "model.uewt").string());
    if (spec.diagnostics) diag::write_metric_csv((dir / "metrics.csv").string(), result.metrics);
    io::write_file_atomic((dir / "results.csv").string(), results_csv(spec, result));
    return 0;
  });
  if (log) *log << "  test accuracy " << fmt_short(result.report.accuracy) << '\n';
  return result;
}

bool GridReport::ok() const {
  for (const auto& c : cells) {
    if (!c.result) return false;
  }
  return true;
}

namespace {

struct Group {
  std::vector<double> values;
  bool failed = false;
};

std::string column_label(std::string_view paradigm, const std::string& freeze, double lambda_sf) {
  std::string label = std::string(paradigm) + "/" + freeze;
  if (paradigm == "sf-pf") label += "/lsf=" + fmt_short(lambda_sf);
  return label;
}

std::string pivot(const std::vector<std::string>& rows, const std::vector<std::string>& cols,
                  const std::map<std::pair<std::string, std::string>, Group>& groups) {
  std::string out = "method";
  for (const auto& c : cols) out += "," + c;
  out += "\n";
  for (const auto& r : rows) {
    out += r;
    for (const auto& c : cols) {
      out += ",";
      const auto it = groups.find({r, c});
      if (it == groups.end()) continue;
      const auto& g = it->second;
      if (g.failed) {
        out += "FAILED";
        continue;
      }
      double mean = 0.0;
      for (double v : g.values) mean += v;
      mean /= static_cast<double>(g.values.size());
      double var = 0.0;
      for (double v : g.values) var += (v - mean) * (v - mean);
      const double sd = g.values.size() > 1 ? std::sqrt(var / static_cast<double>(g.values.size() - 1)) : 0.0;
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.4f±%.4f", mean, sd);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

void add_unique(std::vector<std::string>& xs, const std::string& x) {
  if (std::find(xs.begin(), xs.end(), x) == xs.end()) xs.push_back(x);
}

}  // namespace

std::string summary_csv(const std::vector<GridCell>& cells) {
  std::vector<std::string> rows, cols;
  std::map<std::pair<std::string, std::string>, Group> groups;
  for (const auto& c : cells) {
    const std::string row(ue_source_name(c.spec.method));
    const auto col = column_label(paradigm_name(c.spec.paradigm), c.spec.train.freeze.to_string(), c.spec.train.lambda_sf);
    add_unique(rows, row);
    add_unique(cols, col);
    auto& g = groups[{row, col}];
    if (c.result) g.values.push_back(c.result->report.accuracy);
    else g.failed = true;
  }
  return pivot(rows, cols, groups);
}

GridReport grid(const std::vector<RunSpec>& specs, std::ostream* log) {
  if (specs.empty()) throw ConfigError("grid needs at least one cell");
  for (const auto& s : specs) s.validate();
  GridReport report;
  for (const auto& s : specs) {
    GridCell cell;
    cell.spec = s;
    try {
      cell.result = run(s, log);
    } catch (const Error& e) {
      cell.error = e.what();
      if (log) *log << "  FAILED: " << e.what() << '\n';
    }
    report.cells.push_back(std::move(cell));
  }
  report.summary_csv = summary_csv(report.cells);
  return report;
}

std::string report_from_dir(const std::string& out_dir) {
  if (!fs::is_directory(out_dir)) throw ConfigError("'" + out_dir + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(out_dir)) {
    const auto p = entry.path() / "results.csv";
    if (entry.is_directory() && fs::exists(p)) files.push_back(p);
  }
  std::sort(files.begin(), files.end());
  std::vector<std::string> rows, cols;
  std::map<std::pair<std::string, std::string>, Group> groups;
  for (const auto& f : files) {
    std::istringstream in(io::read_file(f.string()));
    std::string line;
    std::getline(in, line);
    if (line != kResultsHeader) throw FormatError(f.string() + ": unexpected header");
    while (std::getline(in, line)) {
      std::vector<std::string> fields;
      std::stringstream ls(line);
      std::string item;
      while (std::getline(ls, item, ',')) fields.push_back(item);
      if (fields.size() != 10) throw FormatError(f.string() + ": malformed row");
      if (fields[7] != "test") continue;
      const auto row = fields[2];
      const auto col = column_label(fields[1], fields[3], std::stod(fields[4]));
      add_unique(rows, row);
      add_unique(cols, col);
      groups[{row, col}].values.push_back(std::stod(fields[8]));
    }
  }
  if (files.empty()) throw ConfigError("no results.csv files under '" + out_dir + "'");
  return pivot(rows, cols, groups);
}

}  // namespace ueforge
