// Acceptance suite: one PASS/FAIL line per criterion A1..A11, followed by
// informational lines. Exit status is nonzero when any criterion fails.
#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include "support/gradcheck.hpp"
#include "ueforge/dataset.hpp"
#include "ueforge/diagnostics.hpp"
#include "ueforge/generation.hpp"
#include "ueforge/harness.hpp"
#include "ueforge/io.hpp"
#include "ueforge/model.hpp"
#include "ueforge/runspec.hpp"
#include "ueforge/training.hpp"

using namespace ueforge;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  std::string id;
  bool pass = false;
  std::string detail;
};

std::vector<Verdict> verdicts;

void report(const std::string& id, bool pass, const std::string& detail) {
  verdicts.push_back({id, pass, detail});
  std::printf("%-4s %s  %s\n", id.c_str(), pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
}

void info(const std::string& detail) {
  std::printf("info %s\n", detail.c_str());
  std::fflush(stdout);
}

std::string f4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? std::nan("") : s / static_cast<double>(v.size());
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- A6

void check_gradients() {
  double worst = 0.0;
  std::string worst_name;
  std::size_t count = 0;
  for (const auto& suite : {testing::primitive_suite(101), testing::composed_suite(202)}) {
    for (const auto& c : suite) {
      const double e = testing::gradcheck(c.fn, c.inputs);
      ++count;
      if (e > worst) {
        worst = e;
        worst_name = c.name;
      }
    }
  }
  report("A6", worst < 1e-4,
         "max relative error " + sci(worst) + " over " + std::to_string(count) + " graphs (worst: " + worst_name + ")");
}

// ---------------------------------------------------------------- A8

std::vector<double> direct_power(const Tensor& z) {
  const std::size_t H = z.dim(0), W = z.dim(1);
  std::vector<double> out(H * W);
  for (std::size_t u = 0; u < H; ++u)
    for (std::size_t v = 0; v < W; ++v) {
      std::complex<double> acc = 0.0;
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const double ang = -2.0 * std::numbers::pi * (static_cast<double>(u * y) / H + static_cast<double>(v * x) / W);
          acc += z.data()[y * W + x] * std::polar(1.0, ang);
        }
      out[u * W + v] = std::norm(acc);
    }
  return out;
}

void check_spectral() {
  std::mt19937_64 rng(303);
  double parseval = 0.0, oracle = 0.0;
  for (std::size_t n : {8u, 16u}) {
    for (int rep = 0; rep < 4; ++rep) {
      const Tensor z = testing::random_tensor({n, n}, rng);
      const Tensor p = diag::power_spectrum_2d(z);
      const auto d = direct_power(z);
      double total = 0.0, energy = 0.0;
      for (std::size_t i = 0; i < d.size(); ++i) {
        total += p.data()[i];
        oracle = std::max(oracle, std::abs(p.data()[i] - d[i]) / std::max(1.0, d[i]));
      }
      for (double v : z.data()) energy += v * v;
      parseval = std::max(parseval, std::abs(total - static_cast<double>(n * n) * energy) / total);
    }
  }
  bool peaks = true;
  for (std::size_t u0 = 1; u0 <= 7; ++u0) {
    std::vector<double> v(256);
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x) v[y * 16 + x] = std::cos(2.0 * std::numbers::pi * u0 * x / 16.0);
    const auto prof = diag::radial_psd(Tensor({16, 16}, v));
    const auto peak = std::max_element(prof.power.begin(), prof.power.end()) - prof.power.begin();
    peaks = peaks && static_cast<std::size_t>(peak) == u0;
  }
  diag::SpectralProfile px{16, 16, {}, {}};
  for (int b = 0; b < 9; ++b) px.power.push_back(std::exp(-0.3 * b) + 0.1);
  px.counts.assign(9, 1);
  double rsd_err = 0.0;
  for (auto [k, want] : {std::pair<double, double>{1.0, 0.0}, {2.0, 1.0}, {0.25, -2.0}}) {
    auto pd = px;
    for (auto& v : pd.power) v *= k;
    for (const auto& r : diag::relative_spectral_density(pd, px)) rsd_err = std::max(rsd_err, std::abs(*r - want));
  }
  const bool ok = parseval <= 1e-8 && peaks && rsd_err <= 1e-12 && oracle <= 1e-8;
  report("A8", ok,
         "parseval " + sci(parseval) + ", peak bins " + (peaks ? "exact" : "WRONG") + ", R(f) error " + sci(rsd_err) +
             ", DFT oracle " + sci(oracle));
}

// ---------------------------------------------------------------- A10

bool same_bytes_params(const StagedNet& a, const StagedNet& b) {
  const auto pa = a.named_parameters(), pb = b.named_parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (!std::equal(pa[i].tensor.data().begin(), pa[i].tensor.data().end(), pb[i].tensor.data().begin())) return false;
  }
  return true;
}

void check_reductions() {
  DataGenConfig dc;
  dc.seed = 77;
  dc.n_train = 512;
  dc.n_test = 16;
  const auto split = gen_data(dc);

  const StagedNet reference(NetConfig{}, 78);
  StagedNet s_emn = reference.clone(), s_ssc = reference.clone();
  s_emn.reinit_head(79);
  s_ssc.reinit_head(79);
  GenConfig g;
  g.epochs = 2;
  g.seed = 80;
  g.lambda = 0.0;
  const auto emn = generate_emn(split.train, s_emn, g);
  const auto ssc = generate_ssc(split.train, s_ssc, reference, g);
  const bool gen_same = emn.values == ssc.values && emn.max_abs() > 0.0;

  dc.family = 1;
  const auto src = gen_data(dc);
  TrainConfig t;
  t.epochs = 3;
  t.decay_epochs = {2};
  t.seed = 81;
  t.lambda_sf = 0.0;
  StagedNet a(NetConfig{}, 82), b(NetConfig{}, 82);
  sf_pretrain(a, src.train, t);
  train(b, src.train, t);
  const bool sf_same = same_bytes_params(a, b);
  report("A10", gen_same && sf_same,
         std::string("ssc(lambda=0) vs emn: ") + (gen_same ? "bit-identical" : "DIFFER") +
             "; sf-pretrain(lambda_sf=0) vs pretrain: " + (sf_same ? "bit-identical" : "DIFFER"));
}

// ---------------------------------------------------------------- A11

void check_determinism(const std::string& work) {
  const std::string text =
      "data.n_train = 512\ndata.n_test = 128\ntrain.epochs = 3\npretrain.epochs = 2\ngen.epochs = 2\n"
      "method = ssc\nparadigm = sf-pf\nlambda_sf = 1\nseed = 4\n";
  std::vector<std::string> csvs;
  std::string id;
  for (const char* sub : {"a", "b"}) {
    const fs::path dir = fs::path(work) / "determinism" / sub;
    fs::remove_all(dir);
    RunSpec spec = spec_from_text(parse_spec_text(text));
    spec.out_dir = dir.string();
    const auto r = run(spec);
    id = r.run_id;
    csvs.push_back(io::read_file((fs::path(r.run_dir) / "results.csv").string()) + "\n--\n" +
                   io::read_file((fs::path(r.run_dir) / "metrics.csv").string()));
  }
  report("A11", csvs[0] == csvs[1],
         "spec " + id + " executed twice from empty directories: result and metric CSVs " +
             (csvs[0] == csvs[1] ? "byte-identical" : "DIFFER"));
}

// ---------------------------------------------------------------- grid

struct Cell {
  std::string method;    // none | emn | ssc
  std::string paradigm;  // scratch | pf | sf-pf
  double lambda_sf = 0.0;
  std::uint64_t seed = 0;
};

struct CellOutcome {
  double accuracy = 0.0;
  double seconds = 0.0;
  std::map<std::string, double> metrics;  // "cossim:S1", "ptr:S1", "rsd:0", ...
};

std::string cell_text(const Cell& c, const std::string& overrides) {
  std::ostringstream s;
  s << "method = " << c.method << "\nparadigm = " << c.paradigm << "\nseed = " << c.seed << "\n";
  if (c.paradigm == "sf-pf") s << "lambda_sf = " << c.lambda_sf << "\n";
  s << overrides;
  return s.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  std::string work = "acceptance-work";
  std::size_t seeds = 3;
  std::string overrides;
  app.add_option("--work", work, "Working directory (artifact cache and runs)");
  app.add_option("--seeds", seeds, "Training seeds per grid cell");
  app.add_option("--override", overrides, "Extra spec lines appended to every grid cell (for quick trials)");
  CLI11_PARSE(app, argc, argv);
  for (auto& ch : overrides) if (ch == ';') ch = '\n';
  if (!overrides.empty() && overrides.back() != '\n') overrides += '\n';
  fs::create_directories(work);

  check_gradients();
  check_spectral();
  check_reductions();

  // Experiment grid shared by A1-A5, A7 and A9.
  const std::string grid_dir = (fs::path(work) / "grid").string();
  std::vector<Cell> cells;
  for (std::uint64_t s = 0; s < seeds; ++s) {
    cells.push_back({"none", "scratch", 0.0, s});
    cells.push_back({"emn", "scratch", 0.0, s});
    cells.push_back({"emn", "pf", 0.0, s});
    cells.push_back({"ssc", "pf", 0.0, s});
    for (double l : {1.0, 3.0}) {
      cells.push_back({"emn", "sf-pf", l, s});
      cells.push_back({"ssc", "sf-pf", l, s});
    }
  }
  std::map<std::string, std::vector<CellOutcome>> by_group;
  auto group_of = [](const Cell& c) {
    return c.method + "/" + c.paradigm + (c.paradigm == "sf-pf" ? "/" + f4(c.lambda_sf) : std::string());
  };
  std::vector<RunSpec> specs;
  const auto grid_start = std::chrono::steady_clock::now();
  bool grid_ok = true;
  for (const auto& c : cells) {
    RunSpec spec = spec_from_text(parse_spec_text(cell_text(c, overrides)));
    spec.out_dir = grid_dir;
    specs.push_back(spec);
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const auto r = run(spec);
      CellOutcome o;
      o.accuracy = r.report.accuracy;
      o.seconds = seconds_since(t0);
      for (const auto& m : r.metrics) o.metrics[m.metric + ":" + m.stage_or_bin] = m.value;
      by_group[group_of(c)].push_back(o);
      info("cell " + group_of(c) + " seed " + std::to_string(c.seed) + " accuracy " + f4(o.accuracy) + " (" +
           f4(o.seconds) + " s)");
    } catch (const std::exception& e) {
      grid_ok = false;
      info("cell " + group_of(c) + " seed " + std::to_string(c.seed) + " FAILED: " + e.what());
    }
  }
  const double grid_seconds = seconds_since(grid_start);

  auto acc = [&](const std::string& g) {
    std::vector<double> v;
    for (const auto& o : by_group[g]) v.push_back(o.accuracy);
    return mean(v);
  };
  auto metric = [&](const std::string& g, const std::string& key) {
    std::vector<double> v;
    for (const auto& o : by_group[g]) {
      const auto it = o.metrics.find(key);
      if (it != o.metrics.end()) v.push_back(it->second);
    }
    return mean(v);
  };
  const bool complete = grid_ok && by_group["none/scratch"].size() == seeds;

  const double a1 = acc("none/scratch");
  double slowest = 0.0;
  for (const auto& o : by_group["none/scratch"]) slowest = std::max(slowest, o.seconds);
  report("A1", complete && a1 >= 0.85 && slowest <= 180.0,
         "clean scratch mean " + f4(a1) + " (>= 0.85), slowest seed " + f4(slowest) + " s (<= 180)");

  const double a2 = acc("emn/scratch");
  report("A2", a2 <= a1 - 0.30, "emn scratch mean " + f4(a2) + " (<= " + f4(a1 - 0.30) + ")");

  const double a3 = acc("emn/pf");
  report("A3", a3 >= a2 + 0.15, "emn pf{stem,S1} mean " + f4(a3) + " (>= " + f4(a2 + 0.15) + ")");

  const double a4 = acc("ssc/pf");
  report("A4", a4 <= a3 - 0.10, "ssc pf{stem,S1} mean " + f4(a4) + " (<= " + f4(a3 - 0.10) + ")");

  {
    const double e0 = a3, e1 = acc("emn/sf-pf/1.0000"), e3 = acc("emn/sf-pf/3.0000");
    const double s0 = a4, s1 = acc("ssc/sf-pf/1.0000"), s3 = acc("ssc/sf-pf/3.0000");
    const bool monotone = e0 <= e1 && e1 <= e3;
    const bool below = s0 < e0 && s1 < e1 && s3 < e3;
    report("A5", monotone && below,
           "emn by lambda_sf 0/1/3: " + f4(e0) + " " + f4(e1) + " " + f4(e3) + (monotone ? " (non-decreasing)" : " (NOT monotone)") +
               "; ssc: " + f4(s0) + " " + f4(s1) + " " + f4(s3) + (below ? " (below emn)" : " (NOT below emn)"));
  }

  {
    ArtifactCache cache((fs::path(grid_dir) / "cache").string());
    std::size_t violations = 0, total = 0;
    double worst = 0.0;
    for (const char* m : {"emn", "ssc"}) {
      RunSpec spec = spec_from_text(parse_spec_text(cell_text({m, "pf", 0.0, 0}, overrides)));
      spec.out_dir = grid_dir;
      const auto ps = load_perturbations(cache.perturbations(spec));
      for (std::size_t i = 0; i < ps.size(); ++i) {
        double mx = 0.0;
        for (double v : ps.delta(i)) mx = std::max(mx, std::abs(v));
        violations += mx > kDefaultEpsilon;
        worst = std::max(worst, mx);
        ++total;
      }
    }
    report("A7", violations == 0 && total > 0,
           std::to_string(violations) + " violations over " + std::to_string(total) + " perturbations, max |delta| " +
               f4(worst) + " (budget " + f4(kDefaultEpsilon) + ")");
  }

  {
    const double ptr_pf = metric("emn/pf", "ptr:S1"), ptr_scratch = metric("emn/scratch", "ptr:S1");
    const double cos1_pf = metric("emn/pf", "cossim:S1");
    const double cos4_pf = metric("emn/pf", "cossim:S4"), cos4_scratch = metric("emn/scratch", "cossim:S4");
    report("A9", ptr_pf < ptr_scratch && cos1_pf > 0.9 && cos4_scratch < cos4_pf,
           "S1 PTR pf " + f4(ptr_pf) + " < scratch " + f4(ptr_scratch) + "; S1 cos pf " + f4(cos1_pf) +
               " > 0.9; S4 cos scratch " + f4(cos4_scratch) + " < pf " + f4(cos4_pf));
  }

  check_determinism(work);

  // Informational lines, not criteria.
  info("grid of " + std::to_string(cells.size()) + " runs took " + f4(grid_seconds / 60.0) + " min");
  {
    ArtifactCache cache((fs::path(grid_dir) / "cache").string());
    RunSpec spec = spec_from_text(parse_spec_text(cell_text({"ssc", "pf", 0.0, 0}, overrides)));
    spec.out_dir = grid_dir;
    const auto trace = cache.perturbations(spec) + ".trace.csv";
    if (fs::exists(trace)) {
      std::istringstream in(io::read_file(trace));
      std::string line;
      std::vector<double> fr;
      while (std::getline(in, line)) {
        if (line.find("gen_rsem_descent_fraction") != std::string::npos) fr.push_back(std::stod(line.substr(line.rfind(',') + 1)));
      }
      info("ssc generation R_sem descent fraction (mean over epochs): " + f4(mean(fr)));
    }
  }
  {
    const std::size_t bins = diag::radial_bin_count(16, 16);
    const std::size_t low = (bins + 3) / 4;
    double r_ssc = 0.0, r_emn = 0.0;
    for (std::size_t b = 0; b < low; ++b) {
      r_ssc += metric("ssc/pf", "rsd:" + std::to_string(b)) / static_cast<double>(low);
      r_emn += metric("emn/pf", "rsd:" + std::to_string(b)) / static_cast<double>(low);
    }
    info("mean R(f) over the lowest " + std::to_string(low) + " bins: ssc " + f4(r_ssc) + ", emn " + f4(r_emn) +
         (r_ssc > r_emn ? " (ssc higher)" : " (ssc NOT higher)"));
  }

  std::size_t failed = 0;
  for (const auto& v : verdicts) failed += !v.pass;
  std::printf("%zu/%zu criteria passed\n", verdicts.size() - failed, verdicts.size());
  return failed == 0 ? 0 : 1;
}
