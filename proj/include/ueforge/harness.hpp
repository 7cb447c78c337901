#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ueforge/diagnostics.hpp"
#include "ueforge/errors.hpp"
#include "ueforge/generation.hpp"
#include "ueforge/runspec.hpp"
#include "ueforge/training.hpp"

namespace ueforge {

// A pipeline stage failed; `stage()` names it ("gen-data", "pretrain", ...).
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct RunResult {
  std::string run_id;
  std::string run_dir;
  EvalReport report;
  TrainLog train_log;
  std::vector<diag::MetricRecord> metrics;
};

// Content-addressed artifact store shared by runs under one output directory.
// Every artifact is produced at most once and written atomically.
class ArtifactCache {
 public:
  explicit ArtifactCache(std::string dir, std::ostream* log = nullptr);

  const std::string& dir() const { return dir_; }

  DataSplit data(const DataGenConfig& cfg);
  // Plain (lambda_sf == 0) or semantic-focused pretraining on `family`.
  std::string pretrained(const RunSpec& spec, int family, std::uint64_t seed, double lambda_sf);
  // Clean-pretrained reference for SSC (or the user-supplied path).
  std::string reference(const RunSpec& spec);
  std::string perturbations(const RunSpec& spec);

 private:
  std::string path(const std::string& kind, const std::string& key, const std::string& ext) const;
  void note(const std::string& msg) const;

  std::string dir_;
  std::ostream* log_;
};

// gen-data -> pretrain -> gen-ue -> train -> evaluate -> diagnose. Outputs go to
// <out_dir>/<run_id>/ (results.csv, metrics.csv, spec.txt, model.uewt).
RunResult run(const RunSpec& spec, std::ostream* log = nullptr);

// Rows of the results CSV for one run: one per training epoch (split "train")
// and a final "test" row.
std::string results_csv(const RunSpec& spec, const RunResult& result);
inline constexpr const char* kResultsHeader =
    "run_id,paradigm,method,freeze_mask,lambda_sf,seed,epoch,split,accuracy,loss";

struct GridCell {
  RunSpec spec;
  std::optional<RunResult> result;
  std::string error;
};

struct GridReport {
  std::vector<GridCell> cells;
  std::string summary_csv;
  bool ok() const;
};

// Runs every cell (a failing cell is recorded, not fatal) and aggregates test
// accuracy as mean and std over seeds.
GridReport grid(const std::vector<RunSpec>& specs, std::ostream* log = nullptr);

// Pivot table: rows are methods, columns are paradigm/freeze/lambda_sf settings,
// cells "mean±std" over seeds, or FAILED.
std::string summary_csv(const std::vector<GridCell>& cells);

// Rebuilds the pivot from results.csv files found under `out_dir`.
std::string report_from_dir(const std::string& out_dir);

}  // namespace ueforge
