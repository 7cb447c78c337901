#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ueforge/dataset.hpp"
#include "ueforge/generation.hpp"
#include "ueforge/training.hpp"

namespace ueforge {

// Parsed `key = value` lines. A value containing " | " lists grid alternatives.
struct SpecText {
  std::map<std::string, std::vector<std::string>> entries;
  std::vector<std::string> order;  // keys in first-seen order
};

// Grammar: one `key = value` per line; `#` starts a comment; blank lines are
// ignored; keys are [a-z0-9_.-]+; a repeated key is an error. Throws ConfigError
// with the line number.
SpecText parse_spec_text(std::string_view text);
SpecText read_spec_file(const std::string& path);

enum class UeSource { None, Emn, Ssc };

std::string_view ue_source_name(UeSource s);
UeSource parse_ue_source(std::string_view name);

// One experiment cell. Every field has a default, so an empty file is a valid
// clean/scratch run.
struct RunSpec {
  std::string name;

  DataGenConfig data;                 // protector's task
  int pretrain_family = 1;            // source task for PF / SF-PF weights
  std::uint64_t pretrain_seed = 1000;

  UeSource method = UeSource::None;
  GenConfig gen;
  int reference_family = 1;           // clean task for the SSC reference when no path is given
  std::uint64_t reference_seed = 2000;

  Paradigm paradigm = Paradigm::Scratch;
  TrainConfig train;                  // freeze mask, lambda_sf and seed live here
  TrainConfig pretrain;               // schedule for the source-task pretraining

  bool diagnostics = true;
  std::size_t diag_examples = 256;

  std::string out_dir = "runs";       // not part of the run identity

  // Throws ConfigError on inconsistent settings and on missing referenced files.
  void validate() const;
  // Sorted `key = value` lines with every effective value spelled out.
  std::string canonical() const;
  // 16 hex digits of FNV-1a over canonical().
  std::string run_id() const;
};

// Builds a RunSpec from single-valued entries. Unknown keys are rejected.
RunSpec spec_from_text(const SpecText& text);
// Cartesian product over every key with alternatives, in key order.
std::vector<RunSpec> expand_grid(const SpecText& text);

// Applies UEFORGE_SEED (if set) to the training seed.
void apply_env_overrides(RunSpec& spec);

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

}  // namespace ueforge
