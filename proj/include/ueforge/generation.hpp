#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ueforge/dataset.hpp"
#include "ueforge/model.hpp"

namespace ueforge {

inline constexpr double kDefaultEpsilon = 8.0 / 255.0;

enum class UeMethod { Emn, Ssc };

std::string_view method_name(UeMethod m);
// "emn" or "ssc"; throws ConfigError.
UeMethod parse_method(std::string_view name);

struct GenConfig {
  double epsilon = kDefaultEpsilon;
  std::size_t inner_steps = 5;
  std::optional<double> eta;  // outer step; epsilon / 4 when unset
  double alpha = 0.01;        // inner learning rate
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lambda = 0.01;       // alignment weight; near 1 the Gram term blows up the shallow stage
  FreezeMask surrogate_freeze;
  std::string reference_path;
  std::vector<std::size_t> align_stages{1};
  std::uint64_t seed = 0;

  double outer_step() const { return eta.value_or(epsilon / 4.0); }
  // Throws ConfigError unless epsilon > 0, K >= 1, eta >= 0, alpha > 0,
  // lambda >= 0, epochs >= 1, batch >= 1 and stages lie in 1..4.
  void validate() const;
};

// Per-example additive perturbations, stored contiguously in dataset order.
struct PerturbationSet {
  UeMethod method = UeMethod::Emn;
  double epsilon = kDefaultEpsilon;
  Shape example_shape;         // C, H, W
  std::vector<double> values;  // N * C*H*W

  // Generation metadata (not persisted in UEPD files).
  std::string surrogate_freeze = "none";
  double lambda = 0.0;
  std::size_t inner_steps = 0;
  double eta = 0.0;
  double alpha = 0.0;
  std::uint64_t seed = 0;

  std::size_t size() const;
  std::size_t example_numel() const { return shape_numel(example_shape); }
  std::span<const double> delta(std::size_t i) const;
  std::span<double> delta(std::size_t i);
  double max_abs() const;

  static PerturbationSet zeros(const Dataset& data, UeMethod method, double epsilon);
};

struct GenEpochTrace {
  std::size_t epoch = 0;
  double outer_ce = 0.0;      // mean CE at theta* over batches
  double rsem_before = 0.0;   // mean R_sem before the inner steps
  double rsem_after = 0.0;    // mean R_sem after the inner steps
  std::size_t batches = 0;
  std::size_t rsem_descents = 0;  // batches where R_sem after <= before
};

struct GenTrace {
  std::vector<GenEpochTrace> epochs;
  bool has_rsem = false;
};

// Elementwise clamp to [-epsilon, epsilon].
Tensor project_linf(const Tensor& delta, double epsilon);
void project_linf_inplace(std::span<double> delta, double epsilon);

// Mean over the batch and the listed stages of ||Gram(adv_k) - Gram(ref_k)||_F^2.
// The reference side is detached.
Tensor semantic_alignment_loss(const FeatureTaps& adv, const FeatureTaps& ref, std::span<const std::size_t> stages);

// Error-minimizing noise. Inner steps carry over between the batches of an
// epoch and the surrogate is reset to its entry state after every epoch, so on
// return it holds its original parameters.
PerturbationSet generate_emn(const Dataset& data, StagedNet& surrogate, const GenConfig& cfg,
                             GenTrace* trace = nullptr);

// Error-minimizing noise whose inner objective adds lambda * R_sem against a
// frozen reference network's clean shallow features.
PerturbationSet generate_ssc(const Dataset& data, StagedNet& surrogate, const StagedNet& reference,
                             const GenConfig& cfg, GenTrace* trace = nullptr);

// x_i' = clamp(x_i + delta_i, 0, 1); labels unchanged.
Dataset apply(const Dataset& data, const PerturbationSet& ps);

// "UEPD" binary format.
void save_perturbations(const PerturbationSet& ps, const std::string& path);
PerturbationSet load_perturbations(const std::string& path);

}  // namespace ueforge
