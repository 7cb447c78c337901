#pragma once

#include <array>
#include <bitset>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ueforge/tensor.hpp"

namespace ueforge {

// Parameter groups of a StagedNet. Stage taps use the same numbering for
// Stem..S4 (0..4).
enum class Component : int { Stem = 0, S1 = 1, S2 = 2, S3 = 3, S4 = 4, Head = 5 };
inline constexpr std::size_t kNumComponents = 6;
inline constexpr std::size_t kNumStages = 4;

// Fixed input standardisation applied at the start of the stem.
inline constexpr double kInputMean = 0.5;
inline constexpr double kInputStd = 0.25;

std::string_view component_name(Component c);
// Accepts "stem", "S1".."S4" (any case), "head". Throws InputError otherwise.
Component parse_component(std::string_view name);

// Selects the frozen subset of parameters; everything else is learnable.
class FreezeMask {
 public:
  FreezeMask() = default;
  FreezeMask(std::initializer_list<Component> frozen);

  // Comma- or plus-separated component names; "", "none" and "-" mean empty.
  static FreezeMask parse(std::string_view text);

  bool frozen(Component c) const { return bits_.test(static_cast<std::size_t>(c)); }
  void freeze(Component c) { bits_.set(static_cast<std::size_t>(c)); }
  bool empty() const { return bits_.none(); }
  // "stem+S1", or "none" when empty.
  std::string to_string() const;

  bool operator==(const FreezeMask&) const = default;

 private:
  std::bitset<kNumComponents> bits_;
};

struct NetConfig {
  std::size_t in_channels = 1;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t classes = 4;
  std::array<std::size_t, kNumStages> widths{8, 16, 32, 64};

  // Throws ConfigError for degenerate geometry.
  void validate() const;
  bool operator==(const NetConfig&) const = default;
};

// Outputs of the stem and of each stage from one forward pass. taps[k] is the
// exact activation fed to stage k+1 (taps[4] feeds the pooled head).
struct FeatureTaps {
  std::array<Tensor, kNumStages + 1> outputs;

  const Tensor& operator[](std::size_t k) const { return outputs.at(k); }
  Tensor& operator[](std::size_t k) { return outputs.at(k); }
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct ForwardResult {
  Tensor logits;
  std::optional<FeatureTaps> taps;
};

// Convolutional classifier: 3x3 conv stem, four stages of two 3x3 conv+ReLU
// layers (S2..S4 enter with stride 2), global average pool, linear head.
// Optional auxiliary heads (pool + linear) read stage outputs.
//
// Copies would alias parameter storage, so the type is move-only; use clone().
class StagedNet {
 public:
  StagedNet(NetConfig config, std::uint64_t seed);

  StagedNet(StagedNet&&) noexcept = default;
  StagedNet& operator=(StagedNet&&) noexcept = default;
  StagedNet(const StagedNet&) = delete;
  StagedNet& operator=(const StagedNet&) = delete;

  StagedNet clone() const;

  const NetConfig& config() const { return config_; }

  ForwardResult forward(const Tensor& batch, bool capture = false) const;
  Tensor logits(const Tensor& batch) const { return forward(batch, false).logits; }

  // Runs one stem/stage block (0 = stem, 1..4 = S1..S4). Block 0 standardises
  // its input first, so taps[0] is already in normalised units.
  Tensor run_block(std::size_t index, const Tensor& input) const;
  // Continues a forward pass from taps[k]: stages k+1..4 and the head.
  Tensor forward_from(std::size_t k, const Tensor& tap) const;
  Tensor head_forward(const Tensor& s4_output) const;

  // Attaches one head per listed stage (1..4); replaces any existing heads.
  void attach_aux_heads(const std::vector<std::size_t>& stages, std::uint64_t seed);
  void drop_aux_heads() { aux_.clear(); }
  bool has_aux_heads() const { return !aux_.empty(); }
  std::vector<std::size_t> aux_stages() const;
  std::vector<Tensor> aux_forward(const FeatureTaps& taps) const;

  // Marks parameters of frozen components as not requiring gradients so they
  // are skipped by backward and by optimizers built from trainable_parameters().
  void apply_freeze(const FreezeMask& mask);
  const FreezeMask& freeze_mask() const { return mask_; }

  // Trunk and head parameters in a fixed order; aux heads appended when asked.
  std::vector<NamedTensor> named_parameters(bool include_aux = false) const;
  std::vector<Tensor> parameters_of(Component c) const;
  std::vector<Tensor> trainable_parameters() const;
  std::size_t parameter_count() const;

  // Fresh head initialization (used when a pretrained trunk meets a new task).
  void reinit_head(std::uint64_t seed);

  // Value snapshot of trunk + head parameters; restore requires same layout.
  std::vector<std::vector<double>> snapshot() const;
  void restore(const std::vector<std::vector<double>>& values);

 private:
  struct Conv {
    Tensor weight;
    Tensor bias;
    std::size_t stride = 1;
  };
  struct Block {
    std::vector<Conv> convs;
  };
  struct Linear {
    Tensor weight;
    Tensor bias;
  };
  struct AuxHead {
    std::size_t stage;
    Linear linear;
  };

  StagedNet() = default;
  void check_input(const Tensor& batch) const;

  NetConfig config_;
  std::array<Block, kNumStages + 1> blocks_;  // stem, S1..S4
  Linear head_;
  std::vector<AuxHead> aux_;
  FreezeMask mask_;
};

// Binary checkpoint ("UEWT"). Aux heads are never written.
void save_checkpoint(const StagedNet& net, const std::string& path);
// All-or-nothing: the target is untouched unless every tensor validates.
void load_checkpoint(StagedNet& net, const std::string& path);
// Builds a network whose widths/classes are inferred from the checkpoint.
StagedNet load_network(const std::string& path, std::size_t height, std::size_t width);

}  // namespace ueforge
