#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ueforge/dataset.hpp"
#include "ueforge/model.hpp"

namespace ueforge {

enum class Paradigm { Scratch, Pf, SfPf, Pretrain, SfPretrain };

std::string_view paradigm_name(Paradigm p);
// "scratch", "pf", "sf-pf", "pretrain", "sf-pretrain"; throws ConfigError.
Paradigm parse_paradigm(std::string_view name);

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr = 0.02;
  std::vector<std::size_t> decay_epochs{20, 26};
  double decay_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  FreezeMask freeze;
  double lambda_sf = 0.0;
  std::vector<std::size_t> aux_stages{1, 2};
  Paradigm paradigm = Paradigm::Scratch;

  // Throws ConfigError unless epochs >= 1, batch >= 1, lr > 0, lambda_sf >= 0.
  void validate() const;
  // Step schedule: lr * decay_factor^(number of decay epochs <= epoch).
  double lr_at(std::size_t epoch) const;
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;      // mean training loss over the epoch
  double accuracy = 0.0;  // running training accuracy over the epoch
};

struct TrainLog {
  std::vector<EpochLog> epochs;
};

// Optional hook called after every optimizer step with (epoch, step).
using StepHook = std::function<void(std::size_t, std::size_t)>;

// Mini-batch SGD on the learnable parameters; the freeze mask in `cfg` is
// applied before the first step. Deterministic for a fixed cfg.seed.
TrainLog train(StagedNet& net, const Dataset& data, const TrainConfig& cfg, const StepHook& hook = {});

// Task loss plus lambda_sf times the summed cross-entropy of auxiliary heads
// on cfg.aux_stages. Heads are attached for the run and removed afterwards.
TrainLog sf_pretrain(StagedNet& net, const Dataset& data, const TrainConfig& cfg, const StepHook& hook = {});

// The training objective on one batch: CE(logits) + lambda * sum_k CE(aux_k).
// The aux term is skipped entirely when lambda == 0 or no heads are attached.
Tensor sf_objective(const StagedNet& net, const Tensor& batch, std::span<const std::uint16_t> labels, double lambda);

struct EvalReport {
  double accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  double loss = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;

  std::string paradigm;
  std::string freeze_mask;
  std::string method;
  std::uint64_t seed = 0;
};

// Argmax accuracy and mean cross-entropy; never mutates the network.
EvalReport evaluate(const StagedNet& net, const Dataset& test);

}  // namespace ueforge
