#include "ueforge/training.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "ueforge/errors.hpp"
#include "ueforge/ops.hpp"
#include "ueforge/optim.hpp"

namespace ueforge {

std::string_view paradigm_name(Paradigm p) {
  switch (p) {
    case Paradigm::Scratch: return "scratch";
    case Paradigm::Pf: return "pf";
    case Paradigm::SfPf: return "sf-pf";
    case Paradigm::Pretrain: return "pretrain";
    case Paradigm::SfPretrain: return "sf-pretrain";
  }
  return "?";
}

Paradigm parse_paradigm(std::string_view name) {
  for (auto p : {Paradigm::Scratch, Paradigm::Pf, Paradigm::SfPf, Paradigm::Pretrain, Paradigm::SfPretrain}) {
    if (paradigm_name(p) == name) return p;
  }
  throw ConfigError("unknown paradigm '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
  if (momentum < 0.0 || weight_decay < 0.0) throw ConfigError("momentum and weight decay must be >= 0");
  if (!(decay_factor > 0.0)) throw ConfigError("decay factor must be > 0");
}

double TrainConfig::lr_at(std::size_t epoch) const {
  double rate = lr;
  for (auto e : decay_epochs) {
    if (epoch >= e) rate *= decay_factor;
  }
  return rate;
}

namespace {

struct Objective {
  Tensor loss;
  Tensor logits;
};

Objective objective(const StagedNet& net, const Tensor& batch, std::span<const std::uint16_t> labels, double lambda) {
  const bool use_aux = lambda != 0.0 && net.has_aux_heads();
  auto out = net.forward(batch, use_aux);
  Tensor loss = ops::cross_entropy(out.logits, labels);
  if (use_aux) {
    for (const auto& aux_logits : net.aux_forward(*out.taps)) {
      loss = ops::add(loss, ops::scale(ops::cross_entropy(aux_logits, labels), lambda));
    }
  }
  return {loss, out.logits};
}

}  // namespace

Tensor sf_objective(const StagedNet& net, const Tensor& batch, std::span<const std::uint16_t> labels, double lambda) {
  return objective(net, batch, labels, lambda).loss;
}

namespace {

std::size_t count_correct(const Tensor& logits, std::span<const std::uint16_t> labels) {
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  const auto z = logits.data();
  std::size_t correct = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const auto row = z.subspan(b * K, K);
    const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (pred == labels[b]) ++correct;
  }
  return correct;
}

TrainLog run_training(StagedNet& net, const Dataset& data, const TrainConfig& cfg, double lambda,
                      const StepHook& hook) {
  cfg.validate();
  if (data.size() == 0) throw InputError("cannot train on an empty dataset");
  data.validate();
  if (data.channels != net.config().in_channels || data.height != net.config().height ||
      data.width != net.config().width || data.classes != net.config().classes) {
    throw DimensionError("dataset geometry does not match the network configuration");
  }
  net.apply_freeze(cfg.freeze);
  Sgd opt(net.trainable_parameters(), SgdHyper{cfg.lr, cfg.momentum, cfg.weight_decay});
  opt.zero_grad();

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  TrainLog log;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.set_lr(cfg.lr_at(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::size_t step = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const Tensor x = data.batch(idx);
      const auto y = data.batch_labels(idx);
      auto [loss, logits] = objective(net, x, y, lambda);
      check_finite(loss, "training loss");
      loss_sum += loss.item() * static_cast<double>(idx.size());
      correct += count_correct(logits, y);
      if (loss.requires_grad()) backward(loss);
      opt.step();
      opt.zero_grad();
      if (hook) hook(epoch, step);
    }
    const double n = static_cast<double>(data.size());
    log.epochs.push_back({epoch, cfg.lr_at(epoch), loss_sum / n, static_cast<double>(correct) / n});
  }
  return log;
}

}  // namespace

TrainLog train(StagedNet& net, const Dataset& data, const TrainConfig& cfg, const StepHook& hook) {
  return run_training(net, data, cfg, 0.0, hook);
}

TrainLog sf_pretrain(StagedNet& net, const Dataset& data, const TrainConfig& cfg, const StepHook& hook) {
  if (cfg.lambda_sf < 0.0) throw InputError("lambda_sf must be >= 0");
  if (cfg.aux_stages.empty()) throw ConfigError("sf_pretrain needs at least one aux stage");
  net.attach_aux_heads(cfg.aux_stages, cfg.seed);
  TrainLog log;
  try {
    log = run_training(net, data, cfg, cfg.lambda_sf, hook);
  } catch (...) {
    net.drop_aux_heads();
    throw;
  }
  net.drop_aux_heads();
  return log;
}

EvalReport evaluate(const StagedNet& net, const Dataset& test) {
  test.validate();
  if (test.classes != net.config().classes) throw InputError("test set class count does not match the network");
  NoGradGuard no_grad;
  EvalReport report;
  const std::size_t K = net.config().classes;
  std::vector<std::size_t> class_total(K, 0), class_correct(K, 0);
  constexpr std::size_t kEvalBatch = 256;
  std::vector<std::size_t> idx;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < test.size(); start += kEvalBatch) {
    const std::size_t end = std::min(test.size(), start + kEvalBatch);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto y = test.batch_labels(idx);
    const Tensor logits = net.logits(test.batch(idx));
    loss_sum += ops::cross_entropy(logits, y).item() * static_cast<double>(idx.size());
    const auto z = logits.data();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto row = z.subspan(b * K, K);
      const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      ++class_total[y[b]];
      if (pred == y[b]) {
        ++class_correct[y[b]];
        ++report.correct;
      }
    }
  }
  report.total = test.size();
  report.accuracy = static_cast<double>(report.correct) / static_cast<double>(report.total);
  report.loss = loss_sum / static_cast<double>(report.total);
  report.per_class_accuracy.resize(K, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    if (class_total[k]) report.per_class_accuracy[k] = static_cast<double>(class_correct[k]) / static_cast<double>(class_total[k]);
  }
  return report;
}

}  // namespace ueforge
