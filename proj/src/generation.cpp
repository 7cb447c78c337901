#include "ueforge/generation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "ueforge/errors.hpp"
#include "ueforge/io.hpp"
#include "ueforge/ops.hpp"
#include "ueforge/optim.hpp"

namespace ueforge {

namespace {
constexpr std::uint16_t kPerturbVersion = 1;
}

std::string_view method_name(UeMethod m) { return m == UeMethod::Emn ? "emn" : "ssc"; }

UeMethod parse_method(std::string_view name) {
  if (name == "emn") return UeMethod::Emn;
  if (name == "ssc") return UeMethod::Ssc;
  throw ConfigError("unknown UE method '" + std::string(name) + "' (expected emn or ssc)");
}

void GenConfig::validate() const {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("perturbation budget must be > 0");
  if (inner_steps < 1) throw ConfigError("inner steps must be >= 1");
  if (!(outer_step() >= 0.0)) throw ConfigError("outer step size must be >= 0");
  if (!(alpha > 0.0)) throw ConfigError("inner learning rate must be > 0");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (epochs < 1) throw ConfigError("generation epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("generation batch size must be >= 1");
  for (auto s : align_stages) {
    if (s < 1 || s > kNumStages) throw ConfigError("alignment stages must lie in 1..4");
  }
}

std::size_t PerturbationSet::size() const {
  const auto d = example_numel();
  return d == 0 ? 0 : values.size() / d;
}

std::span<const double> PerturbationSet::delta(std::size_t i) const {
  if (i >= size()) throw InputError("perturbation index " + std::to_string(i) + " out of range");
  return std::span<const double>(values).subspan(i * example_numel(), example_numel());
}

std::span<double> PerturbationSet::delta(std::size_t i) {
  if (i >= size()) throw InputError("perturbation index " + std::to_string(i) + " out of range");
  return std::span<double>(values).subspan(i * example_numel(), example_numel());
}

double PerturbationSet::max_abs() const {
  double m = 0.0;
  for (double v : values) m = std::max(m, std::abs(v));
  return m;
}

PerturbationSet PerturbationSet::zeros(const Dataset& data, UeMethod method, double epsilon) {
  PerturbationSet ps;
  ps.method = method;
  ps.epsilon = epsilon;
  ps.example_shape = {data.channels, data.height, data.width};
  ps.values.assign(data.size() * data.image_numel(), 0.0);
  return ps;
}

void project_linf_inplace(std::span<double> delta, double epsilon) {
  for (auto& v : delta) v = std::clamp(v, -epsilon, epsilon);
}

Tensor project_linf(const Tensor& delta, double epsilon) {
  std::vector<double> out(delta.data().begin(), delta.data().end());
  project_linf_inplace(out, epsilon);
  return Tensor(delta.shape(), std::move(out));
}

Tensor semantic_alignment_loss(const FeatureTaps& adv, const FeatureTaps& ref, std::span<const std::size_t> stages) {
  if (stages.empty()) throw InputError("semantic alignment needs at least one stage");
  Tensor total;
  for (auto s : stages) {
    if (s > kNumStages) throw InputError("stage index out of range");
    const Tensor& a = adv[s];
    const Tensor& r = ref[s];
    if (!a.defined() || !r.defined()) throw UsageError("missing feature tap for stage " + std::to_string(s));
    if (a.shape() != r.shape()) {
      throw DimensionError("stage " + std::to_string(s) + " tap shapes differ: " + shape_to_string(a.shape()) + " vs " +
                           shape_to_string(r.shape()));
    }
    const Tensor diff = ops::sub(ops::gram(a), ops::gram(r.detach()));
    const Tensor term = ops::scale(ops::sum_squares(diff), 1.0 / static_cast<double>(a.dim(0)));
    total = total.defined() ? ops::add(total, term) : term;
  }
  return ops::scale(total, 1.0 / static_cast<double>(stages.size()));
}

namespace {

// Restores the surrogate's freeze mask and per-parameter grad flags on exit.
class ParamStateScope {
 public:
  explicit ParamStateScope(StagedNet& net) : net_(net), mask_(net.freeze_mask()) {
    for (const auto& np : net.named_parameters(true)) flags_.push_back(np.tensor.requires_grad());
  }
  ~ParamStateScope() {
    net_.apply_freeze(mask_);
    auto params = net_.named_parameters(true);
    for (std::size_t i = 0; i < params.size() && i < flags_.size(); ++i) params[i].tensor.set_requires_grad(flags_[i]);
  }
  ParamStateScope(const ParamStateScope&) = delete;
  ParamStateScope& operator=(const ParamStateScope&) = delete;

 private:
  StagedNet& net_;
  FreezeMask mask_;
  std::vector<bool> flags_;
};

void set_all_requires_grad(std::vector<Tensor>& params, bool flag) {
  for (auto& p : params) p.set_requires_grad(flag);
}

FeatureTaps shallow_taps(const StagedNet& net, const Tensor& x, std::size_t last_stage) {
  NoGradGuard no_grad;
  FeatureTaps taps;
  Tensor h = x;
  for (std::size_t k = 0; k <= last_stage; ++k) {
    h = net.run_block(k, h);
    taps[k] = h;
  }
  return taps;
}

double rsem_value(const FeatureTaps& adv, const FeatureTaps& ref, std::span<const std::size_t> stages) {
  NoGradGuard no_grad;
  return semantic_alignment_loss(adv, ref, stages).item();
}

void check_reference(const StagedNet& surrogate, const StagedNet& reference, std::span<const std::size_t> stages) {
  const auto& a = surrogate.config();
  const auto& b = reference.config();
  if (a.in_channels != b.in_channels || a.height != b.height || a.width != b.width) {
    throw DimensionError("reference input geometry does not match the surrogate");
  }
  for (auto s : stages) {
    if (a.widths[s - 1] != b.widths[s - 1]) {
      throw DimensionError("reference stage S" + std::to_string(s) + " width " + std::to_string(b.widths[s - 1]) +
                           " does not match surrogate width " + std::to_string(a.widths[s - 1]));
    }
  }
}

PerturbationSet bilevel(const Dataset& data, StagedNet& surrogate, const StagedNet* reference, const GenConfig& cfg,
                        UeMethod method, GenTrace* trace) {
  cfg.validate();
  data.validate();
  const auto& nc = surrogate.config();
  if (data.channels != nc.in_channels || data.height != nc.height || data.width != nc.width ||
      data.classes != nc.classes) {
    throw DimensionError("dataset geometry does not match the surrogate network");
  }
  if (reference) check_reference(surrogate, *reference, cfg.align_stages);

  ParamStateScope scope(surrogate);
  surrogate.apply_freeze(cfg.surrogate_freeze);
  std::vector<Tensor> learnable = surrogate.trainable_parameters();
  std::vector<Tensor> all_params;
  for (const auto& np : surrogate.named_parameters(true)) all_params.push_back(np.tensor);

  const double lambda = reference ? cfg.lambda : 0.0;
  const double eta = cfg.outer_step();
  const std::size_t last_stage =
      cfg.align_stages.empty() ? 0 : *std::max_element(cfg.align_stages.begin(), cfg.align_stages.end());
  const SgdHyper inner{cfg.alpha, 0.0, 0.0};
  VelocityState velocity = make_velocity(learnable);

  PerturbationSet ps = PerturbationSet::zeros(data, method, cfg.epsilon);
  ps.surrogate_freeze = cfg.surrogate_freeze.to_string();
  ps.lambda = lambda;
  ps.inner_steps = cfg.inner_steps;
  ps.eta = eta;
  ps.alpha = cfg.alpha;
  ps.seed = cfg.seed;

  if (trace) {
    trace->epochs.clear();
    trace->has_rsem = reference != nullptr;
  }

  const std::size_t D = data.image_numel();
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    // Inner steps accumulate across the batches of an epoch; the surrogate is
    // reset to its epoch-entry state when the epoch ends.
    const auto entry = surrogate.snapshot();
    GenEpochTrace et;
    et.epoch = epoch;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const std::size_t B = idx.size();
      const Tensor clean = data.batch(idx);
      const auto labels = data.batch_labels(idx);

      std::vector<double> adv(B * D);
      for (std::size_t b = 0; b < B; ++b) {
        const auto x = data.image(idx[b]);
        const auto d = ps.delta(idx[b]);
        for (std::size_t j = 0; j < D; ++j) adv[b * D + j] = std::clamp(x[j] + d[j], 0.0, 1.0);
      }
      const Tensor x_adv(clean.shape(), adv);

      std::optional<FeatureTaps> ref_taps;
      if (reference) ref_taps = shallow_taps(*reference, clean, last_stage);

      double rsem_before = 0.0;
      for (std::size_t k = 0; k < cfg.inner_steps; ++k) {
        auto out = surrogate.forward(x_adv, reference != nullptr);
        Tensor loss = ops::cross_entropy(out.logits, labels);
        if (reference) {
          if (k == 0) rsem_before = rsem_value(*out.taps, *ref_taps, cfg.align_stages);
          if (lambda != 0.0) {
            loss = ops::add(loss, ops::scale(semantic_alignment_loss(*out.taps, *ref_taps, cfg.align_stages), lambda));
          }
        }
        check_finite(loss, "inner loss");
        if (loss.requires_grad()) {
          backward(loss);
          sgd_step(learnable, velocity, inner);
          for (auto& p : learnable) p.zero_grad();
        }
      }

      // Outer step at theta*: gradient w.r.t. the perturbed input only.
      set_all_requires_grad(all_params, false);
      Tensor x_leaf(clean.shape(), adv, true);
      auto out = surrogate.forward(x_leaf, reference != nullptr);
      const Tensor outer = ops::cross_entropy(out.logits, labels);
      check_finite(outer, "outer loss");
      backward(outer);
      const auto g = x_leaf.grad();
      for (std::size_t b = 0; b < B; ++b) {
        auto d = ps.delta(idx[b]);
        for (std::size_t j = 0; j < D; ++j) {
          const double gj = g[b * D + j];
          const double s = gj > 0.0 ? 1.0 : (gj < 0.0 ? -1.0 : 0.0);
          d[j] = std::clamp(d[j] - eta * s, -cfg.epsilon, cfg.epsilon);
        }
      }
      for (auto& p : learnable) p.set_requires_grad(true);

      et.outer_ce += outer.item();
      if (reference) {
        const double rsem_after = rsem_value(*out.taps, *ref_taps, cfg.align_stages);
        et.rsem_before += rsem_before;
        et.rsem_after += rsem_after;
        if (rsem_after <= rsem_before) ++et.rsem_descents;
      }
      ++et.batches;

    }
    surrogate.restore(entry);
    if (trace) {
      const double n = static_cast<double>(et.batches);
      et.outer_ce /= n;
      et.rsem_before /= n;
      et.rsem_after /= n;
      trace->epochs.push_back(et);
    }
  }
  return ps;
}

}  // namespace

PerturbationSet generate_emn(const Dataset& data, StagedNet& surrogate, const GenConfig& cfg, GenTrace* trace) {
  return bilevel(data, surrogate, nullptr, cfg, UeMethod::Emn, trace);
}

PerturbationSet generate_ssc(const Dataset& data, StagedNet& surrogate, const StagedNet& reference,
                             const GenConfig& cfg, GenTrace* trace) {
  return bilevel(data, surrogate, &reference, cfg, UeMethod::Ssc, trace);
}

Dataset apply(const Dataset& data, const PerturbationSet& ps) {
  if (ps.size() != data.size()) {
    throw InputError("perturbation set has " + std::to_string(ps.size()) + " entries for " +
                     std::to_string(data.size()) + " examples");
  }
  if (ps.example_shape != Shape{data.channels, data.height, data.width}) {
    throw InputError("perturbation shape " + shape_to_string(ps.example_shape) + " does not match the dataset");
  }
  Dataset out = data;
  for (std::size_t i = 0; i < out.images.size(); ++i) {
    out.images[i] = std::clamp(data.images[i] + ps.values[i], 0.0, 1.0);
  }
  return out;
}

void save_perturbations(const PerturbationSet& ps, const std::string& path) {
  if (ps.example_numel() == 0) throw InputError("perturbation set has no example shape");
  io::ByteWriter w;
  w.bytes("UEPD");
  w.u16(kPerturbVersion);
  w.f64(ps.epsilon);
  const std::size_t n = ps.size();
  w.u32(static_cast<std::uint32_t>(n));
  const std::string tag(method_name(ps.method));
  for (std::size_t i = 0; i < n; ++i) w.tensor(tag + ":" + std::to_string(i), ps.example_shape, ps.delta(i));
  io::write_file_atomic(path, w.buffer());
}

PerturbationSet load_perturbations(const std::string& path) {
  const std::string what = "perturbation file " + path;
  io::ByteReader r(io::read_file(path), what);
  r.expect_magic("UEPD");
  const auto version = r.u16();
  if (version != kPerturbVersion) throw FormatError(what + ": unsupported version " + std::to_string(version));
  PerturbationSet ps;
  ps.epsilon = r.f64();
  if (!(ps.epsilon > 0.0) || !std::isfinite(ps.epsilon)) throw FormatError(what + ": invalid epsilon");
  const auto n = r.u32();
  if (n == 0) throw FormatError(what + ": empty perturbation set");
  for (std::uint32_t i = 0; i < n; ++i) {
    auto rec = r.tensor();
    const auto colon = rec.name.find(':');
    if (colon == std::string::npos || rec.name.substr(colon + 1) != std::to_string(i)) {
      throw FormatError(what + ": record " + std::to_string(i) + " has unexpected name '" + rec.name + "'");
    }
    const auto method = rec.name.substr(0, colon);
    if (i == 0) {
      try {
        ps.method = parse_method(method);
      } catch (const ConfigError&) {
        throw FormatError(what + ": unknown method tag '" + method + "'");
      }
      if (rec.shape.size() != 3) throw FormatError(what + ": per-example tensors must be C x H x W");
      ps.example_shape = rec.shape;
      ps.values.reserve(static_cast<std::size_t>(n) * shape_numel(rec.shape));
    } else if (rec.shape != ps.example_shape || method != method_name(ps.method)) {
      throw FormatError(what + ": record " + rec.name + " does not match the first record");
    }
    for (double v : rec.values) {
      if (!(std::abs(v) <= ps.epsilon)) throw FormatError(what + ": record " + rec.name + " exceeds the budget");
    }
    ps.values.insert(ps.values.end(), rec.values.begin(), rec.values.end());
  }
  r.expect_end();
  return ps;
}

}  // namespace ueforge
