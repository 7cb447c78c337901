#include "ueforge/model.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <random>
#include <sstream>

#include "ueforge/errors.hpp"
#include "ueforge/io.hpp"
#include "ueforge/ops.hpp"

namespace ueforge {

namespace {

constexpr std::size_t kKernel = 3;
constexpr std::uint16_t kCheckpointVersion = 1;
// Aux heads draw from their own stream so attaching them never perturbs the
// trunk initialization.
constexpr std::uint64_t kAuxSeedSalt = 0x9e3779b97f4a7c15ULL;

Tensor uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

std::string_view component_name(Component c) {
  switch (c) {
    case Component::Stem: return "stem";
    case Component::S1: return "S1";
    case Component::S2: return "S2";
    case Component::S3: return "S3";
    case Component::S4: return "S4";
    case Component::Head: return "head";
  }
  return "?";
}

Component parse_component(std::string_view name) {
  const auto n = lower(name);
  if (n == "stem") return Component::Stem;
  if (n == "s1") return Component::S1;
  if (n == "s2") return Component::S2;
  if (n == "s3") return Component::S3;
  if (n == "s4") return Component::S4;
  if (n == "head" || n == "fc") return Component::Head;
  throw InputError("unknown network component '" + std::string(name) + "'");
}

FreezeMask::FreezeMask(std::initializer_list<Component> frozen) {
  for (auto c : frozen) freeze(c);
}

FreezeMask FreezeMask::parse(std::string_view text) {
  FreezeMask mask;
  std::string token;
  auto flush = [&] {
    std::string t;
    for (char c : token) {
      if (!std::isspace(static_cast<unsigned char>(c))) t.push_back(c);
    }
    token.clear();
    if (t.empty() || t == "none" || t == "-") return;
    mask.freeze(parse_component(t));
  };
  for (char c : text) {
    if (c == ',' || c == '+') {
      flush();
    } else {
      token.push_back(c);
    }
  }
  flush();
  return mask;
}

std::string FreezeMask::to_string() const {
  std::string out;
  for (std::size_t i = 0; i < kNumComponents; ++i) {
    if (!bits_.test(i)) continue;
    if (!out.empty()) out += '+';
    out += component_name(static_cast<Component>(i));
  }
  return out.empty() ? "none" : out;
}

void NetConfig::validate() const {
  if (in_channels == 0 || classes < 2) throw ConfigError("network needs >= 1 input channel and >= 2 classes");
  if (height < 8 || width < 8 || height % 8 != 0 || width % 8 != 0) {
    throw ConfigError("network input must be at least 8x8 with sides divisible by 8, got " + std::to_string(height) +
                      "x" + std::to_string(width));
  }
  for (auto w : widths) {
    if (w == 0) throw ConfigError("stage widths must be positive");
  }
}

StagedNet::StagedNet(NetConfig config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  auto make_conv = [&](std::size_t in, std::size_t out, std::size_t stride) {
    const double fan_in = static_cast<double>(in * kKernel * kKernel);
    Conv c;
    c.weight = uniform_tensor({out, in, kKernel, kKernel}, std::sqrt(6.0 / fan_in), rng);
    c.bias = Tensor::zeros({out}, true);
    c.stride = stride;
    return c;
  };
  const auto& w = config_.widths;
  blocks_[0].convs.push_back(make_conv(config_.in_channels, w[0], 1));
  blocks_[1].convs.push_back(make_conv(w[0], w[0], 1));
  blocks_[1].convs.push_back(make_conv(w[0], w[0], 1));
  for (std::size_t s = 2; s <= kNumStages; ++s) {
    blocks_[s].convs.push_back(make_conv(w[s - 2], w[s - 1], 2));
    blocks_[s].convs.push_back(make_conv(w[s - 1], w[s - 1], 1));
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(w[kNumStages - 1]));
  head_.weight = uniform_tensor({config_.classes, w[kNumStages - 1]}, bound, rng);
  head_.bias = Tensor::zeros({config_.classes}, true);
}

StagedNet StagedNet::clone() const {
  StagedNet out;
  out.config_ = config_;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    for (const auto& c : blocks_[b].convs) {
      Conv copy{c.weight.detach(), c.bias.detach(), c.stride};
      copy.weight.set_requires_grad(c.weight.requires_grad());
      copy.bias.set_requires_grad(c.bias.requires_grad());
      out.blocks_[b].convs.push_back(std::move(copy));
    }
  }
  auto copy_linear = [](const Linear& l) {
    Linear o{l.weight.detach(), l.bias.detach()};
    o.weight.set_requires_grad(l.weight.requires_grad());
    o.bias.set_requires_grad(l.bias.requires_grad());
    return o;
  };
  out.head_ = copy_linear(head_);
  for (const auto& a : aux_) out.aux_.push_back({a.stage, copy_linear(a.linear)});
  out.mask_ = mask_;
  return out;
}

void StagedNet::check_input(const Tensor& batch) const {
  if (batch.rank() != 4 || batch.dim(1) != config_.in_channels || batch.dim(2) != config_.height ||
      batch.dim(3) != config_.width) {
    throw DimensionError("network expects [B," + std::to_string(config_.in_channels) + "," +
                         std::to_string(config_.height) + "," + std::to_string(config_.width) + "], got " +
                         shape_to_string(batch.shape()));
  }
}

Tensor StagedNet::run_block(std::size_t index, const Tensor& input) const {
  Tensor h = input;
  if (index == 0) h = ops::scale(ops::add(h, Tensor::full(h.shape(), -kInputMean)), 1.0 / kInputStd);
  for (const auto& c : blocks_.at(index).convs) h = ops::relu(ops::conv2d(h, c.weight, c.bias, c.stride, 1));
  return h;
}

Tensor StagedNet::head_forward(const Tensor& s4_output) const {
  return ops::linear(ops::global_avg_pool(s4_output), head_.weight, head_.bias);
}

ForwardResult StagedNet::forward(const Tensor& batch, bool capture) const {
  check_input(batch);
  ForwardResult result;
  FeatureTaps taps;
  Tensor h = batch;
  for (std::size_t b = 0; b <= kNumStages; ++b) {
    h = run_block(b, h);
    taps[b] = h;
  }
  result.logits = head_forward(h);
  if (capture) result.taps = std::move(taps);
  return result;
}

Tensor StagedNet::forward_from(std::size_t k, const Tensor& tap) const {
  if (k > kNumStages) throw UsageError("forward_from: tap index must be in [0,4]");
  Tensor h = tap;
  for (std::size_t b = k + 1; b <= kNumStages; ++b) h = run_block(b, h);
  return head_forward(h);
}

void StagedNet::attach_aux_heads(const std::vector<std::size_t>& stages, std::uint64_t seed) {
  aux_.clear();
  if (stages.size() > kNumStages) throw ConfigError("at most one aux head per stage");
  std::mt19937_64 rng(seed ^ kAuxSeedSalt);
  for (auto s : stages) {
    if (s < 1 || s > kNumStages) throw ConfigError("aux head stage must be in 1..4, got " + std::to_string(s));
    for (const auto& a : aux_) {
      if (a.stage == s) throw ConfigError("duplicate aux head on stage S" + std::to_string(s));
    }
    const std::size_t in = config_.widths[s - 1];
    Linear l;
    l.weight = uniform_tensor({config_.classes, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    l.bias = Tensor::zeros({config_.classes}, true);
    aux_.push_back({s, std::move(l)});
  }
}

std::vector<std::size_t> StagedNet::aux_stages() const {
  std::vector<std::size_t> out;
  for (const auto& a : aux_) out.push_back(a.stage);
  return out;
}

std::vector<Tensor> StagedNet::aux_forward(const FeatureTaps& taps) const {
  if (aux_.empty()) throw UsageError("aux_forward: no auxiliary heads configured");
  std::vector<Tensor> out;
  for (const auto& a : aux_) {
    out.push_back(ops::linear(ops::global_avg_pool(taps[a.stage]), a.linear.weight, a.linear.bias));
  }
  return out;
}

std::vector<Tensor> StagedNet::parameters_of(Component c) const {
  std::vector<Tensor> out;
  if (c == Component::Head) return {head_.weight, head_.bias};
  for (const auto& conv : blocks_[static_cast<std::size_t>(c)].convs) {
    out.push_back(conv.weight);
    out.push_back(conv.bias);
  }
  return out;
}

void StagedNet::apply_freeze(const FreezeMask& mask) {
  mask_ = mask;
  for (std::size_t i = 0; i < kNumComponents; ++i) {
    const auto c = static_cast<Component>(i);
    for (auto& p : parameters_of(c)) {
      p.set_requires_grad(!mask.frozen(c));
      if (mask.frozen(c)) p.zero_grad();
    }
  }
}

std::vector<NamedTensor> StagedNet::named_parameters(bool include_aux) const {
  std::vector<NamedTensor> out;
  auto conv_name = [](std::size_t block, std::size_t idx) {
    if (block == 0) return std::string("stem");
    return "s" + std::to_string(block) + ".conv" + std::to_string(idx + 1);
  };
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    for (std::size_t i = 0; i < blocks_[b].convs.size(); ++i) {
      out.push_back({conv_name(b, i) + ".weight", blocks_[b].convs[i].weight});
      out.push_back({conv_name(b, i) + ".bias", blocks_[b].convs[i].bias});
    }
  }
  out.push_back({"head.weight", head_.weight});
  out.push_back({"head.bias", head_.bias});
  if (include_aux) {
    for (const auto& a : aux_) {
      out.push_back({"aux.s" + std::to_string(a.stage) + ".weight", a.linear.weight});
      out.push_back({"aux.s" + std::to_string(a.stage) + ".bias", a.linear.bias});
    }
  }
  return out;
}

std::vector<Tensor> StagedNet::trainable_parameters() const {
  std::vector<Tensor> out;
  for (auto& np : named_parameters(true)) {
    if (np.tensor.requires_grad()) out.push_back(np.tensor);
  }
  return out;
}

std::size_t StagedNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& np : named_parameters(false)) n += np.tensor.numel();
  return n;
}

void StagedNet::reinit_head(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto in = config_.widths[kNumStages - 1];
  const bool trainable = !mask_.frozen(Component::Head);
  head_.weight = uniform_tensor({config_.classes, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  head_.bias = Tensor::zeros({config_.classes}, true);
  head_.weight.set_requires_grad(trainable);
  head_.bias.set_requires_grad(trainable);
}

std::vector<std::vector<double>> StagedNet::snapshot() const {
  std::vector<std::vector<double>> out;
  for (const auto& np : named_parameters(true)) out.emplace_back(np.tensor.data().begin(), np.tensor.data().end());
  return out;
}

void StagedNet::restore(const std::vector<std::vector<double>>& values) {
  auto params = named_parameters(true);
  if (params.size() != values.size()) throw UsageError("restore: snapshot layout does not match the network");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].tensor.mutable_data();
    if (dst.size() != values[i].size()) throw UsageError("restore: size mismatch for " + params[i].name);
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

void save_checkpoint(const StagedNet& net, const std::string& path) {
  const auto params = net.named_parameters(false);
  io::ByteWriter w;
  w.bytes("UEWT");
  w.u16(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& np : params) w.tensor(np.name, np.tensor.shape(), np.tensor.data());
  io::write_file_atomic(path, w.buffer());
}

namespace {
std::vector<io::TensorRecord> read_checkpoint_records(const std::string& path) {
  io::ByteReader r(io::read_file(path), "checkpoint " + path);
  r.expect_magic("UEWT");
  const auto version = r.u16();
  if (version != kCheckpointVersion) throw FormatError("checkpoint " + path + ": unsupported version " + std::to_string(version));
  const auto count = r.u32();
  std::vector<io::TensorRecord> records;
  for (std::uint32_t i = 0; i < count; ++i) records.push_back(r.tensor());
  r.expect_end();
  return records;
}
}  // namespace

void load_checkpoint(StagedNet& net, const std::string& path) {
  const auto records = read_checkpoint_records(path);
  auto params = net.named_parameters(false);
  if (records.size() != params.size()) {
    throw FormatError("checkpoint " + path + ": holds " + std::to_string(records.size()) + " tensors, network has " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (records[i].name != params[i].name) {
      throw FormatError("checkpoint " + path + ": tensor " + std::to_string(i) + " is '" + records[i].name +
                        "', expected '" + params[i].name + "'");
    }
    if (records[i].shape != params[i].tensor.shape()) {
      throw FormatError("checkpoint " + path + ": tensor '" + records[i].name + "' has shape " +
                        shape_to_string(records[i].shape) + ", network expects " +
                        shape_to_string(params[i].tensor.shape()));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].tensor.mutable_data();
    std::copy(records[i].values.begin(), records[i].values.end(), dst.begin());
  }
}

StagedNet load_network(const std::string& path, std::size_t height, std::size_t width) {
  const auto records = read_checkpoint_records(path);
  auto find = [&](const std::string& name) -> const io::TensorRecord& {
    for (const auto& r : records) {
      if (r.name == name) return r;
    }
    throw FormatError("checkpoint " + path + ": missing tensor '" + name + "'");
  };
  NetConfig cfg;
  const auto& stem = find("stem.weight");
  if (stem.shape.size() != 4) throw FormatError("checkpoint " + path + ": tensor 'stem.weight' is not rank 4");
  cfg.in_channels = stem.shape[1];
  for (std::size_t s = 1; s <= kNumStages; ++s) {
    const auto& w = find("s" + std::to_string(s) + ".conv2.weight");
    if (w.shape.size() != 4) throw FormatError("checkpoint " + path + ": malformed stage weight");
    cfg.widths[s - 1] = w.shape[0];
  }
  const auto& head = find("head.weight");
  if (head.shape.size() != 2) throw FormatError("checkpoint " + path + ": tensor 'head.weight' is not rank 2");
  cfg.classes = head.shape[0];
  cfg.height = height;
  cfg.width = width;
  StagedNet net(cfg, 0);
  load_checkpoint(net, path);
  return net;
}

}  // namespace ueforge
