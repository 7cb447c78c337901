#include "ueforge/runspec.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <sstream>

#include "ueforge/errors.hpp"
#include "ueforge/io.hpp"

namespace ueforge {

namespace {

std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

bool valid_key(std::string_view k) {
  if (k.empty()) return false;
  return std::all_of(k.begin(), k.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' || c == '.' || c == '-';
  });
}

std::vector<std::string> split_alternatives(std::string_view value) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto bar = value.find('|', start);
    out.push_back(trim(value.substr(start, bar == std::string_view::npos ? std::string_view::npos : bar - start)));
    if (bar == std::string_view::npos) break;
    start = bar + 1;
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join(const std::vector<std::size_t>& xs, char sep) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += sep;
    s += std::to_string(xs[i]);
  }
  return s;
}

template <typename T>
T parse_int(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  if (v.empty()) throw ConfigError("key '" + key + "': expected a number");
  // Accept "a/b" so budgets can be written as 8/255.
  if (const auto slash = v.find('/'); slash != std::string::npos) {
    return parse_real(key, trim(v.substr(0, slash))) / parse_real(key, trim(v.substr(slash + 1)));
  }
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (end != v.c_str() + v.size()) throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "on" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "off" || v == "0" || v == "no") return false;
  throw ConfigError("key '" + key + "': expected a boolean, got '" + v + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  if (v.empty() || v == "none" || v == "-") return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int<std::size_t>(key, trim(item)));
  return out;
}

FreezeMask parse_mask(const std::string& key, const std::string& v) {
  try {
    return FreezeMask::parse(v);
  } catch (const InputError& e) {
    throw ConfigError("key '" + key + "': " + e.what());
  }
}

using Setter = std::function<void(RunSpec&, const std::string&, const std::string&)>;

void set_schedule(TrainConfig& t, const std::string& field, const std::string& key, const std::string& v) {
  if (field == "epochs") t.epochs = parse_int<std::size_t>(key, v);
  else if (field == "batch") t.batch_size = parse_int<std::size_t>(key, v);
  else if (field == "lr") t.lr = parse_real(key, v);
  else if (field == "decay_epochs") t.decay_epochs = parse_list(key, v);
  else if (field == "decay_factor") t.decay_factor = parse_real(key, v);
  else if (field == "momentum") t.momentum = parse_real(key, v);
  else if (field == "weight_decay") t.weight_decay = parse_real(key, v);
  else throw ConfigError("unknown key '" + key + "'");
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> m;
    m["name"] = [](RunSpec& s, const std::string&, const std::string& v) { s.name = v; };
    m["out_dir"] = [](RunSpec& s, const std::string&, const std::string& v) { s.out_dir = v; };
    m["data.seed"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.data.seed = parse_int<std::uint64_t>(k, v); };
    m["data.classes"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.data.classes = parse_int<std::size_t>(k, v); };
    m["data.n_train"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.data.n_train = parse_int<std::size_t>(k, v); };
    m["data.n_test"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.data.n_test = parse_int<std::size_t>(k, v); };
    m["data.image_size"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.data.image_size = parse_int<std::size_t>(k, v); };
    m["data.family"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.data.family = parse_int<int>(k, v); };
    m["data.noise_sigma"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.data.noise_sigma = parse_real(k, v); };
    m["pretrain.family"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.pretrain_family = parse_int<int>(k, v); };
    m["pretrain.seed"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.pretrain_seed = parse_int<std::uint64_t>(k, v); };
    m["method"] = [](RunSpec& s, const std::string&, const std::string& v) { s.method = parse_ue_source(v); };
    m["gen.epsilon"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.gen.epsilon = parse_real(k, v); };
    m["gen.inner_steps"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.gen.inner_steps = parse_int<std::size_t>(k, v); };
    m["gen.eta"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.gen.eta = parse_real(k, v); };
    m["gen.alpha"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.gen.alpha = parse_real(k, v); };
    m["gen.epochs"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.gen.epochs = parse_int<std::size_t>(k, v); };
    m["gen.batch"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.gen.batch_size = parse_int<std::size_t>(k, v); };
    m["gen.lambda"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.gen.lambda = parse_real(k, v); };
    m["gen.surrogate_freeze"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.gen.surrogate_freeze = parse_mask(k, v); };
    m["gen.reference"] = [](RunSpec& s, const std::string&, const std::string& v) { s.gen.reference_path = v; };
    m["gen.align_stages"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.gen.align_stages = parse_list(k, v); };
    m["gen.seed"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.gen.seed = parse_int<std::uint64_t>(k, v); };
    m["reference.family"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.reference_family = parse_int<int>(k, v); };
    m["reference.seed"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.reference_seed = parse_int<std::uint64_t>(k, v); };
    m["paradigm"] = [](RunSpec& s, const std::string&, const std::string& v) { s.paradigm = parse_paradigm(v); };
    m["freeze"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.train.freeze = parse_mask(k, v); };
    m["lambda_sf"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.train.lambda_sf = parse_real(k, v); };
    m["aux_stages"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.train.aux_stages = parse_list(k, v); };
    m["seed"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.train.seed = parse_int<std::uint64_t>(k, v); };
    m["diagnostics"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.diagnostics = parse_bool(k, v); };
    m["diag.examples"] = [](RunSpec& s, const std::string& k, const std::string& v) { s.diag_examples = parse_int<std::size_t>(k, v); };
    for (const char* f : {"epochs", "batch", "lr", "decay_epochs", "decay_factor", "momentum", "weight_decay"}) {
      const std::string field = f;
      m["train." + field] = [field](RunSpec& s, const std::string& k, const std::string& v) { set_schedule(s.train, field, k, v); };
      m["pretrain." + field] = [field](RunSpec& s, const std::string& k, const std::string& v) { set_schedule(s.pretrain, field, k, v); };
    }
    return m;
  }();
  return table;
}

RunSpec default_spec() {
  RunSpec s;
  s.pretrain.seed = s.pretrain_seed;
  return s;
}

}  // namespace

SpecText parse_spec_text(std::string_view text) {
  SpecText out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string content = trim(line);
    if (content.empty()) continue;
    const auto eq = content.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = trim(std::string_view(content).substr(0, eq));
    const std::string value = trim(std::string_view(content).substr(eq + 1));
    if (!valid_key(key)) throw ConfigError("line " + std::to_string(line_no) + ": invalid key '" + key + "'");
    if (out.entries.count(key)) throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
    out.entries[key] = split_alternatives(value);
    out.order.push_back(key);
  }
  return out;
}

SpecText read_spec_file(const std::string& path) {
  try {
    return parse_spec_text(io::read_file(path));
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

std::string_view ue_source_name(UeSource s) {
  switch (s) {
    case UeSource::None: return "none";
    case UeSource::Emn: return "emn";
    case UeSource::Ssc: return "ssc";
  }
  return "?";
}

UeSource parse_ue_source(std::string_view name) {
  if (name == "none" || name == "clean") return UeSource::None;
  if (name == "emn") return UeSource::Emn;
  if (name == "ssc") return UeSource::Ssc;
  throw ConfigError("unknown method '" + std::string(name) + "' (expected none, emn or ssc)");
}

RunSpec spec_from_text(const SpecText& text) {
  RunSpec s = default_spec();
  bool freeze_given = false;
  for (const auto& key : text.order) {
    const auto& values = text.entries.at(key);
    if (values.size() != 1) throw ConfigError("key '" + key + "' has grid alternatives; use expand_grid");
    const auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError("unknown key '" + key + "'");
    it->second(s, key, values.front());
    freeze_given |= key == "freeze";
  }
  s.pretrain.seed = s.pretrain_seed;
  s.train.paradigm = s.paradigm;
  if (!freeze_given && s.paradigm != Paradigm::Scratch) s.train.freeze = FreezeMask{Component::Stem, Component::S1};
  return s;
}

std::vector<RunSpec> expand_grid(const SpecText& text) {
  std::vector<SpecText> cells{SpecText{}};
  for (const auto& key : text.order) {
    std::vector<SpecText> next;
    for (const auto& cell : cells) {
      for (const auto& alt : text.entries.at(key)) {
        SpecText c = cell;
        c.entries[key] = {alt};
        c.order.push_back(key);
        next.push_back(std::move(c));
      }
    }
    cells = std::move(next);
  }
  std::vector<RunSpec> out;
  for (const auto& c : cells) out.push_back(spec_from_text(c));
  return out;
}

void RunSpec::validate() const {
  try {
    train.validate();
    pretrain.validate();
    if (method != UeSource::None) gen.validate();
  } catch (const InputError& e) {
    throw ConfigError(e.what());
  }
  if (data.family < 0 || data.family >= kNumFamilies) throw ConfigError("data.family must be in [0,2]");
  if (pretrain_family < 0 || pretrain_family >= kNumFamilies) throw ConfigError("pretrain.family must be in [0,2]");
  if (reference_family < 0 || reference_family >= kNumFamilies) throw ConfigError("reference.family must be in [0,2]");
  if (data.image_size % 8 != 0) throw ConfigError("data.image_size must be a multiple of 8");
  if (train.lambda_sf < 0.0) throw ConfigError("lambda_sf must be >= 0");
  if (paradigm == Paradigm::Pretrain || paradigm == Paradigm::SfPretrain) {
    throw ConfigError("paradigm must be scratch, pf or sf-pf for a run");
  }
  for (auto st : train.aux_stages) {
    if (st < 1 || st > kNumStages) throw ConfigError("aux_stages must lie in 1..4");
  }
  if (!gen.reference_path.empty() && !std::filesystem::exists(gen.reference_path)) {
    throw ConfigError("reference checkpoint '" + gen.reference_path + "' does not exist");
  }
  if (diag_examples == 0) throw ConfigError("diag.examples must be >= 1");
}

std::string RunSpec::canonical() const {
  std::map<std::string, std::string> kv;
  kv["name"] = name;
  kv["data.seed"] = std::to_string(data.seed);
  kv["data.classes"] = std::to_string(data.classes);
  kv["data.n_train"] = std::to_string(data.n_train);
  kv["data.n_test"] = std::to_string(data.n_test);
  kv["data.image_size"] = std::to_string(data.image_size);
  kv["data.family"] = std::to_string(data.family);
  kv["data.noise_sigma"] = fmt(data.noise_sigma);
  kv["pretrain.family"] = std::to_string(pretrain_family);
  kv["pretrain.seed"] = std::to_string(pretrain_seed);
  kv["method"] = std::string(ue_source_name(method));
  if (method != UeSource::None) {
    kv["gen.epsilon"] = fmt(gen.epsilon);
    kv["gen.inner_steps"] = std::to_string(gen.inner_steps);
    kv["gen.eta"] = fmt(gen.outer_step());
    kv["gen.alpha"] = fmt(gen.alpha);
    kv["gen.epochs"] = std::to_string(gen.epochs);
    kv["gen.batch"] = std::to_string(gen.batch_size);
    kv["gen.surrogate_freeze"] = gen.surrogate_freeze.to_string();
    kv["gen.seed"] = std::to_string(gen.seed);
    if (method == UeSource::Ssc) {
      kv["gen.lambda"] = fmt(gen.lambda);
      kv["gen.reference"] = gen.reference_path;
      kv["gen.align_stages"] = join(gen.align_stages, ',');
      kv["reference.family"] = std::to_string(reference_family);
      kv["reference.seed"] = std::to_string(reference_seed);
    }
  }
  kv["paradigm"] = std::string(paradigm_name(paradigm));
  kv["freeze"] = train.freeze.to_string();
  kv["lambda_sf"] = fmt(train.lambda_sf);
  kv["aux_stages"] = join(train.aux_stages, ',');
  kv["seed"] = std::to_string(train.seed);
  kv["diagnostics"] = diagnostics ? "true" : "false";
  kv["diag.examples"] = std::to_string(diag_examples);
  for (const auto& [prefix, t] : {std::pair<std::string, const TrainConfig*>{"train.", &train}, {"pretrain.", &pretrain}}) {
    kv[prefix + "epochs"] = std::to_string(t->epochs);
    kv[prefix + "batch"] = std::to_string(t->batch_size);
    kv[prefix + "lr"] = fmt(t->lr);
    kv[prefix + "decay_epochs"] = join(t->decay_epochs, ',');
    kv[prefix + "decay_factor"] = fmt(t->decay_factor);
    kv[prefix + "momentum"] = fmt(t->momentum);
    kv[prefix + "weight_decay"] = fmt(t->weight_decay);
  }
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string RunSpec::run_id() const { return hex64(fnv1a64(canonical())); }

void apply_env_overrides(RunSpec& spec) {
  if (const char* env = std::getenv("UEFORGE_SEED"); env && *env) {
    spec.train.seed = parse_int<std::uint64_t>("UEFORGE_SEED", env);
  }
}

}  // namespace ueforge
