#include "ueforge/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "ueforge/errors.hpp"
#include "ueforge/io.hpp"

namespace ueforge {

namespace {

constexpr std::uint16_t kDatasetVersion = 1;
constexpr int kSupersample = 4;

enum class ShapeKind {
  FilledSquare, Disc, Cross, DiagonalStripes, Triangle, HollowSquare, XMark, LShape,
  Ring, Checker, HorizontalStripes, VerticalStripes, Diamond, DotGrid, Bar, Ellipse,
};

struct ShapeInfo {
  ShapeKind kind;
  const char* name;
};

constexpr ShapeInfo kShapes[] = {
    {ShapeKind::FilledSquare, "filled-square"},
    {ShapeKind::Disc, "disc"},
    {ShapeKind::Cross, "cross"},
    {ShapeKind::DiagonalStripes, "diagonal-stripes"},
    {ShapeKind::Triangle, "triangle"},
    {ShapeKind::HollowSquare, "hollow-square"},
    {ShapeKind::XMark, "x-mark"},
    {ShapeKind::LShape, "l-shape"},
    {ShapeKind::Ring, "ring"},
    {ShapeKind::Checker, "checker"},
    {ShapeKind::HorizontalStripes, "horizontal-stripes"},
    {ShapeKind::VerticalStripes, "vertical-stripes"},
    {ShapeKind::Diamond, "diamond"},
    {ShapeKind::DotGrid, "dot-grid"},
    {ShapeKind::Bar, "bar"},
    {ShapeKind::Ellipse, "ellipse"},
};

std::vector<int> family_members(int family) {
  switch (family) {
    case 0: return {0, 1, 2, 3, 4, 5, 6, 7};
    case 1: return {8, 9, 10, 11, 12, 13, 14, 15};
    case 2: return {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15};
    default: throw InputError("unknown shape family " + std::to_string(family));
  }
}

bool even_cell(double t) { return static_cast<long>(std::floor(t)) % 2 == 0; }

// Membership test in shape-normalized coordinates: radius 1, `period` is the
// texture period in the same units.
bool inside(ShapeKind kind, double u, double v, double period) {
  const double au = std::abs(u), av = std::abs(v);
  const bool in_square = au <= 1.0 && av <= 1.0;
  switch (kind) {
    case ShapeKind::FilledSquare: return in_square;
    case ShapeKind::Disc: return u * u + v * v <= 1.0;
    case ShapeKind::Cross: return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);
    case ShapeKind::DiagonalStripes: return in_square && even_cell((u + v) / period);
    case ShapeKind::Triangle: return v >= -1.0 && v <= 1.0 && au <= (v + 1.0) / 2.0;
    case ShapeKind::HollowSquare: return in_square && !(au <= 0.55 && av <= 0.55);
    case ShapeKind::XMark: return in_square && (std::abs(u - v) <= 0.4 || std::abs(u + v) <= 0.4);
    case ShapeKind::LShape: return in_square && (v >= 0.4 || u <= -0.4);
    case ShapeKind::Ring: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
    case ShapeKind::Checker: return in_square && (even_cell(u / period) == even_cell(v / period));
    case ShapeKind::HorizontalStripes: return in_square && even_cell(v / period);
    case ShapeKind::VerticalStripes: return in_square && even_cell(u / period);
    case ShapeKind::Diamond: return au + av <= 1.0;
    case ShapeKind::DotGrid: {
      if (!in_square) return false;
      const double cu = u / period - std::round(u / period);
      const double cv = v / period - std::round(v / period);
      return cu * cu + cv * cv <= 0.3 * 0.3;
    }
    case ShapeKind::Bar: return au <= 1.0 && av <= 0.35;
    case ShapeKind::Ellipse: return u * u + 4.0 * v * v <= 1.0;
  }
  return false;
}

void render(ShapeKind kind, std::size_t size, double noise_sigma, std::mt19937_64& rng, double* out) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double s = static_cast<double>(size);
  const double radius = s * (0.26 + 0.08 * unit(rng));
  const double cx = s / 2.0 + s * 0.08 * (2.0 * unit(rng) - 1.0);
  const double cy = s / 2.0 + s * 0.08 * (2.0 * unit(rng) - 1.0);
  const double angle = (std::numbers::pi / 12.0) * (2.0 * unit(rng) - 1.0);
  // Low contrast on a mid-grey background: the class signal is weak enough
  // for a bounded perturbation to compete with it.
  const double bg = 0.325 + 0.05 * unit(rng);
  const double fg = bg + 0.08 + 0.12 * unit(rng);
  const double period = (2.5 + 1.5 * unit(rng)) / radius;
  const double ca = std::cos(angle), sa = std::sin(angle);
  std::normal_distribution<double> noise(0.0, noise_sigma);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      int hits = 0;
      for (int i = 0; i < kSupersample; ++i) {
        for (int j = 0; j < kSupersample; ++j) {
          const double px = static_cast<double>(x) + (j + 0.5) / kSupersample - cx;
          const double py = static_cast<double>(y) + (i + 0.5) / kSupersample - cy;
          const double u = (ca * px + sa * py) / radius;
          const double v = (-sa * px + ca * py) / radius;
          hits += inside(kind, u, v, period) ? 1 : 0;
        }
      }
      const double cover = static_cast<double>(hits) / (kSupersample * kSupersample);
      const double value = bg + (fg - bg) * cover + noise(rng);
      out[y * size + x] = std::clamp(value, 0.0, 1.0);
    }
  }
}

Dataset render_split(const DataGenConfig& cfg, const std::vector<int>& members, std::size_t n, std::uint64_t stream,
                     const char* split) {
  Dataset d;
  d.channels = 1;
  d.height = d.width = cfg.image_size;
  d.classes = cfg.classes;
  d.split = split;
  d.seed = cfg.seed;
  d.family = cfg.family;
  d.images.resize(n * d.image_numel());
  d.labels.resize(n);
  std::seed_seq seq{cfg.seed, static_cast<std::uint64_t>(cfg.family), stream};
  std::mt19937_64 rng(seq);
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<std::uint16_t>(i % cfg.classes);
    d.labels[i] = label;
    render(kShapes[members[label]].kind, cfg.image_size, cfg.noise_sigma, rng, d.images.data() + i * d.image_numel());
  }
  return d;
}

}  // namespace

std::span<const double> Dataset::image(std::size_t i) const {
  if (i >= size()) throw InputError("image index " + std::to_string(i) + " out of range");
  return std::span<const double>(images).subspan(i * image_numel(), image_numel());
}

Tensor Dataset::batch(std::span<const std::size_t> indices) const {
  const std::size_t d = image_numel();
  std::vector<double> out(indices.size() * d);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto img = image(indices[k]);
    std::copy(img.begin(), img.end(), out.begin() + static_cast<std::ptrdiff_t>(k * d));
  }
  return Tensor({indices.size(), channels, height, width}, std::move(out));
}

std::vector<std::uint16_t> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<std::uint16_t> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

Tensor Dataset::all_images() const { return Tensor({size(), channels, height, width}, images); }

void Dataset::validate() const {
  if (labels.empty()) throw InputError("dataset is empty");
  if (images.size() != labels.size() * image_numel()) throw InputError("dataset image buffer does not match N*C*H*W");
  for (auto y : labels) {
    if (y >= classes) throw InputError("dataset label " + std::to_string(y) + " outside [0," + std::to_string(classes) + ")");
  }
  for (double v : images) {
    if (!(v >= 0.0 && v <= 1.0)) throw InputError("dataset pixel outside [0,1]");
  }
}

std::vector<std::string> family_shapes(int family) {
  std::vector<std::string> out;
  for (int m : family_members(family)) out.emplace_back(kShapes[m].name);
  return out;
}

DataSplit gen_data(const DataGenConfig& cfg) {
  const auto members = family_members(cfg.family);
  if (cfg.classes < 2 || cfg.classes > 16) throw InputError("class count must be in [2,16]");
  if (cfg.classes > members.size()) {
    throw InputError("family " + std::to_string(cfg.family) + " has only " + std::to_string(members.size()) +
                     " shape classes, requested " + std::to_string(cfg.classes));
  }
  if (cfg.image_size < 16 || cfg.image_size > 32) throw InputError("image size must be in [16,32]");
  if (cfg.n_train == 0 || cfg.n_test == 0) throw InputError("split sizes must be positive");
  if (cfg.noise_sigma < 0.0) throw InputError("noise sigma must be non-negative");
  DataSplit split;
  split.train = render_split(cfg, members, cfg.n_train, 0, "train");
  split.test = render_split(cfg, members, cfg.n_test, 1, "test");
  return split;
}

void save_dataset(const Dataset& data, const std::string& path) {
  data.validate();
  io::ByteWriter w;
  w.bytes("UEDS");
  w.u16(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(data.size()));
  w.u32(static_cast<std::uint32_t>(data.channels));
  w.u32(static_cast<std::uint32_t>(data.height));
  w.u32(static_cast<std::uint32_t>(data.width));
  w.u16(static_cast<std::uint16_t>(data.classes));
  w.f64s(data.images);
  for (auto y : data.labels) w.u16(y);
  io::write_file_atomic(path, w.buffer());
}

Dataset load_dataset(const std::string& path) {
  io::ByteReader r(io::read_file(path), "dataset " + path);
  r.expect_magic("UEDS");
  const auto version = r.u16();
  if (version != kDatasetVersion) throw FormatError("dataset " + path + ": unsupported version " + std::to_string(version));
  Dataset d;
  const auto n = r.u32();
  d.channels = r.u32();
  d.height = r.u32();
  d.width = r.u32();
  d.classes = r.u16();
  if (n == 0 || d.channels == 0 || d.height == 0 || d.width == 0) throw FormatError("dataset " + path + ": zero extent");
  d.images.resize(static_cast<std::size_t>(n) * d.image_numel());
  r.f64s(d.images);
  d.labels.resize(n);
  for (auto& y : d.labels) y = r.u16();
  r.expect_end();
  try {
    d.validate();
  } catch (const InputError& e) {
    throw FormatError("dataset " + path + ": " + e.what());
  }
  return d;
}

}  // namespace ueforge
