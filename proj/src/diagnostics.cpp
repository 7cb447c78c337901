#include "ueforge/diagnostics.hpp"

#include <cmath>
#include <complex>
#include <limits>
#include <numbers>

#include "ueforge/errors.hpp"
#include "ueforge/io.hpp"
#include "ueforge/ops.hpp"

namespace ueforge::diag {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void require_same_shape(const Tensor& x, const Tensor& delta) {
  if (x.shape() != delta.shape()) {
    throw DimensionError("perturbation shape " + shape_to_string(delta.shape()) + " does not match input " +
                         shape_to_string(x.shape()));
  }
}

Tensor perturbed(const Tensor& x, const Tensor& delta) {
  require_same_shape(x, delta);
  return ops::add(x, delta);
}

Tensor tap(const StagedNet& net, const Tensor& x, std::size_t stage) {
  if (stage > kNumStages) throw InputError("stage index must be in [0,4]");
  Tensor h = x;
  for (std::size_t k = 0; k <= stage; ++k) h = net.run_block(k, h);
  return h;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

ScalarResult cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine: vector lengths differ");
  const double na = std::sqrt(dot(a, a));
  const double nb = std::sqrt(dot(b, b));
  if (na == 0.0 || nb == 0.0) return {0.0, true};
  return {std::clamp(dot(a, b) / (na * nb), -1.0, 1.0), false};
}

ScalarResult transfer_rate(std::span<const double> clean, std::span<const double> perturbed_features) {
  if (clean.size() != perturbed_features.size()) throw DimensionError("transfer rate: vector lengths differ");
  const double nc = std::sqrt(dot(clean, clean));
  if (nc == 0.0) return {std::numeric_limits<double>::infinity(), true};
  double d = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const double t = perturbed_features[i] - clean[i];
    d += t * t;
  }
  return {std::sqrt(d) / nc, false};
}

ConsistencyCurve cosine_similarity(const StagedNet& net, const Tensor& x, const Tensor& delta) {
  NoGradGuard no_grad;
  const auto clean = net.forward(x, true).taps;
  const auto pert = net.forward(perturbed(x, delta), true).taps;
  ConsistencyCurve curve;
  for (std::size_t s = 1; s <= kNumStages; ++s) {
    // Identical inputs give exactly 1 even when rounding would not.
    const bool same = std::equal(delta.data().begin(), delta.data().end(), delta.data().begin(),
                                 [](double a, double) { return a == 0.0; });
    auto r = cosine((*clean)[s].data(), (*pert)[s].data());
    if (same && !r.degenerate) r.value = 1.0;
    curve.stages.push_back(s);
    curve.values.push_back(r.value);
    curve.degenerate.push_back(r.degenerate);
  }
  return curve;
}

ScalarResult ptr(const StagedNet& net, const Tensor& x, const Tensor& delta, std::size_t stage) {
  NoGradGuard no_grad;
  const Tensor a = tap(net, x, stage);
  const Tensor b = tap(net, perturbed(x, delta), stage);
  return transfer_rate(a.data(), b.data());
}

Tensor feature_residual(const StagedNet& net, const Tensor& x, const Tensor& delta, std::size_t stage) {
  NoGradGuard no_grad;
  const Tensor a = tap(net, x, stage);
  const Tensor b = tap(net, perturbed(x, delta), stage);
  return ops::sub(b, a);
}

Tensor power_spectrum_2d(const Tensor& z) {
  const auto& s = z.shape();
  std::size_t C = 1, H = 0, W = 0;
  if (s.size() == 2) {
    H = s[0];
    W = s[1];
  } else if (s.size() == 3) {
    C = s[0];
    H = s[1];
    W = s[2];
  } else if (s.size() == 4 && s[0] == 1) {
    C = s[1];
    H = s[2];
    W = s[3];
  } else {
    throw DimensionError("power spectrum expects [H,W], [C,H,W] or [1,C,H,W], got " + shape_to_string(s));
  }
  if (H < 2 || W < 2) throw DimensionError("power spectrum needs H,W >= 2");

  const auto src = z.data();
  std::vector<std::complex<double>> a(H * W);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < H * W; ++i) a[i] += src[c * H * W + i];
  }
  for (auto& v : a) v /= static_cast<double>(C);

  auto twiddles = [](std::size_t n) {
    std::vector<std::complex<double>> t(n);
    for (std::size_t k = 0; k < n; ++k) t[k] = std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n));
    return t;
  };
  const auto tw = twiddles(W);
  const auto th = twiddles(H);

  std::vector<std::complex<double>> rows(H * W);
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t v = 0; v < W; ++v) {
      std::complex<double> acc = 0.0;
      for (std::size_t x = 0; x < W; ++x) acc += a[y * W + x] * tw[(v * x) % W];
      rows[y * W + v] = acc;
    }
  }
  std::vector<double> out(H * W);
  for (std::size_t v = 0; v < W; ++v) {
    for (std::size_t u = 0; u < H; ++u) {
      std::complex<double> acc = 0.0;
      for (std::size_t y = 0; y < H; ++y) acc += rows[y * W + v] * th[(u * y) % H];
      out[u * W + v] = std::norm(acc);
    }
  }
  return Tensor({H, W}, std::move(out));
}

std::size_t radial_bin_count(std::size_t height, std::size_t width) { return std::min(height, width) / 2 + 1; }

std::size_t radial_bin(std::size_t u, std::size_t v, std::size_t height, std::size_t width) {
  auto signed_freq = [](std::size_t k, std::size_t n) {
    return k <= n / 2 ? static_cast<double>(k) : static_cast<double>(k) - static_cast<double>(n);
  };
  const double fu = signed_freq(u, height);
  const double fv = signed_freq(v, width);
  const auto r = static_cast<std::size_t>(std::llround(std::sqrt(fu * fu + fv * fv)));
  return std::min(r, radial_bin_count(height, width) - 1);
}

SpectralProfile radial_psd(const Tensor& z) {
  const Tensor p = power_spectrum_2d(z);
  const std::size_t H = p.dim(0), W = p.dim(1);
  SpectralProfile prof;
  prof.height = H;
  prof.width = W;
  prof.power.assign(radial_bin_count(H, W), 0.0);
  prof.counts.assign(prof.power.size(), 0);
  const auto d = p.data();
  for (std::size_t u = 0; u < H; ++u) {
    for (std::size_t v = 0; v < W; ++v) {
      const auto b = radial_bin(u, v, H, W);
      prof.power[b] += d[u * W + v];
      ++prof.counts[b];
    }
  }
  for (std::size_t b = 0; b < prof.power.size(); ++b) {
    if (prof.counts[b]) prof.power[b] /= static_cast<double>(prof.counts[b]);
  }
  return prof;
}

SpectralProfile mean_radial_psd(const Tensor& images) {
  if (images.rank() != 4) throw DimensionError("mean_radial_psd expects [N,C,H,W]");
  const std::size_t N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  const std::size_t D = C * H * W;
  SpectralProfile acc;
  for (std::size_t n = 0; n < N; ++n) {
    const auto src = images.data().subspan(n * D, D);
    const auto prof = radial_psd(Tensor({C, H, W}, std::vector<double>(src.begin(), src.end())));
    if (n == 0) {
      acc = prof;
    } else {
      for (std::size_t b = 0; b < acc.power.size(); ++b) acc.power[b] += prof.power[b];
    }
  }
  for (auto& v : acc.power) v /= static_cast<double>(N);
  return acc;
}

std::vector<std::optional<double>> relative_spectral_density(const SpectralProfile& p_delta,
                                                             const SpectralProfile& p_x) {
  if (p_delta.bins() != p_x.bins()) {
    throw InputError("spectral profiles have " + std::to_string(p_delta.bins()) + " and " +
                     std::to_string(p_x.bins()) + " bins");
  }
  std::vector<std::optional<double>> out(p_delta.bins());
  for (std::size_t b = 0; b < out.size(); ++b) {
    if (p_delta.power[b] > 0.0 && p_x.power[b] > 0.0) out[b] = std::log2(p_delta.power[b] / p_x.power[b]);
  }
  return out;
}

std::string format_metric_csv(std::span<const MetricRecord> records) {
  std::string out = "run_id,metric,stage_or_bin,value\n";
  for (const auto& r : records) {
    out += r.run_id + "," + r.metric + "," + r.stage_or_bin + "," + format_double(r.value) + "\n";
  }
  return out;
}

void write_metric_csv(const std::string& path, std::span<const MetricRecord> records) {
  io::write_file_atomic(path, format_metric_csv(records));
}

}  // namespace ueforge::diag
