#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ueforge/model.hpp"
#include "ueforge/tensor.hpp"

namespace ueforge::diag {

struct ScalarResult {
  double value = 0.0;
  bool degenerate = false;
};

// <a,b> / (|a| |b|); zero norm gives 0 with the degenerate flag set.
ScalarResult cosine(std::span<const double> a, std::span<const double> b);
// |perturbed - clean| / |clean|; zero clean norm gives +inf with the flag set.
ScalarResult transfer_rate(std::span<const double> clean, std::span<const double> perturbed);

// Per-stage cosine similarity for stages S1..S4.
struct ConsistencyCurve {
  std::vector<std::size_t> stages;
  std::vector<double> values;
  std::vector<bool> degenerate;
};

// Features are compared on the whole batch, flattened. x + delta is not clamped.
ConsistencyCurve cosine_similarity(const StagedNet& net, const Tensor& x, const Tensor& delta);

// Perturbation transfer rate at tap `stage` (0 = stem, 1..4 = S1..S4).
ScalarResult ptr(const StagedNet& net, const Tensor& x, const Tensor& delta, std::size_t stage);

// Phi_stage(x + delta) - Phi_stage(x).
Tensor feature_residual(const StagedNet& net, const Tensor& x, const Tensor& delta, std::size_t stage);

// |DFT(z)|^2 with the unnormalized forward transform and DC at (0,0).
// Accepts [H,W], [C,H,W] or [1,C,H,W]; channels are averaged first.
Tensor power_spectrum_2d(const Tensor& z);

struct SpectralProfile {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> power;         // mean power per radial bin
  std::vector<std::size_t> counts;   // spectrum entries per bin

  std::size_t bins() const { return power.size(); }
};

// floor(min(H,W)/2) + 1 bins.
std::size_t radial_bin_count(std::size_t height, std::size_t width);
// Bin of spectrum entry (row u, column v): round(sqrt(fu^2 + fv^2)) with signed
// frequencies, entries past the last ring folded into it.
std::size_t radial_bin(std::size_t u, std::size_t v, std::size_t height, std::size_t width);

SpectralProfile radial_psd(const Tensor& z);
// Bin-wise mean of per-image profiles over a [N,C,H,W] batch.
SpectralProfile mean_radial_psd(const Tensor& images);

// log2(P_delta(f) / P_x(f)); bins where either side is not strictly positive
// are left empty.
std::vector<std::optional<double>> relative_spectral_density(const SpectralProfile& p_delta,
                                                             const SpectralProfile& p_x);

struct MetricRecord {
  std::string run_id;
  std::string metric;
  std::string stage_or_bin;
  double value = 0.0;
};

std::string format_metric_csv(std::span<const MetricRecord> records);
void write_metric_csv(const std::string& path, std::span<const MetricRecord> records);

}  // namespace ueforge::diag
