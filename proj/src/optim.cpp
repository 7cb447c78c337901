#include "ueforge/optim.hpp"

#include <string>

#include "ueforge/errors.hpp"

namespace ueforge {

VelocityState make_velocity(std::span<const Tensor> params) {
  VelocityState v;
  v.reserve(params.size());
  for (const auto& p : params) v.emplace_back(p.numel(), 0.0);
  return v;
}

void sgd_step(std::span<Tensor> params, VelocityState& velocity, const SgdHyper& hyper) {
  if (velocity.size() != params.size()) {
    throw UsageError("sgd_step: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(velocity.size()) + " velocity slots");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& v = velocity[i];
    if (v.size() != p.numel()) throw UsageError("sgd_step: velocity slot " + std::to_string(i) + " has the wrong size");
    auto data = p.mutable_data();
    const bool has_grad = p.has_grad();
    const auto grad = has_grad ? p.grad() : std::span<const double>{};
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = has_grad ? grad[j] : 0.0;
      v[j] = hyper.momentum * v[j] + g + hyper.weight_decay * data[j];
      data[j] -= hyper.lr * v[j];
    }
  }
}

Sgd::Sgd(std::vector<Tensor> params, SgdHyper hyper)
    : params_(std::move(params)), velocity_(make_velocity(params_)), hyper_(hyper) {}

void Sgd::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace ueforge
