#pragma once

#include <span>
#include <vector>

#include "ueforge/tensor.hpp"

namespace ueforge {

struct SgdHyper {
  double lr = 0.05;
  double momentum = 0.0;
  double weight_decay = 0.0;
};

// One velocity buffer per parameter, same length as the parameter.
using VelocityState = std::vector<std::vector<double>>;

VelocityState make_velocity(std::span<const Tensor> params);

// v <- momentum * v + grad + weight_decay * param;  param <- param - lr * v.
// A parameter without an accumulated gradient is treated as having grad 0.
// Throws UsageError when `velocity` lacks a matching slot for a parameter.
void sgd_step(std::span<Tensor> params, VelocityState& velocity, const SgdHyper& hyper);

class Sgd {
 public:
  Sgd(std::vector<Tensor> params, SgdHyper hyper);

  void step() { sgd_step(params_, velocity_, hyper_); }
  void zero_grad();
  void set_lr(double lr) { hyper_.lr = lr; }
  const SgdHyper& hyper() const { return hyper_; }
  const std::vector<Tensor>& params() const { return params_; }

 private:
  std::vector<Tensor> params_;
  VelocityState velocity_;
  SgdHyper hyper_;
};

}  // namespace ueforge
