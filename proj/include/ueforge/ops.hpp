#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

#include "ueforge/tensor.hpp"

// Differentiable primitives. Every function records a graph node when any
// input requires a gradient and recording is enabled.
namespace ueforge::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_squares(const Tensor& a);

Tensor relu(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
// [B, ...] -> [B, prod(...)]
Tensor flatten(const Tensor& x);

// Cross-correlation of x[B,C,H,W] with kernel[F,C,k,k]; output [B,F,H',W'] with
// H' = (H + 2*padding - k) / stride + 1. Zero padding.
Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t padding);
// Same, adding bias[F] to every output position of channel f.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t padding);

// Max over square windows. The gradient goes to the first maximal element in
// row-major order within each window.
Tensor maxpool2d(const Tensor& x, std::size_t window, std::size_t stride);
Tensor avgpool2d(const Tensor& x, std::size_t window, std::size_t stride);
// [B,C,H,W] -> [B,C]
Tensor global_avg_pool(const Tensor& x);

// x[B,I] * weight[O,I]^T (+ bias[O]) -> [B,O]
Tensor linear(const Tensor& x, const Tensor& weight);
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Mean over the batch of -log softmax(logits)[label], max-subtracted.
Tensor cross_entropy(const Tensor& logits, std::span<const std::uint16_t> labels);

// Per example G = M M^T / (C*H*W) where M is the C x (H*W) flattening.
// [B,C,H,W] -> [B,C,C]
Tensor gram(const Tensor& features);

}  // namespace ueforge::ops
