#include "ueforge/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "ueforge/errors.hpp"

namespace ueforge::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

using ImplPtr = std::shared_ptr<TensorImpl>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()) + " differ");
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                         shape_to_string(t.shape()));
  }
}

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t filters, k, stride, pad;
  std::size_t out_h, out_w;
  std::size_t patch() const { return channels * k * k; }
  std::size_t positions() const { return out_h * out_w; }
};

ConvGeometry conv_geometry(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  require_rank(x, 4, "conv2d", "input");
  require_rank(w, 4, "conv2d", "kernel");
  ConvGeometry g{};
  g.batch = x.dim(0);
  g.channels = x.dim(1);
  g.height = x.dim(2);
  g.width = x.dim(3);
  g.filters = w.dim(0);
  g.k = w.dim(2);
  g.stride = stride;
  g.pad = pad;
  if (w.dim(1) != g.channels) {
    throw DimensionError("conv2d: kernel axis 1 (" + std::to_string(w.dim(1)) + ") != input axis 1 (" +
                         std::to_string(g.channels) + ")");
  }
  if (w.dim(3) != g.k) throw DimensionError("conv2d: kernel axes 2 and 3 must match (square kernels)");
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  if (g.k > g.height + 2 * pad || g.k > g.width + 2 * pad) {
    throw DimensionError("conv2d: kernel extent " + std::to_string(g.k) + " exceeds padded input axes 2/3 of " +
                         shape_to_string(x.shape()));
  }
  g.out_h = (g.height + 2 * pad - g.k) / stride + 1;
  g.out_w = (g.width + 2 * pad - g.k) / stride + 1;
  return g;
}

// cols[(c*k + i)*k + j][b*P + oy*Wo + ox]
void im2col(const ConvGeometry& g, const double* x, double* cols) {
  const std::size_t cols_w = g.batch * g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.k; ++i) {
      for (std::size_t j = 0; j < g.k; ++j) {
        double* row = cols + ((c * g.k + i) * g.k + j) * cols_w;
        for (std::size_t b = 0; b < g.batch; ++b) {
          const double* plane = x + (b * g.channels + c) * g.height * g.width;
          double* dst = row + b * g.positions();
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
            double* drow = dst + oy * g.out_w;
            if (iy < 0 || iy >= static_cast<long>(g.height)) {
              std::fill(drow, drow + g.out_w, 0.0);
              continue;
            }
            const double* srow = plane + iy * g.width;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
              drow[ox] = (ix < 0 || ix >= static_cast<long>(g.width)) ? 0.0 : srow[ix];
            }
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* dx) {
  const std::size_t cols_w = g.batch * g.positions();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.k; ++i) {
      for (std::size_t j = 0; j < g.k; ++j) {
        const double* row = cols + ((c * g.k + i) * g.k + j) * cols_w;
        for (std::size_t b = 0; b < g.batch; ++b) {
          double* plane = dx + (b * g.channels + c) * g.height * g.width;
          const double* src = row + b * g.positions();
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
            if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
            double* drow = plane + iy * g.width;
            const double* srow = src + oy * g.out_w;
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + j) - static_cast<long>(g.pad);
              if (ix >= 0 && ix < static_cast<long>(g.width)) drow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }
}

Tensor conv2d_impl(const Tensor& x, const Tensor& w, const Tensor* bias, std::size_t stride, std::size_t pad) {
  const ConvGeometry g = conv_geometry(x, w, stride, pad);
  if (bias) {
    require_rank(*bias, 1, "conv2d", "bias");
    if (bias->dim(0) != g.filters) throw DimensionError("conv2d: bias axis 0 must equal kernel axis 0");
  }
  const std::size_t P = g.positions();
  const std::size_t cols_w = g.batch * P;
  auto cols = std::make_shared<std::vector<double>>(g.patch() * cols_w);
  im2col(g, x.data().data(), cols->data());

  RowMat out2(g.filters, cols_w);
  out2.noalias() = ConstMatMap(w.data().data(), g.filters, g.patch()) * ConstMatMap(cols->data(), g.patch(), cols_w);

  std::vector<double> out(g.batch * g.filters * P);
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t f = 0; f < g.filters; ++f) {
      const double bf = bias ? bias->data()[f] : 0.0;
      const double* src = out2.data() + f * cols_w + b * P;
      double* dst = out.data() + (b * g.filters + f) * P;
      for (std::size_t p = 0; p < P; ++p) dst[p] = src[p] + bf;
    }
  }

  ImplPtr xi = x.impl();
  ImplPtr wi = w.impl();
  ImplPtr bi = bias ? bias->impl() : nullptr;
  std::vector<Tensor> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return make_result({g.batch, g.filters, g.out_h, g.out_w}, std::move(out), std::move(inputs),
                     [g, cols, xi, wi, bi](const TensorImpl& o) {
                       const std::size_t P = g.positions();
                       const std::size_t cols_w = g.batch * P;
                       RowMat d2(g.filters, cols_w);
                       for (std::size_t b = 0; b < g.batch; ++b) {
                         for (std::size_t f = 0; f < g.filters; ++f) {
                           const double* src = o.grad.data() + (b * g.filters + f) * P;
                           std::copy(src, src + P, d2.data() + f * cols_w + b * P);
                         }
                       }
                       if (bi && bi->requires_grad) {
                         auto& gb = bi->grad_buffer();
                         for (std::size_t f = 0; f < g.filters; ++f) gb[f] += d2.row(f).sum();
                       }
                       if (wi->requires_grad) {
                         MatMap gw(wi->grad_buffer().data(), g.filters, g.patch());
                         gw.noalias() += d2 * ConstMatMap(cols->data(), g.patch(), cols_w).transpose();
                       }
                       if (xi->requires_grad) {
                         RowMat dcols(g.patch(), cols_w);
                         dcols.noalias() = ConstMatMap(wi->data.data(), g.filters, g.patch()).transpose() * d2;
                         col2im_add(g, dcols.data(), xi->grad_buffer().data());
                       }
                     });
}

template <typename Fn>
std::vector<double> elementwise_binary(const Tensor& a, const Tensor& b, const char* name, Fn fn) {
  require_same_shape(a, b, name);
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(ad[i], bd[i]);
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  auto plain = elementwise_binary(a, b, "add", [](double x, double y) { return x + y; });
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result(a.shape(), std::move(plain), {a, b},
                     [ai, bi](const TensorImpl& o) {
                       for (auto* in : {ai.get(), bi.get()}) {
                         if (!in->requires_grad) continue;
                         auto& g = in->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                       }
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  auto plain = elementwise_binary(a, b, "sub", [](double x, double y) { return x - y; });
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result(a.shape(), std::move(plain), {a, b},
                     [ai, bi](const TensorImpl& o) {
                       if (ai->requires_grad) {
                         auto& g = ai->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                       }
                       if (bi->requires_grad) {
                         auto& g = bi->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
                       }
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto plain = elementwise_binary(a, b, "mul", [](double x, double y) { return x * y; });
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result(a.shape(), std::move(plain), {a, b},
                     [ai, bi](const TensorImpl& o) {
                       if (ai->requires_grad) {
                         auto& g = ai->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bi->data[i];
                       }
                       if (bi->requires_grad) {
                         auto& g = bi->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * ai->data[i];
                       }
                     });
}

Tensor scale(const Tensor& a, double factor) {
  const auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * factor;
  ImplPtr ai = a.impl();
  return make_result(a.shape(), std::move(out), {a}, [ai, factor](const TensorImpl& o) {
    auto& g = ai->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factor;
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  ImplPtr ai = a.impl();
  return make_result({}, {s}, {a}, [ai](const TensorImpl& o) {
    auto& g = ai->grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum_squares(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  ImplPtr ai = a.impl();
  return make_result({}, {s}, {a}, [ai](const TensorImpl& o) {
    auto& g = ai->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * ai->data[i] * o.grad[0];
  });
}

Tensor relu(const Tensor& x) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
  ImplPtr xi = x.impl();
  return make_result(x.shape(), std::move(out), {x}, [xi](const TensorImpl& o) {
    auto& g = xi->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xi->data[i] > 0.0) g[i] += o.grad[i];
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " + shape_to_string(shape));
  }
  ImplPtr xi = x.impl();
  return make_result(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()), {x},
                     [xi](const TensorImpl& o) {
                       auto& g = xi->grad_buffer();
                       for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                     });
}

Tensor flatten(const Tensor& x) {
  if (x.rank() < 1) throw DimensionError("flatten: rank-0 input");
  const std::size_t b = x.dim(0);
  return reshape(x, {b, x.numel() / b});
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  return conv2d_impl(x, kernel, nullptr, stride, padding);
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride, std::size_t padding) {
  return conv2d_impl(x, kernel, &bias, stride, padding);
}

Tensor maxpool2d(const Tensor& x, std::size_t window, std::size_t stride) {
  require_rank(x, 4, "maxpool2d", "input");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (window == 0 || stride == 0) throw DimensionError("maxpool2d: window and stride must be positive");
  if (window > H || window > W) throw DimensionError("maxpool2d: window exceeds input axes 2/3");
  const std::size_t Ho = (H - window) / stride + 1, Wo = (W - window) / stride + 1;
  const auto xd = x.data();
  std::vector<double> out(B * C * Ho * Wo);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const std::size_t plane = bc * H * W;
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        std::size_t best = plane + (oy * stride) * W + ox * stride;
        for (std::size_t i = 0; i < window; ++i) {
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t idx = plane + (oy * stride + i) * W + ox * stride + j;
            if (xd[idx] > xd[best]) best = idx;
          }
        }
        const std::size_t o = (bc * Ho + oy) * Wo + ox;
        out[o] = xd[best];
        (*argmax)[o] = best;
      }
    }
  }
  ImplPtr xi = x.impl();
  return make_result({B, C, Ho, Wo}, std::move(out), {x}, [xi, argmax](const TensorImpl& o) {
    auto& g = xi->grad_buffer();
    for (std::size_t i = 0; i < argmax->size(); ++i) g[(*argmax)[i]] += o.grad[i];
  });
}

Tensor avgpool2d(const Tensor& x, std::size_t window, std::size_t stride) {
  require_rank(x, 4, "avgpool2d", "input");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (window == 0 || stride == 0) throw DimensionError("avgpool2d: window and stride must be positive");
  if (window > H || window > W) throw DimensionError("avgpool2d: window exceeds input axes 2/3");
  const std::size_t Ho = (H - window) / stride + 1, Wo = (W - window) / stride + 1;
  const double inv = 1.0 / static_cast<double>(window * window);
  const auto xd = x.data();
  std::vector<double> out(B * C * Ho * Wo);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        double s = 0.0;
        for (std::size_t i = 0; i < window; ++i) {
          for (std::size_t j = 0; j < window; ++j) s += xd[bc * H * W + (oy * stride + i) * W + ox * stride + j];
        }
        out[(bc * Ho + oy) * Wo + ox] = s * inv;
      }
    }
  }
  ImplPtr xi = x.impl();
  return make_result({B, C, Ho, Wo}, std::move(out), {x}, [xi, B, C, H, W, Ho, Wo, window, stride, inv](const TensorImpl& o) {
    auto& g = xi->grad_buffer();
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      for (std::size_t oy = 0; oy < Ho; ++oy) {
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          const double d = o.grad[(bc * Ho + oy) * Wo + ox] * inv;
          for (std::size_t i = 0; i < window; ++i) {
            for (std::size_t j = 0; j < window; ++j) g[bc * H * W + (oy * stride + i) * W + ox * stride + j] += d;
          }
        }
      }
    }
  });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool", "input");
  const std::size_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const double inv = 1.0 / static_cast<double>(HW);
  const auto xd = x.data();
  std::vector<double> out(B * C);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    double s = 0.0;
    for (std::size_t p = 0; p < HW; ++p) s += xd[bc * HW + p];
    out[bc] = s * inv;
  }
  ImplPtr xi = x.impl();
  return make_result({B, C}, std::move(out), {x}, [xi, HW, inv](const TensorImpl& o) {
    auto& g = xi->grad_buffer();
    for (std::size_t bc = 0; bc < o.grad.size(); ++bc) {
      const double d = o.grad[bc] * inv;
      for (std::size_t p = 0; p < HW; ++p) g[bc * HW + p] += d;
    }
  });
}

namespace {
Tensor linear_impl(const Tensor& x, const Tensor& w, const Tensor* bias) {
  require_rank(x, 2, "linear", "input");
  require_rank(w, 2, "linear", "weight");
  const std::size_t B = x.dim(0), I = x.dim(1), O = w.dim(0);
  if (w.dim(1) != I) {
    throw DimensionError("linear: weight axis 1 (" + std::to_string(w.dim(1)) + ") != input axis 1 (" +
                         std::to_string(I) + ")");
  }
  if (bias) {
    require_rank(*bias, 1, "linear", "bias");
    if (bias->dim(0) != O) throw DimensionError("linear: bias axis 0 must equal weight axis 0");
  }
  std::vector<double> out(B * O);
  MatMap y(out.data(), B, O);
  y.noalias() = ConstMatMap(x.data().data(), B, I) * ConstMatMap(w.data().data(), O, I).transpose();
  if (bias) {
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t o = 0; o < O; ++o) out[b * O + o] += bias->data()[o];
    }
  }
  ImplPtr xi = x.impl(), wi = w.impl();
  ImplPtr bi = bias ? bias->impl() : nullptr;
  std::vector<Tensor> inputs{x, w};
  if (bias) inputs.push_back(*bias);
  return make_result({B, O}, std::move(out), std::move(inputs), [xi, wi, bi, B, I, O](const TensorImpl& o) {
    ConstMatMap dy(o.grad.data(), B, O);
    if (xi->requires_grad) {
      MatMap(xi->grad_buffer().data(), B, I).noalias() += dy * ConstMatMap(wi->data.data(), O, I);
    }
    if (wi->requires_grad) {
      MatMap(wi->grad_buffer().data(), O, I).noalias() += dy.transpose() * ConstMatMap(xi->data.data(), B, I);
    }
    if (bi && bi->requires_grad) {
      auto& gb = bi->grad_buffer();
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t k = 0; k < O; ++k) gb[k] += o.grad[b * O + k];
      }
    }
  });
}
}  // namespace

Tensor linear(const Tensor& x, const Tensor& weight) { return linear_impl(x, weight, nullptr); }
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) { return linear_impl(x, weight, &bias); }

Tensor cross_entropy(const Tensor& logits, std::span<const std::uint16_t> labels) {
  require_rank(logits, 2, "cross_entropy", "logits");
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  if (labels.size() != B) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch of " +
                         std::to_string(B));
  }
  for (auto y : labels) {
    if (y >= K) throw InputError("cross_entropy: label " + std::to_string(y) + " outside [0," + std::to_string(K) + ")");
  }
  const auto z = logits.data();
  auto probs = std::make_shared<std::vector<double>>(B * K);
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = z.data() + b * K;
    const double m = *std::max_element(row, row + K);
    double denom = 0.0;
    for (std::size_t k = 0; k < K; ++k) denom += std::exp(row[k] - m);
    const double log_denom = std::log(denom);
    for (std::size_t k = 0; k < K; ++k) (*probs)[b * K + k] = std::exp(row[k] - m - log_denom);
    loss -= row[labels[b]] - m - log_denom;
  }
  loss /= static_cast<double>(B);
  if (!std::isfinite(loss)) throw NumericError("cross_entropy produced a non-finite value");
  ImplPtr li = logits.impl();
  std::vector<std::uint16_t> ys(labels.begin(), labels.end());
  return make_result({}, {loss}, {logits}, [li, probs, ys, B, K](const TensorImpl& o) {
    auto& g = li->grad_buffer();
    const double s = o.grad[0] / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t k = 0; k < K; ++k) {
        const double onehot = (k == ys[b]) ? 1.0 : 0.0;
        g[b * K + k] += s * ((*probs)[b * K + k] - onehot);
      }
    }
  });
}

Tensor gram(const Tensor& features) {
  require_rank(features, 4, "gram", "features");
  const std::size_t B = features.dim(0), C = features.dim(1), HW = features.dim(2) * features.dim(3);
  const double norm = 1.0 / static_cast<double>(C * HW);
  std::vector<double> out(B * C * C);
  const auto fd = features.data();
  for (std::size_t b = 0; b < B; ++b) {
    ConstMatMap m(fd.data() + b * C * HW, C, HW);
    MatMap(out.data() + b * C * C, C, C).noalias() = norm * (m * m.transpose());
  }
  ImplPtr fi = features.impl();
  return make_result({B, C, C}, std::move(out), {features}, [fi, B, C, HW, norm](const TensorImpl& o) {
    auto& g = fi->grad_buffer();
    for (std::size_t b = 0; b < B; ++b) {
      ConstMatMap dg(o.grad.data() + b * C * C, C, C);
      ConstMatMap m(fi->data.data() + b * C * HW, C, HW);
      MatMap(g.data() + b * C * HW, C, HW).noalias() += norm * ((dg + dg.transpose()) * m);
    }
  });
}

}  // namespace ueforge::ops
