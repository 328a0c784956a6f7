// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "cllab/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "cllab/error.hpp"

namespace cllab {

namespace {

using detail::MakeResult;
using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

using MatR = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using VecC = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

void RequireDefined(const Tensor& t, const char* op) {
  if (!t.defined()) throw UsageError(std::string(op) + ": undefined tensor argument");
}

void RequireSameShape(const Tensor& a, const Tensor& b, const char* op) {
  RequireDefined(a, op);
  RequireDefined(b, op);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + ShapeString(a.shape()) +
                         " vs " + ShapeString(b.shape()));
  }
}

void RequireRank(const Tensor& t, std::size_t rank, const char* op) {
  RequireDefined(t, op);
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " tensor, got " + ShapeString(t.shape()));
  }
}

/// grad(dst) += src, if dst participates in differentiation.
void Accumulate(const ImplPtr& dst, std::span<const Scalar> src) {
  if (!dst->requires_grad) return;
  auto& g = dst->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += src[i];
}

Scalar StableSigmoid(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

}  // namespace

Activation ParseActivation(std::string_view name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "sigmoid") return Activation::kSigmoid;
  if (name == "tanh") return Activation::kTanh;
  throw ParameterError("unknown activation '" + std::string(name) + "'");
}

Tensor Add(const Tensor& a, const Tensor& b) {
  RequireSameShape(a, b, "Add");
  std::vector<Scalar> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  ImplPtr ai = a.impl(), bi = b.impl();
  return MakeResult(a.shape(), std::move(out), "add", {a, b},
                    [ai, bi](const TensorImpl& o) {
                      Accumulate(ai, o.grad);
                      Accumulate(bi, o.grad);
                    });
}

Tensor Sub(const Tensor& a, const Tensor& b) {
  RequireSameShape(a, b, "Sub");
  std::vector<Scalar> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  ImplPtr ai = a.impl(), bi = b.impl();
  return MakeResult(a.shape(), std::move(out), "sub", {a, b},
                    [ai, bi](const TensorImpl& o) {
                      Accumulate(ai, o.grad);
                      if (bi->requires_grad) {
                        auto& g = bi->grad_buffer();
                        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
                      }
                    });
}

Tensor Mul(const Tensor& a, const Tensor& b) {
  RequireSameShape(a, b, "Mul");
  std::vector<Scalar> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  ImplPtr ai = a.impl(), bi = b.impl();
  return MakeResult(a.shape(), std::move(out), "mul", {a, b},
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

Tensor Affine(const Tensor& a, Scalar alpha, Scalar beta) {
  RequireDefined(a, "Affine");
  std::vector<Scalar> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * x[i] + beta;
  ImplPtr ai = a.impl();
  return MakeResult(a.shape(), std::move(out), "affine", {a},
                    [ai, alpha](const TensorImpl& o) {
                      if (!ai->requires_grad) return;
                      auto& g = ai->grad_buffer();
                      for (std::size_t i = 0; i < g.size(); ++i) g[i] += alpha * o.grad[i];
                    });
}

Tensor Sum(const Tensor& a) {
  RequireDefined(a, "Sum");
  Scalar s = 0;
  for (Scalar v : a.data()) s += v;
  ImplPtr ai = a.impl();
  return MakeResult({}, {s}, "sum", {a}, [ai](const TensorImpl& o) {
    if (!ai->requires_grad) return;
    auto& g = ai->grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

Tensor Mean(const Tensor& a) {
  RequireDefined(a, "Mean");
  if (a.numel() == 0) throw InputError("Mean of empty tensor");
  Scalar s = 0;
  for (Scalar v : a.data()) s += v;
  const Scalar n = static_cast<Scalar>(a.numel());
  ImplPtr ai = a.impl();
  return MakeResult({}, {s / n}, "mean", {a}, [ai, n](const TensorImpl& o) {
    if (!ai->requires_grad) return;
    auto& g = ai->grad_buffer();
    for (auto& v : g) v += o.grad[0] / n;
  });
}

Tensor Reshape(const Tensor& a, Shape shape) {
  RequireDefined(a, "Reshape");
  if (NumElements(shape) != a.numel()) {
    throw DimensionError("Reshape: cannot view " + ShapeString(a.shape()) + " as " +
                         ShapeString(shape));
  }
  ImplPtr ai = a.impl();
  std::vector<Scalar> out(a.data().begin(), a.data().end());
  return MakeResult(std::move(shape), std::move(out), "reshape", {a},
                    [ai](const TensorImpl& o) { Accumulate(ai, o.grad); });
}

Tensor Flatten(const Tensor& a) {
  RequireDefined(a, "Flatten");
  if (a.rank() < 1) throw DimensionError("Flatten: scalar input");
  const std::size_t n = a.dim(0);
  return Reshape(a, {n, n == 0 ? 0 : a.numel() / n});
}

Tensor MatMul(const Tensor& a, const Tensor& b) {
  RequireRank(a, 2, "MatMul");
  RequireRank(b, 2, "MatMul");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("MatMul: inner dimensions disagree for " + ShapeString(a.shape()) +
                         " and " + ShapeString(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<Scalar> out(static_cast<std::size_t>(m * n));
  MapR(out.data(), m, n).noalias() = CMapR(a.data().data(), m, k) * CMapR(b.data().data(), k, n);
  ImplPtr ai = a.impl(), bi = b.impl();
  return MakeResult({a.dim(0), b.dim(1)}, std::move(out), "matmul", {a, b},
                    [ai, bi, m, k, n](const TensorImpl& o) {
                      CMapR g(o.grad.data(), m, n);
                      if (ai->requires_grad) {
                        MapR(ai->grad_buffer().data(), m, k).noalias() +=
                            g * CMapR(bi->data.data(), k, n).transpose();
                      }
                      if (bi->requires_grad) {
                        MapR(bi->grad_buffer().data(), k, n).noalias() +=
                            CMapR(ai->data.data(), m, k).transpose() * g;
                      }
                    });
}

Tensor Linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  RequireRank(x, 2, "Linear");
  RequireRank(weight, 2, "Linear");
  if (x.dim(1) != weight.dim(1)) {
    throw DimensionError("Linear: input " + ShapeString(x.shape()) + " does not match weight " +
                         ShapeString(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != weight.dim(0))) {
    throw DimensionError("Linear: bias " + ShapeString(bias.shape()) + " does not match weight " +
                         ShapeString(weight.shape()));
  }
  const auto n = static_cast<Eigen::Index>(x.dim(0));
  const auto in = static_cast<Eigen::Index>(x.dim(1));
  const auto out_dim = static_cast<Eigen::Index>(weight.dim(0));
  std::vector<Scalar> out(static_cast<std::size_t>(n * out_dim));
  MapR y(out.data(), n, out_dim);
  y.noalias() = CMapR(x.data().data(), n, in) * CMapR(weight.data().data(), out_dim, in).transpose();
  if (bias.defined()) {
    Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> b(bias.data().data(), out_dim);
    y.rowwise() += b;
  }
  ImplPtr xi = x.impl(), wi = weight.impl();
  ImplPtr bi = bias.defined() ? bias.impl() : nullptr;
  return MakeResult({x.dim(0), weight.dim(0)}, std::move(out), "linear", {x, weight, bias},
                    [xi, wi, bi, n, in, out_dim](const TensorImpl& o) {
                      CMapR g(o.grad.data(), n, out_dim);
                      if (xi->requires_grad) {
                        MapR(xi->grad_buffer().data(), n, in).noalias() +=
                            g * CMapR(wi->data.data(), out_dim, in);
                      }
                      if (wi->requires_grad) {
                        MapR(wi->grad_buffer().data(), out_dim, in).noalias() +=
                            g.transpose() * CMapR(xi->data.data(), n, in);
                      }
                      if (bi && bi->requires_grad) {
                        Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> gb(
                            bi->grad_buffer().data(), out_dim);
                        gb += g.colwise().sum();
                      }
                    });
}

Tensor AddChannelBias(const Tensor& x, const Tensor& bias) {
  RequireRank(x, 4, "AddChannelBias");
  RequireRank(bias, 1, "AddChannelBias");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (bias.dim(0) != c) {
    throw DimensionError("AddChannelBias: bias " + ShapeString(bias.shape()) +
                         " for input " + ShapeString(x.shape()));
  }
  std::vector<Scalar> out(x.data().begin(), x.data().end());
  auto b = bias.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      Scalar* p = out.data() + (i * c + ch) * hw;
      for (std::size_t k = 0; k < hw; ++k) p[k] += b[ch];
    }
  ImplPtr xi = x.impl(), bi = bias.impl();
  return MakeResult(x.shape(), std::move(out), "add_channel_bias", {x, bias},
                    [xi, bi, n, c, hw](const TensorImpl& o) {
                      Accumulate(xi, o.grad);
                      if (!bi->requires_grad) return;
                      auto& g = bi->grad_buffer();
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t ch = 0; ch < c; ++ch) {
                          const Scalar* p = o.grad.data() + (i * c + ch) * hw;
                          Scalar s = 0;
                          for (std::size_t k = 0; k < hw; ++k) s += p[k];
                          g[ch] += s;
                        }
                    });
}

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, stride, pad, ho, wo;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t positions() const { return n * ho * wo; }
};

// cols is [C*kH*kW x N*H'*W'] row-major.
void Im2Col(const ConvGeometry& g, const Scalar* x, Scalar* cols) {
  const std::size_t np = g.positions();
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        Scalar* row = cols + ((ch * g.kh + ki) * g.kw + kj) * np;
        for (std::size_t b = 0; b < g.n; ++b) {
          const Scalar* plane = x + (b * g.c + ch) * g.h * g.w;
          for (std::size_t oi = 0; oi < g.ho; ++oi) {
            const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.pad);
            Scalar* dst = row + (b * g.ho + oi) * g.wo;
            if (ii < 0 || ii >= static_cast<long>(g.h)) {
              std::fill(dst, dst + g.wo, Scalar(0));
              continue;
            }
            for (std::size_t oj = 0; oj < g.wo; ++oj) {
              const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.pad);
              dst[oj] = (jj < 0 || jj >= static_cast<long>(g.w))
                            ? Scalar(0)
                            : plane[static_cast<std::size_t>(ii) * g.w + static_cast<std::size_t>(jj)];
            }
          }
        }
      }
}

void Col2ImAccumulate(const ConvGeometry& g, const Scalar* cols, Scalar* dx) {
  const std::size_t np = g.positions();
  for (std::size_t ch = 0; ch < g.c; ++ch)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const Scalar* row = cols + ((ch * g.kh + ki) * g.kw + kj) * np;
        for (std::size_t b = 0; b < g.n; ++b) {
          Scalar* plane = dx + (b * g.c + ch) * g.h * g.w;
          for (std::size_t oi = 0; oi < g.ho; ++oi) {
            const long ii = static_cast<long>(oi * g.stride + ki) - static_cast<long>(g.pad);
            if (ii < 0 || ii >= static_cast<long>(g.h)) continue;
            const Scalar* src = row + (b * g.ho + oi) * g.wo;
            for (std::size_t oj = 0; oj < g.wo; ++oj) {
              const long jj = static_cast<long>(oj * g.stride + kj) - static_cast<long>(g.pad);
              if (jj < 0 || jj >= static_cast<long>(g.w)) continue;
              plane[static_cast<std::size_t>(ii) * g.w + static_cast<std::size_t>(jj)] += src[oj];
            }
          }
        }
      }
}

}  // namespace

Tensor Conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  RequireRank(x, 4, "Conv2d");
  RequireRank(kernel, 4, "Conv2d");
  if (stride < 1) throw ParameterError("Conv2d: stride must be >= 1");
  if (kernel.dim(1) != x.dim(1)) {
    throw DimensionError("Conv2d: input " + ShapeString(x.shape()) + " has " +
                         std::to_string(x.dim(1)) + " channels but kernel " +
                         ShapeString(kernel.shape()) + " expects " +
                         std::to_string(kernel.dim(1)));
  }
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel.dim(0), kernel.dim(2),
                 kernel.dim(3), stride, padding, 0, 0};
  const long span_h = static_cast<long>(g.h + 2 * padding) - static_cast<long>(g.kh);
  const long span_w = static_cast<long>(g.w + 2 * padding) - static_cast<long>(g.kw);
  if (span_h < 0 || span_w < 0) {
    throw DimensionError("Conv2d: kernel " + ShapeString(kernel.shape()) +
                         " larger than padded input " + ShapeString(x.shape()));
  }
  g.ho = static_cast<std::size_t>(span_h) / stride + 1;
  g.wo = static_cast<std::size_t>(span_w) / stride + 1;

  const auto patch = static_cast<Eigen::Index>(g.patch());
  const auto np = static_cast<Eigen::Index>(g.positions());
  const auto o = static_cast<Eigen::Index>(g.o);
  std::vector<Scalar> cols(g.patch() * g.positions());
  Im2Col(g, x.data().data(), cols.data());
  MatR prod(o, np);
  prod.noalias() = CMapR(kernel.data().data(), o, patch) * CMapR(cols.data(), patch, np);

  const std::size_t plane = g.ho * g.wo;
  std::vector<Scalar> out(g.n * g.o * plane);
  for (std::size_t b = 0; b < g.n; ++b)
    for (std::size_t oc = 0; oc < g.o; ++oc)
      std::copy_n(prod.data() + oc * g.positions() + b * plane, plane,
                  out.data() + (b * g.o + oc) * plane);

  ImplPtr xi = x.impl(), ki = kernel.impl();
  return MakeResult({g.n, g.o, g.ho, g.wo}, std::move(out), "conv2d", {x, kernel},
                    [xi, ki, g, patch, np, o, plane](const TensorImpl& res) {
                      MatR gm(o, np);
                      for (std::size_t b = 0; b < g.n; ++b)
                        for (std::size_t oc = 0; oc < g.o; ++oc)
                          std::copy_n(res.grad.data() + (b * g.o + oc) * plane, plane,
                                      gm.data() + oc * g.positions() + b * plane);
                      if (ki->requires_grad) {
                        std::vector<Scalar> cols(g.patch() * g.positions());
                        Im2Col(g, xi->data.data(), cols.data());
                        MapR(ki->grad_buffer().data(), o, patch).noalias() +=
                            gm * CMapR(cols.data(), patch, np).transpose();
                      }
                      if (xi->requires_grad) {
                        MatR dcols(patch, np);
                        dcols.noalias() = CMapR(ki->data.data(), o, patch).transpose() * gm;
                        Col2ImAccumulate(g, dcols.data(), xi->grad_buffer().data());
                      }
                    });
}

Tensor ApplyActivation(const Tensor& x, Activation kind) {
  RequireDefined(x, "ApplyActivation");
  std::vector<Scalar> out(x.numel());
  auto in = x.data();
  switch (kind) {
    case Activation::kRelu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > 0 ? in[i] : Scalar(0);
      break;
    case Activation::kSigmoid:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = StableSigmoid(in[i]);
      break;
    case Activation::kTanh:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(in[i]);
      break;
  }
  ImplPtr xi = x.impl();
  return MakeResult(x.shape(), std::move(out), "activation", {x},
                    [xi, kind](const TensorImpl& o) {
                      if (!xi->requires_grad) return;
                      auto& g = xi->grad_buffer();
                      for (std::size_t i = 0; i < g.size(); ++i) {
                        const Scalar y = o.data[i];
                        switch (kind) {
                          case Activation::kRelu:
                            if (xi->data[i] > 0) g[i] += o.grad[i];
                            break;
                          case Activation::kSigmoid:
                            g[i] += o.grad[i] * y * (Scalar(1) - y);
                            break;
                          case Activation::kTanh:
                            g[i] += o.grad[i] * (Scalar(1) - y * y);
                            break;
                        }
                      }
                    });
}

Tensor SoftmaxWithTemperature(const Tensor& logits, Scalar temperature) {
  RequireRank(logits, 2, "SoftmaxWithTemperature");
  if (!(temperature > 0)) {
    throw ParameterError("softmax temperature must be > 0, got " + std::to_string(temperature));
  }
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<Scalar> out(n * c);
  auto z = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    const Scalar* row = z.data() + i * c;
    Scalar* y = out.data() + i * c;
    Scalar m = -std::numeric_limits<Scalar>::infinity();
    for (std::size_t j = 0; j < c; ++j) m = std::max(m, row[j]);
    Scalar s = 0;
    for (std::size_t j = 0; j < c; ++j) {
      y[j] = std::exp((row[j] - m) / temperature);
      s += y[j];
    }
    for (std::size_t j = 0; j < c; ++j) y[j] /= s;
  }
  ImplPtr li = logits.impl();
  return MakeResult(logits.shape(), std::move(out), "softmax", {logits},
                    [li, n, c, temperature](const TensorImpl& o) {
                      if (!li->requires_grad) return;
                      auto& g = li->grad_buffer();
                      for (std::size_t i = 0; i < n; ++i) {
                        const Scalar* y = o.data.data() + i * c;
                        const Scalar* go = o.grad.data() + i * c;
                        Scalar dot = 0;
                        for (std::size_t j = 0; j < c; ++j) dot += go[j] * y[j];
                        for (std::size_t j = 0; j < c; ++j)
                          g[i * c + j] += y[j] * (go[j] - dot) / temperature;
                      }
                    });
}

Tensor MaskLogits(const Tensor& logits, const ClassMask& mask) {
  RequireRank(logits, 2, "MaskLogits");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (mask.size() != c) {
    throw DimensionError("MaskLogits: mask of " + std::to_string(mask.size()) +
                         " classes for logits " + ShapeString(logits.shape()));
  }
  std::vector<Scalar> out(logits.data().begin(), logits.data().end());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j)
      if (!mask[j]) out[i * c + j] = -std::numeric_limits<Scalar>::infinity();
  ImplPtr li = logits.impl();
  return MakeResult(logits.shape(), std::move(out), "mask_logits", {logits},
                    [li, mask, n, c](const TensorImpl& o) {
                      if (!li->requires_grad) return;
                      auto& g = li->grad_buffer();
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < c; ++j)
                          if (mask[j]) g[i * c + j] += o.grad[i * c + j];
                    });
}

Tensor CrossEntropyLoss(const Tensor& logits, std::span<const int> labels, const ClassMask& mask) {
  RequireRank(logits, 2, "CrossEntropyLoss");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) {
    throw InputError("CrossEntropyLoss: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }
  if (n == 0) throw InputError("CrossEntropyLoss: empty batch");
  if (!mask.empty() && mask.size() != c) {
    throw DimensionError("CrossEntropyLoss: mask of " + std::to_string(mask.size()) +
                         " classes for logits " + ShapeString(logits.shape()));
  }
  auto active = [&](std::size_t j) { return mask.empty() || mask[j]; };
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw InputError("CrossEntropyLoss: label " + std::to_string(labels[i]) +
                       " outside [0, " + std::to_string(c) + ")");
    }
    if (!active(static_cast<std::size_t>(labels[i]))) {
      throw InputError("CrossEntropyLoss: label " + std::to_string(labels[i]) + " is masked out");
    }
  }
  auto z = logits.data();
  std::vector<Scalar> probs(n * c, Scalar(0));
  Scalar total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Scalar* row = z.data() + i * c;
    Scalar m = -std::numeric_limits<Scalar>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (active(j)) m = std::max(m, row[j]);
    Scalar s = 0;
    for (std::size_t j = 0; j < c; ++j) {
      if (!active(j)) continue;
      probs[i * c + j] = std::exp(row[j] - m);
      s += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= s;
    const std::size_t y = static_cast<std::size_t>(labels[i]);
    total += m + std::log(s) - row[y];
  }
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n);
  std::vector<int> ys(labels.begin(), labels.end());
  ImplPtr li = logits.impl();
  return MakeResult({}, {total * inv_n}, "cross_entropy", {logits},
                    [li, probs = std::move(probs), ys = std::move(ys), n, c,
                     inv_n](const TensorImpl& o) {
                      if (!li->requires_grad) return;
                      auto& g = li->grad_buffer();
                      const Scalar scale = o.grad[0] * inv_n;
                      for (std::size_t i = 0; i < n; ++i) {
                        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += scale * probs[i * c + j];
                        g[i * c + static_cast<std::size_t>(ys[i])] -= scale;
                      }
                    });
}

Tensor KlDivergence(const Tensor& p, const Tensor& q) {
  RequireRank(p, 2, "KlDivergence");
  RequireSameShape(p, q, "KlDivergence");
  const std::size_t n = p.dim(0), c = p.dim(1);
  if (n == 0) throw InputError("KlDivergence: empty batch");
  const double tol = 1e-8 * kToleranceScale;
  auto check_rows = [&](const Tensor& t, const char* which) {
    auto d = t.data();
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < c; ++j) {
        if (d[i * c + j] < 0) {
          throw InputError(std::string("KlDivergence: negative entry in ") + which);
        }
        s += d[i * c + j];
      }
      if (std::abs(s - 1.0) > tol) {
        throw InputError(std::string("KlDivergence: row ") + std::to_string(i) + " of " + which +
                         " sums to " + std::to_string(s));
      }
    }
  };
  check_rows(p, "p");
  check_rows(q, "q");
  auto pd = p.data(), qd = q.data();
  Scalar total = 0;
  for (std::size_t k = 0; k < n * c; ++k) {
    if (pd[k] == 0) continue;
    total += pd[k] * (std::log(pd[k]) - std::log(std::max(qd[k], kKlClamp)));
  }
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(n);
  ImplPtr pi = p.impl(), qi = q.impl();
  // p is a fixed target: only q is recorded as a differentiable input.
  return MakeResult({}, {total * inv_n}, "kl_divergence", {q},
                    [pi, qi, inv_n](const TensorImpl& o) {
                      if (!qi->requires_grad) return;
                      auto& g = qi->grad_buffer();
                      const Scalar scale = o.grad[0] * inv_n;
                      for (std::size_t k = 0; k < g.size(); ++k) {
                        if (pi->data[k] == 0) continue;
                        g[k] -= scale * pi->data[k] / std::max(qi->data[k], kKlClamp);
                      }
                    });
}

Tensor GlobalAvgPool(const Tensor& x) {
  RequireRank(x, 4, "GlobalAvgPool");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (hw == 0) throw DimensionError("GlobalAvgPool: empty spatial extent");
  std::vector<Scalar> out(n * c);
  auto d = x.data();
  for (std::size_t k = 0; k < n * c; ++k) {
    Scalar s = 0;
    for (std::size_t p = 0; p < hw; ++p) s += d[k * hw + p];
    out[k] = s / static_cast<Scalar>(hw);
  }
  ImplPtr xi = x.impl();
  return MakeResult({n, c}, std::move(out), "global_avg_pool", {x},
                    [xi, n, c, hw](const TensorImpl& o) {
                      if (!xi->requires_grad) return;
                      auto& g = xi->grad_buffer();
                      const Scalar inv = Scalar(1) / static_cast<Scalar>(hw);
                      for (std::size_t k = 0; k < n * c; ++k)
                        for (std::size_t p = 0; p < hw; ++p) g[k * hw + p] += o.grad[k] * inv;
                    });
}

Tensor BatchNorm(const Tensor& x, const Tensor& scale, const Tensor& shift, RunningStats& stats,
                 BatchNormMode mode) {
  RequireRank(x, 4, "BatchNorm");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (scale.numel() != c || shift.numel() != c || stats.mean.size() != c ||
      stats.var.size() != c) {
    throw DimensionError("BatchNorm: per-channel state does not match input " +
                         ShapeString(x.shape()));
  }
  const std::size_t count = n * hw;
  if (count == 0) throw DimensionError("BatchNorm: empty batch");
  auto d = x.data();
  std::vector<Scalar> mean(c), inv_std(c);
  if (mode == BatchNormMode::kTrain) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      Scalar s = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < hw; ++p) s += d[(b * c + ch) * hw + p];
      const Scalar mu = s / static_cast<Scalar>(count);
      Scalar v = 0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t p = 0; p < hw; ++p) {
          const Scalar e = d[(b * c + ch) * hw + p] - mu;
          v += e * e;
        }
      const Scalar var = v / static_cast<Scalar>(count);
      mean[ch] = mu;
      inv_std[ch] = Scalar(1) / std::sqrt(var + kBatchNormEpsilon);
      const Scalar unbiased =
          count > 1 ? v / static_cast<Scalar>(count - 1) : var;
      stats.mean[ch] = (Scalar(1) - kBatchNormMomentum) * stats.mean[ch] + kBatchNormMomentum * mu;
      stats.var[ch] = (Scalar(1) - kBatchNormMomentum) * stats.var[ch] + kBatchNormMomentum * unbiased;
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = stats.mean[ch];
      inv_std[ch] = Scalar(1) / std::sqrt(stats.var[ch] + kBatchNormEpsilon);
    }
  }
  std::vector<Scalar> xhat(d.size()), out(d.size());
  auto gamma = scale.data(), beta = shift.data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t k = (b * c + ch) * hw + p;
        xhat[k] = (d[k] - mean[ch]) * inv_std[ch];
        out[k] = gamma[ch] * xhat[k] + beta[ch];
      }
  ImplPtr xi = x.impl(), gi = scale.impl(), bi = shift.impl();
  const bool train = mode == BatchNormMode::kTrain;
  return MakeResult(
      x.shape(), std::move(out), "batch_norm", {x, scale, shift},
      [xi, gi, bi, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, hw, count,
       train](const TensorImpl& o) {
        const auto& g = o.grad;
        std::vector<Scalar> sum_g(c, 0), sum_gx(c, 0);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) {
              const std::size_t k = (b * c + ch) * hw + p;
              sum_g[ch] += g[k];
              sum_gx[ch] += g[k] * xhat[k];
            }
        if (gi->requires_grad) {
          auto& gg = gi->grad_buffer();
          for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_gx[ch];
        }
        if (bi->requires_grad) {
          auto& gb = bi->grad_buffer();
          for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
        }
        if (!xi->requires_grad) return;
        auto& gx = xi->grad_buffer();
        const Scalar inv_m = Scalar(1) / static_cast<Scalar>(count);
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const Scalar k_scale = gi->data[ch] * inv_std[ch];
            for (std::size_t p = 0; p < hw; ++p) {
              const std::size_t k = (b * c + ch) * hw + p;
              if (train) {
                gx[k] += k_scale * (g[k] - sum_g[ch] * inv_m - xhat[k] * sum_gx[ch] * inv_m);
              } else {
                gx[k] += k_scale * g[k];
              }
            }
          }
      });
}

Tensor ConcatChannels(const Tensor& a, const Tensor& b) {
  RequireRank(a, 4, "ConcatChannels");
  if (!b.defined() || (b.rank() == 4 && b.dim(1) == 0 && b.dim(0) == a.dim(0))) {
    return Reshape(a, a.shape());
  }
  RequireRank(b, 4, "ConcatChannels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw DimensionError("ConcatChannels: non-channel dims differ for " + ShapeString(a.shape()) +
                         " and " + ShapeString(b.shape()));
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  std::vector<Scalar> out(n * (ca + cb) * hw);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().data() + i * ca * hw, ca * hw, out.data() + i * (ca + cb) * hw);
    std::copy_n(b.data().data() + i * cb * hw, cb * hw, out.data() + (i * (ca + cb) + ca) * hw);
  }
  ImplPtr ai = a.impl(), bi = b.impl();
  return MakeResult({n, ca + cb, a.dim(2), a.dim(3)}, std::move(out), "concat_channels", {a, b},
                    [ai, bi, n, ca, cb, hw](const TensorImpl& o) {
                      for (std::size_t i = 0; i < n; ++i) {
                        const Scalar* g = o.grad.data() + i * (ca + cb) * hw;
                        if (ai->requires_grad) {
                          Scalar* d = ai->grad_buffer().data() + i * ca * hw;
                          for (std::size_t k = 0; k < ca * hw; ++k) d[k] += g[k];
                        }
                        if (bi->requires_grad) {
                          Scalar* d = bi->grad_buffer().data() + i * cb * hw;
                          for (std::size_t k = 0; k < cb * hw; ++k) d[k] += g[ca * hw + k];
                        }
                      }
                    });
}

Tensor SliceRow(const Tensor& x, std::size_t row) {
  RequireRank(x, 4, "SliceRow");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (row >= h) {
    throw DimensionError("SliceRow: row " + std::to_string(row) + " of " + ShapeString(x.shape()));
  }
  std::vector<Scalar> out(n * c * w);
  for (std::size_t k = 0; k < n * c; ++k)
    std::copy_n(x.data().data() + (k * h + row) * w, w, out.data() + k * w);
  ImplPtr xi = x.impl();
  return MakeResult({n, c, 1, w}, std::move(out), "slice_row", {x},
                    [xi, n, c, h, w, row](const TensorImpl& o) {
                      if (!xi->requires_grad) return;
                      auto& g = xi->grad_buffer();
                      for (std::size_t k = 0; k < n * c; ++k)
                        for (std::size_t j = 0; j < w; ++j) g[(k * h + row) * w + j] += o.grad[k * w + j];
                    });
}

Tensor StackRows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw DimensionError("StackRows: no rows");
  RequireRank(rows[0], 4, "StackRows");
  const Shape& s0 = rows[0].shape();
  if (s0[2] != 1) throw DimensionError("StackRows: rows must have height 1, got " + ShapeString(s0));
  for (const auto& r : rows) {
    if (!r.defined() || r.shape() != s0) {
      throw DimensionError("StackRows: inconsistent row shapes");
    }
  }
  const std::size_t n = s0[0], c = s0[1], w = s0[3], h = rows.size();
  std::vector<Scalar> out(n * c * h * w);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t k = 0; k < n * c; ++k)
      std::copy_n(rows[r].data().data() + k * w, w, out.data() + (k * h + r) * w);
  std::vector<ImplPtr> impls;
  for (const auto& r : rows) impls.push_back(r.impl());
  return MakeResult({n, c, h, w}, std::move(out), "stack_rows", rows,
                    [impls, n, c, h, w](const TensorImpl& o) {
                      for (std::size_t r = 0; r < h; ++r) {
                        if (!impls[r]->requires_grad) continue;
                        auto& g = impls[r]->grad_buffer();
                        for (std::size_t k = 0; k < n * c; ++k)
                          for (std::size_t j = 0; j < w; ++j) g[k * w + j] += o.grad[(k * h + r) * w + j];
                      }
                    });
}

Tensor TransposeSpatial(const Tensor& x) {
  RequireRank(x, 4, "TransposeSpatial");
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<Scalar> out(x.numel());
  auto d = x.data();
  for (std::size_t k = 0; k < nc; ++k)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) out[(k * w + j) * h + i] = d[(k * h + i) * w + j];
  ImplPtr xi = x.impl();
  return MakeResult({x.dim(0), x.dim(1), w, h}, std::move(out), "transpose_spatial", {x},
                    [xi, nc, h, w](const TensorImpl& o) {
                      if (!xi->requires_grad) return;
                      auto& g = xi->grad_buffer();
                      for (std::size_t k = 0; k < nc; ++k)
                        for (std::size_t i = 0; i < h; ++i)
                          for (std::size_t j = 0; j < w; ++j) g[(k * h + i) * w + j] += o.grad[(k * w + j) * h + i];
                    });
}

Tensor ConcatColumns(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("ConcatColumns: no inputs");
  const std::size_t n = parts[0].dim(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    RequireRank(p, 2, "ConcatColumns");
    if (p.dim(0) != n) throw DimensionError("ConcatColumns: row counts differ");
    total += p.dim(1);
  }
  std::vector<Scalar> out(n * total);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.dim(1);
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(p.data().data() + i * c, c, out.data() + i * total + offset);
    offset += c;
  }
  std::vector<ImplPtr> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  return MakeResult({n, total}, std::move(out), "concat_columns", parts,
                    [impls, n, total](const TensorImpl& o) {
                      std::size_t off = 0;
                      for (const auto& p : impls) {
                        const std::size_t c = p->shape[1];
                        if (p->requires_grad) {
                          auto& g = p->grad_buffer();
                          for (std::size_t i = 0; i < n; ++i)
                            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += o.grad[i * total + off + j];
                        }
                        off += c;
                      }
                    });
}

Tensor SelectColumns(const Tensor& x, std::span<const std::size_t> columns) {
  RequireRank(x, 2, "SelectColumns");
  const std::size_t n = x.dim(0), c = x.dim(1), k = columns.size();
  for (auto col : columns) {
    if (col >= c) throw DimensionError("SelectColumns: column " + std::to_string(col) + " of " +
                                       ShapeString(x.shape()));
  }
  std::vector<Scalar> out(n * k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = x.data()[i * c + columns[j]];
  std::vector<std::size_t> cols(columns.begin(), columns.end());
  ImplPtr xi = x.impl();
  return MakeResult({n, k}, std::move(out), "select_columns", {x},
                    [xi, cols = std::move(cols), n, c, k](const TensorImpl& o) {
                      if (!xi->requires_grad) return;
                      auto& g = xi->grad_buffer();
                      for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < k; ++j) g[i * c + cols[j]] += o.grad[i * k + j];
                    });
}

Tensor GatherRows(const Tensor& x, std::span<const std::size_t> rows) {
  RequireDefined(x, "GatherRows");
  if (x.rank() < 1) throw DimensionError("GatherRows: scalar input");
  const std::size_t n = x.dim(0);
  const std::size_t stride = n == 0 ? 0 : x.numel() / n;
  for (auto r : rows) {
    if (r >= n) throw DimensionError("GatherRows: row " + std::to_string(r) + " of " +
                                     ShapeString(x.shape()));
  }
  std::vector<Scalar> out(rows.size() * stride);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x.data().data() + rows[i] * stride, stride, out.data() + i * stride);
  Shape shape = x.shape();
  shape[0] = rows.size();
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  ImplPtr xi = x.impl();
  return MakeResult(std::move(shape), std::move(out), "gather_rows", {x},
                    [xi, idx = std::move(idx), stride](const TensorImpl& o) {
                      if (!xi->requires_grad) return;
                      auto& g = xi->grad_buffer();
                      for (std::size_t i = 0; i < idx.size(); ++i)
                        for (std::size_t k = 0; k < stride; ++k) g[idx[i] * stride + k] += o.grad[i * stride + k];
                    });
}

}  // namespace cllab
