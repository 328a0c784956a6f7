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

#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "cllab/tensor.hpp"

namespace cllab {

enum class Activation { kRelu, kSigmoid, kTanh };

Activation ParseActivation(std::string_view name);

/// Per-class flags; true marks a class that participates in the softmax.
/// An empty mask means every class participates.
using ClassMask = std::vector<bool>;

// Elementwise arithmetic on equal shapes.
Tensor Add(const Tensor& a, const Tensor& b);
Tensor Sub(const Tensor& a, const Tensor& b);
Tensor Mul(const Tensor& a, const Tensor& b);
/// alpha * a + beta
Tensor Affine(const Tensor& a, Scalar alpha, Scalar beta);
inline Tensor Scale(const Tensor& a, Scalar s) { return Affine(a, s, Scalar(0)); }

Tensor Sum(const Tensor& a);
Tensor Mean(const Tensor& a);
Tensor Reshape(const Tensor& a, Shape shape);
/// [N x ...] -> [N x prod(...)]
Tensor Flatten(const Tensor& a);

/// [m x k] . [k x n] -> [m x n]
Tensor MatMul(const Tensor& a, const Tensor& b);
/// x [N x in], weight [out x in], optional bias [out] -> x . weight^T + bias
Tensor Linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});
/// x [N x C x H x W] + bias [C] broadcast over batch and space.
Tensor AddChannelBias(const Tensor& x, const Tensor& bias);

/// Cross-correlation (no kernel flip). x [N x C x H x W],
/// kernel [O x C x kH x kW] -> [N x O x H' x W'],
/// H' = floor((H + 2 padding - kH) / stride) + 1.
Tensor Conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride,
              std::size_t padding);

Tensor ApplyActivation(const Tensor& x, Activation kind);
inline Tensor Relu(const Tensor& x) { return ApplyActivation(x, Activation::kRelu); }
inline Tensor Sigmoid(const Tensor& x) { return ApplyActivation(x, Activation::kSigmoid); }
inline Tensor Tanh(const Tensor& x) { return ApplyActivation(x, Activation::kTanh); }

/// Row-wise softmax(logits / temperature) with max subtraction.
Tensor SoftmaxWithTemperature(const Tensor& logits, Scalar temperature);

/// Sets masked-out logits to -inf. Gradient is zero at masked entries.
Tensor MaskLogits(const Tensor& logits, const ClassMask& mask);

/// Batch mean of -log softmax(logits)[label]. Masked-out classes are excluded
/// from the normaliser. Labels must be in range and unmasked.
Tensor CrossEntropyLoss(const Tensor& logits, std::span<const int> labels,
                        const ClassMask& mask = {});

inline constexpr Scalar kKlClamp = Scalar(1e-12);

/// Batch mean of sum_i p_i ln(p_i / q_i), 0 ln 0 := 0, q clamped at kKlClamp.
/// p is treated as a constant target; gradients flow into q only.
Tensor KlDivergence(const Tensor& p, const Tensor& q);

/// [N x C x H x W] -> [N x C]
Tensor GlobalAvgPool(const Tensor& x);

enum class BatchNormMode { kTrain, kEval };

struct RunningStats {
  std::vector<Scalar> mean;
  std::vector<Scalar> var;
  explicit RunningStats(std::size_t channels = 0)
      : mean(channels, Scalar(0)), var(channels, Scalar(1)) {}
};

inline constexpr Scalar kBatchNormEpsilon = Scalar(1e-5);
inline constexpr Scalar kBatchNormMomentum = Scalar(0.1);

/// Train mode normalises with biased batch statistics and updates `stats`
/// (unbiased variance, momentum kBatchNormMomentum); eval mode uses `stats`.
Tensor BatchNorm(const Tensor& x, const Tensor& scale, const Tensor& shift,
                 RunningStats& stats, BatchNormMode mode);

/// Channel-axis concatenation. An undefined or zero-channel `b` yields `a`.
Tensor ConcatChannels(const Tensor& a, const Tensor& b);

/// [N x C x H x W] -> row `row` as [N x C x 1 x W]
Tensor SliceRow(const Tensor& x, std::size_t row);
/// Inverse of SliceRow over all rows: H tensors [N x C x 1 x W] -> [N x C x H x W]
Tensor StackRows(const std::vector<Tensor>& rows);

/// [N x C x H x W] -> [N x C x W x H]
Tensor TransposeSpatial(const Tensor& x);

/// [N x C_i] tensors -> [N x sum C_i]
Tensor ConcatColumns(const std::vector<Tensor>& parts);
/// [N x C] -> [N x |columns|]
Tensor SelectColumns(const Tensor& x, std::span<const std::size_t> columns);
/// [N x ...] -> [|rows| x ...]
Tensor GatherRows(const Tensor& x, std::span<const std::size_t> rows);

}  // namespace cllab
