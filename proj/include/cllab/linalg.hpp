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
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cllab/tensor.hpp"

namespace cllab {

/// Dense row-major matrix of doubles. Rank diagnostics always run in double
/// precision regardless of the training element type.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0.0) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> v);

  static Matrix Identity(std::size_t n);
  static Matrix Diagonal(std::span<const double> diag);

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

/// Nonnegative singular values in descending order; length min(rows, cols).
struct SingularSpectrum {
  std::vector<double> values;
};

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, iterated
/// until the off-diagonal Frobenius norm falls below 1e-12 of the matrix norm.
/// Returned in descending order.
std::vector<double> SymmetricEigenvalues(Matrix sym);

/// Singular values by one-sided Jacobi over the smaller dimension.
/// Throws NumericError on non-finite entries.
SingularSpectrum SingularValues(const Matrix& m);

/// exp of the Shannon entropy (natural log) of sigma_i / sum(sigma).
/// Zero entries contribute nothing; an all-zero spectrum has rank 0.
/// Throws InputError on an empty spectrum.
double EffectiveRank(std::span<const double> spectrum);
inline double EffectiveRank(const SingularSpectrum& s) { return EffectiveRank(s.values); }

/// out[t] = in[t] / max_{u <= t} in[u]. Throws InputError if the first value
/// is not positive or any value is negative.
std::vector<double> PeakNormalize(std::span<const double> points);

/// [O x C x kH x kW] kernel -> [O x (C*kH*kW)] matrix, channel-major then
/// row-major within each output channel.
Matrix MatricizeConvKernel(const Tensor& kernel);

/// Rank-2 tensor -> matrix; rank-4 tensors are matricized as kernels.
Matrix TensorToMatrix(const Tensor& t);

/// Mean of EffectiveRank(SingularValues(m)) over the group.
double GroupErank(std::span<const Matrix> layers);

/// How activation matrices are reduced to a spectrum.
struct ActivationRankOptions {
  /// Subtract the per-feature mean over samples first.
  bool center = false;
  /// Use eigenvalues of the feature covariance (squared singular values)
  /// instead of the singular values of the activation matrix itself.
  bool covariance = false;
};

double ActivationErank(const Matrix& activations, const ActivationRankOptions& opts = {});

enum class ProbeKind { kActivation, kWeight };
enum class LayerGroup { kEarly, kMiddle, kLate, kHead, kPenultimate };

std::string_view ProbeKindName(ProbeKind p);
std::string_view LayerGroupName(LayerGroup g);
ProbeKind ParseProbeKind(std::string_view name);
LayerGroup ParseLayerGroup(std::string_view name);

/// eRank values over tasks for one (probe, group) pair.
class ERankTrace {
 public:
  ERankTrace(ProbeKind probe, LayerGroup group) : probe_(probe), group_(group) {}

  /// Task indices must strictly increase; values must be nonnegative.
  void Append(int task_index, double erank);

  ProbeKind probe() const { return probe_; }
  LayerGroup group() const { return group_; }
  const std::vector<std::pair<int, double>>& points() const { return points_; }
  std::vector<double> values() const;
  std::vector<double> PeakNormalized() const;

 private:
  ProbeKind probe_;
  LayerGroup group_;
  std::vector<std::pair<int, double>> points_;
};

}  // namespace cllab
