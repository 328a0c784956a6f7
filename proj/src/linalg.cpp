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

#include "cllab/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "cllab/error.hpp"

namespace cllab {

Matrix::Matrix(std::size_t r, std::size_t c, std::vector<double> v)
    : rows(r), cols(c), values(std::move(v)) {
  if (values.size() != r * c) {
    throw DimensionError("matrix " + std::to_string(r) + "x" + std::to_string(c) + " given " +
                         std::to_string(values.size()) + " values");
  }
}

Matrix Matrix::Identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::Diagonal(std::span<const double> diag) {
  Matrix m(diag.size(), diag.size());
  for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
  return m;
}

std::vector<double> SymmetricEigenvalues(Matrix a) {
  if (a.rows != a.cols) throw DimensionError("SymmetricEigenvalues: matrix is not square");
  const std::size_t n = a.rows;
  double norm2 = 0;
  for (double v : a.values) norm2 += v * v;
  const double threshold = 1e-12 * std::sqrt(norm2);

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off2 = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off2 += 2.0 * a(p, q) * a(p, q);
    if (std::sqrt(off2) <= threshold) break;

    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        double t;
        if (std::abs(theta) > 1e150) {
          t = 0.5 / theta;
        } else {
          t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        }
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
      }
    }
  }
  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = a(i, i);
  std::sort(eig.begin(), eig.end(), std::greater<>());
  return eig;
}

SingularSpectrum SingularValues(const Matrix& m) {
  for (double v : m.values) {
    if (!std::isfinite(v)) throw NumericError("SingularValues: non-finite matrix entry");
  }
  // One-sided (Hestenes) Jacobi on the k = min(rows, cols) vectors of the
  // smaller side: orthogonalize them pairwise, then sigma_i = |u_i|. Working
  // on m itself rather than its Gram matrix keeps tiny singular values
  // accurate relative to the largest (squaring would floor them near
  // sqrt(eps) * sigma_max).
  const bool by_cols = m.rows >= m.cols;
  const std::size_t k = by_cols ? m.cols : m.rows;
  const std::size_t len = by_cols ? m.rows : m.cols;
  std::vector<double> u(k * len);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < len; ++j) u[i * len + j] = by_cols ? m(j, i) : m(i, j);

  constexpr double kEps = 1e-15;
  for (int sweep = 0; sweep < 60; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < k; ++p) {
      double* up = &u[p * len];
      for (std::size_t q = p + 1; q < k; ++q) {
        double* uq = &u[q * len];
        double alpha = 0, beta = 0, gamma = 0;
        for (std::size_t j = 0; j < len; ++j) {
          alpha += up[j] * up[j];
          beta += uq[j] * uq[j];
          gamma += up[j] * uq[j];
        }
        if (gamma == 0.0 || std::abs(gamma) <= kEps * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t j = 0; j < len; ++j) {
          const double a = up[j], b = uq[j];
          up[j] = c * a - s * b;
          uq[j] = s * a + c * b;
        }
      }
    }
    if (!rotated) break;
  }
  SingularSpectrum out;
  out.values.resize(k);
  for (std::size_t i = 0; i < k; ++i) {
    double n2 = 0;
    for (std::size_t j = 0; j < len; ++j) n2 += u[i * len + j] * u[i * len + j];
    out.values[i] = std::sqrt(n2);
  }
  std::sort(out.values.begin(), out.values.end(), std::greater<>());
  return out;
}

double EffectiveRank(std::span<const double> spectrum) {
  if (spectrum.empty()) throw InputError("EffectiveRank: empty spectrum");
  double total = 0;
  for (double s : spectrum) {
    if (!(s >= 0) || !std::isfinite(s)) {
      throw InputError("EffectiveRank: spectrum values must be finite and nonnegative");
    }
    total += s;
  }
  if (total == 0) return 0.0;
  double entropy = 0;
  for (double s : spectrum) {
    if (s == 0) continue;
    const double p = s / total;
    entropy -= p * std::log(p);
  }
  return std::exp(entropy);
}

std::vector<double> PeakNormalize(std::span<const double> points) {
  std::vector<double> out;
  out.reserve(points.size());
  double peak = 0;
  for (std::size_t t = 0; t < points.size(); ++t) {
    if (!(points[t] >= 0)) throw InputError("PeakNormalize: negative or NaN value");
    if (t == 0 && !(points[0] > 0)) {
      throw InputError("PeakNormalize: first value must be positive");
    }
    peak = std::max(peak, points[t]);
    out.push_back(points[t] / peak);
  }
  return out;
}

Matrix MatricizeConvKernel(const Tensor& kernel) {
  if (!kernel.defined() || kernel.rank() != 4) {
    throw DimensionError("MatricizeConvKernel: expected a 4-d kernel, got " +
                         (kernel.defined() ? ShapeString(kernel.shape()) : std::string("<undefined>")));
  }
  const std::size_t o = kernel.dim(0);
  const std::size_t cols = kernel.dim(1) * kernel.dim(2) * kernel.dim(3);
  auto d = kernel.data();
  // Row-major storage of [O x C x kH x kW] already is [O x (C*kH*kW)].
  return Matrix(o, cols, std::vector<double>(d.begin(), d.end()));
}

Matrix TensorToMatrix(const Tensor& t) {
  if (t.defined() && t.rank() == 4) return MatricizeConvKernel(t);
  if (!t.defined() || t.rank() != 2) {
    throw DimensionError("TensorToMatrix: expected a 2-d or 4-d tensor");
  }
  auto d = t.data();
  return Matrix(t.dim(0), t.dim(1), std::vector<double>(d.begin(), d.end()));
}

double GroupErank(std::span<const Matrix> layers) {
  if (layers.empty()) throw InputError("GroupErank: empty layer group");
  double sum = 0;
  for (const auto& m : layers) sum += EffectiveRank(SingularValues(m));
  return sum / static_cast<double>(layers.size());
}

double ActivationErank(const Matrix& activations, const ActivationRankOptions& opts) {
  Matrix h = activations;
  if (opts.center && h.rows > 0) {
    for (std::size_t c = 0; c < h.cols; ++c) {
      double mean = 0;
      for (std::size_t r = 0; r < h.rows; ++r) mean += h(r, c);
      mean /= static_cast<double>(h.rows);
      for (std::size_t r = 0; r < h.rows; ++r) h(r, c) -= mean;
    }
  }
  SingularSpectrum s = SingularValues(h);
  if (opts.covariance) {
    for (double& v : s.values) v *= v;
  }
  return EffectiveRank(s);
}

std::string_view ProbeKindName(ProbeKind p) {
  return p == ProbeKind::kActivation ? "activation" : "weight";
}

std::string_view LayerGroupName(LayerGroup g) {
  switch (g) {
    case LayerGroup::kEarly: return "early";
    case LayerGroup::kMiddle: return "middle";
    case LayerGroup::kLate: return "late";
    case LayerGroup::kHead: return "head";
    case LayerGroup::kPenultimate: return "penultimate";
  }
  return "";
}

ProbeKind ParseProbeKind(std::string_view name) {
  if (name == "activation") return ProbeKind::kActivation;
  if (name == "weight") return ProbeKind::kWeight;
  throw InputError("unknown probe kind '" + std::string(name) + "'");
}

LayerGroup ParseLayerGroup(std::string_view name) {
  for (auto g : {LayerGroup::kEarly, LayerGroup::kMiddle, LayerGroup::kLate, LayerGroup::kHead,
                 LayerGroup::kPenultimate}) {
    if (LayerGroupName(g) == name) return g;
  }
  throw InputError("unknown layer group '" + std::string(name) + "'");
}

void ERankTrace::Append(int task_index, double erank) {
  if (!points_.empty() && task_index <= points_.back().first) {
    throw InputError("ERankTrace: task indices must strictly increase");
  }
  if (!(erank >= 0)) throw InputError("ERankTrace: negative effective rank");
  points_.emplace_back(task_index, erank);
}

std::vector<double> ERankTrace::values() const {
  std::vector<double> v;
  v.reserve(points_.size());
  for (const auto& p : points_) v.push_back(p.second);
  return v;
}

std::vector<double> ERankTrace::PeakNormalized() const {
  auto v = values();
  return PeakNormalize(v);
}

}  // namespace cllab
