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

// Independent eigenvalue oracles for checking the Jacobi-based spectrum:
// power iteration with Hotelling deflation for tiny matrices, and Eigen's
// tridiagonal QR solver for larger ones.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cllab/linalg.hpp"

namespace cllab::testing {

inline Matrix GramOf(const Matrix& m) {
  Matrix g(m.cols, m.cols);
  for (std::size_t i = 0; i < m.cols; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) {
      double s = 0;
      for (std::size_t r = 0; r < m.rows; ++r) s += m(r, i) * m(r, j);
      g(i, j) = s;
    }
  return g;
}

/// Eigenvalues of a symmetric positive semidefinite matrix by power iteration
/// and deflation. Only suitable for small, well-separated spectra.
inline std::vector<double> PowerIterationEigenvalues(Matrix a) {
  const std::size_t n = a.rows;
  std::vector<double> out;
  for (std::size_t k = 0; k < n; ++k) {
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = 1.0 + 0.1 * static_cast<double>(i * i % 7);
    double lambda = 0;
    for (int it = 0; it < 200000; ++it) {
      std::vector<double> w(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) w[i] += a(i, j) * v[j];
      double norm = 0;
      for (double x : w) norm += x * x;
      norm = std::sqrt(norm);
      if (norm == 0) {
        lambda = 0;
        break;
      }
      for (auto& x : w) x /= norm;
      double diff = 0;
      for (std::size_t i = 0; i < n; ++i) diff = std::max(diff, std::abs(w[i] - v[i]));
      v = std::move(w);
      lambda = norm;
      if (diff < 1e-15) break;
    }
    out.push_back(lambda);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) a(i, j) -= lambda * v[i] * v[j];
  }
  std::sort(out.begin(), out.end(), std::greater<>());
  return out;
}

inline std::vector<double> ReferenceEigenvalues(const Matrix& sym) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(sym.rows), static_cast<Eigen::Index>(sym.cols));
  for (std::size_t i = 0; i < sym.rows; ++i)
    for (std::size_t j = 0; j < sym.cols; ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = sym(i, j);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m, Eigen::EigenvaluesOnly);
  std::vector<double> out(solver.eigenvalues().data(),
                          solver.eigenvalues().data() + solver.eigenvalues().size());
  std::sort(out.begin(), out.end(), std::greater<>());
  return out;
}

}  // namespace cllab::testing
