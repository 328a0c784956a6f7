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
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace cllab {

#ifdef CLLAB_FLOAT32
using Scalar = float;
inline constexpr const char* kScalarName = "float32";
/// Multiplier applied to numerical tolerances in reduced precision builds.
inline constexpr double kToleranceScale = 100.0;
#else
using Scalar = double;
inline constexpr const char* kScalarName = "float64";
inline constexpr double kToleranceScale = 1.0;
#endif

using Shape = std::vector<std::size_t>;

std::size_t NumElements(const Shape& shape);
std::string ShapeString(const Shape& shape);

class Tensor;

namespace detail {

struct TensorImpl;

/// A recorded operation. `backward` reads the output's value and gradient and
/// accumulates into the inputs' gradients.
struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<Scalar> data;
  std::vector<Scalar> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::shared_ptr<Node> creator;  // null for leaves

  std::vector<Scalar>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), Scalar(0));
    return grad;
  }
};

}  // namespace detail

/// Dense row-major N-d array. Copies share storage; use Clone() for a deep
/// copy. Operations on tensors that require gradients are recorded so that
/// Backward() can propagate through them.
class Tensor {
 public:
  Tensor() = default;

  static Tensor Zeros(Shape shape, bool requires_grad = false);
  static Tensor Full(Shape shape, Scalar value, bool requires_grad = false);
  static Tensor FromData(Shape shape, std::vector<Scalar> values,
                         bool requires_grad = false);
  static Tensor ScalarValue(Scalar value);

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const Scalar> data() const { return impl_->data; }
  std::span<Scalar> mutable_data() { return impl_->data; }
  Scalar item() const;
  /// Element access by multi-index, for tests and diagnostics.
  Scalar at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value) { impl_->requires_grad = value; }
  bool is_leaf() const { return impl_->creator == nullptr; }

  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient as a tensor without graph history; zeros if none accumulated.
  Tensor grad() const;
  std::span<const Scalar> grad_data() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  /// Deep copy of the value, detached from the graph.
  Tensor Clone() const;
  Tensor Detach() const { return Clone(); }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// True unless a NoGradGuard is alive on this thread.
bool GradEnabled();

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls until cleared; intermediate gradients are released afterwards.
/// Throws UsageError for a non-scalar loss and NumericError if the loss or
/// any gradient is not finite.
void Backward(const Tensor& loss);

namespace detail {

/// Builds an op output. Records `node` only if grad mode is on and some input
/// requires a gradient.
Tensor MakeResult(Shape shape, std::vector<Scalar> values, const char* op,
                  std::vector<Tensor> inputs,
                  std::function<void(const TensorImpl& out)> backward);

}  // namespace detail

}  // namespace cllab
