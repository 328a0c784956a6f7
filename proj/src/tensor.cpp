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

#include "cllab/tensor.hpp"

#include <cmath>
#include <unordered_set>

#include "cllab/error.hpp"

namespace cllab {

const char* ErrorKindName(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension: return "dimension error";
    case ErrorKind::kParameter: return "parameter error";
    case ErrorKind::kInput: return "input error";
    case ErrorKind::kNumeric: return "numeric error";
    case ErrorKind::kUsage: return "usage error";
    case ErrorKind::kParse: return "parse error";
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kIo: return "I/O error";
    case ErrorKind::kIntegrity: return "integrity error";
    case ErrorKind::kFetch: return "fetch error";
  }
  return "error";
}

std::size_t NumElements(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string ShapeString(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {
thread_local bool grad_enabled = true;
}  // namespace

bool GradEnabled() { return grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(grad_enabled) { grad_enabled = false; }
NoGradGuard::~NoGradGuard() { grad_enabled = previous_; }

Tensor Tensor::Zeros(Shape shape, bool requires_grad) {
  return Full(std::move(shape), Scalar(0), requires_grad);
}

Tensor Tensor::Full(Shape shape, Scalar value, bool requires_grad) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(NumElements(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::FromData(Shape shape, std::vector<Scalar> values, bool requires_grad) {
  if (NumElements(shape) != values.size()) {
    throw DimensionError("shape " + ShapeString(shape) + " holds " +
                         std::to_string(NumElements(shape)) + " elements, got " +
                         std::to_string(values.size()));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::ScalarValue(Scalar value) { return FromData({}, {value}); }

Scalar Tensor::item() const {
  if (numel() != 1) {
    throw UsageError("item() on tensor of shape " + ShapeString(shape()));
  }
  return impl_->data[0];
}

Scalar Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) {
    throw DimensionError("index rank " + std::to_string(index.size()) +
                         " for tensor of shape " + ShapeString(shape()));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= impl_->shape[axis]) {
      throw DimensionError("index out of range for shape " + ShapeString(shape()));
    }
    flat = flat * impl_->shape[axis] + i;
    ++axis;
  }
  return impl_->data[flat];
}

Tensor Tensor::grad() const {
  if (impl_->grad.empty()) return Zeros(impl_->shape);
  return FromData(impl_->shape, impl_->grad);
}

Tensor Tensor::Clone() const {
  return FromData(impl_->shape, impl_->data, false);
}

namespace detail {

Tensor MakeResult(Shape shape, std::vector<Scalar> values, const char* op,
                  std::vector<Tensor> inputs,
                  std::function<void(const TensorImpl& out)> backward) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  bool needs = false;
  if (GradEnabled()) {
    for (const auto& t : inputs) needs = needs || (t.defined() && t.requires_grad());
  }
  if (needs) {
    auto node = std::make_shared<Node>();
    node->op = op;
    for (auto& t : inputs) {
      if (t.defined()) node->inputs.push_back(t.impl());
    }
    node->backward = std::move(backward);
    impl->creator = std::move(node);
    impl->requires_grad = true;
  }
  return Tensor(std::move(impl));
}

}  // namespace detail

void Backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("Backward requires a scalar loss, got shape " +
                     (loss.defined() ? ShapeString(loss.shape()) : std::string("<undefined>")));
  }
  if (!std::isfinite(static_cast<double>(loss.item()))) {
    throw NumericError("non-finite loss value");
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order of the graph.
  using detail::TensorImpl;
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(loss.impl().get(), 0);
  visited.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->creator && next < node->creator->inputs.size()) {
      TensorImpl* child = node->creator->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  loss.impl()->grad_buffer()[0] += Scalar(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    if (!t->creator) continue;
    if (t->grad.empty()) continue;  // nothing flowed here
    for (Scalar g : t->grad) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericError(std::string("non-finite gradient produced by op '") +
                           t->creator->op + "'");
      }
    }
    t->creator->backward(*t);
  }
  for (TensorImpl* t : order) {
    if (t->creator) {
      t->grad.clear();
      t->grad.shrink_to_fit();
    } else {
      for (Scalar g : t->grad) {
        if (!std::isfinite(static_cast<double>(g))) {
          throw NumericError("non-finite gradient on a leaf tensor of shape " +
                             ShapeString(t->shape));
        }
      }
    }
  }
}

}  // namespace cllab
