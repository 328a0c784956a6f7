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

#include <span>
#include <string>

#include "cllab/tensor.hpp"

namespace cllab {

/// A trainable tensor plus its momentum accumulator.
struct Parameter {
  std::string name;
  Tensor value;     // requires_grad
  Tensor velocity;  // same shape as value

  Parameter(std::string n, Tensor v);
  Parameter DeepCopy() const;
};

struct OptimizerConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;

  void Validate() const;
};

/// v <- momentum * v + grad; theta <- theta - lr * v; then clears grads.
/// Parameters without a gradient are left untouched.
void SgdMomentumStep(std::span<Parameter* const> params, const OptimizerConfig& cfg);

}  // namespace cllab
