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

#include "cllab/optim.hpp"

#include "cllab/error.hpp"

namespace cllab {

Parameter::Parameter(std::string n, Tensor v)
    : name(std::move(n)), value(std::move(v)), velocity(Tensor::Zeros(value.shape())) {
  value.set_requires_grad(true);
}

Parameter Parameter::DeepCopy() const {
  Parameter p(name, value.Clone());
  p.velocity = velocity.Clone();
  return p;
}

void OptimizerConfig::Validate() const {
  if (!(learning_rate > 0)) {
    throw ConfigError("optimizer.learning_rate must be > 0, got " + std::to_string(learning_rate));
  }
  if (!(momentum >= 0 && momentum < 1)) {
    throw ConfigError("optimizer.momentum must lie in [0, 1), got " + std::to_string(momentum));
  }
}

void SgdMomentumStep(std::span<Parameter* const> params, const OptimizerConfig& cfg) {
  cfg.Validate();
  const auto lr = static_cast<Scalar>(cfg.learning_rate);
  const auto mu = static_cast<Scalar>(cfg.momentum);
  for (Parameter* p : params) {
    if (!p->value.has_grad()) continue;
    auto grad = p->value.grad_data();
    auto v = p->velocity.mutable_data();
    auto theta = p->value.mutable_data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      v[i] = mu * v[i] + grad[i];
      theta[i] -= lr * v[i];
    }
    p->value.zero_grad();
  }
}

}  // namespace cllab
