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

#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "cllab/datasets.hpp"
#include "cllab/models.hpp"
#include "cllab/optim.hpp"
#include "cllab/rng.hpp"

namespace cllab {

enum class Method { kSgd, kEr, kLwf };

std::string_view MethodName(Method m);
Method ParseMethod(std::string_view name);

struct StrategyConfig {
  Method method = Method::kSgd;
  double lambda = 1.0;
  double temperature = 2.0;
  int buffer_capacity = 2000;

  /// Throws ConfigError.
  void Validate() const;
};

/// Fixed-capacity uniform sample of every item ever offered (reservoir
/// sampling). Labels are global class indices.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, std::uint64_t seed);

  /// stream_count += 1; append while below capacity, otherwise replace a
  /// uniformly chosen slot with probability capacity / stream_count.
  void Insert(std::span<const Scalar> input, const Shape& item_shape, int global_label);
  /// Inserts every row of a batch in order.
  void InsertBatch(const Batch& batch);

  /// `n` slots drawn uniformly with replacement; empty when the buffer is.
  std::vector<std::size_t> SampleIndices(std::size_t n, Rng& rng) const;
  Batch Sample(std::size_t n, std::uint64_t seed) const;
  Batch Sample(std::size_t n, Rng& rng) const;

  std::size_t size() const { return labels_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::uint64_t stream_count() const { return stream_count_; }
  const std::vector<int>& labels() const { return labels_; }
  std::span<const Scalar> input(std::size_t slot) const;

 private:
  std::size_t capacity_;
  std::uint64_t stream_count_ = 0;
  Rng rng_;
  Shape item_shape_;
  std::size_t item_size_ = 0;
  std::vector<Scalar> inputs_;
  std::vector<int> labels_;
};

/// Frozen deep copy of a model (evaluated in eval mode) and the tasks it knows.
struct TeacherSnapshot {
  Model model;
  std::vector<int> tasks_covered;
};

TeacherSnapshot MakeTeacherSnapshot(const Model& model, std::vector<int> tasks_covered);

struct LwfLoss {
  Tensor total;
  Tensor task;
  Tensor distill;  // T^2 * KL(teacher || student), already scaled by T^2
};

/// L = CE(task_logits, labels; mask) + lambda * T^2 * KL(softmax(teacher/T) || softmax(student/T)).
/// Student and teacher distillation logits must have identical shapes.
LwfLoss LwfTotalLoss(const Tensor& task_logits, std::span<const int> labels, const ClassMask& task_mask,
                     const Tensor& student_distill, const Tensor& teacher_distill, const StrategyConfig& cfg);

/// Single-logit-set form: the same logits serve the task loss and distillation.
inline LwfLoss LwfTotalLoss(const Tensor& student_logits, const Tensor& teacher_logits,
                            std::span<const int> labels, const StrategyConfig& cfg) {
  return LwfTotalLoss(student_logits, labels, {}, student_logits, teacher_logits, cfg);
}

struct TrainOptions {
  int epochs = 1;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  /// Called after every optimizer step with the running step count.
  std::function<void(std::size_t)> step_hook;
};

struct TrainStats {
  std::size_t steps = 0;
  double last_epoch_loss = 0;  // mean minibatch loss over the final epoch
};

/// One pass of the inner training loop for task `t` (1-based) of `seq`.
/// LwF snapshots the model before the first step (from task 2 on); ER mixes
/// an equal-sized replay sample into each minibatch and inserts the current
/// minibatch after the update; Class-IL masks cover every class seen so far.
TrainStats TrainTask(Model& model, const TaskSequence& seq, int t, const StrategyConfig& cfg,
                     ReplayBuffer& buffer, const OptimizerConfig& opt, const TrainOptions& options);

/// Appends the rows of `b` after those of `a` (no gradient history).
Batch ConcatBatches(const Batch& a, const Batch& b);

}  // namespace cllab
