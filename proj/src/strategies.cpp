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

#include "cllab/strategies.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "cllab/error.hpp"

namespace cllab {

std::string_view MethodName(Method m) {
  switch (m) {
    case Method::kSgd: return "sgd";
    case Method::kEr: return "er";
    case Method::kLwf: return "lwf";
  }
  return "?";
}

Method ParseMethod(std::string_view name) {
  if (name == "sgd") return Method::kSgd;
  if (name == "er") return Method::kEr;
  if (name == "lwf") return Method::kLwf;
  throw ConfigError("unknown method '" + std::string(name) + "' (expected sgd, er or lwf)");
}

void StrategyConfig::Validate() const {
  if (!(std::isfinite(lambda) && lambda >= 0))
    throw ConfigError("lambda must be finite and >= 0");
  if (!(std::isfinite(temperature) && temperature > 0))
    throw ConfigError("temperature must be finite and > 0");
  if (buffer_capacity < 0) throw ConfigError("buffer capacity must be >= 0");
}

// ---------------------------------------------------------------------------
// Replay buffer.

ReplayBuffer::ReplayBuffer(std::size_t capacity, std::uint64_t seed) : capacity_(capacity), rng_(seed) {}

void ReplayBuffer::Insert(std::span<const Scalar> input, const Shape& item_shape, int global_label) {
  if (item_size_ == 0) {
    item_shape_ = item_shape;
    item_size_ = NumElements(item_shape);
  } else if (item_shape != item_shape_) {
    throw DimensionError("replay item shape " + ShapeString(item_shape) + " differs from buffer shape " +
                         ShapeString(item_shape_));
  }
  if (input.size() != item_size_) throw DimensionError("replay item size does not match its shape");

  ++stream_count_;
  std::size_t slot;
  if (labels_.size() < capacity_) {
    slot = labels_.size();
    labels_.push_back(global_label);
    inputs_.resize(inputs_.size() + item_size_);
  } else {
    std::uint64_t j = rng_.below(stream_count_);
    if (j >= capacity_) return;
    slot = static_cast<std::size_t>(j);
    labels_[slot] = global_label;
  }
  std::copy(input.begin(), input.end(), inputs_.begin() + static_cast<std::ptrdiff_t>(slot * item_size_));
}

void ReplayBuffer::InsertBatch(const Batch& batch) {
  if (batch.labels.empty()) return;
  Shape item(batch.x.shape().begin() + 1, batch.x.shape().end());
  std::size_t sz = NumElements(item);
  auto data = batch.x.data();
  for (std::size_t i = 0; i < batch.labels.size(); ++i) Insert(data.subspan(i * sz, sz), item, batch.labels[i]);
}

std::vector<std::size_t> ReplayBuffer::SampleIndices(std::size_t n, Rng& rng) const {
  std::vector<std::size_t> out;
  if (labels_.empty()) return out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(static_cast<std::size_t>(rng.below(labels_.size())));
  return out;
}

Batch ReplayBuffer::Sample(std::size_t n, std::uint64_t seed) const {
  Rng rng(seed);
  return Sample(n, rng);
}

Batch ReplayBuffer::Sample(std::size_t n, Rng& rng) const {
  Batch b;
  auto idx = SampleIndices(n, rng);
  if (idx.empty()) return b;
  Shape shape{idx.size()};
  shape.insert(shape.end(), item_shape_.begin(), item_shape_.end());
  std::vector<Scalar> values(idx.size() * item_size_);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto src = input(idx[i]);
    std::copy(src.begin(), src.end(), values.begin() + static_cast<std::ptrdiff_t>(i * item_size_));
    b.labels.push_back(labels_[idx[i]]);
  }
  b.source_rows = std::move(idx);
  b.x = Tensor::FromData(std::move(shape), std::move(values));
  return b;
}

std::span<const Scalar> ReplayBuffer::input(std::size_t slot) const {
  if (slot >= labels_.size()) throw ParameterError("replay slot out of range");
  return std::span<const Scalar>(inputs_).subspan(slot * item_size_, item_size_);
}

Batch ConcatBatches(const Batch& a, const Batch& b) {
  if (b.labels.empty()) return a;
  if (a.labels.empty()) return b;
  if (!std::equal(a.x.shape().begin() + 1, a.x.shape().end(), b.x.shape().begin() + 1, b.x.shape().end()))
    throw DimensionError("cannot concatenate batches of " + ShapeString(a.x.shape()) + " and " +
                         ShapeString(b.x.shape()));
  Shape shape = a.x.shape();
  shape[0] += b.x.dim(0);
  std::vector<Scalar> values(a.x.data().begin(), a.x.data().end());
  values.insert(values.end(), b.x.data().begin(), b.x.data().end());
  Batch out;
  out.x = Tensor::FromData(std::move(shape), std::move(values));
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.source_rows = a.source_rows;
  out.source_rows.insert(out.source_rows.end(), b.source_rows.begin(), b.source_rows.end());
  return out;
}

// ---------------------------------------------------------------------------
// Distillation.

TeacherSnapshot MakeTeacherSnapshot(const Model& model, std::vector<int> tasks_covered) {
  TeacherSnapshot s{model.Clone(), std::move(tasks_covered)};
  s.model.set_training(false);
  return s;
}

namespace {

// T^2 * KL(softmax(teacher / T) || softmax(student / T)); the teacher side is constant.
Tensor DistillationTerm(const Tensor& student, const Tensor& teacher, double temperature) {
  const Scalar temp = static_cast<Scalar>(temperature);
  Tensor p;
  {
    NoGradGuard ng;
    p = SoftmaxWithTemperature(teacher.Detach(), temp);
  }
  return Scale(KlDivergence(p, SoftmaxWithTemperature(student, temp)), temp * temp);
}

}  // namespace

LwfLoss LwfTotalLoss(const Tensor& task_logits, std::span<const int> labels, const ClassMask& task_mask,
                     const Tensor& student_distill, const Tensor& teacher_distill, const StrategyConfig& cfg) {
  if (student_distill.shape() != teacher_distill.shape())
    throw DimensionError("student logits " + ShapeString(student_distill.shape()) +
                         " are not aligned with teacher logits " + ShapeString(teacher_distill.shape()));
  cfg.Validate();
  LwfLoss out;
  out.task = CrossEntropyLoss(task_logits, labels, task_mask);
  out.distill = DistillationTerm(student_distill, teacher_distill, cfg.temperature);
  out.total = Add(out.task, Scale(out.distill, static_cast<Scalar>(cfg.lambda)));
  return out;
}

// ---------------------------------------------------------------------------
// Training loop.

namespace {

// Mean cross-entropy over a batch whose rows may belong to different
// Task-IL heads: sum_g CE_g * n_g / B.
Tensor TaskIlLoss(Model& model, const Tensor& features, const std::vector<int>& labels,
                  const TaskSequence& seq, const std::map<int, int>& task_of_class) {
  std::map<int, std::vector<std::size_t>> rows;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto it = task_of_class.find(labels[i]);
    if (it == task_of_class.end()) throw InputError("label " + std::to_string(labels[i]) + " belongs to no task");
    rows[it->second].push_back(i);
  }
  const double b = static_cast<double>(labels.size());
  Tensor total;
  for (const auto& [task, r] : rows) {
    const TaskSpec& spec = seq.tasks[static_cast<std::size_t>(task - 1)];
    std::vector<int> local;
    local.reserve(r.size());
    for (std::size_t i : r) local.push_back(spec.TrainingLabel(labels[i]));
    Tensor loss;
    if (rows.size() == 1) {
      loss = CrossEntropyLoss(model.HeadLogits(features, task), local);
    } else {
      loss = Scale(CrossEntropyLoss(model.HeadLogits(GatherRows(features, r), task), local),
                   static_cast<Scalar>(static_cast<double>(r.size()) / b));
    }
    total = total.defined() ? Add(total, loss) : loss;
  }
  return total;
}

ClassMask MaskFor(const std::vector<int>& seen, int width) {
  ClassMask mask(static_cast<std::size_t>(width), false);
  for (int c : seen) {
    if (c < 0 || c >= width)
      throw DimensionError("class " + std::to_string(c) + " exceeds head width " + std::to_string(width));
    mask[static_cast<std::size_t>(c)] = true;
  }
  return mask;
}

// Logits the teacher and student are compared on: every earlier head
// concatenated (Task-IL), or the shared head restricted to earlier classes.
Tensor DistillLogits(Model& model, const Tensor& features, const TaskSequence& seq, int t) {
  if (seq.il_mode == IlMode::kTaskIl) {
    std::vector<Tensor> parts;
    for (int tau = 1; tau < t; ++tau) parts.push_back(model.HeadLogits(features, tau));
    return parts.size() == 1 ? parts[0] : ConcatColumns(parts);
  }
  auto prev = seq.SeenClasses(t - 1);
  std::vector<std::size_t> cols(prev.begin(), prev.end());
  return SelectColumns(model.SharedLogits(features), cols);
}

}  // namespace

TrainStats TrainTask(Model& model, const TaskSequence& seq, int t, const StrategyConfig& cfg,
                     ReplayBuffer& buffer, const OptimizerConfig& opt, const TrainOptions& options) {
  cfg.Validate();
  opt.Validate();
  if (t < 1 || static_cast<std::size_t>(t) > seq.size())
    throw ParameterError("task index " + std::to_string(t) + " outside 1.." + std::to_string(seq.size()));
  if (options.epochs < 1) throw ParameterError("epochs must be >= 1");
  if (model.spec().il_mode != seq.il_mode) throw ConfigError("model and task sequence disagree on IL mode");

  std::map<int, int> task_of_class;
  for (const auto& spec : seq.tasks)
    for (int c : spec.global_classes) task_of_class[c] = spec.index;

  const bool class_il = seq.il_mode == IlMode::kClassIl;
  const std::vector<int> seen = seq.SeenClasses(t);
  const ClassMask mask = class_il ? MaskFor(seen, model.spec().total_classes) : ClassMask{};

  std::optional<TeacherSnapshot> teacher;
  if (cfg.method == Method::kLwf && t > 1) {
    std::vector<int> covered;
    for (int tau = 1; tau < t; ++tau) covered.push_back(tau);
    teacher = MakeTeacherSnapshot(model, std::move(covered));
  }

  const std::string tag = "task-" + std::to_string(t);
  Rng replay_rng(DeriveSeed(options.seed, "replay/" + tag));
  auto params = model.parameters();
  model.set_training(true);

  TrainStats stats;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    MinibatchIterator it(seq.train[static_cast<std::size_t>(t - 1)], options.batch_size,
                         DeriveSeed(options.seed, "shuffle/" + tag + "/epoch-" + std::to_string(epoch)));
    double loss_sum = 0;
    std::size_t batches = 0;
    Batch current;
    while (it.Next(current)) {
      Batch mixed = current;
      if (cfg.method == Method::kEr)
        mixed = ConcatBatches(current, buffer.Sample(current.labels.size(), replay_rng));

      Tensor features = model.Features(mixed.x);
      Tensor loss;
      if (class_il) {
        loss = CrossEntropyLoss(model.SharedLogits(features), mixed.labels, mask);
      } else {
        loss = TaskIlLoss(model, features, mixed.labels, seq, task_of_class);
      }
      // lambda = 0 skips the term entirely: a zero gradient would still let
      // momentum move the earlier heads, which plain fine-tuning leaves alone.
      if (cfg.method == Method::kLwf && t > 1 && cfg.lambda > 0) {
        Tensor teacher_logits;
        {
          NoGradGuard ng;
          teacher_logits = DistillLogits(teacher->model, teacher->model.Features(mixed.x), seq, t);
        }
        Tensor distill = DistillationTerm(DistillLogits(model, features, seq, t), teacher_logits, cfg.temperature);
        loss = Add(loss, Scale(distill, static_cast<Scalar>(cfg.lambda)));
      }

      Backward(loss);
      SgdMomentumStep(params, opt);
      if (cfg.method == Method::kEr) buffer.InsertBatch(current);

      loss_sum += static_cast<double>(loss.item());
      ++batches;
      ++stats.steps;
      if (options.step_hook) options.step_hook(stats.steps);
    }
    stats.last_epoch_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
  }
  return stats;
}

}  // namespace cllab
