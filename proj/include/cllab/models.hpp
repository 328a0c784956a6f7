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
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cllab/datasets.hpp"
#include "cllab/linalg.hpp"
#include "cllab/ops.hpp"
#include "cllab/optim.hpp"

namespace cllab {

enum class Arch { kMlp, kConvGru, kBiConvGru, kResNet };

std::string_view ArchName(Arch a);
Arch ParseArch(std::string_view name);

struct ModelSpec {
  Arch arch = Arch::kMlp;
  IlMode il_mode = IlMode::kTaskIl;
  int n_tasks = 5;
  int classes_per_task = 2;  // Task-IL head width
  int total_classes = 10;    // Class-IL head width

  std::size_t in_channels = 1;
  std::size_t in_height = 28;
  std::size_t in_width = 28;

  std::size_t mlp_hidden = 256;

  // ConvGRU feature extractor (four 3x3 convs) and recurrent width.
  std::vector<std::size_t> conv_channels{16, 32, 32, 64};
  std::vector<std::size_t> conv_strides{1, 2, 1, 2};
  std::size_t gru_hidden = 64;
  /// Sequence axis swept by the recurrent cell: "rows" or "cols".
  std::string sweep_axis = "rows";

  /// Stage widths are (64, 128, 256, 512) scaled by this factor.
  double resnet_width = 0.25;

  /// Throws ConfigError on inconsistent settings.
  void Validate() const;
  int head_count() const { return il_mode == IlMode::kTaskIl ? n_tasks : 1; }
  int head_width() const { return il_mode == IlMode::kTaskIl ? classes_per_task : total_classes; }
  std::vector<std::size_t> ResNetWidths() const;
  /// Canonical "key=value" lines, used by checkpoints and manifests.
  std::string Serialize() const;
  static ModelSpec Deserialize(std::string_view text);
};

/// Convolutional GRU gate parameters: W_* act on the input, U_* on the state.
struct ConvGruWeights {
  Tensor w_r, u_r, b_r;
  Tensor w_z, u_z, b_z;
  Tensor w_h, u_h, b_h;
};

/// One step of the gate equations as written:
///   r = sigmoid(W_r*x + U_r*h + b_r), z = sigmoid(W_z*x + U_z*h + b_z)
///   h~ = tanh(W_h*x + U_h*(r . h) + b_h), h' = (1 - z) . h + z . h~
/// with 3x3 same-padded convolutions. Throws DimensionError when x and h
/// differ spatially.
Tensor ConvGruCellStep(const Tensor& x, const Tensor& h_prev, const ConvGruWeights& w);

/// Sweeps a cell over rows (top to bottom, or bottom to top when `reverse`),
/// each row one timestep from a zero state; returns the per-row states
/// restacked as [N x C_h x H x W].
Tensor ConvGruSweep(const Tensor& features, const ConvGruWeights& w, bool reverse);

/// Forward and backward sweeps, channel-concatenated: [N x 2C_h x H x W].
Tensor BidirectionalSweep(const Tensor& features, const ConvGruWeights& fwd, const ConvGruWeights& bwd);

/// One basic residual block: conv3x3(stride)-BN-ReLU-conv3x3-BN plus the
/// shortcut (1x1 conv-BN when `shortcut_conv` is defined, identity otherwise),
/// followed by ReLU. `stats` holds bn1, bn2 and the shortcut BN, in that order.
struct ResidualBlockWeights {
  Tensor conv1, bn1_scale, bn1_shift;
  Tensor conv2, bn2_scale, bn2_shift;
  Tensor shortcut_conv, shortcut_scale, shortcut_shift;
};

Tensor ResidualBlock(const Tensor& x, const ResidualBlockWeights& w, std::size_t stride,
                     std::span<RunningStats> stats, BatchNormMode mode);

/// Head selection for a forward pass.
struct Routing {
  std::optional<int> task_id;                    // Task-IL, 1-based
  std::optional<std::vector<int>> seen_classes;  // Class-IL
};

using LayerGroupMap = std::map<LayerGroup, std::vector<std::string>>;

class Model {
 public:
  /// Parameters drawn from a fan-in uniform initialiser seeded by `seed`.
  static Model Build(const ModelSpec& spec, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }

  /// Penultimate features [N x d] (the classification head's input).
  Tensor Features(const Tensor& x);
  /// Logits of Task-IL head `task_id` on precomputed features.
  Tensor HeadLogits(const Tensor& features, int task_id);
  /// Shared-head logits with classes outside `seen` set to -inf.
  Tensor MaskedLogits(const Tensor& features, const std::vector<int>& seen);
  /// Shared-head logits without masking.
  Tensor SharedLogits(const Tensor& features);

  /// Routes per the model's mode; missing routing info is a UsageError.
  Tensor Forward(const Tensor& x, const Routing& routing);

  /// Eval-mode, gradient-free penultimate activations, in chunks.
  Matrix PenultimateActivations(const Tensor& x, std::size_t chunk = 256);

  LayerGroupMap LayerGroups() const;
  /// Matricized weights of one group (empty when the model lacks it).
  std::vector<Matrix> GroupMatrices(LayerGroup g) const;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  const Parameter& parameter(std::string_view name) const;
  Parameter& parameter(std::string_view name);
  std::size_t ParameterCount() const;

  /// Batch norm uses batch statistics in training mode.
  void set_training(bool t) { training_ = t; }
  bool training() const { return training_; }

  /// Independent deep copy (parameters, velocities, running statistics).
  Model Clone() const;

  void Save(const std::filesystem::path& p) const;
  static Model Load(const std::filesystem::path& p);

 private:
  Model() = default;
  Tensor& P(const std::string& name);
  void AddParameter(const std::string& name, Tensor value);
  Tensor ConvBn(const Tensor& x, const std::string& conv, const std::string& bn, std::size_t stride,
                std::size_t pad);
  ConvGruWeights Cell(const std::string& prefix);
  ResidualBlockWeights Block(const std::string& prefix);
  Tensor MlpFeatures(const Tensor& x);
  Tensor ConvGruFeatures(const Tensor& x);
  Tensor ResNetFeatures(const Tensor& x);

  ModelSpec spec_;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
  std::map<std::string, RunningStats> bn_stats_;
  bool training_ = true;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace cllab
