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
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cllab/datasets.hpp"
#include "cllab/error.hpp"
#include "cllab/metrics.hpp"
#include "cllab/models.hpp"
#include "cllab/optim.hpp"
#include "cllab/strategies.hpp"

namespace cllab {

enum class Benchmark { kSplitMnist, kSplitCifar100 };

std::string_view BenchmarkName(Benchmark b);
Benchmark ParseBenchmark(std::string_view name);

/// One fully resolved grid cell.
struct ExperimentConfig {
  Benchmark benchmark = Benchmark::kSplitMnist;
  Arch arch = Arch::kMlp;
  StrategyConfig strategy;
  OptimizerConfig optimizer;
  int epochs_per_task = 1;  // artifact default: 1 (MNIST) / 5 (CIFAR)
  std::size_t batch_size = 32;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  bool allow_any_pairing = false;

  // Model knobs.
  std::size_t mlp_hidden = 256;
  std::size_t gru_hidden = 64;
  std::string sweep_axis = "rows";

  // Desk-scale CIFAR.
  double resnet_width = 0.25;
  int cifar_classes = 50;
  int cifar_tasks = 10;
  bool paper_scale = false;

  // eRank probing.
  std::size_t probe_samples = 512;
  bool probe_center = false;
  std::size_t probe_every_steps = 0;  // 0: end of each task only

  std::filesystem::path output_dir = "out";
  std::filesystem::path data_dir;  // empty: DefaultDataDir()

  /// Canonical key=value pairs of every result-affecting setting, and their SHA-256.
  std::map<std::string, std::string> canonical;
  std::string digest;
  std::vector<std::string> warnings;

  /// "<arch>-<method>".
  std::string RunName() const;
};

/// Every accepted key ("section.key") and its default text.
const std::map<std::string, std::string>& ConfigDefaults();

/// Parses INI text; comma-separated values expand into a grid (cartesian
/// product in key order). Unknown keys, bad values and pairings outside the
/// architecture/benchmark grid (unless experiment.allow_any_pairing) are
/// ConfigError naming the key.
std::vector<ExperimentConfig> ParseConfigGrid(const std::string& ini_text);
std::vector<ExperimentConfig> LoadConfigGrid(const std::filesystem::path& file);
/// A config that must describe exactly one cell.
ExperimentConfig LoadConfig(const std::filesystem::path& file);
/// Resolves one cell from explicit overrides of the defaults.
ExperimentConfig ResolveConfig(const std::map<std::string, std::string>& values);

/// Restores the full-scale CIFAR protocol (20 tasks x 5 classes, full width).
void ApplyPaperScale(ExperimentConfig& cfg);
/// Replaces the seed list by a single seed.
void ApplySeedOverride(ExperimentConfig& cfg, std::uint64_t seed);

/// Loads the benchmark's task sequence from cfg.data_dir/<dataset>.
TaskSequence LoadBenchmark(const ExperimentConfig& cfg);
/// Model shape for the config on the given sequence's inputs.
ModelSpec MakeModelSpec(const ExperimentConfig& cfg, const TaskSequence& seq);

struct SeedRun {
  std::uint64_t seed = 0;
  std::optional<MetricLog> log;  // empty when the seed failed
  std::string error;
  std::optional<ErrorKind> error_kind;
};

struct ExperimentResult {
  std::filesystem::path dir;  // output_dir / RunName()
  std::vector<SeedRun> seeds;
  std::optional<MetricLog> mean;
  bool ok() const;
};

struct RunOptions {
  /// Use this sequence instead of loading cfg.benchmark from disk.
  const TaskSequence* sequence = nullptr;
  std::ostream* progress = nullptr;
  bool write_outputs = true;
};

/// Trains one seed through every task, recording the accuracy row and eRank
/// traces after each.
MetricLog RunSeed(const ExperimentConfig& cfg, const TaskSequence& seq, std::uint64_t seed,
                  std::ostream* progress = nullptr);

/// Runs every seed (a failing seed is reported and skipped), writes
/// <dir>/seed-N/ and the seed mean in <dir>/mean/.
ExperimentResult RunExperiment(const ExperimentConfig& cfg, const RunOptions& options = {});

/// Line charts (SVG) over the runs' mean metrics: accuracy, forgetting,
/// activation eRank and per-group weight eRank, raw and peak-normalized.
/// Each entry of `runs` is a run directory (its mean/ is used when present)
/// or a directory holding the CSVs. Returns the files written.
std::vector<std::filesystem::path> EmitPlots(const std::vector<std::filesystem::path>& runs,
                                             const std::filesystem::path& out);

}  // namespace cllab
