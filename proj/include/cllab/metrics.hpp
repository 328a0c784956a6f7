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
#include <vector>

#include "cllab/datasets.hpp"
#include "cllab/linalg.hpp"
#include "cllab/models.hpp"

namespace cllab {

/// Acc(tau | t) for tau <= t, both 1-based. The upper triangle is undefined.
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  explicit AccuracyMatrix(int tasks);

  int size() const { return k_; }
  /// Throws ParameterError outside the lower triangle, InputError outside [0, 1].
  void Set(int t, int tau, double accuracy);
  std::optional<double> Get(int t, int tau) const;
  /// Throws InputError when the entry has not been recorded.
  double at(int t, int tau) const;
  /// Acc(1|t) .. Acc(t|t); throws InputError if any is missing.
  std::vector<double> Row(int t) const;
  /// Acc(k|k) .. Acc(k|T).
  std::vector<double> Column(int k, int T) const;
  std::size_t populated() const;

  bool operator==(const AccuracyMatrix& o) const { return k_ == o.k_ && cells_ == o.cells_; }

 private:
  std::size_t Index(int t, int tau) const;
  int k_ = 0;
  std::vector<std::optional<double>> cells_;
};

/// Fraction of `view` classified correctly. Task-IL compares against local
/// labels of `task`; Class-IL against global labels. Runs in eval mode
/// without recording a graph; throws InputError on an empty view.
double EvaluateTaskAccuracy(Model& model, const TaskView& view, const TaskSpec& task, const Routing& routing,
                            std::size_t chunk = 512);
/// Acc(tau | t): Task-IL routes to head tau, Class-IL masks to classes seen through t.
double EvaluateTaskAccuracy(Model& model, const TaskSequence& seq, int tau, int t, std::size_t chunk = 512);

/// Arithmetic mean of a populated row.
double AverageAccuracy(std::span<const double> row);
/// F_k = max_{t<T} Acc(k|t) - Acc(k|T) over the history Acc(k|k..T); unclamped.
double Forgetting(std::span<const double> history);
/// Throws InputError when T <= k.
double Forgetting(const AccuracyMatrix& m, int k, int T);
/// Mean of F_k over k < t; 0 when t = 1 (nothing to forget yet).
double AverageForgetting(const AccuracyMatrix& m, int t);

struct RunMetadata {
  std::string name;           // e.g. "mlp-sgd"
  std::string config_digest;  // hex SHA-256
  std::vector<std::uint64_t> seeds;
  std::string element_type;   // "float64" / "float32"
  double wall_clock_seconds = 0;
  std::map<std::string, std::string> config;  // canonical key=value pairs
};

std::string_view ElementTypeName();
std::string_view LibraryVersion();

/// Optional mid-task activation probe (probe.every_steps).
struct StepProbe {
  std::size_t step = 0;  // optimizer steps since the start of the run
  int task = 0;
  double erank = 0;
  bool operator==(const StepProbe&) const = default;
};

/// Everything exported for one run (one seed, or a seed mean).
struct MetricLog {
  AccuracyMatrix accuracy;
  std::vector<double> avg_accuracy;    // index t-1
  std::vector<double> avg_forgetting;  // index t-1
  std::vector<ERankTrace> traces;      // activation/penultimate first, then weight groups
  std::vector<StepProbe> step_probes;  // exported as erank_steps.csv when present
  RunMetadata meta;

  explicit MetricLog(int tasks = 0) : accuracy(tasks) {}
  int tasks() const { return accuracy.size(); }

  /// Stores Acc(1..t | t) and appends A(t) and mean forgetting at t.
  /// Rows must be recorded in order.
  void RecordRow(int t, std::span<const double> row);
  ERankTrace& Trace(ProbeKind probe, LayerGroup group);
  const ERankTrace* FindTrace(ProbeKind probe, LayerGroup group) const;
};

/// 512 (by default) test samples drawn evenly over every class in the
/// sequence with a fixed seed; remainder goes to the lowest classes.
Tensor MakeProbeSet(const TaskSequence& seq, std::size_t count, std::uint64_t seed);

/// Appends the penultimate activation eRank on `probe` and the weight eRank
/// of every layer group of the model, all at index `task`.
void RecordErankTrace(Model& model, int task, const Tensor& probe, MetricLog& log,
                      const ActivationRankOptions& opts = {});

/// Writes accuracy.csv, summary.csv, erank.csv and manifest.json into `dir`
/// (plus erank_steps.csv when step probes were recorded)
/// (created if needed). CSVs carry no timestamps. Throws IoError.
void ExportMetrics(const MetricLog& log, const std::filesystem::path& dir);
/// Reads the three CSVs (and manifest name/seeds when present) back.
/// Missing files are InputError; malformed rows are ParseError.
MetricLog ImportMetrics(const std::filesystem::path& dir);
AccuracyMatrix ImportAccuracyCsv(const std::filesystem::path& file);

/// Entry-wise mean over runs with identical task counts and traces.
MetricLog MeanLog(std::span<const MetricLog> runs);

/// Shortest decimal text that parses back to the same double.
std::string FormatDouble(double v);

}  // namespace cllab
