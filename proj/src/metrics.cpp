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

#include "cllab/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cllab/error.hpp"
#include "cllab/rng.hpp"

#ifndef CLLAB_VERSION
#define CLLAB_VERSION "0.0.0"
#endif

namespace cllab {

// ---------------------------------------------------------------------------
// Accuracy matrix.

AccuracyMatrix::AccuracyMatrix(int tasks) : k_(tasks) {
  if (tasks < 0) throw ParameterError("negative task count");
  cells_.resize(static_cast<std::size_t>(tasks) * static_cast<std::size_t>(tasks + 1) / 2);
}

std::size_t AccuracyMatrix::Index(int t, int tau) const {
  if (t < 1 || t > k_ || tau < 1 || tau > t)
    throw ParameterError("accuracy entry (" + std::to_string(t) + ", " + std::to_string(tau) +
                         ") outside the lower triangle of a " + std::to_string(k_) + "-task matrix");
  return static_cast<std::size_t>(t - 1) * static_cast<std::size_t>(t) / 2 + static_cast<std::size_t>(tau - 1);
}

void AccuracyMatrix::Set(int t, int tau, double accuracy) {
  if (!(accuracy >= 0.0 && accuracy <= 1.0)) throw InputError("accuracy must lie in [0, 1]");
  cells_[Index(t, tau)] = accuracy;
}

std::optional<double> AccuracyMatrix::Get(int t, int tau) const { return cells_[Index(t, tau)]; }

double AccuracyMatrix::at(int t, int tau) const {
  auto v = Get(t, tau);
  if (!v) throw InputError("accuracy (" + std::to_string(t) + ", " + std::to_string(tau) + ") not recorded");
  return *v;
}

std::vector<double> AccuracyMatrix::Row(int t) const {
  std::vector<double> r;
  for (int tau = 1; tau <= t; ++tau) r.push_back(at(t, tau));
  return r;
}

std::vector<double> AccuracyMatrix::Column(int k, int T) const {
  std::vector<double> c;
  for (int t = k; t <= T; ++t) c.push_back(at(t, k));
  return c;
}

std::size_t AccuracyMatrix::populated() const {
  return static_cast<std::size_t>(std::count_if(cells_.begin(), cells_.end(), [](auto& c) { return c.has_value(); }));
}

// ---------------------------------------------------------------------------
// Evaluation.

double EvaluateTaskAccuracy(Model& model, const TaskView& view, const TaskSpec& task, const Routing& routing,
                            std::size_t chunk) {
  if (view.size() == 0) throw InputError("empty test set for task " + std::to_string(task.index));
  if (chunk == 0) throw ParameterError("chunk must be positive");
  NoGradGuard ng;
  const bool was_training = model.training();
  model.set_training(false);
  std::size_t correct = 0;
  std::vector<std::size_t> pos;
  for (std::size_t start = 0; start < view.size(); start += chunk) {
    pos.clear();
    for (std::size_t i = start; i < std::min(view.size(), start + chunk); ++i) pos.push_back(i);
    Batch b = GatherBatch(view, pos);
    Tensor logits = model.Forward(b.x, routing);
    const std::size_t c = logits.dim(1);
    auto d = logits.data();
    for (std::size_t i = 0; i < b.labels.size(); ++i) {
      auto row = d.subspan(i * c, c);
      int pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      int target = task.il_mode == IlMode::kTaskIl ? task.TrainingLabel(b.labels[i]) : b.labels[i];
      if (pred == target) ++correct;
    }
  }
  model.set_training(was_training);
  return static_cast<double>(correct) / static_cast<double>(view.size());
}

double EvaluateTaskAccuracy(Model& model, const TaskSequence& seq, int tau, int t, std::size_t chunk) {
  if (tau < 1 || tau > t || static_cast<std::size_t>(t) > seq.size())
    throw ParameterError("cannot evaluate task " + std::to_string(tau) + " after task " + std::to_string(t));
  const auto i = static_cast<std::size_t>(tau - 1);
  Routing r;
  if (seq.il_mode == IlMode::kTaskIl) {
    r.task_id = tau;
  } else {
    r.seen_classes = seq.SeenClasses(t);
  }
  return EvaluateTaskAccuracy(model, seq.test[i], seq.tasks[i], r, chunk);
}

double AverageAccuracy(std::span<const double> row) {
  if (row.empty()) throw InputError("average of an empty accuracy row");
  return std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(row.size());
}

double Forgetting(std::span<const double> history) {
  if (history.size() < 2) throw InputError("forgetting needs a measurement before the final one");
  return *std::max_element(history.begin(), history.end() - 1) - history.back();
}

double Forgetting(const AccuracyMatrix& m, int k, int T) {
  if (T <= k) throw InputError("forgetting of task " + std::to_string(k) + " is undefined at T=" + std::to_string(T));
  auto col = m.Column(k, T);
  return Forgetting(col);
}

double AverageForgetting(const AccuracyMatrix& m, int t) {
  if (t <= 1) return 0.0;
  double s = 0;
  for (int k = 1; k < t; ++k) s += Forgetting(m, k, t);
  return s / static_cast<double>(t - 1);
}

std::string_view ElementTypeName() { return sizeof(Scalar) == 8 ? "float64" : "float32"; }
std::string_view LibraryVersion() { return CLLAB_VERSION; }

// ---------------------------------------------------------------------------
// Metric log.

void MetricLog::RecordRow(int t, std::span<const double> row) {
  if (t != static_cast<int>(avg_accuracy.size()) + 1)
    throw UsageError("accuracy rows must be recorded in task order");
  if (row.size() != static_cast<std::size_t>(t)) throw DimensionError("accuracy row length must equal the task index");
  for (int tau = 1; tau <= t; ++tau) accuracy.Set(t, tau, row[static_cast<std::size_t>(tau - 1)]);
  avg_accuracy.push_back(AverageAccuracy(row));
  avg_forgetting.push_back(AverageForgetting(accuracy, t));
}

ERankTrace& MetricLog::Trace(ProbeKind probe, LayerGroup group) {
  for (auto& tr : traces)
    if (tr.probe() == probe && tr.group() == group) return tr;
  traces.emplace_back(probe, group);
  return traces.back();
}

const ERankTrace* MetricLog::FindTrace(ProbeKind probe, LayerGroup group) const {
  for (const auto& tr : traces)
    if (tr.probe() == probe && tr.group() == group) return &tr;
  return nullptr;
}

Tensor MakeProbeSet(const TaskSequence& seq, std::size_t count, std::uint64_t seed) {
  // Candidate test rows per class, in a seeded order.
  std::map<int, std::vector<std::pair<const TaskView*, std::size_t>>> by_class;
  for (const auto& view : seq.test)
    for (std::size_t i = 0; i < view.size(); ++i) by_class[view.label(i)].emplace_back(&view, i);
  if (by_class.empty()) throw InputError("probe set requested from an empty test split");
  Rng rng(seed);
  const std::size_t classes = by_class.size();
  std::vector<Scalar> values;
  Shape item;
  std::size_t taken = 0, ci = 0;
  for (auto& [cls, rows] : by_class) {
    rng.shuffle(rows);
    std::size_t want = count / classes + (ci++ < count % classes ? 1 : 0);
    want = std::min(want, rows.size());
    for (std::size_t j = 0; j < want; ++j) {
      std::size_t p = rows[j].second;
      Batch b = GatherBatch(*rows[j].first, std::span<const std::size_t>(&p, 1));
      if (item.empty()) item.assign(b.x.shape().begin() + 1, b.x.shape().end());
      values.insert(values.end(), b.x.data().begin(), b.x.data().end());
      ++taken;
    }
  }
  Shape shape{taken};
  shape.insert(shape.end(), item.begin(), item.end());
  return Tensor::FromData(std::move(shape), std::move(values));
}

void RecordErankTrace(Model& model, int task, const Tensor& probe, MetricLog& log,
                      const ActivationRankOptions& opts) {
  log.Trace(ProbeKind::kActivation, LayerGroup::kPenultimate)
      .Append(task, ActivationErank(model.PenultimateActivations(probe), opts));
  for (const auto& [group, names] : model.LayerGroups()) {
    auto mats = model.GroupMatrices(group);
    if (mats.empty()) continue;
    log.Trace(ProbeKind::kWeight, group).Append(task, GroupErank(mats));
  }
}

// ---------------------------------------------------------------------------
// Export / import.

std::string FormatDouble(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

namespace {

void WriteFile(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  out.flush();
  if (!out) throw IoError("write failed for " + p.string());
}

std::string ReadText(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError("missing metrics file " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct CsvRow {
  std::vector<std::string> fields;
  std::size_t offset;
};

std::vector<CsvRow> ReadCsv(const std::filesystem::path& p, std::string_view header) {
  const std::string text = ReadText(p);
  std::vector<CsvRow> rows;
  std::size_t at = 0;
  bool first = true;
  while (at < text.size()) {
    std::size_t end = text.find('\n', at);
    if (end == std::string::npos) end = text.size();
    std::string_view line(text.data() + at, end - at);
    if (first) {
      if (line != header) throw ParseError(p.filename().string() + ": expected header '" + std::string(header) + "'", at);
      first = false;
    } else if (!line.empty()) {
      CsvRow row{{}, at};
      std::size_t s = 0;
      while (true) {
        std::size_t c = line.find(',', s);
        row.fields.emplace_back(line.substr(s, c == std::string_view::npos ? std::string_view::npos : c - s));
        if (c == std::string_view::npos) break;
        s = c + 1;
      }
      rows.push_back(std::move(row));
    }
    at = end + 1;
  }
  if (first) throw ParseError(p.filename().string() + ": empty file", 0);
  return rows;
}

template <typename T>
T ParseField(const CsvRow& row, std::size_t i, const std::filesystem::path& p) {
  if (i >= row.fields.size()) throw ParseError(p.filename().string() + ": missing column", row.offset);
  const std::string& f = row.fields[i];
  T v{};
  auto r = std::from_chars(f.data(), f.data() + f.size(), v);
  if (r.ec != std::errc() || r.ptr != f.data() + f.size())
    throw ParseError(p.filename().string() + ": bad number '" + f + "'", row.offset);
  return v;
}

void CheckWidth(const CsvRow& row, std::size_t n, const std::filesystem::path& p) {
  if (row.fields.size() != n) throw ParseError(p.filename().string() + ": expected " + std::to_string(n) + " columns", row.offset);
}

}  // namespace

void ExportMetrics(const MetricLog& log, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  std::string acc = "after_task,eval_task,accuracy\n";
  for (int t = 1; t <= log.tasks(); ++t)
    for (int tau = 1; tau <= t; ++tau)
      if (auto v = log.accuracy.Get(t, tau))
        acc += std::to_string(t) + "," + std::to_string(tau) + "," + FormatDouble(*v) + "\n";
  WriteFile(dir / "accuracy.csv", acc);

  std::string sum = "task,avg_accuracy,avg_forgetting\n";
  for (std::size_t i = 0; i < log.avg_accuracy.size(); ++i)
    sum += std::to_string(i + 1) + "," + FormatDouble(log.avg_accuracy[i]) + "," +
           FormatDouble(i < log.avg_forgetting.size() ? log.avg_forgetting[i] : 0.0) + "\n";
  WriteFile(dir / "summary.csv", sum);

  // Task-major, then traces in log order.
  std::map<int, std::string> by_task;
  for (const auto& tr : log.traces) {
    auto pct = tr.PeakNormalized();
    const auto& pts = tr.points();
    for (std::size_t i = 0; i < pts.size(); ++i)
      by_task[pts[i].first] += std::to_string(pts[i].first) + "," + std::string(ProbeKindName(tr.probe())) + "," +
                               std::string(LayerGroupName(tr.group())) + "," + FormatDouble(pts[i].second) + "," +
                               FormatDouble(pct[i]) + "\n";
  }
  std::string er = "task,probe,group,erank,erank_pct\n";
  for (const auto& [t, lines] : by_task) er += lines;
  WriteFile(dir / "erank.csv", er);

  if (!log.step_probes.empty()) {
    std::string sp = "step,task,erank\n";
    for (const auto& p : log.step_probes)
      sp += std::to_string(p.step) + "," + std::to_string(p.task) + "," + FormatDouble(p.erank) + "\n";
    WriteFile(dir / "erank_steps.csv", sp);
  }

  nlohmann::ordered_json m;
  m["name"] = log.meta.name;
  m["version"] = std::string(LibraryVersion());
  m["element_type"] = log.meta.element_type.empty() ? std::string(ElementTypeName()) : log.meta.element_type;
  m["config_digest"] = log.meta.config_digest;
  m["seeds"] = log.meta.seeds;
  m["tasks"] = log.tasks();
  m["wall_clock_seconds"] = log.meta.wall_clock_seconds;
  m["config"] = log.meta.config;
  WriteFile(dir / "manifest.json", m.dump(2) + "\n");
}

AccuracyMatrix ImportAccuracyCsv(const std::filesystem::path& file) {
  auto rows = ReadCsv(file, "after_task,eval_task,accuracy");
  int k = 0;
  for (const auto& r : rows) {
    CheckWidth(r, 3, file);
    k = std::max(k, ParseField<int>(r, 0, file));
  }
  AccuracyMatrix m(k);
  for (const auto& r : rows) {
    int t = ParseField<int>(r, 0, file), tau = ParseField<int>(r, 1, file);
    if (tau < 1 || tau > t) throw ParseError(file.filename().string() + ": entry above the diagonal", r.offset);
    m.Set(t, tau, ParseField<double>(r, 2, file));
  }
  return m;
}

MetricLog ImportMetrics(const std::filesystem::path& dir) {
  MetricLog log;
  log.accuracy = ImportAccuracyCsv(dir / "accuracy.csv");

  const auto sp = dir / "summary.csv";
  for (const auto& r : ReadCsv(sp, "task,avg_accuracy,avg_forgetting")) {
    CheckWidth(r, 3, sp);
    if (ParseField<int>(r, 0, sp) != static_cast<int>(log.avg_accuracy.size()) + 1)
      throw InputError("summary.csv tasks are not consecutive");
    log.avg_accuracy.push_back(ParseField<double>(r, 1, sp));
    log.avg_forgetting.push_back(ParseField<double>(r, 2, sp));
  }
  if (static_cast<int>(log.avg_accuracy.size()) != log.tasks())
    throw InputError("summary.csv and accuracy.csv disagree on the task count in " + dir.string());

  const auto ep = dir / "erank.csv";
  for (const auto& r : ReadCsv(ep, "task,probe,group,erank,erank_pct")) {
    CheckWidth(r, 5, ep);
    ProbeKind probe;
    LayerGroup group;
    try {
      probe = ParseProbeKind(r.fields[1]);
      group = ParseLayerGroup(r.fields[2]);
    } catch (const Error&) {
      throw ParseError("erank.csv: unknown probe or group", r.offset);
    }
    log.Trace(probe, group).Append(ParseField<int>(r, 0, ep), ParseField<double>(r, 3, ep));
  }

  std::ifstream mf(dir / "manifest.json");
  if (mf) {
    try {
      auto j = nlohmann::json::parse(mf);
      log.meta.name = j.value("name", "");
      log.meta.config_digest = j.value("config_digest", "");
      log.meta.element_type = j.value("element_type", "");
      log.meta.seeds = j.value("seeds", std::vector<std::uint64_t>{});
      log.meta.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
      log.meta.config = j.value("config", std::map<std::string, std::string>{});
    } catch (const nlohmann::json::exception& e) {
      throw InputError("unreadable manifest in " + dir.string() + ": " + e.what());
    }
  }
  return log;
}

MetricLog MeanLog(std::span<const MetricLog> runs) {
  if (runs.empty()) throw InputError("mean of zero runs");
  const int k = runs[0].tasks();
  const double n = static_cast<double>(runs.size());
  MetricLog out(k);
  out.meta = runs[0].meta;
  out.meta.seeds.clear();
  out.meta.wall_clock_seconds = 0;
  for (const auto& r : runs) {
    if (r.tasks() != k || r.avg_accuracy.size() != runs[0].avg_accuracy.size() ||
        r.traces.size() != runs[0].traces.size())
      throw InputError("runs differ in shape and cannot be averaged");
    out.meta.seeds.insert(out.meta.seeds.end(), r.meta.seeds.begin(), r.meta.seeds.end());
    out.meta.wall_clock_seconds += r.meta.wall_clock_seconds;
  }
  for (int t = 1; t <= k; ++t)
    for (int tau = 1; tau <= t; ++tau) {
      if (!runs[0].accuracy.Get(t, tau)) continue;
      double s = 0;
      for (const auto& r : runs) s += r.accuracy.at(t, tau);
      out.accuracy.Set(t, tau, std::clamp(s / n, 0.0, 1.0));
    }
  for (std::size_t i = 0; i < runs[0].avg_accuracy.size(); ++i) {
    double a = 0, f = 0;
    for (const auto& r : runs) {
      a += r.avg_accuracy[i];
      f += r.avg_forgetting.at(i);
    }
    out.avg_accuracy.push_back(a / n);
    out.avg_forgetting.push_back(f / n);
  }
  for (const auto& tr : runs[0].traces) {
    ERankTrace& dst = out.Trace(tr.probe(), tr.group());
    for (std::size_t i = 0; i < tr.points().size(); ++i) {
      double s = 0;
      for (const auto& r : runs) {
        const ERankTrace* other = r.FindTrace(tr.probe(), tr.group());
        if (!other || other->points().size() != tr.points().size() ||
            other->points()[i].first != tr.points()[i].first)
          throw InputError("eRank traces differ between runs");
        s += other->points()[i].second;
      }
      dst.Append(tr.points()[i].first, s / n);
    }
  }
  return out;
}

}  // namespace cllab
