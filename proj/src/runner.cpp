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

#include "cllab/runner.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "cllab/error.hpp"
#include "cllab/rng.hpp"

namespace cllab {

std::string_view BenchmarkName(Benchmark b) {
  return b == Benchmark::kSplitMnist ? "split_mnist" : "split_cifar100";
}

Benchmark ParseBenchmark(std::string_view name) {
  if (name == "split_mnist" || name == "mnist") return Benchmark::kSplitMnist;
  if (name == "split_cifar100" || name == "cifar100") return Benchmark::kSplitCifar100;
  throw ConfigError("unknown benchmark '" + std::string(name) + "'");
}

std::string ExperimentConfig::RunName() const {
  return std::string(ArchName(arch)) + "-" + std::string(MethodName(strategy.method));
}

const std::map<std::string, std::string>& ConfigDefaults() {
  static const std::map<std::string, std::string> d{
      {"experiment.benchmark", "split_mnist"},
      {"experiment.arch", "mlp"},
      {"experiment.method", "sgd"},
      {"experiment.seed", "0"},
      {"experiment.num_seeds", "3"},
      {"experiment.epochs_per_task", "auto"},
      {"experiment.batch_size", "32"},
      {"experiment.allow_any_pairing", "false"},
      {"experiment.output_dir", "out"},
      {"experiment.data_dir", ""},
      {"optimizer.learning_rate", "0.01"},
      {"optimizer.momentum", "0.9"},
      {"strategy.lambda", "1"},
      {"strategy.temperature", "2"},
      {"strategy.buffer_capacity", "2000"},
      {"model.mlp_hidden", "256"},
      {"model.gru_hidden", "64"},
      {"model.sweep_axis", "rows"},
      {"desk.resnet_width", "0.25"},
      {"desk.cifar_classes", "50"},
      {"desk.cifar_tasks", "10"},
      {"desk.paper_scale", "false"},
      {"probe.samples", "512"},
      {"probe.center", "false"},
      {"probe.every_steps", "0"},
  };
  return d;
}

namespace {

// Keys that locate files rather than change results; kept out of the digest.
bool IsPathKey(const std::string& k) { return k == "experiment.output_dir" || k == "experiment.data_dir"; }

std::string Trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T Number(const std::map<std::string, std::string>& v, const std::string& key) {
  const std::string& s = v.at(key);
  T out{};
  auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || s.empty())
    throw ConfigError(key + ": '" + s + "' is not a valid number");
  return out;
}

bool Bool(const std::map<std::string, std::string>& v, const std::string& key) {
  const std::string& s = v.at(key);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError(key + ": '" + s + "' is not a boolean");
}

// Normalized text so that equivalent spellings share a digest.
std::string NormalizeNumber(const std::string& s) {
  double d{};
  auto r = std::from_chars(s.data(), s.data() + s.size(), d);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) return s;
  return FormatDouble(d);
}

}  // namespace

ExperimentConfig ResolveConfig(const std::map<std::string, std::string>& values) {
  std::map<std::string, std::string> v = ConfigDefaults();
  for (const auto& [k, val] : values) {
    if (!v.count(k)) throw ConfigError("unknown config key '" + k + "'");
    v[k] = Trim(val);
  }

  ExperimentConfig c;
  auto wrap = [](const std::string& key, auto fn) {
    try {
      fn();
    } catch (const ConfigError& e) {
      const std::string what = e.what();
      if (what.rfind(key, 0) == 0) throw;
      throw ConfigError(key + ": " + what);
    } catch (const Error& e) {
      throw ConfigError(key + ": " + e.what());
    }
  };
  wrap("experiment.benchmark", [&] { c.benchmark = ParseBenchmark(v["experiment.benchmark"]); });
  wrap("experiment.arch", [&] { c.arch = ParseArch(v["experiment.arch"]); });
  wrap("experiment.method", [&] { c.strategy.method = ParseMethod(v["experiment.method"]); });

  const bool cifar = c.benchmark == Benchmark::kSplitCifar100;
  const auto seed = Number<std::uint64_t>(v, "experiment.seed");
  const auto n_seeds = Number<int>(v, "experiment.num_seeds");
  if (n_seeds < 1) throw ConfigError("experiment.num_seeds must be >= 1");
  c.seeds.clear();
  for (int i = 0; i < n_seeds; ++i) c.seeds.push_back(seed + static_cast<std::uint64_t>(i));

  if (v["experiment.epochs_per_task"] == "auto") v["experiment.epochs_per_task"] = cifar ? "5" : "1";
  c.epochs_per_task = Number<int>(v, "experiment.epochs_per_task");
  if (c.epochs_per_task < 1) throw ConfigError("experiment.epochs_per_task must be >= 1");
  c.batch_size = Number<std::size_t>(v, "experiment.batch_size");
  if (c.batch_size < 1) throw ConfigError("experiment.batch_size must be >= 1");
  c.allow_any_pairing = Bool(v, "experiment.allow_any_pairing");
  c.output_dir = v["experiment.output_dir"];
  c.data_dir = v["experiment.data_dir"];

  c.optimizer.learning_rate = Number<double>(v, "optimizer.learning_rate");
  c.optimizer.momentum = Number<double>(v, "optimizer.momentum");
  wrap("optimizer", [&] { c.optimizer.Validate(); });

  c.strategy.lambda = Number<double>(v, "strategy.lambda");
  c.strategy.temperature = Number<double>(v, "strategy.temperature");
  c.strategy.buffer_capacity = Number<int>(v, "strategy.buffer_capacity");
  if (!(c.strategy.lambda >= 0)) throw ConfigError("strategy.lambda must be >= 0");
  if (!(c.strategy.temperature > 0)) throw ConfigError("strategy.temperature must be > 0");
  if (c.strategy.buffer_capacity < 0) throw ConfigError("strategy.buffer_capacity must be >= 0");

  c.mlp_hidden = Number<std::size_t>(v, "model.mlp_hidden");
  c.gru_hidden = Number<std::size_t>(v, "model.gru_hidden");
  c.sweep_axis = v["model.sweep_axis"];
  if (c.sweep_axis != "rows" && c.sweep_axis != "cols") throw ConfigError("model.sweep_axis must be rows or cols");
  if (c.mlp_hidden < 1 || c.gru_hidden < 1) throw ConfigError("model widths must be >= 1");

  c.resnet_width = Number<double>(v, "desk.resnet_width");
  if (!(c.resnet_width > 0 && c.resnet_width <= 4)) throw ConfigError("desk.resnet_width must lie in (0, 4]");
  c.cifar_classes = Number<int>(v, "desk.cifar_classes");
  c.cifar_tasks = Number<int>(v, "desk.cifar_tasks");
  if (c.cifar_classes < 1 || c.cifar_classes > 100) throw ConfigError("desk.cifar_classes must lie in [1, 100]");
  if (c.cifar_tasks < 1 || c.cifar_classes % c.cifar_tasks != 0)
    throw ConfigError("desk.cifar_tasks must divide desk.cifar_classes");
  c.paper_scale = Bool(v, "desk.paper_scale");

  c.probe_samples = Number<std::size_t>(v, "probe.samples");
  if (c.probe_samples < 1) throw ConfigError("probe.samples must be >= 1");
  c.probe_center = Bool(v, "probe.center");
  c.probe_every_steps = Number<std::size_t>(v, "probe.every_steps");

  const bool mnist_arch = c.arch == Arch::kMlp || c.arch == Arch::kConvGru;
  if (!c.allow_any_pairing && mnist_arch == cifar)
    throw ConfigError("experiment.arch: " + std::string(ArchName(c.arch)) + " is not paired with " +
                      std::string(BenchmarkName(c.benchmark)) + " (set experiment.allow_any_pairing = true)");

  for (const auto& [k, val] : v) {
    if (IsPathKey(k)) continue;
    c.canonical[k] = NormalizeNumber(val);
  }
  if (c.paper_scale) ApplyPaperScale(c);
  std::string text;
  for (const auto& [k, val] : c.canonical) text += k + "=" + val + "\n";
  c.digest = Sha256Hex(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  return c;
}

void ApplyPaperScale(ExperimentConfig& cfg) {
  cfg.paper_scale = true;
  cfg.cifar_classes = 100;
  cfg.cifar_tasks = 20;
  cfg.resnet_width = 1.0;
  cfg.canonical["desk.paper_scale"] = "true";
  cfg.canonical["desk.cifar_classes"] = "100";
  cfg.canonical["desk.cifar_tasks"] = "20";
  cfg.canonical["desk.resnet_width"] = "1";
  std::string text;
  for (const auto& [k, val] : cfg.canonical) text += k + "=" + val + "\n";
  cfg.digest = Sha256Hex(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  if (cfg.benchmark == Benchmark::kSplitCifar100)
    cfg.warnings.push_back("paper scale: full-width ResNet over 20 tasks; expect many CPU hours per seed");
}

void ApplySeedOverride(ExperimentConfig& cfg, std::uint64_t seed) { cfg.seeds = {seed}; }

std::vector<ExperimentConfig> ParseConfigGrid(const std::string& ini_text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(ini_text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  // Flatten; keys outside a section belong to [experiment].
  std::map<std::string, std::vector<std::string>> axes;
  for (const auto& [section, node] : tree) {
    if (node.empty()) {
      axes["experiment." + section] = {node.data()};
      continue;
    }
    for (const auto& [key, leaf] : node) {
      const std::string full = section + "." + key;
      if (!ConfigDefaults().count(full)) throw ConfigError("unknown config key '" + full + "'");
      std::vector<std::string> opts;
      const std::string& raw = leaf.data();
      std::size_t s = 0;
      while (true) {
        std::size_t c = raw.find(',', s);
        opts.push_back(Trim(std::string_view(raw).substr(s, c == std::string::npos ? std::string::npos : c - s)));
        if (c == std::string::npos) break;
        s = c + 1;
      }
      axes[full] = std::move(opts);
    }
  }
  for (const auto& [k, opts] : axes)
    if (!ConfigDefaults().count(k)) throw ConfigError("unknown config key '" + k + "'");

  std::vector<std::map<std::string, std::string>> cells{{}};
  for (const auto& [k, opts] : axes) {
    std::vector<std::map<std::string, std::string>> next;
    for (const auto& cell : cells)
      for (const auto& o : opts) {
        auto c = cell;
        c[k] = o;
        next.push_back(std::move(c));
      }
    cells = std::move(next);
  }
  std::vector<ExperimentConfig> out;
  for (const auto& cell : cells) out.push_back(ResolveConfig(cell));
  return out;
}

std::vector<ExperimentConfig> LoadConfigGrid(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ParseConfigGrid(ss.str());
}

ExperimentConfig LoadConfig(const std::filesystem::path& file) {
  auto grid = LoadConfigGrid(file);
  if (grid.size() != 1)
    throw ConfigError(file.string() + " expands to " + std::to_string(grid.size()) + " grid cells; use `grid`");
  return grid[0];
}

// ---------------------------------------------------------------------------
// Running.

TaskSequence LoadBenchmark(const ExperimentConfig& cfg) {
  const auto root = cfg.data_dir.empty() ? DefaultDataDir() : cfg.data_dir;
  if (cfg.benchmark == Benchmark::kSplitMnist) return LoadSplitMnist(root / "mnist");
  return LoadSplitCifar100(root / "cifar100", cfg.cifar_tasks, cfg.cifar_classes, std::nullopt);
}

ModelSpec MakeModelSpec(const ExperimentConfig& cfg, const TaskSequence& seq) {
  if (seq.size() == 0) throw InputError("empty task sequence");
  ModelSpec s;
  s.arch = cfg.arch;
  s.il_mode = seq.il_mode;
  s.n_tasks = static_cast<int>(seq.size());
  s.classes_per_task = static_cast<int>(seq.tasks[0].global_classes.size());
  s.total_classes = seq.total_classes;
  const Shape& shape = seq.train[0].source->images.shape();
  s.in_channels = shape[1];
  s.in_height = shape[2];
  s.in_width = shape[3];
  s.mlp_hidden = cfg.mlp_hidden;
  s.gru_hidden = cfg.gru_hidden;
  s.sweep_axis = cfg.sweep_axis;
  s.resnet_width = cfg.resnet_width;
  s.Validate();
  return s;
}

namespace {

std::string Fixed(double v, int digits = 3) {
  std::ostringstream ss;
  ss.setf(std::ios::fixed);
  ss.precision(digits);
  ss << v;
  return ss.str();
}

}  // namespace

MetricLog RunSeed(const ExperimentConfig& cfg, const TaskSequence& seq, std::uint64_t seed, std::ostream* progress) {
  const auto start = std::chrono::steady_clock::now();
  const ModelSpec spec = MakeModelSpec(cfg, seq);
  Model model = Model::Build(spec, DeriveSeed(seed, "init"));
  ReplayBuffer buffer(static_cast<std::size_t>(cfg.strategy.buffer_capacity), DeriveSeed(seed, "reservoir"));
  const Tensor probe = MakeProbeSet(seq, cfg.probe_samples, DeriveSeed(seed, "probe"));
  const ActivationRankOptions rank_opts{cfg.probe_center, false};

  const int k = static_cast<int>(seq.size());
  MetricLog log(k);
  log.meta.name = cfg.RunName();
  log.meta.config_digest = cfg.digest;
  log.meta.seeds = {seed};
  log.meta.element_type = std::string(ElementTypeName());
  log.meta.config = cfg.canonical;

  TrainOptions topt;
  topt.epochs = cfg.epochs_per_task;
  topt.batch_size = cfg.batch_size;
  topt.seed = DeriveSeed(seed, "train");
  int current_task = 0;
  std::size_t steps_before = 0;
  if (cfg.probe_every_steps > 0) {
    topt.step_hook = [&](std::size_t step) {
      const std::size_t global = steps_before + step;
      if (global % cfg.probe_every_steps == 0)
        log.step_probes.push_back({global, current_task, ActivationErank(model.PenultimateActivations(probe), rank_opts)});
    };
  }

  for (int t = 1; t <= k; ++t) {
    current_task = t;
    TrainStats st = TrainTask(model, seq, t, cfg.strategy, buffer, cfg.optimizer, topt);
    steps_before += st.steps;
    std::vector<double> row;
    for (int tau = 1; tau <= t; ++tau) row.push_back(EvaluateTaskAccuracy(model, seq, tau, t));
    log.RecordRow(t, row);
    RecordErankTrace(model, t, probe, log, rank_opts);
    if (progress) {
      *progress << "[" << cfg.RunName() << " seed " << seed << "] task " << t << "/" << k
                << " loss=" << Fixed(st.last_epoch_loss, 4) << " A=" << Fixed(log.avg_accuracy.back())
                << " F=" << Fixed(log.avg_forgetting.back()) << " erank="
                << Fixed(log.FindTrace(ProbeKind::kActivation, LayerGroup::kPenultimate)->values().back(), 2)
                << std::endl;
    }
  }
  log.meta.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return log;
}

bool ExperimentResult::ok() const {
  return !seeds.empty() && std::all_of(seeds.begin(), seeds.end(), [](const SeedRun& s) { return s.log.has_value(); });
}

ExperimentResult RunExperiment(const ExperimentConfig& cfg, const RunOptions& options) {
  for (const auto& w : cfg.warnings)
    if (options.progress) *options.progress << "warning: " << w << std::endl;
  std::optional<TaskSequence> loaded;
  const TaskSequence* seq = options.sequence;
  if (!seq) {
    loaded = LoadBenchmark(cfg);
    seq = &*loaded;
  }
  ExperimentResult res;
  res.dir = cfg.output_dir / cfg.RunName();
  std::vector<MetricLog> done;
  for (std::uint64_t seed : cfg.seeds) {
    SeedRun sr;
    sr.seed = seed;
    try {
      sr.log = RunSeed(cfg, *seq, seed, options.progress);
      if (options.write_outputs) ExportMetrics(*sr.log, res.dir / ("seed-" + std::to_string(seed)));
      done.push_back(*sr.log);
    } catch (const Error& e) {
      sr.error = e.what();
      sr.error_kind = e.kind();
      if (options.progress) *options.progress << "[" << cfg.RunName() << " seed " << seed << "] failed: " << e.what() << std::endl;
    }
    res.seeds.push_back(std::move(sr));
  }
  if (!done.empty()) {
    res.mean = MeanLog(done);
    if (options.write_outputs) ExportMetrics(*res.mean, res.dir / "mean");
  }
  return res;
}

}  // namespace cllab
