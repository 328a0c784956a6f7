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

// Command-line front end: fetch datasets, run experiments and grids, plot.

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "cllab/datasets.hpp"
#include "cllab/error.hpp"
#include "cllab/runner.hpp"

namespace {

using namespace cllab;

int RunCells(std::vector<ExperimentConfig> cells, std::optional<std::uint64_t> seed,
             const std::optional<std::string>& out, bool paper_scale) {
  int status = 0;
  for (auto& cfg : cells) {
    if (seed) ApplySeedOverride(cfg, *seed);
    if (out) cfg.output_dir = *out;
    if (paper_scale) ApplyPaperScale(cfg);
    std::cerr << "== " << cfg.RunName() << " (" << BenchmarkName(cfg.benchmark) << ", digest "
              << cfg.digest.substr(0, 12) << ")" << std::endl;
    ExperimentResult r = RunExperiment(cfg, RunOptions{nullptr, &std::cerr, true});
    for (const auto& s : r.seeds)
      if (!s.log && status == 0) status = s.error_kind ? static_cast<int>(*s.error_kind) : 1;
    if (r.mean) {
      std::cout << cfg.RunName() << "\t" << r.dir.string() << "\tA=" << r.mean->avg_accuracy.back()
                << "\tF=" << r.mean->avg_forgetting.back() << "\n";
    }
  }
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual-learning lab: sequential training, forgetting and effective-rank metrics"};
  app.require_subcommand(1);

  auto* fetch = app.add_subcommand("fetch", "Download and verify a dataset");
  std::string dataset, fetch_dir, base_url;
  fetch->add_option("--dataset", dataset, "mnist or cifar100")->required();
  fetch->add_option("--dir", fetch_dir, "Destination directory (default: $CLLAB_DATA_DIR/<dataset>)");
  fetch->add_option("--base-url", base_url, "Alternative mirror");

  auto* run = app.add_subcommand("run", "Run one experiment configuration");
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool paper_scale = false;
  run->add_option("--config", config, "INI configuration file")->required();
  run->add_option("--seed", seed, "Run only this seed");
  run->add_option("--out", out, "Output directory");
  run->add_flag("--paper-scale", paper_scale, "Full-scale CIFAR protocol (20 tasks, full-width ResNet)");

  auto* grid = app.add_subcommand("grid", "Run every cell of a grid configuration");
  std::string grid_config;
  bool dry_run = false;
  grid->add_option("--config", grid_config, "INI configuration with comma-separated axes")->required();
  grid->add_flag("--dry-run", dry_run, "List the cells without running them");
  grid->add_option("--seed", seed, "Run only this seed");
  grid->add_option("--out", out, "Output directory");
  grid->add_flag("--paper-scale", paper_scale, "Full-scale CIFAR protocol");

  auto* plot = app.add_subcommand("plot", "Render SVG curves from run directories");
  std::vector<std::string> runs;
  std::string plot_out;
  plot->add_option("--runs", runs, "Run directories")->required();
  plot->add_option("--out", plot_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ErrorKind::kUsage);
  }

  try {
    if (*fetch) {
      std::filesystem::path dir = fetch_dir.empty() ? DefaultDataDir() / dataset : std::filesystem::path(fetch_dir);
      FetchReport rep = FetchDataset(BuiltinSource(dataset, base_url), dir);
      std::cout << dataset << ": " << rep.verified << " files verified, " << rep.downloads << " archives downloaded into "
                << dir.string() << "\n";
      return 0;
    }
    if (*run) return RunCells({LoadConfig(config)}, seed, out, paper_scale);
    if (*grid) {
      auto cells = LoadConfigGrid(grid_config);
      if (dry_run) {
        for (const auto& c : cells)
          std::cout << c.RunName() << "\t" << BenchmarkName(c.benchmark) << "\t" << c.digest << "\n";
        return 0;
      }
      return RunCells(std::move(cells), seed, out, paper_scale);
    }
    if (*plot) {
      std::vector<std::filesystem::path> dirs(runs.begin(), runs.end());
      for (const auto& p : EmitPlots(dirs, plot_out)) std::cout << p.string() << "\n";
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error (" << ErrorKindName(e.kind()) << "): " << e.what() << std::endl;
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
