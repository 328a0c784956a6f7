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

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "cllab/error.hpp"
#include "cllab/runner.hpp"

namespace cllab {

namespace {

namespace fs = std::filesystem;

struct Series {
  std::string label;
  std::vector<std::pair<int, double>> points;
};

struct Chart {
  std::string file;
  std::string title;
  std::string y_label;
  std::vector<Series> series;
  bool unit_range = false;  // y fixed to [0, 1]
};

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                          "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string Num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string Escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

// Round step for roughly `n` ticks.
double NiceStep(double span, int n) {
  const double raw = span / n;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 2.5, 5.0, 10.0})
    if (raw <= m * mag) return m * mag;
  return 10 * mag;
}

std::string RenderSvg(const Chart& c, int tasks) {
  const double W = 640, H = 400, L = 64, R = 150, T = 36, B = 48;
  const double pw = W - L - R, ph = H - T - B;
  double lo = 0, hi = 1;
  if (!c.unit_range) {
    lo = 0;
    hi = 0;
    for (const auto& s : c.series)
      for (const auto& p : s.points) {
        lo = std::min(lo, p.second);
        hi = std::max(hi, p.second);
      }
    if (hi - lo < 1e-12) hi = lo + 1;
    const double pad = 0.05 * (hi - lo);
    hi += pad;
    if (lo < 0) lo -= pad;
  }
  auto X = [&](double t) { return tasks > 1 ? L + (t - 1) / (tasks - 1) * pw : L + pw / 2; };
  auto Y = [&](double v) { return T + (hi - v) / (hi - lo) * ph; };

  std::string o;
  o += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" viewBox=\"0 0 640 400\" "
       "font-family=\"sans-serif\" font-size=\"11\">\n";
  o += "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n";
  o += "<text x=\"" + Num(L + pw / 2) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" + Escape(c.title) +
       "</text>\n";
  // Axes and grid.
  const double ystep = NiceStep(hi - lo, 5);
  for (double v = std::ceil(lo / ystep) * ystep; v <= hi + 1e-9; v += ystep) {
    o += "<line x1=\"" + Num(L) + "\" y1=\"" + Num(Y(v)) + "\" x2=\"" + Num(L + pw) + "\" y2=\"" + Num(Y(v)) +
         "\" stroke=\"#e0e0e0\"/>\n";
    o += "<text x=\"" + Num(L - 6) + "\" y=\"" + Num(Y(v) + 4) + "\" text-anchor=\"end\">" + Num(v) + "</text>\n";
  }
  const int xstep = std::max(1, tasks / 10);
  for (int t = 1; t <= tasks; t += xstep)
    o += "<text x=\"" + Num(X(t)) + "\" y=\"" + Num(T + ph + 16) + "\" text-anchor=\"middle\">" + std::to_string(t) +
         "</text>\n";
  o += "<line x1=\"" + Num(L) + "\" y1=\"" + Num(T + ph) + "\" x2=\"" + Num(L + pw) + "\" y2=\"" + Num(T + ph) +
       "\" stroke=\"black\"/>\n";
  o += "<line x1=\"" + Num(L) + "\" y1=\"" + Num(T) + "\" x2=\"" + Num(L) + "\" y2=\"" + Num(T + ph) +
       "\" stroke=\"black\"/>\n";
  o += "<text x=\"" + Num(L + pw / 2) + "\" y=\"" + Num(H - 10) + "\" text-anchor=\"middle\">task</text>\n";
  o += "<text transform=\"translate(14," + Num(T + ph / 2) + ") rotate(-90)\" text-anchor=\"middle\">" +
       Escape(c.y_label) + "</text>\n";
  // Curves and legend.
  for (std::size_t i = 0; i < c.series.size(); ++i) {
    const auto& s = c.series[i];
    const std::string color = kPalette[i % (sizeof(kPalette) / sizeof(kPalette[0]))];
    std::string pts;
    for (const auto& p : s.points) pts += (pts.empty() ? "" : " ") + Num(X(p.first)) + "," + Num(Y(p.second));
    o += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
    for (const auto& p : s.points)
      o += "<circle cx=\"" + Num(X(p.first)) + "\" cy=\"" + Num(Y(p.second)) + "\" r=\"2.5\" fill=\"" + color + "\"/>\n";
    const double ly = T + 8 + 18 * static_cast<double>(i);
    o += "<line x1=\"" + Num(L + pw + 12) + "\" y1=\"" + Num(ly) + "\" x2=\"" + Num(L + pw + 32) + "\" y2=\"" + Num(ly) +
         "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
    o += "<text x=\"" + Num(L + pw + 38) + "\" y=\"" + Num(ly + 4) + "\">" + Escape(s.label) + "</text>\n";
  }
  o += "</svg>\n";
  return o;
}

Series FromVector(const std::string& label, const std::vector<double>& v) {
  Series s{label, {}};
  for (std::size_t i = 0; i < v.size(); ++i) s.points.emplace_back(static_cast<int>(i + 1), v[i]);
  return s;
}

Series FromTrace(const std::string& label, const ERankTrace& tr, bool pct) {
  Series s{label, {}};
  auto vals = pct ? tr.PeakNormalized() : tr.values();
  for (std::size_t i = 0; i < vals.size(); ++i) s.points.emplace_back(tr.points()[i].first, vals[i]);
  return s;
}

}  // namespace

std::vector<fs::path> EmitPlots(const std::vector<fs::path>& runs, const fs::path& out) {
  if (runs.empty()) throw InputError("no runs to plot");
  std::vector<std::pair<std::string, MetricLog>> logs;
  for (const auto& r : runs) {
    const fs::path dir = fs::is_directory(r / "mean") ? r / "mean" : r;
    MetricLog log = ImportMetrics(dir);
    std::string label = log.meta.name.empty() ? r.filename().string() : log.meta.name;
    if (label.empty()) label = r.parent_path().filename().string();
    logs.emplace_back(std::move(label), std::move(log));
  }
  const int k = logs[0].second.tasks();
  for (const auto& [label, log] : logs)
    if (log.tasks() != k)
      throw InputError("run '" + label + "' has " + std::to_string(log.tasks()) + " tasks, expected " +
                       std::to_string(k));

  std::vector<Chart> charts;
  Chart acc{"avg_accuracy.svg", "Average accuracy", "average accuracy", {}, true};
  Chart fgt{"avg_forgetting.svg", "Average forgetting", "mean forgetting", {}, false};
  for (const auto& [label, log] : logs) {
    acc.series.push_back(FromVector(label, log.avg_accuracy));
    fgt.series.push_back(FromVector(label, log.avg_forgetting));
  }
  charts.push_back(std::move(acc));
  charts.push_back(std::move(fgt));

  std::set<LayerGroup> groups;
  for (const auto& [label, log] : logs)
    for (const auto& tr : log.traces)
      if (tr.probe() == ProbeKind::kWeight) groups.insert(tr.group());

  auto trace_charts = [&](ProbeKind probe, LayerGroup g, const std::string& stem, const std::string& title) {
    for (bool pct : {false, true}) {
      Chart c{stem + (pct ? "_pct" : "") + ".svg", title + (pct ? " (peak-normalized)" : ""),
              pct ? "eRank / peak" : "eRank", {}, pct};
      for (const auto& [label, log] : logs)
        if (const ERankTrace* tr = log.FindTrace(probe, g)) c.series.push_back(FromTrace(label, *tr, pct));
      if (!c.series.empty()) charts.push_back(std::move(c));
    }
  };
  trace_charts(ProbeKind::kActivation, LayerGroup::kPenultimate, "erank_activation", "Activation eRank (penultimate)");
  for (LayerGroup g : groups) {
    const std::string name(LayerGroupName(g));
    trace_charts(ProbeKind::kWeight, g, "erank_weight_" + name, "Weight eRank (" + name + ")");
  }

  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  std::vector<fs::path> written;
  for (const auto& c : charts) {
    const fs::path p = out / c.file;
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + p.string());
    f << RenderSvg(c, k);
    if (!f) throw IoError("write failed for " + p.string());
    written.push_back(p);
  }
  return written;
}

}  // namespace cllab
