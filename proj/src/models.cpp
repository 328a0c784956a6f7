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

#include "cllab/models.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cllab/error.hpp"
#include "cllab/rng.hpp"

namespace cllab {
namespace {

constexpr char kCheckpointMagic[8] = {'C', 'L', 'L', 'A', 'B', 'C', 'K', 'P'};
const char* const kGates[] = {"W_r", "U_r", "W_z", "U_z", "W_h", "U_h"};

Tensor Uniform(Rng& rng, Shape shape, double bound) {
  std::vector<Scalar> v(NumElements(shape));
  for (auto& x : v) x = static_cast<Scalar>(rng.uniform(-bound, bound));
  return Tensor::FromData(std::move(shape), std::move(v));
}

std::string FormatDouble(double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string JoinSizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::size_t> SplitSizes(std::string_view s) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t end = std::min(s.find(',', start), s.size());
    std::size_t v = 0;
    auto r = std::from_chars(s.data() + start, s.data() + end, v);
    if (r.ec != std::errc() || r.ptr != s.data() + end) {
      throw ConfigError("expected a comma-separated list of sizes, got '" + std::string(s) + "'");
    }
    out.push_back(v);
    start = end + 1;
  }
  return out;
}

template <typename T>
void WritePod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T ReadPod(std::istream& in) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw ParseError("checkpoint truncated", static_cast<std::size_t>(in.gcount()));
  return v;
}

void WriteString(std::ostream& out, const std::string& s) {
  WritePod(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string ReadString(std::istream& in) {
  const auto n = ReadPod<std::uint32_t>(in);
  std::string s(n, '\0');
  if (!in.read(s.data(), n)) throw ParseError("checkpoint truncated in string", static_cast<std::size_t>(in.tellg()));
  return s;
}

void WriteValues(std::ostream& out, std::span<const Scalar> v) {
  for (Scalar x : v) WritePod(out, static_cast<double>(x));
}

void ReadValues(std::istream& in, std::span<Scalar> v) {
  for (Scalar& x : v) x = static_cast<Scalar>(ReadPod<double>(in));
}

}  // namespace

std::string_view ArchName(Arch a) {
  switch (a) {
    case Arch::kMlp: return "mlp";
    case Arch::kConvGru: return "convgru";
    case Arch::kBiConvGru: return "bi_convgru";
    case Arch::kResNet: return "resnet";
  }
  return "";
}

Arch ParseArch(std::string_view name) {
  for (Arch a : {Arch::kMlp, Arch::kConvGru, Arch::kBiConvGru, Arch::kResNet}) {
    if (ArchName(a) == name) return a;
  }
  throw ConfigError("unknown arch '" + std::string(name) + "' (mlp, convgru, bi_convgru, resnet)");
}

void ModelSpec::Validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model: " + m); };
  if (n_tasks < 1) fail("n_tasks must be >= 1");
  if (classes_per_task < 1) fail("classes_per_task must be >= 1");
  if (total_classes < 1) fail("total_classes must be >= 1");
  if (il_mode == IlMode::kClassIl && n_tasks * classes_per_task > total_classes) {
    fail("class_il shared head of " + std::to_string(total_classes) + " outputs cannot hold " +
         std::to_string(n_tasks) + " tasks of " + std::to_string(classes_per_task) + " classes");
  }
  if (in_channels == 0 || in_height == 0 || in_width == 0) fail("input dimensions must be positive");
  if (arch == Arch::kMlp && mlp_hidden == 0) fail("mlp_hidden must be positive");
  if (arch == Arch::kConvGru || arch == Arch::kBiConvGru) {
    if (conv_channels.size() != 4 || conv_strides.size() != 4) fail("conv_channels and conv_strides need 4 entries");
    for (auto c : conv_channels) {
      if (c == 0) fail("conv_channels must be positive");
    }
    for (auto s : conv_strides) {
      if (s == 0) fail("conv_strides must be positive");
    }
    if (gru_hidden == 0) fail("gru_hidden must be positive");
    if (sweep_axis != "rows" && sweep_axis != "cols") fail("sweep_axis must be rows or cols");
  }
  if (arch == Arch::kResNet && !(resnet_width > 0)) fail("resnet_width must be positive");
}

std::vector<std::size_t> ModelSpec::ResNetWidths() const {
  std::vector<std::size_t> w;
  for (double base : {64.0, 128.0, 256.0, 512.0}) {
    w.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(base * resnet_width))));
  }
  return w;
}

std::string ModelSpec::Serialize() const {
  std::ostringstream s;
  s << "arch=" << ArchName(arch) << "\n"
    << "il_mode=" << IlModeName(il_mode) << "\n"
    << "n_tasks=" << n_tasks << "\n"
    << "classes_per_task=" << classes_per_task << "\n"
    << "total_classes=" << total_classes << "\n"
    << "in_channels=" << in_channels << "\n"
    << "in_height=" << in_height << "\n"
    << "in_width=" << in_width << "\n"
    << "mlp_hidden=" << mlp_hidden << "\n"
    << "conv_channels=" << JoinSizes(conv_channels) << "\n"
    << "conv_strides=" << JoinSizes(conv_strides) << "\n"
    << "gru_hidden=" << gru_hidden << "\n"
    << "sweep_axis=" << sweep_axis << "\n"
    << "resnet_width=" << FormatDouble(resnet_width) << "\n";
  return s.str();
}

ModelSpec ModelSpec::Deserialize(std::string_view text) {
  ModelSpec m;
  std::istringstream in{std::string(text)};
  std::string line;
  auto to_int = [](const std::string& v) { return std::stoi(v); };
  auto to_size = [](const std::string& v) { return static_cast<std::size_t>(std::stoull(v)); };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("model spec line without '=': " + line);
    const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
    if (k == "arch") m.arch = ParseArch(v);
    else if (k == "il_mode") m.il_mode = v == "class_il" ? IlMode::kClassIl : IlMode::kTaskIl;
    else if (k == "n_tasks") m.n_tasks = to_int(v);
    else if (k == "classes_per_task") m.classes_per_task = to_int(v);
    else if (k == "total_classes") m.total_classes = to_int(v);
    else if (k == "in_channels") m.in_channels = to_size(v);
    else if (k == "in_height") m.in_height = to_size(v);
    else if (k == "in_width") m.in_width = to_size(v);
    else if (k == "mlp_hidden") m.mlp_hidden = to_size(v);
    else if (k == "conv_channels") m.conv_channels = SplitSizes(v);
    else if (k == "conv_strides") m.conv_strides = SplitSizes(v);
    else if (k == "gru_hidden") m.gru_hidden = to_size(v);
    else if (k == "sweep_axis") m.sweep_axis = v;
    else if (k == "resnet_width") m.resnet_width = std::stod(v);
    else throw ConfigError("unknown model spec key '" + k + "'");
  }
  m.Validate();
  return m;
}

// ---------------------------------------------------------------------------

Tensor ResidualBlock(const Tensor& x, const ResidualBlockWeights& w, std::size_t stride,
                     std::span<RunningStats> stats, BatchNormMode mode) {
  const bool projected = w.shortcut_conv.defined();
  if (stats.size() != (projected ? 3u : 2u)) throw UsageError("ResidualBlock: wrong number of BN stat slots");
  Tensor out = Relu(BatchNorm(Conv2d(x, w.conv1, stride, 1), w.bn1_scale, w.bn1_shift, stats[0], mode));
  out = BatchNorm(Conv2d(out, w.conv2, 1, 1), w.bn2_scale, w.bn2_shift, stats[1], mode);
  Tensor shortcut =
      projected ? BatchNorm(Conv2d(x, w.shortcut_conv, stride, 0), w.shortcut_scale, w.shortcut_shift, stats[2], mode)
                : x;
  if (shortcut.shape() != out.shape()) {
    throw DimensionError("ResidualBlock: identity shortcut " + ShapeString(shortcut.shape()) + " vs " +
                         ShapeString(out.shape()));
  }
  return Relu(Add(out, shortcut));
}

Tensor ConvGruCellStep(const Tensor& x, const Tensor& h_prev, const ConvGruWeights& w) {
  if (x.rank() != 4 || h_prev.rank() != 4 || x.dim(0) != h_prev.dim(0) || x.dim(2) != h_prev.dim(2) ||
      x.dim(3) != h_prev.dim(3)) {
    throw DimensionError("ConvGRU: input " + ShapeString(x.shape()) + " and state " +
                         ShapeString(h_prev.shape()) + " are not spatially aligned");
  }
  auto gate = [&](const Tensor& wx, const Tensor& uh, const Tensor& h, const Tensor& b) {
    return AddChannelBias(Add(Conv2d(x, wx, 1, 1), Conv2d(h, uh, 1, 1)), b);
  };
  Tensor r = Sigmoid(gate(w.w_r, w.u_r, h_prev, w.b_r));
  Tensor z = Sigmoid(gate(w.w_z, w.u_z, h_prev, w.b_z));
  Tensor cand = Tanh(gate(w.w_h, w.u_h, Mul(r, h_prev), w.b_h));
  // (1 - z) . h + z . h~
  return Add(Mul(Affine(z, -1, 1), h_prev), Mul(z, cand));
}

Tensor ConvGruSweep(const Tensor& features, const ConvGruWeights& w, bool reverse) {
  if (features.rank() != 4 || features.dim(2) < 1) {
    throw DimensionError("ConvGRU sweep needs [N x C x H x W] with H >= 1, got " +
                         ShapeString(features.shape()));
  }
  const std::size_t n = features.dim(0), rows = features.dim(2), width = features.dim(3);
  const std::size_t hidden = w.u_r.dim(0);
  Tensor h = Tensor::Zeros({n, hidden, 1, width});
  std::vector<Tensor> states(rows);
  for (std::size_t step = 0; step < rows; ++step) {
    const std::size_t r = reverse ? rows - 1 - step : step;
    h = ConvGruCellStep(SliceRow(features, r), h, w);
    states[r] = h;
  }
  return StackRows(states);
}

Tensor BidirectionalSweep(const Tensor& features, const ConvGruWeights& fwd, const ConvGruWeights& bwd) {
  return ConcatChannels(ConvGruSweep(features, fwd, false), ConvGruSweep(features, bwd, true));
}

// ---------------------------------------------------------------------------

void Model::AddParameter(const std::string& name, Tensor value) {
  if (index_.count(name)) throw ParameterError("duplicate parameter name " + name);
  index_[name] = params_.size();
  params_.emplace_back(name, std::move(value));
}

Tensor& Model::P(const std::string& name) { return parameter(name).value; }

Parameter& Model::parameter(std::string_view name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ParameterError("no parameter named " + std::string(name));
  return params_[it->second];
}

const Parameter& Model::parameter(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ParameterError("no parameter named " + std::string(name));
  return params_[it->second];
}

Model Model::Build(const ModelSpec& spec, std::uint64_t seed) {
  spec.Validate();
  Model m;
  m.spec_ = spec;
  Rng rng(seed);
  auto linear = [&](const std::string& name, std::size_t out, std::size_t in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    m.AddParameter(name + ".weight", Uniform(rng, {out, in}, bound));
    m.AddParameter(name + ".bias", Uniform(rng, {out}, bound));
  };
  auto conv = [&](const std::string& name, std::size_t out, std::size_t in, std::size_t k, bool bias) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * k * k));
    m.AddParameter(name + ".weight", Uniform(rng, {out, in, k, k}, bound));
    if (bias) m.AddParameter(name + ".bias", Uniform(rng, {out}, bound));
  };
  auto bn = [&](const std::string& name, std::size_t c) {
    m.AddParameter(name + ".scale", Tensor::Full({c}, 1));
    m.AddParameter(name + ".shift", Tensor::Zeros({c}));
    m.bn_stats_.emplace(name, RunningStats(c));
  };
  auto cell = [&](const std::string& prefix, std::size_t in, std::size_t hidden) {
    // W_* see the input, U_* the state; biases use the input fan-in.
    const double bw = 1.0 / std::sqrt(static_cast<double>(in * 9));
    const double bu = 1.0 / std::sqrt(static_cast<double>(hidden * 9));
    for (const char* g : {"r", "z", "h"}) {
      m.AddParameter(prefix + ".W_" + g, Uniform(rng, {hidden, in, 3, 3}, bw));
      m.AddParameter(prefix + ".U_" + g, Uniform(rng, {hidden, hidden, 3, 3}, bu));
      m.AddParameter(prefix + ".b_" + g, Uniform(rng, {hidden}, bw));
    }
  };

  std::size_t feature_dim = 0;
  switch (spec.arch) {
    case Arch::kMlp: {
      const std::size_t in = spec.in_channels * spec.in_height * spec.in_width;
      linear("fc1", spec.mlp_hidden, in);
      linear("fc2", spec.mlp_hidden, spec.mlp_hidden);
      feature_dim = spec.mlp_hidden;
      break;
    }
    case Arch::kConvGru:
    case Arch::kBiConvGru: {
      std::size_t in = spec.in_channels;
      for (std::size_t i = 0; i < 4; ++i) {
        conv("conv" + std::to_string(i + 1), spec.conv_channels[i], in, 3, true);
        in = spec.conv_channels[i];
      }
      if (spec.arch == Arch::kConvGru) {
        cell("gru", in, spec.gru_hidden);
        feature_dim = spec.gru_hidden;
      } else {
        cell("gru_fwd", in, spec.gru_hidden);
        cell("gru_bwd", in, spec.gru_hidden);
        feature_dim = 2 * spec.gru_hidden;
      }
      break;
    }
    case Arch::kResNet: {
      const auto widths = spec.ResNetWidths();
      conv("stem.conv", widths[0], spec.in_channels, 3, false);
      bn("stem.bn", widths[0]);
      std::size_t in = widths[0];
      for (std::size_t s = 0; s < 4; ++s) {
        for (std::size_t b = 0; b < 2; ++b) {
          const std::string p = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
          const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
          conv(p + ".conv1", widths[s], in, 3, false);
          bn(p + ".bn1", widths[s]);
          conv(p + ".conv2", widths[s], widths[s], 3, false);
          bn(p + ".bn2", widths[s]);
          if (stride != 1 || in != widths[s]) {
            conv(p + ".shortcut.conv", widths[s], in, 1, false);
            bn(p + ".shortcut.bn", widths[s]);
          }
          in = widths[s];
        }
      }
      feature_dim = widths[3];
      break;
    }
  }
  const auto width = static_cast<std::size_t>(spec.head_width());
  if (spec.il_mode == IlMode::kTaskIl) {
    for (int t = 1; t <= spec.n_tasks; ++t) linear("head." + std::to_string(t), width, feature_dim);
  } else {
    linear("head", width, feature_dim);
  }
  return m;
}

Tensor Model::ConvBn(const Tensor& x, const std::string& conv, const std::string& bn, std::size_t stride,
                     std::size_t pad) {
  Tensor y = Conv2d(x, P(conv + ".weight"), stride, pad);
  return BatchNorm(y, P(bn + ".scale"), P(bn + ".shift"), bn_stats_.at(bn),
                   training_ ? BatchNormMode::kTrain : BatchNormMode::kEval);
}

ConvGruWeights Model::Cell(const std::string& p) {
  return {P(p + ".W_r"), P(p + ".U_r"), P(p + ".b_r"), P(p + ".W_z"), P(p + ".U_z"),
          P(p + ".b_z"), P(p + ".W_h"), P(p + ".U_h"), P(p + ".b_h")};
}

ResidualBlockWeights Model::Block(const std::string& p) {
  ResidualBlockWeights w{P(p + ".conv1.weight"), P(p + ".bn1.scale"), P(p + ".bn1.shift"),
                         P(p + ".conv2.weight"), P(p + ".bn2.scale"), P(p + ".bn2.shift"),
                         {}, {}, {}};
  if (index_.count(p + ".shortcut.conv.weight")) {
    w.shortcut_conv = P(p + ".shortcut.conv.weight");
    w.shortcut_scale = P(p + ".shortcut.bn.scale");
    w.shortcut_shift = P(p + ".shortcut.bn.shift");
  }
  return w;
}

Tensor Model::MlpFeatures(const Tensor& x) {
  Tensor h = x.rank() == 2 ? x : Flatten(x);
  h = Relu(Linear(h, P("fc1.weight"), P("fc1.bias")));
  return Relu(Linear(h, P("fc2.weight"), P("fc2.bias")));
}

Tensor Model::ConvGruFeatures(const Tensor& x) {
  Tensor h = x;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string name = "conv" + std::to_string(i + 1);
    h = Relu(AddChannelBias(Conv2d(h, P(name + ".weight"), spec_.conv_strides[i], 1), P(name + ".bias")));
  }
  // Pooling is invariant to the transpose, so a column sweep needs no undo.
  if (spec_.sweep_axis == "cols") h = TransposeSpatial(h);
  Tensor states = spec_.arch == Arch::kConvGru ? ConvGruSweep(h, Cell("gru"), false)
                                                : BidirectionalSweep(h, Cell("gru_fwd"), Cell("gru_bwd"));
  return GlobalAvgPool(states);
}

Tensor Model::ResNetFeatures(const Tensor& x) {
  Tensor h = Relu(ConvBn(x, "stem.conv", "stem.bn", 1, 1));
  const BatchNormMode mode = training_ ? BatchNormMode::kTrain : BatchNormMode::kEval;
  for (int s = 1; s <= 4; ++s) {
    for (int b = 1; b <= 2; ++b) {
      const std::string p = "stage" + std::to_string(s) + ".block" + std::to_string(b);
      const std::size_t stride = (s > 1 && b == 1) ? 2 : 1;
      const ResidualBlockWeights w = Block(p);
      std::vector<RunningStats> stats{bn_stats_.at(p + ".bn1"), bn_stats_.at(p + ".bn2")};
      if (w.shortcut_conv.defined()) stats.push_back(bn_stats_.at(p + ".shortcut.bn"));
      h = ResidualBlock(h, w, stride, stats, mode);
      bn_stats_.at(p + ".bn1") = std::move(stats[0]);
      bn_stats_.at(p + ".bn2") = std::move(stats[1]);
      if (w.shortcut_conv.defined()) bn_stats_.at(p + ".shortcut.bn") = std::move(stats[2]);
    }
  }
  return GlobalAvgPool(h);
}

Tensor Model::Features(const Tensor& x) {
  if (x.rank() != 4 || x.dim(1) != spec_.in_channels || x.dim(2) != spec_.in_height ||
      x.dim(3) != spec_.in_width) {
    throw DimensionError("model expects [N x " + std::to_string(spec_.in_channels) + " x " +
                         std::to_string(spec_.in_height) + " x " + std::to_string(spec_.in_width) +
                         "] input, got " + ShapeString(x.shape()));
  }
  switch (spec_.arch) {
    case Arch::kMlp: return MlpFeatures(x);
    case Arch::kConvGru:
    case Arch::kBiConvGru: return ConvGruFeatures(x);
    case Arch::kResNet: return ResNetFeatures(x);
  }
  return {};
}

Tensor Model::HeadLogits(const Tensor& features, int task_id) {
  if (spec_.il_mode != IlMode::kTaskIl) throw UsageError("HeadLogits needs a task_il model");
  if (task_id < 1 || task_id > spec_.n_tasks) {
    throw UsageError("task_id " + std::to_string(task_id) + " outside [1, " + std::to_string(spec_.n_tasks) + "]");
  }
  const std::string h = "head." + std::to_string(task_id);
  return Linear(features, P(h + ".weight"), P(h + ".bias"));
}

Tensor Model::SharedLogits(const Tensor& features) {
  if (spec_.il_mode != IlMode::kClassIl) throw UsageError("SharedLogits needs a class_il model");
  return Linear(features, P("head.weight"), P("head.bias"));
}

Tensor Model::MaskedLogits(const Tensor& features, const std::vector<int>& seen) {
  ClassMask mask(static_cast<std::size_t>(spec_.total_classes), false);
  for (int c : seen) {
    if (c < 0 || c >= spec_.total_classes) throw UsageError("seen class " + std::to_string(c) + " out of range");
    mask[static_cast<std::size_t>(c)] = true;
  }
  return MaskLogits(SharedLogits(features), mask);
}

Tensor Model::Forward(const Tensor& x, const Routing& routing) {
  if (spec_.il_mode == IlMode::kTaskIl) {
    if (!routing.task_id) throw UsageError("task_il forward requires a task_id");
    return HeadLogits(Features(x), *routing.task_id);
  }
  if (!routing.seen_classes) throw UsageError("class_il forward requires the seen class set");
  return MaskedLogits(Features(x), *routing.seen_classes);
}

Matrix Model::PenultimateActivations(const Tensor& x, std::size_t chunk) {
  NoGradGuard no_grad;
  const bool was_training = training_;
  training_ = false;
  const std::size_t n = x.dim(0);
  Matrix out;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < n; start += chunk) {
    rows.clear();
    for (std::size_t i = start; i < std::min(n, start + chunk); ++i) rows.push_back(i);
    Tensor f = Features(GatherRows(x, rows));
    if (out.cols == 0) out = Matrix(n, f.dim(1));
    auto d = f.data();
    std::copy(d.begin(), d.end(), out.values.begin() + static_cast<std::ptrdiff_t>(start * out.cols));
  }
  training_ = was_training;
  return out;
}

LayerGroupMap Model::LayerGroups() const {
  LayerGroupMap g;
  auto add = [&](LayerGroup grp, const std::string& name) { g[grp].push_back(name); };
  switch (spec_.arch) {
    case Arch::kMlp:
      add(LayerGroup::kEarly, "fc1.weight");
      add(LayerGroup::kMiddle, "fc2.weight");
      break;
    case Arch::kConvGru:
      for (int i = 1; i <= 4; ++i) add(LayerGroup::kEarly, "conv" + std::to_string(i) + ".weight");
      for (const char* k : kGates) add(LayerGroup::kMiddle, std::string("gru.") + k);
      break;
    case Arch::kBiConvGru:
      add(LayerGroup::kEarly, "conv1.weight");
      for (int i = 2; i <= 4; ++i) add(LayerGroup::kMiddle, "conv" + std::to_string(i) + ".weight");
      for (const char* cell : {"gru_fwd.", "gru_bwd."})
        for (const char* k : kGates) add(LayerGroup::kLate, std::string(cell) + k);
      break;
    case Arch::kResNet:
      // The stem convolution travels with stage 1; batch-norm affine terms are excluded.
      for (const auto& p : params_) {
        if (p.value.rank() != 4) continue;
        const std::string& n = p.name;
        if (n.rfind("stem.", 0) == 0 || n.rfind("stage1.", 0) == 0) add(LayerGroup::kEarly, n);
        else if (n.rfind("stage2.", 0) == 0 || n.rfind("stage3.", 0) == 0) add(LayerGroup::kMiddle, n);
        else if (n.rfind("stage4.", 0) == 0) add(LayerGroup::kLate, n);
      }
      break;
  }
  if (spec_.il_mode == IlMode::kTaskIl) {
    for (int t = 1; t <= spec_.n_tasks; ++t) add(LayerGroup::kHead, "head." + std::to_string(t) + ".weight");
  } else {
    add(LayerGroup::kHead, "head.weight");
  }
  return g;
}

std::vector<Matrix> Model::GroupMatrices(LayerGroup grp) const {
  std::vector<Matrix> out;
  const auto groups = LayerGroups();
  auto it = groups.find(grp);
  if (it == groups.end()) return out;
  for (const auto& name : it->second) out.push_back(TensorToMatrix(parameter(name).value));
  return out;
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

std::vector<const Parameter*> Model::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(&p);
  return out;
}

std::size_t Model::ParameterCount() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

Model Model::Clone() const {
  Model m;
  m.spec_ = spec_;
  m.index_ = index_;
  m.bn_stats_ = bn_stats_;
  m.training_ = training_;
  m.params_.reserve(params_.size());
  for (const auto& p : params_) m.params_.push_back(p.DeepCopy());
  return m;
}

void Model::Save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  WritePod(out, kCheckpointVersion);
  WriteString(out, spec_.Serialize());
  WritePod(out, static_cast<std::uint32_t>(params_.size()));
  for (const auto& p : params_) {
    WriteString(out, p.name);
    WritePod(out, static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape()) WritePod(out, static_cast<std::uint64_t>(d));
    WriteValues(out, p.value.data());
    WriteValues(out, p.velocity.data());
  }
  WritePod(out, static_cast<std::uint32_t>(bn_stats_.size()));
  for (const auto& [name, st] : bn_stats_) {
    WriteString(out, name);
    WritePod(out, static_cast<std::uint64_t>(st.mean.size()));
    WriteValues(out, st.mean);
    WriteValues(out, st.var);
  }
  if (!out) throw IoError("write failed for checkpoint " + path.string());
}

Model Model::Load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw ParseError("not a cllab checkpoint", 0);
  }
  const auto version = ReadPod<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version), 8);
  }
  Model m = Build(ModelSpec::Deserialize(ReadString(in)), 0);
  const auto count = ReadPod<std::uint32_t>(in);
  if (count != m.params_.size()) throw ParseError("checkpoint parameter count mismatch", static_cast<std::size_t>(in.tellg()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = ReadString(in);
    Parameter& p = m.parameter(name);
    const auto rank = ReadPod<std::uint32_t>(in);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(ReadPod<std::uint64_t>(in));
    if (shape != p.value.shape()) {
      throw ParseError("checkpoint shape mismatch for " + name, static_cast<std::size_t>(in.tellg()));
    }
    ReadValues(in, p.value.mutable_data());
    ReadValues(in, p.velocity.mutable_data());
  }
  const auto nbn = ReadPod<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < nbn; ++i) {
    const std::string name = ReadString(in);
    auto& st = m.bn_stats_.at(name);
    const auto c = ReadPod<std::uint64_t>(in);
    if (c != st.mean.size()) throw ParseError("checkpoint running-stat size mismatch", static_cast<std::size_t>(in.tellg()));
    ReadValues(in, st.mean);
    ReadValues(in, st.var);
  }
  return m;
}

}  // namespace cllab
