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

#include "cllab/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <set>

#include "cllab/error.hpp"
#include "cllab/rng.hpp"

namespace cllab {
namespace {

std::uint32_t ReadBigEndian32(std::span<const std::uint8_t> b, std::size_t at) {
  if (at + 4 > b.size()) throw ParseError("IDX header truncated", b.size());
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) |
         (std::uint32_t{b[at + 2]} << 8) | std::uint32_t{b[at + 3]};
}

void AppendBigEndian32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::string Hex32(std::uint32_t v) {
  static const char* digits = "0123456789ABCDEF";
  std::string s = "0x";
  for (int shift = 28; shift >= 0; shift -= 4) s += digits[(v >> shift) & 0xF];
  return s;
}

constexpr Scalar kInv255 = Scalar(1) / Scalar(255);

// In place: the caller owns a fresh copy.
void ApplyStats(LabeledSet& s, const ChannelStats& st) {
  const std::size_t n = s.images.dim(0), c = s.images.dim(1);
  const std::size_t plane = s.images.dim(2) * s.images.dim(3);
  if (st.mean.size() != c || st.stddev.size() != c) {
    throw DimensionError("normalization stats have " + std::to_string(st.mean.size()) +
                         " channels, images have " + std::to_string(c));
  }
  auto d = s.images.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double mu = st.mean[ch], sd = st.stddev[ch];
      Scalar* p = d.data() + (i * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) p[k] = static_cast<Scalar>((p[k] - mu) / sd);
    }
  }
}

std::vector<std::size_t> RowsWithClasses(const LabeledSet& s, const std::vector<int>& classes) {
  std::set<int> wanted(classes.begin(), classes.end());
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (wanted.count(s.labels[i])) rows.push_back(i);
  }
  return rows;
}

TaskSequence BuildSequence(std::shared_ptr<const LabeledSet> train,
                           std::shared_ptr<const LabeledSet> test,
                           const std::vector<std::vector<int>>& blocks, IlMode mode,
                           int total_classes) {
  TaskSequence seq;
  seq.il_mode = mode;
  seq.total_classes = total_classes;
  int index = 1;
  for (const auto& block : blocks) {
    TaskSpec spec;
    spec.index = index++;
    spec.global_classes = block;
    spec.il_mode = mode;
    if (mode == IlMode::kTaskIl) {
      for (std::size_t k = 0; k < block.size(); ++k) spec.local_label_map[block[k]] = static_cast<int>(k);
    }
    seq.train.push_back({train, RowsWithClasses(*train, block)});
    seq.test.push_back({test, RowsWithClasses(*test, block)});
    seq.tasks.push_back(std::move(spec));
  }
  return seq;
}

}  // namespace

std::string_view IlModeName(IlMode m) { return m == IlMode::kTaskIl ? "task_il" : "class_il"; }

IdxArray ParseIdx(std::span<const std::uint8_t> bytes) {
  IdxArray out;
  out.magic = ReadBigEndian32(bytes, 0);
  std::size_t ndims;
  if (out.magic == kIdxLabelMagic) {
    ndims = 1;
  } else if (out.magic == kIdxImageMagic) {
    ndims = 3;
  } else {
    throw ParseError("IDX: unsupported magic " + Hex32(out.magic), 0);
  }
  std::size_t at = 4;
  std::uint64_t count = 1;
  for (std::size_t d = 0; d < ndims; ++d, at += 4) {
    const std::uint32_t v = ReadBigEndian32(bytes, at);
    if (v == 0 && d > 0) throw ParseError("IDX: zero-sized dimension", at);
    out.dims.push_back(v);
    count *= v;
  }
  const std::size_t have = bytes.size() - at;
  if (have < count) {
    throw ParseError("IDX: payload truncated; expected " + std::to_string(count) + " bytes, found " +
                         std::to_string(have),
                     bytes.size());
  }
  if (have > count) {
    throw ParseError("IDX: " + std::to_string(have - count) +
                         " trailing bytes after dimension product " + std::to_string(count),
                     at + count);
  }
  out.raw.assign(bytes.begin() + static_cast<std::ptrdiff_t>(at), bytes.end());
  return out;
}

std::vector<std::uint8_t> SerializeIdx(const IdxArray& a) {
  std::vector<std::uint8_t> out;
  out.reserve(4 + 4 * a.dims.size() + a.raw.size());
  AppendBigEndian32(out, a.magic);
  for (auto d : a.dims) AppendBigEndian32(out, d);
  out.insert(out.end(), a.raw.begin(), a.raw.end());
  return out;
}

Tensor IdxArray::Images() const {
  if (magic != kIdxImageMagic) throw InputError("IDX array does not hold images");
  std::vector<Scalar> v(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) v[i] = static_cast<Scalar>(raw[i]) * kInv255;
  return Tensor::FromData({dims[0], 1, dims[1], dims[2]}, std::move(v));
}

std::vector<int> IdxArray::Labels() const {
  if (magic != kIdxLabelMagic) throw InputError("IDX array does not hold labels");
  return std::vector<int>(raw.begin(), raw.end());
}

CifarRecords ParseCifar100Records(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % kCifarRecordBytes != 0) {
    const std::size_t whole = bytes.size() / kCifarRecordBytes;
    throw ParseError("CIFAR-100: length " + std::to_string(bytes.size()) +
                         " is not a multiple of " + std::to_string(kCifarRecordBytes),
                     whole * kCifarRecordBytes);
  }
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  CifarRecords r;
  r.coarse.resize(n);
  r.fine.resize(n);
  r.pixels.resize(n * kCifarPixels);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kCifarRecordBytes;
    r.coarse[i] = rec[0];
    r.fine[i] = rec[1];
    if (rec[1] >= 100) {
      throw ParseError("CIFAR-100: fine label " + std::to_string(rec[1]) + " out of range",
                       i * kCifarRecordBytes + 1);
    }
    std::copy(rec + 2, rec + kCifarRecordBytes, r.pixels.begin() + static_cast<std::ptrdiff_t>(i * kCifarPixels));
  }
  return r;
}

std::vector<std::uint8_t> SerializeCifar100(const CifarRecords& r) {
  if (r.coarse.size() != r.size() || r.pixels.size() != r.size() * kCifarPixels) {
    throw DimensionError("CIFAR-100 records are inconsistent");
  }
  std::vector<std::uint8_t> out;
  out.reserve(r.size() * kCifarRecordBytes);
  for (std::size_t i = 0; i < r.size(); ++i) {
    out.push_back(r.coarse[i]);
    out.push_back(r.fine[i]);
    auto first = r.pixels.begin() + static_cast<std::ptrdiff_t>(i * kCifarPixels);
    out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(kCifarPixels));
  }
  return out;
}

void LabeledSet::Validate() const {
  if (!images.defined() || images.rank() != 4) throw InputError("images must be [N x C x H x W]");
  if (images.dim(0) != labels.size()) {
    throw InputError("image count " + std::to_string(images.dim(0)) + " != label count " +
                     std::to_string(labels.size()));
  }
  for (int y : labels) {
    if (y < 0 || y >= num_classes) {
      throw InputError("label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

LabeledSet ParseCifar100(std::span<const std::uint8_t> bytes, Split split) {
  CifarRecords r = ParseCifar100Records(bytes);
  LabeledSet s;
  s.split = split;
  s.num_classes = 100;
  s.labels.assign(r.fine.begin(), r.fine.end());
  std::vector<Scalar> v(r.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<Scalar>(r.pixels[i]) * kInv255;
  // An empty stream still has a well-defined [0 x 3 x 32 x 32] shape.
  s.images = Tensor::FromData({r.size(), 3, 32, 32}, std::move(v));
  return s;
}

LabeledSet MnistSet(const IdxArray& images, const IdxArray& labels, Split split) {
  LabeledSet s;
  s.split = split;
  s.num_classes = 10;
  s.images = images.Images();
  s.labels = labels.Labels();
  s.Validate();
  return s;
}

ChannelStats ComputeChannelStats(const LabeledSet& s) {
  const std::size_t n = s.images.dim(0), c = s.images.dim(1);
  const std::size_t plane = s.images.dim(2) * s.images.dim(3);
  ChannelStats st;
  st.mean.assign(c, 0.0);
  st.stddev.assign(c, 1.0);
  if (n == 0) return st;
  auto d = s.images.data();
  const double count = static_cast<double>(n * plane);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const Scalar* p = d.data() + (i * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) sum += p[k];
    }
    const double mu = sum / count;
    // Second pass for the variance: no cancellation.
    double ss = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const Scalar* p = d.data() + (i * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) ss += (p[k] - mu) * (p[k] - mu);
    }
    const double sd = std::sqrt(ss / count);
    st.mean[ch] = mu;
    st.stddev[ch] = sd > 0 ? sd : 1.0;
  }
  return st;
}

NormalizedSet NormalizeDataset(const LabeledSet& s, const std::optional<ChannelStats>& stats) {
  NormalizedSet out;
  out.set = s;
  out.set.images = s.images.Clone();
  out.stats = stats ? *stats : ComputeChannelStats(s);
  for (double& sd : out.stats.stddev) {
    if (sd == 0) sd = 1.0;
  }
  ApplyStats(out.set, out.stats);
  return out;
}

int TaskSpec::TrainingLabel(int global) const {
  if (il_mode == IlMode::kClassIl) return global;
  auto it = local_label_map.find(global);
  if (it == local_label_map.end()) {
    throw InputError("class " + std::to_string(global) + " is not in task " + std::to_string(index));
  }
  return it->second;
}

int TaskSpec::GlobalLabel(int local) const {
  if (il_mode == IlMode::kClassIl) return local;
  for (const auto& [g, l] : local_label_map) {
    if (l == local) return g;
  }
  throw InputError("local label " + std::to_string(local) + " is not in task " + std::to_string(index));
}

bool TaskSpec::Contains(int global) const {
  return std::find(global_classes.begin(), global_classes.end(), global) != global_classes.end();
}

std::vector<int> TaskSequence::SeenClasses(int t) const {
  std::vector<int> out;
  for (int i = 0; i < t && i < static_cast<int>(tasks.size()); ++i) {
    out.insert(out.end(), tasks[i].global_classes.begin(), tasks[i].global_classes.end());
  }
  return out;
}

TaskSequence MakeSplitMnist(std::shared_ptr<const LabeledSet> train,
                            std::shared_ptr<const LabeledSet> test) {
  std::vector<std::vector<int>> blocks;
  for (int t = 0; t < 5; ++t) blocks.push_back({2 * t, 2 * t + 1});
  return BuildSequence(std::move(train), std::move(test), blocks, IlMode::kTaskIl, 10);
}

TaskSequence MakeSplitCifar100(std::shared_ptr<const LabeledSet> train,
                               std::shared_ptr<const LabeledSet> test, int n_tasks,
                               std::optional<std::uint64_t> shuffle_seed, int class_count) {
  if (class_count < 1 || class_count > 100) {
    throw ConfigError("cifar class_count must lie in [1, 100], got " + std::to_string(class_count));
  }
  if (n_tasks < 1 || class_count % n_tasks != 0) {
    throw ConfigError("n_tasks " + std::to_string(n_tasks) + " does not divide class count " +
                      std::to_string(class_count));
  }
  std::vector<int> order(100);
  std::iota(order.begin(), order.end(), 0);
  if (shuffle_seed) {
    Rng rng(*shuffle_seed);
    rng.shuffle(order);
  }
  order.resize(static_cast<std::size_t>(class_count));
  const int per = class_count / n_tasks;
  std::vector<std::vector<int>> blocks;
  for (int t = 0; t < n_tasks; ++t) {
    blocks.emplace_back(order.begin() + t * per, order.begin() + (t + 1) * per);
  }
  return BuildSequence(std::move(train), std::move(test), blocks, IlMode::kClassIl, 100);
}

Batch GatherBatch(const LabeledSet& source, std::span<const std::size_t> rows) {
  const Shape& s = source.images.shape();
  const std::size_t row = s[1] * s[2] * s[3];
  std::vector<Scalar> v(rows.size() * row);
  Batch b;
  b.labels.reserve(rows.size());
  auto d = source.images.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(d.begin() + static_cast<std::ptrdiff_t>(rows[i] * row), row,
                v.begin() + static_cast<std::ptrdiff_t>(i * row));
    b.labels.push_back(source.labels[rows[i]]);
  }
  b.x = Tensor::FromData({rows.size(), s[1], s[2], s[3]}, std::move(v));
  b.source_rows.assign(rows.begin(), rows.end());
  return b;
}

Batch GatherBatch(const TaskView& view, std::span<const std::size_t> positions) {
  std::vector<std::size_t> rows(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) rows[i] = view.indices.at(positions[i]);
  return GatherBatch(*view.source, rows);
}

MinibatchIterator::MinibatchIterator(const TaskView& view, std::size_t batch_size,
                                     std::uint64_t epoch_seed)
    : view_(view), batch_size_(batch_size), order_(view.size()) {
  if (batch_size == 0) throw ParameterError("batch_size must be >= 1");
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  Rng rng(epoch_seed);
  rng.shuffle(order_);
}

bool MinibatchIterator::Next(Batch& out) {
  if (cursor_ >= order_.size()) return false;
  const std::size_t n = std::min(batch_size_, order_.size() - cursor_);
  out = GatherBatch(view_, std::span<const std::size_t>(order_.data() + cursor_, n));
  cursor_ += n;
  return true;
}

std::size_t MinibatchIterator::batches() const {
  return (order_.size() + batch_size_ - 1) / batch_size_;
}

std::vector<std::uint8_t> ReadFileBytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> out(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(size))) {
    throw IoError("short read on " + p.string());
  }
  return out;
}

std::filesystem::path DefaultDataDir() {
  if (const char* env = std::getenv("CLLAB_DATA_DIR"); env && *env) return env;
  return "data";
}

TaskSequence LoadSplitMnist(const std::filesystem::path& dir) {
  auto load = [&](const char* name) {
    const auto p = dir / name;
    if (!std::filesystem::exists(p)) {
      throw IoError("missing " + p.string() + " (run `cllab fetch --dataset mnist --dir " + dir.string() + "`)");
    }
    return ParseIdx(ReadFileBytes(p));
  };
  LabeledSet train = MnistSet(load("train-images-idx3-ubyte"), load("train-labels-idx1-ubyte"), Split::kTrain);
  LabeledSet test = MnistSet(load("t10k-images-idx3-ubyte"), load("t10k-labels-idx1-ubyte"), Split::kTest);
  const ChannelStats st = ComputeChannelStats(train);
  ApplyStats(train, st);
  ApplyStats(test, st);
  return MakeSplitMnist(std::make_shared<const LabeledSet>(std::move(train)),
                        std::make_shared<const LabeledSet>(std::move(test)));
}

TaskSequence LoadSplitCifar100(const std::filesystem::path& dir, int n_tasks, int class_count,
                               std::optional<std::uint64_t> shuffle_seed) {
  const auto base = dir / "cifar-100-binary";
  for (const char* f : {"train.bin", "test.bin"}) {
    if (!std::filesystem::exists(base / f)) {
      throw IoError("missing " + (base / f).string() + " (run `cllab fetch --dataset cifar100 --dir " +
                    dir.string() + "`)");
    }
  }
  LabeledSet train = ParseCifar100(ReadFileBytes(base / "train.bin"), Split::kTrain);
  LabeledSet test = ParseCifar100(ReadFileBytes(base / "test.bin"), Split::kTest);
  // Statistics over the whole training split, before any class subset.
  const ChannelStats st = ComputeChannelStats(train);
  ApplyStats(train, st);
  ApplyStats(test, st);
  return MakeSplitCifar100(std::make_shared<const LabeledSet>(std::move(train)),
                           std::make_shared<const LabeledSet>(std::move(test)), n_tasks,
                           shuffle_seed, class_count);
}

}  // namespace cllab
