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

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cllab/tensor.hpp"

namespace cllab {

enum class Split { kTrain, kTest };
enum class IlMode { kTaskIl, kClassIl };

std::string_view IlModeName(IlMode m);

inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;
inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;

/// Decoded IDX stream. `raw` keeps the unsigned payload bytes so that a
/// parse/serialize round trip is exact.
struct IdxArray {
  std::uint32_t magic = 0;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> raw;

  bool is_labels() const { return magic == kIdxLabelMagic; }
  /// Image arrays as [N x 1 x H x W] floats in [0, 1].
  Tensor Images() const;
  std::vector<int> Labels() const;
};

/// Throws ParseError (with byte offset) on bad magic, truncation, trailing
/// bytes or a dimension product that does not match the payload.
IdxArray ParseIdx(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> SerializeIdx(const IdxArray& a);

inline constexpr std::size_t kCifarRecordBytes = 3074;
inline constexpr std::size_t kCifarPixels = 3072;

/// Raw CIFAR-100 records (coarse label kept only for byte-exact round trips).
struct CifarRecords {
  std::vector<std::uint8_t> coarse;
  std::vector<std::uint8_t> fine;
  std::vector<std::uint8_t> pixels;  // N * 3072, R plane then G then B
  std::size_t size() const { return fine.size(); }
};

CifarRecords ParseCifar100Records(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> SerializeCifar100(const CifarRecords& r);

struct LabeledSet {
  Tensor images;  // [N x C x H x W]
  std::vector<int> labels;
  Split split = Split::kTrain;
  int num_classes = 0;

  std::size_t size() const { return labels.size(); }
  /// Checks label range and count agreement; throws InputError.
  void Validate() const;
};

/// Fine labels, coarse discarded; pixels in [0, 1], shape [N x 3 x 32 x 32].
LabeledSet ParseCifar100(std::span<const std::uint8_t> bytes, Split split = Split::kTrain);
LabeledSet MnistSet(const IdxArray& images, const IdxArray& labels, Split split);

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;  // population std; zero replaced by 1
};

ChannelStats ComputeChannelStats(const LabeledSet& s);

/// (x - mean) / std per channel. Computes stats from `s` when none given.
struct NormalizedSet {
  LabeledSet set;
  ChannelStats stats;
};
NormalizedSet NormalizeDataset(const LabeledSet& s, const std::optional<ChannelStats>& stats = {});

struct TaskSpec {
  int index = 0;  // 1-based
  std::vector<int> global_classes;
  IlMode il_mode = IlMode::kTaskIl;
  std::map<int, int> local_label_map;  // Task-IL only

  /// Label used by the loss: local under Task-IL, global under Class-IL.
  int TrainingLabel(int global) const;
  int GlobalLabel(int local) const;
  bool Contains(int global) const;
};

/// A subset of a shared, immutable LabeledSet.
struct TaskView {
  std::shared_ptr<const LabeledSet> source;
  std::vector<std::size_t> indices;

  std::size_t size() const { return indices.size(); }
  int label(std::size_t i) const { return source->labels[indices[i]]; }
};

struct TaskSequence {
  IlMode il_mode = IlMode::kTaskIl;
  int total_classes = 0;  // width of a shared head
  std::vector<TaskSpec> tasks;
  std::vector<TaskView> train;
  std::vector<TaskView> test;

  std::size_t size() const { return tasks.size(); }
  /// Union of the classes of tasks 1..t (1-based, inclusive).
  std::vector<int> SeenClasses(int t) const;
};

TaskSequence MakeSplitMnist(std::shared_ptr<const LabeledSet> train,
                            std::shared_ptr<const LabeledSet> test);

/// Classes are ordered ascending (or shuffled by `shuffle_seed`), the first
/// `class_count` kept, then cut into `n_tasks` consecutive blocks.
/// Throws ConfigError when n_tasks does not divide class_count.
TaskSequence MakeSplitCifar100(std::shared_ptr<const LabeledSet> train,
                               std::shared_ptr<const LabeledSet> test, int n_tasks,
                               std::optional<std::uint64_t> shuffle_seed = {},
                               int class_count = 100);

struct Batch {
  Tensor x;
  std::vector<int> labels;  // global
  std::vector<std::size_t> source_rows;
};

/// Copies the given source rows into one batch tensor.
Batch GatherBatch(const LabeledSet& source, std::span<const std::size_t> rows);
Batch GatherBatch(const TaskView& view, std::span<const std::size_t> positions);

/// One epoch over a view in a seeded random order; the final batch may be short.
class MinibatchIterator {
 public:
  MinibatchIterator(const TaskView& view, std::size_t batch_size, std::uint64_t epoch_seed);
  bool Next(Batch& out);
  std::size_t batches() const;

 private:
  const TaskView& view_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

// ---------------------------------------------------------------------------
// Acquisition.

/// One file produced by a fetch, with its expected SHA-256 (hex). An empty
/// digest means trust-on-first-use: the digest is recorded after the archive
/// itself has been verified.
struct FetchedFile {
  std::string path;  // relative to dest_dir
  std::string sha256;
  std::uint64_t size = 0;  // 0 = unchecked
};

enum class ArchiveKind { kNone, kGzip, kTarGzip };

struct RemoteArchive {
  std::string url;
  ArchiveKind kind = ArchiveKind::kNone;
  /// Digest of the downloaded archive (algorithm "sha256" or "md5"); empty skips.
  std::string archive_digest_algo;
  std::string archive_digest;
  /// Members produced. kGzip/kNone produce exactly one; for tar archives,
  /// `path` is the member name inside the archive.
  std::vector<FetchedFile> files;
};

struct DatasetSource {
  std::string name;
  std::vector<RemoteArchive> archives;
};

/// Built-in sources for "mnist" and "cifar100". `base_url` replaces the
/// default host prefix (used for mirrors and tests).
DatasetSource BuiltinSource(std::string_view name, std::string_view base_url = {});

struct FetchReport {
  int downloads = 0;
  int verified = 0;
};

/// Ensures every file of `source` is present under `dest_dir` with a matching
/// digest, downloading and unpacking only what is missing or corrupt. Holds an
/// advisory lock on dest_dir/.cllab-fetch.lock for the duration.
/// Errors: IntegrityError on digest mismatch after download, FetchError on
/// transport failure, IoError on filesystem failure.
FetchReport FetchDataset(const DatasetSource& source, const std::filesystem::path& dest_dir);

std::string Sha256Hex(std::span<const std::uint8_t> bytes);
std::string FileDigestHex(const std::filesystem::path& file, std::string_view algo = "sha256");

/// Default dataset directory: $CLLAB_DATA_DIR, else ./data.
std::filesystem::path DefaultDataDir();

std::vector<std::uint8_t> ReadFileBytes(const std::filesystem::path& p);

/// Loads normalized Split MNIST from raw IDX files in `dir` (test split uses
/// train statistics).
TaskSequence LoadSplitMnist(const std::filesystem::path& dir);
/// Loads normalized Split CIFAR-100 from dir/cifar-100-binary/{train,test}.bin.
TaskSequence LoadSplitCifar100(const std::filesystem::path& dir, int n_tasks, int class_count,
                               std::optional<std::uint64_t> shuffle_seed = {});

}  // namespace cllab
