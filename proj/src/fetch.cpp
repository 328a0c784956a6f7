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

// Dataset acquisition: download, verify, unpack.

#include <curl/curl.h>
#include <fcntl.h>
#include <openssl/evp.h>
#include <sys/file.h>
#include <unistd.h>
#include <zlib.h>

#include <array>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>

#include "cllab/datasets.hpp"
#include "cllab/error.hpp"

namespace fs = std::filesystem;

namespace cllab {
namespace {

constexpr const char* kDigestRecord = ".cllab-digests";
constexpr const char* kLockName = ".cllab-fetch.lock";

std::string ToHex(const unsigned char* d, unsigned n) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (unsigned i = 0; i < n; ++i) {
    s += digits[d[i] >> 4];
    s += digits[d[i] & 0xF];
  }
  return s;
}

struct MdCtxDeleter {
  void operator()(EVP_MD_CTX* c) const { EVP_MD_CTX_free(c); }
};

class Digest {
 public:
  explicit Digest(std::string_view algo) : ctx_(EVP_MD_CTX_new()) {
    const EVP_MD* md = EVP_get_digestbyname(std::string(algo).c_str());
    if (!md) throw InputError("unknown digest algorithm '" + std::string(algo) + "'");
    EVP_DigestInit_ex(ctx_.get(), md, nullptr);
  }
  void Update(const void* p, std::size_t n) { EVP_DigestUpdate(ctx_.get(), p, n); }
  std::string HexFinal() {
    unsigned char out[EVP_MAX_MD_SIZE];
    unsigned n = 0;
    EVP_DigestFinal_ex(ctx_.get(), out, &n);
    return ToHex(out, n);
  }

 private:
  std::unique_ptr<EVP_MD_CTX, MdCtxDeleter> ctx_;
};

class DirLock {
 public:
  explicit DirLock(const fs::path& p) {
    fd_ = ::open(p.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw IoError("cannot open lock file " + p.string());
    if (::flock(fd_, LOCK_EX) != 0) {
      ::close(fd_);
      throw IoError("cannot lock " + p.string());
    }
  }
  ~DirLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  int fd_ = -1;
};

std::map<std::string, std::string> ReadRecord(const fs::path& dir) {
  std::map<std::string, std::string> rec;
  std::ifstream in(dir / kDigestRecord);
  std::string digest, path;
  while (in >> digest >> path) rec[path] = digest;
  return rec;
}

void WriteRecord(const fs::path& dir, const std::map<std::string, std::string>& rec) {
  const fs::path tmp = dir / (std::string(kDigestRecord) + ".tmp");
  {
    std::ofstream out(tmp, std::ios::trunc);
    for (const auto& [path, digest] : rec) out << digest << "  " << path << "\n";
    if (!out) throw IoError("cannot write " + tmp.string());
  }
  fs::rename(tmp, dir / kDigestRecord);
}

bool FileIsValid(const fs::path& dir, const FetchedFile& f,
                 const std::map<std::string, std::string>& rec) {
  const fs::path p = dir / f.path;
  std::error_code ec;
  if (!fs::is_regular_file(p, ec)) return false;
  if (f.size != 0 && fs::file_size(p, ec) != f.size) return false;
  const std::string actual = FileDigestHex(p);
  if (!f.sha256.empty()) return actual == f.sha256;
  auto it = rec.find(f.path);
  return it != rec.end() && it->second == actual;
}

void CurlInitOnce() {
  static std::once_flag once;
  std::call_once(once, [] { curl_global_init(CURL_GLOBAL_DEFAULT); });
}

std::size_t WriteToFile(char* p, std::size_t size, std::size_t n, void* user) {
  return std::fwrite(p, size, n, static_cast<std::FILE*>(user));
}

void Download(const std::string& url, const fs::path& to) {
  CurlInitOnce();
  std::FILE* out = std::fopen(to.c_str(), "wb");
  if (!out) throw IoError("cannot create " + to.string());
  CURL* curl = curl_easy_init();
  char err[CURL_ERROR_SIZE] = {0};
  curl_easy_setopt(curl, CURLOPT_URL, url.c_str());
  curl_easy_setopt(curl, CURLOPT_WRITEFUNCTION, WriteToFile);
  curl_easy_setopt(curl, CURLOPT_WRITEDATA, out);
  curl_easy_setopt(curl, CURLOPT_FOLLOWLOCATION, 1L);
  curl_easy_setopt(curl, CURLOPT_FAILONERROR, 1L);
  curl_easy_setopt(curl, CURLOPT_CONNECTTIMEOUT, 30L);
  curl_easy_setopt(curl, CURLOPT_LOW_SPEED_LIMIT, 1024L);
  curl_easy_setopt(curl, CURLOPT_LOW_SPEED_TIME, 60L);
  curl_easy_setopt(curl, CURLOPT_ERRORBUFFER, err);
  const CURLcode rc = curl_easy_perform(curl);
  curl_easy_cleanup(curl);
  const bool closed = std::fclose(out) == 0;
  if (rc != CURLE_OK) {
    throw FetchError("download of " + url + " failed: " + (err[0] ? err : curl_easy_strerror(rc)));
  }
  if (!closed) throw IoError("write failed for " + to.string());
}

void Gunzip(const fs::path& from, const fs::path& to) {
  gzFile in = gzopen(from.c_str(), "rb");
  if (!in) throw IoError("cannot open " + from.string());
  std::ofstream out(to, std::ios::binary | std::ios::trunc);
  std::array<char, 1 << 16> buf;
  int n;
  while ((n = gzread(in, buf.data(), static_cast<unsigned>(buf.size()))) > 0) {
    out.write(buf.data(), n);
  }
  int errnum = 0;
  const char* msg = gzerror(in, &errnum);
  gzclose(in);
  if (n < 0 || (errnum != Z_OK && errnum != Z_STREAM_END)) {
    throw IntegrityError("corrupt gzip stream in " + from.string() + ": " + msg);
  }
  if (!out) throw IoError("write failed for " + to.string());
}

std::uint64_t ParseOctal(const char* p, std::size_t n) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < n && p[i]; ++i) {
    if (p[i] == ' ') continue;
    if (p[i] < '0' || p[i] > '7') break;
    v = v * 8 + static_cast<std::uint64_t>(p[i] - '0');
  }
  return v;
}

// Extracts the wanted members of a ustar archive; returns the names found.
std::vector<std::string> ExtractTar(const fs::path& tar, const fs::path& dest,
                                    const std::vector<FetchedFile>& wanted) {
  std::ifstream in(tar, std::ios::binary);
  if (!in) throw IoError("cannot open " + tar.string());
  std::vector<std::string> found;
  std::array<char, 512> block;
  std::vector<char> buf(1 << 16);
  while (in.read(block.data(), 512)) {
    if (block[0] == '\0') break;  // end-of-archive marker
    std::string name(block.data(), strnlen(block.data(), 100));
    const std::string prefix(block.data() + 345, strnlen(block.data() + 345, 155));
    if (!prefix.empty() && std::string(block.data() + 257, 5) == "ustar") name = prefix + "/" + name;
    const std::uint64_t size = ParseOctal(block.data() + 124, 12);
    const char type = block[156];
    const std::uint64_t padded = (size + 511) / 512 * 512;
    bool want = false;
    for (const auto& f : wanted) want = want || f.path == name;
    if (want && (type == '0' || type == '\0')) {
      const fs::path target = dest / name;
      fs::create_directories(target.parent_path());
      const fs::path tmp = target.string() + ".part";
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      std::uint64_t left = size;
      while (left > 0) {
        const auto chunk = static_cast<std::streamsize>(std::min<std::uint64_t>(left, buf.size()));
        if (!in.read(buf.data(), chunk)) throw IntegrityError("tar member " + name + " truncated");
        out.write(buf.data(), chunk);
        left -= static_cast<std::uint64_t>(chunk);
      }
      out.close();
      if (!out) throw IoError("write failed for " + tmp.string());
      fs::rename(tmp, target);
      in.seekg(static_cast<std::streamoff>(padded - size), std::ios::cur);
      found.push_back(name);
    } else {
      in.seekg(static_cast<std::streamoff>(padded), std::ios::cur);
    }
  }
  return found;
}

void FetchArchive(const RemoteArchive& a, const fs::path& dest,
                  std::map<std::string, std::string>& rec) {
  const fs::path tmp = dest / ".cllab-download.part";
  std::string last_error;
  bool ok = false;
  // Two attempts: transient transport failures are common on slow links.
  for (int attempt = 0; attempt < 2 && !ok; ++attempt) {
    try {
      Download(a.url, tmp);
      ok = true;
    } catch (const FetchError& e) {
      last_error = e.what();
    }
  }
  if (!ok) throw FetchError(last_error);
  if (!a.archive_digest.empty()) {
    const std::string got = FileDigestHex(tmp, a.archive_digest_algo);
    if (got != a.archive_digest) {
      fs::remove(tmp);
      throw IntegrityError("digest mismatch for " + a.url + ": expected " + a.archive_digest_algo + " " +
                           a.archive_digest + ", got " + got);
    }
  }
  switch (a.kind) {
    case ArchiveKind::kNone:
      fs::rename(tmp, dest / a.files.at(0).path);
      break;
    case ArchiveKind::kGzip: {
      const fs::path target = dest / a.files.at(0).path;
      fs::create_directories(target.parent_path());
      Gunzip(tmp, target.string() + ".part");
      fs::rename(target.string() + ".part", target);
      fs::remove(tmp);
      break;
    }
    case ArchiveKind::kTarGzip: {
      const fs::path tar = dest / ".cllab-download.tar";
      Gunzip(tmp, tar);
      fs::remove(tmp);
      auto found = ExtractTar(tar, dest, a.files);
      fs::remove(tar);
      if (found.size() != a.files.size()) {
        throw IntegrityError("archive " + a.url + " lacks expected members");
      }
      break;
    }
  }
  for (const auto& f : a.files) {
    const fs::path p = dest / f.path;
    if (f.size != 0 && fs::file_size(p) != f.size) {
      throw IntegrityError(p.string() + " has size " + std::to_string(fs::file_size(p)) + ", expected " +
                           std::to_string(f.size));
    }
    const std::string got = FileDigestHex(p);
    if (!f.sha256.empty() && got != f.sha256) {
      throw IntegrityError("digest mismatch for " + p.string() + ": expected sha256 " + f.sha256 +
                           ", got " + got);
    }
    rec[f.path] = got;
  }
}

std::string JoinUrl(std::string_view base, std::string_view file) {
  std::string s(base);
  if (!s.empty() && s.back() != '/') s += '/';
  return s + std::string(file);
}

}  // namespace

std::string Sha256Hex(std::span<const std::uint8_t> bytes) {
  Digest d("sha256");
  d.Update(bytes.data(), bytes.size());
  return d.HexFinal();
}

std::string FileDigestHex(const fs::path& file, std::string_view algo) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  Digest d(algo);
  std::vector<char> buf(1 << 16);
  while (in.read(buf.data(), static_cast<std::streamsize>(buf.size())) || in.gcount() > 0) {
    d.Update(buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  return d.HexFinal();
}

DatasetSource BuiltinSource(std::string_view name, std::string_view base_url) {
  DatasetSource src;
  src.name = std::string(name);
  if (name == "mnist") {
    // Content digests of the decompressed IDX files.
    struct F {
      const char* file;
      const char* sha256;
      std::uint64_t size;
    };
    const F files[] = {
        {"train-images-idx3-ubyte", "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db", 47040016},
        {"train-labels-idx1-ubyte", "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5", 60008},
        {"t10k-images-idx3-ubyte", "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7", 7840016},
        {"t10k-labels-idx1-ubyte", "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2", 10008},
    };
    const std::string_view base = base_url.empty() ? "https://ossci-datasets.s3.amazonaws.com/mnist" : base_url;
    for (const auto& f : files) {
      RemoteArchive a;
      a.url = JoinUrl(base, std::string(f.file) + ".gz");
      a.kind = ArchiveKind::kGzip;
      a.files.push_back({f.file, f.sha256, f.size});
      src.archives.push_back(std::move(a));
    }
  } else if (name == "cifar100") {
    RemoteArchive a;
    a.url = JoinUrl(base_url.empty() ? "https://www.cs.toronto.edu/~kriz" : base_url, "cifar-100-binary.tar.gz");
    a.kind = ArchiveKind::kTarGzip;
    // Archive checksum as published on the dataset's home page.
    a.archive_digest_algo = "md5";
    a.archive_digest = "03b5dce01913d631647c71ecec9e9cb8";
    a.files.push_back({"cifar-100-binary/train.bin", "", 50000 * kCifarRecordBytes});
    a.files.push_back({"cifar-100-binary/test.bin", "", 10000 * kCifarRecordBytes});
    src.archives.push_back(std::move(a));
  } else {
    throw UsageError("unknown dataset '" + std::string(name) + "' (expected mnist or cifar100)");
  }
  return src;
}

FetchReport FetchDataset(const DatasetSource& source, const fs::path& dest_dir) {
  std::error_code ec;
  fs::create_directories(dest_dir, ec);
  if (ec) throw IoError("cannot create " + dest_dir.string() + ": " + ec.message());
  DirLock lock(dest_dir / kLockName);
  auto rec = ReadRecord(dest_dir);
  FetchReport report;
  for (const auto& a : source.archives) {
    bool all_valid = true;
    for (const auto& f : a.files) all_valid = all_valid && FileIsValid(dest_dir, f, rec);
    if (all_valid) {
      report.verified += static_cast<int>(a.files.size());
      continue;
    }
    FetchArchive(a, dest_dir, rec);
    ++report.downloads;
    WriteRecord(dest_dir, rec);
  }
  return report;
}

}  // namespace cllab
