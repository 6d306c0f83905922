// Mixed-QP dataset construction, manifests and patch batches.
//
// Manifest layout (line-oriented, tab-separated records):
//
//   # dqe dataset manifest
//   version=1
//   split=train
//   qp_set=27,32,37,42
//   seed=1
//   codec=proxy
//   block_size=8
//   corpus_digest=<sha256>
//   entries=<n>
//   <source_id>\t<qp>\t<width>\t<height>\t<gt_path>\t<compressed_path>
//   ...
//
// Paths are relative to the manifest's directory. Records are ordered by
// source_id, then qp.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dqe/codec.hpp"
#include "dqe/image.hpp"

namespace dqe {

enum class Split { kTrain, kVal, kTest };

std::string to_string(Split s);
Split parse_split(const std::string& s);

struct ManifestEntry {
  std::string source_id;
  int qp = 0;
  int width = 0;
  int height = 0;
  std::filesystem::path gt_path;
  std::filesystem::path compressed_path;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::vector<int> qp_set;
  Split split = Split::kTrain;
  CodecMode codec_mode = CodecMode::kProxy;
  int block_size = 8;
  std::uint64_t seed = 0;
  std::string corpus_digest;
  // Directory the relative paths resolve against; not serialised.
  std::filesystem::path root;
};

std::string serialize_manifest(const DatasetManifest& m);
DatasetManifest parse_manifest(const std::string& text, const std::filesystem::path& root);

// Written atomically (temp file + rename).
void write_manifest(const std::filesystem::path& path, const DatasetManifest& m);
// Verifies every referenced plane file exists.
DatasetManifest read_manifest(const std::filesystem::path& path);
std::string manifest_digest(const DatasetManifest& m);

// Image files (png, pgm, ppm, pnm) in `dir`, sorted by filename.
std::vector<std::filesystem::path> list_corpus(const std::filesystem::path& dir);
std::string corpus_digest(const std::vector<std::filesystem::path>& files);

struct DatasetBuild {
  DatasetManifest train;
  DatasetManifest val;
};

// Writes gt/<id>.y and qp<q>/<id>.y planes plus train.manifest and
// val.manifest under `out_dir`. Sources are split (not entries), so the two
// manifests never share a source_id.
DatasetBuild build_dataset(const std::filesystem::path& corpus_dir, const std::vector<int>& qp_set,
                           const CodecConfig& codec, const std::filesystem::path& out_dir,
                           double split_ratio, std::uint64_t seed);

struct FrameSample {
  LumaPlane gt;
  LumaPlane compressed;
  int qp = 0;
  std::string source_id;
};

FrameSample load_sample(const DatasetManifest& m, const ManifestEntry& e);
std::vector<FrameSample> load_samples(const DatasetManifest& m);

struct Patch {
  LumaPlane gt;
  LumaPlane compressed;
  int qp = 0;
  int y = 0;
  int x = 0;
};

std::vector<Patch> sample_patches(const FrameSample& sample, int size, int n, std::uint64_t seed);

// Deterministic mixed-QP patch stream. Item g of the stream is sample
// perm_e[g mod N] of epoch e = g / N, cut at a position seeded by (seed, g);
// every epoch visits every (source, qp) sample exactly once. batch(step) is a
// pure function of step, so training can resume mid-stream.
class BatchStream {
 public:
  BatchStream(const std::vector<FrameSample>& samples, int batch, int patch, std::uint64_t seed);

  std::vector<Patch> batch(std::int64_t step) const;
  std::size_t epoch_size() const { return samples_.size(); }

 private:
  std::vector<std::size_t> epoch_order(std::int64_t epoch) const;

  const std::vector<FrameSample>& samples_;
  int batch_;
  int patch_;
  std::uint64_t seed_;
};

}  // namespace dqe
