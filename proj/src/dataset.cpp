#include "dqe/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "dqe/config.hpp"
#include "dqe/digest.hpp"
#include "dqe/error.hpp"

namespace dqe {

namespace fs = std::filesystem;

std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw FormatError("unknown split '" + s + "'");
}

std::string serialize_manifest(const DatasetManifest& m) {
  std::ostringstream os;
  os << "# dqe dataset manifest\n";
  os << "version=1\n";
  os << "split=" << to_string(m.split) << '\n';
  os << "qp_set=" << join_ints(m.qp_set) << '\n';
  os << "seed=" << m.seed << '\n';
  os << "codec=" << to_string(m.codec_mode) << '\n';
  os << "block_size=" << m.block_size << '\n';
  os << "corpus_digest=" << m.corpus_digest << '\n';
  os << "entries=" << m.entries.size() << '\n';
  for (const auto& e : m.entries) {
    os << e.source_id << '\t' << e.qp << '\t' << e.width << '\t' << e.height << '\t'
       << e.gt_path.generic_string() << '\t' << e.compressed_path.generic_string() << '\n';
  }
  return os.str();
}

DatasetManifest parse_manifest(const std::string& text, const fs::path& root) {
  DatasetManifest m;
  m.root = root;
  std::istringstream in(text);
  std::string line;
  long expected = -1;
  int lineno = 0;
  auto fail = [&](const std::string& why) {
    throw FormatError("manifest line " + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (expected < 0) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) fail("expected key=value header");
      const std::string key = line.substr(0, eq);
      const std::string value = line.substr(eq + 1);
      try {
        if (key == "version") {
          if (value != "1") fail("unsupported manifest version " + value);
        } else if (key == "split") {
          m.split = parse_split(value);
        } else if (key == "qp_set") {
          m.qp_set = parse_int_list(value);
        } else if (key == "seed") {
          m.seed = std::stoull(value);
        } else if (key == "codec") {
          m.codec_mode = parse_codec_mode(value);
        } else if (key == "block_size") {
          m.block_size = std::stoi(value);
        } else if (key == "corpus_digest") {
          m.corpus_digest = value;
        } else if (key == "entries") {
          expected = std::stol(value);
        } else {
          fail("unknown header key '" + key + "'");
        }
      } catch (const std::logic_error&) {
        fail("bad value for '" + key + "'");
      }
      continue;
    }
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields.size() != 6) fail("expected 6 tab-separated fields");
    ManifestEntry e;
    e.source_id = fields[0];
    try {
      e.qp = std::stoi(fields[1]);
      e.width = std::stoi(fields[2]);
      e.height = std::stoi(fields[3]);
    } catch (const std::logic_error&) {
      fail("non-numeric qp or dimensions");
    }
    e.gt_path = fields[4];
    e.compressed_path = fields[5];
    m.entries.push_back(std::move(e));
  }
  if (expected < 0) throw FormatError("manifest has no entries= header");
  if (static_cast<std::size_t>(expected) != m.entries.size()) {
    throw FormatError("manifest declares " + std::to_string(expected) + " entries but lists " +
                      std::to_string(m.entries.size()));
  }
  return m;
}

void write_manifest(const fs::path& path, const DatasetManifest& m) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write manifest " + tmp.string());
    out << serialize_manifest(m);
    if (!out) throw IoError("failed writing manifest " + tmp.string());
  }
  fs::rename(tmp, path);
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read manifest " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  DatasetManifest m = parse_manifest(buf.str(), path.parent_path());
  for (const auto& e : m.entries) {
    for (const auto& p : {e.gt_path, e.compressed_path}) {
      if (!fs::exists(m.root / p)) {
        throw IoError("manifest " + path.string() + " references missing file " + (m.root / p).string());
      }
    }
  }
  return m;
}

std::string manifest_digest(const DatasetManifest& m) { return sha256_hex(serialize_manifest(m)); }

std::vector<fs::path> list_corpus(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("corpus directory not found: " + dir.string());
  static const std::set<std::string> kExt = {".png", ".pgm", ".ppm", ".pnm"};
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (kExt.count(ext)) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

std::string corpus_digest(const std::vector<fs::path>& files) {
  Sha256 h;
  for (const auto& f : files) {
    h.update(f.filename().string());
    h.update(":");
    h.update(file_sha256(f));
    h.update("\n");
  }
  return h.hex();
}

DatasetBuild build_dataset(const fs::path& corpus_dir, const std::vector<int>& qp_set,
                           const CodecConfig& codec, const fs::path& out_dir, double split_ratio,
                           std::uint64_t seed) {
  if (!(split_ratio > 0.0 && split_ratio < 1.0)) {
    throw ConfigError("split ratio must lie in (0, 1)");
  }
  if (qp_set.empty()) throw ConfigError("qp set is empty");
  std::vector<int> qps = qp_set;
  std::sort(qps.begin(), qps.end());
  if (std::adjacent_find(qps.begin(), qps.end()) != qps.end()) {
    throw ConfigError("qp set has duplicates");
  }

  const auto files = list_corpus(corpus_dir);
  if (files.empty()) throw ConfigError("corpus " + corpus_dir.string() + " contains no images");

  std::error_code ec;
  fs::create_directories(out_dir / "gt", ec);
  for (const int qp : qps) fs::create_directories(out_dir / ("qp" + std::to_string(qp)), ec);
  if (ec || !fs::is_directory(out_dir / "gt")) {
    throw IoError("cannot create dataset directory " + out_dir.string());
  }

  // Source-level split, seeded.
  std::vector<std::size_t> order(files.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(split_ratio * files.size())), 1, files.size());
  std::vector<bool> is_train(files.size(), false);
  for (std::size_t i = 0; i < n_train; ++i) is_train[order[i]] = true;

  DatasetBuild build;
  const std::string digest = corpus_digest(files);
  for (DatasetManifest* m : {&build.train, &build.val}) {
    m->qp_set = qps;
    m->seed = seed;
    m->codec_mode = codec.mode;
    m->block_size = codec.block_size;
    m->corpus_digest = digest;
    m->root = out_dir;
  }
  build.train.split = Split::kTrain;
  build.val.split = Split::kVal;

  std::set<std::string> seen;
  for (std::size_t i = 0; i < files.size(); ++i) {
    const std::string id = files[i].stem().string();
    if (!seen.insert(id).second) throw ConfigError("duplicate source id '" + id + "' in corpus");
    const LumaPlane gt = quantize_8bit(read_luma_image(files[i]));
    const fs::path gt_rel = fs::path("gt") / (id + ".y");
    write_raw_plane(out_dir / gt_rel, gt);
    for (const int qp : qps) {
      LumaPlane compressed;
      try {
        compressed = compress(gt, qp, codec);
      } catch (const Error& e) {
        throw IoError("codec failed on source '" + id + "' at qp " + std::to_string(qp) + ": " +
                      e.what());
      }
      const fs::path rel = fs::path("qp" + std::to_string(qp)) / (id + ".y");
      write_raw_plane(out_dir / rel, compressed);
      (is_train[i] ? build.train : build.val)
          .entries.push_back({id, qp, gt.width(), gt.height(), gt_rel, rel});
    }
  }
  // Files are listed in sorted path order, which is source_id order for a flat directory.
  auto by_id = [](const ManifestEntry& a, const ManifestEntry& b) {
    return std::tie(a.source_id, a.qp) < std::tie(b.source_id, b.qp);
  };
  std::sort(build.train.entries.begin(), build.train.entries.end(), by_id);
  std::sort(build.val.entries.begin(), build.val.entries.end(), by_id);

  write_manifest(out_dir / "train.manifest", build.train);
  write_manifest(out_dir / "val.manifest", build.val);
  return build;
}

FrameSample load_sample(const DatasetManifest& m, const ManifestEntry& e) {
  FrameSample s;
  s.gt = read_raw_plane(m.root / e.gt_path, e.height, e.width);
  s.compressed = read_raw_plane(m.root / e.compressed_path, e.height, e.width);
  s.qp = e.qp;
  s.source_id = e.source_id;
  return s;
}

std::vector<FrameSample> load_samples(const DatasetManifest& m) {
  std::vector<FrameSample> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) out.push_back(load_sample(m, e));
  return out;
}

std::vector<Patch> sample_patches(const FrameSample& sample, int size, int n, std::uint64_t seed) {
  if (n <= 0) throw ConfigError("patch count must be positive");
  if (size <= 0 || size % 8 != 0) throw ConfigError("patch size must be a positive multiple of 8");
  if (!sample.gt.same_shape(sample.compressed)) throw ShapeError("gt and compressed dims differ");
  if (size > sample.gt.height() || size > sample.gt.width()) {
    throw ConfigError("patch size " + std::to_string(size) + " exceeds image " +
                      std::to_string(sample.gt.height()) + "x" + std::to_string(sample.gt.width()));
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> ys(0, sample.gt.height() - size);
  std::uniform_int_distribution<int> xs(0, sample.gt.width() - size);
  std::vector<Patch> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int y = ys(rng);
    const int x = xs(rng);
    out.push_back({crop(sample.gt, y, x, size, size), crop(sample.compressed, y, x, size, size),
                   sample.qp, y, x});
  }
  return out;
}

BatchStream::BatchStream(const std::vector<FrameSample>& samples, int batch, int patch,
                         std::uint64_t seed)
    : samples_(samples), batch_(batch), patch_(patch), seed_(seed) {
  if (samples_.empty()) throw ConfigError("batch stream needs at least one sample");
  if (batch_ <= 0) throw ConfigError("batch size must be positive");
}

std::vector<std::size_t> BatchStream::epoch_order(std::int64_t epoch) const {
  std::vector<std::size_t> order(samples_.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(seed_, static_cast<std::uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::vector<Patch> BatchStream::batch(std::int64_t step) const {
  const auto n = static_cast<std::int64_t>(samples_.size());
  std::vector<Patch> out;
  out.reserve(static_cast<std::size_t>(batch_));
  std::int64_t cached_epoch = -1;
  std::vector<std::size_t> order;
  for (int i = 0; i < batch_; ++i) {
    const std::int64_t g = step * batch_ + i;
    const std::int64_t epoch = g / n;
    if (epoch != cached_epoch) {
      order = epoch_order(epoch);
      cached_epoch = epoch;
    }
    const auto& s = samples_[order[static_cast<std::size_t>(g % n)]];
    auto p = sample_patches(s, patch_, 1, mix_seed(seed_ ^ 0x5bd1e995ull, static_cast<std::uint64_t>(g)));
    out.push_back(std::move(p.front()));
  }
  return out;
}

}  // namespace dqe
