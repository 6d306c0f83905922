#include "dqe/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "dqe/error.hpp"

namespace dqe {

namespace fs = std::filesystem;

namespace {

constexpr const char* kMagic = "DQE-CHECKPOINT";

constexpr std::pair<Component, const char*> kComponentNames[] = {
    {kEncoder, "encoder"},     {kDecoder, "decoder"},     {kCondition, "condition"},
    {kPredictor, "predictor"}, {kRegressor, "regressor"},
};

std::string dtype_name(torch::Dtype d) {
  if (d == torch::kFloat32) return "f32";
  if (d == torch::kFloat64) return "f64";
  throw FormatError("unsupported tensor dtype in checkpoint");
}

torch::Dtype parse_dtype(const std::string& s) {
  if (s == "f32") return torch::kFloat32;
  if (s == "f64") return torch::kFloat64;
  throw FormatError("unknown tensor dtype '" + s + "' in checkpoint");
}

std::string read_line(std::istream& in, const fs::path& path) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": truncated checkpoint");
  return line;
}

}  // namespace

std::string components_to_string(unsigned components) {
  std::string out;
  for (const auto& [bit, name] : kComponentNames) {
    if ((components & bit) == 0) continue;
    if (!out.empty()) out += ",";
    out += name;
  }
  return out;
}

unsigned parse_components(const std::string& s) {
  unsigned out = 0;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    bool found = false;
    for (const auto& [bit, name] : kComponentNames) {
      if (item == name) {
        out |= bit;
        found = true;
      }
    }
    if (!found) throw FormatError("unknown component '" + item + "'");
  }
  return out;
}

void save_checkpoint(const fs::path& path, const ModelWeights& weights,
                     const std::map<std::string, std::vector<std::uint8_t>>& blobs) {
  const auto tensors = weights.named_parameters(weights.present);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out << kMagic << ' ' << kCheckpointVersion << '\n';
    for (const auto& [k, v] : weights.arch.to_pairs()) out << "arch." << k << '=' << v << '\n';
    out << "meta.variant=" << to_string(weights.variant) << '\n';
    for (const auto& [k, v] : weights.meta) {
      if (k == "variant") continue;
      out << "meta." << k << '=' << v << '\n';
    }
    out << "components=" << components_to_string(weights.present) << '\n';
    out << "tensors=" << tensors.size() << '\n';
    out << "blobs=" << blobs.size() << '\n';
    out << '\n';
    for (const auto& [name, t] : tensors) {
      const auto c = t.detach().contiguous().cpu();
      out << name << ' ' << dtype_name(c.scalar_type()) << ' ' << c.dim();
      for (const auto s : c.sizes()) out << ' ' << s;
      out << ' ' << c.nbytes() << '\n';
      out.write(static_cast<const char*>(c.data_ptr()), static_cast<std::streamsize>(c.nbytes()));
    }
    for (const auto& [name, bytes] : blobs) {
      out << name << ' ' << bytes.size() << '\n';
      out.write(reinterpret_cast<const char*>(bytes.data()),
                static_cast<std::streamsize>(bytes.size()));
    }
    if (!out) throw IoError("failed writing checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path, const std::optional<ArchConfig>& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());

  {
    std::istringstream first(read_line(in, path));
    std::string magic;
    int version = 0;
    first >> magic >> version;
    if (magic != kMagic) throw FormatError(path.string() + ": not a checkpoint file");
    if (version != kCheckpointVersion) {
      throw FormatError(path.string() + ": unsupported checkpoint version " +
                        std::to_string(version));
    }
  }

  std::map<std::string, std::string> arch_kv, meta;
  std::string components;
  std::size_t n_tensors = 0, n_blobs = 0;
  for (std::string line = read_line(in, path); !line.empty(); line = read_line(in, path)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(path.string() + ": bad header line '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    if (key.rfind("arch.", 0) == 0) arch_kv[key.substr(5)] = value;
    else if (key.rfind("meta.", 0) == 0) meta[key.substr(5)] = value;
    else if (key == "components") components = value;
    else if (key == "tensors") n_tensors = std::stoul(value);
    else if (key == "blobs") n_blobs = std::stoul(value);
    else throw FormatError(path.string() + ": unknown header key '" + key + "'");
  }

  const ArchConfig arch = ArchConfig::from_map(arch_kv);
  if (expected) {
    const auto want = expected->to_pairs();
    for (const auto& [k, v] : want) {
      const auto it = arch_kv.find(k);
      const std::string have = it == arch_kv.end() ? "<missing>" : it->second;
      if (have != v) {
        throw ConfigError("checkpoint " + path.string() + " architecture mismatch at '" + k +
                          "': file has " + have + ", expected " + v);
      }
    }
  }

  Checkpoint ck{ModelWeights(arch, 0), {}};
  ModelWeights& w = ck.weights;
  w.present = parse_components(components);
  w.variant = parse_variant(meta.count("variant") ? meta["variant"] : "full");
  meta.erase("variant");
  w.meta = meta;

  auto params = w.named_parameters(~0u);
  std::map<std::string, torch::Tensor> by_name(params.begin(), params.end());
  bool converted = false;
  std::size_t loaded = 0;
  for (std::size_t i = 0; i < n_tensors; ++i) {
    std::istringstream rec(read_line(in, path));
    std::string name, dtype;
    int ndim = 0;
    rec >> name >> dtype >> ndim;
    std::vector<int64_t> shape(static_cast<std::size_t>(ndim));
    for (auto& s : shape) rec >> s;
    std::size_t nbytes = 0;
    rec >> nbytes;
    if (!rec) throw FormatError(path.string() + ": bad tensor record for '" + name + "'");

    const auto dt = parse_dtype(dtype);
    if (!converted && dt != torch::kFloat32) {
      w.to(dt);
      params = w.named_parameters(~0u);
      by_name = std::map<std::string, torch::Tensor>(params.begin(), params.end());
    }
    converted = true;

    const auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError(path.string() + ": unexpected tensor '" + name + "'");
    torch::Tensor& dst = it->second;
    if (!dst.sizes().equals(shape) || dst.scalar_type() != dt || dst.nbytes() != nbytes) {
      throw FormatError(path.string() + ": tensor '" + name + "' has wrong shape or dtype");
    }
    std::vector<char> buf(nbytes);
    in.read(buf.data(), static_cast<std::streamsize>(nbytes));
    if (static_cast<std::size_t>(in.gcount()) != nbytes) {
      throw FormatError(path.string() + ": truncated tensor '" + name + "'");
    }
    torch::NoGradGuard no_grad;
    std::memcpy(dst.data_ptr(), buf.data(), nbytes);
    ++loaded;
  }
  if (loaded != w.named_parameters(w.present).size()) {
    throw FormatError(path.string() + ": tensor count does not cover the listed components");
  }
  for (std::size_t i = 0; i < n_blobs; ++i) {
    std::istringstream rec(read_line(in, path));
    std::string name;
    std::size_t nbytes = 0;
    rec >> name >> nbytes;
    std::vector<std::uint8_t> bytes(nbytes);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(nbytes));
    if (static_cast<std::size_t>(in.gcount()) != nbytes) {
      throw FormatError(path.string() + ": truncated blob '" + name + "'");
    }
    ck.blobs.emplace(name, std::move(bytes));
  }
  return ck;
}

}  // namespace dqe
