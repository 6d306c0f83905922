#include "dqe/codec.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <numbers>

#include "dqe/error.hpp"

namespace dqe {

namespace fs = std::filesystem;

std::string to_string(CodecMode mode) {
  return mode == CodecMode::kProxy ? "proxy" : "external";
}

CodecMode parse_codec_mode(const std::string& s) {
  if (s == "proxy") return CodecMode::kProxy;
  if (s == "external") return CodecMode::kExternal;
  throw ConfigError("unknown codec mode '" + s + "' (expected proxy or external)");
}

namespace {

void check_qp(int qp) {
  if (qp < 0 || qp > kMaxQp) {
    throw ConfigError("qp " + std::to_string(qp) + " outside [0, 51]");
  }
}

// basis[k * n + i] = c(k) cos(pi (2i + 1) k / 2n)
std::vector<double> dct_basis(int n) {
  std::vector<double> basis(static_cast<std::size_t>(n) * n);
  for (int k = 0; k < n; ++k) {
    const double scale = k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
    for (int i = 0; i < n; ++i) {
      basis[static_cast<std::size_t>(k) * n + i] =
          scale * std::cos(std::numbers::pi * (2 * i + 1) * k / (2.0 * n));
    }
  }
  return basis;
}

// out = A * X * B where A or B is the basis or its transpose.
std::vector<double> separable(const std::vector<double>& x, int n, bool forward) {
  thread_local int cached_n = 0;
  thread_local std::vector<double> basis;
  if (cached_n != n) {
    basis = dct_basis(n);
    cached_n = n;
  }
  auto b = [&](int r, int c) { return basis[static_cast<std::size_t>(r) * n + c]; };
  std::vector<double> tmp(x.size(), 0.0);
  std::vector<double> out(x.size(), 0.0);
  // Rows first, then columns.
  for (int r = 0; r < n; ++r) {
    for (int k = 0; k < n; ++k) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) {
        acc += x[static_cast<std::size_t>(r) * n + i] * (forward ? b(k, i) : b(i, k));
      }
      tmp[static_cast<std::size_t>(r) * n + k] = acc;
    }
  }
  for (int c = 0; c < n; ++c) {
    for (int k = 0; k < n; ++k) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) {
        acc += tmp[static_cast<std::size_t>(i) * n + c] * (forward ? b(k, i) : b(i, k));
      }
      out[static_cast<std::size_t>(k) * n + c] = acc;
    }
  }
  return out;
}

}  // namespace

double qstep(int qp) {
  check_qp(qp);
  return std::pow(2.0, (qp - 4) / 6.0);
}

std::vector<double> dct2d(const std::vector<double>& block, int n) {
  if (block.size() != static_cast<std::size_t>(n) * n) throw ShapeError("dct2d: block size mismatch");
  return separable(block, n, true);
}

std::vector<double> idct2d(const std::vector<double>& coeffs, int n) {
  if (coeffs.size() != static_cast<std::size_t>(n) * n) throw ShapeError("idct2d: block size mismatch");
  return separable(coeffs, n, false);
}

double quantize_coefficient(double c, double step) {
  // std::round rounds halfway cases away from zero.
  return std::round(c / step) * step;
}

LumaPlane compress_proxy(const LumaPlane& img, int qp, int block_size) {
  check_qp(qp);
  if (block_size < 1) throw ConfigError("block size must be positive");
  if (img.empty()) throw ShapeError("compress_proxy: empty plane");
  const double step = qstep(qp);
  const int n = block_size;
  const LumaPlane padded = pad_to_multiple(img, n);
  LumaPlane out(padded.height(), padded.width());
  std::vector<double> block(static_cast<std::size_t>(n) * n);

  for (int by = 0; by < padded.height(); by += n) {
    for (int bx = 0; bx < padded.width(); bx += n) {
      for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
          block[static_cast<std::size_t>(y) * n + x] = 255.0 * padded.at(by + y, bx + x);
        }
      }
      auto coeffs = dct2d(block, n);
      for (double& c : coeffs) c = quantize_coefficient(c, step);
      const auto rec = idct2d(coeffs, n);
      for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
          const double v = rec[static_cast<std::size_t>(y) * n + x] / 255.0;
          out.at(by + y, bx + x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
  }
  return crop(out, 0, 0, img.height(), img.width());
}

std::string render_args(const std::string& tmpl, const std::string& in, const std::string& out,
                        int qp, int width, int height) {
  std::string result;
  for (std::size_t i = 0; i < tmpl.size();) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i);
      if (close != std::string::npos) {
        const std::string key = tmpl.substr(i + 1, close - i - 1);
        const char* value = nullptr;
        std::string num;
        if (key == "in") value = in.c_str();
        else if (key == "out") value = out.c_str();
        else if (key == "qp") num = std::to_string(qp);
        else if (key == "w") num = std::to_string(width);
        else if (key == "h") num = std::to_string(height);
        else throw ConfigError("unknown placeholder {" + key + "} in encoder args template");
        result += value ? std::string(value) : num;
        i = close + 1;
        continue;
      }
    }
    result.push_back(tmpl[i++]);
  }
  return result;
}

namespace {

std::string shell_quote(const std::string& s) {
  std::string q = "'";
  for (const char c : s) {
    if (c == '\'') q += "'\\''";
    else q.push_back(c);
  }
  return q + "'";
}

fs::path resolve_encoder(const CodecConfig& config) {
  if (const char* env = std::getenv(kEncoderEnvVar); env != nullptr && *env != '\0') {
    return env;
  }
  if (!config.external_encoder_path) {
    throw ConfigError(std::string("external codec mode needs an encoder path (flag or ") +
                      kEncoderEnvVar + ")");
  }
  return *config.external_encoder_path;
}

// Temporary directory removed on scope exit.
class Workspace {
 public:
  explicit Workspace(const fs::path& root) {
    const fs::path base = root.empty() ? fs::temp_directory_path() : root;
    std::string pattern = (base / "dqe-codec-XXXXXX").string();
    if (mkdtemp(pattern.data()) == nullptr) {
      throw IoError("cannot create codec workspace under " + base.string());
    }
    dir_ = pattern;
  }
  ~Workspace() {
    std::error_code ec;
    fs::remove_all(dir_, ec);
  }
  Workspace(const Workspace&) = delete;
  Workspace& operator=(const Workspace&) = delete;

  const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
};

std::string tail(const std::string& s, std::size_t n) {
  return s.size() <= n ? s : "..." + s.substr(s.size() - n);
}

}  // namespace

LumaPlane compress_external(const LumaPlane& img, int qp, const CodecConfig& config) {
  check_qp(qp);
  const fs::path encoder = resolve_encoder(config);
  if (!fs::exists(encoder) || fs::is_directory(encoder)) {
    throw ConfigError("encoder binary not found: " + encoder.string());
  }
  if (access(encoder.c_str(), X_OK) != 0) {
    throw ConfigError("encoder binary is not executable: " + encoder.string());
  }

  Workspace ws(config.workspace);
  const fs::path in = ws.dir() / "in.y";
  const fs::path out = ws.dir() / "out.y";
  write_raw_plane(in, img);

  const std::string cmd =
      shell_quote(encoder.string()) + " " +
      render_args(config.external_args_template, shell_quote(in.string()),
                  shell_quote(out.string()), qp, img.width(), img.height()) +
      " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (pipe == nullptr) throw IoError("cannot launch encoder " + encoder.string());
  std::string captured;
  char buf[4096];
  while (std::size_t got = std::fread(buf, 1, sizeof buf, pipe)) captured.append(buf, got);
  const int status = pclose(pipe);
  if (status != 0) {
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    throw IoError("encoder exited with status " + std::to_string(code) + ": " +
                  tail(captured, 2000));
  }
  if (!fs::exists(out)) throw FormatError("encoder produced no reconstruction file");

  std::ifstream f(out, std::ios::binary);
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  const std::size_t luma = img.size();
  // Accept a bare luma plane or 4:2:0 with luma first.
  if (bytes.size() != luma && bytes.size() != luma + luma / 2) {
    throw FormatError("encoder output has " + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(luma) + " (luma) or " + std::to_string(luma + luma / 2) +
                      " (4:2:0)");
  }
  bytes.resize(luma);
  return from_bytes(bytes, img.height(), img.width());
}

LumaPlane compress(const LumaPlane& img, int qp, const CodecConfig& config) {
  return config.mode == CodecMode::kProxy ? compress_proxy(img, qp, config.block_size)
                                          : compress_external(img, qp, config);
}

QPMap make_qpmap(int qp, int height, int width) {
  check_qp(qp);
  return QPMap(height, width, static_cast<float>(qp / 51.0));
}

}  // namespace dqe
