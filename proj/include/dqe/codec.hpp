// QP-parameterised degradation: a block-DCT quantisation proxy and an adapter
// around an external encoder binary (e.g. HM in all-intra mode).

#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dqe/image.hpp"

namespace dqe {

// Overrides CodecConfig::external_encoder_path when set.
inline constexpr const char* kEncoderEnvVar = "DQE_ENCODER";

inline constexpr int kMaxQp = 51;

enum class CodecMode { kProxy, kExternal };

struct CodecConfig {
  CodecMode mode = CodecMode::kProxy;
  int block_size = 8;
  int qp = 32;
  std::optional<std::filesystem::path> external_encoder_path;
  // Placeholders: {in} {out} {qp} {w} {h}.
  std::string external_args_template = "{in} {out} {qp} {w} {h}";
  // Workspace root for external runs; empty means the system temp directory.
  std::filesystem::path workspace;
};

std::string to_string(CodecMode mode);
CodecMode parse_codec_mode(const std::string& s);

// HEVC-style step size on the 0..255 scale: 2^((qp - 4) / 6).
double qstep(int qp);

// Orthonormal type-II DCT of an n x n block (row-major), and its inverse.
std::vector<double> dct2d(const std::vector<double>& block, int n);
std::vector<double> idct2d(const std::vector<double>& coeffs, int n);

// Round half away from zero.
double quantize_coefficient(double c, double step);

LumaPlane compress_proxy(const LumaPlane& img, int qp, int block_size = 8);

// Substitutes {in} {out} {qp} {w} {h} in `tmpl`.
std::string render_args(const std::string& tmpl, const std::string& in, const std::string& out,
                        int qp, int width, int height);

LumaPlane compress_external(const LumaPlane& img, int qp, const CodecConfig& config);

// Dispatches on config.mode with config.qp replaced by `qp`.
LumaPlane compress(const LumaPlane& img, int qp, const CodecConfig& config);

QPMap make_qpmap(int qp, int height, int width);

}  // namespace dqe
