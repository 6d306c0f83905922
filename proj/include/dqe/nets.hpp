// Networks of the enhancement model:
//
//   prior encoder      (GT + QP map, compressed)  -> Z_enc
//   UNet decoder       (compressed, Z)             -> enhanced luma
//   condition encoder  (compressed)                -> C_vec
//   noise predictor    (Z_t, C_vec, t)             -> eps_hat
//   latent regressor   (compressed)                -> Z      (direct-regression ablation)
//
// Tensors are NCHW; luma inputs are [B, 1, H, W] in [0, 1].

#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dqe/diffusion.hpp"
#include "dqe/image.hpp"

namespace dqe {

struct ArchConfig {
  int latent_dim = 256;
  int cond_dim = 256;
  int unet_depth = 3;
  int unet_width = 32;
  int shuffle = 2;
  int encoder_stages = 3;
  int encoder_width = 32;
  int cbam_reduction = 4;
  int cbam_kernel = 7;
  int predictor_hidden = 512;
  int predictor_layers = 4;
  int time_embed_dim = 64;
  int timesteps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  double leaky_slope = 0.1;

  // Ordered key/value echo, used by checkpoints and config files.
  std::vector<std::pair<std::string, std::string>> to_pairs() const;
  static ArchConfig from_map(const std::map<std::string, std::string>& kv);
  void validate() const;

  // Spatial multiple required by every network that sees an image.
  int required_multiple() const;

  NoiseSchedule<double> schedule() const {
    return build_schedule<double>(timesteps, beta_start, beta_end);
  }

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

// Throws NumericError naming `where` when `t` holds NaN or Inf.
void check_finite(const torch::Tensor& t, const std::string& where);

// x + conv(leaky(conv(x)))
class ResUnitImpl : public torch::nn::Module {
 public:
  ResUnitImpl(int channels, double slope);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};

 private:
  double slope_;
};
TORCH_MODULE(ResUnit);

// Pixel-unshuffle, conv + max-pool stages, global average pooling, linear.
class LatentEncoderImpl : public torch::nn::Module {
 public:
  // `name` labels non-finite diagnostics.
  LatentEncoderImpl(int in_channels, int out_dim, const ArchConfig& arch, std::string name);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv2d stem{nullptr};
  torch::nn::ModuleList stages;
  torch::nn::Linear head{nullptr};

 private:
  std::string name_;
  int shuffle_;
  int multiple_;
  double slope_;
};
TORCH_MODULE(LatentEncoder);

// Channel and spatial attention conditioned on a latent vector Z:
//   M_c = sigmoid(MLP(avg F) + MLP(max F) + MLP_z(Z))
//   M_s = sigmoid(conv(cat(mean_c F_c, max_c F_c, broadcast(W_z Z))))
class CbamFusionImpl : public torch::nn::Module {
 public:
  CbamFusionImpl(int channels, int latent_dim, const ArchConfig& arch);

  torch::Tensor channel_gate(const torch::Tensor& f, const torch::Tensor& z);  // [B, C]
  torch::Tensor spatial_gate(const torch::Tensor& fc, const torch::Tensor& z); // [B, 1, H, W]
  torch::Tensor forward(const torch::Tensor& f, const torch::Tensor& z);

  torch::nn::Linear mlp_in{nullptr}, mlp_out{nullptr};
  torch::nn::Linear latent_to_channel{nullptr};
  torch::nn::Linear latent_to_spatial{nullptr};
  torch::nn::Conv2d spatial_conv{nullptr};

 private:
  int channels_;
  double slope_;
};
TORCH_MODULE(CbamFusion);

// UNet over the compressed plane; every merge level is fused through CBAM with
// Z. The residual head is zero-initialised, so a fresh decoder is the identity.
class UNetDecoderImpl : public torch::nn::Module {
 public:
  explicit UNetDecoderImpl(const ArchConfig& arch);

  // Returns img + residual, unclamped.
  torch::Tensor forward(const torch::Tensor& img, const torch::Tensor& z);

  torch::nn::Conv2d stem{nullptr};
  torch::nn::ModuleList down_units, down_convs, up_convs, merge_convs, cbams, up_units;
  ResUnit bottleneck{nullptr};
  torch::nn::Conv2d residual_head{nullptr};

 private:
  int depth_;
  int latent_dim_;
  double slope_;
};
TORCH_MODULE(UNetDecoder);

// Sinusoidal embedding of 1-based timesteps: [sin(t w_i), cos(t w_i)].
torch::Tensor timestep_embedding(const torch::Tensor& t, int dim);

// MLP over cat(Z_t, C_vec, emb(t)).
class NoisePredictorImpl : public torch::nn::Module {
 public:
  explicit NoisePredictorImpl(const ArchConfig& arch);
  torch::Tensor forward(const torch::Tensor& zt, const torch::Tensor& cond,
                        const torch::Tensor& t);

  torch::nn::ModuleList layers;

 private:
  int embed_dim_;
  double slope_;
};
TORCH_MODULE(NoisePredictor);

// Condition-encoder trunk plus an MLP head predicting Z directly.
class LatentRegressorImpl : public torch::nn::Module {
 public:
  explicit LatentRegressorImpl(const ArchConfig& arch);
  torch::Tensor forward(const torch::Tensor& img);

  LatentEncoder trunk{nullptr};
  torch::nn::Linear hidden{nullptr}, out{nullptr};

 private:
  double slope_;
};
TORCH_MODULE(LatentRegressor);

enum class Variant { kFull, kNoDiff, kNoEst, kBaseline };

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);

enum Component : unsigned {
  kEncoder = 1u << 0,
  kDecoder = 1u << 1,
  kCondition = 1u << 2,
  kPredictor = 1u << 3,
  kRegressor = 1u << 4,
};

// All parameter sets of the model. Components not listed in `present` exist
// in memory but are not trained, saved or used.
struct ModelWeights {
  ArchConfig arch;
  Variant variant = Variant::kFull;
  unsigned present = 0;
  std::map<std::string, std::string> meta;

  LatentEncoder encoder{nullptr};
  UNetDecoder decoder{nullptr};
  LatentEncoder condition{nullptr};
  NoisePredictor predictor{nullptr};
  LatentRegressor regressor{nullptr};

  // Initialises every component with torch's default init under `seed`.
  ModelWeights(const ArchConfig& arch, std::uint64_t seed);

  // Module holders share storage; use clone() for an independent copy.
  ModelWeights(const ModelWeights&) = delete;
  ModelWeights& operator=(const ModelWeights&) = delete;
  ModelWeights(ModelWeights&&) = default;
  ModelWeights& operator=(ModelWeights&&) = default;

  ModelWeights clone() const;

  bool has(Component c) const { return (present & c) != 0; }

  // Named parameters of the listed components, prefixed "encoder.", ...
  std::vector<std::pair<std::string, torch::Tensor>> named_parameters(unsigned components) const;
  std::vector<torch::Tensor> parameters(unsigned components) const;

  void to(torch::Dtype dtype);
  void set_training(bool on);

  // Sets every parameter of every component to zero.
  void zero_all();

  // Re-creates the listed components with fresh default init under `seed`.
  void reset(unsigned components, std::uint64_t seed);
};

// SHA-256 over names, shapes and bytes of the listed components' parameters.
std::string parameter_digest(const ModelWeights& w, unsigned components);

// Plane-level wrappers for a single image (no autograd).
torch::Tensor plane_to_tensor(const LumaPlane& p);
LumaPlane tensor_to_plane(const torch::Tensor& t);

// Channel 0 = img; channel 1 = gt + qpmap (unclamped). Shape [1, 2, H, W].
torch::Tensor compose_encoder_input(const LumaPlane& gt, const LumaPlane& img, const QPMap& qpmap);
torch::Tensor compose_encoder_input(const torch::Tensor& gt, const torch::Tensor& img,
                                    const torch::Tensor& qpmap);

std::vector<float> encode(const LumaPlane& gt, const LumaPlane& img, const QPMap& qpmap,
                          const ModelWeights& w);
// Evaluation path: output clamped to [0, 1].
LumaPlane decode(const LumaPlane& img, std::span<const float> z, const ModelWeights& w);
std::vector<float> encode_condition(const LumaPlane& img, const ModelWeights& w);
std::vector<float> regress_latent(const LumaPlane& img, const ModelWeights& w);
std::vector<float> predict_noise(std::span<const float> zt, std::span<const float> cond, int t,
                                 const ModelWeights& w);

}  // namespace dqe
