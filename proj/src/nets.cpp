#include "dqe/nets.hpp"

#include <cctype>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include "dqe/digest.hpp"
#include "dqe/error.hpp"

namespace dqe {

namespace F = torch::nn::functional;

namespace {

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

torch::Tensor leaky(const torch::Tensor& x, double slope) {
  return F::leaky_relu(x, F::LeakyReLUFuncOptions().negative_slope(slope));
}

torch::nn::Conv2d conv(int in, int out, int k) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, k).padding(k / 2));
}

// Inference on a const snapshot; holders share the module, so a copy is a
// non-const handle to the same weights.
template <class Holder>
Holder mut(const Holder& h) {
  return h;
}

torch::Dtype dtype_of(const torch::nn::Module& m) {
  const auto params = m.parameters();
  return params.empty() ? torch::kFloat32 : params.front().scalar_type();
}

}  // namespace

// ---------------------------------------------------------------------------
// ArchConfig

std::vector<std::pair<std::string, std::string>> ArchConfig::to_pairs() const {
  return {
      {"latent_dim", std::to_string(latent_dim)},
      {"cond_dim", std::to_string(cond_dim)},
      {"unet_depth", std::to_string(unet_depth)},
      {"unet_width", std::to_string(unet_width)},
      {"shuffle", std::to_string(shuffle)},
      {"encoder_stages", std::to_string(encoder_stages)},
      {"encoder_width", std::to_string(encoder_width)},
      {"cbam_reduction", std::to_string(cbam_reduction)},
      {"cbam_kernel", std::to_string(cbam_kernel)},
      {"predictor_hidden", std::to_string(predictor_hidden)},
      {"predictor_layers", std::to_string(predictor_layers)},
      {"time_embed_dim", std::to_string(time_embed_dim)},
      {"timesteps", std::to_string(timesteps)},
      {"beta_start", fmt_double(beta_start)},
      {"beta_end", fmt_double(beta_end)},
      {"leaky_slope", fmt_double(leaky_slope)},
  };
}

ArchConfig ArchConfig::from_map(const std::map<std::string, std::string>& kv) {
  ArchConfig a;
  auto get_int = [&](const char* key, int& dst) {
    if (auto it = kv.find(key); it != kv.end()) {
      try {
        std::size_t used = 0;
        dst = std::stoi(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument(key);
      } catch (const std::logic_error&) {
        throw ConfigError(std::string("bad integer for ") + key + ": '" + it->second + "'");
      }
    }
  };
  auto get_double = [&](const char* key, double& dst) {
    if (auto it = kv.find(key); it != kv.end()) {
      try {
        std::size_t used = 0;
        dst = std::stod(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument(key);
      } catch (const std::logic_error&) {
        throw ConfigError(std::string("bad number for ") + key + ": '" + it->second + "'");
      }
    }
  };
  get_int("latent_dim", a.latent_dim);
  get_int("cond_dim", a.cond_dim);
  get_int("unet_depth", a.unet_depth);
  get_int("unet_width", a.unet_width);
  get_int("shuffle", a.shuffle);
  get_int("encoder_stages", a.encoder_stages);
  get_int("encoder_width", a.encoder_width);
  get_int("cbam_reduction", a.cbam_reduction);
  get_int("cbam_kernel", a.cbam_kernel);
  get_int("predictor_hidden", a.predictor_hidden);
  get_int("predictor_layers", a.predictor_layers);
  get_int("time_embed_dim", a.time_embed_dim);
  get_int("timesteps", a.timesteps);
  get_double("beta_start", a.beta_start);
  get_double("beta_end", a.beta_end);
  get_double("leaky_slope", a.leaky_slope);
  a.validate();
  return a;
}

void ArchConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(latent_dim, "latent_dim");
  positive(cond_dim, "cond_dim");
  positive(unet_depth, "unet_depth");
  positive(unet_width, "unet_width");
  positive(shuffle, "shuffle");
  positive(encoder_width, "encoder_width");
  positive(cbam_reduction, "cbam_reduction");
  positive(predictor_hidden, "predictor_hidden");
  positive(timesteps, "timesteps");
  if (encoder_stages < 0) throw ConfigError("encoder_stages must be non-negative");
  if (predictor_layers < 2) throw ConfigError("predictor_layers must be at least 2");
  if (cbam_kernel < 1 || cbam_kernel % 2 == 0) throw ConfigError("cbam_kernel must be odd");
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0) {
    throw ConfigError("time_embed_dim must be even");
  }
  (void)build_schedule<double>(timesteps, beta_start, beta_end);
}

int ArchConfig::required_multiple() const {
  const int enc = shuffle * (1 << encoder_stages);
  const int dec = 1 << unet_depth;
  return std::lcm(enc, dec);
}

void check_finite(const torch::Tensor& t, const std::string& where) {
  if (!torch::isfinite(t).all().item<bool>()) {
    throw NumericError("non-finite activation in " + where);
  }
}

// ---------------------------------------------------------------------------
// Building blocks

ResUnitImpl::ResUnitImpl(int channels, double slope) : slope_(slope) {
  conv1 = register_module("conv1", conv(channels, channels, 3));
  conv2 = register_module("conv2", conv(channels, channels, 3));
}

torch::Tensor ResUnitImpl::forward(const torch::Tensor& x) {
  return x + conv2(leaky(conv1(x), slope_));
}

LatentEncoderImpl::LatentEncoderImpl(int in_channels, int out_dim, const ArchConfig& arch,
                                     std::string name)
    : name_(std::move(name)),
      shuffle_(arch.shuffle),
      multiple_(arch.shuffle * (1 << arch.encoder_stages)),
      slope_(arch.leaky_slope) {
  int width = arch.encoder_width;
  stem = register_module("stem", conv(in_channels * shuffle_ * shuffle_, width, 3));
  stages = register_module("stages", torch::nn::ModuleList());
  for (int s = 0; s < arch.encoder_stages; ++s) {
    stages->push_back(conv(width, width * 2, 3));
    width *= 2;
  }
  head = register_module("head", torch::nn::Linear(width, out_dim));
}

torch::Tensor LatentEncoderImpl::forward(const torch::Tensor& x) {
  if (x.dim() != 4) throw ShapeError(name_ + ": expected NCHW input");
  if (x.size(2) % multiple_ != 0 || x.size(3) % multiple_ != 0) {
    throw ShapeError(name_ + ": spatial dims " + std::to_string(x.size(2)) + "x" +
                     std::to_string(x.size(3)) + " not divisible by " + std::to_string(multiple_));
  }
  auto h = shuffle_ > 1 ? torch::pixel_unshuffle(x, shuffle_) : x;
  h = leaky(stem(h), slope_);
  for (std::size_t s = 0; s < stages->size(); ++s) {
    h = leaky(stages[s]->as<torch::nn::Conv2d>()->forward(h), slope_);
    h = F::max_pool2d(h, F::MaxPool2dFuncOptions(2));
    check_finite(h, name_ + ".stages." + std::to_string(s));
  }
  auto out = head(h.mean({2, 3}));
  check_finite(out, name_ + ".head");
  return out;
}

CbamFusionImpl::CbamFusionImpl(int channels, int latent_dim, const ArchConfig& arch)
    : channels_(channels), slope_(arch.leaky_slope) {
  const int hidden = std::max(1, channels / arch.cbam_reduction);
  mlp_in = register_module("mlp_in", torch::nn::Linear(channels, hidden));
  mlp_out = register_module("mlp_out", torch::nn::Linear(hidden, channels));
  latent_to_channel = register_module("latent_to_channel", torch::nn::Linear(latent_dim, channels));
  latent_to_spatial = register_module("latent_to_spatial", torch::nn::Linear(latent_dim, 1));
  spatial_conv = register_module("spatial_conv", conv(3, 1, arch.cbam_kernel));
}

torch::Tensor CbamFusionImpl::channel_gate(const torch::Tensor& f, const torch::Tensor& z) {
  if (f.size(1) != channels_) {
    throw ShapeError("cbam: feature map has " + std::to_string(f.size(1)) + " channels, expected " +
                     std::to_string(channels_));
  }
  auto mlp = [&](const torch::Tensor& v) { return mlp_out(leaky(mlp_in(v), slope_)); };
  const auto avg = f.mean({2, 3});
  const auto mx = f.amax({2, 3});
  return torch::sigmoid(mlp(avg) + mlp(mx) + latent_to_channel(z));
}

torch::Tensor CbamFusionImpl::spatial_gate(const torch::Tensor& fc, const torch::Tensor& z) {
  const auto avg = fc.mean(1, /*keepdim=*/true);
  const auto mx = std::get<0>(fc.max(1, /*keepdim=*/true));
  const auto zmap = latent_to_spatial(z).view({fc.size(0), 1, 1, 1}).expand_as(avg);
  return torch::sigmoid(spatial_conv(torch::cat({avg, mx, zmap}, 1)));
}

torch::Tensor CbamFusionImpl::forward(const torch::Tensor& f, const torch::Tensor& z) {
  const auto fc = f * channel_gate(f, z).unsqueeze(-1).unsqueeze(-1);
  return fc * spatial_gate(fc, z);
}

// ---------------------------------------------------------------------------
// Decoder

UNetDecoderImpl::UNetDecoderImpl(const ArchConfig& arch)
    : depth_(arch.unet_depth), latent_dim_(arch.latent_dim), slope_(arch.leaky_slope) {
  const int w0 = arch.unet_width;
  stem = register_module("stem", conv(1, w0, 3));
  down_units = register_module("down_units", torch::nn::ModuleList());
  down_convs = register_module("down_convs", torch::nn::ModuleList());
  up_convs = register_module("up_convs", torch::nn::ModuleList());
  merge_convs = register_module("merge_convs", torch::nn::ModuleList());
  cbams = register_module("cbams", torch::nn::ModuleList());
  up_units = register_module("up_units", torch::nn::ModuleList());
  for (int l = 0; l < depth_; ++l) {
    const int w = w0 << l;
    down_units->push_back(ResUnit(w, slope_));
    down_convs->push_back(conv(w, 2 * w, 3));
  }
  bottleneck = register_module("bottleneck", ResUnit(w0 << depth_, slope_));
  // Index l of the up path serves level l (finest = 0).
  for (int l = 0; l < depth_; ++l) {
    const int w = w0 << l;
    up_convs->push_back(
        torch::nn::ConvTranspose2d(torch::nn::ConvTranspose2dOptions(2 * w, w, 2).stride(2)));
    merge_convs->push_back(conv(2 * w, w, 3));
    cbams->push_back(CbamFusion(w, latent_dim_, arch));
    up_units->push_back(ResUnit(w, slope_));
  }
  residual_head = register_module("residual_head", conv(w0, 1, 3));
  torch::NoGradGuard no_grad;
  residual_head->weight.zero_();
  residual_head->bias.zero_();
}

torch::Tensor UNetDecoderImpl::forward(const torch::Tensor& img, const torch::Tensor& z) {
  if (img.dim() != 4 || img.size(1) != 1) throw ShapeError("decoder: expected [B, 1, H, W] input");
  const int64_t multiple = int64_t{1} << depth_;
  if (img.size(2) % multiple != 0 || img.size(3) % multiple != 0) {
    throw ShapeError("decoder: spatial dims " + std::to_string(img.size(2)) + "x" +
                     std::to_string(img.size(3)) + " not divisible by " + std::to_string(multiple));
  }
  if (z.dim() != 2 || z.size(0) != img.size(0) || z.size(1) != latent_dim_) {
    throw ShapeError("decoder: latent must be [B, " + std::to_string(latent_dim_) + "]");
  }

  std::vector<torch::Tensor> skips;
  auto h = leaky(stem(img), slope_);
  for (int l = 0; l < depth_; ++l) {
    h = down_units[l]->as<ResUnit>()->forward(h);
    skips.push_back(h);
    h = F::max_pool2d(h, F::MaxPool2dFuncOptions(2));
    h = leaky(down_convs[l]->as<torch::nn::Conv2d>()->forward(h), slope_);
  }
  h = bottleneck(h);
  check_finite(h, "decoder.bottleneck");
  for (int l = depth_ - 1; l >= 0; --l) {
    h = leaky(up_convs[l]->as<torch::nn::ConvTranspose2d>()->forward(h), slope_);
    h = leaky(merge_convs[l]->as<torch::nn::Conv2d>()->forward(torch::cat({h, skips[l]}, 1)),
              slope_);
    h = cbams[l]->as<CbamFusion>()->forward(h, z);
    h = up_units[l]->as<ResUnit>()->forward(h);
    check_finite(h, "decoder.up." + std::to_string(l));
  }
  return img + residual_head(h);
}

// ---------------------------------------------------------------------------
// Estimator

torch::Tensor timestep_embedding(const torch::Tensor& t, int dim) {
  const int half = dim / 2;
  const auto opts = torch::TensorOptions().dtype(torch::kFloat64);
  const auto freqs = torch::exp(-std::log(10000.0) * torch::arange(half, opts) / half);
  const auto args = t.to(torch::kFloat64).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::sin(args), torch::cos(args)}, 1);
}

NoisePredictorImpl::NoisePredictorImpl(const ArchConfig& arch)
    : embed_dim_(arch.time_embed_dim), slope_(arch.leaky_slope) {
  layers = register_module("layers", torch::nn::ModuleList());
  int in = arch.latent_dim + arch.cond_dim + arch.time_embed_dim;
  for (int i = 0; i < arch.predictor_layers; ++i) {
    const bool last = i + 1 == arch.predictor_layers;
    const int out = last ? arch.latent_dim : arch.predictor_hidden;
    layers->push_back(torch::nn::Linear(in, out));
    in = out;
  }
}

torch::Tensor NoisePredictorImpl::forward(const torch::Tensor& zt, const torch::Tensor& cond,
                                          const torch::Tensor& t) {
  const auto emb = timestep_embedding(t, embed_dim_).to(zt.scalar_type());
  auto h = torch::cat({zt, cond, emb}, 1);
  for (std::size_t i = 0; i < layers->size(); ++i) {
    h = layers[i]->as<torch::nn::Linear>()->forward(h);
    if (i + 1 < layers->size()) h = leaky(h, slope_);
  }
  check_finite(h, "predictor.out");
  return h;
}

LatentRegressorImpl::LatentRegressorImpl(const ArchConfig& arch) : slope_(arch.leaky_slope) {
  trunk = register_module("trunk", LatentEncoder(1, arch.cond_dim, arch, "regressor.trunk"));
  hidden = register_module("hidden", torch::nn::Linear(arch.cond_dim, arch.predictor_hidden));
  out = register_module("out", torch::nn::Linear(arch.predictor_hidden, arch.latent_dim));
}

torch::Tensor LatentRegressorImpl::forward(const torch::Tensor& img) {
  return out(leaky(hidden(trunk(img)), slope_));
}

// ---------------------------------------------------------------------------
// ModelWeights

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kNoDiff: return "NoDiff";
    case Variant::kNoEst: return "NoEst";
    case Variant::kBaseline: return "baseline";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  std::string l;
  for (const char c : s) l.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (l == "full") return Variant::kFull;
  if (l == "nodiff") return Variant::kNoDiff;
  if (l == "noest") return Variant::kNoEst;
  if (l == "baseline") return Variant::kBaseline;
  throw ConfigError("unknown variant '" + s + "' (expected full, NoDiff, NoEst or baseline)");
}

ModelWeights::ModelWeights(const ArchConfig& a, std::uint64_t seed) : arch(a) {
  arch.validate();
  reset(~0u, seed);
}

void ModelWeights::reset(unsigned components, std::uint64_t seed) {
  torch::manual_seed(seed);
  // Construction order is fixed so a given seed always yields the same weights.
  if (components & kEncoder) encoder = LatentEncoder(2, arch.latent_dim, arch, "encoder");
  if (components & kDecoder) decoder = UNetDecoder(arch);
  if (components & kCondition) condition = LatentEncoder(1, arch.cond_dim, arch, "condition");
  if (components & kPredictor) predictor = NoisePredictor(arch);
  if (components & kRegressor) regressor = LatentRegressor(arch);
}

namespace {

template <typename M>
void copy_params(const M& src, M& dst) {
  torch::NoGradGuard no_grad;
  auto s = src->named_parameters(true);
  auto d = dst->named_parameters(true);
  for (const auto& item : s) d[item.key()].copy_(item.value());
}

}  // namespace

ModelWeights ModelWeights::clone() const {
  ModelWeights out(arch, 0);
  out.variant = variant;
  out.present = present;
  out.meta = meta;
  out.to(dtype_of(*encoder));
  copy_params(encoder, out.encoder);
  copy_params(decoder, out.decoder);
  copy_params(condition, out.condition);
  copy_params(predictor, out.predictor);
  copy_params(regressor, out.regressor);
  return out;
}

std::vector<std::pair<std::string, torch::Tensor>> ModelWeights::named_parameters(
    unsigned components) const {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  auto add = [&](unsigned bit, const char* prefix, const torch::nn::Module& m) {
    if ((components & bit) == 0) return;
    for (const auto& item : m.named_parameters(true)) {
      out.emplace_back(std::string(prefix) + "." + item.key(), item.value());
    }
  };
  add(kEncoder, "encoder", *encoder);
  add(kDecoder, "decoder", *decoder);
  add(kCondition, "condition", *condition);
  add(kPredictor, "predictor", *predictor);
  add(kRegressor, "regressor", *regressor);
  return out;
}

std::vector<torch::Tensor> ModelWeights::parameters(unsigned components) const {
  std::vector<torch::Tensor> out;
  for (auto& [name, t] : named_parameters(components)) out.push_back(t);
  return out;
}

void ModelWeights::to(torch::Dtype dtype) {
  encoder->to(dtype);
  decoder->to(dtype);
  condition->to(dtype);
  predictor->to(dtype);
  regressor->to(dtype);
}

void ModelWeights::set_training(bool on) {
  encoder->train(on);
  decoder->train(on);
  condition->train(on);
  predictor->train(on);
  regressor->train(on);
}

void ModelWeights::zero_all() {
  torch::NoGradGuard no_grad;
  for (auto& [name, t] : named_parameters(~0u)) t.zero_();
}

std::string parameter_digest(const ModelWeights& w, unsigned components) {
  Sha256 h;
  for (const auto& [name, t] : w.named_parameters(components)) {
    const auto c = t.detach().contiguous().cpu();
    h.update(name);
    for (const auto s : c.sizes()) h.update(std::to_string(s) + ",");
    h.update(std::span<const std::uint8_t>(static_cast<const std::uint8_t*>(c.data_ptr()),
                                           c.nbytes()));
  }
  return h.hex();
}

// ---------------------------------------------------------------------------
// Plane-level wrappers

torch::Tensor plane_to_tensor(const LumaPlane& p) {
  auto px = p.pixels();
  return torch::from_blob(const_cast<float*>(px.data()), {1, 1, p.height(), p.width()},
                          torch::kFloat32)
      .clone();
}

LumaPlane tensor_to_plane(const torch::Tensor& t) {
  const auto c = t.detach().to(torch::kFloat32).contiguous().view({t.size(-2), t.size(-1)});
  LumaPlane out(static_cast<int>(c.size(0)), static_cast<int>(c.size(1)));
  std::memcpy(out.pixels().data(), c.data_ptr<float>(), out.size() * sizeof(float));
  return out;
}

torch::Tensor compose_encoder_input(const torch::Tensor& gt, const torch::Tensor& img,
                                    const torch::Tensor& qpmap) {
  if (!gt.sizes().equals(img.sizes()) || !gt.sizes().equals(qpmap.sizes())) {
    throw ShapeError("compose_encoder_input: gt, img and qpmap shapes differ");
  }
  return torch::cat({img, gt + qpmap}, 1);
}

torch::Tensor compose_encoder_input(const LumaPlane& gt, const LumaPlane& img, const QPMap& qpmap) {
  if (!gt.same_shape(img) || !gt.same_shape(qpmap)) {
    throw ShapeError("compose_encoder_input: gt, img and qpmap shapes differ");
  }
  return compose_encoder_input(plane_to_tensor(gt), plane_to_tensor(img), plane_to_tensor(qpmap));
}

namespace {

std::vector<float> to_vector(const torch::Tensor& t) {
  const auto c = t.detach().to(torch::kFloat32).contiguous().view({-1});
  return {c.data_ptr<float>(), c.data_ptr<float>() + c.numel()};
}

torch::Tensor from_vector(std::span<const float> v, torch::Dtype dtype) {
  return torch::from_blob(const_cast<float*>(v.data()), {1, static_cast<int64_t>(v.size())},
                          torch::kFloat32)
      .to(dtype);
}

}  // namespace

std::vector<float> encode(const LumaPlane& gt, const LumaPlane& img, const QPMap& qpmap,
                          const ModelWeights& w) {
  torch::NoGradGuard no_grad;
  const auto x = compose_encoder_input(gt, img, qpmap).to(dtype_of(*w.encoder));
  return to_vector(mut(w.encoder)->forward(x));
}

LumaPlane decode(const LumaPlane& img, std::span<const float> z, const ModelWeights& w) {
  torch::NoGradGuard no_grad;
  const auto dtype = dtype_of(*w.decoder);
  if (static_cast<int>(z.size()) != w.arch.latent_dim) {
    throw ShapeError("decode: latent length " + std::to_string(z.size()) + ", expected " +
                     std::to_string(w.arch.latent_dim));
  }
  const auto out = mut(w.decoder)->forward(plane_to_tensor(img).to(dtype), from_vector(z, dtype));
  return tensor_to_plane(out.clamp(0.0, 1.0));
}

std::vector<float> encode_condition(const LumaPlane& img, const ModelWeights& w) {
  torch::NoGradGuard no_grad;
  return to_vector(mut(w.condition)->forward(plane_to_tensor(img).to(dtype_of(*w.condition))));
}

std::vector<float> regress_latent(const LumaPlane& img, const ModelWeights& w) {
  torch::NoGradGuard no_grad;
  return to_vector(mut(w.regressor)->forward(plane_to_tensor(img).to(dtype_of(*w.regressor))));
}

std::vector<float> predict_noise(std::span<const float> zt, std::span<const float> cond, int t,
                                 const ModelWeights& w) {
  torch::NoGradGuard no_grad;
  if (static_cast<int>(zt.size()) != w.arch.latent_dim ||
      static_cast<int>(cond.size()) != w.arch.cond_dim) {
    throw ShapeError("predict_noise: input lengths do not match the architecture");
  }
  const auto dtype = dtype_of(*w.predictor);
  const auto tt = torch::full({1}, t, torch::kInt64);
  return to_vector(mut(w.predictor)->forward(from_vector(zt, dtype), from_vector(cond, dtype), tt));
}

}  // namespace dqe
