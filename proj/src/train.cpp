#include "dqe/train.hpp"

#include <chrono>
#include <cmath>
#include <iostream>
#include <random>
#include <sstream>

#include "dqe/checkpoint.hpp"
#include "dqe/config.hpp"
#include "dqe/error.hpp"

namespace dqe {

namespace fs = std::filesystem;

std::string to_string(Stage s) {
  switch (s) {
    case Stage::kStage1: return "stage1";
    case Stage::kStage2: return "stage2";
    case Stage::kNoEst: return "noest";
    case Stage::kNoDiff: return "nodiff";
  }
  return "?";
}

Stage parse_stage(const std::string& s) {
  std::string l;
  for (const char c : s) l.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (l == "stage1") return Stage::kStage1;
  if (l == "stage2") return Stage::kStage2;
  if (l == "noest") return Stage::kNoEst;
  if (l == "nodiff") return Stage::kNoDiff;
  throw ConfigError("unknown stage '" + s + "' (expected stage1, stage2, noest or nodiff)");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (steps < 0) throw ConfigError("steps must be non-negative");
  if (batch < 1) throw ConfigError("batch must be positive");
  if (patch < 1 || patch % arch.required_multiple() != 0) {
    throw ConfigError("patch must be a positive multiple of " +
                      std::to_string(arch.required_multiple()));
  }
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
  if (val_every < 1 || val_batch < 1) throw ConfigError("validation cadence and batch must be positive");
  arch.validate();
}

// ---------------------------------------------------------------------------
// Logging

std::string format_log_record(const TrainLogRecord& r) {
  std::ostringstream os;
  os.precision(9);
  os << r.step << '\t' << r.loss_name << '\t' << r.value << '\t' << r.wall_ms;
  return os.str();
}

TrainLogger::TrainLogger(std::ostream* console, const fs::path& metrics_file, int print_every)
    : console_(console), print_every_(std::max(1, print_every)) {
  if (!metrics_file.empty()) {
    file_ = std::make_unique<std::ofstream>(metrics_file, std::ios::trunc);
    if (!*file_) throw IoError("cannot write metrics file " + metrics_file.string());
    *file_ << "step\tloss\tvalue\twall_ms\n";
  }
}

void TrainLogger::log(const TrainLogRecord& r) {
  records_.push_back(r);
  const std::string line = format_log_record(r);
  if (file_) *file_ << line << '\n' << std::flush;
  if (console_ && r.step % print_every_ == 0) *console_ << line << '\n';
}

// ---------------------------------------------------------------------------
// Diffusion helpers

std::vector<int> draw_timesteps(std::uint64_t seed, std::int64_t step, int batch, int T) {
  std::mt19937_64 rng(mix_seed(seed ^ 0x7453ull, static_cast<std::uint64_t>(step)));
  std::uniform_int_distribution<int> dist(1, T);
  std::vector<int> out(static_cast<std::size_t>(batch));
  for (auto& t : out) t = dist(rng);
  return out;
}

double latent_estimation_loss(const std::vector<std::vector<double>>& z_enc,
                              const std::vector<std::vector<double>>& cond,
                              const LatentPredictor& predictor, const NoiseSchedule<double>& s,
                              std::uint64_t seed, SamplerNoise noise) {
  if (z_enc.size() != cond.size() || z_enc.empty()) {
    throw ShapeError("latent_estimation_loss: batch sizes differ or are empty");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < z_enc.size(); ++i) {
    const auto z_est = sample_feature<double>(cond[i], z_enc[i].size(), predictor, s,
                                              mix_seed(seed, i), noise);
    total += noise_loss<double>(z_est, z_enc[i]);
  }
  return total / static_cast<double>(z_enc.size());
}

LatentPredictor network_predictor(const ModelWeights& w) {
  return [&w](const LatentState<double>& state, std::span<const double> cond) {
    const std::vector<float> zt(state.vector.begin(), state.vector.end());
    const std::vector<float> c(cond.begin(), cond.end());
    const auto eps = predict_noise(zt, c, state.t, w);
    return std::vector<double>(eps.begin(), eps.end());
  };
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

struct BatchTensors {
  torch::Tensor gt, compressed, qpmap;
};

BatchTensors to_tensors(const std::vector<Patch>& patches) {
  std::vector<torch::Tensor> gt, comp, qp;
  for (const auto& p : patches) {
    gt.push_back(plane_to_tensor(p.gt));
    comp.push_back(plane_to_tensor(p.compressed));
    qp.push_back(plane_to_tensor(make_qpmap(p.qp, p.gt.height(), p.gt.width())));
  }
  return {torch::cat(gt, 0), torch::cat(comp, 0), torch::cat(qp, 0)};
}

torch::Tensor standard_normal(std::uint64_t seed, int64_t rows, int64_t cols) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto t = torch::empty({rows, cols}, torch::kFloat32);
  float* p = t.data_ptr<float>();
  for (int64_t i = 0; i < rows * cols; ++i) p[i] = static_cast<float>(normal(rng));
  return t;
}

std::vector<std::vector<double>> rows_of(const torch::Tensor& t) {
  const auto c = t.detach().to(torch::kFloat64).contiguous();
  std::vector<std::vector<double>> out;
  for (int64_t i = 0; i < c.size(0); ++i) {
    const double* p = c[i].data_ptr<double>();
    out.emplace_back(p, p + c.size(1));
  }
  return out;
}

fs::path step_checkpoint_path(const fs::path& out, std::int64_t step) {
  return out.parent_path() /
         (out.stem().string() + "-step" + std::to_string(step) + out.extension().string());
}

std::vector<std::uint8_t> save_optimizer(torch::optim::Optimizer& opt) {
  torch::serialize::OutputArchive archive;
  opt.save(archive);
  std::ostringstream os;
  archive.save_to(os);
  const std::string s = os.str();
  return {s.begin(), s.end()};
}

void load_optimizer(torch::optim::Optimizer& opt, const std::vector<std::uint8_t>& bytes) {
  std::istringstream is(std::string(bytes.begin(), bytes.end()));
  torch::serialize::InputArchive archive;
  archive.load_from(is);
  opt.load(archive);
}

void copy_component_params(const ModelWeights& src, ModelWeights& dst, unsigned components) {
  torch::NoGradGuard no_grad;
  auto s = src.named_parameters(components);
  auto d = dst.named_parameters(components);
  for (std::size_t i = 0; i < s.size(); ++i) d[i].second.copy_(s[i].second);
}

struct LoopSpec {
  std::string loss_name;
  unsigned trainable = 0;
  std::function<torch::Tensor(std::int64_t step)> loss;
  // Returns L_est on the held-out batch; optional.
  std::function<double()> validate;
};

void run_loop(const TrainConfig& config, ModelWeights& w, const LoopSpec& spec, TrainLogger& log) {
  auto params = w.parameters(spec.trainable);
  torch::optim::Adam optimizer(params, torch::optim::AdamOptions(config.lr));

  std::int64_t start = 0;
  if (config.resume) {
    const Checkpoint ck = load_checkpoint(*config.resume, config.arch);
    copy_component_params(ck.weights, w, ck.weights.present);
    const auto it = ck.blobs.find("optimizer");
    if (it == ck.blobs.end()) throw FormatError(config.resume->string() + ": no optimizer state");
    load_optimizer(optimizer, it->second);
    start = std::stoll(ck.weights.meta.at("step"));
  }

  w.meta["stage"] = to_string(config.stage);
  w.meta["seed"] = std::to_string(config.seed);
  w.meta["lr"] = std::to_string(config.lr);
  w.meta["batch"] = std::to_string(config.batch);
  w.meta["patch"] = std::to_string(config.patch);

  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed_ms = [&] {
    return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - t0)
        .count();
  };

  for (std::int64_t step = start; step < config.steps; ++step) {
    optimizer.zero_grad();
    const torch::Tensor loss = spec.loss(step);
    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
      throw NumericError("non-finite " + spec.loss_name + " at step " + std::to_string(step));
    }
    loss.backward();
    if (config.grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(params, config.grad_clip);
    optimizer.step();
    log.log({step, spec.loss_name, value, elapsed_ms()});

    const std::int64_t done = step + 1;
    if (spec.validate && (done % config.val_every == 0 || done == config.steps)) {
      const double l_est = spec.validate();
      if (!std::isfinite(l_est)) throw NumericError("non-finite L_est at step " + std::to_string(done));
      log.log({done, "L_est", l_est, elapsed_ms()});
    }
    if (!config.out.empty() && config.checkpoint_every > 0 && done % config.checkpoint_every == 0 &&
        done != config.steps) {
      w.meta["step"] = std::to_string(done);
      save_checkpoint(step_checkpoint_path(config.out, done), w, {{"optimizer", save_optimizer(optimizer)}});
    }
  }

  w.meta["step"] = std::to_string(std::max<std::int64_t>(start, config.steps));
  if (!config.out.empty()) {
    save_checkpoint(config.out, w, {{"optimizer", save_optimizer(optimizer)}});
  }
}

void require_stage1(const ModelWeights& stage1, const TrainConfig& config) {
  if (!(stage1.has(kEncoder) && stage1.has(kDecoder))) {
    throw ConfigError("stage-1 weights (encoder + decoder) are required");
  }
  if (!(stage1.arch == config.arch)) {
    throw ConfigError("stage-1 checkpoint architecture does not match the training config");
  }
}

}  // namespace

ModelWeights train_stage1(const TrainConfig& config, const std::vector<FrameSample>& train,
                          TrainLogger& log) {
  config.validate();
  ModelWeights w(config.arch, config.seed);
  w.variant = Variant::kFull;
  w.present = kEncoder | kDecoder;
  w.set_training(true);
  const BatchStream stream(train, config.batch, config.patch, config.seed);

  LoopSpec spec;
  spec.loss_name = "L_rec";
  spec.trainable = kEncoder | kDecoder;
  spec.loss = [&](std::int64_t step) {
    const auto b = to_tensors(stream.batch(step));
    const auto z = w.encoder->forward(compose_encoder_input(b.gt, b.compressed, b.qpmap));
    const auto out = w.decoder->forward(b.compressed, z);
    return torch::mse_loss(out, b.gt);
  };
  run_loop(config, w, spec, log);
  w.set_training(false);
  return w;
}

ModelWeights train_stage2(const TrainConfig& config, const std::vector<FrameSample>& train,
                          const std::vector<FrameSample>& val, const ModelWeights& stage1,
                          TrainLogger& log) {
  config.validate();
  require_stage1(stage1, config);
  ModelWeights w = stage1.clone();
  w.reset(kCondition | kPredictor, config.seed);
  w.present = kEncoder | kDecoder | kCondition | kPredictor;
  w.variant = Variant::kFull;
  w.encoder->eval();
  w.decoder->eval();
  w.condition->train();
  w.predictor->train();

  const auto schedule = config.arch.schedule();
  const int T = schedule.T;
  std::vector<float> sqrt_ab(static_cast<std::size_t>(T)), sqrt_one_minus(static_cast<std::size_t>(T));
  for (int t = 1; t <= T; ++t) {
    sqrt_ab[static_cast<std::size_t>(t - 1)] = static_cast<float>(std::sqrt(schedule.alpha_bar(t)));
    sqrt_one_minus[static_cast<std::size_t>(t - 1)] =
        static_cast<float>(std::sqrt(1.0 - schedule.alpha_bar(t)));
  }

  const BatchStream stream(train, config.batch, config.patch, config.seed);
  const auto& held_out = val.empty() ? train : val;
  const BatchStream val_stream(held_out, config.val_batch, config.patch, mix_seed(config.seed, 77));
  const auto val_batch = to_tensors(val_stream.batch(0));

  LoopSpec spec;
  spec.loss_name = "L_eps";
  spec.trainable = kCondition | kPredictor;
  spec.loss = [&](std::int64_t step) {
    const auto b = to_tensors(stream.batch(step));
    torch::Tensor z0;
    {
      torch::NoGradGuard no_grad;
      z0 = w.encoder->forward(compose_encoder_input(b.gt, b.compressed, b.qpmap));
    }
    const auto cond = w.condition->forward(b.compressed);
    const auto ts = draw_timesteps(config.seed, step, config.batch, T);
    const auto eps = standard_normal(mix_seed(config.seed ^ 0xe95ull, static_cast<std::uint64_t>(step)),
                                     config.batch, config.arch.latent_dim);
    auto a = torch::empty({config.batch, 1});
    auto s = torch::empty({config.batch, 1});
    for (int i = 0; i < config.batch; ++i) {
      a[i][0] = sqrt_ab[static_cast<std::size_t>(ts[static_cast<std::size_t>(i)] - 1)];
      s[i][0] = sqrt_one_minus[static_cast<std::size_t>(ts[static_cast<std::size_t>(i)] - 1)];
    }
    const auto zt = a * z0 + s * eps;
    const auto t_tensor = torch::tensor(std::vector<int64_t>(ts.begin(), ts.end()), torch::kInt64);
    const auto eps_hat = w.predictor->forward(zt, cond, t_tensor);
    return torch::mse_loss(eps_hat, eps);
  };
  spec.validate = [&]() {
    torch::NoGradGuard no_grad;
    w.condition->eval();
    w.predictor->eval();
    const auto z_enc = w.encoder->forward(
        compose_encoder_input(val_batch.gt, val_batch.compressed, val_batch.qpmap));
    const auto cond = w.condition->forward(val_batch.compressed);
    const double l = latent_estimation_loss(rows_of(z_enc), rows_of(cond), network_predictor(w),
                                            schedule, mix_seed(config.seed, 99), config.val_sampler);
    w.condition->train();
    w.predictor->train();
    return l;
  };
  run_loop(config, w, spec, log);
  w.set_training(false);
  return w;
}

ModelWeights train_ablation(Stage kind, const TrainConfig& config,
                            const std::vector<FrameSample>& train,
                            const std::vector<FrameSample>& val, const ModelWeights* stage1,
                            TrainLogger& log) {
  config.validate();
  (void)val;
  const BatchStream stream(train, config.batch, config.patch, config.seed);

  if (kind == Stage::kNoEst) {
    ModelWeights w(config.arch, config.seed);
    w.variant = Variant::kNoEst;
    w.present = kDecoder;
    // With Z = 0 these weights never see a gradient; zeroing them makes the
    // trained decoder exactly independent of Z.
    {
      torch::NoGradGuard no_grad;
      for (const auto& m : *w.decoder->cbams) {
        auto* cbam = m->as<CbamFusionImpl>();
        cbam->latent_to_channel->weight.zero_();
        cbam->latent_to_spatial->weight.zero_();
      }
    }
    w.decoder->train();
    LoopSpec spec;
    spec.loss_name = "L_rec";
    spec.trainable = kDecoder;
    spec.loss = [&](std::int64_t step) {
      const auto b = to_tensors(stream.batch(step));
      const auto zero = torch::zeros({b.compressed.size(0), config.arch.latent_dim});
      return torch::mse_loss(w.decoder->forward(b.compressed, zero), b.gt);
    };
    run_loop(config, w, spec, log);
    w.set_training(false);
    return w;
  }

  if (kind == Stage::kNoDiff) {
    if (stage1 == nullptr) throw ConfigError("NoDiff training needs stage-1 weights");
    require_stage1(*stage1, config);
    ModelWeights w = stage1->clone();
    w.reset(kRegressor, config.seed);
    w.variant = Variant::kNoDiff;
    w.present = kEncoder | kDecoder | kRegressor;
    w.encoder->eval();
    w.decoder->eval();
    w.regressor->train();
    LoopSpec spec;
    spec.loss_name = "L_est";
    spec.trainable = kRegressor;
    spec.loss = [&](std::int64_t step) {
      const auto b = to_tensors(stream.batch(step));
      torch::Tensor z0;
      {
        torch::NoGradGuard no_grad;
        z0 = w.encoder->forward(compose_encoder_input(b.gt, b.compressed, b.qpmap));
      }
      return torch::mse_loss(w.regressor->forward(b.compressed), z0);
    };
    run_loop(config, w, spec, log);
    w.set_training(false);
    return w;
  }

  throw ConfigError("train_ablation handles noest and nodiff only");
}

ModelWeights train(const TrainConfig& config, const std::vector<FrameSample>& train_set,
                   const std::vector<FrameSample>& val, const ModelWeights* stage1,
                   TrainLogger& log) {
  switch (config.stage) {
    case Stage::kStage1:
      return train_stage1(config, train_set, log);
    case Stage::kStage2:
      if (stage1 == nullptr) throw ConfigError("stage2 needs a stage-1 checkpoint");
      return train_stage2(config, train_set, val, *stage1, log);
    case Stage::kNoEst:
    case Stage::kNoDiff:
      return train_ablation(config.stage, config, train_set, val, stage1, log);
  }
  throw ConfigError("unknown stage");
}

}  // namespace dqe
