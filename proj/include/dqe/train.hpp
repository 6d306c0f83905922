// Two-stage optimisation and the ablation trainers.
//
//   stage1  encoder + decoder jointly on L_rec = ||x_gt - x_out||^2
//   stage2  encoder/decoder frozen; condition encoder + noise predictor on the
//           noise-matching loss, with L_est = ||Z_est - Z_enc||^2 through the
//           full reverse chain as the validation metric
//   noest   decoder alone with Z fixed to zero
//   nodiff  direct regressor compressed -> Z_enc on L_est, no diffusion

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dqe/dataset.hpp"
#include "dqe/diffusion.hpp"
#include "dqe/nets.hpp"

namespace dqe {

enum class Stage { kStage1, kStage2, kNoEst, kNoDiff };

std::string to_string(Stage s);
Stage parse_stage(const std::string& s);

struct TrainConfig {
  Stage stage = Stage::kStage1;
  double lr = 2e-4;
  int steps = 5000;
  int batch = 16;
  int patch = 64;
  std::uint64_t seed = 1;
  int checkpoint_every = 1000;
  double grad_clip = 1.0;
  // Stage 2 / NoDiff validation cadence and batch size.
  int val_every = 500;
  int val_batch = 16;
  SamplerNoise val_sampler = SamplerNoise::kZero;
  // Print every n-th record to the console stream; the metrics file gets all.
  int print_every = 50;
  std::vector<int> qp_set{27, 32, 37, 42};
  ArchConfig arch;
  // Final checkpoint; intermediate ones go next to it as <stem>-step<k><ext>.
  std::filesystem::path out;
  // Intermediate checkpoint to continue from.
  std::optional<std::filesystem::path> resume;

  void validate() const;
};

struct TrainLogRecord {
  std::int64_t step = 0;
  std::string loss_name;  // L_rec, L_eps or L_est
  double value = 0.0;
  std::int64_t wall_ms = 0;
};

// Streams records as "step\tloss\tvalue\twall_ms" lines.
class TrainLogger {
 public:
  TrainLogger() = default;
  TrainLogger(std::ostream* console, const std::filesystem::path& metrics_file, int print_every);

  void log(const TrainLogRecord& r);
  const std::vector<TrainLogRecord>& records() const { return records_; }

 private:
  std::ostream* console_ = nullptr;
  std::unique_ptr<std::ofstream> file_;
  int print_every_ = 1;
  std::vector<TrainLogRecord> records_;
};

std::string format_log_record(const TrainLogRecord& r);

// Timesteps for one training step, uniform in [1, T]; pure in (seed, step).
std::vector<int> draw_timesteps(std::uint64_t seed, std::int64_t step, int batch, int T);

// Mean over the batch of ||Z_est - Z_enc||^2 where Z_est runs the full
// reverse chain from cond with `predictor`.
using LatentPredictor = std::function<std::vector<double>(const LatentState<double>&,
                                                          std::span<const double> cond)>;
double latent_estimation_loss(const std::vector<std::vector<double>>& z_enc,
                              const std::vector<std::vector<double>>& cond,
                              const LatentPredictor& predictor, const NoiseSchedule<double>& s,
                              std::uint64_t seed, SamplerNoise noise);

// Predictor backed by the estimator networks of `w`.
LatentPredictor network_predictor(const ModelWeights& w);

ModelWeights train_stage1(const TrainConfig& config, const std::vector<FrameSample>& train,
                          TrainLogger& log);
ModelWeights train_stage2(const TrainConfig& config, const std::vector<FrameSample>& train,
                          const std::vector<FrameSample>& val, const ModelWeights& stage1,
                          TrainLogger& log);
// NoEst ignores `stage1`; NoDiff requires it.
ModelWeights train_ablation(Stage kind, const TrainConfig& config,
                            const std::vector<FrameSample>& train,
                            const std::vector<FrameSample>& val, const ModelWeights* stage1,
                            TrainLogger& log);

// Dispatches on config.stage.
ModelWeights train(const TrainConfig& config, const std::vector<FrameSample>& train,
                   const std::vector<FrameSample>& val, const ModelWeights* stage1,
                   TrainLogger& log);

}  // namespace dqe
