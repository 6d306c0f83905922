// PSNR / delta-PSNR, model evaluation over manifests, and result tables.

#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "dqe/dataset.hpp"
#include "dqe/diffusion.hpp"
#include "dqe/image.hpp"
#include "dqe/nets.hpp"

namespace dqe {

// Returned for identical planes.
inline constexpr double kInfinitePsnr = std::numeric_limits<double>::infinity();

// 10*log10(1/MSE) on [0,1] planes.
double psnr(const LumaPlane& a, const LumaPlane& b);

// psnr(enhanced, gt) - psnr(compressed, gt). Throws NumericError when
// compressed == gt, since the sample carries no artifacts to remove.
double delta_psnr(const LumaPlane& enhanced, const LumaPlane& compressed, const LumaPlane& gt);

struct EvalRecord {
  std::string source_id;
  int qp = 0;
  Variant variant = Variant::kFull;
  double psnr_hm = 0.0;
  double psnr_en = 0.0;
  double delta_psnr = 0.0;

  friend bool operator==(const EvalRecord&, const EvalRecord&) = default;
};

struct EnhanceOptions {
  std::uint64_t seed = 0;
  SamplerNoise noise = SamplerNoise::kZero;
  // Edge-pad to the required multiple and crop back instead of rejecting.
  bool pad = false;
};

// Components a variant needs at inference time.
unsigned required_components(Variant v);

// Enhances a compressed plane. Only the compressed plane is consulted:
//   full      Z = reverse chain conditioned on the condition encoder
//   NoDiff    Z = regressor(img)
//   NoEst     Z = 0
//   baseline  returns img unchanged
LumaPlane enhance(const LumaPlane& img, const ModelWeights& w, Variant v, const EnhanceOptions& opt);

// Indexed (compressed, ground truth) pairs. Evaluation reads ground truth only
// after the enhanced plane exists.
class FrameSource {
 public:
  virtual ~FrameSource() = default;
  virtual std::size_t size() const = 0;
  virtual std::string source_id(std::size_t i) const = 0;
  virtual int qp(std::size_t i) const = 0;
  virtual LumaPlane compressed(std::size_t i) const = 0;
  virtual LumaPlane ground_truth(std::size_t i) const = 0;
};

class ManifestSource : public FrameSource {
 public:
  explicit ManifestSource(DatasetManifest m) : m_(std::move(m)) {}
  std::size_t size() const override { return m_.entries.size(); }
  std::string source_id(std::size_t i) const override { return m_.entries.at(i).source_id; }
  int qp(std::size_t i) const override { return m_.entries.at(i).qp; }
  LumaPlane compressed(std::size_t i) const override;
  LumaPlane ground_truth(std::size_t i) const override;

 private:
  DatasetManifest m_;
};

// One record per entry; entry i is enhanced with seed mix_seed(seed, i).
std::vector<EvalRecord> evaluate(const ModelWeights& w, const FrameSource& frames, Variant v,
                                 std::uint64_t seed, SamplerNoise noise = SamplerNoise::kZero);
std::vector<EvalRecord> evaluate(const ModelWeights& w, const DatasetManifest& m, Variant v,
                                 std::uint64_t seed, SamplerNoise noise = SamplerNoise::kZero);

// Mean delta-PSNR over finite records; infinite ones are counted separately.
struct GroupMean {
  double mean = 0.0;
  int count = 0;
  int infinite = 0;
};
GroupMean mean_delta(const std::vector<EvalRecord>& records);

std::string format_db(double v);

// source_id,qp,variant,psnr_hm,psnr_en,delta_psnr
std::string records_to_csv(const std::vector<EvalRecord>& records);
std::vector<EvalRecord> parse_records_csv(const std::string& text);

struct Report {
  std::string table;  // per-source rows, per-qp rows, Average row; one column per variant
  std::string csv;    // group,key,variant,mean_delta_psnr,count,infinite
  std::vector<Variant> columns;
};

Report report(const std::vector<EvalRecord>& records);

}  // namespace dqe
