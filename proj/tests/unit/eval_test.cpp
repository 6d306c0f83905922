#include "dqe/eval.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>
#include <sstream>

#include "dqe/codec.hpp"
#include "dqe/config.hpp"
#include "dqe/error.hpp"
#include "support/oracles.hpp"
#include "support/synthetic_corpus.hpp"

namespace dqe {
namespace {

constexpr unsigned kAll = kEncoder | kDecoder | kCondition | kPredictor | kRegressor;

ModelWeights identity_weights() {
  ModelWeights w(testdata::toy_arch(), 11);
  w.present = kAll;
  return w;
}

TEST(Psnr, KnownValues) {
  const LumaPlane a(8, 8, 0.5f);
  EXPECT_EQ(psnr(a, a), kInfinitePsnr);
  LumaPlane b(8, 8, 0.5f);
  for (auto& v : b.pixels()) v += static_cast<float>(1.0 / 255.0);
  // 20*log10(255)
  EXPECT_NEAR(psnr(b, a), 48.1308, 1e-4);
  EXPECT_THROW(psnr(a, LumaPlane(8, 4, 0.0f)), ShapeError);
}

TEST(Psnr, MatchesNaiveOracle) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto a = testdata::random_plane(s, 13, 17);
    const auto b = testdata::random_plane(s + 100, 13, 17);
    EXPECT_NEAR(psnr(a, b), testdata::naive_psnr(a, b), 1e-9);
  }
}

TEST(Psnr, AgreesWithCodeValueScale) {
  const auto a = quantize_8bit(testdata::random_plane(1, 16, 16));
  const auto b = quantize_8bit(testdata::random_plane(2, 16, 16));
  double se = 0;
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      const double d = std::round(a.at(y, x) * 255.0) - std::round(b.at(y, x) * 255.0);
      se += d * d;
    }
  }
  EXPECT_NEAR(psnr(a, b), 10.0 * std::log10(255.0 * 255.0 / (se / 256.0)), 1e-4);
}

TEST(DeltaPsnr, Properties) {
  const auto gt = testdata::random_plane(1, 16, 16);
  const auto comp = testdata::random_plane(2, 16, 16);
  const auto other = testdata::random_plane(3, 16, 16);
  EXPECT_EQ(delta_psnr(comp, comp, gt), 0.0);
  EXPECT_EQ(delta_psnr(gt, comp, gt), kInfinitePsnr);
  EXPECT_NEAR(delta_psnr(other, comp, gt), -delta_psnr(comp, other, gt), 1e-12);
  EXPECT_THROW(delta_psnr(other, gt, gt), NumericError);
  EXPECT_THROW(delta_psnr(other, comp, LumaPlane(16, 8, 0.0f)), ShapeError);
}

// Records the order of accesses; ground truth must never precede the
// compressed read for the same index.
class RecordingSource : public FrameSource {
 public:
  RecordingSource(int n, int h, int w) {
    for (int i = 0; i < n; ++i) {
      const auto gt = testdata::synthetic_image(static_cast<std::uint64_t>(i), h, w);
      gts_.push_back(gt);
      comps_.push_back(compress_proxy(gt, 37));
    }
  }
  std::size_t size() const override { return gts_.size(); }
  std::string source_id(std::size_t i) const override { return "src" + std::to_string(i % 2); }
  int qp(std::size_t i) const override { return i % 2 ? 42 : 37; }
  LumaPlane compressed(std::size_t i) const override {
    log_.push_back("c" + std::to_string(i));
    return comps_.at(i);
  }
  LumaPlane ground_truth(std::size_t i) const override {
    log_.push_back("g" + std::to_string(i));
    return poisoned_ ? LumaPlane(gts_.at(i).height(), gts_.at(i).width(), 0.0f) : gts_.at(i);
  }

  mutable std::vector<std::string> log_;
  bool poisoned_ = false;

 private:
  std::vector<LumaPlane> gts_, comps_;
};

TEST(Evaluate, IdentityModelGivesZeroGain) {
  const auto w = identity_weights();
  const RecordingSource src(4, 24, 20);
  for (const Variant v : {Variant::kFull, Variant::kNoDiff, Variant::kNoEst, Variant::kBaseline}) {
    const auto recs = evaluate(w, src, v, 5);
    ASSERT_EQ(recs.size(), 4u);
    for (const auto& r : recs) {
      EXPECT_EQ(r.delta_psnr, 0.0) << to_string(v);
      EXPECT_EQ(r.psnr_en, r.psnr_hm);
      EXPECT_EQ(r.variant, v);
    }
    EXPECT_EQ(mean_delta(recs).mean, 0.0);
  }
}

TEST(Evaluate, GroundTruthIsReadOnlyAfterEnhancement) {
  ModelWeights w = identity_weights();
  {
    torch::NoGradGuard ng;
    torch::manual_seed(3);
    w.decoder->residual_head->weight.normal_(0, 0.05);
  }
  RecordingSource src(3, 16, 16);
  const auto a = evaluate(w, src, Variant::kFull, 9);
  ASSERT_EQ(src.log_.size(), 6u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(src.log_[2 * i], "c" + std::to_string(i));
    EXPECT_EQ(src.log_[2 * i + 1], "g" + std::to_string(i));
  }
  // Swapping the ground truth changes only the scores, never the enhanced output.
  src.poisoned_ = true;
  const auto b = evaluate(w, src, Variant::kFull, 9);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto enh = enhance(src.compressed(i), w, Variant::kFull, {mix_seed(9, i), SamplerNoise::kZero, true});
    const LumaPlane zero(16, 16, 0.0f);
    EXPECT_NEAR(b[i].psnr_en, psnr(enh, zero), 1e-12);
    EXPECT_NE(a[i].psnr_en, b[i].psnr_en);
  }
}

TEST(Evaluate, DeterministicForFixedSeed) {
  ModelWeights w = identity_weights();
  {
    torch::NoGradGuard ng;
    torch::manual_seed(4);
    w.decoder->residual_head->weight.normal_(0, 0.05);
  }
  const RecordingSource src(3, 16, 16);
  EXPECT_EQ(evaluate(w, src, Variant::kFull, 1, SamplerNoise::kStochastic),
            evaluate(w, src, Variant::kFull, 1, SamplerNoise::kStochastic));
}

TEST(Evaluate, RejectsTrainingManifest) {
  DatasetManifest m;
  m.split = Split::kTrain;
  EXPECT_THROW(evaluate(identity_weights(), m, Variant::kBaseline, 0), ConfigError);
}

TEST(Enhance, MissingComponentsAndDims) {
  ModelWeights w = identity_weights();
  w.present = kDecoder;
  const auto img = testdata::random_plane(1, 16, 16);
  EXPECT_THROW(enhance(img, w, Variant::kFull, {}), ConfigError);
  EXPECT_EQ(enhance(img, w, Variant::kNoEst, {}), img);
  const auto odd = testdata::random_plane(1, 18, 15);
  try {
    enhance(odd, w, Variant::kNoEst, {});
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("--pad"), std::string::npos);
  }
  EXPECT_EQ(enhance(odd, w, Variant::kNoEst, {0, SamplerNoise::kZero, true}), odd);
}

EvalRecord rec(const std::string& id, int qp, Variant v, double d) {
  return {id, qp, v, 30.0, 30.0 + d, d};
}

TEST(Report, SingleRecord) {
  const auto r = report({rec("a", 27, Variant::kFull, 0.25)});
  EXPECT_EQ(r.columns, std::vector<Variant>{Variant::kFull});
  EXPECT_NE(r.table.find("0.2500"), std::string::npos) << r.table;
  EXPECT_NE(r.table.find("Average"), std::string::npos);
  EXPECT_NE(r.table.find("QP 27"), std::string::npos);
}

TEST(Report, ColumnsFollowCanonicalOrder) {
  const auto r = report({rec("a", 27, Variant::kBaseline, 0.0), rec("a", 27, Variant::kFull, 0.1)});
  EXPECT_EQ(r.columns, (std::vector<Variant>{Variant::kFull, Variant::kBaseline}));
}

TEST(Report, MeansMatchNaiveGrouping) {
  std::vector<EvalRecord> recs;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-0.5, 1.0);
  for (const char* id : {"x", "y", "z"})
    for (const int qp : {27, 32, 37})
      for (const Variant v : {Variant::kFull, Variant::kNoEst}) recs.push_back(rec(id, qp, v, u(rng)));
  const auto r = report(recs);

  std::map<std::pair<std::string, std::string>, std::pair<double, int>> naive;
  for (const auto& e : recs) {
    for (const auto& key : {"source:" + e.source_id, "qp:" + std::to_string(e.qp), std::string("average:Average")}) {
      auto& acc = naive[{key, to_string(e.variant)}];
      acc.first += e.delta_psnr;
      acc.second += 1;
    }
  }
  std::istringstream in(r.csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "group,key,variant,mean_delta_psnr,count,infinite");
  int rows = 0;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string group, key, variant, mean, count, inf;
    std::getline(ls, group, ',');
    std::getline(ls, key, ',');
    std::getline(ls, variant, ',');
    std::getline(ls, mean, ',');
    std::getline(ls, count, ',');
    std::getline(ls, inf, ',');
    const auto& acc = naive.at({group + ":" + key, variant});
    EXPECT_NEAR(std::stod(mean), acc.first / acc.second, 1e-12) << line;
    EXPECT_EQ(std::stoi(count), acc.second);
    EXPECT_EQ(inf, "0");
    ++rows;
  }
  EXPECT_EQ(rows, static_cast<int>(naive.size()));
}

TEST(Report, InfiniteRecordsAreAnnotatedNotAveraged) {
  const auto r = report({rec("a", 27, Variant::kFull, 0.5), rec("b", 27, Variant::kFull, kInfinitePsnr)});
  EXPECT_NE(r.table.find("(+1 inf)"), std::string::npos) << r.table;
  const auto m = mean_delta({rec("a", 27, Variant::kFull, 0.5), rec("b", 27, Variant::kFull, kInfinitePsnr)});
  EXPECT_EQ(m.mean, 0.5);
  EXPECT_EQ(m.count, 1);
  EXPECT_EQ(m.infinite, 1);
}

TEST(Report, EmptyInputIsAnError) { EXPECT_THROW(report({}), ConfigError); }

TEST(RecordsCsv, RoundTripIsExact) {
  std::vector<EvalRecord> recs{rec("a", 27, Variant::kFull, 0.1 + 1e-17),
                               rec("b", 42, Variant::kNoDiff, -1.0 / 3.0),
                               rec("c", 32, Variant::kNoEst, kInfinitePsnr)};
  recs[2].psnr_en = kInfinitePsnr;
  EXPECT_EQ(parse_records_csv(records_to_csv(recs)), recs);
  EXPECT_THROW(parse_records_csv("nonsense\n"), FormatError);
}

}  // namespace
}  // namespace dqe
