// Acceptance run: one PASS/FAIL line per criterion.
//
//   dqe_acceptance [--criteria 1-11] [--workdir DIR]

#include <torch/torch.h>

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dqe/checkpoint.hpp"
#include "dqe/codec.hpp"
#include "dqe/config.hpp"
#include "dqe/dataset.hpp"
#include "dqe/diffusion.hpp"
#include "dqe/eval.hpp"
#include "dqe/nets.hpp"
#include "dqe/train.hpp"
#include "support/oracles.hpp"
#include "support/synthetic_corpus.hpp"

namespace fs = std::filesystem;
using namespace dqe;

namespace {

// Tolerances and budgets.
constexpr double kRecoveryRelTol = 1e-6;
constexpr double kRecoverySeconds = 10.0;
constexpr double kMomentRelTol = 0.01;
constexpr int kMomentDraws = 100000;
constexpr double kMomentSeconds = 30.0;
constexpr double kScheduleRelTol = 1e-12;
constexpr double kCbamTol = 1e-6;
constexpr double kGradRelTol = 1e-3;
constexpr double kDctTol = 1e-10;
constexpr int kCodecCorpus = 24;
constexpr double kPsnrOracleTol = 1e-9;
constexpr double kPsnr255 = 48.1308;
constexpr double kPsnr255Tol = 1e-4;
constexpr double kFullMinGain = 0.05;
constexpr double kFullOverNoEst = 0.03;
constexpr double kNoDiffAllowance = 0.02;

// Desk-scale training protocol.
struct DeskProfile {
  int corpus_images = 60;
  int image_size = 96;
  std::vector<int> qp_set{27, 32, 37, 42};
  double split_ratio = 0.8;
  int steps = 5000;
  int batch = 8;
  int patch = 32;
  double lr = 2e-4;
  std::uint64_t seed = 20240601;
  std::uint64_t eval_seed = 7;
};

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::vector<double> normal_vector(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& e : v) e = nd(rng);
  return v;
}

// ---------------------------------------------------------------------------

Outcome criterion1() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::mt19937_64 rng(11);
  for (const int T : {1, 2, 5, 10, 100}) {
    const auto s = build_schedule<double>(T, 1e-4, 0.02);
    for (const std::size_t d : {1u, 8u, 64u}) {
      const auto x0 = normal_vector(rng, d);
      // Perfect oracle: the noise that maps x0 to the current state.
      auto oracle = [&](const LatentState<double>& st, std::span<const double>) {
        const double ab = s.alpha_bar(st.t);
        std::vector<double> eps(d);
        for (std::size_t i = 0; i < d; ++i) {
          eps[i] = (st.vector[i] - std::sqrt(ab) * x0[i]) / std::sqrt(1.0 - ab);
        }
        return eps;
      };
      const std::vector<double> cond;
      const auto out = sample_feature<double>(cond, d, oracle, s, 5, SamplerNoise::kZero);
      double num = 0.0, den = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        num += (out[i] - x0[i]) * (out[i] - x0[i]);
        den += x0[i] * x0[i];
      }
      worst = std::max(worst, std::sqrt(num / den));
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= kRecoveryRelTol && secs < kRecoverySeconds,
          "max relative error " + fmt("%.3e", worst) + ", " + fmt("%.2f", secs) + " s"};
}

Outcome criterion2() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto s = build_schedule<double>(100, 1e-4, 0.02);
  std::mt19937_64 rng(22);
  std::uniform_int_distribution<int> pick_t(1, 100);
  std::uniform_real_distribution<double> mag(1.0, 2.0);
  std::normal_distribution<double> nd(0.0, 1.0);
  constexpr std::size_t d = 16;
  double worst_mean = 0.0, worst_var = 0.0;
  for (int c = 0; c < 5; ++c) {
    std::vector<double> x0(d);
    for (auto& v : x0) v = (nd(rng) < 0 ? -1 : 1) * mag(rng);
    const int t = pick_t(rng);
    std::vector<double> sum(d, 0.0), sum2(d, 0.0), eps(d);
    for (int n = 0; n < kMomentDraws; ++n) {
      for (auto& e : eps) e = nd(rng);
      const auto xt = q_sample<double>(x0, t, eps, s);
      for (std::size_t i = 0; i < d; ++i) {
        sum[i] += xt[i];
        sum2[i] += xt[i] * xt[i];
      }
    }
    const double ab = s.alpha_bar(t);
    double var_avg = 0.0, err2 = 0.0, ref2 = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double m = sum[i] / kMomentDraws;
      const double expect = std::sqrt(ab) * x0[i];
      err2 += (m - expect) * (m - expect);
      ref2 += expect * expect;
      var_avg += (sum2[i] / kMomentDraws - m * m) / d;
    }
    worst_mean = std::max(worst_mean, std::sqrt(err2 / ref2));
    // Isotropic covariance: compare the per-coordinate average.
    worst_var = std::max(worst_var, std::abs(var_avg - (1.0 - ab)) / (1.0 - ab));
  }
  const double secs = seconds_since(t0);
  return {worst_mean <= kMomentRelTol && worst_var <= kMomentRelTol && secs < kMomentSeconds,
          "mean rel " + fmt("%.2e", worst_mean) + ", variance rel " + fmt("%.2e", worst_var) + ", " +
              fmt("%.2f", secs) + " s"};
}

Outcome criterion3() {
  bool ok = true;
  double worst = 0.0;
  for (const int T : {1, 10, 100, 1000}) {
    const auto s = build_schedule<double>(T, 1e-4, 0.02);
    long double prod = 1.0L;
    double prev = 1.0;
    for (int t = 1; t <= T; ++t) {
      const long double beta = T == 1 ? 1e-4L : 1e-4L + (0.02L - 1e-4L) * (t - 1) / (T - 1);
      prod *= 1.0L - beta;
      const double ab = s.alpha_bar(t);
      ok = ok && ab < prev && ab > 0.0 && ab < 1.0 && s.beta(t) > 0.0 && s.beta(t) < 1.0 &&
           s.alpha(t) > 0.0 && s.alpha(t) < 1.0;
      worst = std::max(worst, static_cast<double>(std::abs((ab - prod) / prod)));
      prev = ab;
    }
  }
  return {ok && worst <= kScheduleRelTol,
          std::string(ok ? "monotone, in (0,1)" : "ordering/range violated") +
              ", oracle rel " + fmt("%.2e", worst)};
}

Outcome criterion4() {
  torch::manual_seed(44);
  ArchConfig a;
  a.cbam_kernel = 7;
  double worst = 0.0;
  for (int c = 0; c < 20; ++c) {
    CbamFusion m(2, 3, a);
    m->to(torch::kFloat64);
    const auto f = torch::randn({1, 2, 2, 2}, torch::kFloat64);
    const auto z = torch::randn({1, 3}, torch::kFloat64);
    torch::NoGradGuard ng;
    const auto cg = m->channel_gate(f, z);
    const auto cref = testdata::brute_channel_gate(*m, f, z);
    for (int i = 0; i < 2; ++i) worst = std::max(worst, std::abs(cg[0][i].item<double>() - cref[static_cast<std::size_t>(i)]));
    const auto fc = f * cg.unsqueeze(-1).unsqueeze(-1);
    const auto sg = m->spatial_gate(fc, z);
    const auto sref = testdata::brute_spatial_gate(*m, fc, z);
    for (int y = 0; y < 2; ++y)
      for (int x = 0; x < 2; ++x)
        worst = std::max(worst, std::abs(sg[0][0][y][x].item<double>() - sref[static_cast<std::size_t>(y * 2 + x)]));
  }
  // All-zero weights: both gates sit at sigmoid(0).
  double zero_dev = 0.0;
  {
    CbamFusion m(2, 3, a);
    m->to(torch::kFloat64);
    torch::NoGradGuard ng;
    for (auto& p : m->parameters()) p.zero_();
    const auto f = torch::randn({1, 2, 2, 2}, torch::kFloat64);
    const auto z = torch::randn({1, 3}, torch::kFloat64);
    const auto cg = m->channel_gate(f, z);
    const auto sg = m->spatial_gate(f, z);
    zero_dev = std::max((cg - 0.5).abs().max().item<double>(), (sg - 0.5).abs().max().item<double>());
  }
  return {worst <= kCbamTol && zero_dev == 0.0,
          "max gate diff " + fmt("%.2e", worst) + ", zero-weight deviation " + fmt("%.1e", zero_dev)};
}

Outcome criterion5() {
  double worst = 0.0;
  ArchConfig a;
  const ModelWeights w(a, 5);
  for (int i = 0; i < 10; ++i) {
    const auto img = testdata::random_plane(500 + static_cast<std::uint64_t>(i), 32, 48);
    std::mt19937_64 rng(900 + static_cast<std::uint64_t>(i));
    std::normal_distribution<float> nd(0.0f, 3.0f);
    std::vector<float> z(static_cast<std::size_t>(a.latent_dim));
    for (auto& v : z) v = nd(rng);
    const auto out = decode(img, z, w);
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x)
        worst = std::max(worst, static_cast<double>(std::abs(out.at(y, x) - img.at(y, x))));
  }
  return {worst == 0.0, "max abs diff " + fmt("%.1e", worst)};
}

Outcome criterion6() {
  torch::manual_seed(66);
  const ArchConfig a = testdata::toy_arch();
  double worst = 0.0;
  int checked = 0;
  auto absorb = [&](const testdata::GradCheck& g) {
    worst = std::max(worst, g.max_rel_error);
    checked += g.checked;
  };
  {
    LatentEncoder enc(2, a.latent_dim, a, "encoder");
    enc->to(torch::kFloat64);
    const auto x = torch::rand({2, 2, 8, 8}, torch::kFloat64);
    const auto r = torch::randn({2, a.latent_dim}, torch::kFloat64);
    absorb(testdata::finite_difference_check([&] { return (enc->forward(x) * r).sum(); },
                                             enc->parameters(), 6, 1));
  }
  {
    UNetDecoder dec(a);
    dec->to(torch::kFloat64);
    {
      torch::NoGradGuard ng;
      dec->residual_head->weight.normal_(0.0, 0.3);
      dec->residual_head->bias.normal_(0.0, 0.3);
    }
    const auto img = torch::rand({2, 1, 8, 8}, torch::kFloat64);
    const auto z = torch::randn({2, a.latent_dim}, torch::kFloat64);
    const auto target = torch::rand({2, 1, 8, 8}, torch::kFloat64);
    absorb(testdata::finite_difference_check(
        [&] { return (dec->forward(img, z) - target).pow(2).sum(); }, dec->parameters(), 4, 2));
  }
  {
    NoisePredictor pred(a);
    pred->to(torch::kFloat64);
    const auto zt = torch::randn({3, a.latent_dim}, torch::kFloat64);
    const auto c = torch::randn({3, a.cond_dim}, torch::kFloat64);
    const auto t = torch::tensor(std::vector<int64_t>{1, 4, 9}, torch::kInt64);
    const auto eps = torch::randn({3, a.latent_dim}, torch::kFloat64);
    absorb(testdata::finite_difference_check(
        [&] { return (pred->forward(zt, c, t) - eps).pow(2).sum(); }, pred->parameters(), 8, 3));
  }
  return {worst <= kGradRelTol, std::to_string(checked) + " entries, max relative error " + fmt("%.2e", worst)};
}

Outcome criterion7(const fs::path& workdir) {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(-300.0, 300.0);
  double worst = 0.0;
  for (int b = 0; b < 200; ++b) {
    std::vector<double> block(64);
    for (auto& v : block) v = u(rng);
    const auto back = idct2d(dct2d(block, 8), 8);
    for (std::size_t i = 0; i < 64; ++i) worst = std::max(worst, std::abs(back[i] - block[i]));
  }
  int monotone = 0;
  for (int i = 0; i < kCodecCorpus; ++i) {
    const auto img = testdata::synthetic_image(static_cast<std::uint64_t>(1000 + i), 96, 96);
    double prev = INFINITY;
    bool ok = true;
    for (const int qp : {27, 32, 37, 42}) {
      const double p = psnr(compress_proxy(img, qp), img);
      ok = ok && p < prev;
      prev = p;
    }
    monotone += ok;
  }
  (void)workdir;
  return {worst <= kDctTol && monotone == kCodecCorpus,
          "DCT round trip " + fmt("%.2e", worst) + ", monotone PSNR on " + std::to_string(monotone) +
              "/" + std::to_string(kCodecCorpus) + " images"};
}

Outcome criterion8() {
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const auto a = testdata::random_plane(800 + static_cast<std::uint64_t>(i), 37, 53);
    const auto b = testdata::random_plane(900 + static_cast<std::uint64_t>(i), 37, 53);
    worst = std::max(worst, std::abs(psnr(a, b) - testdata::naive_psnr(a, b)));
  }
  LumaPlane a(16, 16), b(16, 16);
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      const int k = (y * 16 + x) % 255;
      a.at(y, x) = static_cast<float>(k / 255.0);
      b.at(y, x) = static_cast<float>((k + 1) / 255.0);
    }
  }
  const double p = psnr(a, b);
  return {worst <= kPsnrOracleTol && std::abs(p - kPsnr255) <= kPsnr255Tol,
          "oracle diff " + fmt("%.2e", worst) + " dB, 1/255 case " + fmt("%.6f", p) + " dB"};
}

// ---------------------------------------------------------------------------
// Desk-scale training (criteria 9-11)

struct DeskResult {
  double full = 0, noest = 0, nodiff = 0, baseline = 0;
  double noest_z_dependence = 0;
  std::size_t val_records = 0;
  std::string digests;
  double minutes = 0;
};

TrainConfig base_config(const DeskProfile& p, Stage s, const ArchConfig& arch) {
  TrainConfig c;
  c.stage = s;
  c.steps = p.steps;
  c.batch = p.batch;
  c.patch = p.patch;
  c.lr = p.lr;
  c.seed = p.seed;
  c.qp_set = p.qp_set;
  c.arch = arch;
  c.checkpoint_every = 0;
  c.val_batch = 8;
  c.val_every = 1000;
  c.print_every = 500;
  return c;
}

DeskResult desk_run(const DeskProfile& p, const fs::path& corpus, const fs::path& dir) {
  const auto t0 = std::chrono::steady_clock::now();
  fs::remove_all(dir);
  fs::create_directories(dir);
  CodecConfig codec;
  const auto built = build_dataset(corpus, p.qp_set, codec, dir / "data", p.split_ratio, p.seed);
  const auto train_set = load_samples(built.train);
  const auto val_set = load_samples(built.val);
  const ArchConfig arch;

  auto run = [&](Stage s, const ModelWeights* s1, const std::string& name) {
    TrainConfig c = base_config(p, s, arch);
    c.out = dir / (name + ".ckpt");
    TrainLogger log(&std::cerr, dir / (name + ".log.tsv"), c.print_every);
    std::cerr << "[" << name << "] training " << c.steps << " steps\n";
    return train(c, train_set, val_set, s1, log);
  };
  const ModelWeights s1 = run(Stage::kStage1, nullptr, "stage1");
  const ModelWeights full = run(Stage::kStage2, &s1, "full");
  const ModelWeights noest = run(Stage::kNoEst, nullptr, "noest");
  const ModelWeights nodiff = run(Stage::kNoDiff, &s1, "nodiff");

  DeskResult r;
  auto mean_of = [&](const ModelWeights& w, Variant v) {
    const auto rec = evaluate(w, built.val, v, p.eval_seed);
    fs::path csv = dir / ("records_" + to_string(v) + ".csv");
    std::ofstream(csv) << records_to_csv(rec);
    return mean_delta(rec).mean;
  };
  r.val_records = built.val.entries.size();
  r.full = mean_of(full, Variant::kFull);
  r.noest = mean_of(noest, Variant::kNoEst);
  r.nodiff = mean_of(nodiff, Variant::kNoDiff);
  r.baseline = mean_of(full, Variant::kBaseline);

  // NoEst must ignore Z entirely.
  const auto sample = val_set.front().compressed;
  const std::vector<float> zero(static_cast<std::size_t>(arch.latent_dim), 0.0f);
  std::vector<float> z(zero.size());
  std::mt19937_64 rng(3);
  std::normal_distribution<float> nd(0.0f, 5.0f);
  for (auto& v : z) v = nd(rng);
  const auto a = decode(sample, zero, noest), b = decode(sample, z, noest);
  for (std::size_t i = 0; i < a.pixels().size(); ++i) {
    r.noest_z_dependence = std::max(r.noest_z_dependence, static_cast<double>(std::abs(a.pixels()[i] - b.pixels()[i])));
  }
  r.digests = parameter_digest(full, full.present) + " " + parameter_digest(noest, noest.present) +
              " " + parameter_digest(nodiff, nodiff.present);
  r.minutes = seconds_since(t0) / 60.0;
  return r;
}

std::string fmt_means(const DeskResult& r) {
  return "full " + fmt("%+.4f", r.full) + ", NoEst " + fmt("%+.4f", r.noest) + ", NoDiff " +
         fmt("%+.4f", r.nodiff) + ", baseline " + fmt("%+.4f", r.baseline) + " dB";
}

std::pair<int, int> parse_range(const std::string& s) {
  const auto dash = s.find('-');
  if (dash == std::string::npos) return {std::stoi(s), std::stoi(s)};
  return {std::stoi(s.substr(0, dash)), std::stoi(s.substr(dash + 1))};
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  CLI::App app{"acceptance criteria"};
  std::string range = "1-11";
  std::string workdir = (fs::temp_directory_path() / "dqe_acceptance").string();
  app.add_option("--criteria", range, "inclusive range, e.g. 1-8");
  app.add_option("--workdir", workdir, "scratch directory for the training criteria");
  CLI11_PARSE(app, argc, argv);
  const auto [lo, hi] = parse_range(range);
  auto want = [&](int c) { return c >= lo && c <= hi; };

  int failures = 0;
  auto report = [&](int n, const Outcome& o) {
    std::cout << "criterion " << n << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
    failures += o.pass ? 0 : 1;
  };
  auto guarded = [&](int n, const std::function<Outcome()>& f) {
    if (!want(n)) return;
    try {
      report(n, f());
    } catch (const std::exception& e) {
      report(n, {false, std::string("exception: ") + e.what()});
    }
  };

  guarded(1, criterion1);
  guarded(2, criterion2);
  guarded(3, criterion3);
  guarded(4, criterion4);
  guarded(5, criterion5);
  guarded(6, criterion6);
  guarded(7, [&] { return criterion7(workdir); });
  guarded(8, criterion8);

  if (want(9) || want(10) || want(11)) {
    const DeskProfile p;
    try {
      const fs::path corpus = fs::path(workdir) / "corpus";
      fs::remove_all(corpus);
      testdata::write_corpus(corpus, p.corpus_images, p.image_size, p.image_size);
      const DeskResult r1 = desk_run(p, corpus, fs::path(workdir) / "run1");
      guarded(9, [&] {
        return Outcome{r1.full > kFullMinGain && r1.minutes <= 120.0,
                       "full mean dPSNR " + fmt("%+.4f", r1.full) + " dB over " +
                           std::to_string(r1.val_records) + " held-out records, run took " +
                           fmt("%.1f", r1.minutes) + " min"};
      });
      guarded(10, [&] {
        const bool ok = r1.full - r1.noest >= kFullOverNoEst && r1.full >= r1.nodiff - kNoDiffAllowance &&
                        r1.noest_z_dependence == 0.0;
        return Outcome{ok, fmt_means(r1) + "; NoEst Z-dependence " + fmt("%.1e", r1.noest_z_dependence)};
      });
      if (want(11)) {
        const DeskResult r2 = desk_run(p, corpus, fs::path(workdir) / "run2");
        guarded(11, [&] {
          const bool same = r1.full == r2.full && r1.noest == r2.noest && r1.nodiff == r2.nodiff &&
                            r1.baseline == r2.baseline && r1.digests == r2.digests;
          return Outcome{same, same ? "repeat run reproduced all means and weights bit-identically"
                                    : "repeat differs: " + fmt_means(r2)};
        });
      }
    } catch (const std::exception& e) {
      for (int n = 9; n <= 11; ++n) {
        if (want(n)) report(n, {false, std::string("exception: ") + e.what()});
      }
    }
  }
  return failures == 0 ? 0 : 1;
}
