#include "dqe/cli.hpp"

#include <torch/torch.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "dqe/checkpoint.hpp"
#include "dqe/codec.hpp"
#include "dqe/config.hpp"
#include "dqe/dataset.hpp"
#include "dqe/error.hpp"
#include "dqe/eval.hpp"
#include "dqe/image.hpp"
#include "dqe/train.hpp"

namespace dqe::cli {

namespace fs = std::filesystem;

namespace {

constexpr const char* kSubcommands[] = {"build-dataset", "train", "enhance", "eval", "ablate", "report"};

// Bad flag values detected after parsing.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BuildOpts {
  std::string corpus, out, qp_set = "27,32,37,42", codec = "proxy", encoder, encoder_args;
  int block_size = 8;
  double split_ratio = 0.9;
  std::uint64_t seed = 1;
};

struct TrainOpts {
  std::string stage, variant, manifest, val_manifest, stage1, out, resume, metrics;
  std::string val_sampler = "zero";
  std::optional<int> steps, batch, patch, checkpoint_every, val_every, val_batch, print_every;
  std::optional<double> lr, grad_clip;
  std::uint64_t seed = 1;
  ArchConfig arch;
};

struct EnhanceOpts {
  std::string in, weights, out, gt, variant, sampler = "zero";
  std::uint64_t seed = 0;
  bool pad = false;
};

struct EvalOpts {
  std::string manifest, weights, variant, out, sampler = "zero";
  std::uint64_t seed = 0;
};

struct ReportOpts {
  std::vector<std::string> records;
  std::string out, csv;
  std::uint64_t seed = 0;
};

void add_arch_flags(CLI::App* app, ArchConfig& a) {
  app->add_option("--latent-dim", a.latent_dim, "prior feature length");
  app->add_option("--cond-dim", a.cond_dim, "condition vector length");
  app->add_option("--unet-depth", a.unet_depth, "decoder levels");
  app->add_option("--unet-width", a.unet_width, "decoder base width");
  app->add_option("--encoder-stages", a.encoder_stages, "encoder conv stages");
  app->add_option("--encoder-width", a.encoder_width, "encoder base width");
  app->add_option("--predictor-hidden", a.predictor_hidden, "noise predictor hidden width");
  app->add_option("--predictor-layers", a.predictor_layers, "noise predictor layers");
  app->add_option("--timesteps", a.timesteps, "diffusion steps T");
}

void add_train_flags(CLI::App* app, TrainOpts& o) {
  app->add_option("--manifest", o.manifest, "training manifest")->required();
  app->add_option("--val-manifest", o.val_manifest, "validation manifest");
  app->add_option("--stage1", o.stage1, "stage-1 checkpoint (stage2, nodiff)");
  app->add_option("--out", o.out, "output checkpoint")->required();
  app->add_option("--resume", o.resume, "intermediate checkpoint to continue from");
  app->add_option("--metrics", o.metrics, "loss log (default <out>.log.tsv)");
  app->add_option("--steps", o.steps);
  app->add_option("--batch", o.batch);
  app->add_option("--patch", o.patch);
  app->add_option("--lr", o.lr);
  app->add_option("--grad-clip", o.grad_clip);
  app->add_option("--checkpoint-every", o.checkpoint_every);
  app->add_option("--val-every", o.val_every);
  app->add_option("--val-batch", o.val_batch);
  app->add_option("--val-sampler", o.val_sampler, "zero or stochastic");
  app->add_option("--print-every", o.print_every);
  app->add_option("--seed", o.seed);
  add_arch_flags(app, o.arch);
}

// Value parsers whose failures count as usage errors.
template <class F>
auto as_usage(F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
}

Variant variant_flag(const std::string& s) {
  return as_usage([&] { return parse_variant(s); });
}

SamplerNoise parse_sampler(const std::string& s) {
  if (s == "zero") return SamplerNoise::kZero;
  if (s == "stochastic") return SamplerNoise::kStochastic;
  throw UsageError("--sampler must be zero or stochastic, got '" + s + "'");
}

// Config keys map to flags of the same name; '_' and '-' are interchangeable.
std::vector<std::string> config_args(const fs::path& path, CLI::App* sub) {
  std::vector<std::string> out;
  for (const auto& [key, value] : read_config_file(path)) {
    std::string flag = key;
    std::replace(flag.begin(), flag.end(), '_', '-');
    if (flag == "config" || sub->get_option_no_throw("--" + flag) == nullptr) {
      throw UsageError(path.string() + ": unknown key '" + key + "' for " + sub->get_name());
    }
    out.push_back("--" + flag + "=" + value);
  }
  return out;
}

std::string format_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path.string());
    f << text;
    if (!f) throw IoError("write failed: " + path.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

int do_build(const BuildOpts& o, std::ostream& out) {
  CodecConfig codec;
  try {
    codec.mode = parse_codec_mode(o.codec);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  codec.block_size = o.block_size;
  if (!o.encoder.empty()) codec.external_encoder_path = o.encoder;
  if (!o.encoder_args.empty()) codec.external_args_template = o.encoder_args;
  std::vector<int> qps;
  try {
    qps = parse_int_list(o.qp_set);
  } catch (const ConfigError& e) {
    throw UsageError(std::string("--qp-set: ") + e.what());
  }
  const auto b = build_dataset(o.corpus, qps, codec, o.out, o.split_ratio, o.seed);
  out << "train entries " << b.train.entries.size() << "  digest " << manifest_digest(b.train) << '\n';
  out << "val entries   " << b.val.entries.size() << "  digest " << manifest_digest(b.val) << '\n';
  return 0;
}

int do_train(TrainOpts o, Stage stage, std::ostream& out) {
  TrainConfig c;
  c.stage = stage;
  c.seed = o.seed;
  c.arch = o.arch;
  if (o.steps) c.steps = *o.steps;
  if (o.batch) c.batch = *o.batch;
  if (o.patch) c.patch = *o.patch;
  if (o.lr) c.lr = *o.lr;
  if (o.grad_clip) c.grad_clip = *o.grad_clip;
  if (o.checkpoint_every) c.checkpoint_every = *o.checkpoint_every;
  if (o.val_every) c.val_every = *o.val_every;
  if (o.val_batch) c.val_batch = *o.val_batch;
  if (o.print_every) c.print_every = *o.print_every;
  c.val_sampler = parse_sampler(o.val_sampler);
  c.out = o.out;
  if (!o.resume.empty()) c.resume = fs::path(o.resume);
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  const bool needs_stage1 = stage == Stage::kStage2 || stage == Stage::kNoDiff;
  if (needs_stage1 && o.stage1.empty()) {
    throw UsageError("--stage1 is required for " + to_string(stage));
  }

  const auto train_m = read_manifest(o.manifest);
  c.qp_set = train_m.qp_set;
  const auto train_set = load_samples(train_m);
  std::vector<FrameSample> val_set;
  if (!o.val_manifest.empty()) val_set = load_samples(read_manifest(o.val_manifest));

  std::optional<Checkpoint> s1;
  if (needs_stage1) s1 = load_checkpoint(o.stage1, c.arch);

  if (fs::path(c.out).has_parent_path()) fs::create_directories(fs::path(c.out).parent_path());
  const fs::path metrics = o.metrics.empty() ? fs::path(o.out + ".log.tsv") : fs::path(o.metrics);
  TrainLogger log(&out, metrics, c.print_every);
  auto w = train(c, train_set, val_set, s1 ? &s1->weights : nullptr, log);
  out << "wrote " << c.out.string() << "  digest " << parameter_digest(w, w.present) << '\n';
  return 0;
}

int do_enhance(const EnhanceOpts& o, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const LumaPlane img = quantize_8bit(read_luma_image(o.in));
  const Checkpoint ck = load_checkpoint(o.weights);
  const Variant v = o.variant.empty() ? ck.weights.variant : variant_flag(o.variant);
  EnhanceOptions opt;
  opt.seed = o.seed;
  opt.noise = parse_sampler(o.sampler);
  opt.pad = o.pad;
  const LumaPlane result = quantize_8bit(enhance(img, ck.weights, v, opt));
  write_luma_image(o.out, result);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                      std::chrono::steady_clock::now() - t0).count();
  out << "elapsed_ms " << ms << '\n';
  if (!o.gt.empty()) {
    const LumaPlane gt = quantize_8bit(read_luma_image(o.gt));
    out << "delta_psnr " << format_value(delta_psnr(result, img, gt)) << '\n';
  }
  return 0;
}

int do_eval(const EvalOpts& o, std::ostream& out) {
  const auto m = read_manifest(o.manifest);
  const SamplerNoise noise = parse_sampler(o.sampler);
  std::optional<Checkpoint> ck;
  Variant v = Variant::kBaseline;
  if (!o.weights.empty()) {
    ck = load_checkpoint(o.weights);
    v = ck->weights.variant;
  } else if (o.variant.empty() || variant_flag(o.variant) != Variant::kBaseline) {
    throw UsageError("--weights is required unless --variant baseline");
  }
  if (!o.variant.empty()) v = variant_flag(o.variant);
  const ModelWeights placeholder(ArchConfig{}, 0);
  const auto records = evaluate(ck ? ck->weights : placeholder, m, v, o.seed, noise);
  write_text(o.out, records_to_csv(records));
  const GroupMean g = mean_delta(records);
  out << "variant " << to_string(v) << "  records " << records.size() << "  mean_delta_psnr "
      << format_value(g.mean) << (g.infinite ? "  infinite " + std::to_string(g.infinite) : "")
      << '\n';
  return 0;
}

int do_report(const ReportOpts& o, std::ostream& out) {
  std::vector<EvalRecord> all;
  for (const auto& p : o.records) {
    auto r = parse_records_csv(read_text(p));
    all.insert(all.end(), r.begin(), r.end());
  }
  const Report rep = report(all);
  if (!o.out.empty()) write_text(o.out, rep.table);
  if (!o.csv.empty()) write_text(o.csv, rep.csv);
  out << rep.table;
  return 0;
}

}  // namespace

std::string usage() {
  return "usage: dqe <subcommand> [--config FILE] [flags]\n"
         "subcommands:\n"
         "  build-dataset  compress a corpus at several QPs and write train/val manifests\n"
         "  train          run a training stage (stage1, stage2)\n"
         "  enhance        enhance one image\n"
         "  eval           evaluate a checkpoint on a manifest\n"
         "  ablate         train an ablation variant (noest, nodiff)\n"
         "  report         tabulate delta-PSNR records\n"
         "run 'dqe <subcommand> --help' for flags\n";
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  torch::set_num_threads(1);

  CLI::App app{"blind-QP quality enhancement toolkit", "dqe"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.set_help_flag("-h,--help", "print usage");

  std::string config_path;
  auto with_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key = value file; explicit flags win");
    return sub;
  };

  BuildOpts bo;
  auto* build = with_config(app.add_subcommand("build-dataset", "build a mixed-QP dataset"));
  build->add_option("--corpus", bo.corpus, "directory of source images")->required();
  build->add_option("--out", bo.out, "output directory")->required();
  build->add_option("--qp-set", bo.qp_set, "comma-separated QPs");
  build->add_option("--codec", bo.codec, "proxy or external");
  build->add_option("--encoder", bo.encoder, "external encoder binary");
  build->add_option("--encoder-args", bo.encoder_args, "argument template");
  build->add_option("--block-size", bo.block_size);
  build->add_option("--split-ratio", bo.split_ratio, "fraction of sources in train");
  build->add_option("--seed", bo.seed);

  TrainOpts to;
  auto* trn = with_config(app.add_subcommand("train", "train stage1 or stage2"));
  trn->add_option("--stage", to.stage, "stage1 or stage2")->required();
  add_train_flags(trn, to);

  TrainOpts ao;
  auto* abl = with_config(app.add_subcommand("ablate", "train an ablation variant"));
  abl->add_option("--variant", ao.variant, "noest or nodiff")->required();
  add_train_flags(abl, ao);

  EnhanceOpts eo;
  auto* enh = with_config(app.add_subcommand("enhance", "enhance one image"));
  enh->add_option("--in", eo.in, "input image")->required();
  enh->add_option("--weights", eo.weights, "checkpoint")->required();
  enh->add_option("--out", eo.out, "output image (png or pgm)")->required();
  enh->add_option("--gt", eo.gt, "ground truth; prints delta PSNR");
  enh->add_option("--variant", eo.variant, "override the checkpoint variant");
  enh->add_option("--sampler", eo.sampler, "zero or stochastic");
  enh->add_option("--seed", eo.seed);
  enh->add_flag("--pad", eo.pad, "edge-pad to the required multiple, then crop");

  EvalOpts vo;
  auto* evl = with_config(app.add_subcommand("eval", "evaluate on a manifest"));
  evl->add_option("--manifest", vo.manifest, "val or test manifest")->required();
  evl->add_option("--weights", vo.weights, "checkpoint");
  evl->add_option("--variant", vo.variant, "full, NoDiff, NoEst or baseline");
  evl->add_option("--out", vo.out, "records csv")->required();
  evl->add_option("--sampler", vo.sampler, "zero or stochastic");
  evl->add_option("--seed", vo.seed);

  ReportOpts ro;
  auto* rpt = with_config(app.add_subcommand("report", "tabulate records"));
  rpt->add_option("--records", ro.records, "records csv files")->required()->multi_option_policy(
      CLI::MultiOptionPolicy::TakeAll);
  rpt->add_option("--out", ro.out, "table text file");
  rpt->add_option("--csv", ro.csv, "summary csv file");
  rpt->add_option("--seed", ro.seed);

  if (!args.empty() && args[0].rfind("-", 0) != 0 &&
      std::find(std::begin(kSubcommands), std::end(kSubcommands), args[0]) == std::end(kSubcommands)) {
    err << "unknown subcommand '" << args[0] << "'\n" << usage();
    return 2;
  }
  if (args.empty()) {
    err << usage();
    return 2;
  }

  try {
    std::vector<std::string> argv = args;
    // Config values go first so explicit flags (later, TakeLast) override them.
    std::optional<std::string> cfg;
    for (std::size_t i = 1; i < args.size() && !cfg; ++i) {
      if (args[i] == "--config" && i + 1 < args.size()) cfg = args[i + 1];
      if (args[i].rfind("--config=", 0) == 0) cfg = args[i].substr(9);
    }
    if (cfg && args[0].rfind("-", 0) != 0) {
      const auto extra = config_args(*cfg, app.get_subcommand(args[0]));
      argv.insert(argv.begin() + 1, extra.begin(), extra.end());
    }
    std::reverse(argv.begin(), argv.end());
    app.parse(argv);
  } catch (const CLI::CallForHelp&) {
    const auto* sub = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front();
    out << (sub ? sub->help() : usage() + "\n" + app.help());
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    if (build->parsed()) return do_build(bo, out);
    if (trn->parsed()) {
      const Stage s = as_usage([&] { return parse_stage(to.stage); });
      if (s != Stage::kStage1 && s != Stage::kStage2) {
        throw UsageError("train --stage takes stage1 or stage2; use ablate for " + to.stage);
      }
      return do_train(to, s, out);
    }
    if (abl->parsed()) {
      const Stage s = as_usage([&] { return parse_stage(ao.variant); });
      if (s != Stage::kNoEst && s != Stage::kNoDiff) {
        throw UsageError("ablate --variant takes noest or nodiff");
      }
      return do_train(ao, s, out);
    }
    if (enh->parsed()) return do_enhance(eo, out);
    if (evl->parsed()) return do_eval(vo, out);
    if (rpt->parsed()) return do_report(ro, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  err << usage();
  return 2;
}

}  // namespace dqe::cli
