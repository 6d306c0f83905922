#include "dqe/eval.hpp"

#include <cmath>
#include <cstdio>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "dqe/checkpoint.hpp"
#include "dqe/codec.hpp"
#include "dqe/config.hpp"
#include "dqe/error.hpp"
#include "dqe/train.hpp"

namespace dqe {

double psnr(const LumaPlane& a, const LumaPlane& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("psnr: planes are " + std::to_string(a.height()) + "x" +
                     std::to_string(a.width()) + " and " + std::to_string(b.height()) + "x" +
                     std::to_string(b.width()));
  }
  const auto pa = a.pixels();
  const auto pb = b.pixels();
  double sum = 0.0;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const double d = static_cast<double>(pa[i]) - static_cast<double>(pb[i]);
    sum += d * d;
  }
  if (sum == 0.0) return kInfinitePsnr;
  const double mse = sum / static_cast<double>(pa.size());
  return -10.0 * std::log10(mse);
}

double delta_psnr(const LumaPlane& enhanced, const LumaPlane& compressed, const LumaPlane& gt) {
  if (!enhanced.same_shape(compressed) || !enhanced.same_shape(gt)) {
    throw ShapeError("delta_psnr: enhanced, compressed and ground truth differ in size");
  }
  const double hm = psnr(compressed, gt);
  if (std::isinf(hm)) {
    throw NumericError("delta_psnr: compressed plane equals ground truth (degenerate sample)");
  }
  return psnr(enhanced, gt) - hm;
}

unsigned required_components(Variant v) {
  switch (v) {
    case Variant::kFull: return kDecoder | kCondition | kPredictor;
    case Variant::kNoDiff: return kDecoder | kRegressor;
    case Variant::kNoEst: return kDecoder;
    case Variant::kBaseline: return 0;
  }
  return 0;
}

namespace {

LumaPlane enhance_aligned(const LumaPlane& img, const ModelWeights& w, Variant v,
                          const EnhanceOptions& opt) {
  const int d = w.arch.latent_dim;
  switch (v) {
    case Variant::kBaseline:
      return img;
    case Variant::kNoEst: {
      const std::vector<float> z(static_cast<std::size_t>(d), 0.0f);
      return decode(img, z, w);
    }
    case Variant::kNoDiff:
      return decode(img, regress_latent(img, w), w);
    case Variant::kFull: {
      const auto c = encode_condition(img, w);
      const std::vector<double> cond(c.begin(), c.end());
      const auto z = sample_feature<double>(cond, static_cast<std::size_t>(d), network_predictor(w),
                                            w.arch.schedule(), opt.seed, opt.noise);
      const std::vector<float> zf(z.begin(), z.end());
      return decode(img, zf, w);
    }
  }
  throw ConfigError("unknown variant");
}

}  // namespace

LumaPlane enhance(const LumaPlane& img, const ModelWeights& w, Variant v, const EnhanceOptions& opt) {
  const unsigned need = required_components(v);
  if ((w.present & need) != need) {
    throw ConfigError("weights lack components for variant " + to_string(v) + " (have " +
                      components_to_string(w.present) + ", need " + components_to_string(need) + ")");
  }
  if (v == Variant::kBaseline) return img;
  const int m = w.arch.required_multiple();
  if (img.height() % m == 0 && img.width() % m == 0) return enhance_aligned(img, w, v, opt);
  if (!opt.pad) {
    throw ShapeError("image is " + std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                     "; dimensions must be multiples of " + std::to_string(m) +
                     " (use --pad to edge-pad and crop)");
  }
  const auto padded = pad_to_multiple(img, m);
  return crop(enhance_aligned(padded, w, v, opt), 0, 0, img.height(), img.width());
}

LumaPlane ManifestSource::compressed(std::size_t i) const {
  const auto& e = m_.entries.at(i);
  return read_raw_plane(m_.root / e.compressed_path, e.height, e.width);
}

LumaPlane ManifestSource::ground_truth(std::size_t i) const {
  const auto& e = m_.entries.at(i);
  return read_raw_plane(m_.root / e.gt_path, e.height, e.width);
}

std::vector<EvalRecord> evaluate(const ModelWeights& w, const FrameSource& frames, Variant v,
                                 std::uint64_t seed, SamplerNoise noise) {
  std::vector<EvalRecord> out;
  out.reserve(frames.size());
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const LumaPlane comp = frames.compressed(i);
    const LumaPlane en = enhance(comp, w, v, {mix_seed(seed, i), noise, true});
    const LumaPlane gt = frames.ground_truth(i);
    EvalRecord r;
    r.source_id = frames.source_id(i);
    r.qp = frames.qp(i);
    r.variant = v;
    r.psnr_hm = psnr(comp, gt);
    r.psnr_en = psnr(en, gt);
    r.delta_psnr = delta_psnr(en, comp, gt);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<EvalRecord> evaluate(const ModelWeights& w, const DatasetManifest& m, Variant v,
                                 std::uint64_t seed, SamplerNoise noise) {
  if (m.split == Split::kTrain) {
    throw ConfigError("evaluation needs a val or test manifest, got split=train");
  }
  return evaluate(w, ManifestSource(m), v, seed, noise);
}

GroupMean mean_delta(const std::vector<EvalRecord>& records) {
  GroupMean g;
  double sum = 0.0;
  for (const auto& r : records) {
    if (std::isinf(r.delta_psnr)) {
      ++g.infinite;
      continue;
    }
    sum += r.delta_psnr;
    ++g.count;
  }
  g.mean = g.count > 0 ? sum / g.count : 0.0;
  return g;
}

std::string format_db(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

double parse_db(const std::string& s) {
  if (s == "inf") return kInfinitePsnr;
  if (s == "-inf") return -kInfinitePsnr;
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw FormatError("bad dB value '" + s + "'");
  return v;
}

}  // namespace

std::string records_to_csv(const std::vector<EvalRecord>& records) {
  std::ostringstream os;
  os << "source_id,qp,variant,psnr_hm,psnr_en,delta_psnr\n";
  for (const auto& r : records) {
    os << r.source_id << ',' << r.qp << ',' << to_string(r.variant) << ',' << format_db(r.psnr_hm)
       << ',' << format_db(r.psnr_en) << ',' << format_db(r.delta_psnr) << '\n';
  }
  return os.str();
}

std::vector<EvalRecord> parse_records_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "source_id,qp,variant,psnr_hm,psnr_en,delta_psnr") {
    throw FormatError("records file: missing or wrong header");
  }
  std::vector<EvalRecord> out;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 6) throw FormatError("records file line " + std::to_string(lineno) + ": expected 6 fields");
    try {
      EvalRecord r;
      r.source_id = f[0];
      r.qp = std::stoi(f[1]);
      r.variant = parse_variant(f[2]);
      r.psnr_hm = parse_db(f[3]);
      r.psnr_en = parse_db(f[4]);
      r.delta_psnr = parse_db(f[5]);
      out.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw FormatError("records file line " + std::to_string(lineno) + ": bad number");
    }
  }
  return out;
}

Report report(const std::vector<EvalRecord>& records) {
  if (records.empty()) throw ConfigError("report: no records");

  Report rep;
  std::set<Variant> seen;
  for (const auto& r : records) seen.insert(r.variant);
  for (const Variant v : {Variant::kFull, Variant::kNoDiff, Variant::kNoEst, Variant::kBaseline}) {
    if (seen.count(v)) rep.columns.push_back(v);
  }

  struct Row {
    std::string group, key;
    std::map<Variant, std::vector<EvalRecord>> cells;
  };
  std::vector<Row> rows;
  std::map<std::string, std::size_t> by_source, by_qp;
  std::vector<std::string> source_order;
  std::set<int> qps;
  for (const auto& r : records) {
    if (!by_source.count(r.source_id)) {
      by_source[r.source_id] = 0;
      source_order.push_back(r.source_id);
    }
    qps.insert(r.qp);
  }
  for (const auto& s : source_order) {
    by_source[s] = rows.size();
    rows.push_back({"source", s, {}});
  }
  for (const int q : qps) {
    by_qp[std::to_string(q)] = rows.size();
    rows.push_back({"qp", std::to_string(q), {}});
  }
  const std::size_t avg = rows.size();
  rows.push_back({"average", "Average", {}});
  for (const auto& r : records) {
    rows[by_source[r.source_id]].cells[r.variant].push_back(r);
    rows[by_qp[std::to_string(r.qp)]].cells[r.variant].push_back(r);
    rows[avg].cells[r.variant].push_back(r);
  }

  std::size_t key_w = 8;
  for (const auto& row : rows) key_w = std::max(key_w, row.key.size() + (row.group == "qp" ? 3 : 0));
  constexpr int kCol = 18;

  std::ostringstream t, c;
  c << "group,key,variant,mean_delta_psnr,count,infinite\n";
  t << std::left << std::setw(static_cast<int>(key_w) + 2) << "delta PSNR (dB)";
  for (const Variant v : rep.columns) t << std::right << std::setw(kCol) << to_string(v);
  t << '\n';
  std::string prev_group;
  for (const auto& row : rows) {
    if (row.group != prev_group && !prev_group.empty()) {
      t << std::string(key_w + 2 + kCol * rep.columns.size(), '-') << '\n';
    }
    prev_group = row.group;
    const std::string label = row.group == "qp" ? "QP " + row.key : row.key;
    t << std::left << std::setw(static_cast<int>(key_w) + 2) << label;
    for (const Variant v : rep.columns) {
      const auto it = row.cells.find(v);
      std::string cell = "-";
      if (it != row.cells.end()) {
        const GroupMean g = mean_delta(it->second);
        if (g.count == 0) {
          cell = "inf";
        } else {
          std::ostringstream cs;
          cs << std::fixed << std::setprecision(4) << g.mean;
          if (g.infinite > 0) cs << " (+" << g.infinite << " inf)";
          cell = cs.str();
        }
        c << row.group << ',' << row.key << ',' << to_string(v) << ','
          << (g.count == 0 ? std::string("inf") : format_db(g.mean)) << ',' << g.count << ','
          << g.infinite << '\n';
      }
      t << std::right << std::setw(kCol) << cell;
    }
    t << '\n';
  }
  rep.table = t.str();
  rep.csv = c.str();
  return rep;
}

}  // namespace dqe
