#include "smagnet/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "smagnet/training.hpp"

namespace smagnet::eval {

MissingPattern parse_pattern(const std::string& name) {
  if (name == "band") return MissingPattern::band;
  if (name == "blobs") return MissingPattern::blobs;
  throw std::invalid_argument("unknown missingness pattern '" + name + "'");
}

std::string pattern_name(MissingPattern p) { return p == MissingPattern::band ? "band" : "blobs"; }

data::Scene inject_missing(const data::Scene& scene, double ratio, MissingPattern pattern, Rng& rng, float fill) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw std::invalid_argument("missingness ratio must lie in [0,1]");
  const std::size_t H = scene.height, W = scene.width, P = H * W;
  const auto target = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(P) + 1e-9));
  std::vector<std::uint8_t> blank(P, 0);
  if (pattern == MissingPattern::band || target >= P) {
    for (std::size_t k = 0; k < target; ++k) blank[(k % H) * W + k / H] = 1;
  } else if (target > 0) {
    std::size_t covered = 0;
    const double rmin = std::max(1.0, static_cast<double>(std::min(H, W)) / 16.0);
    const double rmax = std::max(rmin, static_cast<double>(std::min(H, W)) / 4.0);
    for (int iter = 0; covered < target && iter < 100000; ++iter) {
      const double ci = rng.uniform(0.0, static_cast<double>(H));
      const double cj = rng.uniform(0.0, static_cast<double>(W));
      const double r = rng.uniform(rmin, rmax);
      const auto i0 = static_cast<std::size_t>(std::max(0.0, std::floor(ci - r)));
      const auto i1 = static_cast<std::size_t>(std::min(static_cast<double>(H), std::ceil(ci + r)));
      const auto j0 = static_cast<std::size_t>(std::max(0.0, std::floor(cj - r)));
      const auto j1 = static_cast<std::size_t>(std::min(static_cast<double>(W), std::ceil(cj + r)));
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) {
          const double di = static_cast<double>(i) + 0.5 - ci, dj = static_cast<double>(j) + 0.5 - cj;
          if (di * di + dj * dj <= r * r && !blank[i * W + j]) {
            blank[i * W + j] = 1;
            ++covered;
          }
        }
    }
  }
  data::Scene out = scene;
  for (std::size_t p = 0; p < P; ++p) {
    if (!blank[p]) continue;
    out.validity[p] = 0;
    for (std::size_t b = 0; b < data::kMsiBands; ++b) out.msi[b * P + p] = fill;
  }
  return out;
}

std::vector<float> ndvi(std::span<const float> red, std::span<const float> nir, double eps) {
  if (red.size() != nir.size()) throw std::invalid_argument("ndvi: band size mismatch");
  std::vector<float> out(red.size());
  for (std::size_t i = 0; i < red.size(); ++i) {
    const double r = red[i], n = nir[i], s = n + r;
    out[i] = s <= eps ? 0.0f : static_cast<float>((n - r) / s);
  }
  return out;
}

std::vector<double> uniform_edges(double lo, double hi, double width) {
  if (!(hi > lo) || !(width > 0)) throw std::invalid_argument("uniform_edges: need lo < hi and width > 0");
  const auto n = static_cast<std::size_t>(std::llround((hi - lo) / width));
  std::vector<double> e(n + 1);
  for (std::size_t i = 0; i <= n; ++i) e[i] = lo + static_cast<double>(i) * width;
  e.back() = hi;
  return e;
}

std::string Histogram::csv() const {
  std::ostringstream os;
  os << "bin_lo,bin_hi,fn,fp\n" << std::setprecision(6);
  for (std::size_t i = 0; i < fn.size(); ++i) os << edges[i] << ',' << edges[i + 1] << ',' << fn[i] << ',' << fp[i] << '\n';
  return os.str();
}

Histogram& Histogram::operator+=(const Histogram& o) {
  if (edges.empty()) return *this = o;
  if (o.edges != edges) throw std::invalid_argument("histogram edges differ");
  for (std::size_t i = 0; i < fn.size(); ++i) {
    fn[i] += o.fn[i];
    fp[i] += o.fp[i];
  }
  return *this;
}

Histogram misclass_histogram(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> label,
                             std::span<const float> index, std::span<const std::uint8_t> valid,
                             std::span<const double> edges) {
  if (edges.size() < 2) throw std::invalid_argument("histogram needs at least one bin");
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (!(edges[i] > edges[i - 1])) throw std::invalid_argument("histogram edges must increase");
  if (pred.size() != label.size() || index.size() != pred.size() || valid.size() != pred.size())
    throw std::invalid_argument("histogram inputs differ in size");
  Histogram h;
  h.edges.assign(edges.begin(), edges.end());
  const std::size_t bins = edges.size() - 1;
  h.fn.assign(bins, 0);
  h.fp.assign(bins, 0);
  for (std::size_t p = 0; p < pred.size(); ++p) {
    if (!valid[p] || pred[p] == label[p]) continue;
    const double v = index[p];
    // upper_bound finds the first edge > v; bin = that position - 1, clamped.
    auto it = std::upper_bound(edges.begin(), edges.end(), v);
    std::size_t bin = it == edges.begin() ? 0 : static_cast<std::size_t>(it - edges.begin()) - 1;
    bin = std::min(bin, bins - 1);
    (label[p] ? h.fn : h.fp)[bin] += 1;
  }
  return h;
}

std::vector<std::uint8_t> binarize(std::span<const float> prob, double threshold) {
  std::vector<std::uint8_t> out(prob.size());
  for (std::size_t i = 0; i < prob.size(); ++i) out[i] = static_cast<double>(prob[i]) >= threshold ? 1 : 0;
  return out;
}

std::string EvalResult::per_scene_csv() const {
  std::ostringstream os;
  os << "scene,tp,fp,fn,tn,oa,precision,recall,iou\n" << std::setprecision(9);
  for (const auto& s : scenes) {
    const auto m = s.metrics();
    os << s.id << ',' << s.fused.tp << ',' << s.fused.fp << ',' << s.fused.fn << ',' << s.fused.tn << ',' << m.oa
       << ',' << m.precision << ',' << m.recall << ',' << m.iou << '\n';
  }
  return os.str();
}

nlohmann::json EvalResult::summary(bool dual) const {
  nlohmann::json j;
  j["threshold"] = threshold;
  j["scenes"] = scenes.size();
  j["fused"] = {{"counts", fused}, {"metrics", metrics(fused)}};
  if (dual) j["sar"] = {{"counts", sar}, {"metrics", metrics(sar)}};
  return j;
}

namespace {

std::vector<data::Scene> normalize_all(std::span<const data::Scene> raw, const data::NormStats& stats, float fill) {
  std::vector<data::Scene> out;
  out.reserve(raw.size());
  for (const auto& s : raw) out.push_back(data::normalize(s, stats, fill));
  return out;
}

}  // namespace

EvalResult evaluate(nn::Model<float>& model, std::span<const data::Scene> raw_scenes, const data::NormStats& stats,
                    float fill, double threshold, std::size_t batch_size) {
  const auto norm = normalize_all(raw_scenes, stats, fill);
  const auto preds = train::predict(model, norm, batch_size);
  EvalResult r;
  r.threshold = threshold;
  const auto ndvi_edges = uniform_edges(-1.0, 1.0, 0.1);
  const auto nir_edges = uniform_edges(0.0, 1.0, 0.1);
  r.hist_ndvi.edges = ndvi_edges;
  r.hist_ndvi.fn.assign(ndvi_edges.size() - 1, 0);
  r.hist_ndvi.fp = r.hist_ndvi.fn;
  r.hist_nir.edges = nir_edges;
  r.hist_nir.fn.assign(nir_edges.size() - 1, 0);
  r.hist_nir.fp = r.hist_nir.fn;
  for (std::size_t i = 0; i < raw_scenes.size(); ++i) {
    const auto& s = raw_scenes[i];
    const std::size_t P = s.pixels();
    SceneEval se;
    se.id = s.id;
    const auto pred = binarize(preds[i].prob_fused, threshold);
    se.fused = confusion(pred, s.label);
    if (!preds[i].prob_sar.empty()) se.sar = confusion(binarize(preds[i].prob_sar, threshold), s.label);
    r.fused += se.fused;
    r.sar += se.sar;
    const std::span<const float> red(s.msi.data() + data::kRed * P, P);
    const std::span<const float> nir(s.msi.data() + data::kNir * P, P);
    r.hist_ndvi += misclass_histogram(pred, s.label, ndvi(red, nir), s.validity, ndvi_edges);
    r.hist_nir += misclass_histogram(pred, s.label, nir, s.validity, nir_edges);
    r.scenes.push_back(std::move(se));
  }
  return r;
}

double SweepResult::delta() const {
  if (points.empty()) return 0;
  return points.front().mean_iou - points.back().mean_iou;
}

std::string SweepResult::csv() const {
  std::ostringstream os;
  os << "ratio,mean_iou,std_iou\n" << std::setprecision(9);
  for (const auto& p : points) os << p.ratio * 100.0 << ',' << p.mean_iou << ',' << p.std_iou << '\n';
  os << "delta," << delta() << ",\n";
  return os.str();
}

std::string SweepResult::per_scene_csv() const {
  std::ostringstream os;
  os << "ratio,seed,scene,tp,fp,fn,tn,iou\n" << std::setprecision(9);
  for (const auto& p : points)
    for (std::size_t s = 0; s < p.counts.size(); ++s)
      for (std::size_t k = 0; k < p.counts[s].size(); ++k) {
        const auto& c = p.counts[s][k];
        os << p.ratio * 100.0 << ',' << s << ',' << scene_ids[k] << ',' << c.tp << ',' << c.fp << ',' << c.fn << ','
           << c.tn << ',' << metrics(c).iou << '\n';
      }
  return os.str();
}

SweepResult robustness_sweep(nn::Model<float>& model, std::span<const data::Scene> raw_scenes,
                             const data::NormStats& stats, float fill, double threshold, std::vector<double> ratios,
                             MissingPattern pattern, std::uint64_t seed, std::size_t seeds) {
  if (ratios.empty()) throw std::invalid_argument("sweep needs at least one ratio");
  std::sort(ratios.begin(), ratios.end());
  if (pattern == MissingPattern::band) seeds = 1;
  if (seeds == 0) throw std::invalid_argument("sweep needs at least one seed");
  SweepResult r;
  r.pattern = pattern;
  for (const auto& s : raw_scenes) r.scene_ids.push_back(s.id);
  for (double ratio : ratios) {
    SweepPoint pt;
    pt.ratio = ratio;
    for (std::size_t k = 0; k < seeds; ++k) {
      std::vector<data::Scene> injected;
      for (std::size_t i = 0; i < raw_scenes.size(); ++i) {
        Rng rng(derive_seed(derive_seed(seed, k), i));
        injected.push_back(inject_missing(raw_scenes[i], ratio, pattern, rng, fill));
      }
      const auto res = evaluate(model, injected, stats, fill, threshold);
      std::vector<ConfusionCounts> counts;
      for (const auto& s : res.scenes) counts.push_back(s.fused);
      pt.counts.push_back(std::move(counts));
      pt.seed_iou.push_back(metrics(res.fused).iou);
    }
    double mean = 0;
    for (double v : pt.seed_iou) mean += v;
    mean /= static_cast<double>(pt.seed_iou.size());
    double var = 0;
    for (double v : pt.seed_iou) var += (v - mean) * (v - mean);
    pt.mean_iou = mean;
    pt.std_iou = std::sqrt(var / static_cast<double>(pt.seed_iou.size()));
    r.points.push_back(std::move(pt));
  }
  return r;
}

std::vector<float> mse_map(std::span<const float> a, std::span<const float> b, std::size_t channels) {
  if (a.size() != b.size() || channels == 0 || a.size() % channels != 0)
    throw std::invalid_argument("mse_map: feature maps differ in size");
  const std::size_t P = a.size() / channels;
  std::vector<double> acc(P, 0.0);
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t p = 0; p < P; ++p) {
      const double d = static_cast<double>(a[c * P + p]) - static_cast<double>(b[c * P + p]);
      acc[p] += d * d;
    }
  std::vector<float> out(P);
  for (std::size_t p = 0; p < P; ++p) out[p] = static_cast<float>(acc[p] / static_cast<double>(channels));
  return out;
}

Diagnostics diagnose(nn::Model<float>& model, const data::Scene& scene, const data::NormStats& stats, float fill) {
  if (!model.config().dual()) throw std::invalid_argument("diagnostics need a dual-head model");
  const auto norm = data::normalize(scene, stats, fill);
  const data::Scene* ptr = &norm;
  NoGradGuard guard;
  const auto out = model.forward(train::make_batch<float>(std::span<const data::Scene* const>(&ptr, 1)), false);
  Diagnostics d;
  d.height = scene.height;
  d.width = scene.width;
  d.channels = out.features_fused.dim(1);
  d.smg = out.smg;
  d.features_fused.assign(out.features_fused.data().begin(), out.features_fused.data().end());
  d.features_sar.assign(out.features_sar.data().begin(), out.features_sar.data().end());
  d.mse = mse_map(d.features_fused, d.features_sar, d.channels);
  for (float v : out.logits_fused.data()) d.prob_fused.push_back(static_cast<float>(1.0 / (1.0 + std::exp(-double(v)))));
  for (float v : out.logits_sar.data()) d.prob_sar.push_back(static_cast<float>(1.0 / (1.0 + std::exp(-double(v)))));
  return d;
}

io::Container Diagnostics::to_container() const {
  io::Container c;
  auto put_map = [&](const std::string& key, const Tensor& t) {
    // Stored per scene: drop the batch axis.
    Shape s(t.shape().begin() + 1, t.shape().end());
    c.put(key, s, std::vector<float>(t.data().begin(), t.data().end()));
  };
  for (std::size_t k = 0; k < smg.size(); ++k) {
    const std::string p = "smg.level" + std::to_string(k + 1) + ".";
    put_map(p + "gate", smg[k].gate);
    put_map(p + "mask", smg[k].mask);
    put_map(p + "smg", smg[k].smg);
    if (smg[k].sar_gate.defined()) put_map(p + "sar_gate", smg[k].sar_gate);
  }
  c.put("mse", {height, width}, mse);
  c.put("features.fused", {channels, height, width}, features_fused);
  c.put("features.sar", {channels, height, width}, features_sar);
  c.put("prob.fused", {height, width}, prob_fused);
  c.put("prob.sar", {height, width}, prob_sar);
  return c;
}

}  // namespace smagnet::eval
