#include "smagnet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

#include "smagnet/errors.hpp"
#include "smagnet/rng.hpp"
#include "smagnet/serialize.hpp"

namespace smagnet::data {

namespace fs = std::filesystem;

double Scene::water_fraction() const {
  if (label.empty()) return 0.0;
  return static_cast<double>(std::count(label.begin(), label.end(), 1)) / static_cast<double>(label.size());
}

double Scene::valid_fraction() const {
  if (validity.empty()) return 0.0;
  return static_cast<double>(std::count(validity.begin(), validity.end(), 1)) /
         static_cast<double>(validity.size());
}

void GenParams::validate() const {
  auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (size == 0 || size % 32 != 0) throw ConfigError("scene size must be a positive multiple of 32");
  if (!in01(water_min) || !in01(water_max) || water_min > water_max)
    throw ConfigError("water fraction range must satisfy 0 <= min <= max <= 1");
  if (!in01(cloud_min) || !in01(cloud_max) || cloud_min > cloud_max)
    throw ConfigError("cloud coverage range must satisfy 0 <= min <= max <= 1");
  if (!(speckle_shape > 0.0)) throw ConfigError("speckle shape must be positive");
  if (nir_absorption < 0.0) throw ConfigError("NIR absorption depth must be non-negative");
}

void to_json(nlohmann::json& j, const GenParams& p) {
  j = {{"size", p.size},
       {"water_min", p.water_min},
       {"water_max", p.water_max},
       {"speckle_shape", p.speckle_shape},
       {"water_offset_db", p.water_offset_db},
       {"nir_absorption", p.nir_absorption},
       {"cloud_min", p.cloud_min},
       {"cloud_max", p.cloud_max},
       {"fill_value", p.fill_value},
       {"seed", p.seed}};
}

void from_json(const nlohmann::json& j, GenParams& p) {
  GenParams d;
  p.size = j.value("size", d.size);
  p.water_min = j.value("water_min", d.water_min);
  p.water_max = j.value("water_max", d.water_max);
  p.speckle_shape = j.value("speckle_shape", d.speckle_shape);
  p.water_offset_db = j.value("water_offset_db", d.water_offset_db);
  p.nir_absorption = j.value("nir_absorption", d.nir_absorption);
  p.cloud_min = j.value("cloud_min", d.cloud_min);
  p.cloud_max = j.value("cloud_max", d.cloud_max);
  p.fill_value = j.value("fill_value", d.fill_value);
  p.seed = j.value("seed", d.seed);
}

namespace {

using Field = std::vector<double>;

// Multi-octave value noise on an S x S grid with smoothstep interpolation,
// rescaled to [0,1]. Each octave is {cell size in pixels, amplitude}.
Field value_noise(Rng& rng, std::size_t S, std::initializer_list<std::pair<double, double>> octaves) {
  Field f(S * S, 0.0);
  for (auto [cell, amp] : octaves) {
    const std::size_t g = static_cast<std::size_t>(std::ceil(static_cast<double>(S) / cell)) + 2;
    std::vector<double> lattice(g * g);
    for (auto& v : lattice) v = rng.uniform();
    for (std::size_t y = 0; y < S; ++y) {
      const double gy = static_cast<double>(y) / cell;
      const std::size_t iy = static_cast<std::size_t>(gy);
      double ty = gy - static_cast<double>(iy);
      ty = ty * ty * (3.0 - 2.0 * ty);
      for (std::size_t x = 0; x < S; ++x) {
        const double gx = static_cast<double>(x) / cell;
        const std::size_t ix = static_cast<std::size_t>(gx);
        double tx = gx - static_cast<double>(ix);
        tx = tx * tx * (3.0 - 2.0 * tx);
        const double a = lattice[iy * g + ix], b = lattice[iy * g + ix + 1];
        const double c = lattice[(iy + 1) * g + ix], d = lattice[(iy + 1) * g + ix + 1];
        f[y * S + x] += amp * ((a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty);
      }
    }
  }
  const auto [lo, hi] = std::minmax_element(f.begin(), f.end());
  const double mn = *lo, span = std::max(*hi - *lo, 1e-12);
  for (auto& v : f) v = (v - mn) / span;
  return f;
}

double fraction_below(const Field& f, double t) {
  std::size_t n = 0;
  for (double v : f) n += v < t;
  return static_cast<double>(n) / static_cast<double>(f.size());
}

// Bisection for t with fraction_below(f, t) close to target.
double threshold_for_fraction(const Field& f, double target, double* achieved) {
  double lo = 0.0, hi = 1.0 + 1e-9, best_t = lo, best_err = 2.0, best_frac = 0.0;
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double frac = fraction_below(f, mid);
    const double err = std::abs(frac - target);
    if (err < best_err) {
      best_err = err;
      best_t = mid;
      best_frac = frac;
    }
    if (frac < target) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  *achieved = best_frac;
  return best_t;
}

}  // namespace

Scene generate_scene(std::uint64_t seed, const GenParams& params, std::string id) {
  params.validate();
  const std::size_t S = params.size, N = S * S;
  const double s = static_cast<double>(S);
  Rng rng(seed);

  Scene sc;
  sc.id = id.empty() ? "seed" + std::to_string(seed) : std::move(id);
  sc.height = sc.width = S;

  // (1) Water label from a thresholded smooth field.
  const double target = rng.uniform(params.water_min, params.water_max);
  const Field water_field = value_noise(rng, S, {{s / 4, 1.0}, {s / 8, 0.5}, {s / 16, 0.25}});
  double achieved = 0.0;
  const double wt = threshold_for_fraction(water_field, target, &achieved);
  if (std::abs(achieved - target) > 0.02) {
    throw DataError("water fraction " + std::to_string(target) + " unreachable for seed " + std::to_string(seed));
  }
  sc.label.resize(N);
  for (std::size_t i = 0; i < N; ++i) sc.label[i] = water_field[i] < wt ? 1 : 0;

  // (2) SAR: terrain texture, dark look-alike patches on land, water offset,
  // then multiplicative gamma speckle in linear power.
  const Field terrain = value_noise(rng, S, {{s / 8, 1.0}, {s / 16, 0.5}});
  const Field cross = value_noise(rng, S, {{s / 8, 1.0}});
  const Field lookalike = value_noise(rng, S, {{s / 8, 1.0}, {s / 16, 0.5}});
  double la_frac = 0.0;
  const double la_t = threshold_for_fraction(lookalike, 1.0 - rng.uniform(0.04, 0.12), &la_frac);
  const double la_depth = rng.uniform(6.5, 9.5);
  sc.sar.resize(kSarBands * N);
  for (std::size_t i = 0; i < N; ++i) {
    double vv = -8.0 + 5.0 * (terrain[i] - 0.5);
    double vh = vv - 6.5 + 1.5 * (cross[i] - 0.5);
    if (sc.label[i]) {
      vv += params.water_offset_db;
      vh += params.water_offset_db;
    } else if (lookalike[i] >= la_t) {
      vv -= la_depth;
      vh -= la_depth;
    }
    const double k = params.speckle_shape;
    const double lin_vv = std::pow(10.0, vv / 10.0) * rng.gamma(k, 1.0 / k);
    const double lin_vh = std::pow(10.0, vh / 10.0) * rng.gamma(k, 1.0 / k);
    sc.sar[i] = static_cast<float>(10.0 * std::log10(std::max(lin_vv, 1e-12)));
    sc.sar[N + i] = static_cast<float>(10.0 * std::log10(std::max(lin_vh, 1e-12)));
  }

  // (3) MSI: vegetation-driven reflectances, NIR absorbed over water.
  const Field veg = value_noise(rng, S, {{s / 4, 1.0}, {s / 8, 0.5}});
  sc.msi.resize(kMsiBands * N);
  for (std::size_t i = 0; i < N; ++i) {
    const double v = veg[i];
    double r = 0.03 + 0.10 * (1 - v), g = 0.05 + 0.07 * (1 - v), b = 0.03 + 0.05 * (1 - v);
    double nir = 0.22 + 0.28 * v;
    if (sc.label[i]) {
      r = 0.04;
      g = 0.05;
      b = 0.06;
      nir = std::max(0.01, nir - params.nir_absorption);
    }
    const double bands[kMsiBands] = {r, g, b, nir};
    for (std::size_t c = 0; c < kMsiBands; ++c) {
      sc.msi[c * N + i] = static_cast<float>(std::clamp(bands[c] + rng.normal(0.0, 0.01), 0.0, 1.0));
    }
  }

  // (4) Clouds remove MSI; their displaced shadows darken NIR and visible bands.
  sc.validity.assign(N, 1);
  const double coverage = rng.uniform(params.cloud_min, params.cloud_max);
  const Field cloud_field = value_noise(rng, S, {{s / 4, 1.0}, {s / 8, 0.5}});
  const long dx = 3 + static_cast<long>(rng.index(4)), dy = 3 + static_cast<long>(rng.index(4));
  if (coverage > 0.0) {
    double got = 0.0;
    const double ct = threshold_for_fraction(cloud_field, 1.0 - coverage, &got);
    for (std::size_t i = 0; i < N; ++i) sc.validity[i] = cloud_field[i] >= ct ? 0 : 1;
    for (std::size_t y = 0; y < S; ++y)
      for (std::size_t x = 0; x < S; ++x) {
        const long sy = static_cast<long>(y) - dy, sx = static_cast<long>(x) - dx;
        if (sy < 0 || sx < 0) continue;
        const std::size_t i = y * S + x;
        if (!sc.validity[i] || sc.validity[static_cast<std::size_t>(sy) * S + static_cast<std::size_t>(sx)]) continue;
        for (std::size_t c = 0; c < kMsiBands; ++c) sc.msi[c * N + i] *= c == kNir ? 0.5f : 0.6f;
      }
    for (std::size_t i = 0; i < N; ++i) {
      if (!sc.validity[i]) {
        for (std::size_t c = 0; c < kMsiBands; ++c) sc.msi[c * N + i] = params.fill_value;
      }
    }
  }
  return sc;
}

std::vector<Scene> generate_corpus(const GenParams& params, std::size_t count) {
  std::vector<Scene> out;
  out.reserve(count);
  char buf[32];
  for (std::size_t i = 0; i < count; ++i) {
    std::snprintf(buf, sizeof buf, "s%04zu", i);
    out.push_back(generate_scene(derive_seed(params.seed, static_cast<std::uint64_t>(i)), params, buf));
  }
  return out;
}

NormStats compute_norm_stats(std::span<const Scene> scenes) {
  constexpr std::size_t nb = kSarBands + kMsiBands;
  std::array<double, nb> sum{}, count{};
  auto visit = [&](auto&& fn) {
    for (const auto& sc : scenes) {
      const std::size_t N = sc.pixels();
      for (std::size_t c = 0; c < kSarBands; ++c)
        for (std::size_t i = 0; i < N; ++i) fn(c, sc.sar[c * N + i]);
      for (std::size_t c = 0; c < kMsiBands; ++c)
        for (std::size_t i = 0; i < N; ++i)
          if (sc.validity[i]) fn(kSarBands + c, sc.msi[c * N + i]);
    }
  };
  visit([&](std::size_t b, float v) {
    sum[b] += v;
    count[b] += 1;
  });
  NormStats st;
  for (std::size_t b = 0; b < nb; ++b) {
    if (count[b] == 0) throw DataError("no valid pixels for band " + std::to_string(b) + " in the training split");
    st.mean[b] = sum[b] / count[b];
  }
  std::array<double, nb> sq{};
  visit([&](std::size_t b, float v) {
    const double d = v - st.mean[b];
    sq[b] += d * d;
  });
  for (std::size_t b = 0; b < nb; ++b) st.std[b] = std::max(std::sqrt(sq[b] / count[b]), kStdFloor);
  return st;
}

Scene normalize(const Scene& scene, const NormStats& stats, float fill) {
  Scene out = scene;
  const std::size_t N = scene.pixels();
  for (std::size_t c = 0; c < kSarBands; ++c)
    for (std::size_t i = 0; i < N; ++i)
      out.sar[c * N + i] = static_cast<float>((scene.sar[c * N + i] - stats.mean[c]) / stats.std[c]);
  for (std::size_t c = 0; c < kMsiBands; ++c)
    for (std::size_t i = 0; i < N; ++i)
      out.msi[c * N + i] =
          scene.validity[i]
              ? static_cast<float>((scene.msi[c * N + i] - stats.mean[kSarBands + c]) / stats.std[kSarBands + c])
              : fill;
  return out;
}

SplitManifest stratified_split(std::span<const Scene> scenes, std::uint64_t seed) {
  const std::size_t N = scenes.size();
  if (N == 0) throw DataError("cannot split an empty scene set");
  constexpr std::size_t kStrata = 5;
  SplitManifest m;
  m.seed = seed;
  const std::size_t n_val = N / 5, n_test = N / 5;
  Rng rng(derive_seed(seed, "split"));

  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);

  if (N < kStrata) {
    std::shuffle(order.begin(), order.end(), rng.engine());
    m.stratified = false;
    m.warning = "fewer scenes than strata; plain random split";
    for (std::size_t k = 0; k < N; ++k) {
      auto& dst = k < n_val ? m.val : (k < n_val + n_test ? m.test : m.train);
      dst.push_back(scenes[order[k]].id);
    }
    return m;
  }

  // Quintile of water fraction by rank; ties broken by position.
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scenes[a].water_fraction() < scenes[b].water_fraction();
  });
  std::array<std::vector<std::size_t>, kStrata> strata;
  for (std::size_t r = 0; r < N; ++r) strata[r * kStrata / N].push_back(order[r]);

  // Controlled rounding of the strata x split table: every cell is the floor
  // or ceiling of its proportional share while row sums (stratum sizes) and
  // column sums (split sizes) stay exact. Remaining units are placed by a
  // max-flow over the cells with a fractional share.
  const std::array<std::size_t, 3> split_n{N - n_val - n_test, n_val, n_test};
  std::array<std::array<std::size_t, 3>, kStrata> cell{};
  std::array<std::array<bool, 3>, kStrata> fractional{};
  std::array<long, kStrata> row_left{};
  std::array<long, 3> col_left{};
  for (std::size_t j = 0; j < 3; ++j) col_left[j] = static_cast<long>(split_n[j]);
  for (std::size_t q = 0; q < kStrata; ++q) {
    row_left[q] = static_cast<long>(strata[q].size());
    for (std::size_t j = 0; j < 3; ++j) {
      const double exact = static_cast<double>(strata[q].size() * split_n[j]) / static_cast<double>(N);
      cell[q][j] = static_cast<std::size_t>(std::floor(exact));
      fractional[q][j] = exact > std::floor(exact);
      row_left[q] -= static_cast<long>(cell[q][j]);
      col_left[j] -= static_cast<long>(cell[q][j]);
    }
  }
  // Nodes: 0 source, 1..5 strata, 6..8 splits, 9 sink.
  constexpr std::size_t V = kStrata + 5;
  std::array<std::array<long, V>, V> capacity{};
  for (std::size_t q = 0; q < kStrata; ++q) {
    capacity[0][1 + q] = row_left[q];
    for (std::size_t j = 0; j < 3; ++j) capacity[1 + q][6 + j] = fractional[q][j] ? 1 : 0;
  }
  for (std::size_t j = 0; j < 3; ++j) capacity[6 + j][V - 1] = col_left[j];
  for (;;) {
    std::array<int, V> prev;
    prev.fill(-1);
    prev[0] = 0;
    std::vector<std::size_t> queue{0};
    for (std::size_t head = 0; head < queue.size() && prev[V - 1] < 0; ++head) {
      const std::size_t u = queue[head];
      for (std::size_t v = 0; v < V; ++v)
        if (prev[v] < 0 && capacity[u][v] > 0) {
          prev[v] = static_cast<int>(u);
          queue.push_back(v);
        }
    }
    if (prev[V - 1] < 0) break;
    for (std::size_t v = V - 1; v != 0; v = static_cast<std::size_t>(prev[v])) {
      capacity[static_cast<std::size_t>(prev[v])][v] -= 1;
      capacity[v][static_cast<std::size_t>(prev[v])] += 1;
    }
  }
  std::array<std::size_t, kStrata> val_n{}, test_n{};
  for (std::size_t q = 0; q < kStrata; ++q) {
    for (std::size_t j = 0; j < 3; ++j)
      if (fractional[q][j] && capacity[1 + q][6 + j] == 0) ++cell[q][j];
    val_n[q] = cell[q][1];
    test_n[q] = cell[q][2];
  }

  for (std::size_t q = 0; q < kStrata; ++q) {
    auto members = strata[q];
    std::sort(members.begin(), members.end());
    std::shuffle(members.begin(), members.end(), rng.engine());
    for (std::size_t k = 0; k < members.size(); ++k) {
      const std::string& id = scenes[members[k]].id;
      if (k < val_n[q]) {
        m.val.push_back(id);
      } else if (k < val_n[q] + test_n[q]) {
        m.test.push_back(id);
      } else {
        m.train.push_back(id);
      }
    }
  }
  // Present each split in corpus order.
  auto by_position = [&](std::vector<std::string>& ids) {
    std::sort(ids.begin(), ids.end());
  };
  by_position(m.train);
  by_position(m.val);
  by_position(m.test);
  return m;
}

const Scene& Dataset::find(const std::string& id) const {
  for (const auto& s : scenes)
    if (s.id == id) return s;
  throw DataError("unknown scene id '" + id + "'");
}

std::vector<Scene> Dataset::split(const std::string& name) const {
  const std::vector<std::string>* ids = nullptr;
  if (name == "train") {
    ids = &manifest.train;
  } else if (name == "val") {
    ids = &manifest.val;
  } else if (name == "test") {
    ids = &manifest.test;
  } else {
    throw DataError("unknown split '" + name + "'");
  }
  std::vector<Scene> out;
  out.reserve(ids->size());
  for (const auto& id : *ids) out.push_back(find(id));
  return out;
}

Dataset build_dataset(const GenParams& params, std::size_t count) {
  Dataset d;
  d.params = params;
  d.scenes = generate_corpus(params, count);
  d.manifest = stratified_split(d.scenes, params.seed);
  std::vector<Scene> train;
  for (const auto& id : d.manifest.train) train.push_back(d.find(id));
  d.stats = compute_norm_stats(train);
  return d;
}

void write_dataset(const Dataset& d, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "scenes");
  for (const auto& sc : d.scenes) {
    const fs::path sd = fs::path(dir) / "scenes" / sc.id;
    fs::create_directories(sd);
    const Shape hw{sc.height, sc.width};
    io::write_tensor_file((sd / "sar.bin").string(), {kSarBands, sc.height, sc.width}, sc.sar);
    io::write_tensor_file((sd / "msi.bin").string(), {kMsiBands, sc.height, sc.width}, sc.msi);
    io::write_tensor_file((sd / "validity.bin").string(), hw, sc.validity);
    io::write_tensor_file((sd / "label.bin").string(), hw, sc.label);
  }
  nlohmann::json stats = {{"bands", {"VV", "VH", "Red", "Green", "Blue", "NIR"}},
                          {"mean", d.stats.mean},
                          {"std", d.stats.std}};
  io::write_text_atomic((fs::path(dir) / "norm_stats.json").string(), stats.dump(2) + "\n");
  const auto& m = d.manifest;
  nlohmann::json man = {
      {"version", kFormatVersion},
      {"seed", m.seed},
      {"gen_params", d.params},
      {"stratified", m.stratified},
      {"warning", m.warning},
      {"counts", {{"train", m.train.size()}, {"val", m.val.size()}, {"test", m.test.size()}, {"total", m.total()}}},
      {"splits", {{"train", m.train}, {"val", m.val}, {"test", m.test}}}};
  io::write_text_atomic((fs::path(dir) / "manifest.json").string(), man.dump(2) + "\n");
}

Dataset read_dataset(const std::string& dir) {
  Dataset d;
  nlohmann::json man, stats;
  try {
    man = nlohmann::json::parse(io::read_text((fs::path(dir) / "manifest.json").string()));
    stats = nlohmann::json::parse(io::read_text((fs::path(dir) / "norm_stats.json").string()));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(dir + ": malformed dataset metadata: " + e.what());
  }
  try {
    const int version = man.at("version").get<int>();
    if (version != kFormatVersion) {
      throw DataError(dir + ": dataset format version " + std::to_string(version) + ", expected " +
                      std::to_string(kFormatVersion));
    }
    d.params = man.at("gen_params").get<GenParams>();
    d.manifest.seed = man.at("seed").get<std::uint64_t>();
    d.manifest.stratified = man.at("stratified").get<bool>();
    d.manifest.warning = man.at("warning").get<std::string>();
    d.manifest.train = man.at("splits").at("train").get<std::vector<std::string>>();
    d.manifest.val = man.at("splits").at("val").get<std::vector<std::string>>();
    d.manifest.test = man.at("splits").at("test").get<std::vector<std::string>>();
    const auto& counts = man.at("counts");
    if (counts.at("train").get<std::size_t>() != d.manifest.train.size() ||
        counts.at("val").get<std::size_t>() != d.manifest.val.size() ||
        counts.at("test").get<std::size_t>() != d.manifest.test.size()) {
      throw DataError(dir + ": manifest counts disagree with split lists");
    }
    d.stats.mean = stats.at("mean").get<std::array<double, kSarBands + kMsiBands>>();
    d.stats.std = stats.at("std").get<std::array<double, kSarBands + kMsiBands>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(dir + ": malformed dataset metadata: " + e.what());
  }

  std::vector<std::string> ids;
  for (const auto* split : {&d.manifest.train, &d.manifest.val, &d.manifest.test})
    ids.insert(ids.end(), split->begin(), split->end());
  std::sort(ids.begin(), ids.end());
  for (const auto& id : ids) {
    const fs::path sd = fs::path(dir) / "scenes" / id;
    Scene sc;
    sc.id = id;
    try {
      auto sar = io::read_tensor_file((sd / "sar.bin").string());
      auto msi = io::read_tensor_file((sd / "msi.bin").string());
      auto val = io::read_tensor_file((sd / "validity.bin").string());
      auto lab = io::read_tensor_file((sd / "label.bin").string());
      if (sar.shape.size() != 3 || sar.shape[0] != kSarBands || msi.shape.size() != 3 || msi.shape[0] != kMsiBands ||
          sar.dtype != io::DType::f32 || msi.dtype != io::DType::f32 || val.dtype != io::DType::u8 ||
          lab.dtype != io::DType::u8)
        throw DataError("unexpected raster layout");
      sc.height = sar.shape[1];
      sc.width = sar.shape[2];
      const Shape hw{sc.height, sc.width};
      if (msi.shape[1] != sc.height || msi.shape[2] != sc.width || val.shape != hw || lab.shape != hw)
        throw DataError("raster extents disagree");
      sc.sar = std::move(sar.f32);
      sc.msi = std::move(msi.f32);
      sc.validity = std::move(val.u8);
      sc.label = std::move(lab.u8);
      for (auto v : sc.validity)
        if (v > 1) throw DataError("validity raster is not binary");
      for (auto v : sc.label)
        if (v > 1) throw DataError("label raster is not binary");
    } catch (const DataError& e) {
      throw DataError("scene " + id + ": " + e.what());
    }
    d.scenes.push_back(std::move(sc));
  }
  return d;
}

}  // namespace smagnet::data
