#include "smagnet/experiment.hpp"

#include <filesystem>
#include <iomanip>
#include <sstream>

#include "smagnet/errors.hpp"

namespace fs = std::filesystem;

namespace smagnet::experiment {

namespace {

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir + ": " + ec.message());
}

nlohmann::json read_json(const std::string& path) {
  try {
    return nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": malformed JSON: " + e.what());
  }
}

void write_json(const std::string& path, const nlohmann::json& j) { io::write_text_atomic(path, j.dump(2) + "\n"); }

// Records artifact checksums; other fields are kept.
void record_artifacts(const std::string& run_dir, const std::vector<std::string>& names) {
  const auto path = join(run_dir, "run.json");
  nlohmann::json run = fs::exists(path) ? read_json(path) : nlohmann::json::object();
  for (const auto& n : names) run["artifacts"][n] = io::file_digest(join(run_dir, n));
  write_json(path, run);
}

nlohmann::json stats_json(const data::NormStats& s) { return {{"mean", s.mean}, {"std", s.std}}; }

data::NormStats stats_from_json(const nlohmann::json& j) {
  data::NormStats s;
  s.mean = j.at("mean").get<decltype(s.mean)>();
  s.std = j.at("std").get<decltype(s.std)>();
  return s;
}

std::vector<data::Scene> test_split(const std::string& data_dir, const RunConfig& config) {
  const auto d = data_dir.empty() ? load_data(config) : data::read_dataset(data_dir);
  return d.split("test");
}

}  // namespace

data::Dataset gen_data(const std::string& out_dir, std::size_t scenes, std::size_t size, std::uint64_t seed) {
  data::GenParams p;
  p.size = size;
  p.seed = seed;
  try {
    p.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (scenes == 0) throw ConfigError("--scenes must be >= 1");
  auto d = data::build_dataset(p, scenes);
  ensure_dir(out_dir);
  data::write_dataset(d, out_dir);
  return d;
}

data::Dataset load_data(const RunConfig& config) {
  if (!config.data.dir.empty()) return data::read_dataset(config.data.dir);
  return data::build_dataset(config.data.params, config.data.scenes);
}

train::TrainResult train_run(const RunConfig& config, const std::string& out_dir, const Log& log) {
  config.validate();
  const auto dataset = load_data(config);
  ensure_dir(out_dir);
  write_json(join(out_dir, "config.json"), config.to_json());
  nn::Model<float> model(config.model);
  auto result = train::fit(model, config.train, dataset, [&](const train::EpochRecord& r) {
    if (!log) return;
    std::ostringstream os;
    os << std::setprecision(5) << "epoch " << r.epoch << " train " << r.train_loss << " val " << r.val_loss_total
       << " (sar " << r.val_loss_sar << ", fused " << r.val_loss_fused << ")";
    log(os.str());
  });
  io::write_text_atomic(join(out_dir, "history.csv"), train::history_csv(result.history));
  auto ckpt = train::make_checkpoint(model, config.train, result);
  ckpt.meta["norm_stats"] = stats_json(dataset.stats);
  ckpt.meta["fill_value"] = dataset.params.fill_value;
  io::write_container(join(out_dir, "checkpoint.bin"), ckpt);
  nlohmann::json run;
  run["seed"] = config.train.seed;
  run["model"] = config.model;
  run["best_epoch"] = result.best_epoch;
  run["best_val_loss"] = result.best_val_loss;
  run["threshold"] = result.threshold.threshold;
  run["threshold_degenerate"] = result.threshold.degenerate;
  run["dataset"] = {{"scenes", dataset.scenes.size()},
                    {"train", dataset.manifest.train.size()},
                    {"val", dataset.manifest.val.size()},
                    {"test", dataset.manifest.test.size()},
                    {"params", dataset.params}};
  write_json(join(out_dir, "run.json"), run);
  record_artifacts(out_dir, {"config.json", "history.csv", "checkpoint.bin"});
  return result;
}

LoadedRun load_run(const std::string& run_dir) {
  const auto ckpt_path = join(run_dir, "checkpoint.bin");
  if (!fs::exists(ckpt_path)) throw DataError("no checkpoint in " + run_dir);
  auto config = RunConfig::from_json(read_json(join(run_dir, "config.json")));
  auto ckpt = io::read_container(ckpt_path);
  auto model = train::load_model(ckpt);
  LoadedRun r{std::move(config), std::move(ckpt), std::move(model), {}, 0.5};
  try {
    r.stats = stats_from_json(r.checkpoint.meta.at("norm_stats"));
    r.threshold = r.checkpoint.meta.at("threshold").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(ckpt_path + ": incomplete metadata: " + e.what());
  }
  return r;
}

eval::EvalResult eval_run(const std::string& run_dir, const std::string& data_dir) {
  auto run = load_run(run_dir);
  const auto test = test_split(data_dir, run.config);
  const float fill = run.config.data.params.fill_value;
  auto res = eval::evaluate(run.model, test, run.stats, fill, run.threshold, run.config.eval.batch_size);
  auto summary = res.summary(run.config.model.dual());
  summary["model"] = run.config.model;
  write_json(join(run_dir, "eval.json"), summary);
  io::write_text_atomic(join(run_dir, "per_scene.csv"), res.per_scene_csv());
  io::write_text_atomic(join(run_dir, "hist_ndvi.csv"), res.hist_ndvi.csv());
  io::write_text_atomic(join(run_dir, "hist_nir.csv"), res.hist_nir.csv());
  record_artifacts(run_dir, {"eval.json", "per_scene.csv", "hist_ndvi.csv", "hist_nir.csv"});
  return res;
}

eval::SweepResult sweep_run(const std::string& run_dir, const std::string& data_dir, const std::vector<double>& ratios,
                            eval::MissingPattern pattern) {
  auto run = load_run(run_dir);
  std::vector<double> fractions;
  for (double r : ratios) {
    if (!(r >= 0 && r <= 100)) throw ConfigError("ratios must lie in [0,100]");
    fractions.push_back(r / 100.0);
  }
  const auto test = test_split(data_dir, run.config);
  auto res = eval::robustness_sweep(run.model, test, run.stats, run.config.data.params.fill_value, run.threshold,
                                    fractions, pattern, run.config.eval.seed, run.config.eval.sweep_seeds);
  io::write_text_atomic(join(run_dir, "sweep.csv"), res.csv());
  io::write_text_atomic(join(run_dir, "sweep_per_scene.csv"), res.per_scene_csv());
  record_artifacts(run_dir, {"sweep.csv", "sweep_per_scene.csv"});
  return res;
}

eval::Diagnostics diagnose_run(const std::string& run_dir, const std::string& scene_id, const std::string& data_dir) {
  auto run = load_run(run_dir);
  if (!run.config.model.dual()) throw ConfigError("diagnose needs a smagnet run, not " + nn::model_kind_name(run.config.model.kind));
  const auto dataset = data_dir.empty() ? load_data(run.config) : data::read_dataset(data_dir);
  const auto& scene = dataset.find(scene_id);
  auto d = eval::diagnose(run.model, scene, run.stats, run.config.data.params.fill_value);
  auto c = d.to_container();
  c.meta["scene"] = scene_id;
  c.meta["levels"] = d.smg.size();
  const std::string name = "diagnostics_" + scene_id + ".bin";
  io::write_container(join(run_dir, name), c);
  record_artifacts(run_dir, {name});
  return d;
}

std::vector<double> read_csv_column(const std::string& path, const std::string& column) {
  std::istringstream is(io::read_text(path));
  std::string line;
  if (!std::getline(is, line)) throw DataError(path + ": empty CSV");
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
  };
  const auto header = split(line);
  std::size_t col = header.size();
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == column) col = i;
  if (col == header.size()) throw DataError(path + ": no column '" + column + "'");
  std::vector<double> values;
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = split(line);
    if (col >= cells.size()) throw DataError(path + ": row " + std::to_string(row) + " is short");
    try {
      values.push_back(std::stod(cells[col]));
    } catch (const std::exception&) {
      throw DataError(path + ": row " + std::to_string(row) + " has a non-numeric '" + column + "'");
    }
  }
  if (values.empty()) throw DataError(path + ": no data rows");
  return values;
}

eval::MannWhitneyResult compare_columns(const std::string& csv_a, const std::string& csv_b, const std::string& column) {
  const auto a = read_csv_column(csv_a, column);
  const auto b = read_csv_column(csv_b, column);
  return eval::mannwhitney_u(a, b);
}

std::string report(const std::vector<std::string>& run_dirs) {
  std::ostringstream os;
  os << "run,model,fusion_mode,spatial_mask,shared_decoder,seed,best_epoch,threshold,oa,precision,recall,iou,iou_sar,"
        "sweep_first,sweep_last,delta\n";
  os << std::setprecision(6);
  for (const auto& dir : run_dirs) {
    const auto config = RunConfig::from_json(read_json(join(dir, "config.json")));
    const auto run = read_json(join(dir, "run.json"));
    const auto& m = config.model;
    os << fs::path(dir).filename().string() << ',' << nn::model_kind_name(m.kind) << ','
       << nn::fusion_mode_name(m.fusion) << ',' << m.spatial_mask << ',' << m.shared_decoder << ','
       << config.train.seed << ',' << run.value("best_epoch", 0) << ',' << run.value("threshold", 0.5) << ',';
    const auto eval_path = join(dir, "eval.json");
    if (fs::exists(eval_path)) {
      const auto e = read_json(eval_path);
      const auto& f = e.at("fused").at("metrics");
      os << f.at("oa").get<double>() << ',' << f.at("precision").get<double>() << ','
         << f.at("recall").get<double>() << ',' << f.at("iou").get<double>() << ',';
      if (e.contains("sar")) os << e.at("sar").at("metrics").at("iou").get<double>();
      os << ',';
    } else {
      os << ",,,,,";
    }
    const auto sweep_path = join(dir, "sweep.csv");
    if (fs::exists(sweep_path)) {
      const auto means = read_csv_column(sweep_path, "mean_iou");
      // The last row of sweep.csv is the delta row.
      if (means.size() >= 2) os << means.front() << ',' << means[means.size() - 2] << ',' << means.back();
      else os << ",,";
    } else {
      os << ",,";
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace smagnet::experiment
