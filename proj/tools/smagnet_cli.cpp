// Command-line front end for data generation, training, evaluation and analysis.
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "smagnet/errors.hpp"
#include "smagnet/experiment.hpp"

namespace {

enum Exit { kOk = 0, kUsage = 2, kConfig = 3, kData = 4, kNumeric = 5 };

int fail(Exit code, const std::string& kind, const std::string& message) {
  nlohmann::json j{{"error", kind}, {"exit_code", static_cast<int>(code)}, {"message", message}};
  std::cerr << j.dump() << std::endl;
  return code;
}

std::vector<double> parse_ratios(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(cell, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != cell.size()) throw smagnet::ConfigError("bad ratio '" + cell + "'");
    out.push_back(v);
  }
  if (out.empty()) throw smagnet::ConfigError("--ratios is empty");
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace smagnet;
  CLI::App app{"SMAGNet: gated SAR/MSI fusion for water segmentation on synthetic scenes"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  std::string out_dir, data_dir, run_dir, config_path, scene_id, ratios_text = "0,25,50,75,100",
                                                                   pattern = "band", a_csv, b_csv, column = "iou",
                                                                   model_kind, fusion_mode, report_out;
  std::size_t scenes = 384, size = 64;
  std::uint64_t seed = 7;
  std::uint64_t train_seed = 0;
  bool no_mask = false, independent = false, quiet = false;
  std::vector<std::string> runs;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset directory");
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--scenes", scenes, "Number of scenes")->capture_default_str();
  gen->add_option("--size", size, "Scene side length (multiple of 32)")->capture_default_str();
  gen->add_option("--seed", seed, "Master seed")->capture_default_str();

  auto* tr = app.add_subcommand("train", "Train a model into a run directory");
  tr->add_option("--config", config_path, "RunConfig JSON")->required();
  tr->add_option("--out", out_dir, "Run directory")->required();
  tr->add_option("--data", data_dir, "Dataset directory (overrides data.dir)");
  tr->add_option("--model", model_kind, "smagnet | unet-sar | unet-concat")
      ->check(CLI::IsMember({"smagnet", "unet-sar", "unet-concat"}));
  tr->add_flag("--no-spatial-mask", no_mask, "Replace the spatial mask with ones");
  tr->add_flag("--independent-decoders", independent, "Separate decoders for the fused and SAR paths");
  tr->add_option("--fusion-mode", fusion_mode, "complementary | independent | cross")
      ->check(CLI::IsMember({"complementary", "independent", "cross"}));
  auto* seed_opt = tr->add_option("--seed", train_seed, "Training seed (overrides train.seed)");
  tr->add_flag("--quiet", quiet, "No per-epoch progress");

  auto* ev = app.add_subcommand("eval", "Evaluate a run on the test split");
  ev->add_option("--run", run_dir, "Run directory")->required();
  ev->add_option("--data", data_dir, "Dataset directory")->required();

  auto* sw = app.add_subcommand("sweep-missing", "Robustness sweep over MSI missingness ratios");
  sw->add_option("--run", run_dir, "Run directory")->required();
  sw->add_option("--data", data_dir, "Dataset directory")->required();
  sw->add_option("--ratios", ratios_text, "Comma-separated percentages")->capture_default_str();
  sw->add_option("--pattern", pattern, "band | blobs")->check(CLI::IsMember({"band", "blobs"}))->capture_default_str();

  auto* st = app.add_subcommand("stats", "Mann-Whitney U test between two per-scene CSV files");
  st->add_option("--a", a_csv, "First CSV")->required();
  st->add_option("--b", b_csv, "Second CSV")->required();
  st->add_option("--column", column, "Column to compare")->capture_default_str();

  auto* dg = app.add_subcommand("diagnose", "Export gate maps and the decoder MSE map for one scene");
  dg->add_option("--run", run_dir, "Run directory")->required();
  dg->add_option("--scene", scene_id, "Scene id")->required();
  dg->add_option("--data", data_dir, "Dataset directory (default: the run's data source)");

  auto* rp = app.add_subcommand("report", "Comparison table across run directories");
  rp->add_option("--runs", runs, "Run directories")->required();
  rp->add_option("--out", report_out, "Output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail(kUsage, "usage", e.what());
  }

  try {
    if (gen->parsed()) {
      const auto d = experiment::gen_data(out_dir, scenes, size, seed);
      nlohmann::json j{{"out", out_dir},
                       {"scenes", d.scenes.size()},
                       {"train", d.manifest.train.size()},
                       {"val", d.manifest.val.size()},
                       {"test", d.manifest.test.size()}};
      std::cout << j.dump() << std::endl;
    } else if (tr->parsed()) {
      auto config = RunConfig::load(config_path);
      if (!data_dir.empty()) config.data.dir = data_dir;
      if (!model_kind.empty()) config.model.kind = nn::parse_model_kind(model_kind);
      if (!fusion_mode.empty()) config.model.fusion = nn::parse_fusion_mode(fusion_mode);
      if (no_mask) config.model.spatial_mask = false;
      if (independent) config.model.shared_decoder = false;
      if (seed_opt->count() > 0) config.train.seed = train_seed;
      config.model.seed = config.train.seed;
      if (!config.model.dual() && (no_mask || independent || !fusion_mode.empty()))
        throw ConfigError("fusion and decoder switches apply only to --model smagnet");
      config.validate();
      experiment::Log log;
      if (!quiet) log = [](const std::string& line) { std::cerr << line << std::endl; };
      const auto r = experiment::train_run(config, out_dir, log);
      nlohmann::json j{{"out", out_dir},
                       {"best_epoch", r.best_epoch},
                       {"best_val_loss", r.best_val_loss},
                       {"threshold", r.threshold.threshold}};
      std::cout << j.dump() << std::endl;
    } else if (ev->parsed()) {
      const auto r = experiment::eval_run(run_dir, data_dir);
      const auto m = eval::metrics(r.fused);
      std::cout << nlohmann::json{{"iou", m.iou}, {"precision", m.precision}, {"recall", m.recall}, {"oa", m.oa}}.dump()
                << std::endl;
    } else if (sw->parsed()) {
      const auto r = experiment::sweep_run(run_dir, data_dir, parse_ratios(ratios_text), eval::parse_pattern(pattern));
      std::cout << r.csv();
    } else if (st->parsed()) {
      const auto r = experiment::compare_columns(a_csv, b_csv, column);
      std::cout << nlohmann::json{{"u", r.u}, {"p", r.p}, {"exact", r.exact}}.dump() << std::endl;
    } else if (dg->parsed()) {
      const auto d = experiment::diagnose_run(run_dir, scene_id, data_dir);
      double max_mse = 0;
      for (float v : d.mse) max_mse = std::max(max_mse, static_cast<double>(v));
      std::cout << nlohmann::json{{"scene", scene_id}, {"levels", d.smg.size()}, {"max_mse", max_mse}}.dump()
                << std::endl;
    } else if (rp->parsed()) {
      io::write_text_atomic(report_out, experiment::report(runs));
      std::cout << nlohmann::json{{"out", report_out}, {"runs", runs.size()}}.dump() << std::endl;
    }
  } catch (const ConfigError& e) {
    return fail(kConfig, "config", e.what());
  } catch (const NumericError& e) {
    return fail(kNumeric, "numeric", e.what());
  } catch (const DataError& e) {
    return fail(kData, "data", e.what());
  } catch (const std::invalid_argument& e) {
    return fail(kConfig, "config", e.what());
  } catch (const std::exception& e) {
    return fail(kData, "data", e.what());
  }
  return kOk;
}
