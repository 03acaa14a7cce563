#include "smagnet/config.hpp"

#include "smagnet/errors.hpp"
#include "smagnet/serialize.hpp"

namespace smagnet {

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  nlohmann::json d = data.params;
  d["dir"] = data.dir;
  d["scenes"] = data.scenes;
  j["data"] = d;
  nlohmann::json m = model;
  m.erase("seed");  // the training seed drives initialization
  j["model"] = m;
  j["train"] = train;
  j["eval"] = {{"batch_size", eval.batch_size},
               {"ratios", eval.ratios},
               {"pattern", eval.pattern},
               {"sweep_seeds", eval.sweep_seeds},
               {"seed", eval.seed}};
  return j;
}

namespace {

bool is_integer(const nlohmann::json& v) { return v.is_number_integer() || v.is_number_unsigned(); }

// Checks `user` against the shape of `defaults` and overlays it.
void overlay(nlohmann::json& defaults, const nlohmann::json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError("config: '" + path + "' must be an object");
  for (const auto& [key, value] : user.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!defaults.contains(key)) throw ConfigError("config: unknown key '" + where + "'");
    auto& slot = defaults[key];
    if (slot.is_object()) {
      overlay(slot, value, where);
      continue;
    }
    bool ok;
    if (slot.is_boolean()) {
      ok = value.is_boolean();
    } else if (slot.is_string()) {
      ok = value.is_string();
    } else if (slot.is_number_unsigned() || slot.is_number_integer()) {
      ok = is_integer(value) && !(value.is_number_integer() && value.get<std::int64_t>() < 0);
    } else if (slot.is_number()) {
      ok = value.is_number();
    } else if (slot.is_array()) {
      ok = value.is_array();
      if (ok)
        for (const auto& e : value) ok = ok && e.is_number();
    } else {
      ok = false;
    }
    if (!ok) throw ConfigError("config: '" + where + "' has the wrong type (expected like " + slot.dump() + ")");
    slot = value;
  }
}

}  // namespace

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  nlohmann::json merged = RunConfig{}.to_json();
  overlay(merged, j, "");
  RunConfig c;
  try {
    const auto& d = merged.at("data");
    c.data.params = d.get<data::GenParams>();
    c.data.dir = d.at("dir").get<std::string>();
    c.data.scenes = d.at("scenes").get<std::size_t>();
    nlohmann::json m = merged.at("model");
    m["seed"] = 0;
    c.model = m.get<nn::ModelConfig>();
    c.train = merged.at("train").get<train::TrainConfig>();
    c.model.seed = c.train.seed;
    const auto& e = merged.at("eval");
    c.eval.batch_size = e.at("batch_size").get<std::size_t>();
    c.eval.ratios = e.at("ratios").get<std::vector<double>>();
    c.eval.pattern = e.at("pattern").get<std::string>();
    c.eval.sweep_seeds = e.at("sweep_seeds").get<std::size_t>();
    c.eval.seed = e.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::string text;
  try {
    text = io::read_text(path);
  } catch (const DataError&) {
    throw ConfigError("config: cannot read " + path);
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

void RunConfig::validate() const {
  try {
    data.params.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: data: ") + e.what());
  }
  if (data.scenes == 0) throw ConfigError("config: data.scenes must be >= 1");
  if (data.params.size % 32 != 0) throw ConfigError("config: data.size must be a multiple of 32");
  train.validate();
  if (train.crop_size > data.params.size) throw ConfigError("config: train.crop_size exceeds data.size");
  if (eval.batch_size == 0) throw ConfigError("config: eval.batch_size must be >= 1");
  if (eval.ratios.empty()) throw ConfigError("config: eval.ratios must not be empty");
  for (double r : eval.ratios)
    if (!(r >= 0 && r <= 100)) throw ConfigError("config: eval.ratios must lie in [0,100]");
  if (eval.pattern != "band" && eval.pattern != "blobs") throw ConfigError("config: eval.pattern must be band or blobs");
  if (eval.sweep_seeds == 0) throw ConfigError("config: eval.sweep_seeds must be >= 1");
}

}  // namespace smagnet
