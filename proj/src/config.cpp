#include "ecsp/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "ecsp/errors.hpp"

namespace ecsp {

using json = nlohmann::ordered_json;

namespace {

struct Field {
  std::function<json(const RunConfig&)> get;
  std::function<void(RunConfig&, const json&)> set;
};

template <typename T>
T as(const json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (v.is_boolean()) return v.get<bool>();
      if (v.is_string()) {
        const std::string s = v.get<std::string>();
        if (s == "true") return true;
        if (s == "false") return false;
      }
      throw ConfigError("config key \"" + key + "\": expected a boolean");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("config key \"" + key + "\": expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("config key \"" + key + "\": expected a number");
      return v.get<double>();
    } else {
      if (!v.is_number_integer())
        throw ConfigError("config key \"" + key + "\": expected an integer");
      return v.get<T>();
    }
  } catch (const json::exception&) {
    throw ConfigError("config key \"" + key + "\": bad value");
  }
}

const std::map<std::string, Field>& field_table() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> t;
    auto add = [&t](const std::string& key, auto member) {
      using T = std::decay_t<decltype(std::declval<RunConfig>().*member)>;
      t[key] = Field{[member](const RunConfig& c) { return json(c.*member); },
                     [member, key](RunConfig& c, const json& v) { c.*member = as<T>(v, key); }};
    };
    add("encoder.kind", &RunConfig::encoder_kind);
    add("encoder.model_id", &RunConfig::encoder_model_id);
    add("encoder.hidden_dim", &RunConfig::encoder_hidden_dim);
    add("encoder.max_positions", &RunConfig::encoder_max_positions);
    add("encoder.trainable", &RunConfig::encoder_trainable);
    add("span.max_len", &RunConfig::span_max_len);
    add("span.phi_dim", &RunConfig::span_phi_dim);
    add("span.candidates", &RunConfig::span_candidates);
    add("pair.psi_dim", &RunConfig::pair_psi_dim);
    add("pair.dist_buckets", &RunConfig::pair_dist_buckets);
    add("pair.use_localized_context", &RunConfig::pair_use_localized_context);
    add("train.peak_lr", &RunConfig::train_peak_lr);
    add("train.warmup_fraction", &RunConfig::train_warmup_fraction);
    add("train.total_steps", &RunConfig::train_total_steps);
    add("train.dropout", &RunConfig::train_dropout);
    add("train.batch_size", &RunConfig::train_batch_size);
    add("train.patience_evals", &RunConfig::train_patience_evals);
    add("train.eval_interval_steps", &RunConfig::train_eval_interval_steps);
    add("train.seed", &RunConfig::train_seed);
    add("train.span_loss_weight", &RunConfig::train_span_loss_weight);
    add("train.pair_loss_weight", &RunConfig::train_pair_loss_weight);
    add("train.neg_downsample", &RunConfig::train_neg_downsample);
    add("train.dev_fraction", &RunConfig::train_dev_fraction);
    return t;
  }();
  return table;
}

}  // namespace

void RunConfig::validate() const {
  if (encoder_kind != "toy" && encoder_kind != "pretrained")
    throw ConfigError("encoder.kind must be \"toy\" or \"pretrained\"");
  if (encoder_kind == "pretrained" && encoder_model_id.empty())
    throw ConfigError("encoder.model_id is required when encoder.kind = pretrained");
  if (encoder_kind == "toy" && encoder_hidden_dim < 8)
    throw ConfigError("encoder.hidden_dim must be >= 8 for the toy encoder");
  if (encoder_max_positions < 1) throw ConfigError("encoder.max_positions must be >= 1");
  if (span_max_len < 1) throw ConfigError("span.max_len must be >= 1");
  if (span_phi_dim < 1) throw ConfigError("span.phi_dim must be >= 1");
  if (span_candidates != "all" && span_candidates != "clauses")
    throw ConfigError("span.candidates must be \"all\" or \"clauses\"");
  if (pair_psi_dim < 1) throw ConfigError("pair.psi_dim must be >= 1");
  if (pair_dist_buckets < 1) throw ConfigError("pair.dist_buckets must be >= 1");
  if (train_peak_lr <= 0) throw ConfigError("train.peak_lr must be positive");
  if (train_warmup_fraction < 0 || train_warmup_fraction >= 1)
    throw ConfigError("train.warmup_fraction must lie in [0,1)");
  if (train_dropout < 0 || train_dropout >= 1)
    throw ConfigError("train.dropout must lie in [0,1)");
  if (train_batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (train_patience_evals < 1) throw ConfigError("train.patience_evals must be >= 1");
  if (train_eval_interval_steps < 0)
    throw ConfigError("train.eval_interval_steps must be >= 0");
  if (train_span_loss_weight < 0 || train_pair_loss_weight < 0)
    throw ConfigError("loss weights must be non-negative");
  if (train_neg_downsample < 0 || train_neg_downsample > 1)
    throw ConfigError("train.neg_downsample must lie in [0,1]");
  if (train_dev_fraction < 0 || train_dev_fraction >= 1)
    throw ConfigError("train.dev_fraction must lie in [0,1)");
}

void RunConfig::validate_for_training() const {
  validate();
  if (train_total_steps < 1)
    throw ConfigError("config key \"train.total_steps\" is required for training");
}

json RunConfig::to_json() const {
  json obj;
  for (const auto& [key, field] : field_table()) obj[key] = field.get(*this);
  return obj;
}

RunConfig RunConfig::from_json(const json& obj) {
  if (!obj.is_object()) throw ConfigError("config must be a JSON object of flat dotted keys");
  RunConfig config;
  const auto& table = field_table();
  for (const auto& kv : obj.items()) {
    auto it = table.find(kv.key());
    if (it == table.end()) throw ConfigError("unknown config key \"" + kv.key() + "\"");
    it->second.set(config, kv.value());
  }
  config.validate();
  return config;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  json obj;
  try {
    in >> obj;
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  return RunConfig::from_json(obj);
}

void apply_override(RunConfig& config, const std::string& key_value) {
  auto eq = key_value.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must be key=value, got \"" + key_value + "\"");
  const std::string key = key_value.substr(0, eq);
  const std::string raw = key_value.substr(eq + 1);

  const auto& table = field_table();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key \"" + key + "\"");

  // Reuse the JSON setter: try to parse the value as JSON (numbers,
  // booleans), fall back to a plain string.
  json v;
  try {
    v = json::parse(raw);
    if (v.is_object() || v.is_array())
      throw ConfigError("override value for \"" + key + "\" must be scalar");
  } catch (const json::parse_error&) {
    v = raw;
  }
  it->second.set(config, v);
  config.validate();
}

}  // namespace ecsp
