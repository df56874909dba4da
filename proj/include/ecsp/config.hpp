#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"

namespace ecsp {

/// Flat run configuration. The on-disk form is a JSON object whose keys
/// are exactly the dotted names below; unknown keys are rejected.
struct RunConfig {
  // encoder.*
  std::string encoder_kind = "toy";  // "toy" | "pretrained"
  std::string encoder_model_id;      // pretrained only
  int encoder_hidden_dim = 64;       // toy only
  int encoder_max_positions = 512;
  bool encoder_trainable = true;

  // span.*
  int span_max_len = 20;
  int span_phi_dim = 25;
  std::string span_candidates = "all";  // "all" | "clauses"

  // pair.*
  int pair_psi_dim = 50;
  int pair_dist_buckets = 64;
  bool pair_use_localized_context = true;

  // train.*
  double train_peak_lr = 5e-5;
  double train_warmup_fraction = 0.1;
  std::int64_t train_total_steps = 0;  // mandatory for training
  double train_dropout = 0.1;
  int train_batch_size = 1;
  int train_patience_evals = 20;
  std::int64_t train_eval_interval_steps = 0;  // 0 = one pass over the training docs
  std::uint64_t train_seed = 42;
  double train_span_loss_weight = 1.0;
  double train_pair_loss_weight = 1.0;
  double train_neg_downsample = 0.0;  // 0 = keep every negative candidate
  double train_dev_fraction = 0.1;    // 0 = evaluate on the training set

  /// Throws ConfigError on out-of-range values or unknown enum strings.
  void validate() const;

  /// Additional checks required before training (total_steps present, ...).
  void validate_for_training() const;

  nlohmann::ordered_json to_json() const;
  static RunConfig from_json(const nlohmann::ordered_json& obj);
};

RunConfig load_config(const std::string& path);

/// Applies one "key=value" override (CLI flag form) on top of a config.
void apply_override(RunConfig& config, const std::string& key_value);

}  // namespace ecsp
