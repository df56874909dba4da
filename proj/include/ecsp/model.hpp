#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ecsp/config.hpp"
#include "ecsp/encoder.hpp"
#include "ecsp/pairing.hpp"
#include "ecsp/spans.hpp"

namespace ecsp {

inline constexpr int kCheckpointSchemaVersion = 1;

struct Checkpoint;

/// Everything inference needs: the encoder, both heads and the category
/// vocabulary (whose order is the pair-label order).
struct Model {
  RunConfig config;
  std::vector<std::string> categories;
  std::unique_ptr<Encoder> encoder;
  SpanHeadParams span_head;
  PairHeadParams pair_head;

  /// Fresh model with seeded initialization (seed = config.train_seed).
  static Model create(const RunConfig& config, std::vector<std::string> categories);

  int category_index(const std::string& category) const;  // -1 if unknown

  /// Parameters the optimizer updates (encoder included when trainable).
  std::vector<ParamRef> trainable_parameters();
  /// Every tensor that must round-trip through a checkpoint.
  std::vector<ParamRef> state_tensors();
  void zero_grads();

  /// Deep copy of all state tensor values, restorable later.
  std::vector<Eigen::MatrixXd> snapshot_state();
  void restore_state(const std::vector<Eigen::MatrixXd>& snapshot);

 private:
  friend Checkpoint load_checkpoint(const std::string& dir);

  Model(RunConfig config, std::vector<std::string> categories, std::unique_ptr<Encoder> encoder);
};

/// On-disk checkpoint: metadata.json next to an opaque parameter blob.
struct Checkpoint {
  Model model;
  std::int64_t step = 0;
  double dev_f1 = 0.0;
};

void save_checkpoint(const std::string& dir, Model& model, std::int64_t step, double dev_f1);
Checkpoint load_checkpoint(const std::string& dir);

}  // namespace ecsp
