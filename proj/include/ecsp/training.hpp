#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ecsp/config.hpp"
#include "ecsp/corpus.hpp"
#include "ecsp/model.hpp"
#include "ecsp/spans.hpp"

namespace ecsp {

/// Optimization schedule knobs, lifted out of the flat run config.
struct TrainConfig {
  double peak_lr = 5e-5;
  double warmup_fraction = 0.1;
  std::int64_t total_steps = 0;
  double dropout = 0.1;
  int batch_size = 1;
  int patience_evals = 20;
  std::int64_t eval_interval_steps = 0;  // 0 = one pass over the training docs
  std::uint64_t seed = 42;
  double span_loss_weight = 1.0;
  double pair_loss_weight = 1.0;
  double neg_downsample = 0.0;
  double dev_fraction = 0.1;

  static TrainConfig from_run_config(const RunConfig& config);
};

/// Linear warmup from 0 to peak, then linear decay to 0 at total_steps.
double lr_at(std::int64_t step, const TrainConfig& config);

/// Data irregularities counted while building training signals.
struct DataWarnings {
  std::int64_t gold_spans_unrepresentable = 0;  // longer than max_len or otherwise uncovered
  std::int64_t cross_window_pairs = 0;          // emotion and cause in different windows
  std::int64_t dual_role_spans = 0;             // span annotated both emotion and cause

  DataWarnings& operator+=(const DataWarnings& o) {
    gold_spans_unrepresentable += o.gold_spans_unrepresentable;
    cross_window_pairs += o.cross_window_pairs;
    dual_role_spans += o.dual_role_spans;
    return *this;
  }
};

/// A candidate is emotion/cause only when its boundaries exactly equal a
/// gold span of that role; everything else is none. A span annotated
/// with both roles trains as emotion.
struct SpanLabelAssignment {
  std::vector<SpanType> labels;
  DataWarnings warnings;
};
SpanLabelAssignment assign_span_labels(const Document& doc,
                                       const std::vector<CandidateSpan>& candidates);

/// Teacher-forced pair set: gold emotions x gold causes; annotated
/// combinations keep their category, the rest train as none (= K).
struct PairLabel {
  SpanRef emotion;
  SpanRef cause;
  int label = 0;
};
std::vector<PairLabel> assign_pair_labels(const Document& doc,
                                          const std::map<std::string, int>& category_index);

/// span_w * mean-CE(spans) + pair_w * mean-CE(pairs); the pair term is 0
/// when the pair set is empty. Rows are probability distributions.
double joint_loss(const Eigen::MatrixXd& span_probs, const std::vector<int>& span_labels,
                  const Eigen::MatrixXd& pair_probs, const std::vector<int>& pair_labels,
                  double span_weight, double pair_weight);

struct LossOptions {
  double span_weight = 1.0;
  double pair_weight = 1.0;
  double dropout = 0.0;
  double neg_downsample = 0.0;
  bool with_grad = false;
};

struct LossBreakdown {
  double total = 0.0;
  double span_ce = 0.0;  // mean over candidates
  double pair_ce = 0.0;  // mean over training pairs
  std::int64_t span_items = 0;
  std::int64_t pair_items = 0;
  DataWarnings warnings;
};

/// Forward (and optionally backward) pass of the joint objective for one
/// document; gradients accumulate into the model's grad buffers.
LossBreakdown document_loss(Model& model, const Document& doc, const LossOptions& options,
                            Rng& rng);

class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<ParamRef> params, double beta1 = 0.9, double beta2 = 0.999,
                double epsilon = 1e-8);
  void step(double lr);

 private:
  std::vector<ParamRef> params_;
  std::vector<Eigen::MatrixXd> m_, v_;
  double beta1_, beta2_, epsilon_;
  std::int64_t t_ = 0;
};

/// One JSON-serializable line of the training log.
using TrainLogger = std::function<void(const std::string& json_line)>;

struct TrainResult {
  Model model;  // best-dev parameters restored
  std::int64_t best_step = 0;
  double best_dev_f1 = 0.0;
  std::int64_t steps_run = 0;
  std::int64_t evals_run = 0;
  DataWarnings warnings;
};

/// Adam at the configured batch size with the warmup/decay schedule,
/// dev evaluation on ECSP F1 every eval interval and early stopping
/// after `patience_evals` evaluations without improvement. The dev set
/// is a seeded split of the training documents (dev_fraction = 0 means
/// evaluate on the training set itself). Throws TrainError on empty
/// input or non-finite loss.
TrainResult train(const Corpus& train_docs, const RunConfig& config,
                  std::vector<std::string> categories, const TrainLogger& logger = nullptr);

}  // namespace ecsp
