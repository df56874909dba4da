#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "ecsp/corpus.hpp"
#include "ecsp/encoder.hpp"
#include "ecsp/spans.hpp"

namespace ecsp {

struct Model;

/// Directed candidate pairing; both spans come from the same window.
struct PairCandidate {
  CandidateSpan emotion;
  CandidateSpan cause;

  friend bool operator==(const PairCandidate&, const PairCandidate&) = default;
};

/// Pair classifier over the category vocabulary plus a trailing "none"
/// label, with the learned inter-span distance embedding table.
struct PairHeadParams {
  PairHeadParams(int encoder_dim, int phi_dim, int psi_dim, int dist_buckets, int num_categories);

  int encoder_dim = 0;
  int phi_dim = 0;
  int psi_dim = 0;
  int dist_buckets = 0;
  int num_categories = 0;

  Eigen::MatrixXd weight, weight_grad;  // (rep_dim, num_labels)
  Eigen::MatrixXd bias, bias_grad;      // (num_labels, 1)
  Eigen::MatrixXd psi, psi_grad;        // (dist_buckets, psi_dim); row = clamped distance

  int rep_dim() const { return 8 * encoder_dim + 2 * phi_dim + psi_dim; }
  int num_labels() const { return num_categories + 1; }
  int none_label() const { return num_categories; }

  void init_parameters(std::uint64_t seed);
  std::vector<ParamRef> parameters();
  void zero_grads();
};

/// E-major Cartesian product: |result| = |E| * |C|.
std::vector<PairCandidate> cartesian_pairs(const std::vector<CandidateSpan>& emotions,
                                           const std::vector<CandidateSpan>& causes);

/// Features over the tokens strictly between the two spans. Empty or
/// overlapping ranges yield zero sum/max vectors and distance 0.
struct LocalizedContext {
  Eigen::VectorXd sum;       // (d)
  Eigen::VectorXd max;       // (d)
  Eigen::VectorXd psi;       // (psi_dim)
  int distance = 0;          // clamped to dist_buckets - 1
  int ctx_begin = 0;         // inclusive; empty when ctx_begin > ctx_end
  int ctx_end = -1;
  std::vector<int> max_row;  // per dim, row of the max (empty range -> empty)
};

/// Span indices are relative to `encoding` rows. The between-range is
/// position-based: swapping which span is emotion vs cause leaves the
/// localized context unchanged.
LocalizedContext localized_context(const PairCandidate& pair, const TokenEncoding& encoding,
                                   const PairHeadParams& params);

/// p = [g_emotion; g_cause; LC.sum; LC.max; LC.psi]; the LC block is
/// zeroed when `use_localized_context` is off.
Eigen::VectorXd pair_representation(const Eigen::VectorXd& g_emotion,
                                    const Eigen::VectorXd& g_cause, const LocalizedContext& lc,
                                    bool use_localized_context);

/// Softmax over categories + none.
Eigen::VectorXd classify_pair(const Eigen::VectorXd& pair_rep, const PairHeadParams& params);

/// Argmax label with exact ties resolved to none; among tied categories
/// the lowest vocabulary index wins.
int pair_argmax(const Eigen::VectorXd& probs, int none_label);

struct ExtractedPair {
  SpanRef emotion;
  SpanRef cause;
  std::string category;
  double score = 0.0;
};

/// Full inference result for one document: the selected span sets (the
/// single-role sub-task predictions) and the surviving classified pairs.
struct PipelineOutput {
  SelectedSpans selected;
  std::vector<ExtractedPair> pairs;
  int num_windows = 1;
};

/// encode -> enumerate -> classify spans -> select -> pair -> classify
/// pairs -> drop "none", sorted by (emotion.start, cause.start).
PipelineOutput run_pipeline(const Document& doc, const Model& model);

std::vector<ExtractedPair> extract_pairs(const Document& doc, const Model& model);

}  // namespace ecsp
