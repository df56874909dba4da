#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "ecsp/corpus.hpp"
#include "ecsp/encoder.hpp"
#include "ecsp/nn.hpp"

namespace ecsp {

/// Span type ids double as logit column order; the select tie-break
/// (emotion > cause > none) falls out of first-maximum scanning.
enum class SpanType : int { emotion = 0, cause = 1, none = 2 };
inline constexpr int kNumSpanTypes = 3;

/// Candidate unit of extraction, inclusive token indices.
struct CandidateSpan {
  int start = 0;
  int end = 0;

  int length() const { return end - start + 1; }
  SpanRef ref() const { return SpanRef{start, end}; }

  friend bool operator==(const CandidateSpan&, const CandidateSpan&) = default;
  friend auto operator<=>(const CandidateSpan&, const CandidateSpan&) = default;
};

/// Shared span-type classifier: one weight matrix for every candidate,
/// plus the learned span-length embedding table.
struct SpanHeadParams {
  SpanHeadParams(int encoder_dim, int phi_dim, int max_len);

  int encoder_dim = 0;
  int phi_dim = 0;
  int max_len = 0;

  Eigen::MatrixXd weight, weight_grad;  // (3d + phi_dim, 3)
  Eigen::MatrixXd bias, bias_grad;      // (3, 1)
  Eigen::MatrixXd phi, phi_grad;        // (max_len, phi_dim); row l-1 = length l

  int rep_dim() const { return 3 * encoder_dim + phi_dim; }
  void init_parameters(std::uint64_t seed);
  std::vector<ParamRef> parameters();
  void zero_grads();
};

/// All spans of length <= max_len ordered by (start, end); the count is
/// sum over l of (n - l + 1), linear in n for fixed max_len.
std::vector<CandidateSpan> enumerate_spans(int num_tokens, int max_len);

/// Closed-form candidate count (the enumeration oracle's reference).
std::int64_t span_count(int num_tokens, int max_len);

/// Features of one represented span: g = [global; sum; max; phi(len)],
/// plus which row attained each max coordinate (needed for backward).
struct SpanFeatures {
  Eigen::VectorXd g;
  std::vector<int> max_row;  // per encoder dim, row index relative to the encoding
};

/// `span` indices are relative to `encoding` rows. Throws when the span
/// is out of range or longer than the Phi table unless `clamp_length`
/// (clause-candidate mode) is set.
SpanFeatures represent_span(const CandidateSpan& span, const TokenEncoding& encoding,
                            const SpanHeadParams& params, bool clamp_length = false);

/// Softmax over {emotion, cause, none} type scores.
Eigen::Vector3d classify_span(const Eigen::VectorXd& rep, const SpanHeadParams& params);

struct SelectedSpans {
  std::vector<CandidateSpan> emotions;
  std::vector<CandidateSpan> causes;
};

/// Keeps candidates whose argmax type is not none; exact ties resolve
/// emotion > cause > none.
SelectedSpans select_spans(const std::vector<CandidateSpan>& candidates,
                           const Eigen::MatrixXd& type_probs);

/// Candidates restricted to one window: every sub-span in "all" mode,
/// exactly the clause spans in "clauses" mode. Spans returned in
/// document-absolute indices.
std::vector<CandidateSpan> candidates_for_window(const SpanRef& window,
                                                 const std::vector<ClauseSpan>& clauses,
                                                 const std::string& mode, int max_len);

}  // namespace ecsp
