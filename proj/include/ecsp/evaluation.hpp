#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ecsp/corpus.hpp"
#include "ecsp/pairing.hpp"
#include "json.hpp"

namespace ecsp {

struct Model;

struct MatchCounts {
  std::int64_t proposed = 0;
  std::int64_t annotated = 0;
  std::int64_t correct = 0;

  MatchCounts& operator+=(const MatchCounts& o) {
    proposed += o.proposed;
    annotated += o.annotated;
    correct += o.correct;
    return *this;
  }
};

struct PRF1 {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// P = correct/proposed, R = correct/annotated, F1 harmonic mean; all
/// 0/0 cases are defined as 0.
PRF1 prf1(const MatchCounts& counts);

/// Exact-boundary matching: a prediction is correct only when both start
/// and end equal a gold span. Duplicates collapse before counting.
MatchCounts match_spans_exact(const std::vector<SpanRef>& gold,
                              const std::vector<SpanRef>& predicted);

struct ScoredPair {
  SpanRef emotion;
  SpanRef cause;
  std::optional<std::string> category;
};

/// Pair matching on exact span boundaries; with `require_category` the
/// category must also match (missing categories are an error then).
MatchCounts match_pairs(const std::vector<ScoredPair>& gold,
                        const std::vector<ScoredPair>& predicted, bool require_category);

/// Clause indices overlapped by at least one token of any span.
std::set<int> relax_to_clauses(const Document& doc, const std::vector<SpanRef>& spans);

struct TaskResult {
  std::string task;
  MatchCounts counts;
  PRF1 scores;
};

struct EvalReport {
  std::vector<TaskResult> tasks;

  const TaskResult* find(const std::string& task) const;
};

enum class EvalMode { span, clause };

/// Counts one document against one prediction; exposed so stub/oracle
/// predictions can be scored without a model.
struct DocPredictions {
  std::vector<SpanRef> emotion_spans;  // selection-stage emotion spans
  std::vector<SpanRef> cause_spans;    // selection-stage cause spans
  std::vector<ExtractedPair> pairs;    // surviving classified pairs
};

DocPredictions to_doc_predictions(const PipelineOutput& out);

/// Span mode scores EESE/ECSE from the selection stage and ECSPE/ECSP
/// from the surviving pairs. Clause mode relaxes both sides to clause
/// indices first; ECE_clause optionally scores causes only for pairs
/// whose emotion clause is a gold emotion clause (oracle condition).
EvalReport evaluate_predictions(const Corpus& corpus, const std::vector<DocPredictions>& preds,
                                EvalMode mode, bool oracle_emotion = false);

EvalReport evaluate(const Corpus& corpus, const Model& model, EvalMode mode,
                    bool oracle_emotion = false);

/// Percentages rounded to two decimals, fixed key order (deterministic
/// bytes for identical inputs).
nlohmann::ordered_json report_to_json(const EvalReport& report);

/// Macro average of per-fold percentages, same shape as a fold report.
EvalReport mean_report(const std::vector<EvalReport>& folds);

double round2(double percentage);

}  // namespace ecsp
