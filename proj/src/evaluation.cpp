#include "ecsp/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <tuple>
#include <utility>

#include "ecsp/model.hpp"

namespace ecsp {

using json = nlohmann::ordered_json;

PRF1 prf1(const MatchCounts& counts) {
  PRF1 s;
  s.precision =
      counts.proposed > 0 ? static_cast<double>(counts.correct) / counts.proposed : 0.0;
  s.recall =
      counts.annotated > 0 ? static_cast<double>(counts.correct) / counts.annotated : 0.0;
  s.f1 = (s.precision + s.recall) > 0.0
             ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
             : 0.0;
  return s;
}

MatchCounts match_spans_exact(const std::vector<SpanRef>& gold,
                              const std::vector<SpanRef>& predicted) {
  const std::set<SpanRef> g(gold.begin(), gold.end());
  const std::set<SpanRef> p(predicted.begin(), predicted.end());
  MatchCounts c;
  c.annotated = static_cast<std::int64_t>(g.size());
  c.proposed = static_cast<std::int64_t>(p.size());
  for (const SpanRef& s : p) c.correct += g.count(s);
  return c;
}

MatchCounts match_pairs(const std::vector<ScoredPair>& gold,
                        const std::vector<ScoredPair>& predicted, bool require_category) {
  MatchCounts c;
  if (require_category) {
    using Key = std::tuple<SpanRef, SpanRef, std::string>;
    auto key = [](const ScoredPair& p) {
      if (!p.category)
        throw std::invalid_argument("match_pairs: category required but missing on a pair");
      return Key{p.emotion, p.cause, *p.category};
    };
    std::set<Key> g, pr;
    for (const ScoredPair& p : gold) g.insert(key(p));
    for (const ScoredPair& p : predicted) pr.insert(key(p));
    c.annotated = static_cast<std::int64_t>(g.size());
    c.proposed = static_cast<std::int64_t>(pr.size());
    for (const Key& k : pr) c.correct += g.count(k);
  } else {
    using Key = std::pair<SpanRef, SpanRef>;
    std::set<Key> g, pr;
    for (const ScoredPair& p : gold) g.insert({p.emotion, p.cause});
    for (const ScoredPair& p : predicted) pr.insert({p.emotion, p.cause});
    c.annotated = static_cast<std::int64_t>(g.size());
    c.proposed = static_cast<std::int64_t>(pr.size());
    for (const Key& k : pr) c.correct += g.count(k);
  }
  return c;
}

std::set<int> relax_to_clauses(const Document& doc, const std::vector<SpanRef>& spans) {
  std::set<int> out;
  for (const SpanRef& s : spans)
    for (size_t ci = 0; ci < doc.clauses.size(); ++ci) {
      const ClauseSpan& c = doc.clauses[ci];
      if (c.start <= s.end && s.start <= c.end) out.insert(static_cast<int>(ci));
    }
  return out;
}

const TaskResult* EvalReport::find(const std::string& task) const {
  for (const TaskResult& t : tasks)
    if (t.task == task) return &t;
  return nullptr;
}

DocPredictions to_doc_predictions(const PipelineOutput& out) {
  DocPredictions p;
  for (const CandidateSpan& s : out.selected.emotions) p.emotion_spans.push_back(s.ref());
  for (const CandidateSpan& s : out.selected.causes) p.cause_spans.push_back(s.ref());
  p.pairs = out.pairs;
  return p;
}

namespace {

struct DocGold {
  std::vector<SpanRef> emotions;
  std::vector<SpanRef> causes;
  std::vector<ScoredPair> pairs;
};

DocGold gold_of(const Document& doc) {
  DocGold g;
  for (const GoldPair& p : doc.pairs) {
    g.emotions.push_back(p.emotion);
    g.causes.push_back(p.cause);
    g.pairs.push_back(ScoredPair{p.emotion, p.cause, p.category});
  }
  return g;
}

std::vector<ScoredPair> pairs_of(const std::vector<ExtractedPair>& pairs) {
  std::vector<ScoredPair> out;
  out.reserve(pairs.size());
  for (const ExtractedPair& p : pairs)
    out.push_back(ScoredPair{p.emotion, p.cause, p.category});
  return out;
}

MatchCounts match_clause_sets(const std::set<int>& gold, const std::set<int>& predicted) {
  MatchCounts c;
  c.annotated = static_cast<std::int64_t>(gold.size());
  c.proposed = static_cast<std::int64_t>(predicted.size());
  for (int i : predicted) c.correct += gold.count(i);
  return c;
}

MatchCounts match_clause_pairs(const std::set<std::pair<int, int>>& gold,
                               const std::set<std::pair<int, int>>& predicted) {
  MatchCounts c;
  c.annotated = static_cast<std::int64_t>(gold.size());
  c.proposed = static_cast<std::int64_t>(predicted.size());
  for (const auto& k : predicted) c.correct += gold.count(k);
  return c;
}

std::set<std::pair<int, int>> relax_pairs(const Document& doc,
                                          const std::vector<ScoredPair>& pairs) {
  std::set<std::pair<int, int>> out;
  for (const ScoredPair& p : pairs)
    for (int e : relax_to_clauses(doc, {p.emotion}))
      for (int c : relax_to_clauses(doc, {p.cause})) out.insert({e, c});
  return out;
}

}  // namespace

EvalReport evaluate_predictions(const Corpus& corpus, const std::vector<DocPredictions>& preds,
                                EvalMode mode, bool oracle_emotion) {
  if (corpus.size() != preds.size())
    throw std::invalid_argument("evaluate_predictions: one prediction per document required");

  EvalReport report;
  if (mode == EvalMode::span) {
    MatchCounts eese, ecse, ecspe, ecsp;
    for (size_t i = 0; i < corpus.size(); ++i) {
      const DocGold gold = gold_of(corpus[i]);
      const DocPredictions& p = preds[i];
      eese += match_spans_exact(gold.emotions, p.emotion_spans);
      ecse += match_spans_exact(gold.causes, p.cause_spans);
      const std::vector<ScoredPair> pp = pairs_of(p.pairs);
      ecspe += match_pairs(gold.pairs, pp, false);
      ecsp += match_pairs(gold.pairs, pp, true);
    }
    report.tasks = {TaskResult{"EESE", eese, prf1(eese)}, TaskResult{"ECSE", ecse, prf1(ecse)},
                    TaskResult{"ECSPE", ecspe, prf1(ecspe)},
                    TaskResult{"ECSP", ecsp, prf1(ecsp)}};
    return report;
  }

  MatchCounts eee, ce, ecpe, ece;
  for (size_t i = 0; i < corpus.size(); ++i) {
    const Document& doc = corpus[i];
    const DocGold gold = gold_of(doc);
    const DocPredictions& p = preds[i];

    const std::set<int> gold_e = relax_to_clauses(doc, gold.emotions);
    const std::set<int> gold_c = relax_to_clauses(doc, gold.causes);
    const std::set<std::pair<int, int>> gold_pp = relax_pairs(doc, gold.pairs);

    eee += match_clause_sets(gold_e, relax_to_clauses(doc, p.emotion_spans));
    ce += match_clause_sets(gold_c, relax_to_clauses(doc, p.cause_spans));
    ecpe += match_clause_pairs(gold_pp, relax_pairs(doc, pairs_of(p.pairs)));

    // ECE scores the cause side of the surviving pairs; in the oracle
    // condition only pairs anchored on a gold emotion clause count.
    std::set<int> pred_ece;
    for (const ExtractedPair& pair : p.pairs) {
      if (oracle_emotion) {
        const std::set<int> e_clauses = relax_to_clauses(doc, {pair.emotion});
        const bool anchored = std::any_of(e_clauses.begin(), e_clauses.end(),
                                          [&](int c) { return gold_e.count(c) > 0; });
        if (!anchored) continue;
      }
      for (int c : relax_to_clauses(doc, {pair.cause})) pred_ece.insert(c);
    }
    ece += match_clause_sets(gold_c, pred_ece);
  }
  report.tasks = {TaskResult{"EEE_clause", eee, prf1(eee)}, TaskResult{"CE_clause", ce, prf1(ce)},
                  TaskResult{"ECPE_clause", ecpe, prf1(ecpe)},
                  TaskResult{"ECE_clause", ece, prf1(ece)}};
  return report;
}

EvalReport evaluate(const Corpus& corpus, const Model& model, EvalMode mode,
                    bool oracle_emotion) {
  std::vector<DocPredictions> preds;
  preds.reserve(corpus.size());
  for (const Document& doc : corpus) preds.push_back(to_doc_predictions(run_pipeline(doc, model)));
  return evaluate_predictions(corpus, preds, mode, oracle_emotion);
}

double round2(double percentage) { return std::round(percentage * 100.0) / 100.0; }

json report_to_json(const EvalReport& report) {
  json tasks = json::object();
  for (const TaskResult& t : report.tasks) {
    json row;
    row["precision"] = round2(100.0 * t.scores.precision);
    row["recall"] = round2(100.0 * t.scores.recall);
    row["f1"] = round2(100.0 * t.scores.f1);
    row["proposed"] = t.counts.proposed;
    row["annotated"] = t.counts.annotated;
    row["correct"] = t.counts.correct;
    tasks[t.task] = std::move(row);
  }
  json out;
  out["tasks"] = std::move(tasks);
  return out;
}

EvalReport mean_report(const std::vector<EvalReport>& folds) {
  EvalReport mean;
  if (folds.empty()) return mean;
  const size_t n_tasks = folds.front().tasks.size();
  for (size_t ti = 0; ti < n_tasks; ++ti) {
    TaskResult agg;
    agg.task = folds.front().tasks[ti].task;
    for (const EvalReport& fold : folds) {
      if (fold.tasks.size() != n_tasks || fold.tasks[ti].task != agg.task)
        throw std::invalid_argument("mean_report: fold reports cover different tasks");
      agg.counts += fold.tasks[ti].counts;
      agg.scores.precision += fold.tasks[ti].scores.precision;
      agg.scores.recall += fold.tasks[ti].scores.recall;
      agg.scores.f1 += fold.tasks[ti].scores.f1;
    }
    const double k = static_cast<double>(folds.size());
    agg.scores.precision /= k;
    agg.scores.recall /= k;
    agg.scores.f1 /= k;
    mean.tasks.push_back(std::move(agg));
  }
  return mean;
}

}  // namespace ecsp
