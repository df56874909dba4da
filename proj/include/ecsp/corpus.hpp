#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace ecsp {

/// Inclusive token range. All offsets in the corpus are token indices.
struct SpanRef {
  int start = 0;
  int end = 0;

  int length() const { return end - start + 1; }

  friend bool operator==(const SpanRef&, const SpanRef&) = default;
  friend auto operator<=>(const SpanRef&, const SpanRef&) = default;
};

/// A corpus-annotated sub-sentence unit. Clauses partition each document.
struct ClauseSpan {
  int start = 0;
  int end = 0;

  int length() const { return end - start + 1; }

  friend bool operator==(const ClauseSpan&, const ClauseSpan&) = default;
};

struct GoldPair {
  SpanRef emotion;
  SpanRef cause;
  std::string category;

  friend bool operator==(const GoldPair&, const GoldPair&) = default;
};

struct Document {
  std::string doc_id;
  std::vector<std::string> tokens;
  std::vector<ClauseSpan> clauses;
  std::vector<GoldPair> pairs;

  int num_tokens() const { return static_cast<int>(tokens.size()); }
};

using Corpus = std::vector<Document>;

/// Corpus-wide annotation statistics. An "annotation" is a distinct
/// (role, span) per document: a doc's emotion span shared by two pairs
/// counts once; per-role and combined counts are both reported.
struct CorpusStats {
  std::int64_t num_documents = 0;
  std::int64_t num_clauses = 0;
  std::int64_t num_pairs = 0;
  std::int64_t num_emotion_annotations = 0;
  std::int64_t num_cause_annotations = 0;
  std::int64_t num_annotations = 0;
  /// distinct cause spans per document -> number of documents
  std::map<int, std::int64_t> cause_docs_by_count;
  /// cumulative: max length -> number of annotations with length <= key
  std::map<int, std::int64_t> annotations_by_max_length;
  int max_annotation_length = 0;
};

struct FoldSplit {
  int fold_index = 0;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
};

/// Throws CorpusError unless tokens are non-empty, clauses partition
/// [0, n-1] in order, every span is in range with start <= end, and
/// every pair carries a non-empty category.
void validate_document(const Document& doc);

/// Reads a JSONL corpus (one document object per line). In strict mode
/// unknown keys are rejected; errors carry the line number and doc_id.
/// Duplicate doc_ids are rejected in either mode.
Corpus load_corpus(const std::string& path, bool strict = true);

/// Parses one JSONL line; `line_number` is used in diagnostics only.
Document parse_document_json(const std::string& line, int line_number, bool strict = true);

/// Writes the corpus back to JSONL in the canonical schema.
void save_corpus(const Corpus& corpus, const std::string& path);
std::string document_to_json(const Document& doc);

CorpusStats corpus_stats(const Corpus& corpus);

/// Fraction of annotations with length <= max_len; 0/0 is defined as 1.
double length_coverage(const CorpusStats& stats, int max_len);

/// Sorted distinct categories across all gold pairs.
std::vector<std::string> category_vocabulary(const Corpus& corpus);

/// Seeded shuffle then round-robin assignment; every document lands in
/// exactly one test fold and fold sizes differ by at most one.
std::vector<FoldSplit> kfold_split(const Corpus& corpus, int k, std::uint64_t seed);

/// Replaces every gold span by the clause span(s) it overlaps and every
/// gold pair by the cross product of its relaxed sides (deduplicated).
/// This is the clause-granularity view used by the clause-candidate mode.
Document relax_document_to_clauses(const Document& doc);

}  // namespace ecsp
