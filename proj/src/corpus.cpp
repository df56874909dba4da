#include "ecsp/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "ecsp/errors.hpp"
#include "json.hpp"

namespace ecsp {

using json = nlohmann::ordered_json;

namespace {

[[noreturn]] void fail(int line_number, const std::string& doc_id, const std::string& what) {
  std::ostringstream os;
  os << "corpus line " << line_number;
  if (!doc_id.empty()) os << " (doc_id=" << doc_id << ")";
  os << ": " << what;
  throw CorpusError(os.str());
}

void reject_unknown_keys(const json& obj, std::initializer_list<const char*> known,
                         int line_number, const std::string& doc_id, const char* where) {
  for (const auto& kv : obj.items()) {
    bool ok = false;
    for (const char* k : known)
      if (kv.key() == k) ok = true;
    if (!ok) fail(line_number, doc_id, std::string("unknown key \"") + kv.key() + "\" in " + where);
  }
}

int get_index(const json& obj, const char* key, int line_number, const std::string& doc_id,
              const char* where) {
  if (!obj.contains(key)) fail(line_number, doc_id, std::string(where) + " missing \"" + key + "\"");
  const json& v = obj.at(key);
  if (!v.is_number_integer())
    fail(line_number, doc_id, std::string(where) + " \"" + key + "\" must be an integer");
  return v.get<int>();
}

SpanRef parse_span(const json& obj, int line_number, const std::string& doc_id, const char* where,
                   bool strict) {
  if (!obj.is_object()) fail(line_number, doc_id, std::string(where) + " must be an object");
  if (strict) reject_unknown_keys(obj, {"start", "end"}, line_number, doc_id, where);
  SpanRef s;
  s.start = get_index(obj, "start", line_number, doc_id, where);
  s.end = get_index(obj, "end", line_number, doc_id, where);
  return s;
}

}  // namespace

void validate_document(const Document& doc) {
  const int n = doc.num_tokens();
  if (n < 1) throw CorpusError("doc " + doc.doc_id + ": empty token list");
  if (doc.clauses.empty()) throw CorpusError("doc " + doc.doc_id + ": no clauses");

  int expected_start = 0;
  for (size_t i = 0; i < doc.clauses.size(); ++i) {
    const ClauseSpan& c = doc.clauses[i];
    if (c.start != expected_start || c.end < c.start || c.end > n - 1) {
      std::ostringstream os;
      os << "doc " << doc.doc_id << ": clauses are not a partition of [0," << n - 1
         << "] (clause " << i << " = [" << c.start << "," << c.end << "])";
      throw CorpusError(os.str());
    }
    expected_start = c.end + 1;
  }
  if (expected_start != n)
    throw CorpusError("doc " + doc.doc_id + ": clauses do not cover the document");

  auto check_span = [&](const SpanRef& s, const char* role) {
    if (s.start < 0 || s.end < s.start || s.end > n - 1) {
      std::ostringstream os;
      os << "doc " << doc.doc_id << ": " << role << " span out of range ([" << s.start << ","
         << s.end << "] in a " << n << "-token doc)";
      throw CorpusError(os.str());
    }
  };
  for (const GoldPair& p : doc.pairs) {
    check_span(p.emotion, "emotion");
    check_span(p.cause, "cause");
    if (p.category.empty()) throw CorpusError("doc " + doc.doc_id + ": empty pair category");
  }
}

Document parse_document_json(const std::string& line, int line_number, bool strict) {
  json obj;
  try {
    obj = json::parse(line);
  } catch (const json::parse_error& e) {
    fail(line_number, "", std::string("malformed JSON: ") + e.what());
  }
  if (!obj.is_object()) fail(line_number, "", "document must be a JSON object");

  Document doc;
  if (obj.contains("doc_id") && obj.at("doc_id").is_string())
    doc.doc_id = obj.at("doc_id").get<std::string>();

  if (strict)
    reject_unknown_keys(obj, {"doc_id", "tokens", "clauses", "pairs"}, line_number, doc.doc_id,
                        "document");
  if (!obj.contains("doc_id") || !obj.at("doc_id").is_string())
    fail(line_number, doc.doc_id, "document missing string \"doc_id\"");
  if (!obj.contains("tokens") || !obj.at("tokens").is_array())
    fail(line_number, doc.doc_id, "document missing array \"tokens\"");
  if (!obj.contains("clauses") || !obj.at("clauses").is_array())
    fail(line_number, doc.doc_id, "document missing array \"clauses\"");
  if (!obj.contains("pairs") || !obj.at("pairs").is_array())
    fail(line_number, doc.doc_id, "document missing array \"pairs\"");

  for (const json& t : obj.at("tokens")) {
    if (!t.is_string()) fail(line_number, doc.doc_id, "tokens must be strings");
    doc.tokens.push_back(t.get<std::string>());
  }
  for (const json& c : obj.at("clauses")) {
    SpanRef s = parse_span(c, line_number, doc.doc_id, "clause", strict);
    doc.clauses.push_back(ClauseSpan{s.start, s.end});
  }
  for (const json& p : obj.at("pairs")) {
    if (!p.is_object()) fail(line_number, doc.doc_id, "pair must be an object");
    if (strict)
      reject_unknown_keys(p, {"emotion", "cause", "category"}, line_number, doc.doc_id, "pair");
    if (!p.contains("emotion") || !p.contains("cause") || !p.contains("category"))
      fail(line_number, doc.doc_id, "pair needs \"emotion\", \"cause\" and \"category\"");
    if (!p.at("category").is_string())
      fail(line_number, doc.doc_id, "pair \"category\" must be a string");
    GoldPair gp;
    gp.emotion = parse_span(p.at("emotion"), line_number, doc.doc_id, "emotion span", strict);
    gp.cause = parse_span(p.at("cause"), line_number, doc.doc_id, "cause span", strict);
    gp.category = p.at("category").get<std::string>();
    doc.pairs.push_back(std::move(gp));
  }

  try {
    validate_document(doc);
  } catch (const CorpusError& e) {
    fail(line_number, doc.doc_id, e.what());
  }
  return doc;
}

Corpus load_corpus(const std::string& path, bool strict) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open corpus file: " + path);

  Corpus corpus;
  std::set<std::string> seen_ids;
  std::string line;
  int line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Document doc = parse_document_json(line, line_number, strict);
    if (!seen_ids.insert(doc.doc_id).second)
      fail(line_number, doc.doc_id, "duplicate doc_id");
    corpus.push_back(std::move(doc));
  }
  return corpus;
}

std::string document_to_json(const Document& doc) {
  json obj;
  obj["doc_id"] = doc.doc_id;
  obj["tokens"] = doc.tokens;
  obj["clauses"] = json::array();
  for (const ClauseSpan& c : doc.clauses)
    obj["clauses"].push_back(json{{"start", c.start}, {"end", c.end}});
  obj["pairs"] = json::array();
  for (const GoldPair& p : doc.pairs) {
    obj["pairs"].push_back(json{{"emotion", {{"start", p.emotion.start}, {"end", p.emotion.end}}},
                                {"cause", {{"start", p.cause.start}, {"end", p.cause.end}}},
                                {"category", p.category}});
  }
  return obj.dump();
}

void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw CorpusError("cannot open for writing: " + path);
  for (const Document& doc : corpus) out << document_to_json(doc) << "\n";
}

CorpusStats corpus_stats(const Corpus& corpus) {
  CorpusStats stats;
  std::map<int, std::int64_t> by_exact_length;
  for (const Document& doc : corpus) {
    ++stats.num_documents;
    stats.num_clauses += static_cast<std::int64_t>(doc.clauses.size());
    stats.num_pairs += static_cast<std::int64_t>(doc.pairs.size());

    std::set<SpanRef> emotions, causes;
    for (const GoldPair& p : doc.pairs) {
      emotions.insert(p.emotion);
      causes.insert(p.cause);
    }
    stats.num_emotion_annotations += static_cast<std::int64_t>(emotions.size());
    stats.num_cause_annotations += static_cast<std::int64_t>(causes.size());
    if (!doc.pairs.empty()) ++stats.cause_docs_by_count[static_cast<int>(causes.size())];

    for (const SpanRef& s : emotions) ++by_exact_length[s.length()];
    for (const SpanRef& s : causes) ++by_exact_length[s.length()];
  }
  stats.num_annotations = stats.num_emotion_annotations + stats.num_cause_annotations;

  std::int64_t running = 0;
  for (const auto& [len, count] : by_exact_length) {
    running += count;
    stats.annotations_by_max_length[len] = running;
    stats.max_annotation_length = len;
  }
  return stats;
}

double length_coverage(const CorpusStats& stats, int max_len) {
  if (max_len < 1) throw CorpusError("length_coverage: max_len must be >= 1");
  if (stats.num_annotations == 0) return 1.0;
  auto it = stats.annotations_by_max_length.upper_bound(max_len);
  if (it == stats.annotations_by_max_length.begin()) return 0.0;
  --it;
  return static_cast<double>(it->second) / static_cast<double>(stats.num_annotations);
}

std::vector<std::string> category_vocabulary(const Corpus& corpus) {
  std::set<std::string> cats;
  for (const Document& doc : corpus)
    for (const GoldPair& p : doc.pairs) cats.insert(p.category);
  return {cats.begin(), cats.end()};
}

std::vector<FoldSplit> kfold_split(const Corpus& corpus, int k, std::uint64_t seed) {
  const int n = static_cast<int>(corpus.size());
  if (k < 2) throw CorpusError("kfold_split: k must be >= 2");
  if (n == 0) throw CorpusError("kfold_split: empty corpus");
  if (k > n) throw CorpusError("kfold_split: k exceeds corpus size");

  std::vector<std::string> ids;
  ids.reserve(n);
  for (const Document& doc : corpus) ids.push_back(doc.doc_id);

  // Hand-rolled Fisher-Yates so splits are identical across platforms
  // (std::shuffle's draw sequence is implementation-defined).
  std::mt19937_64 rng(seed);
  for (int i = n - 1; i > 0; --i) {
    std::uint64_t j = rng() % static_cast<std::uint64_t>(i + 1);
    std::swap(ids[i], ids[j]);
  }

  std::vector<FoldSplit> folds(k);
  for (int f = 0; f < k; ++f) folds[f].fold_index = f;
  for (int i = 0; i < n; ++i) folds[i % k].test_ids.push_back(ids[i]);
  for (int f = 0; f < k; ++f) {
    std::set<std::string> test(folds[f].test_ids.begin(), folds[f].test_ids.end());
    for (const std::string& id : ids)
      if (!test.count(id)) folds[f].train_ids.push_back(id);
    std::sort(folds[f].test_ids.begin(), folds[f].test_ids.end());
    std::sort(folds[f].train_ids.begin(), folds[f].train_ids.end());
  }
  return folds;
}

Document relax_document_to_clauses(const Document& doc) {
  auto clauses_of = [&](const SpanRef& s) {
    std::vector<SpanRef> out;
    for (const ClauseSpan& c : doc.clauses)
      if (s.start <= c.end && c.start <= s.end) out.push_back(SpanRef{c.start, c.end});
    return out;
  };

  Document relaxed = doc;
  relaxed.pairs.clear();
  std::set<std::pair<std::pair<SpanRef, SpanRef>, std::string>> seen;
  for (const GoldPair& p : doc.pairs) {
    for (const SpanRef& e : clauses_of(p.emotion))
      for (const SpanRef& c : clauses_of(p.cause))
        if (seen.insert({{e, c}, p.category}).second)
          relaxed.pairs.push_back(GoldPair{e, c, p.category});
  }
  return relaxed;
}

}  // namespace ecsp
