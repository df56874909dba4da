// ecsp: corpus stats, training, cross-validation, prediction and evaluation
// for emotion-cause span-pair models.
//
// Exit codes: 0 success, 2 usage/config/corpus error, 3 training failure,
// 4 model or IO incompatibility.

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "ecsp/corpus.hpp"
#include "ecsp/errors.hpp"
#include "ecsp/evaluation.hpp"
#include "ecsp/model.hpp"
#include "ecsp/pairing.hpp"
#include "ecsp/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

ecsp::RunConfig load_run_config(const std::string& path, const std::vector<std::string>& sets) {
  ecsp::RunConfig config = ecsp::load_config(path);
  for (const std::string& kv : sets) ecsp::apply_override(config, kv);
  return config;
}

ecsp::Corpus select_docs(const ecsp::Corpus& corpus, const std::vector<std::string>& ids) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < corpus.size(); ++i) index.emplace(corpus[i].doc_id, i);
  ecsp::Corpus out;
  out.reserve(ids.size());
  for (const std::string& id : ids) out.push_back(corpus[index.at(id)]);
  return out;
}

ecsp::EvalMode parse_mode(const std::string& mode) {
  if (mode == "span") return ecsp::EvalMode::span;
  if (mode == "clause") return ecsp::EvalMode::clause;
  throw ecsp::ConfigError("--mode must be \"span\" or \"clause\"");
}

// Refuses to clobber earlier results unless --overwrite was passed.
void check_overwrite(const fs::path& out_dir, const char* marker, bool overwrite) {
  if (!overwrite && fs::exists(out_dir / marker))
    throw ecsp::ConfigError("output directory " + out_dir.string() + " already contains " +
                            marker + "; pass --overwrite to replace it");
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ecsp::ModelIoError("cannot open " + path.string() + " for writing");
  return out;
}

json warnings_json(const ecsp::DataWarnings& w) {
  json obj;
  obj["gold_spans_unrepresentable"] = w.gold_spans_unrepresentable;
  obj["cross_window_pairs"] = w.cross_window_pairs;
  obj["dual_role_spans"] = w.dual_role_spans;
  return obj;
}

// Trains on `fit`, writes checkpoint + train_log.jsonl + run_info.json
// into `out_dir` and returns the result (with the best weights restored).
ecsp::TrainResult train_into(const ecsp::Corpus& fit, const ecsp::RunConfig& config,
                             const fs::path& out_dir, const json& extra_info) {
  fs::create_directories(out_dir);
  std::ofstream log = open_out(out_dir / "train_log.jsonl");
  ecsp::TrainResult result =
      ecsp::train(fit, config, ecsp::category_vocabulary(fit),
                  [&log](const std::string& line) { log << line << "\n"; });
  log.close();
  ecsp::save_checkpoint(out_dir.string(), result.model, result.best_step, result.best_dev_f1);

  json info = extra_info;
  info["steps_run"] = result.steps_run;
  info["evals_run"] = result.evals_run;
  info["best_step"] = result.best_step;
  info["best_dev_f1"] = result.best_dev_f1;
  info["warnings"] = warnings_json(result.warnings);
  open_out(out_dir / "run_info.json") << info.dump(2) << "\n";
  return result;
}

std::int64_t cumulative_at(const ecsp::CorpusStats& stats, int max_len) {
  auto it = stats.annotations_by_max_length.upper_bound(max_len);
  if (it == stats.annotations_by_max_length.begin()) return 0;
  return std::prev(it)->second;
}

int cmd_stats(const std::string& corpus_path, int max_len, bool lenient) {
  const ecsp::Corpus corpus = ecsp::load_corpus(corpus_path, !lenient);
  const ecsp::CorpusStats stats = ecsp::corpus_stats(corpus);

  std::printf("documents:           %lld\n", static_cast<long long>(stats.num_documents));
  std::printf("clauses:             %lld\n", static_cast<long long>(stats.num_clauses));
  std::printf("pairs:               %lld\n", static_cast<long long>(stats.num_pairs));
  std::printf("emotion annotations: %lld\n", static_cast<long long>(stats.num_emotion_annotations));
  std::printf("cause annotations:   %lld\n", static_cast<long long>(stats.num_cause_annotations));
  std::printf("annotations:         %lld\n", static_cast<long long>(stats.num_annotations));
  std::printf("documents by distinct cause spans:\n");
  for (const auto& [count, docs] : stats.cause_docs_by_count)
    std::printf("  %d: %lld\n", count, static_cast<long long>(docs));
  std::printf("annotations by length (cumulative):\n");
  std::set<int> thresholds = {max_len};
  for (int t : {2, 5, 10, 15, 20})
    if (t <= max_len) thresholds.insert(t);
  for (int t : thresholds)
    std::printf("  Length ≤ %d: %lld\n", t, static_cast<long long>(cumulative_at(stats, t)));
  std::printf("max annotation length: %d\n", stats.max_annotation_length);
  std::printf("coverage@%d = %.2f%%\n", max_len,
              ecsp::round2(100.0 * ecsp::length_coverage(stats, max_len)));
  return 0;
}

int cmd_train(const std::string& corpus_path, const std::string& config_path,
              const std::string& out, int fold, int folds, bool overwrite, bool lenient,
              const std::vector<std::string>& sets) {
  ecsp::RunConfig config = load_run_config(config_path, sets);
  config.validate_for_training();
  check_overwrite(out, "metadata.json", overwrite);

  ecsp::Corpus corpus = ecsp::load_corpus(corpus_path, !lenient);
  json info;
  if (fold >= 0) {
    const auto splits = ecsp::kfold_split(corpus, folds, config.train_seed);
    if (fold >= folds) throw ecsp::ConfigError("--fold must be in [0, --folds)");
    corpus = select_docs(corpus, splits[fold].train_ids);
    info["fold"] = fold;
    info["folds"] = folds;
  }

  const ecsp::TrainResult result = train_into(corpus, config, out, info);
  std::printf("checkpoint: %s (best step %lld, dev ECSP F1 %.2f)\n", out.c_str(),
              static_cast<long long>(result.best_step),
              ecsp::round2(100.0 * result.best_dev_f1));
  return 0;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ecsp::TrainError*>(&e)) return 3;
  if (dynamic_cast<const ecsp::ModelIoError*>(&e)) return 4;
  if (dynamic_cast<const ecsp::CorpusError*>(&e) || dynamic_cast<const ecsp::ConfigError*>(&e))
    return 2;
  return 1;
}

int cmd_crossval(const std::string& corpus_path, const std::string& config_path,
                 const std::string& out, int folds, int jobs, const std::string& mode_str,
                 bool oracle_emotion, bool overwrite, bool lenient,
                 const std::vector<std::string>& sets) {
  const ecsp::RunConfig config = load_run_config(config_path, sets);
  config.validate_for_training();
  const ecsp::EvalMode mode = parse_mode(mode_str);
  if (oracle_emotion && mode != ecsp::EvalMode::clause)
    throw ecsp::ConfigError("--oracle-emotion requires --mode clause");

  const fs::path out_dir(out);
  check_overwrite(out_dir, "report.json", overwrite);
  fs::create_directories(out_dir);

  const ecsp::Corpus corpus = ecsp::load_corpus(corpus_path, !lenient);
  const auto splits = ecsp::kfold_split(corpus, folds, config.train_seed);

  std::vector<ecsp::EvalReport> reports(splits.size());
  std::vector<std::string> errors(splits.size());
  std::vector<int> codes(splits.size(), 0);

  auto run_fold = [&](std::size_t f) {
    try {
      const fs::path fold_dir = out_dir / ("fold_" + std::to_string(f));
      const ecsp::TrainResult result =
          train_into(select_docs(corpus, splits[f].train_ids), config, fold_dir,
                     json{{"fold", static_cast<int>(f)}, {"folds", folds}});
      const ecsp::Corpus test = select_docs(corpus, splits[f].test_ids);
      reports[f] = ecsp::evaluate(test, result.model, mode, oracle_emotion);
      open_out(fold_dir / "report.json") << ecsp::report_to_json(reports[f]).dump(2) << "\n";
    } catch (const std::exception& e) {
      errors[f] = e.what();
      codes[f] = exit_code_for(e);
    }
  };

  if (jobs > 1) {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    const std::size_t n_workers = std::min<std::size_t>(jobs, splits.size());
    for (std::size_t w = 0; w < n_workers; ++w)
      workers.emplace_back([&] {
        for (std::size_t f = next.fetch_add(1); f < splits.size(); f = next.fetch_add(1))
          run_fold(f);
      });
    for (std::thread& t : workers) t.join();
  } else {
    for (std::size_t f = 0; f < splits.size(); ++f) run_fold(f);
  }

  json report;
  report["mode"] = mode_str;
  report["folds"] = json::array();
  std::vector<ecsp::EvalReport> ok;
  int failure_code = 0;
  for (std::size_t f = 0; f < splits.size(); ++f) {
    json entry;
    entry["fold"] = static_cast<int>(f);
    if (errors[f].empty()) {
      entry["tasks"] = ecsp::report_to_json(reports[f])["tasks"];
      ok.push_back(reports[f]);
    } else {
      entry["error"] = errors[f];
      if (failure_code == 0) failure_code = codes[f];
    }
    report["folds"].push_back(std::move(entry));
  }
  if (!ok.empty()) report["mean"] = ecsp::report_to_json(ecsp::mean_report(ok))["tasks"];

  const std::string text = report.dump(2) + "\n";
  open_out(out_dir / "report.json") << text;
  std::cout << text;
  if (failure_code != 0) {
    std::cerr << "error: " << (folds - static_cast<int>(ok.size())) << " of " << folds
              << " folds failed\n";
    return failure_code;
  }
  return 0;
}

int cmd_predict(const std::string& model_dir, const std::string& input,
                const std::string& output, bool lenient) {
  ecsp::Checkpoint ckpt = ecsp::load_checkpoint(model_dir);
  const ecsp::Corpus corpus = ecsp::load_corpus(input, !lenient);
  std::ofstream out = open_out(output);
  for (const ecsp::Document& doc : corpus) {
    json line;
    line["doc_id"] = doc.doc_id;
    line["pairs"] = json::array();
    for (const ecsp::ExtractedPair& p : ecsp::extract_pairs(doc, ckpt.model)) {
      json pj;
      pj["emotion"] = {{"start", p.emotion.start}, {"end", p.emotion.end}};
      pj["cause"] = {{"start", p.cause.start}, {"end", p.cause.end}};
      pj["category"] = p.category;
      pj["score"] = p.score;
      line["pairs"].push_back(std::move(pj));
    }
    out << line.dump() << "\n";
  }
  return 0;
}

int cmd_eval(const std::string& model_dir, const std::string& corpus_path,
             const std::string& mode_str, bool oracle_emotion, bool lenient) {
  const ecsp::EvalMode mode = parse_mode(mode_str);
  if (oracle_emotion && mode != ecsp::EvalMode::clause)
    throw ecsp::ConfigError("--oracle-emotion requires --mode clause");
  ecsp::Checkpoint ckpt = ecsp::load_checkpoint(model_dir);
  const ecsp::Corpus corpus = ecsp::load_corpus(corpus_path, !lenient);
  const ecsp::EvalReport report = ecsp::evaluate(corpus, ckpt.model, mode, oracle_emotion);
  std::cout << ecsp::report_to_json(report).dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"emotion-cause span-pair extraction toolkit"};
  app.require_subcommand(1);

  std::string corpus_path, config_path, out, model_dir, input, output;
  std::string mode = "span";
  std::vector<std::string> sets;
  int max_len = 20, fold = -1, folds = 10, jobs = 1;
  bool overwrite = false, lenient = false, oracle_emotion = false;

  CLI::App* stats = app.add_subcommand("stats", "print corpus statistics");
  stats->add_option("--corpus", corpus_path, "corpus JSONL")->required();
  stats->add_option("--max-len", max_len, "coverage threshold")->check(CLI::PositiveNumber);
  stats->add_flag("--lenient", lenient, "accept unknown corpus keys");

  CLI::App* train = app.add_subcommand("train", "train a model");
  train->add_option("--corpus", corpus_path, "corpus JSONL")->required();
  train->add_option("--config", config_path, "run config JSON")->required();
  train->add_option("--out", out, "checkpoint directory")->required();
  train->add_option("--fold", fold, "train on this fold's training split")
      ->check(CLI::NonNegativeNumber);
  train->add_option("--folds", folds, "fold count used with --fold");
  train->add_flag("--overwrite", overwrite, "replace an existing checkpoint");
  train->add_flag("--lenient", lenient, "accept unknown corpus keys");
  train->add_option("--set", sets, "config override key=value")->take_all();

  CLI::App* crossval = app.add_subcommand("crossval", "k-fold cross-validation");
  crossval->add_option("--corpus", corpus_path, "corpus JSONL")->required();
  crossval->add_option("--config", config_path, "run config JSON")->required();
  crossval->add_option("--out", out, "output directory")->required();
  crossval->add_option("--folds", folds, "number of folds");
  crossval->add_option("--jobs", jobs, "parallel fold workers")->check(CLI::PositiveNumber);
  crossval->add_option("--mode", mode, "evaluation granularity")
      ->check(CLI::IsMember({"span", "clause"}));
  crossval->add_flag("--oracle-emotion", oracle_emotion, "score causes given gold emotions");
  crossval->add_flag("--overwrite", overwrite, "replace existing reports");
  crossval->add_flag("--lenient", lenient, "accept unknown corpus keys");
  crossval->add_option("--set", sets, "config override key=value")->take_all();

  CLI::App* predict = app.add_subcommand("predict", "extract pairs from documents");
  predict->add_option("--model", model_dir, "checkpoint directory")->required();
  predict->add_option("--input", input, "input corpus JSONL")->required();
  predict->add_option("--output", output, "predictions JSONL")->required();
  predict->add_flag("--lenient", lenient, "accept unknown corpus keys");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a model on a corpus");
  eval->add_option("--model", model_dir, "checkpoint directory")->required();
  eval->add_option("--corpus", corpus_path, "corpus JSONL")->required();
  eval->add_option("--mode", mode, "evaluation granularity")
      ->check(CLI::IsMember({"span", "clause"}));
  eval->add_flag("--oracle-emotion", oracle_emotion, "score causes given gold emotions");
  eval->add_flag("--lenient", lenient, "accept unknown corpus keys");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (stats->parsed()) return cmd_stats(corpus_path, max_len, lenient);
    if (train->parsed())
      return cmd_train(corpus_path, config_path, out, fold, folds, overwrite, lenient, sets);
    if (crossval->parsed())
      return cmd_crossval(corpus_path, config_path, out, folds, jobs, mode, oracle_emotion,
                          overwrite, lenient, sets);
    if (predict->parsed()) return cmd_predict(model_dir, input, output, lenient);
    if (eval->parsed()) return cmd_eval(model_dir, corpus_path, mode, oracle_emotion, lenient);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}
