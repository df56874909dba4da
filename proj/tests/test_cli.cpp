#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "ecsp/config.hpp"
#include "ecsp/corpus.hpp"
#include "json.hpp"
#include "synthetic.hpp"

using namespace ecsp;
namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string out;  // stdout and stderr interleaved
};

RunResult run_cli(const std::string& args) {
  const std::string cmd = std::string("'") + ECSP_CLI_PATH + "' " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  RunResult r;
  char buf[4096];
  size_t n = 0;
  while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  if (WIFEXITED(status)) r.code = WEXITSTATUS(status);
  return r;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// One corpus + config + trained checkpoint shared across the CLI cases.
struct Fixture {
  fs::path root, corpus, config, bare_config, model_dir;

  Fixture() {
    root = fs::temp_directory_path() / "ecsp_cli_fixture";
    fs::remove_all(root);
    fs::create_directories(root);

    Corpus docs = synth::overfit_corpus();
    docs.resize(8);
    corpus = root / "corpus.jsonl";
    save_corpus(docs, corpus.string());

    RunConfig rc;
    rc.encoder_hidden_dim = 16;
    rc.encoder_max_positions = 64;
    rc.span_max_len = 4;
    rc.span_phi_dim = 4;
    rc.pair_psi_dim = 4;
    rc.pair_dist_buckets = 16;
    rc.train_total_steps = 40;
    rc.train_peak_lr = 0.05;
    rc.train_eval_interval_steps = 10;
    rc.train_dropout = 0.0;
    rc.train_dev_fraction = 0.0;
    config = root / "config.json";
    std::ofstream(config) << rc.to_json().dump(2) << "\n";

    RunConfig bare;  // no train.total_steps
    bare_config = root / "bare_config.json";
    std::ofstream(bare_config) << bare.to_json().dump(2) << "\n";

    model_dir = root / "model";
    const RunResult r = run_cli("train --corpus '" + corpus.string() + "' --config '" +
                                config.string() + "' --out '" + model_dir.string() + "'");
    REQUIRE(r.code == 0);
    REQUIRE(r.out.find("checkpoint: ") != std::string::npos);
    REQUIRE(r.out.find("dev ECSP F1") != std::string::npos);
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

long long int_after(const std::string& text, const std::string& label) {
  const size_t at = text.find(label);
  REQUIRE(at != std::string::npos);
  long long value = -1;
  std::sscanf(text.c_str() + at + label.size(), " %lld", &value);
  return value;
}

}  // namespace

TEST_CASE("stats prints counts, the length table and coverage") {
  Fixture& f = fixture();
  const RunResult r = run_cli("stats --corpus '" + f.corpus.string() + "'");
  CHECK(r.code == 0);
  CHECK(int_after(r.out, "documents:") == 8);
  CHECK(int_after(r.out, "pairs:") == 12);
  CHECK(r.out.find("documents by distinct cause spans:") != std::string::npos);
  CHECK(r.out.find("annotations by length (cumulative):") != std::string::npos);
  CHECK(r.out.find("Length ≤ 2:") != std::string::npos);
  CHECK(r.out.find("Length ≤ 20:") != std::string::npos);
  CHECK(r.out.find("max annotation length: 2") != std::string::npos);
  CHECK(r.out.find("coverage@20 = 100.00%") != std::string::npos);

  const RunResult narrow =
      run_cli("stats --corpus '" + f.corpus.string() + "' --max-len 1");
  CHECK(narrow.code == 0);
  CHECK(narrow.out.find("coverage@1 = 0.00%") != std::string::npos);
}

TEST_CASE("strict corpus loading rejects unknown keys unless --lenient") {
  Fixture& f = fixture();
  const Document doc = synth::make_doc("x1", {{"a", "b"}}, {{{0, 0}, {1, 1}, "joy"}});
  auto line = nlohmann::ordered_json::parse(document_to_json(doc));
  line["annotator"] = "someone";
  const fs::path extra = f.root / "extra_key.jsonl";
  std::ofstream(extra) << line.dump() << "\n";

  const RunResult strict = run_cli("stats --corpus '" + extra.string() + "'");
  CHECK(strict.code == 2);
  CHECK(strict.out.find("unknown key") != std::string::npos);
  const RunResult lenient = run_cli("stats --corpus '" + extra.string() + "' --lenient");
  CHECK(lenient.code == 0);
}

TEST_CASE("train writes the checkpoint, log and run info") {
  Fixture& f = fixture();
  CHECK(fs::exists(f.model_dir / "metadata.json"));
  CHECK(fs::exists(f.model_dir / "params.bin"));
  CHECK(fs::exists(f.model_dir / "train_log.jsonl"));
  CHECK(fs::exists(f.model_dir / "run_info.json"));

  const auto info = nlohmann::json::parse(read_file(f.model_dir / "run_info.json"));
  CHECK(info.at("steps_run").get<long long>() == 40);
  CHECK(info.at("evals_run").get<long long>() >= 1);
  CHECK(info.contains("best_step"));
  CHECK(info.contains("best_dev_f1"));
  for (const char* key : {"gold_spans_unrepresentable", "cross_window_pairs", "dual_role_spans"})
    CHECK(info.at("warnings").contains(key));

  std::ifstream log(f.model_dir / "train_log.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    const auto entry = nlohmann::json::parse(line);
    CHECK(entry.contains("step"));
    CHECK(entry.contains("dev_ecsp_f1"));
    ++lines;
  }
  CHECK(lines >= 1);

  // refuses to clobber without --overwrite
  const std::string base = "train --corpus '" + f.corpus.string() + "' --config '" +
                           f.config.string() + "' --out '" + f.model_dir.string() + "'";
  const RunResult blocked = run_cli(base);
  CHECK(blocked.code == 2);
  CHECK(blocked.out.find("already contains metadata.json") != std::string::npos);
  CHECK(run_cli(base + " --overwrite").code == 0);
}

TEST_CASE("train on one fold records the split in run info") {
  Fixture& f = fixture();
  const fs::path out = f.root / "fold_model";
  const RunResult r = run_cli("train --corpus '" + f.corpus.string() + "' --config '" +
                              f.config.string() + "' --out '" + out.string() +
                              "' --fold 0 --folds 4");
  CHECK(r.code == 0);
  const auto info = nlohmann::json::parse(read_file(out / "run_info.json"));
  CHECK(info.at("fold").get<int>() == 0);
  CHECK(info.at("folds").get<int>() == 4);

  const RunResult bad = run_cli("train --corpus '" + f.corpus.string() + "' --config '" +
                                f.config.string() + "' --out '" + (f.root / "x").string() +
                                "' --fold 5 --folds 4");
  CHECK(bad.code == 2);
  CHECK(bad.out.find("--fold must be in [0, --folds)") != std::string::npos);
}

TEST_CASE("predict emits one JSONL object per document") {
  Fixture& f = fixture();
  const fs::path out = f.root / "predictions.jsonl";
  const RunResult r = run_cli("predict --model '" + f.model_dir.string() + "' --input '" +
                              f.corpus.string() + "' --output '" + out.string() + "'");
  CHECK(r.code == 0);

  std::ifstream in(out);
  std::string line;
  int lines = 0;
  int pairs = 0;
  while (std::getline(in, line)) {
    const auto obj = nlohmann::json::parse(line);
    CHECK(obj.at("doc_id").get<std::string>() == "ov" + std::to_string(lines));
    for (const auto& p : obj.at("pairs")) {
      CHECK(p.at("emotion").contains("start"));
      CHECK(p.at("emotion").contains("end"));
      CHECK(p.at("cause").contains("start"));
      CHECK(p.at("category").is_string());
      CHECK(p.at("score").is_number());
      ++pairs;
    }
    ++lines;
  }
  CHECK(lines == 8);
  CHECK(pairs > 0);  // the overfit run should extract something
}

TEST_CASE("eval reports the four tasks per granularity") {
  Fixture& f = fixture();
  const RunResult span = run_cli("eval --model '" + f.model_dir.string() + "' --corpus '" +
                                 f.corpus.string() + "' --mode span");
  CHECK(span.code == 0);
  const auto span_obj = nlohmann::json::parse(span.out);
  for (const char* task : {"EESE", "ECSE", "ECSPE", "ECSP"})
    CHECK(span_obj.at("tasks").contains(task));

  const RunResult clause = run_cli("eval --model '" + f.model_dir.string() + "' --corpus '" +
                                   f.corpus.string() + "' --mode clause --oracle-emotion");
  CHECK(clause.code == 0);
  const auto clause_obj = nlohmann::json::parse(clause.out);
  for (const char* task : {"EEE_clause", "CE_clause", "ECPE_clause", "ECE_clause"})
    CHECK(clause_obj.at("tasks").contains(task));

  const RunResult bad = run_cli("eval --model '" + f.model_dir.string() + "' --corpus '" +
                                f.corpus.string() + "' --mode span --oracle-emotion");
  CHECK(bad.code == 2);
  CHECK(bad.out.find("--oracle-emotion requires --mode clause") != std::string::npos);
}

TEST_CASE("cross-validation reports are deterministic across job counts") {
  Fixture& f = fixture();
  const std::string overrides = " --set train.total_steps=8 train.eval_interval_steps=4";
  const fs::path a = f.root / "cv_a";
  const fs::path b = f.root / "cv_b";
  const RunResult ra =
      run_cli("crossval --corpus '" + f.corpus.string() + "' --config '" + f.config.string() +
              "' --out '" + a.string() + "' --folds 3 --jobs 1" + overrides);
  CHECK(ra.code == 0);
  const RunResult rb =
      run_cli("crossval --corpus '" + f.corpus.string() + "' --config '" + f.config.string() +
              "' --out '" + b.string() + "' --folds 3 --jobs 3" + overrides);
  CHECK(rb.code == 0);

  const std::string report_a = read_file(a / "report.json");
  CHECK(report_a == read_file(b / "report.json"));
  CHECK(ra.out == report_a);  // the report is echoed verbatim

  const auto obj = nlohmann::json::parse(report_a);
  CHECK(obj.at("mode") == "span");
  CHECK(obj.at("folds").size() == 3);
  for (const auto& fold : obj.at("folds")) CHECK(fold.contains("tasks"));
  CHECK(obj.at("mean").contains("ECSP"));
  for (int i = 0; i < 3; ++i)
    CHECK(fs::exists(a / ("fold_" + std::to_string(i)) / "metadata.json"));

  const RunResult bad_folds =
      run_cli("crossval --corpus '" + f.corpus.string() + "' --config '" + f.config.string() +
              "' --out '" + (f.root / "cv_bad").string() + "' --folds 1" + overrides);
  CHECK(bad_folds.code == 2);
}

TEST_CASE("failures map onto the documented exit codes") {
  Fixture& f = fixture();
  CHECK(run_cli("").code == 2);                 // missing subcommand
  CHECK(run_cli("frobnicate").code == 2);       // unknown subcommand
  CHECK(run_cli("stats").code == 2);            // missing required option

  const RunResult no_corpus = run_cli("stats --corpus '" + (f.root / "nope.jsonl").string() + "'");
  CHECK(no_corpus.code == 2);
  CHECK(no_corpus.out.find("error: ") != std::string::npos);

  const fs::path bad_jsonl = f.root / "bad.jsonl";
  std::ofstream(bad_jsonl) << "{\"doc_id\": \"a\"\n";
  CHECK(run_cli("stats --corpus '" + bad_jsonl.string() + "'").code == 2);

  const RunResult no_steps =
      run_cli("train --corpus '" + f.corpus.string() + "' --config '" + f.bare_config.string() +
              "' --out '" + (f.root / "ns").string() + "'");
  CHECK(no_steps.code == 2);
  CHECK(no_steps.out.find("train.total_steps") != std::string::npos);

  const RunResult bad_key =
      run_cli("train --corpus '" + f.corpus.string() + "' --config '" + f.config.string() +
              "' --out '" + (f.root / "bk").string() + "' --set bogus.key=1");
  CHECK(bad_key.code == 2);
  CHECK(bad_key.out.find("bogus.key") != std::string::npos);

  const RunResult diverged =
      run_cli("train --corpus '" + f.corpus.string() + "' --config '" + f.config.string() +
              "' --out '" + (f.root / "dv").string() + "' --set train.peak_lr=1e300");
  CHECK(diverged.code == 3);
  CHECK(diverged.out.find("non-finite loss") != std::string::npos);

  const RunResult no_model = run_cli("predict --model '" + (f.root / "ghost").string() +
                                     "' --input '" + f.corpus.string() + "' --output '" +
                                     (f.root / "p.jsonl").string() + "'");
  CHECK(no_model.code == 4);
}
