#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "ecsp/errors.hpp"
#include "ecsp/model.hpp"
#include "synthetic.hpp"

using namespace ecsp;
namespace fs = std::filesystem;

namespace {

RunConfig small_config(bool trainable_encoder) {
  RunConfig config;
  config.encoder_hidden_dim = 8;
  config.encoder_max_positions = 32;
  config.encoder_trainable = trainable_encoder;
  config.span_max_len = 3;
  config.span_phi_dim = 4;
  config.pair_psi_dim = 4;
  config.pair_dist_buckets = 8;
  config.train_seed = 11;
  return config;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("ecsp_model_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_bytes(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  REQUIRE(out.good());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Document sample_doc() {
  return synth::make_doc("m1", {{"alpha", "beta", "gamma", "delta"}, {"eps", "zeta", "eta"}},
                         {{{0, 1}, {4, 5}, "joy"}});
}

// Biased so the fresh random model actually extracts something.
Model eager_model(const RunConfig& config, std::vector<std::string> categories) {
  Model model = Model::create(config, std::move(categories));
  model.span_head.bias(0, 0) += 2.0;   // prefer emotion
  model.span_head.bias(1, 0) += 1.5;   // and cause over none
  model.pair_head.bias(0, 0) += 3.0;   // prefer the first category over none
  return model;
}

bool same_pairs(const std::vector<ExtractedPair>& a, const std::vector<ExtractedPair>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].emotion != b[i].emotion || a[i].cause != b[i].cause) return false;
    if (a[i].category != b[i].category || a[i].score != b[i].score) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("model creation wires dimensions and the category order") {
  Model model = Model::create(small_config(true), {"anger", "joy"});
  CHECK(model.span_head.rep_dim() == 3 * 8 + 4);
  CHECK(model.pair_head.rep_dim() == 8 * 8 + 2 * 4 + 4);
  CHECK(model.pair_head.num_labels() == 3);
  CHECK(model.pair_head.none_label() == 2);
  CHECK(model.category_index("anger") == 0);
  CHECK(model.category_index("joy") == 1);
  CHECK(model.category_index("envy") == -1);

  std::set<std::string> names;
  size_t count = 0;
  for (const ParamRef& p : model.trainable_parameters()) {
    names.insert(p.name);
    ++count;
    REQUIRE(p.value != nullptr);
    REQUIRE(p.grad != nullptr);
    CHECK(p.grad->rows() == p.value->rows());
    CHECK(p.grad->cols() == p.value->cols());
  }
  CHECK(count == 10);  // 4 encoder tensors + 2 heads x 3
  CHECK(names.size() == count);
  CHECK(names.count("encoder.token_weight") == 1);
  CHECK(names.count("span_head.phi") == 1);
  CHECK(names.count("pair_head.psi") == 1);

  Model frozen = Model::create(small_config(false), {"joy"});
  CHECK(frozen.trainable_parameters().size() == 6);
}

TEST_CASE("snapshot and restore round-trip parameter values") {
  Model model = Model::create(small_config(true), {"joy"});
  const std::vector<Eigen::MatrixXd> snap = model.snapshot_state();
  model.span_head.weight.setConstant(0.5);
  model.pair_head.psi.setZero();
  model.restore_state(snap);
  auto params = model.state_tensors();
  REQUIRE(params.size() == snap.size());
  for (size_t i = 0; i < params.size(); ++i) CHECK(synth::same(*params[i].value, snap[i]));
  CHECK_THROWS_AS(model.restore_state({}), ModelIoError);
}

TEST_CASE("checkpoints round-trip every tensor, the metadata and predictions") {
  const fs::path dir = fresh_dir("roundtrip");
  Model model = eager_model(small_config(true), {"joy", "sadness"});
  const Document doc = sample_doc();
  const std::vector<ExtractedPair> before = extract_pairs(doc, model);
  REQUIRE(!before.empty());

  save_checkpoint(dir.string(), model, 17, 0.345);
  Checkpoint ckpt = load_checkpoint(dir.string());
  CHECK(ckpt.step == 17);
  CHECK(ckpt.dev_f1 == 0.345);
  CHECK(ckpt.model.categories == std::vector<std::string>{"joy", "sadness"});
  CHECK(ckpt.model.encoder->identity() == model.encoder->identity());
  CHECK(ckpt.model.config.to_json().dump() == model.config.to_json().dump());

  auto original = model.state_tensors();
  auto loaded = ckpt.model.state_tensors();
  REQUIRE(original.size() == loaded.size());
  for (size_t i = 0; i < original.size(); ++i) {
    CHECK(original[i].name == loaded[i].name);
    CHECK(synth::same(*original[i].value, *loaded[i].value));
  }

  CHECK(same_pairs(before, extract_pairs(doc, ckpt.model)));

  // saving the loaded model reproduces the blob byte for byte
  const fs::path dir2 = fresh_dir("roundtrip2");
  save_checkpoint(dir2.string(), ckpt.model, 17, 0.345);
  CHECK(read_bytes(dir / "params.bin") == read_bytes(dir2 / "params.bin"));
  CHECK(read_bytes(dir / "metadata.json") == read_bytes(dir2 / "metadata.json"));
}

TEST_CASE("checkpoint metadata carries exactly the documented keys") {
  const fs::path dir = fresh_dir("meta");
  Model model = Model::create(small_config(false), {"joy"});
  save_checkpoint(dir.string(), model, 3, 0.0);

  const auto meta = nlohmann::ordered_json::parse(read_bytes(dir / "metadata.json"));
  std::vector<std::string> keys;
  for (const auto& kv : meta.items()) keys.push_back(kv.key());
  CHECK(keys == std::vector<std::string>{"schema_version", "config", "categories", "encoder_id",
                                         "step", "dev_f1"});
  CHECK(meta["schema_version"].get<int>() == 1);
  CHECK(meta["encoder_id"].get<std::string>() == model.encoder->identity());
}

TEST_CASE("a frozen encoder is rebuilt from its identity string") {
  const fs::path dir = fresh_dir("frozen");
  Model model = eager_model(small_config(false), {"joy"});
  CHECK(model.state_tensors().size() == 6);
  save_checkpoint(dir.string(), model, 1, 0.0);
  Checkpoint ckpt = load_checkpoint(dir.string());

  const std::vector<std::string> tokens = {"alpha", "beta", "gamma"};
  const TokenEncoding a = model.encoder->encode(tokens);
  const TokenEncoding b = ckpt.model.encoder->encode(tokens);
  CHECK(synth::same(a.hidden, b.hidden));
  CHECK(synth::same(a.global, b.global));
  CHECK(same_pairs(extract_pairs(sample_doc(), model), extract_pairs(sample_doc(), ckpt.model)));
}

TEST_CASE("checkpoint loading rejects corruption with specific diagnostics") {
  const fs::path dir = fresh_dir("corrupt");
  Model model = Model::create(small_config(true), {"joy"});
  save_checkpoint(dir.string(), model, 5, 0.25);
  const std::string good_blob = read_bytes(dir / "params.bin");
  const std::string good_meta = read_bytes(dir / "metadata.json");

  auto expect_failure = [&](const std::string& needle) {
    try {
      load_checkpoint(dir.string());
      FAIL(("expected ModelIoError containing: " + needle));
    } catch (const ModelIoError& e) {
      const std::string what = e.what();
      CAPTURE(what);
      CHECK(what.find(needle) != std::string::npos);
    }
  };
  auto restore = [&] {
    write_bytes(dir / "params.bin", good_blob);
    write_bytes(dir / "metadata.json", good_meta);
  };

  SUBCASE("missing directory") {
    try {
      load_checkpoint((dir / "nope").string());
      FAIL("expected ModelIoError");
    } catch (const ModelIoError& e) {
      CHECK(std::string(e.what()).find("metadata not found") != std::string::npos);
    }
  }

  SUBCASE("malformed metadata") {
    write_bytes(dir / "metadata.json", "{ this is not json");
    expect_failure("malformed checkpoint metadata");
    restore();
  }

  SUBCASE("missing metadata key") {
    auto meta = nlohmann::ordered_json::parse(good_meta);
    meta.erase("encoder_id");
    write_bytes(dir / "metadata.json", meta.dump(2));
    expect_failure("missing key \"encoder_id\"");
    restore();
  }

  SUBCASE("unsupported schema version") {
    auto meta = nlohmann::ordered_json::parse(good_meta);
    meta["schema_version"] = 2;
    write_bytes(dir / "metadata.json", meta.dump(2));
    expect_failure("unsupported checkpoint schema_version 2");
    restore();
  }

  SUBCASE("bad blob magic") {
    std::string blob = good_blob;
    blob[0] = 'X';
    write_bytes(dir / "params.bin", blob);
    expect_failure("bad parameter blob magic");
    restore();
  }

  SUBCASE("truncated blob") {
    write_bytes(dir / "params.bin", good_blob.substr(0, good_blob.size() / 2));
    expect_failure("truncated parameter blob");
    restore();
  }

  SUBCASE("unknown tensor name") {
    std::string blob = good_blob;
    blob[16] = 'Z';  // first byte of the first tensor name
    write_bytes(dir / "params.bin", blob);
    expect_failure("unknown tensor");
    restore();
  }

  SUBCASE("shape mismatch") {
    std::string blob = good_blob;
    std::uint32_t name_len = 0;
    std::memcpy(&name_len, blob.data() + 12, sizeof(name_len));
    const size_t rows_at = 16 + name_len;
    blob[rows_at] = static_cast<char>(blob[rows_at] + 1);
    write_bytes(dir / "params.bin", blob);
    expect_failure("on disk but");
    restore();
  }

  SUBCASE("missing tensor") {
    std::string blob = good_blob;
    std::uint32_t count = 0;
    std::memcpy(&count, blob.data() + 8, sizeof(count));
    --count;
    std::memcpy(blob.data() + 8, &count, sizeof(count));
    write_bytes(dir / "params.bin", blob);
    expect_failure("missing tensor");
    restore();
  }

  SUBCASE("missing blob") {
    fs::remove(dir / "params.bin");
    expect_failure("parameter blob not found");
    restore();
  }
}

TEST_CASE("save_checkpoint refuses an uncreatable directory") {
  const fs::path file = fs::temp_directory_path() / "ecsp_model_plainfile";
  write_bytes(file, "x");
  Model model = Model::create(small_config(false), {"joy"});
  CHECK_THROWS_AS(save_checkpoint((file / "sub").string(), model, 0, 0.0), ModelIoError);
  fs::remove(file);
}
