#include "ecsp/model.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include "ecsp/errors.hpp"
#include "json.hpp"

namespace ecsp {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr char kBlobMagic[8] = {'E', 'C', 'S', 'P', 'P', 'R', 'M', '1'};
constexpr const char* kMetadataFile = "metadata.json";
constexpr const char* kBlobFile = "params.bin";

EncoderConfig encoder_config_of(const RunConfig& config) {
  EncoderConfig ec;
  ec.kind = config.encoder_kind;
  ec.model_id = config.encoder_model_id;
  ec.hidden_dim = config.encoder_hidden_dim;
  ec.max_positions = config.encoder_max_positions;
  ec.trainable = config.encoder_trainable;
  return ec;
}

template <typename T>
void write_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ModelIoError("truncated parameter blob while reading " + what);
  return v;
}

}  // namespace

Model::Model(RunConfig config_, std::vector<std::string> categories_,
             std::unique_ptr<Encoder> encoder_)
    : config(std::move(config_)),
      categories(std::move(categories_)),
      encoder(std::move(encoder_)),
      span_head(encoder->dim(), config.span_phi_dim, config.span_max_len),
      pair_head(encoder->dim(), config.span_phi_dim, config.pair_psi_dim,
                config.pair_dist_buckets, static_cast<int>(categories.size())) {}

Model Model::create(const RunConfig& config, std::vector<std::string> categories) {
  config.validate();
  Model model(config, std::move(categories), make_encoder(encoder_config_of(config),
                                                          config.train_seed));
  model.span_head.init_parameters(config.train_seed);
  model.pair_head.init_parameters(config.train_seed);
  return model;
}

int Model::category_index(const std::string& category) const {
  const auto it = std::find(categories.begin(), categories.end(), category);
  return it == categories.end() ? -1 : static_cast<int>(it - categories.begin());
}

std::vector<ParamRef> Model::trainable_parameters() {
  std::vector<ParamRef> params = encoder->parameters();
  for (ParamRef& p : span_head.parameters()) params.push_back(p);
  for (ParamRef& p : pair_head.parameters()) params.push_back(p);
  return params;
}

std::vector<ParamRef> Model::state_tensors() {
  // Frozen encoders expose no tensors; their state is recoverable from
  // the identity string alone.
  return trainable_parameters();
}

void Model::zero_grads() {
  for (ParamRef& p : state_tensors()) p.grad->setZero();
}

std::vector<Eigen::MatrixXd> Model::snapshot_state() {
  std::vector<Eigen::MatrixXd> snap;
  for (ParamRef& p : state_tensors()) snap.push_back(*p.value);
  return snap;
}

void Model::restore_state(const std::vector<Eigen::MatrixXd>& snapshot) {
  std::vector<ParamRef> params = state_tensors();
  if (snapshot.size() != params.size())
    throw ModelIoError("state snapshot does not match the model's tensor set");
  for (size_t i = 0; i < params.size(); ++i) *params[i].value = snapshot[i];
}

void save_checkpoint(const std::string& dir, Model& model, std::int64_t step, double dev_f1) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ModelIoError("cannot create checkpoint directory " + dir + ": " + ec.message());

  json meta;
  meta["schema_version"] = kCheckpointSchemaVersion;
  meta["config"] = model.config.to_json();
  meta["categories"] = model.categories;
  meta["encoder_id"] = model.encoder->identity();
  meta["step"] = step;
  meta["dev_f1"] = dev_f1;

  const fs::path meta_path = fs::path(dir) / kMetadataFile;
  {
    std::ofstream out(meta_path);
    if (!out) throw ModelIoError("cannot write " + meta_path.string());
    out << meta.dump(2) << "\n";
  }

  const fs::path blob_path = fs::path(dir) / kBlobFile;
  std::ofstream out(blob_path, std::ios::binary);
  if (!out) throw ModelIoError("cannot write " + blob_path.string());
  out.write(kBlobMagic, sizeof(kBlobMagic));
  const std::vector<ParamRef> params = model.state_tensors();
  write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const ParamRef& p : params) {
    write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(p.value->rows()));
    write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(p.value->cols()));
    for (Eigen::Index i = 0; i < p.value->rows(); ++i)
      for (Eigen::Index j = 0; j < p.value->cols(); ++j) write_raw<double>(out, (*p.value)(i, j));
  }
  if (!out) throw ModelIoError("failed writing " + blob_path.string());
}

Checkpoint load_checkpoint(const std::string& dir) {
  const fs::path meta_path = fs::path(dir) / kMetadataFile;
  std::ifstream meta_in(meta_path);
  if (!meta_in) throw ModelIoError("checkpoint metadata not found: " + meta_path.string());
  json meta;
  try {
    meta_in >> meta;
  } catch (const json::parse_error& e) {
    throw ModelIoError("malformed checkpoint metadata " + meta_path.string() + ": " + e.what());
  }

  for (const char* key : {"schema_version", "config", "categories", "encoder_id", "step",
                          "dev_f1"})
    if (!meta.contains(key))
      throw ModelIoError("checkpoint metadata missing key \"" + std::string(key) + "\"");

  const int schema = meta["schema_version"].get<int>();
  if (schema != kCheckpointSchemaVersion) {
    throw ModelIoError("unsupported checkpoint schema_version " + std::to_string(schema) +
                       " (expected " + std::to_string(kCheckpointSchemaVersion) + ")");
  }

  RunConfig config;
  try {
    config = RunConfig::from_json(meta["config"]);
  } catch (const ConfigError& e) {
    throw ModelIoError(std::string("checkpoint config invalid: ") + e.what());
  }
  std::vector<std::string> categories;
  for (const auto& c : meta["categories"]) categories.push_back(c.get<std::string>());

  const std::string encoder_id = meta["encoder_id"].get<std::string>();
  Model model(config, std::move(categories),
              encoder_from_identity(encoder_id, encoder_config_of(config)));

  const fs::path blob_path = fs::path(dir) / kBlobFile;
  std::ifstream in(blob_path, std::ios::binary);
  if (!in) throw ModelIoError("checkpoint parameter blob not found: " + blob_path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kBlobMagic, sizeof(magic)) != 0)
    throw ModelIoError("bad parameter blob magic in " + blob_path.string());

  std::map<std::string, ParamRef> by_name;
  for (ParamRef p : model.state_tensors()) by_name[p.name] = p;

  const auto count = read_raw<std::uint32_t>(in, "tensor count");
  std::map<std::string, bool> seen;
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = read_raw<std::uint32_t>(in, "tensor name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw ModelIoError("truncated parameter blob while reading a tensor name");
    const auto rows = read_raw<std::uint32_t>(in, name + " rows");
    const auto cols = read_raw<std::uint32_t>(in, name + " cols");

    const auto it = by_name.find(name);
    if (it == by_name.end())
      throw ModelIoError("parameter blob contains unknown tensor \"" + name + "\"");
    Eigen::MatrixXd& m = *it->second.value;
    if (static_cast<std::uint32_t>(m.rows()) != rows ||
        static_cast<std::uint32_t>(m.cols()) != cols) {
      throw ModelIoError("tensor \"" + name + "\" has shape " + std::to_string(rows) + "x" +
                         std::to_string(cols) + " on disk but " + std::to_string(m.rows()) + "x" +
                         std::to_string(m.cols()) + " in the model");
    }
    for (std::uint32_t i = 0; i < rows; ++i)
      for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = read_raw<double>(in, name);
    seen[name] = true;
  }
  for (const auto& [name, ref] : by_name)
    if (!seen.count(name))
      throw ModelIoError("parameter blob is missing tensor \"" + name + "\"");

  Checkpoint ckpt{std::move(model), meta["step"].get<std::int64_t>(),
                  meta["dev_f1"].get<double>()};
  return ckpt;
}

}  // namespace ecsp
