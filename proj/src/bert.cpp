#include "ecsp/bert.hpp"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ecsp/errors.hpp"

namespace ecsp {

namespace fs = std::filesystem;

namespace {

constexpr char kWeightsMagic[8] = {'E', 'C', 'S', 'P', 'B', 'R', 'T', '1'};

template <typename T>
void write_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ModelIoError("truncated weights file while reading " + what);
  return v;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) +
         x * std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
}

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    Eigen::ArrayXd e = (logits.row(i).array() - m).exp();
    out.row(i) = e / e.sum();
  }
  return out;
}

struct LnCache {
  Eigen::MatrixXd xhat;      // (n, h)
  Eigen::VectorXd inv_std;   // per row
};

Eigen::MatrixXd ln_forward(const Eigen::MatrixXd& x, const Eigen::MatrixXd& gamma,
                           const Eigen::MatrixXd& beta, double eps, LnCache* cache) {
  const Eigen::Index n = x.rows(), h = x.cols();
  Eigen::MatrixXd xhat(n, h);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.row(i).mean();
    const Eigen::Array<double, 1, Eigen::Dynamic> centered = x.row(i).array() - mu;
    const double var = centered.square().mean();
    const double inv = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (centered * inv).matrix();
    inv_std(i) = inv;
  }
  Eigen::MatrixXd y = xhat;
  y.array().rowwise() *= gamma.row(0).array();
  y.array().rowwise() += beta.row(0).array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

Eigen::MatrixXd ln_backward(const Eigen::MatrixXd& d_y, const LnCache& cache,
                            const Eigen::MatrixXd& gamma, Eigen::MatrixXd& d_gamma,
                            Eigen::MatrixXd& d_beta) {
  const Eigen::Index n = d_y.rows(), h = d_y.cols();
  d_gamma.row(0) += (d_y.array() * cache.xhat.array()).colwise().sum().matrix();
  d_beta.row(0) += d_y.colwise().sum();

  using RowArray = Eigen::Array<double, 1, Eigen::Dynamic>;
  Eigen::MatrixXd d_x(n, h);
  for (Eigen::Index i = 0; i < n; ++i) {
    const RowArray g = d_y.row(i).array() * gamma.row(0).array();
    const RowArray xh = cache.xhat.row(i).array();
    const double mean_g = g.mean();
    const double mean_gx = (g * xh).mean();
    d_x.row(i) = (cache.inv_std(i) * (g - mean_g - xh * mean_gx)).matrix();
  }
  return d_x;
}

}  // namespace

// ---------------------------------------------------------------------------
// WordPiece

WordPieceVocab WordPieceVocab::load(const std::string& vocab_path) {
  std::ifstream in(vocab_path);
  if (!in) throw ModelIoError("cannot open vocabulary file: " + vocab_path);
  WordPieceVocab v;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!v.index_.count(line)) {
      v.index_.emplace(line, static_cast<int>(v.pieces_.size()));
      v.pieces_.push_back(line);
    }
  }
  v.cls_id_ = v.piece_id("[CLS]");
  v.sep_id_ = v.piece_id("[SEP]");
  v.unk_id_ = v.piece_id("[UNK]");
  if (v.cls_id_ < 0 || v.sep_id_ < 0 || v.unk_id_ < 0)
    throw ModelIoError("vocabulary " + vocab_path + " lacks [CLS]/[SEP]/[UNK]");
  return v;
}

WordPieceVocab WordPieceVocab::from_tokens(const std::vector<std::string>& tokens) {
  WordPieceVocab v;
  auto add = [&v](const std::string& piece) {
    if (!v.index_.count(piece)) {
      v.index_.emplace(piece, static_cast<int>(v.pieces_.size()));
      v.pieces_.push_back(piece);
    }
  };
  for (const char* s : {"[PAD]", "[UNK]", "[CLS]", "[SEP]"}) add(s);
  for (const std::string& t : tokens) add(t);
  v.cls_id_ = v.piece_id("[CLS]");
  v.sep_id_ = v.piece_id("[SEP]");
  v.unk_id_ = v.piece_id("[UNK]");
  return v;
}

int WordPieceVocab::piece_id(const std::string& piece) const {
  const auto it = index_.find(piece);
  return it == index_.end() ? -1 : it->second;
}

std::vector<int> WordPieceVocab::tokenize(const std::string& token) const {
  std::vector<int> out;
  size_t start = 0;
  while (start < token.size()) {
    size_t end = token.size();
    int id = -1;
    while (end > start) {
      std::string piece = token.substr(start, end - start);
      if (start > 0) piece = "##" + piece;
      const auto it = index_.find(piece);
      if (it != index_.end()) {
        id = it->second;
        break;
      }
      --end;
    }
    if (id < 0) return {unk_id_};  // whole token falls back to [UNK]
    out.push_back(id);
    start = end;
  }
  if (out.empty()) out.push_back(unk_id_);
  return out;
}

// ---------------------------------------------------------------------------
// BertModel

struct BertModel::Tape {
  std::vector<int> piece_ids;
  LnCache ln0;
  Eigen::MatrixXd embed_mask;
  Eigen::MatrixXd embed_out;  // input to layer 0

  struct Layer {
    Eigen::MatrixXd x;  // input
    Eigen::MatrixXd q, k, v;
    std::vector<Eigen::MatrixXd> attn;  // per-head softmaxed scores
    Eigen::MatrixXd o;                  // concatenated head outputs
    Eigen::MatrixXd attn_mask;
    LnCache ln1;
    Eigen::MatrixXd x1;
    Eigen::MatrixXd f1;  // pre-gelu
    Eigen::MatrixXd g;   // gelu(f1)
    Eigen::MatrixXd ffn_mask;
    LnCache ln2;
  };
  std::vector<Layer> layers;
  Eigen::MatrixXd output;
};

namespace {

std::string layer_name(int i, const char* sub) {
  return "layer." + std::to_string(i) + "." + sub;
}

}  // namespace

BertModel::BertModel(BertDims dims) : dims_(dims) {
  if (dims_.hidden % dims_.heads != 0)
    throw ConfigError("transformer hidden size must be divisible by the head count");
  auto add = [this](const std::string& name, int rows, int cols) {
    tensor_index_[name] = static_cast<int>(tensors_.size());
    tensors_.emplace_back(name, Eigen::MatrixXd::Zero(rows, cols));
    grads_.push_back(Eigen::MatrixXd::Zero(rows, cols));
  };
  add("embeddings.word", dims_.vocab_size, dims_.hidden);
  add("embeddings.position", dims_.max_positions, dims_.hidden);
  add("embeddings.token_type", 2, dims_.hidden);
  add("embeddings.ln.gamma", 1, dims_.hidden);
  add("embeddings.ln.beta", 1, dims_.hidden);
  for (int i = 0; i < dims_.layers; ++i) {
    for (const char* w : {"attn.q", "attn.k", "attn.v", "attn.out"}) {
      add(layer_name(i, w) + ".w", dims_.hidden, dims_.hidden);
      add(layer_name(i, w) + ".b", 1, dims_.hidden);
    }
    add(layer_name(i, "attn.ln.gamma"), 1, dims_.hidden);
    add(layer_name(i, "attn.ln.beta"), 1, dims_.hidden);
    add(layer_name(i, "ffn.in.w"), dims_.hidden, dims_.intermediate);
    add(layer_name(i, "ffn.in.b"), 1, dims_.intermediate);
    add(layer_name(i, "ffn.out.w"), dims_.intermediate, dims_.hidden);
    add(layer_name(i, "ffn.out.b"), 1, dims_.hidden);
    add(layer_name(i, "ffn.ln.gamma"), 1, dims_.hidden);
    add(layer_name(i, "ffn.ln.beta"), 1, dims_.hidden);
  }
}

Eigen::MatrixXd& BertModel::tensor(const std::string& name) {
  const auto it = tensor_index_.find(name);
  if (it == tensor_index_.end()) throw std::logic_error("unknown tensor " + name);
  return tensors_[static_cast<size_t>(it->second)].second;
}

const Eigen::MatrixXd& BertModel::tensor(const std::string& name) const {
  const auto it = tensor_index_.find(name);
  if (it == tensor_index_.end()) throw std::logic_error("unknown tensor " + name);
  return tensors_[static_cast<size_t>(it->second)].second;
}

void BertModel::init_random(std::uint64_t seed) {
  Rng rng(mix64(seed ^ 0x62657274ULL));
  for (auto& [name, m] : tensors_) {
    if (name.find(".ln.gamma") != std::string::npos)
      m.setOnes();
    else if (name.find(".ln.beta") != std::string::npos || name.ends_with(".b"))
      m.setZero();
    else
      uniform_init(m, 0.05, rng);
  }
}

Eigen::MatrixXd BertModel::embed(const std::vector<int>& piece_ids) const {
  const Eigen::MatrixXd& word = tensor("embeddings.word");
  const Eigen::MatrixXd& pos = tensor("embeddings.position");
  const Eigen::MatrixXd& type = tensor("embeddings.token_type");
  if (static_cast<Eigen::Index>(piece_ids.size()) > pos.rows()) {
    std::ostringstream os;
    os << "window required: " << piece_ids.size() << " pieces exceed encoder positions "
       << pos.rows();
    throw std::runtime_error(os.str());
  }
  Eigen::MatrixXd x(static_cast<Eigen::Index>(piece_ids.size()), dims_.hidden);
  for (size_t i = 0; i < piece_ids.size(); ++i) {
    const int id = piece_ids[i];
    if (id < 0 || id >= dims_.vocab_size)
      throw std::out_of_range("piece id " + std::to_string(id) + " outside the vocabulary");
    x.row(static_cast<Eigen::Index>(i)) =
        word.row(id) + pos.row(static_cast<Eigen::Index>(i)) + type.row(0);
  }
  return x;
}

namespace {

Eigen::MatrixXd maybe_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng* rng) {
  if (rng != nullptr && rate > 0.0) return dropout_mask(rows, cols, rate, *rng);
  return Eigen::MatrixXd::Constant(rows, cols, 1.0);
}

}  // namespace

// Shared forward; fills `tape` when given (training mode).
Eigen::MatrixXd BertModel::run_forward(const std::vector<int>& ids, Tape* tape,
                                       double dropout_rate, Rng* rng) const {
  const BertDims& dims = dims_;
  const int heads = dims.heads;
  const int dh = dims.hidden / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  auto t = [this](const std::string& name) -> const Eigen::MatrixXd& { return tensor(name); };

  LnCache ln0;
  Eigen::MatrixXd x = ln_forward(embed(ids), t("embeddings.ln.gamma"), t("embeddings.ln.beta"),
                                 dims.layer_norm_eps, tape ? &ln0 : nullptr);
  Eigen::MatrixXd embed_mask = maybe_mask(x.rows(), x.cols(), dropout_rate, rng);
  x = x.cwiseProduct(embed_mask);
  if (tape) {
    tape->piece_ids = ids;
    tape->ln0 = std::move(ln0);
    tape->embed_mask = std::move(embed_mask);
    tape->embed_out = x;
    tape->layers.resize(static_cast<size_t>(dims.layers));
  }

  for (int li = 0; li < dims.layers; ++li) {
    BertModel::Tape::Layer* L = tape ? &tape->layers[static_cast<size_t>(li)] : nullptr;
    if (L) L->x = x;

    Eigen::MatrixXd q = x * t(layer_name(li, "attn.q.w"));
    q.rowwise() += t(layer_name(li, "attn.q.b")).row(0);
    Eigen::MatrixXd k = x * t(layer_name(li, "attn.k.w"));
    k.rowwise() += t(layer_name(li, "attn.k.b")).row(0);
    Eigen::MatrixXd v = x * t(layer_name(li, "attn.v.w"));
    v.rowwise() += t(layer_name(li, "attn.v.b")).row(0);

    Eigen::MatrixXd o(x.rows(), dims.hidden);
    std::vector<Eigen::MatrixXd> attn;
    if (L) attn.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      const auto qh = q.middleCols(h * dh, dh);
      const auto kh = k.middleCols(h * dh, dh);
      const auto vh = v.middleCols(h * dh, dh);
      Eigen::MatrixXd a = softmax_rows(qh * kh.transpose() * scale);
      o.middleCols(h * dh, dh) = a * vh;
      if (L) attn.push_back(std::move(a));
    }
    Eigen::MatrixXd attn_out = o * t(layer_name(li, "attn.out.w"));
    attn_out.rowwise() += t(layer_name(li, "attn.out.b")).row(0);
    Eigen::MatrixXd attn_mask = maybe_mask(attn_out.rows(), attn_out.cols(), dropout_rate, rng);
    attn_out = attn_out.cwiseProduct(attn_mask);

    LnCache ln1;
    Eigen::MatrixXd x1 =
        ln_forward(x + attn_out, t(layer_name(li, "attn.ln.gamma")),
                   t(layer_name(li, "attn.ln.beta")), dims.layer_norm_eps, L ? &ln1 : nullptr);

    Eigen::MatrixXd f1 = x1 * t(layer_name(li, "ffn.in.w"));
    f1.rowwise() += t(layer_name(li, "ffn.in.b")).row(0);
    Eigen::MatrixXd g = f1.unaryExpr([](double v_) { return gelu(v_); });
    Eigen::MatrixXd f2 = g * t(layer_name(li, "ffn.out.w"));
    f2.rowwise() += t(layer_name(li, "ffn.out.b")).row(0);
    Eigen::MatrixXd ffn_mask = maybe_mask(f2.rows(), f2.cols(), dropout_rate, rng);
    f2 = f2.cwiseProduct(ffn_mask);

    LnCache ln2;
    Eigen::MatrixXd x2 =
        ln_forward(x1 + f2, t(layer_name(li, "ffn.ln.gamma")), t(layer_name(li, "ffn.ln.beta")),
                   dims.layer_norm_eps, L ? &ln2 : nullptr);

    if (L) {
      L->q = std::move(q);
      L->k = std::move(k);
      L->v = std::move(v);
      L->attn = std::move(attn);
      L->o = std::move(o);
      L->attn_mask = std::move(attn_mask);
      L->ln1 = std::move(ln1);
      L->x1 = x1;
      L->f1 = std::move(f1);
      L->g = std::move(g);
      L->ffn_mask = std::move(ffn_mask);
      L->ln2 = std::move(ln2);
    }
    x = std::move(x2);
  }
  return x;
}

Eigen::MatrixXd BertModel::forward(const std::vector<int>& piece_ids) const {
  return run_forward(piece_ids, nullptr, 0.0, nullptr);
}

void BertModel::TapeDeleter::operator()(Tape* tape) const { delete tape; }

BertModel::TapePtr BertModel::forward_training(const std::vector<int>& piece_ids,
                                               double dropout_rate, Rng& rng) {
  TapePtr tape(new Tape);
  tape->output = run_forward(piece_ids, tape.get(), dropout_rate, &rng);
  return tape;
}

const Eigen::MatrixXd& BertModel::tape_output(const Tape& tape) const { return tape.output; }

void BertModel::backward(Tape& tape, const Eigen::MatrixXd& d_output) {
  const int heads = dims_.heads;
  const int dh = dims_.hidden / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  auto grad = [this](const std::string& name) -> Eigen::MatrixXd& {
    return grads_[static_cast<size_t>(tensor_index_.at(name))];
  };

  Eigen::MatrixXd d_x = d_output;
  for (int li = dims_.layers - 1; li >= 0; --li) {
    Tape::Layer& L = tape.layers[static_cast<size_t>(li)];

    // ffn layer-norm
    Eigen::MatrixXd d_res2 = ln_backward(d_x, L.ln2, tensor(layer_name(li, "ffn.ln.gamma")),
                                         grad(layer_name(li, "ffn.ln.gamma")),
                                         grad(layer_name(li, "ffn.ln.beta")));
    // ffn
    Eigen::MatrixXd d_f2 = d_res2.cwiseProduct(L.ffn_mask);
    grad(layer_name(li, "ffn.out.w")) += L.g.transpose() * d_f2;
    grad(layer_name(li, "ffn.out.b")).row(0) += d_f2.colwise().sum();
    Eigen::MatrixXd d_g = d_f2 * tensor(layer_name(li, "ffn.out.w")).transpose();
    Eigen::MatrixXd d_f1 =
        d_g.cwiseProduct(L.f1.unaryExpr([](double v_) { return gelu_grad(v_); }));
    grad(layer_name(li, "ffn.in.w")) += L.x1.transpose() * d_f1;
    grad(layer_name(li, "ffn.in.b")).row(0) += d_f1.colwise().sum();
    Eigen::MatrixXd d_x1 = d_res2 + d_f1 * tensor(layer_name(li, "ffn.in.w")).transpose();

    // attention layer-norm
    Eigen::MatrixXd d_res1 = ln_backward(d_x1, L.ln1, tensor(layer_name(li, "attn.ln.gamma")),
                                         grad(layer_name(li, "attn.ln.gamma")),
                                         grad(layer_name(li, "attn.ln.beta")));
    // attention output projection
    Eigen::MatrixXd d_attn_out = d_res1.cwiseProduct(L.attn_mask);
    grad(layer_name(li, "attn.out.w")) += L.o.transpose() * d_attn_out;
    grad(layer_name(li, "attn.out.b")).row(0) += d_attn_out.colwise().sum();
    Eigen::MatrixXd d_o = d_attn_out * tensor(layer_name(li, "attn.out.w")).transpose();

    Eigen::MatrixXd d_q = Eigen::MatrixXd::Zero(L.q.rows(), L.q.cols());
    Eigen::MatrixXd d_k = Eigen::MatrixXd::Zero(L.k.rows(), L.k.cols());
    Eigen::MatrixXd d_v = Eigen::MatrixXd::Zero(L.v.rows(), L.v.cols());
    for (int h = 0; h < heads; ++h) {
      const Eigen::MatrixXd& a = L.attn[static_cast<size_t>(h)];
      const auto qh = L.q.middleCols(h * dh, dh);
      const auto kh = L.k.middleCols(h * dh, dh);
      const auto vh = L.v.middleCols(h * dh, dh);
      const auto d_oh = d_o.middleCols(h * dh, dh);

      Eigen::MatrixXd d_a = d_oh * vh.transpose();
      d_v.middleCols(h * dh, dh) = a.transpose() * d_oh;

      Eigen::MatrixXd d_s(a.rows(), a.cols());
      for (Eigen::Index r = 0; r < a.rows(); ++r) {
        const double dot = d_a.row(r).dot(a.row(r));
        d_s.row(r) = (d_a.row(r).array() - dot) * a.row(r).array();
      }
      d_q.middleCols(h * dh, dh) = d_s * kh * scale;
      d_k.middleCols(h * dh, dh) = d_s.transpose() * qh * scale;
    }
    grad(layer_name(li, "attn.q.w")) += L.x.transpose() * d_q;
    grad(layer_name(li, "attn.q.b")).row(0) += d_q.colwise().sum();
    grad(layer_name(li, "attn.k.w")) += L.x.transpose() * d_k;
    grad(layer_name(li, "attn.k.b")).row(0) += d_k.colwise().sum();
    grad(layer_name(li, "attn.v.w")) += L.x.transpose() * d_v;
    grad(layer_name(li, "attn.v.b")).row(0) += d_v.colwise().sum();

    d_x = d_res1 + d_q * tensor(layer_name(li, "attn.q.w")).transpose() +
          d_k * tensor(layer_name(li, "attn.k.w")).transpose() +
          d_v * tensor(layer_name(li, "attn.v.w")).transpose();
  }

  // embeddings
  d_x = d_x.cwiseProduct(tape.embed_mask);
  Eigen::MatrixXd d_e = ln_backward(d_x, tape.ln0, tensor("embeddings.ln.gamma"),
                                    grad("embeddings.ln.gamma"), grad("embeddings.ln.beta"));
  Eigen::MatrixXd& d_word = grad("embeddings.word");
  Eigen::MatrixXd& d_pos = grad("embeddings.position");
  Eigen::MatrixXd& d_type = grad("embeddings.token_type");
  for (size_t i = 0; i < tape.piece_ids.size(); ++i) {
    const Eigen::Index r = static_cast<Eigen::Index>(i);
    d_word.row(tape.piece_ids[i]) += d_e.row(r);
    d_pos.row(r) += d_e.row(r);
    d_type.row(0) += d_e.row(r);
  }
}

std::vector<ParamRef> BertModel::parameters() {
  std::vector<ParamRef> out;
  out.reserve(tensors_.size());
  for (size_t i = 0; i < tensors_.size(); ++i)
    out.push_back(ParamRef{"bert." + tensors_[i].first, &tensors_[i].second, &grads_[i]});
  return out;
}

void BertModel::save(const std::string& weights_path) const {
  std::ofstream out(weights_path, std::ios::binary);
  if (!out) throw ModelIoError("cannot write weights file: " + weights_path);
  out.write(kWeightsMagic, sizeof(kWeightsMagic));
  for (int v : {dims_.layers, dims_.hidden, dims_.heads, dims_.intermediate, dims_.vocab_size,
                dims_.max_positions})
    write_raw<std::int32_t>(out, v);
  write_raw<double>(out, dims_.layer_norm_eps);
  write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(tensors_.size()));
  for (const auto& [name, m] : tensors_) {
    write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
    write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) write_raw<double>(out, m(i, j));
  }
  if (!out) throw ModelIoError("failed writing weights file: " + weights_path);
}

BertModel BertModel::load(const std::string& weights_path) {
  std::ifstream in(weights_path, std::ios::binary);
  if (!in) throw ModelIoError("cannot open weights file: " + weights_path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kWeightsMagic, sizeof(magic)) != 0)
    throw ModelIoError("bad weights file magic in " + weights_path);

  BertDims dims;
  dims.layers = read_raw<std::int32_t>(in, "layers");
  dims.hidden = read_raw<std::int32_t>(in, "hidden");
  dims.heads = read_raw<std::int32_t>(in, "heads");
  dims.intermediate = read_raw<std::int32_t>(in, "intermediate");
  dims.vocab_size = read_raw<std::int32_t>(in, "vocab_size");
  dims.max_positions = read_raw<std::int32_t>(in, "max_positions");
  dims.layer_norm_eps = read_raw<double>(in, "layer_norm_eps");

  BertModel model(dims);
  const auto count = read_raw<std::uint32_t>(in, "tensor count");
  if (count != model.tensors_.size())
    throw ModelIoError("weights file " + weights_path + " holds " + std::to_string(count) +
                       " tensors, expected " + std::to_string(model.tensors_.size()));
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto name_len = read_raw<std::uint32_t>(in, "tensor name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw ModelIoError("truncated weights file while reading a tensor name");
    const auto rows = read_raw<std::uint32_t>(in, name + " rows");
    const auto cols = read_raw<std::uint32_t>(in, name + " cols");
    const auto it = model.tensor_index_.find(name);
    if (it == model.tensor_index_.end())
      throw ModelIoError("weights file contains unknown tensor \"" + name + "\"");
    Eigen::MatrixXd& m = model.tensors_[static_cast<size_t>(it->second)].second;
    if (static_cast<std::uint32_t>(m.rows()) != rows ||
        static_cast<std::uint32_t>(m.cols()) != cols)
      throw ModelIoError("tensor \"" + name + "\" shape mismatch in " + weights_path);
    for (std::uint32_t i = 0; i < rows; ++i)
      for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = read_raw<double>(in, name);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Encoder adapter

class BertEncoderTape : public EncoderTape {
 public:
  BertEncoderTape(BertEncoder& enc, BertModel::TapePtr tape,
                  std::vector<std::pair<int, int>> ranges)
      : enc_(enc), tape_(std::move(tape)), ranges_(std::move(ranges)) {
    const Eigen::MatrixXd& rows = enc_.model_.tape_output(*tape_);
    encoding_.hidden.resize(static_cast<Eigen::Index>(ranges_.size()), rows.cols());
    for (size_t i = 0; i < ranges_.size(); ++i) {
      const auto [b, e] = ranges_[i];
      encoding_.hidden.row(static_cast<Eigen::Index>(i)) =
          rows.middleRows(b, e - b).colwise().mean();
    }
    encoding_.global = rows.row(0).transpose();
  }

  const TokenEncoding& encoding() const override { return encoding_; }

  void backward(const Eigen::MatrixXd& d_hidden, const Eigen::VectorXd& d_global) override {
    if (!enc_.trainable()) return;
    const Eigen::MatrixXd& rows = enc_.model_.tape_output(*tape_);
    Eigen::MatrixXd d_pieces = Eigen::MatrixXd::Zero(rows.rows(), rows.cols());
    d_pieces.row(0) += d_global.transpose();
    for (size_t i = 0; i < ranges_.size(); ++i) {
      const auto [b, e] = ranges_[i];
      d_pieces.middleRows(b, e - b).rowwise() +=
          d_hidden.row(static_cast<Eigen::Index>(i)) / static_cast<double>(e - b);
    }
    enc_.model_.backward(*tape_, d_pieces);
  }

 private:
  BertEncoder& enc_;
  BertModel::TapePtr tape_;
  std::vector<std::pair<int, int>> ranges_;
  TokenEncoding encoding_;
};

BertEncoder::BertEncoder(std::string model_id, WordPieceVocab vocab, BertModel model,
                         int max_positions, bool trainable)
    : model_id_(std::move(model_id)),
      vocab_(std::move(vocab)),
      model_(std::move(model)),
      max_positions_(max_positions),
      trainable_(trainable) {}

int BertEncoder::max_positions() const { return max_positions_; }

std::pair<std::vector<int>, std::vector<std::pair<int, int>>> BertEncoder::pieces_for(
    std::span<const std::string> tokens) const {
  std::vector<int> ids{vocab_.cls_id()};
  std::vector<std::pair<int, int>> ranges;
  ranges.reserve(tokens.size());
  for (const std::string& token : tokens) {
    const std::vector<int> pieces = vocab_.tokenize(token);
    ranges.emplace_back(static_cast<int>(ids.size()),
                        static_cast<int>(ids.size() + pieces.size()));
    ids.insert(ids.end(), pieces.begin(), pieces.end());
  }
  ids.push_back(vocab_.sep_id());
  return {std::move(ids), std::move(ranges)};
}

TokenEncoding BertEncoder::encode(std::span<const std::string> tokens) const {
  if (static_cast<int>(tokens.size()) > max_positions_) {
    std::ostringstream os;
    os << "window required: " << tokens.size() << " tokens exceed max_positions "
       << max_positions_;
    throw std::runtime_error(os.str());
  }
  const auto [ids, ranges] = pieces_for(tokens);
  const Eigen::MatrixXd rows = model_.forward(ids);
  TokenEncoding enc;
  enc.hidden.resize(static_cast<Eigen::Index>(ranges.size()), rows.cols());
  for (size_t i = 0; i < ranges.size(); ++i) {
    const auto [b, e] = ranges[i];
    enc.hidden.row(static_cast<Eigen::Index>(i)) = rows.middleRows(b, e - b).colwise().mean();
  }
  enc.global = rows.row(0).transpose();
  return enc;
}

std::unique_ptr<EncoderTape> BertEncoder::encode_for_training(std::span<const std::string> tokens,
                                                              double dropout_rate, Rng& rng) {
  if (static_cast<int>(tokens.size()) > max_positions_) {
    std::ostringstream os;
    os << "window required: " << tokens.size() << " tokens exceed max_positions "
       << max_positions_;
    throw std::runtime_error(os.str());
  }
  auto [ids, ranges] = pieces_for(tokens);
  BertModel::TapePtr tape = model_.forward_training(ids, dropout_rate, rng);
  return std::make_unique<BertEncoderTape>(*this, std::move(tape), std::move(ranges));
}

std::vector<ParamRef> BertEncoder::parameters() {
  if (!trainable_) return {};
  std::vector<ParamRef> params = model_.parameters();
  for (ParamRef& p : params) p.name = "encoder." + p.name;
  return params;
}

std::unique_ptr<Encoder> make_pretrained_encoder(const EncoderConfig& config) {
  if (config.model_id.empty())
    throw ConfigError("encoder.model_id is required when encoder.kind = pretrained");

  std::vector<fs::path> tried;
  fs::path dir = config.model_id;
  tried.push_back(dir);
  if (!fs::exists(dir / "weights.bin")) {
    if (const char* cache = std::getenv("ECSP_CACHE")) {
      dir = fs::path(cache) / config.model_id;
      tried.push_back(dir);
    }
  }
  if (!fs::exists(dir / "weights.bin") || !fs::exists(dir / "vocab.txt")) {
    std::ostringstream os;
    os << "pretrained encoder \"" << config.model_id
       << "\" not found (need weights.bin and vocab.txt); searched:";
    for (const fs::path& p : tried) os << " " << p.string();
    throw ModelIoError(os.str());
  }

  WordPieceVocab vocab = WordPieceVocab::load((dir / "vocab.txt").string());
  BertModel model = BertModel::load((dir / "weights.bin").string());
  if (vocab.size() != model.dims().vocab_size)
    throw ModelIoError("vocabulary size " + std::to_string(vocab.size()) +
                       " does not match the weights' vocab_size " +
                       std::to_string(model.dims().vocab_size));
  return std::make_unique<BertEncoder>(config.model_id, std::move(vocab), std::move(model),
                                       config.max_positions, config.trainable);
}

}  // namespace ecsp
