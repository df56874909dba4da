#include "ecsp/encoder.hpp"

#include <sstream>

#include "ecsp/bert.hpp"
#include "ecsp/errors.hpp"

namespace ecsp {

namespace {

double xavier_scale(int fan_in, int fan_out) { return std::sqrt(6.0 / (fan_in + fan_out)); }

}  // namespace

ToyEncoder::ToyEncoder(int hidden_dim, int max_positions, bool trainable, std::uint64_t embed_seed)
    : d_(hidden_dim), max_positions_(max_positions), trainable_(trainable), embed_seed_(embed_seed) {
  if (d_ < 8) throw ConfigError("toy encoder hidden_dim must be >= 8");
  token_weight_.setZero(d_, d_);
  token_bias_.setZero(d_, 1);
  global_weight_.setZero(d_, d_);
  global_bias_.setZero(d_, 1);
  token_weight_grad_.setZero(d_, d_);
  token_bias_grad_.setZero(d_, 1);
  global_weight_grad_.setZero(d_, d_);
  global_bias_grad_.setZero(d_, 1);
  init_parameters(embed_seed);
}

void ToyEncoder::init_parameters(std::uint64_t seed) {
  Rng rng(mix64(seed ^ 0x746f79656e63ULL));
  uniform_init(token_weight_, xavier_scale(d_, d_), rng);
  uniform_init(global_weight_, xavier_scale(d_, d_), rng);
  token_bias_.setZero();
  global_bias_.setZero();
}

std::string ToyEncoder::identity() const {
  std::ostringstream os;
  os << "toy:d=" << d_ << ":mp=" << max_positions_ << ":seed=" << embed_seed_;
  return os.str();
}

Eigen::VectorXd ToyEncoder::embedding(const std::string& token) const {
  const std::uint64_t th = hash_string(token);
  const std::uint64_t sh = mix64(embed_seed_);
  Eigen::VectorXd e(d_);
  for (int k = 0; k < d_; ++k)
    e(k) = hash_unit(th ^ sh ^ mix64(static_cast<std::uint64_t>(k) * 0x9e3779b97f4a7c15ULL + 1));
  return e;
}

Eigen::MatrixXd ToyEncoder::embed_tokens(std::span<const std::string> tokens) const {
  Eigen::MatrixXd E(static_cast<Eigen::Index>(tokens.size()), d_);
  for (size_t t = 0; t < tokens.size(); ++t) E.row(static_cast<Eigen::Index>(t)) = embedding(tokens[t]);
  return E;
}

namespace {

struct ToyForward {
  Eigen::MatrixXd embeddings;   // (n, d)
  Eigen::MatrixXd activations;  // tanh output before dropout, (n, d)
  Eigen::MatrixXd mask;         // inverted-dropout mask, (n, d)
  TokenEncoding out;
};

ToyForward toy_forward(const ToyEncoder& enc, const Eigen::MatrixXd& token_weight,
                       const Eigen::MatrixXd& token_bias, const Eigen::MatrixXd& global_weight,
                       const Eigen::MatrixXd& global_bias, std::span<const std::string> tokens,
                       double dropout_rate, Rng* rng) {
  ToyForward f;
  const Eigen::Index n = static_cast<Eigen::Index>(tokens.size());
  const int d = enc.dim();
  f.embeddings = Eigen::MatrixXd(n, d);
  for (Eigen::Index t = 0; t < n; ++t) f.embeddings.row(t) = enc.embedding(tokens[t]);

  // Row-at-a-time keeps equal tokens bitwise equal: one GEMM would route
  // rows through different kernels depending on their position.
  Eigen::MatrixXd pre(n, d);
  for (Eigen::Index t = 0; t < n; ++t)
    pre.row(t) =
        (token_weight * f.embeddings.row(t).transpose() + token_bias.col(0)).transpose();
  f.activations = pre.array().tanh();

  if (rng != nullptr && dropout_rate > 0.0)
    f.mask = dropout_mask(n, d, dropout_rate, *rng);
  else
    f.mask = Eigen::MatrixXd::Constant(n, d, 1.0);

  f.out.hidden = f.activations.cwiseProduct(f.mask);
  Eigen::VectorXd mean = n > 0 ? Eigen::VectorXd(f.out.hidden.colwise().mean())
                               : Eigen::VectorXd(Eigen::VectorXd::Zero(d));
  f.out.global = global_weight * mean + global_bias.col(0);
  return f;
}

}  // namespace

class ToyEncoderTape : public EncoderTape {
 public:
  ToyEncoderTape(ToyEncoder& enc, ToyForward forward) : enc_(enc), f_(std::move(forward)) {}

  const TokenEncoding& encoding() const override { return f_.out; }

  void backward(const Eigen::MatrixXd& d_hidden, const Eigen::VectorXd& d_global) override {
    if (!enc_.trainable()) return;
    const Eigen::Index n = f_.out.hidden.rows();

    Eigen::VectorXd mean = n > 0 ? Eigen::VectorXd(f_.out.hidden.colwise().mean())
                                 : Eigen::VectorXd(Eigen::VectorXd::Zero(enc_.dim()));
    enc_.global_weight_grad_ += d_global * mean.transpose();
    enc_.global_bias_grad_.col(0) += d_global;

    Eigen::MatrixXd d_hidden_total = d_hidden;
    if (n > 0) {
      const Eigen::VectorXd d_mean = enc_.global_weight_.transpose() * d_global;
      d_hidden_total.rowwise() += (d_mean / static_cast<double>(n)).transpose();
    }

    const Eigen::MatrixXd d_act = d_hidden_total.cwiseProduct(f_.mask);
    const Eigen::MatrixXd d_pre =
        d_act.cwiseProduct((1.0 - f_.activations.array().square()).matrix());
    enc_.token_weight_grad_ += d_pre.transpose() * f_.embeddings;
    enc_.token_bias_grad_.col(0) += d_pre.colwise().sum().transpose();
  }

 private:
  ToyEncoder& enc_;
  ToyForward f_;
};

TokenEncoding ToyEncoder::encode(std::span<const std::string> tokens) const {
  if (static_cast<int>(tokens.size()) > max_positions_) {
    std::ostringstream os;
    os << "window required: " << tokens.size() << " tokens exceed max_positions "
       << max_positions_;
    throw std::runtime_error(os.str());
  }
  return toy_forward(*this, token_weight_, token_bias_, global_weight_, global_bias_, tokens,
                     0.0, nullptr)
      .out;
}

std::unique_ptr<EncoderTape> ToyEncoder::encode_for_training(std::span<const std::string> tokens,
                                                             double dropout_rate, Rng& rng) {
  if (static_cast<int>(tokens.size()) > max_positions_) {
    std::ostringstream os;
    os << "window required: " << tokens.size() << " tokens exceed max_positions "
       << max_positions_;
    throw std::runtime_error(os.str());
  }
  ToyForward f = toy_forward(*this, token_weight_, token_bias_, global_weight_, global_bias_,
                             tokens, dropout_rate, &rng);
  return std::make_unique<ToyEncoderTape>(*this, std::move(f));
}

std::vector<ParamRef> ToyEncoder::parameters() {
  if (!trainable_) return {};
  return {
      {"encoder.token_weight", &token_weight_, &token_weight_grad_},
      {"encoder.token_bias", &token_bias_, &token_bias_grad_},
      {"encoder.global_weight", &global_weight_, &global_weight_grad_},
      {"encoder.global_bias", &global_bias_, &global_bias_grad_},
  };
}

std::vector<SpanRef> window_plan(const Document& doc, int max_positions) {
  std::vector<SpanRef> windows;
  if (doc.clauses.empty()) return windows;

  int window_start = doc.clauses.front().start;
  int window_len = 0;
  for (const ClauseSpan& c : doc.clauses) {
    const int len = c.length();
    if (len > max_positions) {
      std::ostringstream os;
      os << "doc " << doc.doc_id << ": clause [" << c.start << "," << c.end << "] has " << len
         << " tokens, exceeding max_positions " << max_positions;
      throw CorpusError(os.str());
    }
    if (window_len > 0 && window_len + len > max_positions) {
      windows.push_back(SpanRef{window_start, window_start + window_len - 1});
      window_start = c.start;
      window_len = 0;
    }
    window_len += len;
  }
  windows.push_back(SpanRef{window_start, window_start + window_len - 1});
  return windows;
}

std::unique_ptr<Encoder> make_encoder(const EncoderConfig& config, std::uint64_t seed) {
  if (config.kind == "toy")
    return std::make_unique<ToyEncoder>(config.hidden_dim, config.max_positions, config.trainable,
                                        seed);
  if (config.kind == "pretrained") return make_pretrained_encoder(config);
  throw ConfigError("unknown encoder kind \"" + config.kind + "\"");
}

std::unique_ptr<Encoder> encoder_from_identity(const std::string& identity,
                                               const EncoderConfig& config) {
  if (identity.rfind("toy:", 0) == 0) {
    int d = 0, mp = 0;
    unsigned long long seed = 0;
    if (std::sscanf(identity.c_str(), "toy:d=%d:mp=%d:seed=%llu", &d, &mp, &seed) != 3)
      throw ModelIoError("unrecognized encoder identity: " + identity);
    return std::make_unique<ToyEncoder>(d, mp, config.trainable, seed);
  }
  if (identity.rfind("pretrained:", 0) == 0) {
    EncoderConfig pc = config;
    pc.kind = "pretrained";
    pc.model_id = identity.substr(std::string("pretrained:").size());
    return make_pretrained_encoder(pc);
  }
  throw ModelIoError("unrecognized encoder identity: " + identity);
}

}  // namespace ecsp
