#pragma once

#include <Eigen/Dense>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ecsp/corpus.hpp"
#include "ecsp/nn.hpp"

namespace ecsp {

/// Contextual encoding of one token window: one d-dimensional row per
/// token plus a document-level context vector.
struct TokenEncoding {
  Eigen::MatrixXd hidden;  // (n, d)
  Eigen::VectorXd global;  // (d)
};

struct EncoderConfig {
  std::string kind = "toy";  // "toy" | "pretrained"
  std::string model_id;      // pretrained only
  int hidden_dim = 64;       // toy only
  int max_positions = 512;
  bool trainable = true;
};

/// Forward state of one training-mode encode; backward() accumulates
/// parameter gradients given the loss gradients w.r.t. the outputs.
class EncoderTape {
 public:
  virtual ~EncoderTape() = default;
  virtual const TokenEncoding& encoding() const = 0;
  virtual void backward(const Eigen::MatrixXd& d_hidden, const Eigen::VectorXd& d_global) = 0;
};

/// Pluggable encoding contract. Inference (`encode`) is reentrant;
/// training-time parameter mutation is owned by a single controller.
class Encoder {
 public:
  virtual ~Encoder() = default;

  virtual int dim() const = 0;
  virtual int max_positions() const = 0;
  virtual bool trainable() const = 0;
  /// Stable identity string recorded in checkpoint metadata.
  virtual std::string identity() const = 0;

  /// Deterministic evaluation-mode encoding. Throws if the window does
  /// not fit ("window required").
  virtual TokenEncoding encode(std::span<const std::string> tokens) const = 0;

  /// Training-mode encoding with dropout; the tape keeps what backward
  /// needs. `rng` drives the dropout masks.
  virtual std::unique_ptr<EncoderTape> encode_for_training(std::span<const std::string> tokens,
                                                           double dropout_rate, Rng& rng) = 0;

  /// Trainable parameters (empty when frozen).
  virtual std::vector<ParamRef> parameters() = 0;
};

/// Deterministic test encoder: frozen hash-derived token embeddings, a
/// trainable affine+tanh layer per token, and a global context vector
/// from a second affine layer over the mean token vector. Token rows
/// depend only on the token string, never on position.
class ToyEncoder : public Encoder {
 public:
  ToyEncoder(int hidden_dim, int max_positions, bool trainable, std::uint64_t embed_seed);

  int dim() const override { return d_; }
  int max_positions() const override { return max_positions_; }
  bool trainable() const override { return trainable_; }
  std::string identity() const override;

  TokenEncoding encode(std::span<const std::string> tokens) const override;
  std::unique_ptr<EncoderTape> encode_for_training(std::span<const std::string> tokens,
                                                   double dropout_rate, Rng& rng) override;
  std::vector<ParamRef> parameters() override;

  /// Seeded re-initialization of the trainable layers.
  void init_parameters(std::uint64_t seed);

  Eigen::VectorXd embedding(const std::string& token) const;
  std::uint64_t embed_seed() const { return embed_seed_; }

 private:
  friend class ToyEncoderTape;

  Eigen::MatrixXd embed_tokens(std::span<const std::string> tokens) const;

  int d_;
  int max_positions_;
  bool trainable_;
  std::uint64_t embed_seed_;

  Eigen::MatrixXd token_weight_, token_weight_grad_;    // (d, d)
  Eigen::MatrixXd token_bias_, token_bias_grad_;        // (d, 1)
  Eigen::MatrixXd global_weight_, global_weight_grad_;  // (d, d)
  Eigen::MatrixXd global_bias_, global_bias_grad_;      // (d, 1)
};

/// Splits an over-long document into windows of consecutive whole
/// clauses, greedy first-fit on clause lengths. Throws when a single
/// clause exceeds `max_positions` (message carries the doc_id).
std::vector<SpanRef> window_plan(const Document& doc, int max_positions);

/// Builds the encoder named by the config. `seed` feeds the toy
/// encoder's frozen embeddings and initial weights.
std::unique_ptr<Encoder> make_encoder(const EncoderConfig& config, std::uint64_t seed);

/// Rebuilds an encoder from its identity() string (checkpoint loading).
std::unique_ptr<Encoder> encoder_from_identity(const std::string& identity,
                                               const EncoderConfig& config);

}  // namespace ecsp
