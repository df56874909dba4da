#pragma once

#include <Eigen/Dense>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "ecsp/encoder.hpp"
#include "ecsp/nn.hpp"

namespace ecsp {

/// WordPiece vocabulary with greedy longest-match-first tokenization.
class WordPieceVocab {
 public:
  static WordPieceVocab load(const std::string& vocab_path);
  static WordPieceVocab from_tokens(const std::vector<std::string>& tokens);

  /// Splits one corpus token into piece ids; unknowable tokens map to [UNK].
  std::vector<int> tokenize(const std::string& token) const;

  int piece_id(const std::string& piece) const;
  int size() const { return static_cast<int>(pieces_.size()); }
  int cls_id() const { return cls_id_; }
  int sep_id() const { return sep_id_; }
  int unk_id() const { return unk_id_; }

 private:
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, int> index_;
  int cls_id_ = -1, sep_id_ = -1, unk_id_ = -1;
};

struct BertDims {
  int layers = 12;
  int hidden = 768;
  int heads = 12;
  int intermediate = 3072;
  int vocab_size = 0;
  int max_positions = 512;
  double layer_norm_eps = 1e-12;
};

/// Bidirectional transformer encoder over piece ids. Weights live in a
/// flat named-tensor file (see tools/export_bert_weights.py for the
/// conversion from a standard checkpoint). Linear layers use the
/// row-vector convention y = x W + b with W stored (in, out).
class BertModel {
 public:
  BertModel(BertDims dims);

  static BertModel load(const std::string& weights_path);
  void save(const std::string& weights_path) const;

  /// Seeded random initialization (used for tests and smoke runs).
  void init_random(std::uint64_t seed);

  const BertDims& dims() const { return dims_; }

  /// Evaluation-mode forward; returns one row per piece.
  Eigen::MatrixXd forward(const std::vector<int>& piece_ids) const;

  /// Training-mode forward keeping every intermediate needed by backward.
  struct Tape;
  struct TapeDeleter {
    void operator()(Tape*) const;
  };
  using TapePtr = std::unique_ptr<Tape, TapeDeleter>;
  TapePtr forward_training(const std::vector<int>& piece_ids, double dropout_rate, Rng& rng);
  const Eigen::MatrixXd& tape_output(const Tape& tape) const;
  /// Accumulates parameter gradients for d(loss)/d(output rows).
  void backward(Tape& tape, const Eigen::MatrixXd& d_output);

  std::vector<ParamRef> parameters();

 private:
  Eigen::MatrixXd embed(const std::vector<int>& piece_ids) const;
  Eigen::MatrixXd run_forward(const std::vector<int>& piece_ids, Tape* tape, double dropout_rate,
                              Rng* rng) const;

  BertDims dims_;
  std::vector<std::pair<std::string, Eigen::MatrixXd>> tensors_;
  std::vector<Eigen::MatrixXd> grads_;
  std::map<std::string, int> tensor_index_;

  Eigen::MatrixXd& tensor(const std::string& name);
  const Eigen::MatrixXd& tensor(const std::string& name) const;
};

/// Pretrained-encoder adapter: wordpieces each corpus token, runs the
/// transformer, mean-pools piece vectors back to one vector per corpus
/// token, and reports the leading classification token as `global`.
class BertEncoder : public Encoder {
 public:
  BertEncoder(std::string model_id, WordPieceVocab vocab, BertModel model, int max_positions,
              bool trainable);

  int dim() const override { return model_.dims().hidden; }
  int max_positions() const override;
  bool trainable() const override { return trainable_; }
  std::string identity() const override { return "pretrained:" + model_id_; }

  TokenEncoding encode(std::span<const std::string> tokens) const override;
  std::unique_ptr<EncoderTape> encode_for_training(std::span<const std::string> tokens,
                                                   double dropout_rate, Rng& rng) override;
  std::vector<ParamRef> parameters() override;

  const BertModel& model() const { return model_; }

 private:
  friend class BertEncoderTape;

  /// piece ids [CLS] t1-pieces ... tn-pieces [SEP], plus for each corpus
  /// token the [begin,end) range of its pieces in the id list.
  std::pair<std::vector<int>, std::vector<std::pair<int, int>>> pieces_for(
      std::span<const std::string> tokens) const;

  std::string model_id_;
  WordPieceVocab vocab_;
  BertModel model_;
  int max_positions_;
  bool trainable_;
};

/// Resolves `config.model_id` (directly, then under $ECSP_CACHE) to a
/// directory holding weights.bin + vocab.txt and builds the adapter.
std::unique_ptr<Encoder> make_pretrained_encoder(const EncoderConfig& config);

}  // namespace ecsp
