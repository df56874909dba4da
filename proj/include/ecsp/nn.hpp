#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace ecsp {

/// Named view onto one parameter tensor and its gradient buffer.
/// The optimizer, checkpoint writer and finite-difference harness all
/// walk the same enumeration.
struct ParamRef {
  std::string name;
  Eigen::MatrixXd* value = nullptr;
  Eigen::MatrixXd* grad = nullptr;
};

using Rng = std::mt19937_64;

/// Uniform double in [-1, 1) from a stateless 64-bit mix; used for the
/// frozen toy-encoder embeddings.
double hash_unit(std::uint64_t key);

std::uint64_t hash_string(const std::string& s);
std::uint64_t mix64(std::uint64_t x);

/// Row-wise log-softmax with max subtraction.
Eigen::MatrixXd log_softmax_rows(const Eigen::MatrixXd& logits);
Eigen::VectorXd softmax(const Eigen::VectorXd& logits);

/// Fills `m` with U(-scale, scale) draws from `rng`.
void uniform_init(Eigen::MatrixXd& m, double scale, Rng& rng);

/// Inverted-dropout mask: entries are 0 with probability `rate`, else
/// 1/(1-rate). rate == 0 yields all ones.
Eigen::MatrixXd dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng);

}  // namespace ecsp
