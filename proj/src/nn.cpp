#include "ecsp/nn.hpp"

namespace ecsp {

std::uint64_t mix64(std::uint64_t x) {
  // splitmix64 finalizer
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t hash_string(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

double hash_unit(std::uint64_t key) {
  const std::uint64_t h = mix64(key);
  return static_cast<double>(h >> 11) * (2.0 / 9007199254740992.0) - 1.0;
}

Eigen::MatrixXd log_softmax_rows(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    const Eigen::ArrayXd shifted = logits.row(i).array() - m;
    const double lse = std::log(shifted.exp().sum());
    out.row(i) = shifted - lse;
  }
  return out;
}

Eigen::VectorXd softmax(const Eigen::VectorXd& logits) {
  const double m = logits.maxCoeff();
  Eigen::ArrayXd e = (logits.array() - m).exp();
  return e / e.sum();
}

void uniform_init(Eigen::MatrixXd& m, double scale, Rng& rng) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = dist(rng);
}

Eigen::MatrixXd dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, Rng& rng) {
  Eigen::MatrixXd mask = Eigen::MatrixXd::Constant(rows, cols, 1.0);
  if (rate <= 0.0) return mask;
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  const double keep = 1.0 / (1.0 - rate);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) mask(i, j) = dist(rng) < rate ? 0.0 : keep;
  return mask;
}

}  // namespace ecsp
