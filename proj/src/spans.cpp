#include "ecsp/spans.hpp"

#include <sstream>

#include "ecsp/errors.hpp"

namespace ecsp {

SpanHeadParams::SpanHeadParams(int encoder_dim_, int phi_dim_, int max_len_)
    : encoder_dim(encoder_dim_), phi_dim(phi_dim_), max_len(max_len_) {
  weight.setZero(rep_dim(), kNumSpanTypes);
  bias.setZero(kNumSpanTypes, 1);
  phi.setZero(max_len, phi_dim);
  weight_grad.setZero(rep_dim(), kNumSpanTypes);
  bias_grad.setZero(kNumSpanTypes, 1);
  phi_grad.setZero(max_len, phi_dim);
}

void SpanHeadParams::init_parameters(std::uint64_t seed) {
  Rng rng(mix64(seed ^ 0x7370616e68656164ULL));
  uniform_init(weight, std::sqrt(6.0 / (rep_dim() + kNumSpanTypes)), rng);
  uniform_init(phi, 0.1, rng);
  bias.setZero();
}

std::vector<ParamRef> SpanHeadParams::parameters() {
  return {
      {"span_head.weight", &weight, &weight_grad},
      {"span_head.bias", &bias, &bias_grad},
      {"span_head.phi", &phi, &phi_grad},
  };
}

void SpanHeadParams::zero_grads() {
  weight_grad.setZero();
  bias_grad.setZero();
  phi_grad.setZero();
}

std::vector<CandidateSpan> enumerate_spans(int num_tokens, int max_len) {
  std::vector<CandidateSpan> spans;
  if (num_tokens <= 0) return spans;
  spans.reserve(static_cast<size_t>(span_count(num_tokens, max_len)));
  for (int start = 0; start < num_tokens; ++start) {
    const int last = std::min(num_tokens - 1, start + max_len - 1);
    for (int end = start; end <= last; ++end) spans.push_back(CandidateSpan{start, end});
  }
  return spans;
}

std::int64_t span_count(int num_tokens, int max_len) {
  std::int64_t total = 0;
  const int longest = std::min(num_tokens, max_len);
  for (int len = 1; len <= longest; ++len) total += num_tokens - len + 1;
  return total;
}

SpanFeatures represent_span(const CandidateSpan& span, const TokenEncoding& encoding,
                            const SpanHeadParams& params, bool clamp_length) {
  const int n = static_cast<int>(encoding.hidden.rows());
  const int d = static_cast<int>(encoding.hidden.cols());
  if (span.start < 0 || span.end < span.start || span.end >= n) {
    std::ostringstream os;
    os << "represent_span: span [" << span.start << "," << span.end << "] outside encoding of "
       << n << " rows";
    throw std::runtime_error(os.str());
  }
  int length = span.length();
  if (length > params.max_len) {
    if (!clamp_length) {
      std::ostringstream os;
      os << "represent_span: span length " << length << " exceeds max_len " << params.max_len
         << " (no length-embedding row)";
      throw std::runtime_error(os.str());
    }
    length = params.max_len;
  }

  SpanFeatures f;
  f.g.resize(params.rep_dim());
  f.max_row.assign(d, span.start);

  f.g.head(d) = encoding.global;

  Eigen::VectorXd sum = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd max = encoding.hidden.row(span.start).transpose();
  for (int t = span.start; t <= span.end; ++t) {
    for (int k = 0; k < d; ++k) {
      const double v = encoding.hidden(t, k);
      sum(k) += v;
      if (v > max(k)) {
        max(k) = v;
        f.max_row[k] = t;
      }
    }
  }
  f.g.segment(d, d) = sum;
  f.g.segment(2 * d, d) = max;
  f.g.tail(params.phi_dim) = params.phi.row(length - 1).transpose();
  return f;
}

Eigen::Vector3d classify_span(const Eigen::VectorXd& rep, const SpanHeadParams& params) {
  if (rep.size() != params.weight.rows()) {
    std::ostringstream os;
    os << "classify_span: representation dim " << rep.size() << " != weight rows "
       << params.weight.rows();
    throw std::runtime_error(os.str());
  }
  const Eigen::Vector3d logits = params.weight.transpose() * rep + params.bias.col(0);
  return softmax(logits);
}

SelectedSpans select_spans(const std::vector<CandidateSpan>& candidates,
                           const Eigen::MatrixXd& type_probs) {
  if (static_cast<size_t>(type_probs.rows()) != candidates.size() ||
      type_probs.cols() != kNumSpanTypes)
    throw std::runtime_error("select_spans: one distribution per candidate required");

  SelectedSpans out;
  for (size_t i = 0; i < candidates.size(); ++i) {
    // First maximum in column order emotion, cause, none = the tie-break.
    int best = 0;
    for (int t = 1; t < kNumSpanTypes; ++t)
      if (type_probs(static_cast<Eigen::Index>(i), t) > type_probs(static_cast<Eigen::Index>(i), best))
        best = t;
    if (best == static_cast<int>(SpanType::emotion)) out.emotions.push_back(candidates[i]);
    else if (best == static_cast<int>(SpanType::cause)) out.causes.push_back(candidates[i]);
  }
  return out;
}

std::vector<CandidateSpan> candidates_for_window(const SpanRef& window,
                                                 const std::vector<ClauseSpan>& clauses,
                                                 const std::string& mode, int max_len) {
  std::vector<CandidateSpan> out;
  if (mode == "clauses") {
    for (const ClauseSpan& c : clauses)
      if (c.start >= window.start && c.end <= window.end)
        out.push_back(CandidateSpan{c.start, c.end});
    return out;
  }
  const int n = window.end - window.start + 1;
  out = enumerate_spans(n, max_len);
  for (CandidateSpan& s : out) {
    s.start += window.start;
    s.end += window.start;
  }
  return out;
}

}  // namespace ecsp
