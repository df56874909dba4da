#include "ecsp/pairing.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <sstream>
#include <tuple>

#include "ecsp/errors.hpp"
#include "ecsp/model.hpp"

namespace ecsp {

PairHeadParams::PairHeadParams(int encoder_dim_, int phi_dim_, int psi_dim_, int dist_buckets_,
                               int num_categories_)
    : encoder_dim(encoder_dim_),
      phi_dim(phi_dim_),
      psi_dim(psi_dim_),
      dist_buckets(dist_buckets_),
      num_categories(num_categories_) {
  weight.setZero(rep_dim(), num_labels());
  bias.setZero(num_labels(), 1);
  psi.setZero(dist_buckets, psi_dim);
  weight_grad.setZero(rep_dim(), num_labels());
  bias_grad.setZero(num_labels(), 1);
  psi_grad.setZero(dist_buckets, psi_dim);
}

void PairHeadParams::init_parameters(std::uint64_t seed) {
  Rng rng(mix64(seed ^ 0x7061697268656164ULL));
  uniform_init(weight, std::sqrt(6.0 / (rep_dim() + num_labels())), rng);
  uniform_init(psi, 0.1, rng);
  bias.setZero();
}

std::vector<ParamRef> PairHeadParams::parameters() {
  return {
      {"pair_head.weight", &weight, &weight_grad},
      {"pair_head.bias", &bias, &bias_grad},
      {"pair_head.psi", &psi, &psi_grad},
  };
}

void PairHeadParams::zero_grads() {
  weight_grad.setZero();
  bias_grad.setZero();
  psi_grad.setZero();
}

std::vector<PairCandidate> cartesian_pairs(const std::vector<CandidateSpan>& emotions,
                                           const std::vector<CandidateSpan>& causes) {
  std::vector<PairCandidate> out;
  out.reserve(emotions.size() * causes.size());
  for (const CandidateSpan& e : emotions)
    for (const CandidateSpan& c : causes) out.push_back(PairCandidate{e, c});
  return out;
}

LocalizedContext localized_context(const PairCandidate& pair, const TokenEncoding& encoding,
                                   const PairHeadParams& params) {
  const int n = static_cast<int>(encoding.hidden.rows());
  const int d = static_cast<int>(encoding.hidden.cols());
  if (pair.emotion.start < 0 || pair.emotion.end >= n || pair.cause.start < 0 ||
      pair.cause.end >= n) {
    std::ostringstream os;
    os << "localized_context: pair ([" << pair.emotion.start << "," << pair.emotion.end << "],["
       << pair.cause.start << "," << pair.cause.end << "]) outside encoding of " << n << " rows";
    throw std::runtime_error(os.str());
  }

  LocalizedContext lc;
  lc.ctx_begin = std::min(pair.emotion.end, pair.cause.end) + 1;
  lc.ctx_end = std::max(pair.emotion.start, pair.cause.start) - 1;
  lc.sum = Eigen::VectorXd::Zero(d);
  lc.max = Eigen::VectorXd::Zero(d);

  const int gap = lc.ctx_end - lc.ctx_begin + 1;  // tokens strictly between
  lc.distance = std::min(std::max(gap, 0), params.dist_buckets - 1);

  if (gap > 0) {
    lc.max_row.assign(d, lc.ctx_begin);
    lc.max = encoding.hidden.row(lc.ctx_begin).transpose();
    for (int t = lc.ctx_begin; t <= lc.ctx_end; ++t) {
      for (int k = 0; k < d; ++k) {
        const double v = encoding.hidden(t, k);
        lc.sum(k) += v;
        if (v > lc.max(k)) {
          lc.max(k) = v;
          lc.max_row[k] = t;
        }
      }
    }
  }
  lc.psi = params.psi.row(lc.distance).transpose();
  return lc;
}

Eigen::VectorXd pair_representation(const Eigen::VectorXd& g_emotion,
                                    const Eigen::VectorXd& g_cause, const LocalizedContext& lc,
                                    bool use_localized_context) {
  const Eigen::Index d = lc.sum.size();
  const Eigen::Index psi = lc.psi.size();
  Eigen::VectorXd p(g_emotion.size() + g_cause.size() + 2 * d + psi);
  p.head(g_emotion.size()) = g_emotion;
  p.segment(g_emotion.size(), g_cause.size()) = g_cause;
  const Eigen::Index off = g_emotion.size() + g_cause.size();
  if (use_localized_context) {
    p.segment(off, d) = lc.sum;
    p.segment(off + d, d) = lc.max;
    p.tail(psi) = lc.psi;
  } else {
    p.tail(2 * d + psi).setZero();
  }
  return p;
}

Eigen::VectorXd classify_pair(const Eigen::VectorXd& pair_rep, const PairHeadParams& params) {
  if (pair_rep.size() != params.weight.rows()) {
    std::ostringstream os;
    os << "classify_pair: representation dim " << pair_rep.size() << " != weight rows "
       << params.weight.rows();
    throw std::runtime_error(os.str());
  }
  const Eigen::VectorXd logits = params.weight.transpose() * pair_rep + params.bias.col(0);
  return softmax(logits);
}

int pair_argmax(const Eigen::VectorXd& probs, int none_label) {
  int best = 0;
  for (int j = 1; j < probs.size(); ++j)
    if (probs(j) > probs(best)) best = j;
  // Exact tie with none (including the all-equal case) keeps the pair out.
  if (probs(none_label) >= probs(best)) return none_label;
  return best;
}

PipelineOutput run_pipeline(const Document& doc, const Model& model) {
  const bool clause_mode = model.config.span_candidates == "clauses";
  const std::vector<SpanRef> windows = window_plan(doc, model.encoder->max_positions());

  PipelineOutput out;
  out.num_windows = static_cast<int>(windows.size());

  for (const SpanRef& window : windows) {
    const std::span<const std::string> tokens(doc.tokens.data() + window.start,
                                              static_cast<size_t>(window.length()));
    const TokenEncoding encoding = model.encoder->encode(tokens);

    const std::vector<CandidateSpan> candidates = candidates_for_window(
        window, doc.clauses, model.config.span_candidates, model.config.span_max_len);
    if (candidates.empty()) continue;

    Eigen::MatrixXd probs(static_cast<Eigen::Index>(candidates.size()), kNumSpanTypes);
    for (size_t i = 0; i < candidates.size(); ++i) {
      const CandidateSpan local{candidates[i].start - window.start,
                                candidates[i].end - window.start};
      const SpanFeatures f = represent_span(local, encoding, model.span_head, clause_mode);
      probs.row(static_cast<Eigen::Index>(i)) =
          classify_span(f.g, model.span_head).transpose();
    }
    const SelectedSpans sel = select_spans(candidates, probs);

    auto reps = [&](const std::vector<CandidateSpan>& spans) {
      std::vector<Eigen::VectorXd> g(spans.size());
      for (size_t i = 0; i < spans.size(); ++i) {
        const CandidateSpan local{spans[i].start - window.start, spans[i].end - window.start};
        g[i] = represent_span(local, encoding, model.span_head, clause_mode).g;
      }
      return g;
    };
    const std::vector<Eigen::VectorXd> g_e = reps(sel.emotions);
    const std::vector<Eigen::VectorXd> g_c = reps(sel.causes);

    for (size_t i = 0; i < sel.emotions.size(); ++i) {
      for (size_t j = 0; j < sel.causes.size(); ++j) {
        const PairCandidate local{
            CandidateSpan{sel.emotions[i].start - window.start,
                          sel.emotions[i].end - window.start},
            CandidateSpan{sel.causes[j].start - window.start, sel.causes[j].end - window.start}};
        const LocalizedContext lc = localized_context(local, encoding, model.pair_head);
        const Eigen::VectorXd p =
            pair_representation(g_e[i], g_c[j], lc, model.config.pair_use_localized_context);
        const Eigen::VectorXd pr = classify_pair(p, model.pair_head);
        const int label = pair_argmax(pr, model.pair_head.none_label());
        if (label == model.pair_head.none_label()) continue;
        out.pairs.push_back(ExtractedPair{sel.emotions[i].ref(), sel.causes[j].ref(),
                                          model.categories.at(static_cast<size_t>(label)),
                                          pr(label)});
      }
    }

    out.selected.emotions.insert(out.selected.emotions.end(), sel.emotions.begin(),
                                 sel.emotions.end());
    out.selected.causes.insert(out.selected.causes.end(), sel.causes.begin(), sel.causes.end());
  }

  std::sort(out.pairs.begin(), out.pairs.end(),
            [](const ExtractedPair& a, const ExtractedPair& b) {
              return std::tie(a.emotion, a.cause) < std::tie(b.emotion, b.cause);
            });
  return out;
}

std::vector<ExtractedPair> extract_pairs(const Document& doc, const Model& model) {
  return run_pipeline(doc, model).pairs;
}

}  // namespace ecsp
