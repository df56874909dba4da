#include "ecsp/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <span>
#include <sstream>

#include "ecsp/errors.hpp"
#include "ecsp/evaluation.hpp"
#include "ecsp/pairing.hpp"
#include "json.hpp"

namespace ecsp {

TrainConfig TrainConfig::from_run_config(const RunConfig& c) {
  TrainConfig t;
  t.peak_lr = c.train_peak_lr;
  t.warmup_fraction = c.train_warmup_fraction;
  t.total_steps = c.train_total_steps;
  t.dropout = c.train_dropout;
  t.batch_size = c.train_batch_size;
  t.patience_evals = c.train_patience_evals;
  t.eval_interval_steps = c.train_eval_interval_steps;
  t.seed = c.train_seed;
  t.span_loss_weight = c.train_span_loss_weight;
  t.pair_loss_weight = c.train_pair_loss_weight;
  t.neg_downsample = c.train_neg_downsample;
  t.dev_fraction = c.train_dev_fraction;
  return t;
}

double lr_at(std::int64_t step, const TrainConfig& config) {
  const std::int64_t total = config.total_steps;
  if (total <= 0 || step <= 0) return 0.0;
  if (step >= total) return 0.0;
  const std::int64_t warmup =
      std::llround(config.warmup_fraction * static_cast<double>(total));
  if (warmup > 0 && step <= warmup)
    return config.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  return config.peak_lr * static_cast<double>(total - step) /
         static_cast<double>(total - warmup);
}

SpanLabelAssignment assign_span_labels(const Document& doc,
                                       const std::vector<CandidateSpan>& candidates) {
  std::set<SpanRef> gold_e, gold_c;
  for (const GoldPair& p : doc.pairs) {
    gold_e.insert(p.emotion);
    gold_c.insert(p.cause);
  }

  SpanLabelAssignment out;
  for (const SpanRef& s : gold_e)
    if (gold_c.count(s)) ++out.warnings.dual_role_spans;

  std::set<SpanRef> covered;
  out.labels.reserve(candidates.size());
  for (const CandidateSpan& cand : candidates) {
    const SpanRef ref = cand.ref();
    if (gold_e.count(ref)) {
      out.labels.push_back(SpanType::emotion);  // emotion wins a dual-role span
      covered.insert(ref);
    } else if (gold_c.count(ref)) {
      out.labels.push_back(SpanType::cause);
      covered.insert(ref);
    } else {
      out.labels.push_back(SpanType::none);
    }
  }
  for (const SpanRef& s : gold_e)
    if (!covered.count(s)) ++out.warnings.gold_spans_unrepresentable;
  for (const SpanRef& s : gold_c)
    if (!covered.count(s) && !gold_e.count(s)) ++out.warnings.gold_spans_unrepresentable;
  return out;
}

std::vector<PairLabel> assign_pair_labels(const Document& doc,
                                          const std::map<std::string, int>& category_index) {
  std::set<SpanRef> gold_e, gold_c;
  std::map<std::pair<SpanRef, SpanRef>, std::string> categories;
  for (const GoldPair& p : doc.pairs) {
    gold_e.insert(p.emotion);
    gold_c.insert(p.cause);
    categories.emplace(std::make_pair(p.emotion, p.cause), p.category);  // first wins
  }

  const int none = static_cast<int>(category_index.size());
  std::vector<PairLabel> out;
  out.reserve(gold_e.size() * gold_c.size());
  for (const SpanRef& e : gold_e) {
    for (const SpanRef& c : gold_c) {
      PairLabel pl{e, c, none};
      const auto it = categories.find({e, c});
      if (it != categories.end()) {
        const auto ci = category_index.find(it->second);
        if (ci == category_index.end())
          throw TrainError("doc " + doc.doc_id + ": category \"" + it->second +
                           "\" is not in the training vocabulary");
        pl.label = ci->second;
      }
      out.push_back(pl);
    }
  }
  return out;
}

double joint_loss(const Eigen::MatrixXd& span_probs, const std::vector<int>& span_labels,
                  const Eigen::MatrixXd& pair_probs, const std::vector<int>& pair_labels,
                  double span_weight, double pair_weight) {
  auto mean_ce = [](const Eigen::MatrixXd& probs, const std::vector<int>& labels,
                    const char* what) {
    if (static_cast<size_t>(probs.rows()) != labels.size())
      throw std::invalid_argument(std::string("joint_loss: one distribution per ") + what +
                                  " label required");
    if (labels.empty()) return 0.0;
    double total = 0.0;
    for (size_t i = 0; i < labels.size(); ++i) {
      const int y = labels[i];
      if (y < 0 || y >= probs.cols())
        throw std::invalid_argument(std::string("joint_loss: ") + what +
                                    " label outside the vocabulary");
      total += -std::log(std::max(probs(static_cast<Eigen::Index>(i), y), 1e-300));
    }
    return total / static_cast<double>(labels.size());
  };
  return span_weight * mean_ce(span_probs, span_labels, "span") +
         pair_weight * mean_ce(pair_probs, pair_labels, "pair");
}

AdamOptimizer::AdamOptimizer(std::vector<ParamRef> params, double beta1, double beta2,
                             double epsilon)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const ParamRef& p : params_) {
    m_.push_back(Eigen::MatrixXd::Zero(p.value->rows(), p.value->cols()));
    v_.push_back(Eigen::MatrixXd::Zero(p.value->rows(), p.value->cols()));
  }
}

void AdamOptimizer::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    const Eigen::MatrixXd& g = *params_[i].grad;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
    const Eigen::ArrayXXd m_hat = m_[i].array() / bc1;
    const Eigen::ArrayXXd v_hat = v_[i].array() / bc2;
    params_[i].value->array() -= lr * m_hat / (v_hat.sqrt() + epsilon_);
  }
}

namespace {

// One gold pair placed in a window, in window-local coordinates.
struct PlacedPair {
  int window = 0;
  CandidateSpan emotion;
  CandidateSpan cause;
  int label = 0;
};

struct WindowItems {
  std::vector<CandidateSpan> candidates;  // window-local, kept after downsampling
  std::vector<int> labels;
};

int find_window(const std::vector<SpanRef>& windows, const SpanRef& span) {
  for (size_t w = 0; w < windows.size(); ++w)
    if (span.start >= windows[w].start && span.end <= windows[w].end)
      return static_cast<int>(w);
  return -1;
}

}  // namespace

LossBreakdown document_loss(Model& model, const Document& doc, const LossOptions& options,
                            Rng& rng) {
  const bool clause_mode = model.config.span_candidates == "clauses";
  const std::vector<SpanRef> windows = window_plan(doc, model.encoder->max_positions());

  LossBreakdown out;
  if (windows.empty()) return out;

  // Doc-level candidate list and labels, then per-window slices.
  std::vector<std::vector<CandidateSpan>> window_candidates(windows.size());
  std::vector<CandidateSpan> all;
  for (size_t w = 0; w < windows.size(); ++w) {
    window_candidates[w] = candidates_for_window(windows[w], doc.clauses,
                                                 model.config.span_candidates,
                                                 model.config.span_max_len);
    all.insert(all.end(), window_candidates[w].begin(), window_candidates[w].end());
  }
  const SpanLabelAssignment sla = assign_span_labels(doc, all);
  out.warnings += sla.warnings;

  std::vector<WindowItems> items(windows.size());
  {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    size_t flat = 0;
    for (size_t w = 0; w < windows.size(); ++w) {
      for (const CandidateSpan& cand : window_candidates[w]) {
        const SpanType label = sla.labels[flat++];
        if (label == SpanType::none && options.neg_downsample > 0.0 &&
            unif(rng) < options.neg_downsample)
          continue;
        items[w].candidates.push_back(
            CandidateSpan{cand.start - windows[w].start, cand.end - windows[w].start});
        items[w].labels.push_back(static_cast<int>(label));
      }
    }
  }
  for (const WindowItems& wi : items)
    out.span_items += static_cast<std::int64_t>(wi.candidates.size());

  // Teacher-forced pairs, placed into the window that holds both spans.
  std::map<std::string, int> category_index;
  for (size_t i = 0; i < model.categories.size(); ++i)
    category_index[model.categories[i]] = static_cast<int>(i);
  std::vector<std::vector<PlacedPair>> window_pairs(windows.size());
  for (const PairLabel& pl : assign_pair_labels(doc, category_index)) {
    auto representable = [&](const SpanRef& s, int w) {
      return w >= 0 && (clause_mode || s.length() <= model.config.span_max_len);
    };
    const int we = find_window(windows, pl.emotion);
    const int wc = find_window(windows, pl.cause);
    if (!representable(pl.emotion, we) || !representable(pl.cause, wc)) continue;
    if (we != wc) {
      ++out.warnings.cross_window_pairs;
      continue;
    }
    window_pairs[static_cast<size_t>(we)].push_back(PlacedPair{
        we,
        CandidateSpan{pl.emotion.start - windows[we].start, pl.emotion.end - windows[we].start},
        CandidateSpan{pl.cause.start - windows[we].start, pl.cause.end - windows[we].start},
        pl.label});
  }
  for (const auto& wp : window_pairs) out.pair_items += static_cast<std::int64_t>(wp.size());

  const int d = model.encoder->dim();
  const int phi = model.config.span_phi_dim;
  const Eigen::Index g_dim = model.span_head.rep_dim();
  const int used_max_len = model.span_head.max_len;

  double span_ce_sum = 0.0;
  double pair_ce_sum = 0.0;

  for (size_t w = 0; w < windows.size(); ++w) {
    if (items[w].candidates.empty() && window_pairs[w].empty()) continue;

    const std::span<const std::string> tokens(doc.tokens.data() + windows[w].start,
                                              static_cast<size_t>(windows[w].length()));
    const std::unique_ptr<EncoderTape> tape =
        model.encoder->encode_for_training(tokens, options.dropout, rng);
    const TokenEncoding& enc = tape->encoding();

    Eigen::MatrixXd d_hidden;
    Eigen::VectorXd d_global;
    if (options.with_grad) {
      d_hidden = Eigen::MatrixXd::Zero(enc.hidden.rows(), enc.hidden.cols());
      d_global = Eigen::VectorXd::Zero(enc.global.size());
    }

    // Routes d_g (gradient w.r.t. an un-dropped span representation)
    // back onto the encoding and the Phi table.
    auto backprop_span_rep = [&](const CandidateSpan& span, const SpanFeatures& f,
                                 const Eigen::VectorXd& d_g) {
      d_global += d_g.head(d);
      const auto d_sum = d_g.segment(d, d);
      for (int t = span.start; t <= span.end; ++t) d_hidden.row(t) += d_sum.transpose();
      for (int k = 0; k < d; ++k) d_hidden(f.max_row[k], k) += d_g(2 * d + k);
      const int len = std::min(span.length(), used_max_len);
      model.span_head.phi_grad.row(len - 1) += d_g.tail(phi).transpose();
    };

    for (size_t i = 0; i < items[w].candidates.size(); ++i) {
      const CandidateSpan& cand = items[w].candidates[i];
      const int label = items[w].labels[i];
      const SpanFeatures f = represent_span(cand, enc, model.span_head, clause_mode);
      const Eigen::VectorXd mask =
          options.dropout > 0.0 ? Eigen::VectorXd(dropout_mask(g_dim, 1, options.dropout, rng))
                                : Eigen::VectorXd(Eigen::VectorXd::Ones(g_dim));
      const Eigen::VectorXd g_dropped = f.g.cwiseProduct(mask);
      const Eigen::Vector3d probs = classify_span(g_dropped, model.span_head);
      span_ce_sum += -std::log(std::max(probs(label), 1e-300));

      if (options.with_grad && out.span_items > 0) {
        Eigen::Vector3d d_z = probs;
        d_z(label) -= 1.0;
        d_z *= options.span_weight / static_cast<double>(out.span_items);
        model.span_head.weight_grad += g_dropped * d_z.transpose();
        model.span_head.bias_grad.col(0) += d_z;
        const Eigen::VectorXd d_g = (model.span_head.weight * d_z).cwiseProduct(mask);
        backprop_span_rep(cand, f, d_g);
      }
    }

    for (const PlacedPair& pp : window_pairs[w]) {
      const SpanFeatures fe = represent_span(pp.emotion, enc, model.span_head, clause_mode);
      const SpanFeatures fc = represent_span(pp.cause, enc, model.span_head, clause_mode);
      const LocalizedContext lc =
          localized_context(PairCandidate{pp.emotion, pp.cause}, enc, model.pair_head);
      const Eigen::VectorXd p =
          pair_representation(fe.g, fc.g, lc, model.config.pair_use_localized_context);
      const Eigen::VectorXd mask =
          options.dropout > 0.0
              ? Eigen::VectorXd(dropout_mask(p.size(), 1, options.dropout, rng))
              : Eigen::VectorXd(Eigen::VectorXd::Ones(p.size()));
      const Eigen::VectorXd p_dropped = p.cwiseProduct(mask);
      const Eigen::VectorXd probs = classify_pair(p_dropped, model.pair_head);
      pair_ce_sum += -std::log(std::max(probs(pp.label), 1e-300));

      if (options.with_grad && out.pair_items > 0 && options.pair_weight != 0.0) {
        Eigen::VectorXd d_z = probs;
        d_z(pp.label) -= 1.0;
        d_z *= options.pair_weight / static_cast<double>(out.pair_items);
        model.pair_head.weight_grad += p_dropped * d_z.transpose();
        model.pair_head.bias_grad.col(0) += d_z;
        const Eigen::VectorXd d_p = (model.pair_head.weight * d_z).cwiseProduct(mask);

        backprop_span_rep(pp.emotion, fe, d_p.head(g_dim));
        backprop_span_rep(pp.cause, fc, d_p.segment(g_dim, g_dim));
        if (model.config.pair_use_localized_context) {
          const auto d_sum = d_p.segment(2 * g_dim, d);
          for (int t = lc.ctx_begin; t <= lc.ctx_end; ++t) d_hidden.row(t) += d_sum.transpose();
          if (!lc.max_row.empty())
            for (int k = 0; k < d; ++k) d_hidden(lc.max_row[k], k) += d_p(2 * g_dim + d + k);
          model.pair_head.psi_grad.row(lc.distance) +=
              d_p.tail(model.pair_head.psi_dim).transpose();
        }
      }
    }

    if (options.with_grad) tape->backward(d_hidden, d_global);
  }

  out.span_ce = out.span_items > 0 ? span_ce_sum / static_cast<double>(out.span_items) : 0.0;
  out.pair_ce = out.pair_items > 0 ? pair_ce_sum / static_cast<double>(out.pair_items) : 0.0;
  out.total = options.span_weight * out.span_ce + options.pair_weight * out.pair_ce;
  return out;
}

namespace {

double ecsp_f1(const Corpus& corpus, const Model& model) {
  const EvalReport report = evaluate(corpus, model, EvalMode::span);
  const TaskResult* t = report.find("ECSP");
  return t ? t->scores.f1 : 0.0;
}

void seeded_shuffle(std::vector<size_t>& order, Rng& rng) {
  for (size_t i = order.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(rng() % i);
    std::swap(order[i - 1], order[j]);
  }
}

}  // namespace

TrainResult train(const Corpus& input_docs, const RunConfig& config,
                  std::vector<std::string> categories, const TrainLogger& logger) {
  config.validate_for_training();
  if (input_docs.empty()) throw TrainError("training set is empty");
  const TrainConfig tc = TrainConfig::from_run_config(config);

  // With clause candidates the gold spans must sit on clause boundaries,
  // otherwise no candidate ever carries a positive label.
  Corpus train_docs = input_docs;
  if (config.span_candidates == "clauses")
    for (Document& doc : train_docs) doc = relax_document_to_clauses(doc);

  // Seeded dev split of the training documents.
  std::vector<size_t> order(train_docs.size());
  std::iota(order.begin(), order.end(), size_t{0});
  Rng split_rng(mix64(tc.seed ^ 0x646576ULL));
  seeded_shuffle(order, split_rng);

  Corpus fit_docs, dev_docs;
  if (tc.dev_fraction > 0.0) {
    size_t n_dev = static_cast<size_t>(tc.dev_fraction * static_cast<double>(order.size()));
    n_dev = std::max<size_t>(1, n_dev);
    if (n_dev >= order.size())
      throw TrainError("dev split leaves no training documents; lower train.dev_fraction");
    for (size_t i = 0; i < order.size(); ++i)
      (i < n_dev ? dev_docs : fit_docs).push_back(train_docs[order[i]]);
  } else {
    fit_docs = train_docs;
    dev_docs = train_docs;
  }

  TrainResult result{Model::create(config, std::move(categories)), 0, 0.0, 0, 0, {}};
  Model& model = result.model;

  AdamOptimizer optimizer(model.trainable_parameters());
  Rng rng(mix64(tc.seed ^ 0x747261696eULL));
  Rng shuffle_rng(mix64(tc.seed ^ 0x73687566ULL));

  const std::int64_t steps_per_epoch =
      (static_cast<std::int64_t>(fit_docs.size()) + tc.batch_size - 1) / tc.batch_size;
  const std::int64_t eval_interval =
      tc.eval_interval_steps > 0 ? tc.eval_interval_steps : steps_per_epoch;

  LossOptions loss_options;
  loss_options.span_weight = tc.span_loss_weight;
  loss_options.pair_weight = tc.pair_loss_weight;
  loss_options.dropout = tc.dropout;
  loss_options.neg_downsample = tc.neg_downsample;
  loss_options.with_grad = true;

  std::vector<size_t> epoch_order(fit_docs.size());
  std::iota(epoch_order.begin(), epoch_order.end(), size_t{0});
  size_t cursor = epoch_order.size();  // forces a shuffle before the first doc

  std::vector<Eigen::MatrixXd> best_state = model.snapshot_state();
  double best_f1 = -1.0;
  std::int64_t best_step = 0;
  int evals_since_best = 0;

  auto run_eval = [&](std::int64_t step, double last_loss, double lr) {
    const double f1 = ecsp_f1(dev_docs, model);
    ++result.evals_run;
    if (f1 > best_f1) {
      best_f1 = f1;
      best_step = step;
      best_state = model.snapshot_state();
      evals_since_best = 0;
    } else {
      ++evals_since_best;
    }
    if (logger) {
      nlohmann::ordered_json line;
      line["step"] = step;
      line["loss"] = last_loss;
      line["lr"] = lr;
      line["dev_ecsp_f1"] = f1;
      line["best_dev_ecsp_f1"] = best_f1;
      logger(line.dump());
    }
    return evals_since_best >= tc.patience_evals;
  };

  double last_loss = 0.0;
  for (std::int64_t step = 1; step <= tc.total_steps; ++step) {
    const double lr = lr_at(step, tc);
    model.zero_grads();

    double batch_loss = 0.0;
    int batch_docs = 0;
    for (int b = 0; b < tc.batch_size; ++b) {
      if (cursor >= epoch_order.size()) {
        seeded_shuffle(epoch_order, shuffle_rng);
        cursor = 0;
      }
      const Document& doc = fit_docs[epoch_order[cursor++]];
      const LossBreakdown lb = document_loss(model, doc, loss_options, rng);
      result.warnings += lb.warnings;
      if (!std::isfinite(lb.total)) {
        std::ostringstream os;
        os << "non-finite loss at step " << step << " on doc " << doc.doc_id;
        throw TrainError(os.str());
      }
      batch_loss += lb.total;
      ++batch_docs;
    }
    last_loss = batch_loss / std::max(batch_docs, 1);
    optimizer.step(lr);
    result.steps_run = step;

    if (step % eval_interval == 0 || step == tc.total_steps) {
      if (run_eval(step, last_loss, lr)) break;
    }
  }

  if (result.evals_run == 0) run_eval(result.steps_run, last_loss, 0.0);

  model.restore_state(best_state);
  result.best_step = best_step;
  result.best_dev_f1 = best_f1 < 0.0 ? 0.0 : best_f1;
  return result;
}

}  // namespace ecsp
