#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "ecsp/errors.hpp"
#include "ecsp/evaluation.hpp"
#include "ecsp/training.hpp"
#include "synthetic.hpp"

using namespace ecsp;

namespace {

TrainConfig schedule(double peak, double warmup_fraction, std::int64_t total) {
  TrainConfig tc;
  tc.peak_lr = peak;
  tc.warmup_fraction = warmup_fraction;
  tc.total_steps = total;
  return tc;
}

RunConfig toy_config(int dim, int max_len) {
  RunConfig config;
  config.encoder_kind = "toy";
  config.encoder_hidden_dim = dim;
  config.encoder_max_positions = 64;
  config.span_max_len = max_len;
  config.span_phi_dim = 4;
  config.pair_psi_dim = 4;
  config.pair_dist_buckets = 16;
  config.train_dropout = 0.0;
  config.train_seed = 7;
  return config;
}

Corpus gradient_docs() {
  Corpus corpus;
  corpus.push_back(synth::make_doc(
      "fd1", {{"alpha", "beta", "gamma"}, {"delta", "eps", "zeta", "eta"}, {"theta", "iota"}},
      {{{0, 1}, {3, 6}, "joy"}}));
  corpus.push_back(synth::make_doc(
      "fd2", {{"kappa", "lambda", "mu", "nu"}, {"xi", "omicron", "pi"}, {"rho", "sigma", "tau"}},
      {{{1, 2}, {4, 4}, "fear"}, {{1, 2}, {7, 9}, "joy"}}));
  corpus.push_back(synth::make_doc(
      "fd3", {{"upsilon", "phin"}, {"chi", "psin"}, {"omega", "one"}, {"two", "three"}},
      {{{0, 1}, {4, 5}, "joy"}, {{6, 7}, {2, 3}, "fear"}}));
  return corpus;
}

double summed_loss(Model& model, const Corpus& docs, const LossOptions& options) {
  double sum = 0.0;
  for (const Document& doc : docs) {
    Rng rng(123);
    sum += document_loss(model, doc, options, rng).total;
  }
  return sum;
}

}  // namespace

TEST_CASE("lr schedule ramps linearly to the peak then decays to zero") {
  const TrainConfig tc = schedule(0.02, 0.1, 100);  // warmup = 10 steps
  CHECK(lr_at(0, tc) == 0.0);
  CHECK(lr_at(-3, tc) == 0.0);
  CHECK(lr_at(5, tc) == doctest::Approx(0.01));
  CHECK(lr_at(10, tc) == doctest::Approx(0.02));
  CHECK(lr_at(55, tc) == doctest::Approx(0.02 * 45.0 / 90.0));
  CHECK(lr_at(99, tc) == doctest::Approx(0.02 / 90.0));
  CHECK(lr_at(100, tc) == 0.0);
  CHECK(lr_at(350, tc) == 0.0);

  for (std::int64_t s = 1; s < 10; ++s) CHECK(lr_at(s, tc) < lr_at(s + 1, tc));
  for (std::int64_t s = 10; s < 99; ++s) CHECK(lr_at(s, tc) > lr_at(s + 1, tc));

  const TrainConfig no_warmup = schedule(0.5, 0.0, 10);
  CHECK(lr_at(1, no_warmup) == doctest::Approx(0.5 * 9.0 / 10.0));

  CHECK(lr_at(3, schedule(0.5, 0.1, 0)) == 0.0);
}

TEST_CASE("span labels mark exact gold boundaries and count irregularities") {
  Document doc = synth::make_doc("d", {{"a", "b", "c"}, {"d", "e", "f"}});
  doc.pairs.push_back({{0, 1}, {3, 4}, "joy"});
  const std::vector<CandidateSpan> cands = enumerate_spans(6, 3);

  const SpanLabelAssignment sla = assign_span_labels(doc, cands);
  REQUIRE(sla.labels.size() == cands.size());
  for (size_t i = 0; i < cands.size(); ++i) {
    const SpanRef r = cands[i].ref();
    if (r == SpanRef{0, 1})
      CHECK(sla.labels[i] == SpanType::emotion);
    else if (r == SpanRef{3, 4})
      CHECK(sla.labels[i] == SpanType::cause);
    else
      CHECK(sla.labels[i] == SpanType::none);
  }
  CHECK(sla.warnings.dual_role_spans == 0);
  CHECK(sla.warnings.gold_spans_unrepresentable == 0);
}

TEST_CASE("a dual-role span trains as emotion and is counted once") {
  Document doc = synth::make_doc("d", {{"a", "b", "c", "d", "e", "f"}});
  doc.pairs.push_back({{0, 1}, {3, 4}, "joy"});
  doc.pairs.push_back({{5, 5}, {0, 1}, "fear"});  // {0,1} is also a cause now

  const SpanLabelAssignment sla = assign_span_labels(doc, enumerate_spans(6, 2));
  CHECK(sla.warnings.dual_role_spans == 1);
  const std::vector<CandidateSpan> cands = enumerate_spans(6, 2);
  for (size_t i = 0; i < cands.size(); ++i)
    if (cands[i].ref() == SpanRef{0, 1}) CHECK(sla.labels[i] == SpanType::emotion);
}

TEST_CASE("gold spans longer than every candidate are flagged, not silently dropped") {
  Document doc = synth::make_doc("d", {{"a", "b", "c", "d", "e", "f"}});
  doc.pairs.push_back({{0, 1}, {1, 5}, "joy"});  // cause length 5

  const SpanLabelAssignment sla = assign_span_labels(doc, enumerate_spans(6, 2));
  CHECK(sla.warnings.gold_spans_unrepresentable == 1);
}

TEST_CASE("pair labels cover the gold cross product with none off the annotations") {
  Document doc = synth::make_doc("d", {{"a", "b", "c", "d"}, {"e", "f", "g", "h"}});
  doc.pairs.push_back({{0, 1}, {4, 5}, "joy"});
  doc.pairs.push_back({{2, 3}, {6, 7}, "fear"});
  const std::map<std::string, int> index{{"fear", 0}, {"joy", 1}};

  const std::vector<PairLabel> labels = assign_pair_labels(doc, index);
  REQUIRE(labels.size() == 4);  // 2 emotions x 2 causes
  auto label_of = [&](SpanRef e, SpanRef c) {
    for (const PairLabel& pl : labels)
      if (pl.emotion == e && pl.cause == c) return pl.label;
    FAIL("pair not produced");
    return -1;
  };
  CHECK(label_of({0, 1}, {4, 5}) == 1);
  CHECK(label_of({2, 3}, {6, 7}) == 0);
  CHECK(label_of({0, 1}, {6, 7}) == 2);  // none = |categories|
  CHECK(label_of({2, 3}, {4, 5}) == 2);

  Document bad = doc;
  bad.pairs[0].category = "confusion";
  CHECK_THROWS_WITH_AS(assign_pair_labels(bad, index),
                       "doc d: category \"confusion\" is not in the training vocabulary",
                       TrainError);
}

TEST_CASE("joint loss is the weighted sum of the two mean cross-entropies") {
  Eigen::MatrixXd span_probs(2, 3);
  span_probs << 0.7, 0.2, 0.1, 0.1, 0.6, 0.3;
  Eigen::MatrixXd pair_probs(1, 2);
  pair_probs << 0.25, 0.75;

  const double expected =
      2.0 * (-(std::log(0.7) + std::log(0.6)) / 2.0) + 0.5 * -std::log(0.75);
  CHECK(joint_loss(span_probs, {0, 1}, pair_probs, {1}, 2.0, 0.5) ==
        doctest::Approx(expected).epsilon(1e-12));

  // an empty pair set contributes exactly zero
  const Eigen::MatrixXd no_pairs(0, 2);
  CHECK(joint_loss(span_probs, {0, 1}, no_pairs, {}, 1.0, 5.0) ==
        doctest::Approx(-(std::log(0.7) + std::log(0.6)) / 2.0));

  CHECK_THROWS_AS(joint_loss(span_probs, {0}, pair_probs, {1}, 1.0, 1.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(joint_loss(span_probs, {0, 3}, pair_probs, {1}, 1.0, 1.0),
                  std::invalid_argument);
}

TEST_CASE("Adam steps match a scalar re-derivation") {
  Eigen::MatrixXd value(1, 1), grad(1, 1);
  value << 1.0;
  grad << 0.5;
  AdamOptimizer opt({ParamRef{"p", &value, &grad}});

  const double b1 = 0.9, b2 = 0.999, eps = 1e-8, g = 0.5, lr = 0.1;
  double m = 0.0, v = 0.0, x = 1.0;
  for (int t = 1; t <= 2; ++t) {
    opt.step(lr);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double m_hat = m / (1 - std::pow(b1, t));
    const double v_hat = v / (1 - std::pow(b2, t));
    x -= lr * m_hat / (std::sqrt(v_hat) + eps);
    CHECK(value(0, 0) == doctest::Approx(x).epsilon(1e-14));
  }
  // constant gradient: bias correction makes each update ~ lr * sign(g)
  CHECK(value(0, 0) == doctest::Approx(1.0 - 2 * lr * (g / (g + eps))).epsilon(1e-9));

  Eigen::MatrixXd frozen(1, 1), zero_grad(1, 1);
  frozen << 3.0;
  zero_grad << 0.0;
  AdamOptimizer opt2({ParamRef{"q", &frozen, &zero_grad}});
  opt2.step(0.5);
  CHECK(frozen(0, 0) == 3.0);
}

TEST_CASE("document loss counts items and honors negative downsampling") {
  RunConfig config = toy_config(8, 3);
  Document doc = synth::make_doc("d", {{"a", "b", "c"}, {"d", "e", "f"}});
  doc.pairs.push_back({{0, 1}, {3, 5}, "joy"});
  Model model = Model::create(config, {"joy"});

  LossOptions options;
  Rng rng(1);
  const LossBreakdown lb = document_loss(model, doc, options, rng);
  CHECK(lb.span_items == span_count(6, 3));
  CHECK(lb.pair_items == 1);
  CHECK(lb.total == doctest::Approx(lb.span_ce + lb.pair_ce));
  CHECK(std::isfinite(lb.total));

  LossOptions weighted = options;
  weighted.span_weight = 2.0;
  weighted.pair_weight = 0.25;
  Rng rng2(1);
  const LossBreakdown wb = document_loss(model, doc, weighted, rng2);
  CHECK(wb.total == doctest::Approx(2.0 * lb.span_ce + 0.25 * lb.pair_ce));

  LossOptions drop_all = options;
  drop_all.neg_downsample = 1.0;
  Rng rng3(9);
  const LossBreakdown db = document_loss(model, doc, drop_all, rng3);
  CHECK(db.span_items == 2);  // only the two gold spans survive
  CHECK(db.pair_items == 1);
}

TEST_CASE("document loss is deterministic under a fixed rng seed") {
  RunConfig config = toy_config(8, 3);
  config.train_dropout = 0.3;
  Document doc = synth::make_doc("d", {{"a", "b", "c", "d"}, {"e", "f", "g"}});
  doc.pairs.push_back({{1, 2}, {4, 6}, "joy"});
  Model model = Model::create(config, {"joy"});

  LossOptions options;
  options.dropout = 0.3;
  Rng a(42), b(42);
  const double first = document_loss(model, doc, options, a).total;
  const double second = document_loss(model, doc, options, b).total;
  CHECK(first == second);

  // the backward pass must not consume randomness
  LossOptions with_grad = options;
  with_grad.with_grad = true;
  Rng c(42);
  model.zero_grads();
  CHECK(document_loss(model, doc, with_grad, c).total == first);
}

TEST_CASE("pairs spanning two windows are skipped and counted") {
  RunConfig config = toy_config(8, 3);
  config.encoder_max_positions = 6;
  Document doc = synth::make_doc("d", {{"a", "b", "c", "d", "e", "f"},
                                       {"g", "h", "i", "j", "k", "l"}});
  doc.pairs.push_back({{0, 1}, {6, 8}, "joy"});
  Model model = Model::create(config, {"joy"});

  LossOptions options;
  Rng rng(1);
  const LossBreakdown lb = document_loss(model, doc, options, rng);
  CHECK(lb.warnings.cross_window_pairs == 1);
  CHECK(lb.pair_items == 0);
  CHECK(lb.span_items > 0);
}

TEST_CASE("analytic gradients match central finite differences") {
  RunConfig config = toy_config(8, 4);
  config.encoder_trainable = true;
  const Corpus docs = gradient_docs();
  Model model = Model::create(config, {"fear", "joy"});

  LossOptions options;
  options.span_weight = 1.3;
  options.pair_weight = 0.7;
  options.with_grad = true;

  model.zero_grads();
  summed_loss(model, docs, options);

  LossOptions forward = options;
  forward.with_grad = false;

  const double eps = 1e-5;
  for (ParamRef& p : model.trainable_parameters()) {
    const Eigen::Index n = p.value->size();
    REQUIRE(n > 0);
    std::set<Eigen::Index> picks{0, n / 5, 2 * n / 5, 3 * n / 5, 4 * n / 5, n - 1};
    for (const Eigen::Index idx : picks) {
      double& cell = p.value->data()[idx];
      const double saved = cell;
      cell = saved + eps;
      const double f_plus = summed_loss(model, docs, forward);
      cell = saved - eps;
      const double f_minus = summed_loss(model, docs, forward);
      cell = saved;

      const double fd = (f_plus - f_minus) / (2.0 * eps);
      const double analytic = p.grad->data()[idx];
      const double rel =
          std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-6});
      CAPTURE(p.name);
      CAPTURE(idx);
      CHECK(rel <= 1e-4);
    }
  }
}

TEST_CASE("training rejects degenerate inputs") {
  RunConfig config = toy_config(8, 4);
  config.train_total_steps = 5;
  CHECK_THROWS_WITH_AS(train({}, config, {"joy"}), "training set is empty", TrainError);

  Corpus one = {synth::make_doc("d", {{"a", "b"}}, {{{0, 0}, {1, 1}, "joy"}})};
  RunConfig half = config;
  half.train_dev_fraction = 0.5;
  CHECK_THROWS_AS(train(one, half, {"joy"}), TrainError);

  RunConfig no_steps = toy_config(8, 4);
  CHECK_THROWS_AS(train(one, no_steps, {"joy"}), ConfigError);
}

TEST_CASE("a divergent learning rate reports the failing step and document") {
  Corpus corpus = synth::overfit_corpus();
  corpus.resize(4);
  RunConfig config = toy_config(16, 4);
  config.train_total_steps = 10;
  config.train_peak_lr = 1e300;
  config.train_warmup_fraction = 0.0;
  config.train_dev_fraction = 0.0;
  try {
    train(corpus, config, category_vocabulary(corpus));
    FAIL("expected TrainError");
  } catch (const TrainError& e) {
    CHECK(std::string(e.what()).find("non-finite loss at step") != std::string::npos);
  }
}

TEST_CASE("training is deterministic and restores the best-dev parameters") {
  Corpus corpus = synth::overfit_corpus();
  corpus.resize(6);
  RunConfig config = toy_config(16, 4);
  config.train_total_steps = 150;
  config.train_peak_lr = 0.05;
  config.train_eval_interval_steps = 10;
  config.train_batch_size = 2;
  config.train_dev_fraction = 0.0;  // evaluate on the training docs

  std::vector<std::string> log_a, log_b;
  TrainResult a = train(corpus, config, category_vocabulary(corpus),
                        [&](const std::string& line) { log_a.push_back(line); });
  TrainResult b = train(corpus, config, category_vocabulary(corpus),
                        [&](const std::string& line) { log_b.push_back(line); });

  CHECK(a.best_step == b.best_step);
  CHECK(a.best_dev_f1 == b.best_dev_f1);
  CHECK(a.steps_run == b.steps_run);
  CHECK(!log_a.empty());
  CHECK(log_a == log_b);

  auto ta = a.model.state_tensors();
  auto tb = b.model.state_tensors();
  REQUIRE(ta.size() == tb.size());
  for (size_t i = 0; i < ta.size(); ++i) CHECK(synth::same(*ta[i].value, *tb[i].value));

  // the returned model is the best-dev snapshot, not the last step
  const EvalReport report = evaluate(corpus, a.model, EvalMode::span);
  CHECK(report.find("ECSP")->scores.f1 == doctest::Approx(a.best_dev_f1).epsilon(1e-12));
  CHECK(a.best_dev_f1 > 0.5);

  const auto parsed = nlohmann::json::parse(log_a.front());
  for (const char* key : {"step", "loss", "lr", "dev_ecsp_f1", "best_dev_ecsp_f1"})
    CHECK(parsed.contains(key));
}

TEST_CASE("early stopping halts after patience evaluations without improvement") {
  Corpus corpus = synth::overfit_corpus();
  corpus.resize(4);
  RunConfig config = toy_config(8, 4);
  config.train_total_steps = 50;
  config.train_peak_lr = 1e-12;  // updates too small to move any decision
  config.train_eval_interval_steps = 1;
  config.train_patience_evals = 1;
  config.train_dev_fraction = 0.0;

  const TrainResult result = train(corpus, config, category_vocabulary(corpus));
  CHECK(result.steps_run == 2);
  CHECK(result.evals_run == 2);
  CHECK(result.best_step == 1);
}

TEST_CASE("clause-mode training relaxes gold spans onto clause candidates") {
  Corpus corpus;
  for (int i = 0; i < 4; ++i)
    corpus.push_back(synth::make_doc(
        "c" + std::to_string(i),
        {{"she", "felt", "joyful"}, {"after", "the", "letter", "came"}},
        {{{2, 2}, {5, 5}, "joy"}}));  // sub-clause gold spans
  RunConfig config = toy_config(8, 4);
  config.span_candidates = "clauses";
  config.train_total_steps = 12;
  config.train_peak_lr = 0.01;
  config.train_dev_fraction = 0.0;

  const TrainResult result = train(corpus, config, category_vocabulary(corpus));
  CHECK(result.warnings.gold_spans_unrepresentable == 0);
  CHECK(result.steps_run > 0);
}

TEST_CASE("unrepresentable gold spans surface in the train warnings") {
  Corpus corpus;
  corpus.push_back(synth::make_doc("w", {{"a", "b", "c", "d", "e", "f", "g"}},
                                   {{{0, 0}, {1, 6}, "joy"}}));  // cause length 6
  RunConfig config = toy_config(8, 3);
  config.train_total_steps = 3;
  config.train_dev_fraction = 0.0;

  const TrainResult result = train(corpus, config, category_vocabulary(corpus));
  CHECK(result.warnings.gold_spans_unrepresentable > 0);
}

TEST_CASE("train config lifts the flat run-config fields") {
  RunConfig config;
  config.train_peak_lr = 0.25;
  config.train_warmup_fraction = 0.3;
  config.train_total_steps = 77;
  config.train_neg_downsample = 0.4;
  config.train_dev_fraction = 0.0;
  const TrainConfig tc = TrainConfig::from_run_config(config);
  CHECK(tc.peak_lr == 0.25);
  CHECK(tc.warmup_fraction == 0.3);
  CHECK(tc.total_steps == 77);
  CHECK(tc.neg_downsample == 0.4);
  CHECK(tc.dev_fraction == 0.0);
}
