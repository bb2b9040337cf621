#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdlib>
#include <string>
#include <vector>

#include "doctest.h"
#include "higru/optim.hpp"
#include "support/gradcheck.hpp"
#include "support/temp_dir.hpp"
#include "support/toy_corpus.hpp"

using namespace higru;
using higru::testing::check_gradients;
using higru::testing::synthetic_corpus_jsonl;
using higru::testing::TempDir;
using higru::testing::toy_scheme_json;
using higru::testing::write_file;

namespace {

// Loads the keyword-separable corpus into a ready-to-train bundle.
struct Pipeline {
  LabelScheme scheme;
  Corpus train;
  Corpus val;
  Vocabulary vocab;
  ModelConfig config;
  ModelParams params;
};

Pipeline make_pipeline(int n_train, int n_val, std::uint64_t seed,
                       std::size_t d1 = 8, std::size_t d2 = 8,
                       Variant variant = Variant::kPlain) {
  TempDir dir;
  std::string scheme_path = dir.file("scheme.json");
  std::string train_path = dir.file("train.jsonl");
  std::string val_path = dir.file("val.jsonl");
  write_file(scheme_path, toy_scheme_json());
  write_file(train_path, synthetic_corpus_jsonl(n_train, seed));
  write_file(val_path, synthetic_corpus_jsonl(n_val, seed + 1000));

  Pipeline p;
  p.scheme = load_label_scheme(scheme_path);
  p.train = load_corpus(train_path, Split::kTrain, p.scheme);
  p.val = load_corpus(val_path, Split::kVal, p.scheme);
  p.vocab = build_vocab(p.train);
  encode_corpus(p.train, p.vocab);
  encode_corpus(p.val, p.vocab);

  p.scheme.alpha = 0.0;
  p.scheme.counts = count_labels(p.train, p.scheme.classes.size());
  p.scheme.weights = compute_class_weights(p.scheme.counts, p.scheme.alpha,
                                           p.scheme.evaluated);

  p.config.variant = variant;
  p.config.d0 = 8;
  p.config.d1 = d1;
  p.config.d2 = d2;
  p.config.fc = {16};
  p.config.dropout = 0.1;
  p.config.num_classes = p.scheme.classes.size();

  RngStream emb_rng(seed, RngUse::kEmbeddingInit);
  Tensor emb =
      Tensor::uniform({p.vocab.size(), p.config.d0}, -0.25, 0.25, emb_rng);
  RngStream init_rng(seed, RngUse::kParamInit);
  p.params = init_model(p.config, emb, init_rng);
  return p;
}

Tensor leaf(std::vector<std::size_t> shape, std::vector<double> data) {
  return Tensor::from_data(std::move(shape), std::move(data), true);
}

void seed_grad(const Tensor& t, std::vector<double> g) {
  REQUIRE(g.size() == t.numel());
  t.impl()->grad = std::move(g);
}

}  // namespace

TEST_CASE("weighted cross-entropy: closed-form values") {
  // Perfect prediction: exactly zero loss.
  Tensor perfect = leaf({2, 3}, {1, 0, 0, 0, 1, 0});
  CHECK(weighted_ce(perfect, {0, 1}, {1, 1, 1}).value() == 0.0);

  // Uniform over 4 classes, unit weights, one utterance: log2(4) = 2 exactly.
  Tensor uniform = leaf({1, 4}, {0.25, 0.25, 0.25, 0.25});
  CHECK(weighted_ce(uniform, {2}, {1, 1, 1, 1}).value() == 2.0);

  // Two utterances, weights [2, 0], probabilities at labels [0.5, 0.9]:
  // -(1/2)(2*log2(0.5) + 0) = 1.
  Tensor two = leaf({2, 2}, {0.5, 0.5, 0.1, 0.9});
  CHECK(weighted_ce(two, {0, 1}, {2, 0}).value() == 1.0);
}

TEST_CASE("weighted cross-entropy: zero-weight rows vanish exactly") {
  std::vector<double> w{1.0, 0.0, 3.0};
  Tensor probs = leaf({3, 3}, {0.7, 0.2, 0.1,   //
                               0.3, 0.6, 0.1,   // label 1: weight 0
                               0.2, 0.2, 0.6});

  // Gradient through the zero-weight row is exactly zero.
  Tensor loss = weighted_ce(probs, {0, 1, 2}, w);
  backward(loss);
  const std::vector<double>& g = probs.grad();
  for (std::size_t c = 0; c < 3; ++c) CHECK(g[3 + c] == 0.0);
  CHECK(g[0] != 0.0);
  CHECK(g[8] != 0.0);

  // A batch holding only a zero-weight utterance has exactly zero loss.
  Tensor solo = leaf({1, 3}, {0.3, 0.6, 0.1});
  CHECK(weighted_ce(solo, {1}, w).value() == 0.0);

  // Appending a zero-weight utterance only rescales the denominator:
  // (N+1) * loss_with == N * loss_without.
  Tensor without = leaf({2, 3}, {0.7, 0.2, 0.1, 0.2, 0.2, 0.6});
  Tensor with = leaf({3, 3}, {0.7, 0.2, 0.1, 0.2, 0.2, 0.6, 0.3, 0.6, 0.1});
  double l_without = weighted_ce(without, {0, 2}, w).value();
  double l_with = weighted_ce(with, {0, 2, 1}, w).value();
  CHECK(3.0 * l_with == doctest::Approx(2.0 * l_without).epsilon(1e-12));
}

TEST_CASE("weighted cross-entropy: epsilon floor keeps the loss finite") {
  Tensor collapsed = leaf({1, 2}, {0.0, 1.0});
  Tensor loss = weighted_ce(collapsed, {0}, {1, 1});
  CHECK(std::isfinite(loss.value()));
  CHECK(loss.value() == doctest::Approx(-std::log2(1e-12)).epsilon(1e-12));
  backward(loss);
  CHECK(collapsed.grad()[0] == 0.0);  // flat inside the floor
}

TEST_CASE("weighted cross-entropy: gradient through softmax logits") {
  Tensor logits = leaf({3, 4}, {0.3, -0.2, 0.5, 0.1,  //
                                -0.4, 0.2, 0.0, 0.7,  //
                                0.1, 0.1, -0.3, 0.2});
  std::vector<int> labels{2, 3, 0};
  std::vector<double> weights{1.0, 0.5, 2.0, 0.0};  // label 3 carries 0
  check_gradients({logits}, [&] {
    return weighted_ce(softmax(logits), labels, weights);
  });
}

TEST_CASE("weighted cross-entropy: contract violations") {
  Tensor probs = leaf({2, 3}, {0.5, 0.3, 0.2, 0.1, 0.8, 0.1});
  CHECK_THROWS_AS(weighted_ce(probs, {0}, {1, 1, 1}), ContractError);
  CHECK_THROWS_AS(weighted_ce(probs, {0, 3}, {1, 1, 1}), ContractError);
  CHECK_THROWS_AS(weighted_ce(probs, {0, 1}, {1, 1}), ContractError);
  CHECK_THROWS_AS(weighted_ce(Tensor::scalar(1.0), {0}, {1}), ContractError);
}

TEST_CASE("gradient clipping: factor and norm behavior") {
  SUBCASE("norm below the limit: untouched") {
    Tensor t = leaf({3}, {1, 2, 2});
    seed_grad(t, {1, 2, 2});  // norm 3
    CHECK(clip_gradients({t}, 5.0) == 1.0);
    CHECK(t.grad() == std::vector<double>{1, 2, 2});
  }
  SUBCASE("norm exactly at the limit: untouched (3-4-5 triangle)") {
    Tensor t = leaf({2}, {0, 0});
    seed_grad(t, {3, 4});
    CHECK(clip_gradients({t}, 5.0) == 1.0);
    CHECK(t.grad() == std::vector<double>{3, 4});
  }
  SUBCASE("norm above the limit: scaled to the limit") {
    Tensor a = leaf({2}, {0, 0});
    Tensor b = leaf({1}, {0});
    seed_grad(a, {8, 0});
    seed_grad(b, {6});  // global norm 10
    double factor = clip_gradients({a, b}, 5.0);
    CHECK(factor == doctest::Approx(0.5).epsilon(1e-12));
    double post = std::sqrt(a.grad()[0] * a.grad()[0] +
                            a.grad()[1] * a.grad()[1] +
                            b.grad()[0] * b.grad()[0]);
    CHECK(post == doctest::Approx(5.0).epsilon(1e-9));
  }
  SUBCASE("parameters without gradients are skipped") {
    Tensor with = leaf({1}, {0});
    Tensor without = leaf({4}, {1, 2, 3, 4});
    seed_grad(with, {30});
    CHECK(clip_gradients({with, without}, 5.0) ==
          doctest::Approx(1.0 / 6.0).epsilon(1e-12));
  }
  SUBCASE("non-finite gradients abort") {
    Tensor t = leaf({2}, {0, 0});
    seed_grad(t, {1.0, std::nan("")});
    CHECK_THROWS_AS(clip_gradients({t}, 5.0), TrainError);
  }
}

TEST_CASE("Adam: first-step and steady-state behavior") {
  SUBCASE("first step moves by about -lr") {
    Tensor p = leaf({1}, {1.0});
    AdamState state({p});
    seed_grad(p, {1.0});
    adam_step(state, {p}, 0.1);
    CHECK(state.t == 1);
    CHECK(p.data()[0] - 1.0 ==
          doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-9));
  }
  SUBCASE("zero gradients from a fresh state leave parameters unchanged") {
    Tensor p = leaf({3}, {1.0, -2.0, 0.5});
    AdamState state({p});
    seed_grad(p, {0.0, 0.0, 0.0});
    adam_step(state, {p}, 0.1);
    CHECK(state.t == 1);
    CHECK(p.data() == std::vector<double>{1.0, -2.0, 0.5});
  }
  SUBCASE("constant gradient converges to lr-sized steps") {
    Tensor p = leaf({1}, {0.0});
    AdamState state({p});
    double lr = 0.01;
    double before = 0.0;
    for (int i = 0; i < 1000; ++i) {
      before = p.data()[0];
      seed_grad(p, {3.7});
      adam_step(state, {p}, lr);
    }
    double step = std::abs(p.data()[0] - before);
    CHECK(step == doctest::Approx(lr).epsilon(0.01));
  }
  SUBCASE("parameter-list mismatch is an error") {
    Tensor p = leaf({1}, {0.0});
    AdamState state({p});
    CHECK_THROWS_AS(adam_step(state, {p, p}, 0.1), ContractError);
  }
}

TEST_CASE("learning-rate schedule: halving every 20 epochs") {
  CHECK(lr_at_epoch(1e-4, 0) == 1e-4);
  CHECK(lr_at_epoch(1e-4, 19) == 1e-4);
  CHECK(lr_at_epoch(1e-4, 20) == 0.5e-4);
  CHECK(lr_at_epoch(1e-4, 45) == 0.25e-4);  // floor(45/20) = 2
  double prev = lr_at_epoch(1e-4, 0);
  for (std::size_t e = 1; e <= 100; ++e) {
    double cur = lr_at_epoch(1e-4, e);
    CHECK(cur <= prev);
    if (e % 20 == 0) {
      CHECK(cur == 0.5 * prev);
    } else {
      CHECK(cur == prev);
    }
    prev = cur;
  }
  CHECK(lr_at_epoch(8e-4, 10, 5, 0.5) == 2e-4);  // custom interval
}

TEST_CASE("train-config validation") {
  TrainConfig ok;
  CHECK_NOTHROW(validate_train_config(ok));
  TrainConfig bad = ok;
  bad.lr = 0.0;
  CHECK_THROWS_AS(validate_train_config(bad), ConfigError);
  bad = ok;
  bad.patience = 0;
  CHECK_THROWS_AS(validate_train_config(bad), ConfigError);
  bad = ok;
  bad.clip_norm = -1.0;
  CHECK_THROWS_AS(validate_train_config(bad), ConfigError);
  bad = ok;
  bad.anneal_every = 0;
  CHECK_THROWS_AS(validate_train_config(bad), ConfigError);
  bad = ok;
  bad.max_epochs = 0;
  CHECK_THROWS_AS(validate_train_config(bad), ConfigError);
  CHECK(parse_select_metric("wa") == SelectMetric::kWa);
  CHECK(parse_select_metric("uwa") == SelectMetric::kUwa);
  CHECK_THROWS_AS(parse_select_metric("f1"), ConfigError);
}

TEST_CASE("evaluate_corpus matches a hand accumulation and is thread-count "
          "invariant") {
  Pipeline p = make_pipeline(10, 6, 42);

  EvalResult single = evaluate_corpus(p.params, p.config, p.val, p.scheme, 1);

  ConfusionMatrix by_hand(p.scheme);
  for (const Dialogue& d : p.val.dialogues) {
    std::vector<int> preds = predict(p.params, p.config, d, p.scheme.evaluated);
    for (std::size_t j = 0; j < d.utterances.size(); ++j) {
      if (d.utterances[j].label) by_hand.update(*d.utterances[j].label, preds[j]);
    }
  }
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t q = 0; q < 4; ++q) {
      CHECK(single.cm.count(t, q) == by_hand.count(t, q));
    }
  }
  CHECK(single.wa == wa(by_hand));
  CHECK(single.uwa == uwa(by_hand));

  EvalResult multi = evaluate_corpus(p.params, p.config, p.val, p.scheme, 3);
  CHECK(multi.wa == single.wa);  // bitwise: counts merge exactly
  CHECK(multi.uwa == single.uwa);

  setenv("HIGRU_THREADS", "2", 1);
  EvalResult capped = evaluate_corpus(p.params, p.config, p.val, p.scheme, 0);
  CHECK(capped.wa == single.wa);
  setenv("HIGRU_THREADS", "banana", 1);
  CHECK_THROWS_AS(evaluate_corpus(p.params, p.config, p.val, p.scheme, 0),
                  ConfigError);
  unsetenv("HIGRU_THREADS");
}

TEST_CASE("train_loop: two runs with one seed give identical histories") {
  TrainConfig tc;
  tc.lr = 1e-3;
  tc.max_epochs = 4;
  tc.patience = 10;
  tc.seed = 99;
  tc.select = SelectMetric::kUwa;

  auto run = [&] {
    Pipeline p = make_pipeline(6, 4, 7);
    return train_loop(p.params, p.config, p.train, p.val, p.scheme, tc);
  };
  TrainResult a = run();
  TrainResult b = run();
  CHECK(history_csv(a.history) == history_csv(b.history));
  REQUIRE(a.history.size() == b.history.size());

  std::vector<Tensor> ta = a.best_params.tensors();
  std::vector<Tensor> tb = b.best_params.tensors();
  REQUIRE(ta.size() == tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) {
    CHECK(ta[i].data() == tb[i].data());  // bitwise
  }
}

TEST_CASE("train_loop: best metric is the history maximum") {
  Pipeline p = make_pipeline(6, 4, 11);
  TrainConfig tc;
  tc.lr = 1e-3;
  tc.max_epochs = 6;
  tc.patience = 10;
  tc.seed = 3;
  TrainResult r = train_loop(p.params, p.config, p.train, p.val, p.scheme, tc);
  REQUIRE(!r.history.empty());
  double best = -1.0;
  std::size_t best_epoch = 0;
  for (const EpochRecord& rec : r.history) {
    if (rec.val_uwa > best) {
      best = rec.val_uwa;
      best_epoch = rec.epoch;
    }
  }
  CHECK(r.best_metric == best);
  CHECK(r.best_epoch == best_epoch);

  // The snapshot's own validation score reproduces the recorded metric.
  EvalResult ev = evaluate_corpus(r.best_params, p.config, p.val, p.scheme);
  CHECK(ev.uwa == r.best_metric);
}

TEST_CASE("train_loop: plateau stops after exactly patience+1 evaluations") {
  Pipeline p = make_pipeline(5, 4, 13);
  TrainConfig tc;
  tc.lr = 1e-30;  // updates vanish, so the metric never moves
  tc.max_epochs = 50;
  tc.patience = 1;
  tc.seed = 5;
  TrainResult r = train_loop(p.params, p.config, p.train, p.val, p.scheme, tc);
  CHECK(r.history.size() == 2);  // epoch 0 improves over nothing; epoch 1 ties
  CHECK(r.best_epoch == 0);

  tc.patience = 3;
  Pipeline q = make_pipeline(5, 4, 13);
  TrainResult r3 = train_loop(q.params, q.config, q.train, q.val, q.scheme, tc);
  CHECK(r3.history.size() == 4);
}

TEST_CASE("train_loop: history CSV layout") {
  Pipeline p = make_pipeline(4, 4, 17);
  TrainConfig tc;
  tc.lr = 1e-3;
  tc.max_epochs = 2;
  tc.patience = 10;
  tc.seed = 21;
  std::size_t callback_epochs = 0;
  TrainCallbacks cb;
  cb.on_epoch = [&](const EpochRecord&) { ++callback_epochs; };
  TrainResult r = train_loop(p.params, p.config, p.train, p.val, p.scheme, tc, cb);
  CHECK(callback_epochs == r.history.size());

  std::string csv = history_csv(r.history);
  CHECK(csv.rfind("epoch,train_loss,val_WA,val_UWA,lr,clipped_fraction\n", 0) ==
        0);
  CHECK(csv.find("\n0,") != std::string::npos);  // epochs are 0-based
  for (const EpochRecord& rec : r.history) {
    CHECK(std::isfinite(rec.train_loss));
    CHECK(rec.lr == lr_at_epoch(tc.lr, rec.epoch));
    CHECK(rec.clipped_fraction >= 0.0);
    CHECK(rec.clipped_fraction <= 1.0);
  }
}

TEST_CASE("train_loop: fails fast on bad inputs") {
  Pipeline p = make_pipeline(4, 4, 19);
  TrainConfig tc;
  tc.max_epochs = 1;

  Corpus empty;
  CHECK_THROWS_AS(
      train_loop(p.params, p.config, empty, p.val, p.scheme, tc),
      ContractError);
  CHECK_THROWS_AS(
      train_loop(p.params, p.config, p.train, empty, p.scheme, tc),
      ContractError);

  // Validation set missing an evaluated class.
  Corpus tiny;
  tiny.dialogues.push_back(p.val.dialogues[0]);
  for (Utterance& u : tiny.dialogues[0].utterances) u.label = 0;  // joy only
  CHECK_THROWS_WITH_AS(
      train_loop(p.params, p.config, p.train, tiny, p.scheme, tc),
      doctest::Contains("'sad'"), TrainError);

  // A poisoned parameter turns the first loss non-finite.
  Pipeline bad = make_pipeline(4, 4, 19);
  bad.params.out.b.data()[0] = std::nan("");
  CHECK_THROWS_WITH_AS(
      train_loop(bad.params, bad.config, bad.train, bad.val, bad.scheme, tc),
      doctest::Contains("non-finite loss"), TrainError);
}

TEST_CASE("train_loop: separable corpus is learned quickly") {
  Pipeline p = make_pipeline(8, 8, 23, 16, 16);
  TrainConfig tc;
  tc.lr = 1e-3;
  tc.max_epochs = 60;
  tc.patience = 60;
  tc.seed = 1;
  tc.select = SelectMetric::kUwa;
  TrainResult r = train_loop(p.params, p.config, p.train, p.val, p.scheme, tc);

  // Keyword-determined labels with a shared generator: near-perfect held-out
  // accuracy, and perfect training accuracy, are reachable fast.
  EvalResult on_train =
      evaluate_corpus(r.best_params, p.config, p.train, p.scheme);
  CHECK(on_train.wa > 0.99);
  CHECK(r.best_metric > 0.8);

  // Loss should have dropped substantially from the first epoch.
  CHECK(r.history.back().train_loss < 0.5 * r.history.front().train_loss);
}
