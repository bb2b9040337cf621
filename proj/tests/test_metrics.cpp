#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <string>
#include <vector>

#include "doctest.h"
#include "higru/metrics.hpp"

using namespace higru;

namespace {

void bulk(ConfusionMatrix& cm, int truth, int pred, int times) {
  for (int i = 0; i < times; ++i) cm.update(truth, pred);
}

// Two evaluated classes: totals (75, 25), correct (60, 10).
ConfusionMatrix reference_matrix() {
  ConfusionMatrix cm(2, {true, true}, {"joy", "sad"});
  bulk(cm, 0, 0, 60);
  bulk(cm, 0, 1, 15);
  bulk(cm, 1, 1, 10);
  bulk(cm, 1, 0, 15);
  return cm;
}

}  // namespace

TEST_CASE("update: counting, exclusion, and id validation") {
  ConfusionMatrix cm(3, {true, false, true}, {"joy", "skip", "sad"});
  cm.update(0, 0);
  CHECK(cm.count(0, 0) == 1);
  CHECK(cm.grand_total() == 1);

  cm.update(1, 0);  // excluded truth: dropped entirely
  CHECK(cm.grand_total() == 1);
  CHECK(cm.count(1, 0) == 0);

  for (int i = 0; i < 7; ++i) cm.update(2, i % 3);
  CHECK(cm.grand_total() == 8);
  CHECK(cm.row_total(2) == 7);

  CHECK_THROWS_AS(cm.update(-1, 0), ContractError);
  CHECK_THROWS_AS(cm.update(3, 0), ContractError);
  CHECK_THROWS_AS(cm.update(0, 5), ContractError);
}

TEST_CASE("construction contracts") {
  CHECK_THROWS_AS(ConfusionMatrix(0, {}), ContractError);
  CHECK_THROWS_AS(ConfusionMatrix(2, {true}), ContractError);
  CHECK_THROWS_AS(ConfusionMatrix(2, {false, false}), ContractError);
  CHECK_THROWS_AS(ConfusionMatrix(2, {true, true}, {"only-one"}),
                  ContractError);
}

TEST_CASE("frozen accuracies: WA 0.70 and UWA 0.60") {
  ConfusionMatrix cm = reference_matrix();
  CHECK(cm.class_accuracy(0) == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(cm.class_accuracy(1) == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(wa(cm) == doctest::Approx(0.70).epsilon(1e-12));
  CHECK(uwa(cm) == doctest::Approx(0.60).epsilon(1e-12));
}

TEST_CASE("perfect and all-wrong extremes") {
  ConfusionMatrix perfect(2, {true, true});
  bulk(perfect, 0, 0, 9);
  bulk(perfect, 1, 1, 4);
  CHECK(wa(perfect) == 1.0);
  CHECK(uwa(perfect) == 1.0);

  ConfusionMatrix wrong(2, {true, true});
  bulk(wrong, 0, 1, 9);
  bulk(wrong, 1, 0, 4);
  CHECK(wa(wrong) == 0.0);
  CHECK(uwa(wrong) == 0.0);
}

TEST_CASE("imbalance sensitivity: WA stays high while UWA collapses") {
  ConfusionMatrix cm(2, {true, true});
  bulk(cm, 0, 0, 990);
  bulk(cm, 0, 1, 10);   // class 0: 1000 samples, accuracy 0.99
  bulk(cm, 1, 0, 10);   // class 1: 10 samples, accuracy 0.0
  CHECK(uwa(cm) == doctest::Approx(0.495).epsilon(1e-12));
  CHECK(wa(cm) == doctest::Approx(990.0 / 1010.0).epsilon(1e-12));
}

TEST_CASE("equal class counts make WA and UWA identical") {
  ConfusionMatrix cm(3, {true, true, true});
  bulk(cm, 0, 0, 7);
  bulk(cm, 0, 1, 3);
  bulk(cm, 1, 1, 4);
  bulk(cm, 1, 2, 6);
  bulk(cm, 2, 2, 9);
  bulk(cm, 2, 0, 1);
  REQUIRE(cm.row_total(0) == 10);
  REQUIRE(cm.row_total(1) == 10);
  REQUIRE(cm.row_total(2) == 10);
  CHECK(wa(cm) == uwa(cm));  // bitwise
}

TEST_CASE("permutation of class labels leaves both metrics unchanged") {
  ConfusionMatrix a(3, {true, true, true});
  bulk(a, 0, 0, 6);
  bulk(a, 0, 2, 2);
  bulk(a, 1, 1, 3);
  bulk(a, 1, 0, 1);
  bulk(a, 2, 2, 5);
  bulk(a, 2, 1, 5);

  // Apply the cycle 0 -> 1 -> 2 -> 0 to both truth and prediction.
  auto perm = [](int c) { return (c + 1) % 3; };
  ConfusionMatrix b(3, {true, true, true});
  for (int t = 0; t < 3; ++t) {
    for (int p = 0; p < 3; ++p) {
      for (std::int64_t i = 0; i < a.count(t, p); ++i) {
        b.update(perm(t), perm(p));
      }
    }
  }
  CHECK(wa(b) == doctest::Approx(wa(a)).epsilon(1e-12));
  CHECK(uwa(b) == doctest::Approx(uwa(a)).epsilon(1e-12));
}

TEST_CASE("score bounds on an arbitrary matrix") {
  ConfusionMatrix cm(2, {true, true});
  bulk(cm, 0, 0, 3);
  bulk(cm, 0, 1, 5);
  bulk(cm, 1, 1, 2);
  bulk(cm, 1, 0, 6);
  CHECK(wa(cm) >= 0.0);
  CHECK(wa(cm) <= 1.0);
  CHECK(uwa(cm) >= 0.0);
  CHECK(uwa(cm) <= 1.0);
}

TEST_CASE("metric errors: empty matrix and absent evaluated class") {
  ConfusionMatrix empty(2, {true, true}, {"joy", "sad"});
  CHECK_THROWS_AS(wa(empty), MetricError);

  ConfusionMatrix partial(2, {true, true}, {"joy", "sad"});
  bulk(partial, 0, 0, 5);
  CHECK(wa(partial) == 1.0);  // p_sad = 0 contributes nothing
  CHECK_THROWS_AS(uwa(partial), MetricError);
  CHECK_THROWS_WITH_AS(uwa(partial),
                       doctest::Contains("'sad'"), MetricError);
}

TEST_CASE("merge equals sequential accumulation") {
  ConfusionMatrix whole = reference_matrix();
  ConfusionMatrix left(2, {true, true}, {"joy", "sad"});
  ConfusionMatrix right(2, {true, true}, {"joy", "sad"});
  bulk(left, 0, 0, 60);
  bulk(left, 1, 0, 15);
  bulk(right, 0, 1, 15);
  bulk(right, 1, 1, 10);
  left.merge(right);
  for (std::size_t t = 0; t < 2; ++t) {
    for (std::size_t p = 0; p < 2; ++p) {
      CHECK(left.count(t, p) == whole.count(t, p));
    }
  }
  CHECK(wa(left) == wa(whole));
  CHECK(uwa(left) == uwa(whole));

  ConfusionMatrix mismatched(3, {true, true, true});
  CHECK_THROWS_AS(left.merge(mismatched), ContractError);
}

TEST_CASE("CSV report golden file") {
  // Equal counts with power-of-two accuracies so every number prints short.
  ConfusionMatrix cm(3, {true, true, false}, {"joy", "sad", "other"});
  bulk(cm, 0, 0, 3);
  bulk(cm, 0, 1, 1);
  bulk(cm, 1, 1, 2);
  bulk(cm, 1, 0, 2);
  std::string expected =
      "class,n,accuracy\n"
      "joy,4,0.75\n"
      "sad,4,0.5\n"
      "WA,,0.625\n"
      "UWA,,0.625\n";
  CHECK(report_csv(cm) == expected);
}

TEST_CASE("text report carries the table, both scores, and the matrix") {
  ConfusionMatrix cm(3, {true, true, false}, {"joy", "sad", "other"});
  bulk(cm, 0, 0, 3);
  bulk(cm, 0, 1, 1);
  bulk(cm, 1, 1, 2);
  bulk(cm, 1, 0, 2);
  std::string text = report_text(cm);
  CHECK(text.find("class") != std::string::npos);
  CHECK(text.find("joy") != std::string::npos);
  CHECK(text.find("0.7500") != std::string::npos);
  CHECK(text.find("WA:  0.6250") != std::string::npos);
  CHECK(text.find("UWA: 0.6250") != std::string::npos);
  CHECK(text.find("rows = truth") != std::string::npos);
  // Excluded class never appears as a truth row, but is a valid column.
  CHECK(text.find("\nother") == std::string::npos);
}
