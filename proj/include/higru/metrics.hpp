#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "higru/data.hpp"
#include "higru/errors.hpp"

namespace higru {

// Square table of truth/prediction counts restricted to the evaluated
// classes: updates whose true class is excluded are dropped entirely, so
// every derived quantity reflects the evaluated subset only.
class ConfusionMatrix {
 public:
  ConfusionMatrix(std::size_t num_classes, std::vector<bool> evaluated,
                  std::vector<std::string> names = {});
  explicit ConfusionMatrix(const LabelScheme& scheme);

  // counts[truth][pred] += 1; a no-op when `truth` is an excluded class.
  void update(int truth, int pred);

  // Adds another matrix's counts; shapes and masks must agree. Count
  // addition commutes, so parallel shards can merge in any order.
  void merge(const ConfusionMatrix& other);

  std::int64_t count(std::size_t truth, std::size_t pred) const;
  std::int64_t row_total(std::size_t truth) const;
  std::int64_t grand_total() const;  // over evaluated rows only

  std::size_t num_classes() const { return n_; }
  const std::vector<bool>& evaluated() const { return evaluated_; }

  // diagonal / row total for one class; errors when the class has no
  // samples or is excluded.
  double class_accuracy(std::size_t c) const;

  std::string class_name(std::size_t c) const;

 private:
  std::size_t n_;
  std::vector<bool> evaluated_;
  std::vector<std::string> names_;        // may be empty (ids used instead)
  std::vector<std::int64_t> counts_;      // row-major n_ x n_
};

// Weighted accuracy: sum over evaluated classes of p_c * a_c, where p_c is
// the class share of the evaluation set and a_c its accuracy. Classes with
// no samples contribute zero. Errors when no evaluated sample exists.
double wa(const ConfusionMatrix& cm);

// Unweighted accuracy: mean per-class accuracy over evaluated classes.
// Errors (naming the class) when an evaluated class has no samples, since
// silently shrinking the denominator would misreport the score.
double uwa(const ConfusionMatrix& cm);

// Human-readable report: per-class table, both accuracies, and the matrix.
std::string report_text(const ConfusionMatrix& cm);

// Machine-readable report. Columns: class,n,accuracy; then WA and UWA rows.
std::string report_csv(const ConfusionMatrix& cm);

}  // namespace higru
