#include "higru/metrics.hpp"

#include <cstdio>
#include <sstream>

namespace higru {

namespace {

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes,
                                 std::vector<bool> evaluated,
                                 std::vector<std::string> names)
    : n_(num_classes),
      evaluated_(std::move(evaluated)),
      names_(std::move(names)),
      counts_(num_classes * num_classes, 0) {
  if (n_ == 0) {
    throw ContractError("confusion matrix needs at least one class");
  }
  if (evaluated_.size() != n_) {
    throw ContractError("confusion matrix: evaluated mask has " +
                        std::to_string(evaluated_.size()) + " entries for " +
                        std::to_string(n_) + " classes");
  }
  if (!names_.empty() && names_.size() != n_) {
    throw ContractError("confusion matrix: " + std::to_string(names_.size()) +
                        " class names for " + std::to_string(n_) + " classes");
  }
  bool any = false;
  for (bool e : evaluated_) any = any || e;
  if (!any) {
    throw ContractError("confusion matrix: no class is evaluated");
  }
}

ConfusionMatrix::ConfusionMatrix(const LabelScheme& scheme)
    : ConfusionMatrix(scheme.classes.size(), scheme.evaluated,
                      scheme.classes) {}

std::string ConfusionMatrix::class_name(std::size_t c) const {
  if (c < names_.size()) return "'" + names_[c] + "'";
  return "class " + std::to_string(c);
}

void ConfusionMatrix::update(int truth, int pred) {
  if (truth < 0 || static_cast<std::size_t>(truth) >= n_) {
    throw ContractError("confusion matrix: true class id " +
                        std::to_string(truth) + " out of range [0, " +
                        std::to_string(n_) + ")");
  }
  if (pred < 0 || static_cast<std::size_t>(pred) >= n_) {
    throw ContractError("confusion matrix: predicted class id " +
                        std::to_string(pred) + " out of range [0, " +
                        std::to_string(n_) + ")");
  }
  if (!evaluated_[static_cast<std::size_t>(truth)]) return;
  counts_[static_cast<std::size_t>(truth) * n_ +
          static_cast<std::size_t>(pred)] += 1;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_ || other.evaluated_ != evaluated_) {
    throw ContractError(
        "confusion matrix merge: class count or evaluated mask differs");
  }
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::int64_t ConfusionMatrix::count(std::size_t truth, std::size_t pred) const {
  if (truth >= n_ || pred >= n_) {
    throw ContractError("confusion matrix: index out of range");
  }
  return counts_[truth * n_ + pred];
}

std::int64_t ConfusionMatrix::row_total(std::size_t truth) const {
  if (truth >= n_) {
    throw ContractError("confusion matrix: index out of range");
  }
  std::int64_t total = 0;
  for (std::size_t p = 0; p < n_; ++p) total += counts_[truth * n_ + p];
  return total;
}

std::int64_t ConfusionMatrix::grand_total() const {
  std::int64_t total = 0;
  for (std::size_t c = 0; c < n_; ++c) {
    if (evaluated_[c]) total += row_total(c);
  }
  return total;
}

double ConfusionMatrix::class_accuracy(std::size_t c) const {
  if (c >= n_ || !evaluated_[c]) {
    throw MetricError("accuracy requested for non-evaluated " + class_name(c));
  }
  std::int64_t row = row_total(c);
  if (row == 0) {
    throw MetricError("evaluated " + class_name(c) +
                      " has no samples in the evaluation set");
  }
  return static_cast<double>(counts_[c * n_ + c]) / static_cast<double>(row);
}

double wa(const ConfusionMatrix& cm) {
  std::int64_t grand = cm.grand_total();
  if (grand == 0) {
    throw MetricError("weighted accuracy over an empty confusion matrix");
  }
  double score = 0.0;
  for (std::size_t c = 0; c < cm.num_classes(); ++c) {
    if (!cm.evaluated()[c]) continue;
    std::int64_t row = cm.row_total(c);
    if (row == 0) continue;  // class share p_c = 0
    double p_c = static_cast<double>(row) / static_cast<double>(grand);
    score += p_c * cm.class_accuracy(c);
  }
  return score;
}

double uwa(const ConfusionMatrix& cm) {
  std::size_t k = 0;
  for (bool e : cm.evaluated()) k += e ? 1 : 0;
  double share = 1.0 / static_cast<double>(k);
  double score = 0.0;
  for (std::size_t c = 0; c < cm.num_classes(); ++c) {
    if (!cm.evaluated()[c]) continue;
    score += share * cm.class_accuracy(c);  // throws if the class is absent
  }
  return score;
}

std::string report_text(const ConfusionMatrix& cm) {
  std::ostringstream out;
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%-12s %8s %10s\n", "class", "n", "accuracy");
  out << buf;
  for (std::size_t c = 0; c < cm.num_classes(); ++c) {
    if (!cm.evaluated()[c]) continue;
    std::string name = cm.class_name(c);
    if (name.size() >= 2 && name.front() == '\'') {
      name = name.substr(1, name.size() - 2);
    }
    std::snprintf(buf, sizeof(buf), "%-12s %8lld %10.4f\n", name.c_str(),
                  static_cast<long long>(cm.row_total(c)),
                  cm.class_accuracy(c));
    out << buf;
  }
  std::snprintf(buf, sizeof(buf), "\nWA:  %.4f\nUWA: %.4f\n", wa(cm), uwa(cm));
  out << buf;

  out << "\nconfusion matrix (rows = truth, cols = predicted):\n";
  std::snprintf(buf, sizeof(buf), "%-12s", "");
  out << buf;
  for (std::size_t p = 0; p < cm.num_classes(); ++p) {
    std::string name = cm.class_name(p);
    if (name.size() >= 2 && name.front() == '\'') {
      name = name.substr(1, name.size() - 2);
    }
    std::snprintf(buf, sizeof(buf), " %8s", name.c_str());
    out << buf;
  }
  out << '\n';
  for (std::size_t t = 0; t < cm.num_classes(); ++t) {
    if (!cm.evaluated()[t]) continue;
    std::string name = cm.class_name(t);
    if (name.size() >= 2 && name.front() == '\'') {
      name = name.substr(1, name.size() - 2);
    }
    std::snprintf(buf, sizeof(buf), "%-12s", name.c_str());
    out << buf;
    for (std::size_t p = 0; p < cm.num_classes(); ++p) {
      std::snprintf(buf, sizeof(buf), " %8lld",
                    static_cast<long long>(cm.count(t, p)));
      out << buf;
    }
    out << '\n';
  }
  return out.str();
}

std::string report_csv(const ConfusionMatrix& cm) {
  std::ostringstream out;
  out << "class,n,accuracy\n";
  for (std::size_t c = 0; c < cm.num_classes(); ++c) {
    if (!cm.evaluated()[c]) continue;
    std::string name = cm.class_name(c);
    if (name.size() >= 2 && name.front() == '\'') {
      name = name.substr(1, name.size() - 2);
    }
    out << name << ',' << cm.row_total(c) << ','
        << format_double(cm.class_accuracy(c)) << '\n';
  }
  out << "WA,," << format_double(wa(cm)) << '\n';
  out << "UWA,," << format_double(uwa(cm)) << '\n';
  return out.str();
}

}  // namespace higru
