#include "higru/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <unordered_map>
#include <unordered_set>
#include <utility>

#include "higru/rng.hpp"

namespace higru {

namespace {

thread_local bool g_grad_enabled = true;

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

void validate_shape(const char* op, const std::vector<std::size_t>& shape) {
  if (shape.empty()) {
    throw DimensionError(std::string(op) + ": empty shape");
  }
  for (std::size_t d : shape) {
    if (d == 0) {
      throw DimensionError(std::string(op) +
                           ": zero-sized dimension in shape " +
                           shape_string(shape));
    }
  }
}

void require_defined(const char* op,
                     std::initializer_list<const Tensor*> tensors) {
  for (const Tensor* t : tensors) {
    if (!t->defined()) {
      throw ContractError(std::string(op) + ": undefined tensor argument");
    }
  }
}

void require_rank2(const char* op, const Tensor& t, const char* which) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": " + which +
                         " must be rank-2, got shape " +
                         shape_string(t.shape()));
  }
}

std::shared_ptr<TensorImpl> new_leaf(std::vector<std::size_t> shape,
                                     std::vector<double> data,
                                     bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return impl;
}

}  // namespace

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out += " x ";
    out += std::to_string(shape[i]);
  }
  out += "]";
  return out;
}

// ---- Tensor handle ---------------------------------------------------------

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  validate_shape("zeros", shape);
  std::size_t n = shape_numel(shape);
  return wrap(new_leaf(std::move(shape), std::vector<double>(n, 0.0),
                       requires_grad));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value,
                    bool requires_grad) {
  validate_shape("full", shape);
  std::size_t n = shape_numel(shape);
  return wrap(new_leaf(std::move(shape), std::vector<double>(n, value),
                       requires_grad));
}

Tensor Tensor::from_data(std::vector<std::size_t> shape,
                         std::vector<double> data, bool requires_grad) {
  validate_shape("from_data", shape);
  if (data.size() != shape_numel(shape)) {
    throw DimensionError("from_data: " + std::to_string(data.size()) +
                         " values do not fill shape " + shape_string(shape));
  }
  return wrap(new_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value) {
  return wrap(new_leaf({1}, {value}, false));
}

Tensor Tensor::uniform(std::vector<std::size_t> shape, double lo, double hi,
                       RngStream& rng, bool requires_grad) {
  validate_shape("uniform", shape);
  std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = rng.uniform(lo, hi);
  return wrap(new_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::wrap(std::shared_ptr<TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

const std::vector<std::size_t>& Tensor::shape() const {
  if (!impl_) throw ContractError("shape: undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::numel() const {
  return shape_numel(shape());
}

std::size_t Tensor::rows() const {
  const auto& s = shape();
  if (s.size() != 2) {
    throw DimensionError("rows: tensor is rank-" + std::to_string(s.size()) +
                         ", not rank-2");
  }
  return s[0];
}

std::size_t Tensor::cols() const {
  const auto& s = shape();
  if (s.size() != 2) {
    throw DimensionError("cols: tensor is rank-" + std::to_string(s.size()) +
                         ", not rank-2");
  }
  return s[1];
}

std::vector<double>& Tensor::data() {
  if (!impl_) throw ContractError("data: undefined tensor");
  return impl_->data;
}

const std::vector<double>& Tensor::data() const {
  if (!impl_) throw ContractError("data: undefined tensor");
  return impl_->data;
}

bool Tensor::has_grad() const {
  return impl_ && !impl_->grad.empty();
}

const std::vector<double>& Tensor::grad() const {
  if (!impl_) throw ContractError("grad: undefined tensor");
  if (impl_->grad.empty()) {
    throw ContractError("grad: no gradient accumulated for this tensor");
  }
  return impl_->grad;
}

void Tensor::clear_grad() {
  if (!impl_) throw ContractError("clear_grad: undefined tensor");
  impl_->grad.clear();
}

bool Tensor::requires_grad() const {
  return impl_ && impl_->requires_grad;
}

void Tensor::set_requires_grad(bool flag) {
  if (!impl_) throw ContractError("set_requires_grad: undefined tensor");
  if (impl_->node) {
    throw ContractError(
        "set_requires_grad: only leaf tensors may change this flag");
  }
  impl_->requires_grad = flag;
}

double Tensor::value() const {
  if (numel() != 1) {
    throw DimensionError("value: tensor has shape " + shape_string(shape()) +
                         ", expected a single element");
  }
  return impl_->data[0];
}

double Tensor::at(std::size_t i) const {
  const auto& d = data();
  if (i >= d.size()) {
    throw DimensionError("at: index " + std::to_string(i) +
                         " out of range for " + std::to_string(d.size()) +
                         " elements");
  }
  return d[i];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  const auto& s = shape();
  if (s.size() != 2) {
    throw DimensionError("at(r, c): tensor is not rank-2");
  }
  if (r >= s[0] || c >= s[1]) {
    throw DimensionError("at: (" + std::to_string(r) + ", " +
                         std::to_string(c) + ") out of range for shape " +
                         shape_string(s));
  }
  return impl_->data[r * s[1] + c];
}

Tensor Tensor::clone() const {
  if (!impl_) throw ContractError("clone: undefined tensor");
  return wrap(new_leaf(impl_->shape, impl_->data, false));
}

// ---- grad mode --------------------------------------------------------------

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---- op builder --------------------------------------------------------------

Tensor make_op(const char* op, std::vector<std::size_t> shape,
               std::vector<double> data, std::vector<Tensor> parents,
               BackwardFn backward) {
  validate_shape(op, shape);
  if (data.size() != shape_numel(shape)) {
    throw DimensionError(std::string(op) + ": forward produced " +
                         std::to_string(data.size()) +
                         " values for shape " + shape_string(shape));
  }
  bool track = false;
  if (g_grad_enabled) {
    for (const Tensor& p : parents) {
      if (p.defined() && p.requires_grad()) {
        track = true;
        break;
      }
    }
  }
  auto impl = new_leaf(std::move(shape), std::move(data), track);
  if (track) {
    impl->node = std::make_unique<GraphNode>();
    impl->node->op = op;
    impl->node->parents.reserve(parents.size());
    for (const Tensor& p : parents) impl->node->parents.push_back(p.ptr());
    impl->node->backward = std::move(backward);
  }
  return Tensor::wrap(impl);
}

// ---- elementwise ops ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_defined("add", {&a, &b});
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa == sb) {
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = a.data()[i] + b.data()[i];
    }
    return make_op(
        "add", sa, std::move(out), {a, b},
        [](const TensorImpl&, const std::vector<double>& g,
           const std::vector<std::vector<double>*>& pg) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (pg[0]) (*pg[0])[i] += g[i];
            if (pg[1]) (*pg[1])[i] += g[i];
          }
        });
  }
  // Bias-row broadcast: [m x n] + [n] or [m x n] + [1 x n].
  bool row_bias = sa.size() == 2 &&
                  ((sb.size() == 1 && sb[0] == sa[1]) ||
                   (sb.size() == 2 && sb[0] == 1 && sb[1] == sa[1]));
  if (!row_bias) {
    throw DimensionError("add: incompatible shapes " + shape_string(sa) +
                         " and " + shape_string(sb));
  }
  std::size_t m = sa[0], n = sa[1];
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = a.data()[i * n + j] + b.data()[j];
    }
  }
  return make_op(
      "add", sa, std::move(out), {a, b},
      [m, n](const TensorImpl&, const std::vector<double>& g,
             const std::vector<std::vector<double>*>& pg) {
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            if (pg[0]) (*pg[0])[i * n + j] += g[i * n + j];
            if (pg[1]) (*pg[1])[j] += g[i * n + j];
          }
        }
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_defined("sub", {&a, &b});
  if (a.shape() != b.shape()) {
    throw DimensionError("sub: shapes differ, " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a.data()[i] - b.data()[i];
  }
  return make_op(
      "sub", a.shape(), std::move(out), {a, b},
      [](const TensorImpl&, const std::vector<double>& g,
         const std::vector<std::vector<double>*>& pg) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (pg[0]) (*pg[0])[i] += g[i];
          if (pg[1]) (*pg[1])[i] -= g[i];
        }
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_defined("mul", {&a, &b});
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shapes differ, " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = a.data()[i] * b.data()[i];
  }
  return make_op(
      "mul", a.shape(), std::move(out), {a, b},
      [](const TensorImpl& self, const std::vector<double>& g,
         const std::vector<std::vector<double>*>& pg) {
        const auto& da = self.node->parents[0]->data;
        const auto& db = self.node->parents[1]->data;
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (pg[0]) (*pg[0])[i] += g[i] * db[i];
          if (pg[1]) (*pg[1])[i] += g[i] * da[i];
        }
      });
}

Tensor scale(const Tensor& x, double factor) {
  require_defined("scale", {&x});
  std::vector<double> out(x.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
  return make_op(
      "scale", x.shape(), std::move(out), {x},
      [factor](const TensorImpl&, const std::vector<double>& g,
               const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) {
          (*pg[0])[i] += g[i] * factor;
        }
      });
}

Tensor tanh(const Tensor& x) {
  require_defined("tanh", {&x});
  std::vector<double> out(x.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.data()[i]);
  return make_op(
      "tanh", x.shape(), std::move(out), {x},
      [](const TensorImpl& self, const std::vector<double>& g,
         const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) {
          double y = self.data[i];
          (*pg[0])[i] += g[i] * (1.0 - y * y);
        }
      });
}

Tensor sigmoid(const Tensor& x) {
  require_defined("sigmoid", {&x});
  std::vector<double> out(x.data().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 1.0 / (1.0 + std::exp(-x.data()[i]));
  }
  return make_op(
      "sigmoid", x.shape(), std::move(out), {x},
      [](const TensorImpl& self, const std::vector<double>& g,
         const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) {
          double y = self.data[i];
          (*pg[0])[i] += g[i] * y * (1.0 - y);
        }
      });
}

// ---- linear algebra -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined("matmul", {&a, &b});
  require_rank2("matmul", a, "left operand");
  require_rank2("matmul", b, "right operand");
  std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ, " +
                         shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  const auto& da = a.data();
  const auto& db = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      double av = da[i * k + kk];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) {
        out[i * n + j] += av * db[kk * n + j];
      }
    }
  }
  return make_op(
      "matmul", {m, n}, std::move(out), {a, b},
      [m, k, n](const TensorImpl& self, const std::vector<double>& g,
                const std::vector<std::vector<double>*>& pg) {
        const auto& da = self.node->parents[0]->data;
        const auto& db = self.node->parents[1]->data;
        if (pg[0]) {  // dA = g . B^T
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t kk = 0; kk < k; ++kk) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) {
                acc += g[i * n + j] * db[kk * n + j];
              }
              (*pg[0])[i * k + kk] += acc;
            }
          }
        }
        if (pg[1]) {  // dB = A^T . g
          for (std::size_t kk = 0; kk < k; ++kk) {
            for (std::size_t i = 0; i < m; ++i) {
              double av = da[i * k + kk];
              if (av == 0.0) continue;
              for (std::size_t j = 0; j < n; ++j) {
                (*pg[1])[kk * n + j] += av * g[i * n + j];
              }
            }
          }
        }
      });
}

Tensor transpose(const Tensor& x) {
  require_defined("transpose", {&x});
  require_rank2("transpose", x, "input");
  std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      out[j * m + i] = x.data()[i * n + j];
    }
  }
  return make_op(
      "transpose", {n, m}, std::move(out), {x},
      [m, n](const TensorImpl&, const std::vector<double>& g,
             const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            (*pg[0])[i * n + j] += g[j * m + i];
          }
        }
      });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  for (const Tensor& p : parts) require_defined("concat", {&p});
  std::size_t rank = parts[0].rank();
  if (rank == 1) {
    if (axis != 0) {
      throw DimensionError("concat: axis must be 0 for rank-1 inputs");
    }
    std::size_t total = 0;
    for (const Tensor& p : parts) {
      if (p.rank() != 1) {
        throw DimensionError("concat: mixed ranks among inputs");
      }
      total += p.shape()[0];
    }
    std::vector<double> out;
    out.reserve(total);
    std::vector<std::size_t> sizes;
    for (const Tensor& p : parts) {
      out.insert(out.end(), p.data().begin(), p.data().end());
      sizes.push_back(p.shape()[0]);
    }
    return make_op(
        "concat", {total}, std::move(out), parts,
        [sizes](const TensorImpl&, const std::vector<double>& g,
                const std::vector<std::vector<double>*>& pg) {
          std::size_t off = 0;
          for (std::size_t p = 0; p < sizes.size(); ++p) {
            if (pg[p]) {
              for (std::size_t i = 0; i < sizes[p]; ++i) {
                (*pg[p])[i] += g[off + i];
              }
            }
            off += sizes[p];
          }
        });
  }
  if (rank != 2 || axis > 1) {
    throw DimensionError("concat: supports rank-1 axis 0 or rank-2 axis 0/1");
  }
  if (axis == 0) {
    std::size_t n = parts[0].cols();
    std::size_t total_rows = 0;
    for (const Tensor& p : parts) {
      require_rank2("concat", p, "input");
      if (p.cols() != n) {
        throw DimensionError("concat: column counts differ, " +
                             std::to_string(n) + " vs " +
                             std::to_string(p.cols()));
      }
      total_rows += p.rows();
    }
    std::vector<double> out;
    out.reserve(total_rows * n);
    std::vector<std::size_t> row_counts;
    for (const Tensor& p : parts) {
      out.insert(out.end(), p.data().begin(), p.data().end());
      row_counts.push_back(p.rows());
    }
    return make_op(
        "concat", {total_rows, n}, std::move(out), parts,
        [row_counts, n](const TensorImpl&, const std::vector<double>& g,
                        const std::vector<std::vector<double>*>& pg) {
          std::size_t row_off = 0;
          for (std::size_t p = 0; p < row_counts.size(); ++p) {
            std::size_t count = row_counts[p] * n;
            if (pg[p]) {
              for (std::size_t i = 0; i < count; ++i) {
                (*pg[p])[i] += g[row_off * n + i];
              }
            }
            row_off += row_counts[p];
          }
        });
  }
  // axis == 1
  std::size_t m = parts[0].rows();
  std::size_t total_cols = 0;
  std::vector<std::size_t> widths;
  for (const Tensor& p : parts) {
    require_rank2("concat", p, "input");
    if (p.rows() != m) {
      throw DimensionError("concat: row counts differ, " + std::to_string(m) +
                           " vs " + std::to_string(p.rows()));
    }
    widths.push_back(p.cols());
    total_cols += p.cols();
  }
  std::vector<double> out(m * total_cols);
  std::size_t col_off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& d = parts[p].data();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < widths[p]; ++j) {
        out[i * total_cols + col_off + j] = d[i * widths[p] + j];
      }
    }
    col_off += widths[p];
  }
  return make_op(
      "concat", {m, total_cols}, std::move(out), parts,
      [m, widths, total_cols](const TensorImpl&, const std::vector<double>& g,
                              const std::vector<std::vector<double>*>& pg) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < widths.size(); ++p) {
          if (pg[p]) {
            for (std::size_t i = 0; i < m; ++i) {
              for (std::size_t j = 0; j < widths[p]; ++j) {
                (*pg[p])[i * widths[p] + j] += g[i * total_cols + off + j];
              }
            }
          }
          off += widths[p];
        }
      });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_defined("slice_rows", {&x});
  require_rank2("slice_rows", x, "input");
  std::size_t m = x.rows(), n = x.cols();
  if (begin >= end || end > m) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") invalid for " +
                         std::to_string(m) + " rows");
  }
  std::size_t out_rows = end - begin;
  std::vector<double> out(x.data().begin() + begin * n,
                          x.data().begin() + end * n);
  return make_op(
      "slice_rows", {out_rows, n}, std::move(out), {x},
      [begin, n, out_rows](const TensorImpl&, const std::vector<double>& g,
                           const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < out_rows * n; ++i) {
          (*pg[0])[begin * n + i] += g[i];
        }
      });
}

Tensor reshape(const Tensor& x, std::vector<std::size_t> shape) {
  require_defined("reshape", {&x});
  validate_shape("reshape", shape);
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) +
                         " as " + shape_string(shape));
  }
  return make_op(
      "reshape", std::move(shape), x.data(), {x},
      [](const TensorImpl&, const std::vector<double>& g,
         const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
      });
}

Tensor gather_rows(const Tensor& matrix, const std::vector<int>& ids) {
  require_defined("gather_rows", {&matrix});
  require_rank2("gather_rows", matrix, "table");
  if (ids.empty()) {
    throw EmptySequenceError("gather_rows: empty id list");
  }
  std::size_t v = matrix.rows(), d = matrix.cols();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    int id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw DimensionError("gather_rows: id " + std::to_string(id) +
                           " out of range for " + std::to_string(v) +
                           " rows");
    }
    std::copy(matrix.data().begin() + id * d,
              matrix.data().begin() + (id + 1) * d, out.begin() + i * d);
  }
  return make_op(
      "gather_rows", {ids.size(), d}, std::move(out), {matrix},
      [ids, d](const TensorImpl&, const std::vector<double>& g,
               const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < ids.size(); ++i) {
          for (std::size_t j = 0; j < d; ++j) {
            (*pg[0])[static_cast<std::size_t>(ids[i]) * d + j] +=
                g[i * d + j];
          }
        }
      });
}

// ---- softmax family ------------------------------------------------------------

namespace {

// Shared forward/backward for softmax over the last axis with a mask cutoff.
Tensor softmax_impl(const char* op, const Tensor& x, std::size_t valid) {
  require_defined(op, {&x});
  const auto& s = x.shape();
  std::size_t rows, n;
  if (s.size() == 1) {
    rows = 1;
    n = s[0];
  } else if (s.size() == 2) {
    rows = s[0];
    n = s[1];
  } else {
    throw DimensionError(std::string(op) + ": rank must be 1 or 2, got " +
                         shape_string(s));
  }
  if (valid == 0 || valid > n) {
    throw MaskError(std::string(op) + ": valid count " +
                    std::to_string(valid) + " outside [1, " +
                    std::to_string(n) + "]");
  }
  std::vector<double> out(x.data().size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * n;
    double* o = out.data() + r * n;
    double hi = -1e300;
    for (std::size_t j = 0; j < n; ++j) {
      double t = (j < valid) ? in[j] : in[j] - 1e30;
      if (t > hi) hi = t;
    }
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double t = (j < valid) ? in[j] : in[j] - 1e30;
      o[j] = std::exp(t - hi);
      total += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = (j < valid) ? o[j] / total : 0.0;
    }
  }
  return make_op(
      op, s, std::move(out), {x},
      [rows, n](const TensorImpl& self, const std::vector<double>& g,
                const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t r = 0; r < rows; ++r) {
          const double* y = self.data.data() + r * n;
          const double* go = g.data() + r * n;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += go[j] * y[j];
          for (std::size_t j = 0; j < n; ++j) {
            (*pg[0])[r * n + j] += y[j] * (go[j] - dot);
          }
        }
      });
}

}  // namespace

Tensor masked_softmax(const Tensor& scores, std::size_t valid) {
  return softmax_impl("masked_softmax", scores, valid);
}

Tensor softmax(const Tensor& x) {
  require_defined("softmax", {&x});
  const auto& s = x.shape();
  std::size_t n = s.back();
  return softmax_impl("softmax", x, n);
}

// ---- reductions -------------------------------------------------------------------

Tensor max_over_time(const Tensor& seq) {
  require_defined("max_over_time", {&seq});
  require_rank2("max_over_time", seq, "input");
  std::size_t m = seq.rows(), d = seq.cols();
  std::vector<double> out(d);
  std::vector<std::size_t> argmax(d, 0);
  for (std::size_t j = 0; j < d; ++j) {
    double best = seq.data()[j];
    std::size_t best_i = 0;
    for (std::size_t i = 1; i < m; ++i) {
      double v = seq.data()[i * d + j];
      if (v > best) {  // ties keep the earliest position
        best = v;
        best_i = i;
      }
    }
    out[j] = best;
    argmax[j] = best_i;
  }
  return make_op(
      "max_over_time", {d}, std::move(out), {seq},
      [argmax, d](const TensorImpl&, const std::vector<double>& g,
                  const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t j = 0; j < d; ++j) {
          (*pg[0])[argmax[j] * d + j] += g[j];
        }
      });
}

Tensor sum(const Tensor& x) {
  require_defined("sum", {&x});
  double total = 0.0;
  for (double v : x.data()) total += v;
  return make_op(
      "sum", {1}, {total}, {x},
      [](const TensorImpl& self, const std::vector<double>& g,
         const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        std::size_t n = self.node->parents[0]->data.size();
        for (std::size_t i = 0; i < n; ++i) (*pg[0])[i] += g[0];
      });
}

// ---- dropout ---------------------------------------------------------------------

Tensor dropout(const Tensor& x, double rate, Mode mode, RngStream* rng) {
  require_defined("dropout", {&x});
  if (rate < 0.0 || rate >= 1.0) {
    throw ConfigError("dropout: rate " + std::to_string(rate) +
                      " outside [0, 1)");
  }
  if (mode == Mode::kEval || rate == 0.0) return x;
  if (rng == nullptr) {
    throw ContractError("dropout: training mode needs a random stream");
  }
  double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.data().size());
  std::vector<double> out(x.data().size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = rng->bernoulli(rate) ? 0.0 : keep_scale;
    out[i] = x.data()[i] * mask[i];
  }
  return make_op(
      "dropout", x.shape(), std::move(out), {x},
      [mask = std::move(mask)](const TensorImpl&,
                               const std::vector<double>& g,
                               const std::vector<std::vector<double>*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) {
          (*pg[0])[i] += g[i] * mask[i];
        }
      });
}

// ---- fused affine -----------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require_defined("linear", {&x, &w, &b});
  require_rank2("linear", x, "input");
  require_rank2("linear", w, "weight");
  std::size_t m = x.rows(), in = x.cols();
  std::size_t out_dim = w.rows();
  if (w.cols() != in) {
    throw DimensionError("linear: weight " + shape_string(w.shape()) +
                         " does not accept input " + shape_string(x.shape()));
  }
  if (b.rank() != 1 || b.shape()[0] != out_dim) {
    throw DimensionError("linear: bias " + shape_string(b.shape()) +
                         " does not match " + std::to_string(out_dim) +
                         " outputs");
  }
  std::vector<double> out(m * out_dim);
  const auto& dx = x.data();
  const auto& dw = w.data();
  const auto& dbias = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = dbias[o];
      for (std::size_t k = 0; k < in; ++k) {
        acc += dx[i * in + k] * dw[o * in + k];
      }
      out[i * out_dim + o] = acc;
    }
  }
  return make_op(
      "linear", {m, out_dim}, std::move(out), {x, w, b},
      [m, in, out_dim](const TensorImpl& self, const std::vector<double>& g,
                       const std::vector<std::vector<double>*>& pg) {
        const auto& dx = self.node->parents[0]->data;
        const auto& dw = self.node->parents[1]->data;
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t o = 0; o < out_dim; ++o) {
            double go = g[i * out_dim + o];
            if (go == 0.0) continue;
            if (pg[0]) {
              for (std::size_t k = 0; k < in; ++k) {
                (*pg[0])[i * in + k] += go * dw[o * in + k];
              }
            }
            if (pg[1]) {
              for (std::size_t k = 0; k < in; ++k) {
                (*pg[1])[o * in + k] += go * dx[i * in + k];
              }
            }
            if (pg[2]) (*pg[2])[o] += go;
          }
        }
      });
}

// ---- reverse-mode engine -------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward: undefined tensor");
  if (loss.numel() != 1) {
    throw ContractError("backward: expected a single-value loss, got shape " +
                        shape_string(loss.shape()));
  }
  TensorImpl* root = loss.impl();
  if (!root->requires_grad) return;  // nothing reachable needs gradients

  // Post-order DFS: inputs end up before the nodes that consume them.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  visited.insert(root);
  stack.emplace_back(root, 0);
  while (!stack.empty()) {
    auto& top = stack.back();
    TensorImpl* cur = top.first;
    std::size_t n_parents = cur->node ? cur->node->parents.size() : 0;
    if (top.second < n_parents) {
      TensorImpl* parent = cur->node->parents[top.second].get();
      ++top.second;
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(cur);
      stack.pop_back();
    }
  }

  // Propagate through buffers local to this call, then fold into the
  // persistent per-tensor gradients, so repeated backward calls add up.
  std::unordered_map<TensorImpl*, std::vector<double>> local;
  local.reserve(order.size());
  local[root] = {1.0};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* cur = *it;
    if (!cur->node || !cur->node->backward) continue;
    auto found = local.find(cur);
    if (found == local.end()) continue;
    std::vector<std::vector<double>*> parent_bufs;
    parent_bufs.reserve(cur->node->parents.size());
    for (const auto& parent : cur->node->parents) {
      if (parent->requires_grad) {
        auto& buf = local[parent.get()];
        if (buf.empty()) buf.assign(parent->data.size(), 0.0);
        parent_bufs.push_back(&buf);
      } else {
        parent_bufs.push_back(nullptr);
      }
    }
    cur->node->backward(*cur, found->second, parent_bufs);
  }
  for (TensorImpl* t : order) {
    auto found = local.find(t);
    if (found == local.end()) continue;
    if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
    for (std::size_t i = 0; i < t->grad.size(); ++i) {
      t->grad[i] += found->second[i];
    }
  }
}

void zero_grads(const std::vector<Tensor>& tensors) {
  for (const Tensor& t : tensors) {
    if (t.defined()) t.impl()->grad.clear();
  }
}

}  // namespace higru
