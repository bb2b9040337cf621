#include "higru/optim.hpp"

#include "higru/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <numbers>
#include <numeric>
#include <sstream>
#include <thread>

namespace higru {

namespace {

constexpr double kProbFloor = 1e-12;
constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string select_metric_name(SelectMetric m) {
  return m == SelectMetric::kWa ? "wa" : "uwa";
}

SelectMetric parse_select_metric(const std::string& name) {
  if (name == "wa") return SelectMetric::kWa;
  if (name == "uwa") return SelectMetric::kUwa;
  throw ConfigError("unknown selection metric '" + name +
                    "' (expected 'wa' or 'uwa')");
}

void validate_train_config(const TrainConfig& c) {
  if (!(c.lr > 0.0) || !std::isfinite(c.lr)) {
    throw ConfigError("learning rate must be positive");
  }
  if (c.anneal_every == 0) {
    throw ConfigError("anneal interval must be at least 1 epoch");
  }
  if (!(c.anneal_factor > 0.0) || c.anneal_factor > 1.0) {
    throw ConfigError("anneal factor must be in (0, 1]");
  }
  if (c.patience == 0) {
    throw ConfigError("early-stop patience must be at least 1");
  }
  if (!(c.clip_norm > 0.0)) {
    throw ConfigError("gradient clip norm must be positive");
  }
  if (c.alpha < 0.0 || !std::isfinite(c.alpha)) {
    throw ConfigError("class-weight exponent must be non-negative");
  }
  if (c.max_epochs == 0) {
    throw ConfigError("max epochs must be at least 1");
  }
}

AdamState::AdamState(const std::vector<Tensor>& params) {
  m.reserve(params.size());
  v.reserve(params.size());
  for (const Tensor& p : params) {
    if (!p.defined()) throw ContractError("Adam state over undefined tensor");
    m.emplace_back(p.numel(), 0.0);
    v.emplace_back(p.numel(), 0.0);
  }
}

Tensor weighted_ce(const Tensor& probs, const std::vector<int>& labels,
                   const std::vector<double>& weights) {
  if (!probs.defined() || probs.rank() != 2) {
    throw ContractError("weighted_ce: expected a [N x |C|] probability matrix");
  }
  std::size_t n = probs.rows();
  std::size_t num_classes = probs.cols();
  if (n == 0) throw ContractError("weighted_ce: empty batch");
  if (labels.size() != n) {
    throw ContractError("weighted_ce: " + std::to_string(labels.size()) +
                        " labels for " + std::to_string(n) + " rows");
  }
  if (weights.size() != num_classes) {
    throw ContractError("weighted_ce: " + std::to_string(weights.size()) +
                        " class weights for " + std::to_string(num_classes) +
                        " classes");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
      throw ContractError("weighted_ce: label id " + std::to_string(l) +
                          " out of range [0, " + std::to_string(num_classes) +
                          ")");
    }
  }

  const std::vector<double>& p = probs.data();
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double w = weights[static_cast<std::size_t>(labels[j])];
    if (w == 0.0) continue;  // exactly-zero term by construction
    double x = std::max(p[j * num_classes + static_cast<std::size_t>(labels[j])],
                        kProbFloor);
    total += w * std::log2(x);
  }
  double inv_n = 1.0 / static_cast<double>(n);
  double loss = -(total * inv_n);

  return make_op(
      "weighted_ce", {1}, {loss}, {probs},
      [labels, weights, n, num_classes, inv_n](
          const TensorImpl& self, const std::vector<double>& out_grad,
          const std::vector<std::vector<double>*>& parent_grads) {
        if (!parent_grads[0]) return;
        const std::vector<double>& pv = self.node->parents[0]->data;
        double g = out_grad[0];
        for (std::size_t j = 0; j < n; ++j) {
          double w = weights[static_cast<std::size_t>(labels[j])];
          if (w == 0.0) continue;  // exactly-zero gradient
          std::size_t at = j * num_classes + static_cast<std::size_t>(labels[j]);
          double x = pv[at];
          if (x < kProbFloor) continue;  // inside the floor: flat region
          (*parent_grads[0])[at] += g * (-inv_n * w / (x * std::numbers::ln2));
        }
      });
}

double clip_gradients(const std::vector<Tensor>& params, double max_norm) {
  if (!(max_norm > 0.0)) {
    throw ContractError("clip_gradients: max_norm must be positive");
  }
  std::vector<std::vector<double>*> grads;
  double total_sq = 0.0;
  for (const Tensor& t : params) {
    if (!t.defined() || !t.requires_grad() || !t.has_grad()) continue;
    std::vector<double>& g = t.impl()->grad;
    for (double v : g) total_sq += v * v;
    grads.push_back(&g);
  }
  if (!std::isfinite(total_sq)) {
    throw TrainError("non-finite gradient norm; aborting the step");
  }
  double norm = std::sqrt(total_sq);
  if (norm <= max_norm) return 1.0;
  double factor = max_norm / norm;
  for (std::vector<double>* g : grads) {
    for (double& v : *g) v *= factor;
  }
  return factor;
}

void adam_step(AdamState& state, const std::vector<Tensor>& params, double lr) {
  if (params.size() != state.m.size()) {
    throw ContractError("adam_step: state tracks " +
                        std::to_string(state.m.size()) + " parameters, got " +
                        std::to_string(params.size()));
  }
  state.t += 1;
  double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& p = params[i];
    if (!p.requires_grad() || !p.has_grad()) continue;
    if (p.numel() != state.m[i].size()) {
      throw ContractError("adam_step: parameter " + std::to_string(i) +
                          " changed size");
    }
    const std::vector<double>& g = p.impl()->grad;
    std::vector<double>& m = state.m[i];
    std::vector<double>& v = state.v[i];
    std::vector<double>& x = p.impl()->data;
    for (std::size_t k = 0; k < g.size(); ++k) {
      m[k] = kBeta1 * m[k] + (1.0 - kBeta1) * g[k];
      v[k] = kBeta2 * v[k] + (1.0 - kBeta2) * g[k] * g[k];
      double m_hat = m[k] / bc1;
      double v_hat = v[k] / bc2;
      x[k] -= lr * m_hat / (std::sqrt(v_hat) + kAdamEps);
    }
  }
}

double lr_at_epoch(double initial, std::size_t epoch, std::size_t anneal_every,
                   double factor) {
  if (anneal_every == 0) {
    throw ContractError("lr_at_epoch: anneal interval must be positive");
  }
  std::size_t halvings = epoch / anneal_every;
  double lr = initial;
  for (std::size_t i = 0; i < halvings; ++i) lr *= factor;
  return lr;
}

namespace {

std::size_t resolve_threads(std::size_t requested, std::size_t jobs) {
  std::size_t n = requested;
  if (n == 0) {
    unsigned hw = std::thread::hardware_concurrency();
    n = hw == 0 ? 1 : hw;
  }
  if (const char* env = std::getenv("HIGRU_THREADS")) {
    char* end = nullptr;
    unsigned long cap = std::strtoul(env, &end, 10);
    if (end == env || *end != '\0' || cap == 0) {
      throw ConfigError("HIGRU_THREADS must be a positive integer, got '" +
                        std::string(env) + "'");
    }
    n = std::min<std::size_t>(n, cap);
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

}  // namespace

EvalResult evaluate_corpus(const ModelParams& params, const ModelConfig& config,
                           const Corpus& corpus, const LabelScheme& scheme,
                           std::size_t threads) {
  if (scheme.classes.size() != config.num_classes) {
    throw ContractError("evaluate_corpus: scheme has " +
                        std::to_string(scheme.classes.size()) +
                        " classes, model expects " +
                        std::to_string(config.num_classes));
  }
  std::size_t jobs = corpus.dialogues.size();
  if (jobs == 0) throw ContractError("evaluate_corpus: empty corpus");
  std::size_t n_threads = resolve_threads(threads, jobs);

  auto run_shard = [&](std::size_t shard, std::size_t stride,
                       ConfusionMatrix& cm) {
    for (std::size_t i = shard; i < jobs; i += stride) {
      const Dialogue& d = corpus.dialogues[i];
      std::vector<int> preds = predict(params, config, d, scheme.evaluated);
      for (std::size_t j = 0; j < d.utterances.size(); ++j) {
        if (d.utterances[j].label.has_value()) {
          cm.update(*d.utterances[j].label, preds[j]);
        }
      }
    }
  };

  ConfusionMatrix cm(scheme);
  if (n_threads == 1) {
    run_shard(0, 1, cm);
  } else {
    std::vector<ConfusionMatrix> shards(n_threads, ConfusionMatrix(scheme));
    std::vector<std::exception_ptr> errors(n_threads);
    std::vector<std::thread> pool;
    pool.reserve(n_threads);
    for (std::size_t s = 0; s < n_threads; ++s) {
      pool.emplace_back([&, s] {
        try {
          run_shard(s, n_threads, shards[s]);
        } catch (...) {
          errors[s] = std::current_exception();
        }
      });
    }
    for (std::thread& t : pool) t.join();
    for (const std::exception_ptr& e : errors) {
      if (e) std::rethrow_exception(e);
    }
    for (const ConfusionMatrix& shard : shards) cm.merge(shard);
  }
  return EvalResult{cm, wa(cm), uwa(cm)};
}

TrainResult train_loop(ModelParams& params, const ModelConfig& config,
                       const Corpus& train, const Corpus& val,
                       const LabelScheme& scheme, const TrainConfig& tc,
                       const TrainCallbacks& callbacks) {
  validate_train_config(tc);
  validate_model(params, config);
  if (train.dialogues.empty()) {
    throw ContractError("train_loop: empty training corpus");
  }
  if (val.dialogues.empty()) {
    throw ContractError("train_loop: empty validation corpus");
  }
  if (scheme.classes.size() != config.num_classes) {
    throw ContractError("train_loop: scheme has " +
                        std::to_string(scheme.classes.size()) +
                        " classes, model expects " +
                        std::to_string(config.num_classes));
  }
  if (scheme.weights.size() != scheme.classes.size()) {
    throw ContractError(
        "train_loop: label scheme is missing computed class weights");
  }
  // An evaluated class absent from validation would make every epoch's
  // score undefined; fail before spending an epoch on it.
  std::vector<long long> val_counts =
      count_labels(val, scheme.classes.size());
  for (std::size_t c = 0; c < scheme.classes.size(); ++c) {
    if (scheme.evaluated[c] && val_counts[c] == 0) {
      throw TrainError("validation corpus has no utterance of evaluated "
                       "class '" +
                       scheme.classes[c] + "'");
    }
  }

  std::vector<Tensor> param_list = params.tensors();
  AdamState state(param_list);
  RngStream shuffle_rng(tc.seed, RngUse::kShuffle);
  RngStream dropout_rng(tc.seed, RngUse::kDropout);

  std::vector<std::size_t> order(train.dialogues.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result;
  double best = -1.0;  // any real metric (>= 0) beats this
  std::size_t since_improvement = 0;

  for (std::size_t epoch = 0; epoch < tc.max_epochs; ++epoch) {
    double lr = lr_at_epoch(tc.lr, epoch, tc.anneal_every, tc.anneal_factor);
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t steps = 0;
    std::size_t clipped = 0;
    for (std::size_t idx : order) {
      const Dialogue& d = train.dialogues[idx];
      std::vector<int> rows;
      std::vector<int> labels;
      for (std::size_t j = 0; j < d.utterances.size(); ++j) {
        if (d.utterances[j].label.has_value()) {
          rows.push_back(static_cast<int>(j));
          labels.push_back(*d.utterances[j].label);
        }
      }
      if (labels.empty()) continue;  // nothing to learn from

      zero_grads(param_list);
      ForwardResult fr = forward(params, config, d, Mode::kTrain, &dropout_rng);
      Tensor picked = rows.size() == d.utterances.size()
                          ? fr.probs
                          : gather_rows(fr.probs, rows);
      Tensor loss = weighted_ce(picked, labels, scheme.weights);
      double loss_value = loss.value();
      if (!std::isfinite(loss_value)) {
        throw TrainError("epoch " + std::to_string(epoch) + ", dialogue '" +
                         d.id + "': non-finite loss");
      }
      backward(loss);
      double factor = clip_gradients(param_list, tc.clip_norm);
      if (factor < 1.0) clipped += 1;
      adam_step(state, param_list, lr);
      loss_sum += loss_value;
      steps += 1;
    }

    EvalResult ev = evaluate_corpus(params, config, val, scheme);
    double metric = tc.select == SelectMetric::kWa ? ev.wa : ev.uwa;

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = steps > 0 ? loss_sum / static_cast<double>(steps) : 0.0;
    rec.val_wa = ev.wa;
    rec.val_uwa = ev.uwa;
    rec.lr = lr;
    rec.clipped_fraction =
        steps > 0 ? static_cast<double>(clipped) / static_cast<double>(steps)
                  : 0.0;
    result.history.push_back(rec);
    if (callbacks.on_epoch) callbacks.on_epoch(rec);

    if (metric > best) {  // strict: ties do not reset patience
      best = metric;
      result.best_epoch = epoch;
      result.best_metric = metric;
      result.best_params = params.clone();
      since_improvement = 0;
    } else {
      since_improvement += 1;
      if (since_improvement >= tc.patience) break;
    }
  }
  return result;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream out;
  out << "epoch,train_loss,val_WA,val_UWA,lr,clipped_fraction\n";
  for (const EpochRecord& r : history) {
    out << r.epoch << ',' << format_double(r.train_loss) << ','
        << format_double(r.val_wa) << ',' << format_double(r.val_uwa) << ','
        << format_double(r.lr) << ',' << format_double(r.clipped_fraction)
        << '\n';
  }
  return out.str();
}

}  // namespace higru
