#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "higru/data.hpp"
#include "higru/errors.hpp"
#include "higru/metrics.hpp"
#include "higru/model.hpp"
#include "higru/tensor.hpp"

namespace higru {

enum class SelectMetric { kWa, kUwa };

std::string select_metric_name(SelectMetric m);
SelectMetric parse_select_metric(const std::string& name);  // "wa" | "uwa"

struct TrainConfig {
  double lr = 2.5e-4;
  std::size_t anneal_every = 20;   // epochs between learning-rate halvings
  double anneal_factor = 0.5;
  std::size_t patience = 10;       // epochs without improvement before stop
  double clip_norm = 5.0;
  double alpha = 1.0;              // class-weight exponent (used upstream)
  std::size_t max_epochs = 200;
  std::uint64_t seed = 1;
  SelectMetric select = SelectMetric::kUwa;
};

void validate_train_config(const TrainConfig& c);

// Adam first/second moments mirroring a fixed parameter list. The list
// order must stay identical across steps.
struct AdamState {
  explicit AdamState(const std::vector<Tensor>& params);

  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t t = 0;
};

// Mean weighted cross-entropy in bits over a batch of N labeled utterances:
//   loss = -(1/N) * sum_j weights[labels[j]] * log2(max(probs[j][labels[j]], 1e-12))
// Rows whose class weight is zero contribute an exactly-zero term and an
// exactly-zero gradient but still count toward N. The epsilon floor keeps
// collapsed distributions finite; inside the floor the gradient is zero.
Tensor weighted_ce(const Tensor& probs, const std::vector<int>& labels,
                   const std::vector<double>& weights);

// Scales every populated gradient by max_norm/norm when the global L2 norm
// exceeds max_norm; returns the factor applied (1.0 when untouched).
// Non-finite gradients abort with a training error.
double clip_gradients(const std::vector<Tensor>& params, double max_norm);

// One Adam update (beta1 0.9, beta2 0.999, eps 1e-8, bias correction) over
// the tracked parameters; increments state.t once. Parameters without a
// populated gradient are left untouched.
void adam_step(AdamState& state, const std::vector<Tensor>& params, double lr);

// Step-decay schedule: initial * factor^floor(epoch / anneal_every).
double lr_at_epoch(double initial, std::size_t epoch,
                   std::size_t anneal_every = 20, double factor = 0.5);

struct EpochRecord {
  std::size_t epoch = 0;  // 0-based
  double train_loss = 0.0;
  double val_wa = 0.0;
  double val_uwa = 0.0;
  double lr = 0.0;
  double clipped_fraction = 0.0;
};

struct EvalResult {
  ConfusionMatrix cm;
  double wa = 0.0;
  double uwa = 0.0;
};

// Runs the model over every labeled utterance of the corpus and scores the
// confusion matrix. Dialogues are sharded across up to `threads` workers
// (0 = one per hardware core, capped by the HIGRU_THREADS environment
// variable); counts merge exactly, so the result is thread-count invariant.
EvalResult evaluate_corpus(const ModelParams& params, const ModelConfig& config,
                           const Corpus& corpus, const LabelScheme& scheme,
                           std::size_t threads = 0);

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_metric = 0.0;     // selected metric at best_epoch
  ModelParams best_params;      // deep copy taken when the best was seen
};

struct TrainCallbacks {
  std::function<void(const EpochRecord&)> on_epoch;  // after each epoch
};

// Epoch loop: shuffle dialogues (seeded), one optimizer step per dialogue
// (forward -> weighted CE -> backward -> clip -> Adam), then score the
// validation set; keeps the best parameters by the selected metric and
// stops after `patience` epochs without strict improvement.
TrainResult train_loop(ModelParams& params, const ModelConfig& config,
                       const Corpus& train, const Corpus& val,
                       const LabelScheme& scheme, const TrainConfig& tc,
                       const TrainCallbacks& callbacks = {});

// History serialization used by training artifacts:
// epoch,train_loss,val_WA,val_UWA,lr,clipped_fraction (one row per epoch).
std::string history_csv(const std::vector<EpochRecord>& history);

}  // namespace higru
