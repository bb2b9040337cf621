#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "higru/data.hpp"
#include "higru/encoder.hpp"
#include "higru/tensor.hpp"

namespace higru {

class RngStream;

struct ModelConfig {
  Variant variant = Variant::kPlain;
  std::size_t d0 = 300;               // word embedding width
  std::size_t d1 = 300;               // word-level hidden width
  std::size_t d2 = 300;               // utterance-level hidden width
  std::vector<std::size_t> fc = {100, 100};  // classifier hidden widths
  double dropout = 0.5;
  std::size_t num_classes = 0;
  bool train_embeddings = true;
};

void validate_config(const ModelConfig& config);  // ConfigError on violation

struct AffineParams {
  Tensor w;  // [out x in]
  Tensor b;  // [out]
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct ModelParams {
  Tensor embedding;        // [|V| x d0]
  EncoderLevelParams word;  // lower level: d0 -> d1
  EncoderLevelParams utt;   // upper level: d1 -> d2
  std::vector<AffineParams> fc;
  AffineParams out;        // d_last -> |C|

  // Every parameter tensor with a stable name and order (the checkpoint
  // manifest and the optimizer state both follow it).
  NamedTensors named() const;
  std::vector<Tensor> tensors() const;

  // Deep copy: fresh leaf tensors with the same values and trainability.
  ModelParams clone() const;
};

// Draws all parameters except the embedding matrix, which is taken as-is
// (see load_embeddings) and marked trainable per the config flag.
ModelParams init_model(const ModelConfig& config, Tensor embedding,
                       RngStream& rng);

// Shape-checks params against the config (fusion widths per variant,
// classifier chain, embedding width). DimensionError on mismatch.
void validate_model(const ModelParams& params, const ModelConfig& config);

struct ForwardResult {
  Tensor logits;  // [N x |C|]
  Tensor probs;   // [N x |C|], softmax rows
};

// Tokens -> embedding rows -> utterance encoder -> dialogue encoder ->
// classifier -> softmax. Train mode applies dropout at the word level, the
// utterance level, and after the first classifier tanh.
ForwardResult forward(const ModelParams& params, const ModelConfig& config,
                      const Dialogue& dialogue, Mode mode, RngStream* rng);

// Row-wise argmax over evaluated classes only; ties resolve to the lowest
// class id. `probs` is [N x |C|] with the mask covering every class.
std::vector<int> argmax_evaluated(const Tensor& probs,
                                  const std::vector<bool>& evaluated);

// Per-utterance argmax over evaluated classes only; ties resolve to the
// lowest class id. Runs in eval mode without recording gradients.
std::vector<int> predict(const ModelParams& params, const ModelConfig& config,
                         const Dialogue& dialogue,
                         const std::vector<bool>& evaluated);

// Everything needed to run eval/predict from a file: parameters plus the
// vocabulary and label scheme they were trained with.
struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  Vocabulary vocab;
  LabelScheme scheme;
};

// Single-line JSON header (format tag, version, config, vocab, scheme,
// array manifest with byte offsets) + '\n' + raw little-endian float64
// blocks. Writes to a temp file and renames, so a crash never leaves a
// half-written checkpoint. Round-trips bit-exactly.
void save_checkpoint(const ModelParams& params, const ModelConfig& config,
                     const Vocabulary& vocab, const LabelScheme& scheme,
                     const std::string& path);

Checkpoint load_checkpoint(const std::string& path);

}  // namespace higru
