#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "higru/tensor.hpp"

namespace higru {

class RngStream;

// Fusion scheme for both encoder levels: plain keeps only the two GRU
// directions, "f" adds the individual (input) embedding, "sf" additionally
// adds the self-attended left/right context states.
enum class Variant { kPlain, kF, kSf };

const char* variant_name(Variant v);                 // higru / higru-f / higru-sf
Variant parse_variant(const std::string& name);      // ConfigError on unknown

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// One GRU direction. Weights are stored input-major ([d_in x d_hid] /
// [d_hid x d_hid]) so a state row multiplies them without transposition.
struct GruCellParams {
  Tensor w_z, w_r, w_h;  // [d_in x d_hid]
  Tensor u_z, u_r, u_h;  // [d_hid x d_hid]
  Tensor b_z, b_r, b_h;  // [d_hid]

  std::size_t d_in() const { return w_z.rows(); }
  std::size_t d_hid() const { return w_z.cols(); }
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct BiGruParams {
  GruCellParams fwd;
  GruCellParams bwd;

  std::size_t d_in() const { return fwd.d_in(); }
  std::size_t d_hid() const { return fwd.d_hid(); }
  void collect(const std::string& prefix, NamedTensors& out) const;
};

// Affine + tanh over the variant's concatenation.
struct FusionParams {
  Tensor w;  // [d_out x d_cat]
  Tensor b;  // [d_out]

  std::size_t d_out() const { return w.rows(); }
  std::size_t d_cat() const { return w.cols(); }
  void collect(const std::string& prefix, NamedTensors& out) const;
};

// Everything one encoder level owns: the bidirectional GRU plus the fusion.
struct EncoderLevelParams {
  BiGruParams gru;
  FusionParams fusion;

  void collect(const std::string& prefix, NamedTensors& out) const;
};

// Concatenation width consumed by the fusion at one level, where d_ind is
// the width of the individual embeddings fed to that level and d_hid the
// level's GRU hidden width: 2*d_hid (plain), d_ind + 2*d_hid (f),
// d_ind + 4*d_hid (sf).
std::size_t fusion_cat_width(Variant v, std::size_t d_ind, std::size_t d_hid);

// Weights uniform in [-1/sqrt(d_hid), +1/sqrt(d_hid)] of the receiving
// width, biases zero. Draw order is fixed so seeded runs reproduce.
GruCellParams make_gru_cell(std::size_t d_in, std::size_t d_hid,
                            RngStream& rng);
BiGruParams make_bigru(std::size_t d_in, std::size_t d_hid, RngStream& rng);
FusionParams make_fusion(Variant v, std::size_t d_ind, std::size_t d_hid,
                         std::size_t d_out, RngStream& rng);
EncoderLevelParams make_encoder_level(Variant v, std::size_t d_in,
                                      std::size_t d_hid, RngStream& rng);

// Throws DimensionError naming `level` unless the fusion shapes match the
// variant's width table. Run at construction and after checkpoint load.
void validate_fusion(const FusionParams& params, Variant v, std::size_t d_ind,
                     std::size_t d_hid, const std::string& level);

// z = sigmoid(x Wz + h Uz + bz); r likewise; cand = tanh(x Wh + (r*h) Uh + bh);
// h' = (1 - z)*h + z*cand. x is [1 x d_in], h_prev [1 x d_hid].
Tensor gru_cell_step(const GruCellParams& params, const Tensor& x,
                     const Tensor& h_prev);

// Runs both directions over [M x d_in] from zero initial states. Row k of
// each output is the state after consuming position k in that direction.
std::pair<Tensor, Tensor> bigru_run(const BiGruParams& params,
                                    const Tensor& inputs);

// Dot-product self-attention over one direction's states [M x d]: row k of
// the result is sum_p softmax_p(h_k . h_p) * states[p], where positions
// >= valid are masked to exactly zero weight.
Tensor directional_self_attention(const Tensor& states, std::size_t valid);

// tanh(W [cat] + b) row-wise, with the variant's concatenation order:
// plain [fwd; bwd], f [fwd; individual; bwd],
// sf [attn_left; fwd; individual; bwd; attn_right].
// Unused inputs may be undefined tensors. `level` names the call site in
// errors.
Tensor fuse(Variant v, const Tensor& fwd, const Tensor& bwd,
            const Tensor& individual, const Tensor& attn_left,
            const Tensor& attn_right, const FusionParams& params,
            const std::string& level);

// Word embeddings [Mp x d0] -> utterance embedding [d1]. Rows at index
// >= valid (padding) are excluded from the recurrence and attention
// entirely, so the result is identical to encoding the unpadded prefix.
// valid == 0 means "all rows". Dropout applies to the fused rows before
// max pooling, in train mode only.
Tensor encode_utterance(const Tensor& word_embs,
                        const EncoderLevelParams& params, Variant v,
                        double dropout_rate, Mode mode, RngStream* rng,
                        std::size_t valid = 0);

// Utterance embeddings [N x d1] -> contextual embeddings [N x d2]; same
// pipeline without pooling. Rows at index >= valid (padding utterances)
// are excluded entirely; valid == 0 means "all rows".
Tensor encode_dialogue(const Tensor& utt_embs,
                       const EncoderLevelParams& params, Variant v,
                       double dropout_rate, Mode mode, RngStream* rng,
                       std::size_t valid = 0);

}  // namespace higru
