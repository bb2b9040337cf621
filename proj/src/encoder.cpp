#include "higru/encoder.hpp"

#include <cmath>

#include "higru/errors.hpp"
#include "higru/rng.hpp"

namespace higru {

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kPlain:
      return "higru";
    case Variant::kF:
      return "higru-f";
    case Variant::kSf:
      return "higru-sf";
  }
  throw ContractError("variant_name: unknown variant");
}

Variant parse_variant(const std::string& name) {
  if (name == "higru") return Variant::kPlain;
  if (name == "higru-f") return Variant::kF;
  if (name == "higru-sf") return Variant::kSf;
  throw ConfigError("unknown variant '" + name +
                    "' (expected higru, higru-f, or higru-sf)");
}

// ---- parameter containers ----------------------------------------------------

void GruCellParams::collect(const std::string& prefix,
                            NamedTensors& out) const {
  out.emplace_back(prefix + ".w_z", w_z);
  out.emplace_back(prefix + ".w_r", w_r);
  out.emplace_back(prefix + ".w_h", w_h);
  out.emplace_back(prefix + ".u_z", u_z);
  out.emplace_back(prefix + ".u_r", u_r);
  out.emplace_back(prefix + ".u_h", u_h);
  out.emplace_back(prefix + ".b_z", b_z);
  out.emplace_back(prefix + ".b_r", b_r);
  out.emplace_back(prefix + ".b_h", b_h);
}

void BiGruParams::collect(const std::string& prefix, NamedTensors& out) const {
  fwd.collect(prefix + ".fwd", out);
  bwd.collect(prefix + ".bwd", out);
}

void FusionParams::collect(const std::string& prefix,
                           NamedTensors& out) const {
  out.emplace_back(prefix + ".w", w);
  out.emplace_back(prefix + ".b", b);
}

void EncoderLevelParams::collect(const std::string& prefix,
                                 NamedTensors& out) const {
  gru.collect(prefix + ".gru", out);
  fusion.collect(prefix + ".fusion", out);
}

std::size_t fusion_cat_width(Variant v, std::size_t d_ind,
                             std::size_t d_hid) {
  switch (v) {
    case Variant::kPlain:
      return 2 * d_hid;
    case Variant::kF:
      return d_ind + 2 * d_hid;
    case Variant::kSf:
      return d_ind + 4 * d_hid;
  }
  throw ContractError("fusion_cat_width: unknown variant");
}

GruCellParams make_gru_cell(std::size_t d_in, std::size_t d_hid,
                            RngStream& rng) {
  if (d_in == 0 || d_hid == 0) {
    throw ConfigError("gru cell dimensions must be positive");
  }
  double bound = 1.0 / std::sqrt(static_cast<double>(d_hid));
  GruCellParams p;
  p.w_z = Tensor::uniform({d_in, d_hid}, -bound, bound, rng, true);
  p.w_r = Tensor::uniform({d_in, d_hid}, -bound, bound, rng, true);
  p.w_h = Tensor::uniform({d_in, d_hid}, -bound, bound, rng, true);
  p.u_z = Tensor::uniform({d_hid, d_hid}, -bound, bound, rng, true);
  p.u_r = Tensor::uniform({d_hid, d_hid}, -bound, bound, rng, true);
  p.u_h = Tensor::uniform({d_hid, d_hid}, -bound, bound, rng, true);
  p.b_z = Tensor::zeros({d_hid}, true);
  p.b_r = Tensor::zeros({d_hid}, true);
  p.b_h = Tensor::zeros({d_hid}, true);
  return p;
}

BiGruParams make_bigru(std::size_t d_in, std::size_t d_hid, RngStream& rng) {
  BiGruParams p;
  p.fwd = make_gru_cell(d_in, d_hid, rng);
  p.bwd = make_gru_cell(d_in, d_hid, rng);
  return p;
}

FusionParams make_fusion(Variant v, std::size_t d_ind, std::size_t d_hid,
                         std::size_t d_out, RngStream& rng) {
  if (d_out == 0) throw ConfigError("fusion output width must be positive");
  std::size_t d_cat = fusion_cat_width(v, d_ind, d_hid);
  double bound = 1.0 / std::sqrt(static_cast<double>(d_out));
  FusionParams p;
  p.w = Tensor::uniform({d_out, d_cat}, -bound, bound, rng, true);
  p.b = Tensor::zeros({d_out}, true);
  validate_fusion(p, v, d_ind, d_hid, "fusion");
  return p;
}

EncoderLevelParams make_encoder_level(Variant v, std::size_t d_in,
                                      std::size_t d_hid, RngStream& rng) {
  EncoderLevelParams p;
  p.gru = make_bigru(d_in, d_hid, rng);
  p.fusion = make_fusion(v, d_in, d_hid, d_hid, rng);
  return p;
}

void validate_fusion(const FusionParams& params, Variant v, std::size_t d_ind,
                     std::size_t d_hid, const std::string& level) {
  if (!params.w.defined() || !params.b.defined()) {
    throw ContractError(level + ": fusion parameters undefined");
  }
  std::size_t expected = fusion_cat_width(v, d_ind, d_hid);
  if (params.w.rank() != 2 || params.d_cat() != expected) {
    throw DimensionError(
        level + ": " + variant_name(v) + " fusion expects width " +
        std::to_string(expected) + " (got " + shape_string(params.w.shape()) +
        ")");
  }
  if (params.b.rank() != 1 || params.b.shape()[0] != params.d_out()) {
    throw DimensionError(level + ": fusion bias " +
                         shape_string(params.b.shape()) +
                         " does not match " + std::to_string(params.d_out()) +
                         " outputs");
  }
}

// ---- recurrent core ------------------------------------------------------------

Tensor gru_cell_step(const GruCellParams& params, const Tensor& x,
                     const Tensor& h_prev) {
  if (x.rank() != 2 || x.rows() != 1 || x.cols() != params.d_in()) {
    throw DimensionError("gru_cell_step: input " + shape_string(x.shape()) +
                         " does not match cell input width " +
                         std::to_string(params.d_in()));
  }
  if (h_prev.rank() != 2 || h_prev.rows() != 1 ||
      h_prev.cols() != params.d_hid()) {
    throw DimensionError("gru_cell_step: state " +
                         shape_string(h_prev.shape()) +
                         " does not match hidden width " +
                         std::to_string(params.d_hid()));
  }
  Tensor z = sigmoid(
      add(add(matmul(x, params.w_z), matmul(h_prev, params.u_z)), params.b_z));
  Tensor r = sigmoid(
      add(add(matmul(x, params.w_r), matmul(h_prev, params.u_r)), params.b_r));
  Tensor cand = tanh(add(
      add(matmul(x, params.w_h), matmul(mul(r, h_prev), params.u_h)),
      params.b_h));
  // (1 - z)*h_prev + z*cand, written without materializing the ones vector
  return add(sub(h_prev, mul(z, h_prev)), mul(z, cand));
}

std::pair<Tensor, Tensor> bigru_run(const BiGruParams& params,
                                    const Tensor& inputs) {
  if (!inputs.defined() || inputs.rank() != 2) {
    throw DimensionError("bigru_run: inputs must be [steps x width]");
  }
  if (inputs.cols() != params.d_in()) {
    throw DimensionError("bigru_run: input width " +
                         std::to_string(inputs.cols()) +
                         " does not match cells expecting " +
                         std::to_string(params.d_in()));
  }
  if (params.bwd.d_in() != params.fwd.d_in() ||
      params.bwd.d_hid() != params.fwd.d_hid()) {
    throw DimensionError("bigru_run: direction cells disagree on widths");
  }
  std::size_t m = inputs.rows();
  std::size_t d_hid = params.d_hid();

  std::vector<Tensor> fwd_rows(m), bwd_rows(m);
  Tensor h = Tensor::zeros({1, d_hid});
  for (std::size_t k = 0; k < m; ++k) {
    h = gru_cell_step(params.fwd, slice_rows(inputs, k, k + 1), h);
    fwd_rows[k] = h;
  }
  h = Tensor::zeros({1, d_hid});
  for (std::size_t k = m; k-- > 0;) {
    h = gru_cell_step(params.bwd, slice_rows(inputs, k, k + 1), h);
    bwd_rows[k] = h;
  }
  return {concat(fwd_rows, 0), concat(bwd_rows, 0)};
}

Tensor directional_self_attention(const Tensor& states, std::size_t valid) {
  if (!states.defined() || states.rank() != 2) {
    throw DimensionError(
        "directional_self_attention: states must be [steps x width]");
  }
  if (valid == 0 || valid > states.rows()) {
    throw MaskError("directional_self_attention: valid count " +
                    std::to_string(valid) + " outside [1, " +
                    std::to_string(states.rows()) + "]");
  }
  Tensor scores = matmul(states, transpose(states));
  Tensor weights = masked_softmax(scores, valid);
  return matmul(weights, states);
}

Tensor fuse(Variant v, const Tensor& fwd, const Tensor& bwd,
            const Tensor& individual, const Tensor& attn_left,
            const Tensor& attn_right, const FusionParams& params,
            const std::string& level) {
  if (!fwd.defined() || !bwd.defined()) {
    throw ContractError(level + ": fuse needs both direction states");
  }
  std::vector<Tensor> parts;
  switch (v) {
    case Variant::kPlain:
      parts = {fwd, bwd};
      break;
    case Variant::kF:
      if (!individual.defined()) {
        throw ContractError(level +
                            ": higru-f fuse needs the individual embeddings");
      }
      parts = {fwd, individual, bwd};
      break;
    case Variant::kSf:
      if (!individual.defined() || !attn_left.defined() ||
          !attn_right.defined()) {
        throw ContractError(
            level + ": higru-sf fuse needs individual embeddings and both "
                    "attention contexts");
      }
      parts = {attn_left, fwd, individual, bwd, attn_right};
      break;
  }
  Tensor cat = concat(parts, 1);
  if (cat.cols() != params.d_cat()) {
    throw DimensionError(
        level + ": " + variant_name(v) + " fusion expects width " +
        std::to_string(params.d_cat()) + ", concatenation produced " +
        std::to_string(cat.cols()));
  }
  return tanh(linear(cat, params.w, params.b));
}

// ---- level pipelines -------------------------------------------------------------

namespace {

// Shared by both levels: recurrence, optional attention, fusion, dropout.
Tensor encode_rows(const Tensor& inputs, const EncoderLevelParams& params,
                   Variant v, double dropout_rate, Mode mode, RngStream* rng,
                   const std::string& level) {
  auto [fwd, bwd] = bigru_run(params.gru, inputs);
  Tensor attn_left, attn_right;
  if (v == Variant::kSf) {
    std::size_t m = inputs.rows();
    attn_left = directional_self_attention(fwd, m);
    attn_right = directional_self_attention(bwd, m);
  }
  Tensor fused =
      fuse(v, fwd, bwd, inputs, attn_left, attn_right, params.fusion, level);
  return dropout(fused, dropout_rate, mode, rng);
}

}  // namespace

Tensor encode_utterance(const Tensor& word_embs,
                        const EncoderLevelParams& params, Variant v,
                        double dropout_rate, Mode mode, RngStream* rng,
                        std::size_t valid) {
  if (!word_embs.defined() || word_embs.rank() != 2) {
    throw DimensionError("encode_utterance: embeddings must be [words x d0]");
  }
  std::size_t rows = word_embs.rows();
  if (valid == 0) valid = rows;
  if (valid > rows) {
    throw MaskError("encode_utterance: valid count " + std::to_string(valid) +
                    " exceeds " + std::to_string(rows) + " rows");
  }
  // Padding rows are dropped up front: the recurrence, attention, fusion,
  // and pooling all see exactly the valid prefix, which makes padded and
  // unpadded encodings identical by construction.
  Tensor inputs =
      (valid == rows) ? word_embs : slice_rows(word_embs, 0, valid);
  Tensor fused = encode_rows(inputs, params, v, dropout_rate, mode, rng,
                             "encode_utterance");
  return max_over_time(fused);
}

Tensor encode_dialogue(const Tensor& utt_embs,
                       const EncoderLevelParams& params, Variant v,
                       double dropout_rate, Mode mode, RngStream* rng,
                       std::size_t valid) {
  if (!utt_embs.defined() || utt_embs.rank() != 2) {
    throw DimensionError(
        "encode_dialogue: utterance embeddings must be [utterances x d1]");
  }
  std::size_t rows = utt_embs.rows();
  if (valid == 0) valid = rows;
  if (valid > rows) {
    throw MaskError("encode_dialogue: valid count " + std::to_string(valid) +
                    " exceeds " + std::to_string(rows) + " rows");
  }
  // Same prefix-slice treatment as encode_utterance: padding utterances
  // never reach the recurrence, so padded and unpadded dialogues encode
  // identically.
  Tensor inputs = (valid == rows) ? utt_embs : slice_rows(utt_embs, 0, valid);
  return encode_rows(inputs, params, v, dropout_rate, mode, rng,
                     "encode_dialogue");
}

}  // namespace higru
