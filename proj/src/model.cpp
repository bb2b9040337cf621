#include "higru/model.hpp"

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <unordered_map>
#include <utility>

#include "higru/rng.hpp"
#include "json.hpp"

namespace higru {

namespace {

constexpr const char* kFormatTag = "higru-checkpoint";
constexpr int kFormatVersion = 1;

GruCellParams zero_gru_cell(std::size_t d_in, std::size_t d_hid) {
  GruCellParams p;
  p.w_z = Tensor::zeros({d_in, d_hid}, true);
  p.w_r = Tensor::zeros({d_in, d_hid}, true);
  p.w_h = Tensor::zeros({d_in, d_hid}, true);
  p.u_z = Tensor::zeros({d_hid, d_hid}, true);
  p.u_r = Tensor::zeros({d_hid, d_hid}, true);
  p.u_h = Tensor::zeros({d_hid, d_hid}, true);
  p.b_z = Tensor::zeros({d_hid}, true);
  p.b_r = Tensor::zeros({d_hid}, true);
  p.b_h = Tensor::zeros({d_hid}, true);
  return p;
}

AffineParams make_affine(std::size_t in, std::size_t out, RngStream& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(out));
  AffineParams p;
  p.w = Tensor::uniform({out, in}, -bound, bound, rng, true);
  p.b = Tensor::zeros({out}, true);
  return p;
}

// Zero-valued parameters with the exact shapes the config dictates; the
// checkpoint loader fills them in place.
ModelParams shape_skeleton(const ModelConfig& c, std::size_t vocab_size) {
  ModelParams p;
  p.embedding = Tensor::zeros({vocab_size, c.d0}, c.train_embeddings);
  p.word.gru.fwd = zero_gru_cell(c.d0, c.d1);
  p.word.gru.bwd = zero_gru_cell(c.d0, c.d1);
  p.word.fusion.w =
      Tensor::zeros({c.d1, fusion_cat_width(c.variant, c.d0, c.d1)}, true);
  p.word.fusion.b = Tensor::zeros({c.d1}, true);
  p.utt.gru.fwd = zero_gru_cell(c.d1, c.d2);
  p.utt.gru.bwd = zero_gru_cell(c.d1, c.d2);
  p.utt.fusion.w =
      Tensor::zeros({c.d2, fusion_cat_width(c.variant, c.d1, c.d2)}, true);
  p.utt.fusion.b = Tensor::zeros({c.d2}, true);
  std::size_t in = c.d2;
  for (std::size_t width : c.fc) {
    AffineParams layer;
    layer.w = Tensor::zeros({width, in}, true);
    layer.b = Tensor::zeros({width}, true);
    p.fc.push_back(layer);
    in = width;
  }
  p.out.w = Tensor::zeros({c.num_classes, in}, true);
  p.out.b = Tensor::zeros({c.num_classes}, true);
  return p;
}

void append_f64_le(std::string& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int k = 0; k < 8; ++k) {
    out += static_cast<char>((bits >> (8 * k)) & 0xFF);
  }
}

double decode_f64_le(const char* p) {
  std::uint64_t bits = 0;
  for (int k = 0; k < 8; ++k) {
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[k]))
            << (8 * k);
  }
  return std::bit_cast<double>(bits);
}

nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"variant", variant_name(c.variant)},
                        {"d0", c.d0},
                        {"d1", c.d1},
                        {"d2", c.d2},
                        {"fc", c.fc},
                        {"dropout", c.dropout},
                        {"num_classes", c.num_classes},
                        {"train_embeddings", c.train_embeddings}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.d0 = j.at("d0").get<std::size_t>();
  c.d1 = j.at("d1").get<std::size_t>();
  c.d2 = j.at("d2").get<std::size_t>();
  c.fc = j.at("fc").get<std::vector<std::size_t>>();
  c.dropout = j.at("dropout").get<double>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.train_embeddings = j.at("train_embeddings").get<bool>();
  return c;
}

}  // namespace

void validate_config(const ModelConfig& config) {
  if (config.d0 == 0 || config.d1 == 0 || config.d2 == 0) {
    throw ConfigError("model dimensions d0/d1/d2 must be positive");
  }
  for (std::size_t w : config.fc) {
    if (w == 0) throw ConfigError("classifier hidden widths must be positive");
  }
  if (config.num_classes == 0) {
    throw ConfigError("number of classes must be positive");
  }
  if (config.dropout < 0.0 || config.dropout >= 1.0) {
    throw ConfigError("dropout rate must lie in [0, 1)");
  }
}

void AffineParams::collect(const std::string& prefix,
                           NamedTensors& out) const {
  out.emplace_back(prefix + ".w", w);
  out.emplace_back(prefix + ".b", b);
}

NamedTensors ModelParams::named() const {
  NamedTensors out;
  out.emplace_back("embedding", embedding);
  word.collect("word", out);
  utt.collect("utt", out);
  for (std::size_t i = 0; i < fc.size(); ++i) {
    fc[i].collect("fc." + std::to_string(i), out);
  }
  this->out.collect("out", out);
  return out;
}

std::vector<Tensor> ModelParams::tensors() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named()) out.push_back(t);
  return out;
}

namespace {

Tensor clone_param(const Tensor& t) {
  Tensor c = t.clone();
  c.set_requires_grad(t.requires_grad());
  return c;
}

GruCellParams clone_cell(const GruCellParams& c) {
  GruCellParams out;
  out.w_z = clone_param(c.w_z);
  out.w_r = clone_param(c.w_r);
  out.w_h = clone_param(c.w_h);
  out.u_z = clone_param(c.u_z);
  out.u_r = clone_param(c.u_r);
  out.u_h = clone_param(c.u_h);
  out.b_z = clone_param(c.b_z);
  out.b_r = clone_param(c.b_r);
  out.b_h = clone_param(c.b_h);
  return out;
}

EncoderLevelParams clone_level(const EncoderLevelParams& l) {
  EncoderLevelParams out;
  out.gru.fwd = clone_cell(l.gru.fwd);
  out.gru.bwd = clone_cell(l.gru.bwd);
  out.fusion.w = clone_param(l.fusion.w);
  out.fusion.b = clone_param(l.fusion.b);
  return out;
}

AffineParams clone_affine(const AffineParams& a) {
  return AffineParams{clone_param(a.w), clone_param(a.b)};
}

}  // namespace

ModelParams ModelParams::clone() const {
  ModelParams c;
  c.embedding = clone_param(embedding);
  c.word = clone_level(word);
  c.utt = clone_level(utt);
  c.fc.reserve(fc.size());
  for (const AffineParams& a : fc) c.fc.push_back(clone_affine(a));
  c.out = clone_affine(out);
  return c;
}

ModelParams init_model(const ModelConfig& config, Tensor embedding,
                       RngStream& rng) {
  validate_config(config);
  if (!embedding.defined() || embedding.rank() != 2 ||
      embedding.cols() != config.d0) {
    throw DimensionError("init_model: embedding matrix must be [|V| x " +
                         std::to_string(config.d0) + "]");
  }
  ModelParams p;
  p.embedding = std::move(embedding);
  p.embedding.set_requires_grad(config.train_embeddings);
  p.word = make_encoder_level(config.variant, config.d0, config.d1, rng);
  p.utt = make_encoder_level(config.variant, config.d1, config.d2, rng);
  std::size_t in = config.d2;
  for (std::size_t width : config.fc) {
    p.fc.push_back(make_affine(in, width, rng));
    in = width;
  }
  p.out = make_affine(in, config.num_classes, rng);
  return p;
}

void validate_model(const ModelParams& params, const ModelConfig& config) {
  validate_config(config);
  if (!params.embedding.defined() || params.embedding.rank() != 2 ||
      params.embedding.cols() != config.d0) {
    throw DimensionError("model: embedding width does not match d0");
  }
  auto check_cell = [](const GruCellParams& cell, std::size_t d_in,
                       std::size_t d_hid, const std::string& name) {
    if (cell.d_in() != d_in || cell.d_hid() != d_hid) {
      throw DimensionError("model: " + name + " cell is " +
                           std::to_string(cell.d_in()) + "->" +
                           std::to_string(cell.d_hid()) + ", expected " +
                           std::to_string(d_in) + "->" +
                           std::to_string(d_hid));
    }
  };
  check_cell(params.word.gru.fwd, config.d0, config.d1, "word forward");
  check_cell(params.word.gru.bwd, config.d0, config.d1, "word backward");
  check_cell(params.utt.gru.fwd, config.d1, config.d2, "utterance forward");
  check_cell(params.utt.gru.bwd, config.d1, config.d2, "utterance backward");
  validate_fusion(params.word.fusion, config.variant, config.d0, config.d1,
                  "word level");
  validate_fusion(params.utt.fusion, config.variant, config.d1, config.d2,
                  "utterance level");
  if (params.fc.size() != config.fc.size()) {
    throw DimensionError("model: classifier has " +
                         std::to_string(params.fc.size()) +
                         " hidden layers, config expects " +
                         std::to_string(config.fc.size()));
  }
  std::size_t in = config.d2;
  for (std::size_t i = 0; i < params.fc.size(); ++i) {
    const AffineParams& layer = params.fc[i];
    if (layer.w.rank() != 2 || layer.w.rows() != config.fc[i] ||
        layer.w.cols() != in || layer.b.rank() != 1 ||
        layer.b.shape()[0] != config.fc[i]) {
      throw DimensionError("model: classifier layer " + std::to_string(i) +
                           " shapes do not match config");
    }
    in = config.fc[i];
  }
  if (params.out.w.rank() != 2 || params.out.w.rows() != config.num_classes ||
      params.out.w.cols() != in || params.out.b.rank() != 1 ||
      params.out.b.shape()[0] != config.num_classes) {
    throw DimensionError("model: output layer shapes do not match config");
  }
}

ForwardResult forward(const ModelParams& params, const ModelConfig& config,
                      const Dialogue& dialogue, Mode mode, RngStream* rng) {
  if (dialogue.utterances.empty()) {
    throw ContractError("forward: dialogue '" + dialogue.id +
                        "' has no utterances");
  }
  std::vector<Tensor> utt_rows;
  utt_rows.reserve(dialogue.utterances.size());
  for (const Utterance& u : dialogue.utterances) {
    if (u.tokens.empty()) {
      throw ContractError("forward: utterance without tokens in dialogue '" +
                          dialogue.id + "' (encode the corpus first)");
    }
    Tensor embs = gather_rows(params.embedding, u.tokens);
    Tensor e_u = encode_utterance(embs, params.word, config.variant,
                                  config.dropout, mode, rng);
    utt_rows.push_back(reshape(e_u, {1, config.d1}));
  }
  Tensor stacked = concat(utt_rows, 0);
  Tensor ctx = encode_dialogue(stacked, params.utt, config.variant,
                               config.dropout, mode, rng);
  Tensor h = ctx;
  for (std::size_t i = 0; i < params.fc.size(); ++i) {
    h = tanh(linear(h, params.fc[i].w, params.fc[i].b));
    if (i == 0) h = dropout(h, config.dropout, mode, rng);
  }
  Tensor logits = linear(h, params.out.w, params.out.b);
  return {logits, softmax(logits)};
}

std::vector<int> argmax_evaluated(const Tensor& probs,
                                  const std::vector<bool>& evaluated) {
  if (!probs.defined() || probs.rank() != 2 ||
      probs.cols() != evaluated.size()) {
    throw ContractError("argmax_evaluated: evaluated mask covers " +
                        std::to_string(evaluated.size()) +
                        " classes, distribution has " +
                        (probs.defined() && probs.rank() == 2
                             ? std::to_string(probs.cols())
                             : std::string("an invalid shape")));
  }
  bool any = false;
  for (bool e : evaluated) any |= e;
  if (!any) throw ConfigError("argmax_evaluated: no evaluated classes");

  std::vector<int> out;
  out.reserve(probs.rows());
  for (std::size_t j = 0; j < probs.rows(); ++j) {
    int best = -1;
    double best_p = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < evaluated.size(); ++c) {
      if (!evaluated[c]) continue;
      double p = probs.at(j, c);
      if (p > best_p) {  // strict: ties keep the lowest class id
        best_p = p;
        best = static_cast<int>(c);
      }
    }
    out.push_back(best);
  }
  return out;
}

std::vector<int> predict(const ModelParams& params, const ModelConfig& config,
                         const Dialogue& dialogue,
                         const std::vector<bool>& evaluated) {
  if (evaluated.size() != config.num_classes) {
    throw ContractError("predict: evaluated mask covers " +
                        std::to_string(evaluated.size()) + " classes, model " +
                        "has " + std::to_string(config.num_classes));
  }
  NoGradGuard no_grad;
  ForwardResult result =
      forward(params, config, dialogue, Mode::kEval, nullptr);
  return argmax_evaluated(result.probs, evaluated);
}

// ---- checkpoints ------------------------------------------------------------

void save_checkpoint(const ModelParams& params, const ModelConfig& config,
                     const Vocabulary& vocab, const LabelScheme& scheme,
                     const std::string& path) {
  validate_model(params, config);
  NamedTensors named = params.named();

  nlohmann::json manifest = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : named) {
    manifest.push_back({{"name", name},
                        {"shape", t.shape()},
                        {"offset", offset}});
    offset += t.numel() * 8;
  }

  std::vector<std::string> evaluated_names;
  for (std::size_t c = 0; c < scheme.classes.size(); ++c) {
    if (scheme.evaluated[c]) evaluated_names.push_back(scheme.classes[c]);
  }
  nlohmann::json header{
      {"format", kFormatTag},
      {"version", kFormatVersion},
      {"config", config_to_json(config)},
      {"vocab", vocab.tokens()},
      {"scheme",
       {{"classes", scheme.classes},
        {"evaluated", evaluated_names},
        {"counts", scheme.counts},
        {"alpha", scheme.alpha},
        {"weights", scheme.weights}}},
      {"arrays", manifest}};

  std::string blob = header.dump();
  blob += '\n';
  blob.reserve(blob.size() + offset);
  for (const auto& [name, t] : named) {
    for (double v : t.data()) append_f64_le(blob, v);
  }

  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint: " + tmp);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw CheckpointError("short write to checkpoint: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    throw CheckpointError("cannot move checkpoint into place: " +
                          ec.message());
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  std::string header_line;
  if (!std::getline(in, header_line)) {
    throw CheckpointError("checkpoint has no header: " + path);
  }
  std::string blob((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const std::exception& e) {
    throw CheckpointError("checkpoint header is not valid JSON: " +
                          std::string(e.what()));
  }

  Checkpoint ckpt;
  try {
    if (header.at("format").get<std::string>() != kFormatTag) {
      throw CheckpointError("not a model checkpoint: " + path);
    }
    if (header.at("version").get<int>() != kFormatVersion) {
      throw CheckpointError(
          "unsupported checkpoint version " +
          std::to_string(header.at("version").get<int>()));
    }
    ckpt.config = config_from_json(header.at("config"));

    auto tokens = header.at("vocab").get<std::vector<std::string>>();
    if (tokens.size() < 2 || tokens[0] != "<pad>" || tokens[1] != "<unk>") {
      throw CheckpointError("checkpoint vocabulary lacks the reserved rows");
    }
    for (std::size_t i = 2; i < tokens.size(); ++i) {
      if (ckpt.vocab.add(tokens[i]) != static_cast<int>(i)) {
        throw CheckpointError("checkpoint vocabulary has duplicate token '" +
                              tokens[i] + "'");
      }
    }

    const auto& js = header.at("scheme");
    ckpt.scheme.classes = js.at("classes").get<std::vector<std::string>>();
    if (ckpt.scheme.classes.empty()) {
      throw CheckpointError("checkpoint scheme has no classes");
    }
    ckpt.scheme.evaluated.assign(ckpt.scheme.classes.size(), false);
    for (const auto& name :
         js.at("evaluated").get<std::vector<std::string>>()) {
      int id = ckpt.scheme.class_id(name);
      if (id < 0) {
        throw CheckpointError("checkpoint scheme: evaluated class '" + name +
                              "' is not in classes");
      }
      ckpt.scheme.evaluated[static_cast<std::size_t>(id)] = true;
    }
    ckpt.scheme.counts = js.at("counts").get<std::vector<long long>>();
    ckpt.scheme.alpha = js.at("alpha").get<double>();
    ckpt.scheme.weights = js.at("weights").get<std::vector<double>>();
    if (!ckpt.scheme.counts.empty() &&
        ckpt.scheme.counts.size() != ckpt.scheme.classes.size()) {
      throw CheckpointError("checkpoint scheme: counts size mismatch");
    }
    if (!ckpt.scheme.weights.empty() &&
        ckpt.scheme.weights.size() != ckpt.scheme.classes.size()) {
      throw CheckpointError("checkpoint scheme: weights size mismatch");
    }
    if (ckpt.config.num_classes != ckpt.scheme.classes.size()) {
      throw CheckpointError(
          "checkpoint config and scheme disagree on the class count");
    }

    std::unordered_map<std::string,
                       std::pair<std::vector<std::size_t>, std::size_t>>
        manifest;
    for (const auto& entry : header.at("arrays")) {
      manifest[entry.at("name").get<std::string>()] = {
          entry.at("shape").get<std::vector<std::size_t>>(),
          entry.at("offset").get<std::size_t>()};
    }

    ckpt.params = shape_skeleton(ckpt.config, ckpt.vocab.size());
    for (auto& [name, t] : ckpt.params.named()) {
      auto found = manifest.find(name);
      if (found == manifest.end()) {
        throw CheckpointError("checkpoint is missing array '" + name + "'");
      }
      const auto& [shape, offset] = found->second;
      if (shape != t.shape()) {
        throw CheckpointError("checkpoint array '" + name + "' has shape " +
                              shape_string(shape) + ", expected " +
                              shape_string(t.shape()));
      }
      std::size_t bytes = t.numel() * 8;
      if (offset + bytes > blob.size()) {
        throw CheckpointError("checkpoint is truncated at array '" + name +
                              "'");
      }
      auto& data = t.data();
      for (std::size_t i = 0; i < t.numel(); ++i) {
        data[i] = decode_f64_le(blob.data() + offset + i * 8);
      }
      manifest.erase(found);
    }
    if (!manifest.empty()) {
      throw CheckpointError("checkpoint has unexpected array '" +
                            manifest.begin()->first + "'");
    }
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError("malformed checkpoint header: " +
                          std::string(e.what()));
  }

  try {
    validate_model(ckpt.params, ckpt.config);
  } catch (const Error& e) {
    throw CheckpointError("checkpoint fails shape validation: " +
                          std::string(e.what()));
  }
  return ckpt;
}

}  // namespace higru
