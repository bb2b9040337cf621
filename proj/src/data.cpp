#include "higru/data.hpp"

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <utility>

#include "higru/rng.hpp"
#include "json.hpp"

namespace higru {

namespace {

// ---- UTF-8 -----------------------------------------------------------------

// Decodes the sequence starting at s[i], advancing i. Invalid bytes yield
// U+FFFD, which classifies as "delete" below.
std::uint32_t decode_utf8(const std::string& s, std::size_t& i) {
  unsigned char b0 = static_cast<unsigned char>(s[i]);
  if (b0 < 0x80) {
    ++i;
    return b0;
  }
  int len;
  std::uint32_t cp;
  if ((b0 & 0xE0) == 0xC0) {
    len = 2;
    cp = b0 & 0x1Fu;
  } else if ((b0 & 0xF0) == 0xE0) {
    len = 3;
    cp = b0 & 0x0Fu;
  } else if ((b0 & 0xF8) == 0xF0) {
    len = 4;
    cp = b0 & 0x07u;
  } else {
    ++i;
    return 0xFFFD;
  }
  if (i + len > s.size()) {
    ++i;
    return 0xFFFD;
  }
  for (int k = 1; k < len; ++k) {
    unsigned char b = static_cast<unsigned char>(s[i + k]);
    if ((b & 0xC0) != 0x80) {
      ++i;
      return 0xFFFD;
    }
    cp = (cp << 6) | (b & 0x3Fu);
  }
  i += len;
  return cp;
}

void append_utf8(std::string& out, std::uint32_t cp) {
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else if (cp < 0x10000) {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xF0 | (cp >> 18));
    out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
}

std::uint32_t lower_codepoint(std::uint32_t cp) {
  if (cp >= 'A' && cp <= 'Z') return cp + 0x20;
  if (cp >= 0xC0 && cp <= 0xDE && cp != 0xD7) return cp + 0x20;  // Latin-1
  if (cp >= 0x391 && cp <= 0x3A9 && cp != 0x3A2) return cp + 0x20;  // Greek
  if (cp >= 0x410 && cp <= 0x42F) return cp + 0x20;                 // Cyrillic
  if (cp >= 0x400 && cp <= 0x40F) return cp + 0x50;
  // Latin Extended-A pairs upper/lower on even/odd codepoints.
  if (cp >= 0x100 && cp <= 0x137 && cp % 2 == 0) return cp + 1;
  if (cp >= 0x14A && cp <= 0x177 && cp % 2 == 0) return cp + 1;
  return cp;
}

struct CpRange {
  std::uint32_t lo, hi;
};

// Letter/digit codepoints by block. A coarse table covering the scripts that
// show up in conversation corpora; anything outside is treated as
// punctuation and deleted.
constexpr CpRange kAlnumRanges[] = {
    {0x30, 0x39},       // ASCII digits
    {0x41, 0x5A},       // A-Z
    {0x61, 0x7A},       // a-z
    {0xC0, 0xD6},       // Latin-1 letters (excluding multiply sign)
    {0xD8, 0xF6},       //   (excluding divide sign)
    {0xF8, 0x24F},      // Latin Extended-A/B
    {0x370, 0x3FF},     // Greek
    {0x400, 0x4FF},     // Cyrillic
    {0x531, 0x586},     // Armenian
    {0x5D0, 0x5EA},     // Hebrew
    {0x620, 0x64A},     // Arabic letters
    {0x660, 0x669},     // Arabic-Indic digits
    {0x6F0, 0x6F9},     // Extended Arabic-Indic digits
    {0x904, 0x939},     // Devanagari letters
    {0x958, 0x961},
    {0x966, 0x96F},     // Devanagari digits
    {0x3041, 0x3096},   // Hiragana
    {0x30A1, 0x30FA},   // Katakana
    {0x4E00, 0x9FFF},   // CJK Unified Ideographs
    {0xAC00, 0xD7A3},   // Hangul syllables
    {0xFF10, 0xFF19},   // fullwidth digits
    {0xFF21, 0xFF3A},   // fullwidth A-Z
    {0xFF41, 0xFF5A},   // fullwidth a-z
};

bool is_letter_or_digit(std::uint32_t cp) {
  for (const CpRange& r : kAlnumRanges) {
    if (cp < r.lo) return false;  // ranges are sorted ascending
    if (cp <= r.hi) return true;
  }
  return false;
}

bool is_space_cp(std::uint32_t cp) {
  switch (cp) {
    case ' ':
    case '\t':
    case '\n':
    case '\r':
    case '\v':
    case '\f':
    case 0xA0:     // no-break space
    case 0x1680:
    case 0x2028:
    case 0x2029:
    case 0x202F:
    case 0x205F:
    case 0x3000:   // ideographic space
      return true;
    default:
      return cp >= 0x2000 && cp <= 0x200A;
  }
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::istringstream in(line);
  std::string f;
  while (in >> f) fields.push_back(f);
  return fields;
}

bool all_digits(const std::string& s) {
  if (s.empty()) return false;
  return std::all_of(s.begin(), s.end(), [](unsigned char c) {
    return std::isdigit(c) != 0;
  });
}

double parse_double(const std::string& field, const std::string& path,
                    std::size_t line_no) {
  if (field.empty()) {
    throw IngestError(path + " line " + std::to_string(line_no) +
                      ": empty numeric field");
  }
  errno = 0;
  char* end = nullptr;
  double v = std::strtod(field.c_str(), &end);
  if (end != field.c_str() + field.size()) {
    throw IngestError(path + " line " + std::to_string(line_no) +
                      ": cannot parse '" + field + "' as a number");
  }
  if (std::isnan(v)) {
    throw IngestError(path + " line " + std::to_string(line_no) +
                      ": NaN embedding value");
  }
  return v;
}

}  // namespace

// ---- preprocessing -----------------------------------------------------------

std::vector<std::string> preprocess(const std::string& text) {
  std::vector<std::string> tokens;
  std::string current;
  auto flush = [&tokens, &current] {
    if (!current.empty()) {
      tokens.push_back(current);
      current.clear();
    }
  };
  std::size_t i = 0;
  while (i < text.size()) {
    std::uint32_t cp = lower_codepoint(decode_utf8(text, i));
    if (cp == '?' || cp == '!') {
      flush();
      tokens.emplace_back(1, static_cast<char>(cp));
    } else if (is_space_cp(cp)) {
      flush();
    } else if (is_letter_or_digit(cp)) {
      append_utf8(current, cp);
    }
    // everything else is deleted; its neighbors join
  }
  flush();
  return tokens;
}

// ---- vocabulary -----------------------------------------------------------------

Vocabulary::Vocabulary() {
  tokens_ = {"<pad>", "<unk>"};
  ids_ = {{"<pad>", kPad}, {"<unk>", kUnk}};
}

int Vocabulary::add(const std::string& token) {
  auto it = ids_.find(token);
  if (it != ids_.end()) return it->second;
  int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  ids_.emplace(token, id);
  return id;
}

int Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(const std::string& token) const {
  return ids_.count(token) != 0;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ContractError("Vocabulary::token: id " + std::to_string(id) +
                        " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

// ---- label scheme ---------------------------------------------------------------

int LabelScheme::class_id(const std::string& name) const {
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] == name) return static_cast<int>(i);
  }
  return -1;
}

std::size_t LabelScheme::num_evaluated() const {
  std::size_t n = 0;
  for (bool e : evaluated) n += e ? 1 : 0;
  return n;
}

LabelScheme load_label_scheme(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open label scheme file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw IngestError("label scheme " + path + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("classes") || !j.contains("evaluated")) {
    throw IngestError("label scheme " + path +
                      ": expected object with 'classes' and 'evaluated'");
  }
  LabelScheme scheme;
  if (!j["classes"].is_array() || j["classes"].empty()) {
    throw IngestError("label scheme " + path +
                      ": 'classes' must be a non-empty array");
  }
  for (const auto& c : j["classes"]) {
    if (!c.is_string()) {
      throw IngestError("label scheme " + path +
                        ": class names must be strings");
    }
    std::string name = c.get<std::string>();
    if (scheme.class_id(name) != -1) {
      throw IngestError("label scheme " + path + ": duplicate class '" +
                        name + "'");
    }
    scheme.classes.push_back(std::move(name));
  }
  scheme.evaluated.assign(scheme.classes.size(), false);
  if (!j["evaluated"].is_array()) {
    throw IngestError("label scheme " + path +
                      ": 'evaluated' must be an array");
  }
  for (const auto& c : j["evaluated"]) {
    if (!c.is_string()) {
      throw IngestError("label scheme " + path +
                        ": evaluated names must be strings");
    }
    int id = scheme.class_id(c.get<std::string>());
    if (id < 0) {
      throw IngestError("label scheme " + path + ": evaluated class '" +
                        c.get<std::string>() + "' is not in 'classes'");
    }
    if (scheme.evaluated[static_cast<std::size_t>(id)]) {
      throw IngestError("label scheme " + path +
                        ": duplicate evaluated class '" +
                        c.get<std::string>() + "'");
    }
    scheme.evaluated[static_cast<std::size_t>(id)] = true;
  }
  if (scheme.num_evaluated() == 0) {
    throw IngestError("label scheme " + path +
                      ": evaluated subset must be non-empty");
  }
  scheme.counts.assign(scheme.classes.size(), 0);
  return scheme;
}

// ---- corpus ------------------------------------------------------------------------

Corpus load_corpus(const std::string& path, Split split,
                   const LabelScheme& scheme) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open corpus file: " + path);
  Corpus corpus;
  corpus.split = split;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string where = path + " line " + std::to_string(line_no);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw IngestError(where + ": invalid JSON: " + e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string()) {
      throw IngestError(where + ": dialogue needs a string 'id'");
    }
    if (!j.contains("utterances") || !j["utterances"].is_array() ||
        j["utterances"].empty()) {
      throw IngestError(where +
                        ": dialogue needs a non-empty 'utterances' array");
    }
    Dialogue dialogue;
    dialogue.id = j["id"].get<std::string>();
    for (const auto& u : j["utterances"]) {
      if (!u.is_object() || !u.contains("speaker") ||
          !u["speaker"].is_string() || !u.contains("text") ||
          !u["text"].is_string() || !u.contains("label")) {
        throw IngestError(where +
                          ": utterance needs 'speaker' (string), 'text' "
                          "(string), and 'label' (string or null)");
      }
      Utterance utt;
      utt.speaker_id = u["speaker"].get<std::string>();
      utt.text = u["text"].get<std::string>();
      if (u["label"].is_null()) {
        utt.label = std::nullopt;
      } else if (u["label"].is_string()) {
        std::string name = u["label"].get<std::string>();
        int id = scheme.class_id(name);
        if (id < 0) {
          throw IngestError(where + ": label '" + name +
                            "' is not in the label scheme");
        }
        utt.label = id;
      } else {
        throw IngestError(where + ": 'label' must be a string or null");
      }
      dialogue.utterances.push_back(std::move(utt));
    }
    corpus.dialogues.push_back(std::move(dialogue));
  }
  if (corpus.dialogues.empty()) {
    throw IngestError("corpus is empty: " + path);
  }
  return corpus;
}

Vocabulary build_vocab(const Corpus& train) {
  if (train.dialogues.empty()) {
    throw IngestError("cannot build a vocabulary from an empty corpus");
  }
  Vocabulary vocab;
  for (const Dialogue& d : train.dialogues) {
    for (const Utterance& u : d.utterances) {
      for (const std::string& tok : preprocess(u.text)) vocab.add(tok);
    }
  }
  return vocab;
}

void encode_corpus(Corpus& corpus, const Vocabulary& vocab) {
  for (Dialogue& d : corpus.dialogues) {
    for (Utterance& u : d.utterances) {
      u.tokens.clear();
      for (const std::string& tok : preprocess(u.text)) {
        u.tokens.push_back(vocab.id(tok));
      }
      if (u.tokens.empty()) u.tokens.push_back(Vocabulary::kUnk);
    }
  }
}

// ---- embeddings -----------------------------------------------------------------------

Tensor load_embeddings(const std::string& path, const Vocabulary& vocab,
                       std::size_t d0, RngStream& rng) {
  if (d0 == 0) throw ConfigError("embedding dimension must be positive");
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open embeddings file: " + path);

  std::unordered_map<std::string, std::vector<double>> file_rows;
  std::string line;
  std::size_t line_no = 0;
  bool first_content_line = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> fields = split_fields(line);
    if (fields.empty()) continue;
    if (first_content_line) {
      first_content_line = false;
      if (fields.size() == 2 && all_digits(fields[0]) &&
          all_digits(fields[1])) {
        // "count dim" header
        if (std::stoull(fields[1]) != d0) {
          throw IngestError(path + " line " + std::to_string(line_no) +
                            ": header dimension " + fields[1] +
                            " does not match expected " + std::to_string(d0));
        }
        continue;
      }
    }
    if (fields.size() != d0 + 1) {
      throw IngestError(path + " line " + std::to_string(line_no) +
                        ": expected " + std::to_string(d0) +
                        " values after the token, got " +
                        std::to_string(fields.size() - 1));
    }
    std::vector<double> row(d0);
    for (std::size_t k = 0; k < d0; ++k) {
      row[k] = parse_double(fields[k + 1], path, line_no);
    }
    file_rows[fields[0]] = std::move(row);
  }

  Tensor matrix = Tensor::zeros({vocab.size(), d0});
  auto& data = matrix.data();
  for (std::size_t id = 0; id < vocab.size(); ++id) {
    if (static_cast<int>(id) == Vocabulary::kPad) continue;  // stays zero
    auto it = (static_cast<int>(id) == Vocabulary::kUnk)
                  ? file_rows.end()
                  : file_rows.find(vocab.token(static_cast<int>(id)));
    if (it != file_rows.end()) {
      std::copy(it->second.begin(), it->second.end(),
                data.begin() + static_cast<std::ptrdiff_t>(id * d0));
    } else {
      for (std::size_t k = 0; k < d0; ++k) {
        data[id * d0 + k] = rng.uniform(-0.25, 0.25);
      }
    }
  }
  return matrix;
}

// ---- class weights ---------------------------------------------------------------------

std::vector<long long> count_labels(const Corpus& corpus,
                                    std::size_t num_classes) {
  std::vector<long long> counts(num_classes, 0);
  for (const Dialogue& d : corpus.dialogues) {
    for (const Utterance& u : d.utterances) {
      if (!u.label.has_value()) continue;
      int id = *u.label;
      if (id < 0 || static_cast<std::size_t>(id) >= num_classes) {
        throw ContractError("count_labels: label id " + std::to_string(id) +
                            " out of range");
      }
      ++counts[static_cast<std::size_t>(id)];
    }
  }
  return counts;
}

std::vector<double> compute_class_weights(const std::vector<long long>& counts,
                                          double alpha,
                                          const std::vector<bool>& evaluated) {
  if (counts.size() != evaluated.size()) {
    throw ContractError(
        "compute_class_weights: counts and evaluated mask sizes differ");
  }
  if (alpha < 0.0) {
    throw ConfigError("class-weight exponent must be >= 0, got " +
                      std::to_string(alpha));
  }
  double total = 0.0;
  bool any = false;
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (!evaluated[c]) continue;
    any = true;
    if (counts[c] < 0) {
      throw ContractError("compute_class_weights: negative count");
    }
    if (counts[c] == 0 && alpha > 0.0) {
      throw ConfigError("evaluated class " + std::to_string(c) +
                        " has no training utterances; its weight is "
                        "undefined for a positive exponent");
    }
    total += std::pow(static_cast<double>(counts[c]), alpha);
  }
  if (!any) {
    throw ConfigError("compute_class_weights: no evaluated classes");
  }
  std::vector<double> weights(counts.size(), 0.0);
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (!evaluated[c]) continue;
    weights[c] = total / std::pow(static_cast<double>(counts[c]), alpha);
  }
  return weights;
}

}  // namespace higru
