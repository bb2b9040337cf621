#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "higru/errors.hpp"
#include "higru/tensor.hpp"

namespace higru {

class RngStream;

enum class Split { kTrain, kVal, kTest };

// One utterance: raw text plus (after encode_corpus) its token ids.
// label is the class id within the LabelScheme; absent means unlabeled.
struct Utterance {
  std::string speaker_id;
  std::string text;
  std::vector<int> tokens;
  std::optional<int> label;
};

struct Dialogue {
  std::string id;
  std::vector<Utterance> utterances;
};

struct Corpus {
  std::vector<Dialogue> dialogues;
  Split split = Split::kTrain;
};

// Class inventory: full class list, which classes count toward evaluation,
// per-class training counts, and the loss weights derived from them.
struct LabelScheme {
  std::vector<std::string> classes;
  std::vector<bool> evaluated;      // mask over classes
  std::vector<long long> counts;    // training utterances per class
  double alpha = 0.0;               // weight exponent
  std::vector<double> weights;      // 0 for excluded classes

  std::size_t num_classes() const { return classes.size(); }
  // Index of `name` in classes, or -1 if absent.
  int class_id(const std::string& name) const;
  std::size_t num_evaluated() const;
};

// Lowercases, deletes every character that is not a letter, digit, '?', '!',
// or whitespace (deleted characters join their neighbors), emits '?' and '!'
// as standalone tokens, and splits the rest on whitespace. Understands UTF-8;
// letters/digits beyond ASCII are recognized by codepoint-range tables.
std::vector<std::string> preprocess(const std::string& text);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

  Vocabulary();

  // Returns the token's id, inserting it if new.
  int add(const std::string& token);
  // Returns the token's id, or kUnk when absent.
  int id(const std::string& token) const;
  bool contains(const std::string& token) const;
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

// JSON Lines, one dialogue per line:
//   {"id": str, "utterances": [{"speaker": str, "text": str, "label": str|null}]}
// Labels are validated against `scheme` and stored as class ids.
Corpus load_corpus(const std::string& path, Split split,
                   const LabelScheme& scheme);

// JSON file {"classes": [str], "evaluated": [str]}.
LabelScheme load_label_scheme(const std::string& path);

// Ids for every distinct training token in first-occurrence order,
// after PAD and UNK.
Vocabulary build_vocab(const Corpus& train);

// Fills Utterance::tokens. Out-of-vocabulary tokens map to UNK; an utterance
// whose preprocessing output is empty gets the single token UNK so dialogue
// indexing stays aligned with labels.
void encode_corpus(Corpus& corpus, const Vocabulary& vocab);

// Textual word-vector file: one "token v1 ... v_d0" entry per line, optional
// "count dim" header. Rows for vocab tokens found in the file are copied
// verbatim; missing tokens and UNK are drawn uniform in [-0.25, 0.25];
// PAD stays all-zero. Returns a [|V| x d0] tensor.
Tensor load_embeddings(const std::string& path, const Vocabulary& vocab,
                       std::size_t d0, RngStream& rng);

// Labeled-utterance counts per class over a corpus.
std::vector<long long> count_labels(const Corpus& corpus,
                                    std::size_t num_classes);

// w(c) = (sum over evaluated c' of I_{c'}^alpha) / I_c^alpha for evaluated
// classes, 0 for excluded ones. An evaluated class with zero count needs
// alpha == 0 (otherwise the weight would divide by zero).
std::vector<double> compute_class_weights(const std::vector<long long>& counts,
                                          double alpha,
                                          const std::vector<bool>& evaluated);

}  // namespace higru
