// Command-line entry points: train, eval, predict, and sweep-alpha.
// Batch jobs only; results land as files in --out plus tables on stdout.

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "higru/data.hpp"
#include "higru/errors.hpp"
#include "higru/metrics.hpp"
#include "higru/model.hpp"
#include "higru/optim.hpp"
#include "higru/rng.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace higru;

namespace {

// Command-line misuse distinct from runtime failures: exits with code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Opts {
  std::string config_path;

  std::string train_path;
  std::string val_path;
  std::string test_path;
  std::string scheme_path;
  std::string embeddings_path;
  std::string checkpoint_path;
  std::string out_dir = ".";

  std::string variant = "higru";
  std::size_t d0 = 300;
  std::size_t d1 = 300;
  std::size_t d2 = 300;
  std::string fc = "100,100";
  double dropout = 0.5;
  bool freeze_embeddings = false;

  double lr = 2.5e-4;
  double alpha = 1.0;
  std::size_t patience = 10;
  double clip_norm = 5.0;
  std::size_t anneal_every = 20;
  std::string select_metric = "uwa";
  std::uint64_t seed = 1;
  std::size_t max_epochs = 200;

  std::size_t workers = 1;
};

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_text_atomic(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + tmp.string() + "' for writing");
    out << content;
    if (!out.flush()) throw Error("failed writing '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    throw Error("cannot move '" + tmp.string() + "' into place: " +
                ec.message());
  }
}

std::vector<std::size_t> parse_fc(const std::string& spec) {
  std::vector<std::size_t> widths;
  if (spec.empty()) return widths;
  std::size_t start = 0;
  while (start <= spec.size()) {
    std::size_t comma = spec.find(',', start);
    std::string part = spec.substr(
        start, comma == std::string::npos ? std::string::npos : comma - start);
    char* end = nullptr;
    unsigned long w = std::strtoul(part.c_str(), &end, 10);
    if (part.empty() || end != part.c_str() + part.size() || w == 0) {
      throw ConfigError("--fc expects comma-separated positive widths, got '" +
                        spec + "'");
    }
    widths.push_back(w);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return widths;
}

// ---- config-file merge ------------------------------------------------------

bool flag_given(const CLI::App* sub, const std::string& name) {
  const CLI::Option* opt = sub->get_option_no_throw(name);
  return opt != nullptr && opt->count() > 0;
}

std::string want_string(const json& v, const std::string& key) {
  if (!v.is_string()) {
    throw ConfigError("config key '" + key + "' must be a string");
  }
  return v.get<std::string>();
}

double want_number(const json& v, const std::string& key) {
  if (!v.is_number()) {
    throw ConfigError("config key '" + key + "' must be a number");
  }
  return v.get<double>();
}

std::size_t want_count(const json& v, const std::string& key) {
  if (!v.is_number_unsigned() && !(v.is_number_integer() &&
                                   v.get<long long>() >= 0)) {
    throw ConfigError("config key '" + key +
                      "' must be a non-negative integer");
  }
  return static_cast<std::size_t>(v.get<unsigned long long>());
}

bool want_bool(const json& v, const std::string& key) {
  if (!v.is_boolean()) {
    throw ConfigError("config key '" + key + "' must be a boolean");
  }
  return v.get<bool>();
}

// Values flow defaults -> config file -> explicit flags; a key in the file
// is skipped when the matching flag appeared on the command line. Keys that
// the active command does not use are accepted and ignored, so one file can
// serve several commands.
void apply_config_file(const CLI::App* sub, Opts& o) {
  if (o.config_path.empty()) return;
  std::ifstream in(o.config_path);
  if (!in) {
    throw ConfigError("cannot open config file '" + o.config_path + "'");
  }
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError("config file '" + o.config_path +
                      "' is not valid JSON: " + e.what());
  }
  if (!j.is_object()) {
    throw ConfigError("config file '" + o.config_path +
                      "' must hold a JSON object");
  }

  for (const auto& [key, value] : j.items()) {
    std::string flag = "--" + key;
    if (flag_given(sub, flag)) continue;  // explicit flag wins
    if (key == "train") {
      o.train_path = want_string(value, key);
    } else if (key == "val") {
      o.val_path = want_string(value, key);
    } else if (key == "test") {
      o.test_path = want_string(value, key);
    } else if (key == "scheme") {
      o.scheme_path = want_string(value, key);
    } else if (key == "embeddings") {
      o.embeddings_path = want_string(value, key);
    } else if (key == "checkpoint") {
      o.checkpoint_path = want_string(value, key);
    } else if (key == "out") {
      o.out_dir = want_string(value, key);
    } else if (key == "variant") {
      o.variant = want_string(value, key);
      parse_variant(o.variant);  // validate early
    } else if (key == "d0") {
      o.d0 = want_count(value, key);
    } else if (key == "d1") {
      o.d1 = want_count(value, key);
    } else if (key == "d2") {
      o.d2 = want_count(value, key);
    } else if (key == "fc") {
      if (value.is_array()) {
        std::string joined;
        for (const auto& w : value) {
          if (!joined.empty()) joined += ',';
          joined += std::to_string(want_count(w, key));
        }
        o.fc = joined;
      } else {
        o.fc = want_string(value, key);
      }
    } else if (key == "dropout") {
      o.dropout = want_number(value, key);
    } else if (key == "freeze-embeddings") {
      o.freeze_embeddings = want_bool(value, key);
    } else if (key == "lr") {
      o.lr = want_number(value, key);
    } else if (key == "alpha") {
      o.alpha = want_number(value, key);
    } else if (key == "patience") {
      o.patience = want_count(value, key);
    } else if (key == "clip-norm") {
      o.clip_norm = want_number(value, key);
    } else if (key == "anneal-every") {
      o.anneal_every = want_count(value, key);
    } else if (key == "select-metric") {
      o.select_metric = want_string(value, key);
    } else if (key == "seed") {
      o.seed = static_cast<std::uint64_t>(want_count(value, key));
    } else if (key == "max-epochs") {
      o.max_epochs = want_count(value, key);
    } else if (key == "workers") {
      o.workers = want_count(value, key);
    } else {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
}

void require_path(const std::string& value, const char* flag) {
  if (value.empty()) {
    throw UsageError(std::string("missing required option ") + flag);
  }
}

// ---- shared pipeline pieces -------------------------------------------------

ModelConfig model_config_from(const Opts& o, std::size_t num_classes) {
  ModelConfig mc;
  mc.variant = parse_variant(o.variant);
  mc.d0 = o.d0;
  mc.d1 = o.d1;
  mc.d2 = o.d2;
  mc.fc = parse_fc(o.fc);
  mc.dropout = o.dropout;
  mc.num_classes = num_classes;
  mc.train_embeddings = !o.freeze_embeddings;
  validate_config(mc);
  return mc;
}

TrainConfig train_config_from(const Opts& o) {
  TrainConfig tc;
  tc.lr = o.lr;
  tc.anneal_every = o.anneal_every;
  tc.patience = o.patience;
  tc.clip_norm = o.clip_norm;
  tc.alpha = o.alpha;
  tc.max_epochs = o.max_epochs;
  tc.seed = o.seed;
  tc.select = parse_select_metric(o.select_metric);
  validate_train_config(tc);
  return tc;
}

// Matches the loader's conventions for tokens without pretrained vectors:
// uniform in [-0.25, 0.25], PAD row all-zero, ids drawn in ascending order.
Tensor random_embeddings(std::size_t vocab_size, std::size_t d0,
                         RngStream& rng) {
  Tensor emb = Tensor::zeros({vocab_size, d0});
  std::vector<double>& data = emb.data();
  for (std::size_t id = 1; id < vocab_size; ++id) {
    for (std::size_t k = 0; k < d0; ++k) {
      data[id * d0 + k] = rng.uniform(-0.25, 0.25);
    }
  }
  return emb;
}

struct TrainingData {
  LabelScheme scheme;
  Corpus train;
  Corpus val;
  Vocabulary vocab;
};

TrainingData load_training_data(const Opts& o) {
  TrainingData td;
  td.scheme = load_label_scheme(o.scheme_path);
  td.train = load_corpus(o.train_path, Split::kTrain, td.scheme);
  td.val = load_corpus(o.val_path, Split::kVal, td.scheme);
  td.vocab = build_vocab(td.train);
  encode_corpus(td.train, td.vocab);
  encode_corpus(td.val, td.vocab);
  td.scheme.counts = count_labels(td.train, td.scheme.classes.size());
  return td;
}

struct TrainedModel {
  TrainResult result;
  ModelConfig config;
};

// One full training run at the scheme's alpha; artifacts land in out_dir
// under the given file names.
TrainedModel run_training(const Opts& o, TrainingData& td, bool verbose,
                          const std::string& ckpt_name,
                          const std::string& history_name) {
  td.scheme.alpha = o.alpha;
  td.scheme.weights = compute_class_weights(td.scheme.counts, td.scheme.alpha,
                                            td.scheme.evaluated);
  ModelConfig mc = model_config_from(o, td.scheme.classes.size());
  TrainConfig tc = train_config_from(o);

  RngStream emb_rng(o.seed, RngUse::kEmbeddingInit);
  Tensor emb = o.embeddings_path.empty()
                   ? random_embeddings(td.vocab.size(), mc.d0, emb_rng)
                   : load_embeddings(o.embeddings_path, td.vocab, mc.d0,
                                     emb_rng);
  RngStream init_rng(o.seed, RngUse::kParamInit);
  ModelParams params = init_model(mc, emb, init_rng);

  TrainCallbacks cb;
  if (verbose) {
    cb.on_epoch = [](const EpochRecord& r) {
      std::printf(
          "epoch %zu  loss %.6f  val_wa %.4f  val_uwa %.4f  lr %g  "
          "clipped %.2f\n",
          r.epoch, r.train_loss, r.val_wa, r.val_uwa, r.lr,
          r.clipped_fraction);
      std::fflush(stdout);
    };
  }

  TrainedModel tm{train_loop(params, mc, td.train, td.val, td.scheme, tc, cb),
                  mc};

  fs::create_directories(o.out_dir);
  save_checkpoint(tm.result.best_params, mc, td.vocab, td.scheme,
                  (fs::path(o.out_dir) / ckpt_name).string());
  write_text_atomic(fs::path(o.out_dir) / history_name,
                    history_csv(tm.result.history));
  return tm;
}

// ---- commands ---------------------------------------------------------------

int cmd_train(const Opts& o) {
  require_path(o.train_path, "--train");
  require_path(o.val_path, "--val");
  require_path(o.scheme_path, "--scheme");

  Opts local = o;
  TrainingData td = load_training_data(local);
  TrainedModel tm =
      run_training(local, td, /*verbose=*/true, "checkpoint.ckpt",
                   "history.csv");

  EvalResult ev =
      evaluate_corpus(tm.result.best_params, tm.config, td.val, td.scheme);
  write_text_atomic(fs::path(o.out_dir) / "val_report.txt",
                    report_text(ev.cm));
  write_text_atomic(fs::path(o.out_dir) / "val_report.csv", report_csv(ev.cm));

  std::printf("best %s %.6f at epoch %zu\n",
              select_metric_name(train_config_from(o).select).c_str(),
              tm.result.best_metric, tm.result.best_epoch);
  std::printf("artifacts written to %s\n", o.out_dir.c_str());
  return 0;
}

int cmd_eval(const Opts& o) {
  require_path(o.checkpoint_path, "--checkpoint");
  require_path(o.test_path, "--test");

  Checkpoint ck = load_checkpoint(o.checkpoint_path);
  Corpus test = load_corpus(o.test_path, Split::kTest, ck.scheme);
  encode_corpus(test, ck.vocab);
  EvalResult ev = evaluate_corpus(ck.params, ck.config, test, ck.scheme);

  fs::create_directories(o.out_dir);
  std::string text = report_text(ev.cm);
  write_text_atomic(fs::path(o.out_dir) / "eval_report.txt", text);
  write_text_atomic(fs::path(o.out_dir) / "eval_report.csv",
                    report_csv(ev.cm));
  std::fputs(text.c_str(), stdout);
  return 0;
}

int cmd_predict(const Opts& o) {
  require_path(o.checkpoint_path, "--checkpoint");
  require_path(o.test_path, "--test");

  Checkpoint ck = load_checkpoint(o.checkpoint_path);
  Corpus input = load_corpus(o.test_path, Split::kTest, ck.scheme);
  encode_corpus(input, ck.vocab);

  std::string lines;
  NoGradGuard no_grad;
  for (const Dialogue& d : input.dialogues) {
    ForwardResult fr = forward(ck.params, ck.config, d, Mode::kEval, nullptr);
    std::vector<int> preds = argmax_evaluated(fr.probs, ck.scheme.evaluated);
    json utts = json::array();
    for (std::size_t j = 0; j < d.utterances.size(); ++j) {
      json row;
      row["speaker"] = d.utterances[j].speaker_id;
      row["text"] = d.utterances[j].text;
      row["label"] = ck.scheme.classes[static_cast<std::size_t>(preds[j])];
      json dist = json::array();
      for (std::size_t c = 0; c < ck.scheme.classes.size(); ++c) {
        dist.push_back(fr.probs.at(j, c));
      }
      row["distribution"] = dist;
      utts.push_back(row);
    }
    json line;
    line["id"] = d.id;
    line["utterances"] = utts;
    lines += line.dump();
    lines += '\n';
  }

  fs::create_directories(o.out_dir);
  fs::path out_path = fs::path(o.out_dir) / "predictions.jsonl";
  write_text_atomic(out_path, lines);
  std::printf("wrote predictions for %zu dialogues to %s\n",
              input.dialogues.size(), out_path.string().c_str());
  return 0;
}

const double kAlphaGrid[] = {0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5};

std::string alpha_tag(double a) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", a);
  return buf;
}

// Trains one grid point and records its outcome for the parent process.
void sweep_one(const Opts& base, TrainingData& td, double alpha,
               bool verbose) {
  Opts o = base;
  o.alpha = alpha;
  std::string tag = alpha_tag(alpha);
  TrainedModel tm = run_training(o, td, verbose,
                                 "checkpoint_alpha_" + tag + ".ckpt",
                                 "history_alpha_" + tag + ".csv");
  json result;
  result["alpha"] = alpha;
  result["best_metric"] = tm.result.best_metric;
  result["best_epoch"] = tm.result.best_epoch;
  write_text_atomic(fs::path(o.out_dir) / ("result_alpha_" + tag + ".json"),
                    result.dump() + "\n");
}

int cmd_sweep_alpha(const Opts& o) {
  require_path(o.train_path, "--train");
  require_path(o.val_path, "--val");
  require_path(o.scheme_path, "--scheme");

  constexpr std::size_t kGridSize = sizeof(kAlphaGrid) / sizeof(kAlphaGrid[0]);
  TrainingData td = load_training_data(o);
  fs::create_directories(o.out_dir);

  if (o.workers <= 1) {
    for (double alpha : kAlphaGrid) {
      std::printf("training with alpha=%s\n", alpha_tag(alpha).c_str());
      std::fflush(stdout);
      sweep_one(o, td, alpha, /*verbose=*/false);
    }
  } else {
    // Grid points are independent: run them in child processes, at most
    // `workers` at a time. Each child writes its own artifact files.
    std::vector<pid_t> active;
    bool failed = false;
    std::fflush(stdout);
    std::fflush(stderr);
    auto reap_one = [&] {
      int status = 0;
      pid_t done = waitpid(-1, &status, 0);
      if (done < 0 || !WIFEXITED(status) || WEXITSTATUS(status) != 0) {
        failed = true;
      }
      for (std::size_t i = 0; i < active.size(); ++i) {
        if (active[i] == done) {
          active.erase(active.begin() + static_cast<std::ptrdiff_t>(i));
          break;
        }
      }
    };
    for (double alpha : kAlphaGrid) {
      while (active.size() >= o.workers) reap_one();
      pid_t pid = fork();
      if (pid < 0) throw Error("fork failed for the sweep worker");
      if (pid == 0) {
        try {
          sweep_one(o, td, alpha, /*verbose=*/false);
          std::_Exit(0);
        } catch (const std::exception& e) {
          std::fprintf(stderr, "error: alpha=%s: %s\n",
                       alpha_tag(alpha).c_str(), e.what());
          std::_Exit(1);
        }
      }
      active.push_back(pid);
    }
    while (!active.empty()) reap_one();
    if (failed) throw TrainError("one or more sweep workers failed");
  }

  // Collect results in grid order and pick the argmax (first on ties).
  double best_metric = -1.0;
  std::size_t best_index = 0;
  double metrics[kGridSize];
  std::size_t epochs[kGridSize];
  for (std::size_t i = 0; i < kGridSize; ++i) {
    fs::path rp = fs::path(o.out_dir) /
                  ("result_alpha_" + alpha_tag(kAlphaGrid[i]) + ".json");
    std::ifstream in(rp);
    if (!in) throw Error("sweep result file missing: " + rp.string());
    json r;
    in >> r;
    metrics[i] = r.at("best_metric").get<double>();
    epochs[i] = r.at("best_epoch").get<std::size_t>();
    if (metrics[i] > best_metric) {
      best_metric = metrics[i];
      best_index = i;
    }
  }

  std::string csv = "alpha,best_metric,best_epoch,selected\n";
  for (std::size_t i = 0; i < kGridSize; ++i) {
    csv += format_double(kAlphaGrid[i]);
    csv += ',';
    csv += format_double(metrics[i]);
    csv += ',';
    csv += std::to_string(epochs[i]);
    csv += ',';
    csv += (i == best_index) ? '1' : '0';
    csv += '\n';
  }
  write_text_atomic(fs::path(o.out_dir) / "sweep.csv", csv);

  std::string best_tag = alpha_tag(kAlphaGrid[best_index]);
  fs::copy_file(fs::path(o.out_dir) / ("checkpoint_alpha_" + best_tag +
                                       ".ckpt"),
                fs::path(o.out_dir) / "checkpoint.ckpt",
                fs::copy_options::overwrite_existing);
  std::printf("best alpha %s with %s %.6f; checkpoint.ckpt updated\n",
              best_tag.c_str(), o.select_metric.c_str(), best_metric);
  return 0;
}

// ---- option wiring ----------------------------------------------------------

void add_common_opts(CLI::App* sub, Opts& o) {
  sub->add_option("--config", o.config_path,
                  "JSON config file; flags override its values");
  sub->add_option("--out", o.out_dir, "output directory (default: .)");
}

void add_model_opts(CLI::App* sub, Opts& o) {
  sub->add_option("--variant", o.variant, "model variant")
      ->check(CLI::IsMember({"higru", "higru-f", "higru-sf"}));
  sub->add_option("--d0", o.d0, "word embedding width");
  sub->add_option("--d1", o.d1, "word-level hidden width");
  sub->add_option("--d2", o.d2, "utterance-level hidden width");
  sub->add_option("--fc", o.fc,
                  "classifier hidden widths, e.g. \"100,100\" (empty: none)");
  sub->add_option("--dropout", o.dropout, "dropout rate in [0, 1)");
  sub->add_flag("--freeze-embeddings", o.freeze_embeddings,
                "do not update the embedding matrix");
}

void add_train_opts(CLI::App* sub, Opts& o, bool with_alpha) {
  sub->add_option("--train", o.train_path, "training corpus (JSON Lines)");
  sub->add_option("--val", o.val_path, "validation corpus (JSON Lines)");
  sub->add_option("--scheme", o.scheme_path, "label scheme (JSON)");
  sub->add_option("--embeddings", o.embeddings_path,
                  "pretrained word vectors (text format; optional)");
  sub->add_option("--lr", o.lr, "initial learning rate");
  if (with_alpha) {
    sub->add_option("--alpha", o.alpha, "class-weight exponent");
  }
  sub->add_option("--patience", o.patience, "early-stop patience in epochs");
  sub->add_option("--clip-norm", o.clip_norm, "global gradient norm limit");
  sub->add_option("--anneal-every", o.anneal_every,
                  "epochs between learning-rate halvings");
  sub->add_option("--select-metric", o.select_metric,
                  "validation metric for model selection")
      ->check(CLI::IsMember({"wa", "uwa"}));
  sub->add_option("--seed", o.seed, "root random seed");
  sub->add_option("--max-epochs", o.max_epochs, "epoch limit");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Hierarchical GRU dialogue emotion recognizer: train, evaluate, "
      "predict, and sweep the class-weight exponent."};
  app.require_subcommand(1);

  Opts opts;
  CLI::App* train = app.add_subcommand("train", "train a model");
  add_common_opts(train, opts);
  add_train_opts(train, opts, /*with_alpha=*/true);
  add_model_opts(train, opts);

  CLI::App* eval = app.add_subcommand("eval", "score a checkpoint");
  add_common_opts(eval, opts);
  eval->add_option("--checkpoint", opts.checkpoint_path, "model checkpoint");
  eval->add_option("--test", opts.test_path, "labeled corpus (JSON Lines)");

  CLI::App* predict_cmd =
      app.add_subcommand("predict", "emit per-utterance predictions");
  add_common_opts(predict_cmd, opts);
  predict_cmd->add_option("--checkpoint", opts.checkpoint_path,
                          "model checkpoint");
  predict_cmd->add_option("--test", opts.test_path,
                          "input corpus (labels may be null)");

  CLI::App* sweep =
      app.add_subcommand("sweep-alpha", "train across the alpha grid");
  add_common_opts(sweep, opts);
  add_train_opts(sweep, opts, /*with_alpha=*/false);
  add_model_opts(sweep, opts);
  sweep->add_option("--workers", opts.workers,
                    "concurrent training processes (default 1)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    CLI::App* active = app.get_subcommands().front();
    apply_config_file(active, opts);
    if (active == train) return cmd_train(opts);
    if (active == eval) return cmd_eval(opts);
    if (active == predict_cmd) return cmd_predict(opts);
    return cmd_sweep_alpha(opts);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
