// SPDX-License-Identifier: Apache-2.0
//
// Command-line driver. Every run resolves its configuration from defaults,
// then an optional --config JSON file, then explicit flags (flags win), and
// writes the fully resolved snapshot to <out>/run.json before doing work, so
// any successful run can be reproduced from that file alone.
//
// Exit codes: 0 success, 2 usage or configuration error, 1 runtime error.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "turnwise/turnwise.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using Real = float;

namespace {

struct usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Superset of every command's options; run.json serializes all of it.
struct RunConfig {
  std::string command;
  std::string data;
  std::string out;
  std::string embeddings;
  std::string checkpoint;
  std::string split = "test";
  std::string combine_mode = "sum";
  std::string encoder = "bag";
  std::string rule = "content_only";
  bool use_topic = false;
  int chunk_size = 128;
  int batch_size = 8;
  int epochs = 50;
  double lr = 1e-4;
  uint64_t seed = 0;
  int d = 64;
  int h = -1;
  std::vector<int> sizes;
  int train_convs = 200;
  int val_convs = 40;
  int test_convs = 40;
  int min_len = 12;
  int max_len = 20;
  int vocab_size = 50;
  int num_classes = 4;
};

json to_json(const RunConfig& rc) {
  return json{{"command", rc.command},
              {"data", rc.data},
              {"out", rc.out},
              {"embeddings", rc.embeddings},
              {"checkpoint", rc.checkpoint},
              {"split", rc.split},
              {"combine_mode", rc.combine_mode},
              {"encoder", rc.encoder},
              {"rule", rc.rule},
              {"use_topic", rc.use_topic},
              {"chunk_size", rc.chunk_size},
              {"batch_size", rc.batch_size},
              {"epochs", rc.epochs},
              {"lr", rc.lr},
              {"seed", rc.seed},
              {"d", rc.d},
              {"h", rc.h},
              {"sizes", rc.sizes},
              {"train_convs", rc.train_convs},
              {"val_convs", rc.val_convs},
              {"test_convs", rc.test_convs},
              {"min_len", rc.min_len},
              {"max_len", rc.max_len},
              {"vocab_size", rc.vocab_size},
              {"num_classes", rc.num_classes}};
}

template <typename T>
void take(const json& j, const char* key, T& slot) {
  if (j.contains(key)) slot = j.at(key).get<T>();
}

void apply_config_file(RunConfig& rc, const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw usage_error("cannot open config file " + file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw usage_error("config file " + file.string() + ": " + e.what());
  }
  if (!j.is_object()) throw usage_error("config file " + file.string() + " is not a JSON object");
  static const std::set<std::string> known = {
      "command",    "data",       "out",        "embeddings",  "checkpoint", "split",
      "combine_mode", "encoder",  "rule",       "use_topic",   "chunk_size", "batch_size",
      "epochs",     "lr",         "seed",       "d",           "h",          "sizes",
      "train_convs", "val_convs", "test_convs", "min_len",     "max_len",    "vocab_size",
      "num_classes"};
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!known.count(key))
      throw usage_error("config file " + file.string() + ": unknown key '" + key + "'");
  }
  try {
    std::string cmd;
    take(j, "command", cmd);
    if (!cmd.empty() && cmd != rc.command)
      throw usage_error("config file " + file.string() + " is for command '" + cmd +
                        "', not '" + rc.command + "'");
    take(j, "data", rc.data);
    take(j, "out", rc.out);
    take(j, "embeddings", rc.embeddings);
    take(j, "checkpoint", rc.checkpoint);
    take(j, "split", rc.split);
    take(j, "combine_mode", rc.combine_mode);
    take(j, "encoder", rc.encoder);
    take(j, "rule", rc.rule);
    take(j, "use_topic", rc.use_topic);
    take(j, "chunk_size", rc.chunk_size);
    take(j, "batch_size", rc.batch_size);
    take(j, "epochs", rc.epochs);
    take(j, "lr", rc.lr);
    take(j, "seed", rc.seed);
    take(j, "d", rc.d);
    take(j, "h", rc.h);
    take(j, "sizes", rc.sizes);
    take(j, "train_convs", rc.train_convs);
    take(j, "val_convs", rc.val_convs);
    take(j, "test_convs", rc.test_convs);
    take(j, "min_len", rc.min_len);
    take(j, "max_len", rc.max_len);
    take(j, "vocab_size", rc.vocab_size);
    take(j, "num_classes", rc.num_classes);
  } catch (const json::exception& e) {
    throw usage_error("config file " + file.string() + ": " + e.what());
  }
}

void require_dir(const std::string& path, const char* what) {
  if (path.empty()) throw usage_error(std::string(what) + " directory is required");
  if (!fs::is_directory(path))
    throw usage_error(std::string(what) + " directory does not exist: " + path);
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw usage_error(std::string(what) + " file is required");
  if (!fs::is_regular_file(path))
    throw usage_error(std::string(what) + " file does not exist: " + path);
}

void write_run_json(const RunConfig& rc) {
  fs::create_directories(rc.out);
  std::ofstream out(fs::path(rc.out) / "run.json");
  if (!out) throw std::runtime_error("cannot write run.json under " + rc.out);
  out << to_json(rc).dump(2) << '\n';
}

turnwise::TrainConfig make_train_config(const RunConfig& rc) {
  turnwise::TrainConfig tc;
  tc.chunk_size = rc.chunk_size;
  tc.batch_size = rc.batch_size;
  tc.lr = rc.lr;
  tc.max_epochs = rc.epochs;
  tc.seed = rc.seed;
  tc.combine = turnwise::combine_mode_from_string(rc.combine_mode);
  tc.use_topic = rc.use_topic;
  tc.encoder = turnwise::encoder_backend_from_string(rc.encoder);
  tc.d = rc.d;
  tc.h = rc.h;
  return tc;
}

std::optional<turnwise::EmbeddingFile> maybe_load_embeddings(const RunConfig& rc) {
  if (turnwise::encoder_backend_from_string(rc.encoder) !=
      turnwise::EncoderBackend::Precomputed)
    return std::nullopt;
  // Validated to exist already; binary magic decides the reader.
  std::ifstream probe(rc.embeddings, std::ios::binary);
  char magic[5] = {};
  probe.read(magic, 5);
  if (probe.gcount() == 5 && std::memcmp(magic, turnwise::kEmbeddingMagic, 5) == 0)
    return turnwise::load_embeddings_binary(rc.embeddings);
  return turnwise::load_embeddings_text(rc.embeddings);
}

json eval_report_json(const turnwise::EvalReport& rep, const std::vector<std::string>& labels) {
  json per_class = json::array();
  for (size_t k = 0; k < labels.size(); ++k)
    per_class.push_back(json{{"label", labels[k]},
                             {"precision", rep.precision[k]},
                             {"recall", rep.recall[k]}});
  return json{{"accuracy", rep.accuracy},
              {"correct", rep.correct},
              {"total", rep.total},
              {"confusion", rep.confusion},
              {"per_class", per_class},
              {"config_fingerprint", rep.config_fingerprint}};
}

int cmd_stats(const RunConfig& rc) {
  auto corpus = turnwise::load_corpus(rc.data);
  auto st = turnwise::corpus_stats(corpus);
  std::cout << "split          convs  utterances  max_len  parties\n";
  const std::pair<const char*, const turnwise::SplitStats*> rows[] = {
      {"train", &st.train}, {"val", &st.val}, {"test", &st.test}};
  for (const auto& [name, s] : rows)
    std::cout << std::left << std::setw(15) << name << std::setw(7) << s->conversations
              << std::setw(12) << s->utterances << std::setw(9) << s->max_conversation_len
              << s->num_parties << "\n";
  std::cout << "classes: " << st.num_classes << "  parties: " << st.num_parties
            << "  vocab: " << corpus.token_vocab.size()
            << "  topics: " << corpus.topic_vocab.size() << "\n";
  if (!rc.out.empty()) write_run_json(rc);
  return 0;
}

int cmd_preprocess(const RunConfig& rc) {
  auto corpus = turnwise::load_corpus(rc.data);
  write_run_json(rc);
  std::ofstream out(fs::path(rc.out) / "preview.jsonl");
  if (!out) throw std::runtime_error("cannot write preview.jsonl under " + rc.out);
  int64_t conversations = 0, chunks = 0;
  for (const auto* split : {&corpus.train, &corpus.val, &corpus.test}) {
    for (const auto& c : *split) {
      auto bits = turnwise::speaker_turn_bits(c.utterances);
      auto sliced = turnwise::slice_chunks({c}, rc.chunk_size);
      json rec;
      rec["conversation_id"] = c.conversation_id;
      rec["turn_bits"] = bits;
      auto& arr = rec["chunks"] = json::array();
      for (const auto& ch : sliced)
        arr.push_back(json{{"start", ch.start}, {"length", ch.length}});
      out << rec.dump() << '\n';
      ++conversations;
      chunks += int64_t(sliced.size());
    }
  }
  std::cout << "preprocessed " << conversations << " conversations into " << chunks
            << " chunks of size <= " << rc.chunk_size << "\n";
  return 0;
}

int cmd_train(const RunConfig& rc) {
  auto corpus = turnwise::load_corpus(rc.data);
  auto emb = maybe_load_embeddings(rc);
  write_run_json(rc);
  auto result = turnwise::train<Real>(corpus, make_train_config(rc),
                                      emb ? &*emb : nullptr, &std::cout);
  turnwise::write_metrics_csv(result.history, fs::path(rc.out) / "metrics.csv");
  auto meta = turnwise::checkpoint_meta(corpus);
  turnwise::save_checkpoint(result.model, meta, fs::path(rc.out) / "model.ckpt");
  auto rep = turnwise::evaluate_split(result.model, corpus.test, corpus.token_vocab,
                                      emb ? &*emb : nullptr);
  std::cout << "best epoch " << result.best_epoch << ", test accuracy " << std::setprecision(6)
            << rep.accuracy << "\n";
  return 0;
}

int cmd_eval(const RunConfig& rc) {
  auto corpus = turnwise::load_corpus(rc.data);
  auto loaded = turnwise::load_checkpoint<Real>(rc.checkpoint);
  if (loaded.meta.token_vocab_fnv != turnwise::vocab_fingerprint(corpus.token_vocab))
    std::cerr << "warning: token vocabulary differs from the one the checkpoint was trained on\n";
  std::optional<turnwise::EmbeddingFile> emb;
  if (loaded.model.cfg.encoder == turnwise::EncoderBackend::Precomputed) {
    require_file(rc.embeddings, "embeddings");
    RunConfig probe = rc;
    probe.encoder = "precomputed";
    emb = maybe_load_embeddings(probe);
  }
  write_run_json(rc);
  auto rep = turnwise::evaluate_split(loaded.model, corpus.split(rc.split), corpus.token_vocab,
                                      emb ? &*emb : nullptr);
  const auto j = eval_report_json(rep, loaded.meta.labels);
  std::ofstream out(fs::path(rc.out) / "eval.json");
  if (!out) throw std::runtime_error("cannot write eval.json under " + rc.out);
  out << j.dump(2) << '\n';
  std::cout << rc.split << " accuracy " << std::setprecision(17) << rep.accuracy << " ("
            << rep.correct << "/" << rep.total << ")\n";
  return 0;
}

int cmd_ablate(const RunConfig& rc) {
  auto corpus = turnwise::load_corpus(rc.data);
  auto emb = maybe_load_embeddings(rc);
  write_run_json(rc);
  auto rows = turnwise::run_ablation<Real>(corpus, make_train_config(rc),
                                           emb ? &*emb : nullptr, &std::cout);
  turnwise::write_ablation_csv(rows, fs::path(rc.out) / "ablation.csv");
  turnwise::print_ablation(rows, std::cout);
  return 0;
}

int cmd_sweep(const RunConfig& rc) {
  auto corpus = turnwise::load_corpus(rc.data);
  auto emb = maybe_load_embeddings(rc);
  write_run_json(rc);
  auto rows = turnwise::chunk_size_sweep<Real>(corpus, make_train_config(rc), rc.sizes,
                                               emb ? &*emb : nullptr, &std::cout);
  turnwise::write_sweep_csv(rows, fs::path(rc.out) / "sweep.csv");
  for (const auto& r : rows)
    std::cout << "chunk_size " << r.chunk_size << " acc " << std::setprecision(6) << r.acc
              << "\n";
  return 0;
}

int cmd_synth(const RunConfig& rc) {
  turnwise::SyntheticSpec sp;
  sp.train_convs = rc.train_convs;
  sp.val_convs = rc.val_convs;
  sp.test_convs = rc.test_convs;
  sp.min_len = rc.min_len;
  sp.max_len = rc.max_len;
  sp.vocab_size = rc.vocab_size;
  sp.num_classes = rc.num_classes;
  sp.rule = turnwise::synthetic_rule_from_string(rc.rule);
  sp.seed = rc.seed;
  write_run_json(rc);
  auto corpus = turnwise::generate_synthetic(sp);
  turnwise::save_corpus(corpus, rc.out);
  std::cout << "wrote synthetic corpus (" << rc.rule << ") to " << rc.out << ": "
            << corpus.train.size() << "/" << corpus.val.size() << "/" << corpus.test.size()
            << " conversations\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"speaker-turn-aware dialogue act classifier"};
  app.require_subcommand(1);

  RunConfig rc;
  std::string config_file;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_file, "JSON config file (flags override it)");
    cmd->add_option("--seed", rc.seed, "random seed");
    cmd->add_option("--out", rc.out, "output directory");
  };
  auto add_train_flags = [&](CLI::App* cmd) {
    cmd->add_option("--chunk-size", rc.chunk_size, "training chunk length");
    cmd->add_option("--batch-size", rc.batch_size, "chunks per optimizer step");
    cmd->add_option("--epochs", rc.epochs, "max training epochs");
    cmd->add_option("--lr", rc.lr, "Adam learning rate");
    cmd->add_option("--combine-mode", rc.combine_mode, "none|sum|concat");
    cmd->add_flag("--use-topic,!--no-use-topic", rc.use_topic, "add topic embeddings");
    cmd->add_option("--encoder", rc.encoder, "bag|precomputed");
    cmd->add_option("--embeddings", rc.embeddings, "embedding file (precomputed encoder)");
    cmd->add_option("--dim", rc.d, "utterance representation dim");
    cmd->add_option("--hidden", rc.h, "recurrent hidden dim (-1 = dim)");
  };

  auto* stats = app.add_subcommand("stats", "corpus summary table");
  stats->add_option("--data", rc.data, "corpus directory");
  add_common(stats);

  auto* preprocess = app.add_subcommand("preprocess", "relabel turns and preview chunking");
  preprocess->add_option("--data", rc.data, "corpus directory");
  preprocess->add_option("--chunk-size", rc.chunk_size, "chunk length for the preview");
  add_common(preprocess);

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--data", rc.data, "corpus directory");
  add_train_flags(train);
  add_common(train);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  eval->add_option("--data", rc.data, "corpus directory");
  eval->add_option("--checkpoint", rc.checkpoint, "checkpoint file");
  eval->add_option("--split", rc.split, "train|val|test");
  eval->add_option("--embeddings", rc.embeddings, "embedding file (precomputed encoder)");
  eval->add_option("--chunk-size", rc.chunk_size, "accepted for config parity; unused by eval");
  add_common(eval);

  auto* ablate = app.add_subcommand("ablate", "combine-mode / topic ablation grid");
  ablate->add_option("--data", rc.data, "corpus directory");
  add_train_flags(ablate);
  add_common(ablate);

  auto* sweep = app.add_subcommand("sweep", "train at several chunk sizes");
  sweep->add_option("--data", rc.data, "corpus directory");
  sweep->add_option("--sizes", rc.sizes, "chunk sizes, e.g. 4,8,16")->delimiter(',');
  add_train_flags(sweep);
  add_common(sweep);

  auto* synth = app.add_subcommand("synth", "emit a synthetic corpus");
  synth->add_option("--rule", rc.rule, "content_only|turn_dependent");
  synth->add_option("--train-convs", rc.train_convs, "train conversations");
  synth->add_option("--val-convs", rc.val_convs, "val conversations");
  synth->add_option("--test-convs", rc.test_convs, "test conversations");
  synth->add_option("--min-len", rc.min_len, "min conversation length");
  synth->add_option("--max-len", rc.max_len, "max conversation length");
  synth->add_option("--vocab", rc.vocab_size, "cue vocabulary size");
  synth->add_option("--classes", rc.num_classes, "number of labels");
  add_common(synth);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }

  CLI::App* active = app.get_subcommands().front();
  rc.command = active->get_name();

  try {
    // Re-resolve in precedence order: defaults, then the config file, then
    // explicit flags. rc currently holds defaults-or-flag values, so every
    // field whose flag was not given on this command falls back to the file.
    if (!config_file.empty()) {
      RunConfig from_file;
      from_file.command = rc.command;
      apply_config_file(from_file, config_file);
      auto overlay = [&](const char* flag, auto member) {
        auto* opt = active->get_option_no_throw(flag);
        if (!opt || opt->count() == 0) rc.*member = from_file.*member;
      };
      overlay("--data", &RunConfig::data);
      overlay("--out", &RunConfig::out);
      overlay("--seed", &RunConfig::seed);
      overlay("--chunk-size", &RunConfig::chunk_size);
      overlay("--batch-size", &RunConfig::batch_size);
      overlay("--epochs", &RunConfig::epochs);
      overlay("--lr", &RunConfig::lr);
      overlay("--combine-mode", &RunConfig::combine_mode);
      overlay("--use-topic", &RunConfig::use_topic);
      overlay("--encoder", &RunConfig::encoder);
      overlay("--embeddings", &RunConfig::embeddings);
      overlay("--dim", &RunConfig::d);
      overlay("--hidden", &RunConfig::h);
      overlay("--checkpoint", &RunConfig::checkpoint);
      overlay("--split", &RunConfig::split);
      overlay("--sizes", &RunConfig::sizes);
      overlay("--rule", &RunConfig::rule);
      overlay("--train-convs", &RunConfig::train_convs);
      overlay("--val-convs", &RunConfig::val_convs);
      overlay("--test-convs", &RunConfig::test_convs);
      overlay("--min-len", &RunConfig::min_len);
      overlay("--max-len", &RunConfig::max_len);
      overlay("--vocab", &RunConfig::vocab_size);
      overlay("--classes", &RunConfig::num_classes);
    }

    // Validate everything up front; nothing is written before this passes.
    if (rc.command != "synth") require_dir(rc.data, "data");
    if (rc.command != "stats" && rc.out.empty())
      throw usage_error("--out is required for " + rc.command);
    if (rc.command == "eval") require_file(rc.checkpoint, "checkpoint");
    if (rc.command == "eval" && rc.split != "train" && rc.split != "val" && rc.split != "test")
      throw usage_error("--split must be train, val or test");
    const bool wants_embeddings =
        (rc.command == "train" || rc.command == "ablate" || rc.command == "sweep") &&
        rc.encoder == "precomputed";
    if (wants_embeddings) require_file(rc.embeddings, "embeddings");
    if (rc.command == "train" || rc.command == "ablate" || rc.command == "sweep") {
      turnwise::combine_mode_from_string(rc.combine_mode);
      turnwise::encoder_backend_from_string(rc.encoder);
      turnwise::TrainConfig probe = make_train_config(rc);
      turnwise::validate(probe);
    }
    if (rc.command == "sweep" && rc.sizes.empty())
      throw usage_error("--sizes is required for sweep");
    if (rc.command == "synth") turnwise::synthetic_rule_from_string(rc.rule);
  } catch (const usage_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (rc.command == "stats") return cmd_stats(rc);
    if (rc.command == "preprocess") return cmd_preprocess(rc);
    if (rc.command == "train") return cmd_train(rc);
    if (rc.command == "eval") return cmd_eval(rc);
    if (rc.command == "ablate") return cmd_ablate(rc);
    if (rc.command == "sweep") return cmd_sweep(rc);
    if (rc.command == "synth") return cmd_synth(rc);
    std::cerr << "error: unknown command\n";
    return 2;
  } catch (const usage_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
