// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metrics, synthetic diagnostic corpora, the ablation grid and
// the chunk-size sweep.
//
// Evaluation always runs on whole conversations. The training-time chunk
// size therefore cannot touch any number reported here; the sweep exists to
// demonstrate exactly that.

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "turnwise/context.hpp"
#include "turnwise/corpus.hpp"
#include "turnwise/encoder.hpp"
#include "turnwise/rng.hpp"
#include "turnwise/training.hpp"
#include "turnwise/turns.hpp"

namespace turnwise {

inline double accuracy(const std::vector<int>& preds, const std::vector<int>& golds) {
  if (preds.size() != golds.size())
    throw std::invalid_argument("accuracy: " + std::to_string(preds.size()) +
                                " predictions vs " + std::to_string(golds.size()) + " golds");
  int64_t correct = 0, total = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    if (golds[i] == kIgnoreLabel) continue;
    ++total;
    if (preds[i] == golds[i]) ++correct;
  }
  return total > 0 ? double(correct) / double(total) : 0.0;
}

inline uint64_t config_fingerprint(const ModelConfig& cfg) {
  return fnv1a64(model_config_to_json(cfg).dump());
}

struct EvalReport {
  double accuracy = 0;
  int64_t total = 0;
  int64_t correct = 0;
  std::vector<std::vector<int64_t>> confusion;  // [gold][pred]
  std::vector<double> precision, recall;        // per class; 0 when undefined
  uint64_t config_fingerprint = 0;
};

template <typename Real>
EvalReport evaluate_split(const DialogueActModel<Real>& model,
                          const std::vector<Conversation>& convs, const Vocab& token_vocab,
                          const EmbeddingFile* emb = nullptr) {
  const int K = model.cfg.num_classes;
  EvalReport rep;
  rep.confusion.assign(size_t(K), std::vector<int64_t>(size_t(K), 0));
  rep.config_fingerprint = turnwise::config_fingerprint(model.cfg);
  for (const auto& c : convs) {
    auto input = make_sequence_input(c, token_vocab);
    auto preds = predict_sequence(model, input, emb);
    for (size_t t = 0; t < input.length(); ++t) {
      const int gold = input.labels[t];
      if (gold == kIgnoreLabel) continue;
      ++rep.total;
      if (preds[t] == gold) ++rep.correct;
      rep.confusion[size_t(gold)][size_t(preds[t])]++;
    }
  }
  rep.accuracy = rep.total > 0 ? double(rep.correct) / double(rep.total) : 0.0;
  rep.precision.assign(size_t(K), 0.0);
  rep.recall.assign(size_t(K), 0.0);
  for (int k = 0; k < K; ++k) {
    int64_t pred_k = 0, gold_k = 0;
    for (int g = 0; g < K; ++g) pred_k += rep.confusion[size_t(g)][size_t(k)];
    for (int p = 0; p < K; ++p) gold_k += rep.confusion[size_t(k)][size_t(p)];
    const int64_t tp = rep.confusion[size_t(k)][size_t(k)];
    if (pred_k > 0) rep.precision[size_t(k)] = double(tp) / double(pred_k);
    if (gold_k > 0) rep.recall[size_t(k)] = double(tp) / double(gold_k);
  }
  return rep;
}

enum class SyntheticRule { ContentOnly, TurnDependent };

inline std::string to_string(SyntheticRule r) {
  switch (r) {
    case SyntheticRule::ContentOnly: return "content_only";
    case SyntheticRule::TurnDependent: return "turn_dependent";
  }
  throw std::invalid_argument("unknown synthetic rule");
}

inline SyntheticRule synthetic_rule_from_string(const std::string& s) {
  if (s == "content_only") return SyntheticRule::ContentOnly;
  if (s == "turn_dependent") return SyntheticRule::TurnDependent;
  throw std::invalid_argument("unknown synthetic rule '" + s +
                              "' (expected content_only|turn_dependent)");
}

struct SyntheticSpec {
  int train_convs = 200;
  int val_convs = 40;
  int test_convs = 40;
  int min_len = 12;
  int max_len = 20;
  int vocab_size = 50;
  int num_classes = 4;
  SyntheticRule rule = SyntheticRule::ContentOnly;
  uint64_t seed = 0;
};

inline void validate(const SyntheticSpec& sp) {
  if (sp.train_convs < 0 || sp.val_convs < 0 || sp.test_convs < 0)
    throw std::invalid_argument("synthetic spec: split sizes must be >= 0");
  if (sp.min_len <= 0 || sp.max_len < sp.min_len)
    throw std::invalid_argument("synthetic spec: need 0 < min_len <= max_len");
  if (sp.vocab_size <= 0) throw std::invalid_argument("synthetic spec: vocab_size must be positive");
  if (sp.num_classes <= 1)
    throw std::invalid_argument("synthetic spec: num_classes must be at least 2");
  if (sp.rule == SyntheticRule::TurnDependent && sp.num_classes % 2 != 0)
    throw std::invalid_argument("synthetic spec: turn_dependent needs an even num_classes");
}

namespace detail {

// Dyadic conversations between speakers A and B; the speaker flips with
// probability one half at each step.
//
//   content_only   cue token w<c> with c uniform; label L<c mod K>
//   turn_dependent cue encodes only a class pair p; the label's low bit is
//                  the speaker-change indicator (0 at position 0), so text
//                  alone caps near chance on the pair halves
inline Conversation synth_conversation(const SyntheticSpec& sp, const std::string& conv_id,
                                       Rng& rng) {
  const int T = int(rng.next_int(int64_t(sp.min_len), int64_t(sp.max_len)));
  Conversation conv;
  conv.conversation_id = conv_id;
  std::string speaker = "A";
  int prev_change = 0;
  for (int t = 0; t < T; ++t) {
    if (t > 0 && rng.next_bool(0.5)) {
      speaker = (speaker == "A") ? "B" : "A";
      prev_change = 1;
    } else if (t > 0) {
      prev_change = 0;
    }
    Utterance u;
    u.utterance_id = conv_id + "_u" + std::to_string(t);
    u.speaker = speaker;
    int label = 0;
    if (sp.rule == SyntheticRule::ContentOnly) {
      const int cue = int(rng.next_below(uint64_t(sp.vocab_size)));
      label = cue % sp.num_classes;
      u.tokens = {"w" + std::to_string(cue)};
    } else {
      const int pairs = sp.num_classes / 2;
      const int pair = int(rng.next_below(uint64_t(pairs)));
      const int change = (t == 0) ? 0 : prev_change;
      label = 2 * pair + change;
      // Map the pair cue into the token space without revealing the change bit.
      u.tokens = {"w" + std::to_string(pair % sp.vocab_size)};
    }
    u.da_label = label;  // re-indexed below once the vocab exists
    conv.utterances.push_back(std::move(u));
  }
  return conv;
}

}  // namespace detail

// Build a synthetic corpus. Each split draws from its own stream derived
// from the seed, so changing one split's size leaves the others untouched.
inline Corpus generate_synthetic(const SyntheticSpec& sp) {
  validate(sp);
  Corpus corpus;
  for (int k = 0; k < sp.num_classes; ++k) corpus.label_vocab.add("L" + std::to_string(k));

  struct SplitPlan {
    const char* prefix;
    int count;
    uint64_t stream;
    std::vector<Conversation>* out;
  };
  SplitPlan plans[] = {{"tr", sp.train_convs, 101, &corpus.train},
                       {"va", sp.val_convs, 102, &corpus.val},
                       {"te", sp.test_convs, 103, &corpus.test}};
  std::set<std::string> tokens;
  for (auto& plan : plans) {
    Rng rng(derive_seed(sp.seed, plan.stream));
    for (int n = 0; n < plan.count; ++n) {
      auto conv =
          detail::synth_conversation(sp, std::string(plan.prefix) + std::to_string(n), rng);
      if (plan.out == &corpus.train)
        for (const auto& u : conv.utterances)
          for (const auto& t : u.tokens) tokens.insert(t);
      plan.out->push_back(std::move(conv));
    }
  }
  corpus.token_vocab.add(kPadToken);
  corpus.token_vocab.add(kUnkToken);
  for (const auto& t : tokens) corpus.token_vocab.add(t);
  return corpus;
}

struct AblationRow {
  CombineMode combine = CombineMode::None;
  bool use_topic = false;
  double val_acc = 0;
  double test_acc = 0;
};

// Train one model per grid cell from a shared seed and report test accuracy
// of each cell's best-validation weights.
template <typename Real>
std::vector<AblationRow> run_ablation(const Corpus& corpus, const TrainConfig& base,
                                      const EmbeddingFile* emb = nullptr,
                                      std::ostream* log = nullptr) {
  std::vector<AblationRow> rows;
  std::vector<bool> topic_options = {false};
  if (corpus.has_topics()) topic_options.push_back(true);
  for (CombineMode combine : {CombineMode::None, CombineMode::Sum, CombineMode::Concat}) {
    for (bool use_topic : topic_options) {
      TrainConfig tc = base;
      tc.combine = combine;
      tc.use_topic = use_topic;
      if (log)
        *log << "ablation cell combine=" << to_string(combine)
             << " use_topic=" << (use_topic ? "true" : "false") << "\n";
      auto result = train<Real>(corpus, tc, emb, log);
      AblationRow row;
      row.combine = combine;
      row.use_topic = use_topic;
      row.val_acc = split_accuracy(result.model, corpus.val, corpus.token_vocab, emb);
      row.test_acc = split_accuracy(result.model, corpus.test, corpus.token_vocab, emb);
      rows.push_back(row);
    }
  }
  return rows;
}

inline void write_ablation_csv(const std::vector<AblationRow>& rows,
                               const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "combine,use_topic,val_acc,test_acc\n" << std::setprecision(10);
  for (const auto& r : rows)
    out << to_string(r.combine) << ',' << (r.use_topic ? "true" : "false") << ',' << r.val_acc
        << ',' << r.test_acc << '\n';
}

inline void print_ablation(const std::vector<AblationRow>& rows, std::ostream& out) {
  out << std::left << std::setw(10) << "combine" << std::setw(11) << "use_topic" << std::setw(12)
      << "val_acc" << std::setw(12) << "test_acc" << "\n";
  out << std::setprecision(4) << std::fixed;
  for (const auto& r : rows)
    out << std::setw(10) << to_string(r.combine) << std::setw(11)
        << (r.use_topic ? "true" : "false") << std::setw(12) << r.val_acc << std::setw(12)
        << r.test_acc << "\n";
  out.unsetf(std::ios::fixed);
}

struct SweepRow {
  int chunk_size = 0;
  double acc = 0;  // test accuracy of that run's selected model
};

// Train once per distinct chunk size. Duplicates are dropped with a warning;
// order of first appearance is kept.
template <typename Real>
std::vector<SweepRow> chunk_size_sweep(const Corpus& corpus, const TrainConfig& base,
                                       const std::vector<int>& sizes,
                                       const EmbeddingFile* emb = nullptr,
                                       std::ostream* log = nullptr) {
  if (sizes.empty()) throw std::invalid_argument("chunk_size_sweep: no sizes given");
  std::vector<int> unique_sizes;
  for (int s : sizes) {
    if (std::find(unique_sizes.begin(), unique_sizes.end(), s) != unique_sizes.end()) {
      if (log) *log << "warning: duplicate chunk size " << s << " ignored\n";
      continue;
    }
    unique_sizes.push_back(s);
  }
  std::vector<SweepRow> rows;
  for (int s : unique_sizes) {
    TrainConfig tc = base;
    tc.chunk_size = s;
    if (log) *log << "sweep chunk_size=" << s << "\n";
    auto result = train<Real>(corpus, tc, emb, log);
    SweepRow row;
    row.chunk_size = s;
    row.acc = split_accuracy(result.model, corpus.test, corpus.token_vocab, emb);
    rows.push_back(row);
  }
  return rows;
}

inline void write_sweep_csv(const std::vector<SweepRow>& rows,
                            const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "chunk_size,acc\n" << std::setprecision(10);
  for (const auto& r : rows) out << r.chunk_size << ',' << r.acc << '\n';
}

}  // namespace turnwise
