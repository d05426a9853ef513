// SPDX-License-Identifier: Apache-2.0
//
// Training: chunk slicing, the Adam optimizer, the epoch loop with best-val
// model selection, and checkpoint serialization.
//
// Chunking is a training-time memory device only. Turn tags are computed on
// the full conversation first and then sliced, so a chunk that starts
// mid-turn keeps the tag its positions had in context; evaluation always
// runs on whole conversations.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "turnwise/autodiff.hpp"
#include "turnwise/context.hpp"
#include "turnwise/corpus.hpp"
#include "turnwise/encoder.hpp"
#include "turnwise/errors.hpp"
#include "turnwise/rng.hpp"
#include "turnwise/turns.hpp"

namespace turnwise {

struct Chunk {
  const Conversation* conv = nullptr;
  int start = 0;
  int length = 0;
  std::vector<int> turn_bits;  // tags of the covered positions, from the full conversation
  std::optional<int> topic;
};

inline std::vector<Chunk> slice_chunks(const std::vector<Conversation>& convs, int chunk_size) {
  if (chunk_size <= 0)
    throw std::invalid_argument("chunk_size must be positive, got " + std::to_string(chunk_size));
  std::vector<Chunk> chunks;
  for (const auto& c : convs) {
    const auto bits = speaker_turn_bits(c.utterances);
    for (int start = 0; start < c.length(); start += chunk_size) {
      Chunk ch;
      ch.conv = &c;
      ch.start = start;
      ch.length = std::min(chunk_size, c.length() - start);
      ch.turn_bits.assign(bits.begin() + start, bits.begin() + start + ch.length);
      ch.topic = c.topic;
      chunks.push_back(std::move(ch));
    }
  }
  return chunks;
}

inline SequenceInput chunk_sequence_input(const Chunk& ch, const Vocab& token_vocab) {
  SequenceInput s;
  for (int i = 0; i < ch.length; ++i) {
    const auto& u = ch.conv->utterances[size_t(ch.start + i)];
    s.token_ids.push_back(utterance_token_ids(u, token_vocab));
    s.utterance_ids.push_back(u.utterance_id);
    s.turn_bits.push_back(ch.turn_bits[size_t(i)]);
    s.mask.push_back(1);
    s.labels.push_back(u.da_label);
  }
  s.topic = ch.topic;
  return s;
}

struct TrainConfig {
  int chunk_size = 128;
  int batch_size = 8;
  double lr = 1e-4;
  int max_epochs = 50;
  uint64_t seed = 0;
  CombineMode combine = CombineMode::Sum;
  bool use_topic = false;
  EncoderBackend encoder = EncoderBackend::Bag;
  int d = 64;
  int h = -1;  // -1 means "same as d"
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  int hidden_dim() const { return h < 0 ? d : h; }
};

inline void validate(const TrainConfig& tc) {
  if (tc.chunk_size <= 0) throw std::invalid_argument("train config: chunk_size must be positive");
  if (tc.batch_size <= 0) throw std::invalid_argument("train config: batch_size must be positive");
  if (!(tc.lr > 0)) throw std::invalid_argument("train config: lr must be positive");
  if (tc.max_epochs < 0) throw std::invalid_argument("train config: max_epochs must be >= 0");
  if (tc.d <= 0) throw std::invalid_argument("train config: d must be positive");
  if (tc.h == 0 || tc.h < -1) throw std::invalid_argument("train config: h must be positive or -1");
  if (!(tc.beta1 >= 0 && tc.beta1 < 1) || !(tc.beta2 >= 0 && tc.beta2 < 1))
    throw std::invalid_argument("train config: betas must lie in [0, 1)");
  if (!(tc.eps > 0)) throw std::invalid_argument("train config: eps must be positive");
}

// Adam with bias correction; epsilon sits outside the square root. Frozen
// rows have their gradient zeroed before the moment update, so their moments
// stay at zero and the row never moves.
template <typename Real>
struct AdamState {
  double lr, beta1, beta2, eps;
  int64_t t = 0;
  std::vector<std::vector<Real>> m, v;

  AdamState(const std::vector<Parameter<Real>*>& params, double lr_, double beta1_ = 0.9,
            double beta2_ = 0.999, double eps_ = 1e-8)
      : lr(lr_), beta1(beta1_), beta2(beta2_), eps(eps_) {
    for (auto* p : params) {
      m.emplace_back(size_t(p->tensor.numel()), Real(0));
      v.emplace_back(size_t(p->tensor.numel()), Real(0));
    }
  }
};

template <typename Real>
void adam_step(const std::vector<Parameter<Real>*>& params, AdamState<Real>& state) {
  if (params.size() != state.m.size())
    throw std::invalid_argument("adam_step: parameter list does not match optimizer state");
  ++state.t;
  const Real bc1 = Real(1.0 - std::pow(state.beta1, double(state.t)));
  const Real bc2 = Real(1.0 - std::pow(state.beta2, double(state.t)));
  const Real b1 = Real(state.beta1), b2 = Real(state.beta2);
  const Real lr = Real(state.lr), eps = Real(state.eps);
  for (size_t k = 0; k < params.size(); ++k) {
    Parameter<Real>& p = *params[k];
    auto& grad = p.tensor.grad_buffer();
    if (!p.frozen_rows.empty() && p.tensor.rank() >= 1) {
      const int64_t row_sz = p.tensor.numel() / p.tensor.dim(0);
      for (int row : p.frozen_rows)
        std::fill_n(grad.begin() + int64_t(row) * row_sz, row_sz, Real(0));
    }
    auto& value = p.tensor.value();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (size_t i = 0; i < value.size(); ++i) {
      const Real g = grad[i];
      if (!std::isfinite(double(g)))
        throw numeric_error("non-finite gradient in parameter '" + p.name + "' at index " +
                            std::to_string(i));
      m[i] = b1 * m[i] + (Real(1) - b1) * g;
      v[i] = b2 * v[i] + (Real(1) - b2) * g * g;
      const Real m_hat = m[i] / bc1;
      const Real v_hat = v[i] / bc2;
      value[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
      if (!std::isfinite(double(value[i])))
        throw numeric_error("non-finite value in parameter '" + p.name + "' at index " +
                            std::to_string(i));
    }
  }
  zero_grads(params);
}

template <typename Real>
std::vector<std::vector<Real>> snapshot_params(const std::vector<Parameter<Real>*>& params) {
  std::vector<std::vector<Real>> snap;
  snap.reserve(params.size());
  for (auto* p : params) snap.push_back(p->tensor.value());
  return snap;
}

template <typename Real>
void restore_params(const std::vector<Parameter<Real>*>& params,
                    const std::vector<std::vector<Real>>& snap) {
  if (params.size() != snap.size())
    throw std::invalid_argument("restore_params: snapshot does not match parameter list");
  for (size_t k = 0; k < params.size(); ++k) {
    if (params[k]->tensor.value().size() != snap[k].size())
      throw std::invalid_argument("restore_params: size mismatch for '" + params[k]->name + "'");
    params[k]->tensor.value() = snap[k];
  }
}

template <typename Real>
std::vector<int> predict_sequence(const DialogueActModel<Real>& m, const SequenceInput& s,
                                  const EmbeddingFile* emb = nullptr) {
  auto logits = model_forward(m, s, emb);
  const int K = logits.dim(1);
  std::vector<int> preds(s.length());
  std::vector<Real> logit_row;
  for (size_t t = 0; t < s.length(); ++t) {
    const Real* base = logits.value().data() + t * size_t(K);
    logit_row.assign(base, base + K);
    preds[t] = argmax(logit_row);
  }
  return preds;
}

template <typename Real>
double split_accuracy(const DialogueActModel<Real>& m, const std::vector<Conversation>& convs,
                      const Vocab& token_vocab, const EmbeddingFile* emb = nullptr) {
  int64_t correct = 0, total = 0;
  for (const auto& c : convs) {
    auto input = make_sequence_input(c, token_vocab);
    auto preds = predict_sequence(m, input, emb);
    for (size_t t = 0; t < input.length(); ++t) {
      if (input.labels[t] == kIgnoreLabel) continue;
      ++total;
      if (preds[t] == input.labels[t]) ++correct;
    }
  }
  return total > 0 ? double(correct) / double(total) : 0.0;
}

struct EpochStats {
  int epoch = 0;  // 1-based
  double train_loss = 0;
  double val_acc = 0;
  double test_acc = 0;
};

template <typename Real>
struct TrainResult {
  DialogueActModel<Real> model;  // weights of the best validation epoch
  std::vector<EpochStats> history;
  int best_epoch = 0;  // 1-based; 0 when no epoch ran
  double best_val_acc = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::vector<Real>> final_weights;  // state after the last epoch
};

template <typename Real>
ModelConfig make_model_config(const Corpus& corpus, const TrainConfig& tc) {
  ModelConfig mc;
  mc.d = tc.d;
  mc.h = tc.hidden_dim();
  mc.num_classes = corpus.num_classes();
  mc.combine = tc.combine;
  mc.use_topic = tc.use_topic && corpus.has_topics();
  mc.encoder = tc.encoder;
  mc.vocab_size = corpus.token_vocab.size();
  mc.num_topics = corpus.topic_vocab.size();
  return mc;
}

// Epoch loop. Chunks are reshuffled every epoch from a stream derived from
// the seed; batches are padded to the longest chunk they contain; the batch
// loss is the mean cross entropy over all non-ignored positions in the
// batch. The returned model carries the weights of the epoch with the best
// validation accuracy (earliest epoch wins ties; with no validation data the
// final weights are kept).
template <typename Real>
TrainResult<Real> train(const Corpus& corpus, const TrainConfig& tc,
                        const EmbeddingFile* emb = nullptr, std::ostream* log = nullptr) {
  validate(tc);
  const ModelConfig mc = make_model_config<Real>(corpus, tc);

  TrainResult<Real> result;
  result.model = DialogueActModel<Real>::build(mc, tc.seed);
  auto params = result.model.parameters();
  AdamState<Real> adam(params, tc.lr, tc.beta1, tc.beta2, tc.eps);

  auto chunks = slice_chunks(corpus.train, tc.chunk_size);
  std::vector<size_t> order(chunks.size());
  std::iota(order.begin(), order.end(), size_t(0));
  Rng shuffle_rng(derive_seed(tc.seed, 1));

  auto best = snapshot_params(params);
  double best_val = -std::numeric_limits<double>::infinity();

  for (int epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0;
    int64_t loss_count = 0;
    for (size_t b = 0; b < order.size(); b += size_t(tc.batch_size)) {
      const size_t b_end = std::min(order.size(), b + size_t(tc.batch_size));
      std::vector<SequenceInput> inputs;
      size_t max_len = 0;
      for (size_t i = b; i < b_end; ++i) {
        inputs.push_back(chunk_sequence_input(chunks[order[i]], corpus.token_vocab));
        max_len = std::max(max_len, inputs.back().length());
      }
      int64_t count = 0;
      Tensor<Real> total;
      for (auto& in : inputs) {
        pad_sequence_input(in, max_len);
        auto logits = model_forward(result.model, in, emb);
        auto seq_loss = softmax_cross_entropy(logits, in.labels, kIgnoreLabel, Reduction::Sum);
        count += non_ignored_count(in.labels, kIgnoreLabel);
        total = total.node() ? add(total, seq_loss) : seq_loss;
      }
      auto batch_loss = scale(total, Real(1) / Real(count));
      const double loss_value = double(batch_loss.item());
      if (!std::isfinite(loss_value))
        throw numeric_error("non-finite training loss at epoch " + std::to_string(epoch) +
                            ", batch " + std::to_string(b / size_t(tc.batch_size)));
      backward(batch_loss);
      adam_step(params, adam);
      loss_sum += loss_value * double(count);
      loss_count += count;
    }

    EpochStats st;
    st.epoch = epoch;
    st.train_loss = loss_count > 0 ? loss_sum / double(loss_count) : 0.0;
    st.val_acc = split_accuracy(result.model, corpus.val, corpus.token_vocab, emb);
    st.test_acc = split_accuracy(result.model, corpus.test, corpus.token_vocab, emb);
    result.history.push_back(st);
    if (log)
      *log << "epoch " << epoch << " train_loss " << std::setprecision(6) << st.train_loss
           << " val_acc " << st.val_acc << " test_acc " << st.test_acc << "\n";

    if (st.val_acc > best_val) {
      best_val = st.val_acc;
      best = snapshot_params(params);
      result.best_epoch = epoch;
      result.best_val_acc = st.val_acc;
    }
  }

  result.final_weights = snapshot_params(params);
  if (corpus.val.empty() || tc.max_epochs == 0) {
    // Nothing to select on: keep whatever the loop ended with.
    result.best_epoch = tc.max_epochs;
    result.best_val_acc = std::numeric_limits<double>::quiet_NaN();
  } else {
    restore_params(params, best);
  }
  return result;
}

inline void write_metrics_csv(const std::vector<EpochStats>& history,
                              const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,train_loss,val_acc,test_acc\n";
  out << std::setprecision(10);
  for (const auto& st : history)
    out << st.epoch << ',' << st.train_loss << ',' << st.val_acc << ',' << st.test_acc << '\n';
}

// Checkpoint layout (all integers little-endian):
//   magic "TURNW1", u32 format version
//   u64 json length, config snapshot bytes (canonical JSON, sorted keys)
//   u32 parameter count, then per parameter:
//     u32 name length, name bytes, u32 rank, u32 dims..., float32 values
// Values are stored as 32-bit floats regardless of the in-memory dtype; the
// training dtype is float, so its round-trip is bitwise.
inline constexpr char kCheckpointMagic[6] = {'T', 'U', 'R', 'N', 'W', '1'};
inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw format_error("checkpoint truncated while reading " + what);
  return v;
}

}  // namespace detail

struct CheckpointMeta {
  std::vector<std::string> labels;
  std::vector<std::string> topics;
  uint64_t token_vocab_fnv = 0;
};

inline CheckpointMeta checkpoint_meta(const Corpus& corpus) {
  CheckpointMeta meta;
  meta.labels = corpus.label_vocab.names();
  meta.topics = corpus.topic_vocab.names();
  meta.token_vocab_fnv = vocab_fingerprint(corpus.token_vocab);
  return meta;
}

template <typename Real>
void save_checkpoint(DialogueActModel<Real>& model, const CheckpointMeta& meta,
                     const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kCheckpointMagic, 6);
  detail::write_pod(out, kCheckpointVersion);

  nlohmann::json j;
  j["model"] = model_config_to_json(model.cfg);
  j["labels"] = meta.labels;
  j["topics"] = meta.topics;
  j["token_vocab_fnv"] = meta.token_vocab_fnv;
  const std::string cfg = j.dump();
  detail::write_pod(out, uint64_t(cfg.size()));
  out.write(cfg.data(), std::streamsize(cfg.size()));

  auto params = model.parameters();
  detail::write_pod(out, uint32_t(params.size()));
  for (auto* p : params) {
    detail::write_pod(out, uint32_t(p->name.size()));
    out.write(p->name.data(), std::streamsize(p->name.size()));
    detail::write_pod(out, uint32_t(p->tensor.rank()));
    for (int i = 0; i < p->tensor.rank(); ++i) detail::write_pod(out, uint32_t(p->tensor.dim(i)));
    std::vector<float> values(p->tensor.value().begin(), p->tensor.value().end());
    out.write(reinterpret_cast<const char*>(values.data()),
              std::streamsize(values.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("write failure on " + path.string());
}

template <typename Real>
struct LoadedCheckpoint {
  DialogueActModel<Real> model;
  CheckpointMeta meta;
};

template <typename Real>
LoadedCheckpoint<Real> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw format_error("cannot open checkpoint " + path.string());
  char magic[6];
  if (!in.read(magic, 6) || std::memcmp(magic, kCheckpointMagic, 6) != 0)
    throw format_error(path.string() + ": bad magic, not a checkpoint");
  const auto version = detail::read_pod<uint32_t>(in, "format version");
  if (version != kCheckpointVersion)
    throw format_error(path.string() + ": unsupported checkpoint version " +
                       std::to_string(version));

  const auto cfg_len = detail::read_pod<uint64_t>(in, "config length");
  std::string cfg_str(cfg_len, '\0');
  if (!in.read(cfg_str.data(), std::streamsize(cfg_len)))
    throw format_error(path.string() + ": truncated config snapshot");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(cfg_str);
  } catch (const nlohmann::json::parse_error& e) {
    throw format_error(path.string() + ": malformed config snapshot: " + e.what());
  }

  LoadedCheckpoint<Real> loaded;
  loaded.model = DialogueActModel<Real>::build(model_config_from_json(j.at("model")), 0);
  loaded.meta.labels = j.at("labels").get<std::vector<std::string>>();
  loaded.meta.topics = j.at("topics").get<std::vector<std::string>>();
  loaded.meta.token_vocab_fnv = j.at("token_vocab_fnv").get<uint64_t>();

  auto params = loaded.model.parameters();
  const auto count = detail::read_pod<uint32_t>(in, "parameter count");
  if (count != params.size())
    throw format_error(path.string() + ": has " + std::to_string(count) +
                       " parameters, model expects " + std::to_string(params.size()));
  std::unordered_map<std::string, Parameter<Real>*> by_name;
  for (auto* p : params) by_name.emplace(p->name, p);
  for (uint32_t k = 0; k < count; ++k) {
    const auto name_len = detail::read_pod<uint32_t>(in, "parameter name length");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len))
      throw format_error(path.string() + ": truncated parameter name");
    const auto rank = detail::read_pod<uint32_t>(in, "rank");
    Shape shape;
    for (uint32_t i = 0; i < rank; ++i)
      shape.push_back(int(detail::read_pod<uint32_t>(in, "dimension")));
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw format_error(path.string() + ": unknown parameter '" + name + "'");
    Parameter<Real>* p = it->second;
    if (shape != p->tensor.shape())
      throw format_error(path.string() + ": shape mismatch for '" + name + "': stored " +
                         shape_str(shape) + ", model has " +
                         shape_str(p->tensor.shape()));
    std::vector<float> values(size_t(shape_numel(shape)));
    if (!in.read(reinterpret_cast<char*>(values.data()),
                 std::streamsize(values.size() * sizeof(float))))
      throw format_error(path.string() + ": truncated values for '" + name + "'");
    auto& value = p->tensor.value();
    for (size_t i = 0; i < values.size(); ++i) value[i] = Real(values[i]);
    by_name.erase(it);
  }
  if (!by_name.empty())
    throw format_error(path.string() + ": missing parameter '" + by_name.begin()->first + "'");
  return loaded;
}

}  // namespace turnwise
