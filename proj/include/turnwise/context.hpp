// SPDX-License-Identifier: Apache-2.0
//
// Conversation-level context modeling: a gated recurrent unit cell, a
// bidirectional encoder over the utterance sequence, the per-utterance
// classifier, and the assembled model.
//
// Cell equations, with x the input and h' the previous state:
//   z  = sigmoid(W_z x + U_z h' + b_z)
//   r  = sigmoid(W_r x + U_r h' + b_r)
//   hc = tanh(W_h x + U_h (r * h') + b_h)
//   h  = (1 - z) * h' + z * hc
//
// Pad positions are gated out by a mask: the recurrent state is carried
// through unchanged and no cell is evaluated there, so padded and unpadded
// runs of the same conversation are bitwise identical on real positions.

#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "turnwise/autodiff.hpp"
#include "turnwise/corpus.hpp"
#include "turnwise/encoder.hpp"
#include "turnwise/rng.hpp"
#include "turnwise/turns.hpp"

namespace turnwise {

template <typename Real>
struct GruCellParams {
  Parameter<Real> W_z, W_r, W_h;  // [h x d_in]
  Parameter<Real> U_z, U_r, U_h;  // [h x h]
  Parameter<Real> b_z, b_r, b_h;  // [h]

  GruCellParams() = default;

  // Weights are uniform in +-1/sqrt(fan-in); biases start at zero. Draws are
  // consumed in a fixed order (W_z, W_r, W_h, U_z, U_r, U_h) so a given seed
  // always produces the same cell.
  GruCellParams(const std::string& prefix, int d_in, int h, Rng& rng)
      : W_z(prefix + ".W_z", Shape{h, d_in}),
        W_r(prefix + ".W_r", Shape{h, d_in}),
        W_h(prefix + ".W_h", Shape{h, d_in}),
        U_z(prefix + ".U_z", Shape{h, h}),
        U_r(prefix + ".U_r", Shape{h, h}),
        U_h(prefix + ".U_h", Shape{h, h}),
        b_z(prefix + ".b_z", Shape{h}),
        b_r(prefix + ".b_r", Shape{h}),
        b_h(prefix + ".b_h", Shape{h}) {
    const double wb = 1.0 / std::sqrt(double(d_in));
    const double ub = 1.0 / std::sqrt(double(h));
    for (auto* p : {&W_z, &W_r, &W_h})
      for (auto& v : p->tensor.value()) v = Real(rng.next_uniform(-wb, wb));
    for (auto* p : {&U_z, &U_r, &U_h})
      for (auto& v : p->tensor.value()) v = Real(rng.next_uniform(-ub, ub));
  }

  int input_dim() const { return W_z.tensor.dim(1); }
  int hidden_dim() const { return W_z.tensor.dim(0); }

  std::vector<Parameter<Real>*> parameters() {
    return {&W_z, &W_r, &W_h, &U_z, &U_r, &U_h, &b_z, &b_r, &b_h};
  }
};

template <typename Real>
Tensor<Real> gru_cell(const GruCellParams<Real>& p, const Tensor<Real>& x,
                      const Tensor<Real>& h_prev) {
  const int h = p.hidden_dim();
  if (x.rank() != 1 || x.dim(0) != p.input_dim())
    throw shape_error("gru_cell: input shape " + shape_str(x.shape()) +
                      " does not match cell input dim " + std::to_string(p.input_dim()));
  if (h_prev.rank() != 1 || h_prev.dim(0) != h)
    throw shape_error("gru_cell: state shape " + shape_str(h_prev.shape()) +
                      " does not match cell hidden dim " + std::to_string(h));
  auto z = sigmoid(add(add(matvec(p.W_z.tensor, x), matvec(p.U_z.tensor, h_prev)), p.b_z.tensor));
  auto r = sigmoid(add(add(matvec(p.W_r.tensor, x), matvec(p.U_r.tensor, h_prev)), p.b_r.tensor));
  auto hc = tanh(add(add(matvec(p.W_h.tensor, x), matvec(p.U_h.tensor, mul(r, h_prev))),
                     p.b_h.tensor));
  auto one_minus_z = sub(Tensor<Real>::full(Shape{h}, Real(1)), z);
  return add(mul(one_minus_z, h_prev), mul(z, hc));
}

template <typename Real>
struct BiGruParams {
  GruCellParams<Real> fwd, bwd;

  BiGruParams() = default;
  BiGruParams(int d_in, int h, Rng& rng)
      : fwd("gru.fwd", d_in, h, rng), bwd("gru.bwd", d_in, h, rng) {}

  int input_dim() const { return fwd.input_dim(); }
  int hidden_dim() const { return fwd.hidden_dim(); }
};

// Runs both directions over the sequence and concatenates the two states at
// each position, giving [2h] per position. inputs[t] is only touched where
// mask[t] is 1; elsewhere the state node is reused as-is.
template <typename Real>
std::vector<Tensor<Real>> bigru_forward(const BiGruParams<Real>& p,
                                        const std::vector<Tensor<Real>>& inputs,
                                        const std::vector<uint8_t>& mask) {
  const size_t T = inputs.size();
  if (mask.size() != T)
    throw shape_error("bigru_forward: mask length " + std::to_string(mask.size()) +
                      " != sequence length " + std::to_string(T));
  if (T == 0) throw std::invalid_argument("bigru_forward: empty sequence");
  const int h = p.hidden_dim();

  std::vector<Tensor<Real>> fwd_states(T), bwd_states(T);
  auto state = Tensor<Real>::zeros(Shape{h});
  for (size_t t = 0; t < T; ++t) {
    if (mask[t]) state = gru_cell(p.fwd, inputs[t], state);
    fwd_states[t] = state;
  }
  state = Tensor<Real>::zeros(Shape{h});
  for (size_t i = T; i-- > 0;) {
    if (mask[i]) state = gru_cell(p.bwd, inputs[i], state);
    bwd_states[i] = state;
  }

  std::vector<Tensor<Real>> out(T);
  for (size_t t = 0; t < T; ++t) out[t] = concat(fwd_states[t], bwd_states[t]);
  return out;
}

template <typename Real>
struct ClassifierParams {
  Parameter<Real> weight;  // [K x 2h]
  Parameter<Real> bias;    // [K]

  ClassifierParams() = default;
  ClassifierParams(int num_classes, int state_dim, Rng& rng)
      : weight("classifier.weight", Shape{num_classes, state_dim}),
        bias("classifier.bias", Shape{num_classes}) {
    const double bound = 1.0 / std::sqrt(double(state_dim));
    for (auto& v : weight.tensor.value()) v = Real(rng.next_uniform(-bound, bound));
  }

  int num_classes() const { return weight.tensor.dim(0); }
};

template <typename Real>
Tensor<Real> classify(const ClassifierParams<Real>& p, const Tensor<Real>& state) {
  return add(matvec(p.weight.tensor, state), p.bias.tensor);
}

// Lowest index wins ties, so predictions are deterministic.
template <typename Real>
int argmax(const std::vector<Real>& v) {
  if (v.empty()) throw std::invalid_argument("argmax: empty vector");
  size_t best = 0;
  for (size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return int(best);
}

struct ModelConfig {
  int d = 64;               // utterance representation dim
  int h = 64;               // recurrent hidden dim per direction
  int num_classes = 0;
  CombineMode combine = CombineMode::Sum;
  bool use_topic = false;
  EncoderBackend encoder = EncoderBackend::Bag;
  int vocab_size = 0;       // bag backend only
  int num_topics = 0;       // topic table rows when use_topic

  bool operator==(const ModelConfig&) const = default;
};

inline void validate(const ModelConfig& cfg) {
  if (cfg.d <= 0) throw std::invalid_argument("model config: d must be positive");
  if (cfg.h <= 0) throw std::invalid_argument("model config: h must be positive");
  if (cfg.num_classes <= 0) throw std::invalid_argument("model config: num_classes must be positive");
  if (cfg.encoder == EncoderBackend::Bag && cfg.vocab_size < 2)
    throw std::invalid_argument("model config: bag encoder needs vocab_size >= 2");
  if (cfg.use_topic && cfg.num_topics <= 0)
    throw std::invalid_argument("model config: use_topic needs num_topics > 0");
}

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  return nlohmann::json{{"d", cfg.d},
                        {"h", cfg.h},
                        {"num_classes", cfg.num_classes},
                        {"combine", to_string(cfg.combine)},
                        {"use_topic", cfg.use_topic},
                        {"encoder", to_string(cfg.encoder)},
                        {"vocab_size", cfg.vocab_size},
                        {"num_topics", cfg.num_topics}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.d = j.at("d").get<int>();
  cfg.h = j.at("h").get<int>();
  cfg.num_classes = j.at("num_classes").get<int>();
  cfg.combine = combine_mode_from_string(j.at("combine").get<std::string>());
  cfg.use_topic = j.at("use_topic").get<bool>();
  cfg.encoder = encoder_backend_from_string(j.at("encoder").get<std::string>());
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.num_topics = j.at("num_topics").get<int>();
  return cfg;
}

// One conversation (or chunk of one) prepared for the model. Pad positions
// have mask 0 and the ignore label; their token/turn entries are never read.
struct SequenceInput {
  std::vector<std::vector<int>> token_ids;  // bag backend
  std::vector<std::string> utterance_ids;   // precomputed backend
  std::vector<int> turn_bits;
  std::vector<uint8_t> mask;
  std::vector<int> labels;
  std::optional<int> topic;

  size_t length() const { return mask.size(); }
};

inline SequenceInput make_sequence_input(const Conversation& conv, const Vocab& token_vocab) {
  SequenceInput s;
  const auto bits = speaker_turn_bits(conv.utterances);
  for (size_t t = 0; t < conv.utterances.size(); ++t) {
    const auto& u = conv.utterances[t];
    s.token_ids.push_back(utterance_token_ids(u, token_vocab));
    s.utterance_ids.push_back(u.utterance_id);
    s.turn_bits.push_back(bits[t]);
    s.mask.push_back(1);
    s.labels.push_back(u.da_label);
  }
  s.topic = conv.topic;
  return s;
}

inline void pad_sequence_input(SequenceInput& s, size_t target_len) {
  while (s.length() < target_len) {
    s.token_ids.push_back({kPadTokenIndex});
    s.utterance_ids.push_back("");
    s.turn_bits.push_back(0);
    s.mask.push_back(0);
    s.labels.push_back(kIgnoreLabel);
  }
}

template <typename Real>
struct DialogueActModel {
  ModelConfig cfg;
  BagEncoderParams<Real> bag;       // engaged when encoder == Bag
  TurnEmbeddingTable<Real> turn;    // engaged when combine != None
  ConcatProjection<Real> proj;      // engaged when combine == Concat
  TopicEmbeddingTable<Real> topic;  // engaged when use_topic
  BiGruParams<Real> gru;
  ClassifierParams<Real> classifier;

  // Build with deterministic initialization. The turn/topic tables and the
  // concat projection are initialized without consuming any random draws, so
  // for a fixed seed every combine mode shares bitwise-identical encoder,
  // recurrent and classifier weights.
  static DialogueActModel build(const ModelConfig& cfg, uint64_t seed) {
    validate(cfg);
    DialogueActModel m;
    m.cfg = cfg;
    Rng rng(derive_seed(seed, 0));
    if (cfg.encoder == EncoderBackend::Bag)
      m.bag = BagEncoderParams<Real>(cfg.vocab_size, cfg.d, rng);
    if (cfg.combine != CombineMode::None) m.turn = TurnEmbeddingTable<Real>(cfg.d);
    if (cfg.combine == CombineMode::Concat) m.proj = ConcatProjection<Real>(cfg.d);
    if (cfg.use_topic) m.topic = TopicEmbeddingTable<Real>(cfg.num_topics, cfg.d);
    m.gru = BiGruParams<Real>(cfg.d, cfg.h, rng);
    m.classifier = ClassifierParams<Real>(cfg.num_classes, 2 * cfg.h, rng);
    return m;
  }

  // Stable order, unique names; the checkpoint format keys records by these.
  std::vector<Parameter<Real>*> parameters() {
    std::vector<Parameter<Real>*> out;
    if (cfg.encoder == EncoderBackend::Bag) out.push_back(&bag.word_table);
    if (cfg.combine != CombineMode::None) out.push_back(&turn.table);
    if (cfg.combine == CombineMode::Concat) {
      out.push_back(&proj.weight);
      out.push_back(&proj.bias);
    }
    if (cfg.use_topic) out.push_back(&topic.table);
    for (auto* p : gru.fwd.parameters()) out.push_back(p);
    for (auto* p : gru.bwd.parameters()) out.push_back(p);
    out.push_back(&classifier.weight);
    out.push_back(&classifier.bias);
    return out;
  }

  int64_t num_parameters() {
    int64_t n = 0;
    for (auto* p : parameters()) n += p->tensor.numel();
    return n;
  }

  Tensor<Real> encode(const SequenceInput& s, size_t t, const EmbeddingFile* emb) const {
    if (cfg.encoder == EncoderBackend::Bag) return encode_bag(bag, s.token_ids.at(t));
    if (emb == nullptr)
      throw std::invalid_argument("precomputed encoder backend needs an embedding file");
    auto e = encode_precomputed<Real>(*emb, s.utterance_ids.at(t));
    if (e.dim(0) != cfg.d)
      throw shape_error("embedding dim " + std::to_string(e.dim(0)) +
                        " does not match model d=" + std::to_string(cfg.d));
    return e;
  }

  Tensor<Real> combine_input(const SequenceInput& s, size_t t, const EmbeddingFile* emb) const {
    auto e = encode(s, t, emb);
    Tensor<Real> x = e;
    if (cfg.combine == CombineMode::Sum)
      x = combine_sum(e, turn.lookup(s.turn_bits.at(t)));
    else if (cfg.combine == CombineMode::Concat)
      x = combine_concat(proj, e, turn.lookup(s.turn_bits.at(t)));
    if (cfg.use_topic && s.topic) x = add_topic(x, topic.lookup(*s.topic));
    return x;
  }
};

// Full forward pass over one sequence: logits [T x K], pads included as rows
// (their labels are the ignore sentinel, so they never reach the loss).
template <typename Real>
Tensor<Real> model_forward(const DialogueActModel<Real>& m, const SequenceInput& s,
                           const EmbeddingFile* emb = nullptr) {
  const size_t T = s.length();
  if (T == 0) throw std::invalid_argument("model_forward: empty sequence");
  if (s.token_ids.size() != T || s.utterance_ids.size() != T || s.turn_bits.size() != T ||
      s.labels.size() != T)
    throw shape_error("model_forward: inconsistent sequence field lengths");

  auto pad_input = Tensor<Real>::zeros(Shape{m.cfg.d});
  std::vector<Tensor<Real>> inputs(T);
  for (size_t t = 0; t < T; ++t)
    inputs[t] = s.mask[t] ? m.combine_input(s, t, emb) : pad_input;

  auto states = bigru_forward(m.gru, inputs, s.mask);
  std::vector<Tensor<Real>> rows(T);
  for (size_t t = 0; t < T; ++t) rows[t] = classify(m.classifier, states[t]);
  return stack_rows(rows);
}

}  // namespace turnwise
