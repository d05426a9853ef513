// SPDX-License-Identifier: Apache-2.0
//
// Speaker-turn change relabeling and the combination of utterance
// representations with turn (and optionally topic) embeddings.
//
// Absolute speaker identity is irrelevant to dialogue structure; what matters
// is whether the floor changed hands. relabel_turns collapses any speaker
// sequence to an alternating binary tag: position 0 gets 0, and the tag flips
// exactly where the speaker differs from the previous position. The two tag
// values index a learned embedding table.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "turnwise/autodiff.hpp"
#include "turnwise/corpus.hpp"

namespace turnwise {

// <0,0,1,2,3,3,1> -> <0,0,1,0,1,1,0>
template <typename Id>
std::vector<int> relabel_turns(const std::vector<Id>& speakers) {
  if (speakers.empty()) throw std::invalid_argument("relabel_turns: empty speaker sequence");
  std::vector<int> bits(speakers.size());
  bits[0] = 0;
  for (size_t i = 1; i < speakers.size(); ++i)
    bits[i] = (speakers[i] != speakers[i - 1]) ? (bits[i - 1] ^ 1) : bits[i - 1];
  return bits;
}

inline std::vector<int> speaker_turn_bits(const std::vector<Utterance>& utterances) {
  std::vector<std::string> speakers;
  speakers.reserve(utterances.size());
  for (const auto& u : utterances) speakers.push_back(u.speaker);
  return relabel_turns(speakers);
}

enum class CombineMode { None, Sum, Concat };

inline std::string to_string(CombineMode m) {
  switch (m) {
    case CombineMode::None: return "none";
    case CombineMode::Sum: return "sum";
    case CombineMode::Concat: return "concat";
  }
  throw std::invalid_argument("unknown combine mode");
}

inline CombineMode combine_mode_from_string(const std::string& s) {
  if (s == "none") return CombineMode::None;
  if (s == "sum") return CombineMode::Sum;
  if (s == "concat") return CombineMode::Concat;
  throw std::invalid_argument("unknown combine mode '" + s + "' (expected none|sum|concat)");
}

// Two rows, one per turn tag. Zero-initialized on purpose: at init the
// combined representation equals the plain utterance representation, so a
// turn-aware model starts from exactly the turn-agnostic function.
template <typename Real>
struct TurnEmbeddingTable {
  Parameter<Real> table;

  TurnEmbeddingTable() = default;
  explicit TurnEmbeddingTable(int dim) : table("turn.table", Shape{2, dim}) {}

  int dim() const { return table.tensor.dim(1); }

  Tensor<Real> lookup(int turn_bit) const {
    if (turn_bit != 0 && turn_bit != 1)
      throw std::out_of_range("turn bit must be 0 or 1, got " + std::to_string(turn_bit));
    return gather_row(table.tensor, turn_bit);
  }
};

// g(u, s) = e(u) + f(s)
template <typename Real>
Tensor<Real> combine_sum(const Tensor<Real>& utterance, const Tensor<Real>& turn) {
  return add(utterance, turn);
}

// Projection for the concatenation variant: proj [d x 2d] applied to
// [e(u); f(s)], plus bias. Initialized to [I | 0] with zero bias so that at
// init the output is again exactly e(u).
template <typename Real>
struct ConcatProjection {
  Parameter<Real> weight;
  Parameter<Real> bias;

  ConcatProjection() = default;
  explicit ConcatProjection(int dim)
      : weight("concat.weight", Shape{dim, 2 * dim}), bias("concat.bias", Shape{dim}) {
    for (int i = 0; i < dim; ++i) weight.tensor.value()[size_t(i) * (2 * dim) + i] = Real(1);
  }

  int dim() const { return weight.tensor.dim(0); }
};

template <typename Real>
Tensor<Real> combine_concat(const ConcatProjection<Real>& proj, const Tensor<Real>& utterance,
                            const Tensor<Real>& turn) {
  auto cat = concat(utterance, turn);
  return add(matvec(proj.weight.tensor, cat), proj.bias.tensor);
}

// Topic embeddings, one row per topic id. Zero-initialized for the same
// reason as the turn table.
template <typename Real>
struct TopicEmbeddingTable {
  Parameter<Real> table;

  TopicEmbeddingTable() = default;
  TopicEmbeddingTable(int num_topics, int dim) : table("topic.table", Shape{num_topics, dim}) {}

  int num_topics() const { return table.tensor.dim(0); }
  int dim() const { return table.tensor.dim(1); }

  Tensor<Real> lookup(int topic) const {
    if (topic < 0 || topic >= num_topics())
      throw std::out_of_range("topic id " + std::to_string(topic) + " out of range [0, " +
                              std::to_string(num_topics()) + ")");
    return gather_row(table.tensor, topic);
  }
};

// l(u, s, m) = g(u, s) + h(m)
template <typename Real>
Tensor<Real> add_topic(const Tensor<Real>& combined, const Tensor<Real>& topic) {
  return add(combined, topic);
}

}  // namespace turnwise
