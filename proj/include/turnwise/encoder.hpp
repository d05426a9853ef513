// SPDX-License-Identifier: Apache-2.0
//
// Utterance encoders. Two backends share one interface contract: an
// utterance goes in, a length-d representation comes out.
//
//   precomputed  fixed vectors keyed by utterance_id, loaded from disk,
//                treated as constants (no gradient flows into them)
//   bag          trainable word embeddings mean-pooled over the utterance,
//                the built-in end-to-end path
//
// Embedding files exist in a text form (first line "dim=<d>", then
// "<id>\t<f1> <f2> ...") and an equivalent binary form (magic "UEMB1",
// u32 dim, then length-prefixed id + dim float32 little-endian records).

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "turnwise/autodiff.hpp"
#include "turnwise/corpus.hpp"
#include "turnwise/errors.hpp"
#include "turnwise/rng.hpp"

namespace turnwise {

inline constexpr char kEmbeddingMagic[5] = {'U', 'E', 'M', 'B', '1'};

class EmbeddingFile {
 public:
  EmbeddingFile() = default;
  explicit EmbeddingFile(int dim) : dim_(dim) {}

  int dim() const { return dim_; }
  size_t size() const { return vectors_.size(); }
  bool contains(const std::string& id) const { return vectors_.count(id) != 0; }

  void insert(const std::string& id, std::vector<float> vec) {
    if (int(vec.size()) != dim_)
      throw format_error("embedding for '" + id + "' has " + std::to_string(vec.size()) +
                         " values, expected " + std::to_string(dim_));
    vectors_[id] = std::move(vec);
  }

  const std::vector<float>& at(const std::string& id) const {
    auto it = vectors_.find(id);
    if (it == vectors_.end())
      throw lookup_error("no embedding for utterance_id '" + id + "'");
    return it->second;
  }

  const std::unordered_map<std::string, std::vector<float>>& vectors() const { return vectors_; }

 private:
  int dim_ = 0;
  std::unordered_map<std::string, std::vector<float>> vectors_;
};

inline EmbeddingFile load_embeddings_text(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw parse_error("cannot open " + file.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("dim=", 0) != 0)
    throw format_error(file.string() + ": expected header line 'dim=<d>'");
  int dim = 0;
  try {
    dim = std::stoi(line.substr(4));
  } catch (const std::exception&) {
    throw format_error(file.string() + ": bad dimension in header '" + line + "'");
  }
  if (dim <= 0) throw format_error(file.string() + ": dimension must be positive");
  EmbeddingFile emb(dim);
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw format_error(file.string() + ":" + std::to_string(line_no) + ": missing tab separator");
    std::string id = line.substr(0, tab);
    std::istringstream values(line.substr(tab + 1));
    std::vector<float> vec;
    vec.reserve(size_t(dim));
    float v = 0.f;
    while (values >> v) vec.push_back(v);
    if (int(vec.size()) != dim)
      throw format_error(file.string() + ":" + std::to_string(line_no) + ": expected " +
                         std::to_string(dim) + " values, got " + std::to_string(vec.size()));
    emb.insert(id, std::move(vec));
  }
  return emb;
}

inline void save_embeddings_text(const EmbeddingFile& emb, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << "dim=" << emb.dim() << '\n';
  // Sorted for reproducible files.
  std::vector<const std::string*> ids;
  ids.reserve(emb.size());
  for (const auto& [id, vec] : emb.vectors()) ids.push_back(&id);
  std::sort(ids.begin(), ids.end(), [](const auto* a, const auto* b) { return *a < *b; });
  out.precision(9);
  for (const auto* id : ids) {
    out << *id;
    char sep = '\t';
    for (float v : emb.at(*id)) {
      out << sep << v;
      sep = ' ';
    }
    out << '\n';
  }
}

inline EmbeddingFile load_embeddings_binary(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw parse_error("cannot open " + file.string());
  char magic[5];
  if (!in.read(magic, 5) || std::memcmp(magic, kEmbeddingMagic, 5) != 0)
    throw format_error(file.string() + ": bad magic, not an embedding file");
  uint32_t dim = 0;
  if (!in.read(reinterpret_cast<char*>(&dim), 4) || dim == 0)
    throw format_error(file.string() + ": bad dimension field");
  EmbeddingFile emb{int(dim)};
  while (true) {
    uint32_t id_len = 0;
    if (!in.read(reinterpret_cast<char*>(&id_len), 4)) {
      if (in.eof()) break;
      throw format_error(file.string() + ": truncated record header");
    }
    std::string id(id_len, '\0');
    if (!in.read(id.data(), id_len))
      throw format_error(file.string() + ": truncated utterance id");
    std::vector<float> vec(dim);
    if (!in.read(reinterpret_cast<char*>(vec.data()), std::streamsize(dim) * 4))
      throw format_error(file.string() + ": truncated vector for '" + id + "'");
    emb.insert(id, std::move(vec));
  }
  return emb;
}

inline void save_embeddings_binary(const EmbeddingFile& emb, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out.write(kEmbeddingMagic, 5);
  const uint32_t dim = uint32_t(emb.dim());
  out.write(reinterpret_cast<const char*>(&dim), 4);
  std::vector<const std::string*> ids;
  ids.reserve(emb.size());
  for (const auto& [id, vec] : emb.vectors()) ids.push_back(&id);
  std::sort(ids.begin(), ids.end(), [](const auto* a, const auto* b) { return *a < *b; });
  for (const auto* id : ids) {
    const uint32_t id_len = uint32_t(id->size());
    out.write(reinterpret_cast<const char*>(&id_len), 4);
    out.write(id->data(), id_len);
    const auto& vec = emb.at(*id);
    out.write(reinterpret_cast<const char*>(vec.data()), std::streamsize(vec.size()) * 4);
  }
}

// Precomputed vectors enter the graph as constants.
template <typename Real>
Tensor<Real> encode_precomputed(const EmbeddingFile& emb, const std::string& utterance_id) {
  const auto& vec = emb.at(utterance_id);
  std::vector<Real> data(vec.begin(), vec.end());
  return Tensor<Real>::constant(Shape{int(vec.size())}, std::move(data));
}

enum class EncoderBackend { Bag, Precomputed };

inline std::string to_string(EncoderBackend b) {
  switch (b) {
    case EncoderBackend::Bag: return "bag";
    case EncoderBackend::Precomputed: return "precomputed";
  }
  throw std::invalid_argument("unknown encoder backend");
}

inline EncoderBackend encoder_backend_from_string(const std::string& s) {
  if (s == "bag") return EncoderBackend::Bag;
  if (s == "precomputed") return EncoderBackend::Precomputed;
  throw std::invalid_argument("unknown encoder backend '" + s + "' (expected bag|precomputed)");
}

// Trainable word table for the bag encoder. Row 0 is the PAD row: it starts
// at zero and is frozen, so pad pseudo-utterances contribute nothing and
// never drift.
template <typename Real>
struct BagEncoderParams {
  Parameter<Real> word_table;

  BagEncoderParams() = default;
  BagEncoderParams(int vocab_size, int dim, Rng& rng)
      : word_table("bag.word_table", Shape{vocab_size, dim}) {
    word_table.frozen_rows = {kPadTokenIndex};
    const double bound = 1.0 / std::sqrt(double(dim));
    auto& data = word_table.tensor.value();
    for (int r = 1; r < vocab_size; ++r)
      for (int c = 0; c < dim; ++c)
        data[size_t(r) * dim + c] = Real(rng.next_uniform(-bound, bound));
  }

  int vocab_size() const { return word_table.tensor.dim(0); }
  int dim() const { return word_table.tensor.dim(1); }
};

// Mean of the word vectors for the utterance's tokens.
template <typename Real>
Tensor<Real> encode_bag(const BagEncoderParams<Real>& params, const std::vector<int>& token_ids) {
  if (token_ids.empty())
    throw std::invalid_argument("encode_bag: empty token id list");
  auto rows = gather(params.word_table.tensor, token_ids);  // [L x d]
  const int L = int(token_ids.size());
  auto weights = Tensor<Real>::full(Shape{L}, Real(1) / Real(L));
  return vecmat(weights, rows);  // [d]
}

}  // namespace turnwise
