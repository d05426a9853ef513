// SPDX-License-Identifier: Apache-2.0
//
// Embedding file I/O and utterance encoder tests. Round-trips are checked
// bitwise; the bag gradient is checked against an occurrence count.

#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "turnwise/autodiff.hpp"
#include "turnwise/encoder.hpp"
#include "turnwise/errors.hpp"
#include "turnwise/rng.hpp"

using namespace turnwise;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;

  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("turnwise_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

EmbeddingFile random_embeddings(int count, int dim, uint64_t seed) {
  EmbeddingFile emb(dim);
  Rng rng(seed);
  for (int i = 0; i < count; ++i) {
    std::vector<float> v(size_t(dim), 0.0f);
    for (auto& x : v) x = float(rng.next_uniform(-10, 10));
    emb.insert("utt_" + std::to_string(i), std::move(v));
  }
  return emb;
}

}  // namespace

TEST_CASE("embedding store lookup and validation") {
  EmbeddingFile emb(2);
  emb.insert("a", {0.1f, 0.2f});
  CHECK(emb.contains("a"));
  CHECK_FALSE(emb.contains("b"));
  CHECK(emb.at("a") == std::vector<float>{0.1f, 0.2f});
  CHECK_THROWS_AS(emb.insert("bad", {1.f}), format_error);
  try {
    emb.at("missing_id");
    FAIL("expected lookup_error");
  } catch (const lookup_error& e) {
    CHECK(std::string(e.what()).find("missing_id") != std::string::npos);
  }
}

TEST_CASE("text embedding round-trip is bitwise") {
  TempDir tmp("embtext");
  EmbeddingFile emb = random_embeddings(1000, 5, 21);
  save_embeddings_text(emb, tmp.path / "e.txt");
  EmbeddingFile back = load_embeddings_text(tmp.path / "e.txt");
  REQUIRE(back.dim() == 5);
  REQUIRE(back.size() == 1000);
  for (const auto& [id, vec] : emb.vectors()) {
    const auto& got = back.at(id);
    for (size_t i = 0; i < vec.size(); ++i) CHECK(got[i] == vec[i]);
  }
}

TEST_CASE("binary embedding round-trip is bitwise") {
  TempDir tmp("embbin");
  EmbeddingFile emb = random_embeddings(1000, 7, 22);
  save_embeddings_binary(emb, tmp.path / "e.bin");
  EmbeddingFile back = load_embeddings_binary(tmp.path / "e.bin");
  REQUIRE(back.dim() == 7);
  REQUIRE(back.size() == 1000);
  for (const auto& [id, vec] : emb.vectors()) CHECK(back.at(id) == vec);
}

TEST_CASE("embedding files reject corruption") {
  TempDir tmp("embbad");

  SECTION("text header must carry a dimension") {
    std::ofstream(tmp.path / "h.txt") << "dimension=3\nu\t1 2 3\n";
    CHECK_THROWS_AS(load_embeddings_text(tmp.path / "h.txt"), format_error);
  }

  SECTION("text row width must match the header") {
    std::ofstream(tmp.path / "w.txt") << "dim=3\nu\t1 2\n";
    CHECK_THROWS_AS(load_embeddings_text(tmp.path / "w.txt"), format_error);
  }

  SECTION("binary magic mismatch") {
    std::ofstream(tmp.path / "m.bin", std::ios::binary) << "XEMB1garbage";
    CHECK_THROWS_AS(load_embeddings_binary(tmp.path / "m.bin"), format_error);
  }

  SECTION("binary truncation") {
    EmbeddingFile emb = random_embeddings(3, 4, 23);
    save_embeddings_binary(emb, tmp.path / "t.bin");
    auto bytes = fs::file_size(tmp.path / "t.bin");
    fs::resize_file(tmp.path / "t.bin", bytes - 3);
    CHECK_THROWS_AS(load_embeddings_binary(tmp.path / "t.bin"), format_error);
  }

  SECTION("missing file") {
    CHECK_THROWS_AS(load_embeddings_text(tmp.path / "nope.txt"), parse_error);
    CHECK_THROWS_AS(load_embeddings_binary(tmp.path / "nope.bin"), parse_error);
  }
}

TEST_CASE("encode_precomputed yields a constant leaf") {
  EmbeddingFile emb(3);
  emb.insert("u1", {1.f, 2.f, 3.f});
  auto t = encode_precomputed<double>(emb, "u1");
  CHECK(t.shape() == Shape{3});
  CHECK(t.value() == std::vector<double>{1.f, 2.f, 3.f});
  CHECK_FALSE(t.requires_grad());
  CHECK_THROWS_AS(encode_precomputed<double>(emb, "absent"), lookup_error);
}

TEST_CASE("bag encoder parameter initialization") {
  Rng rng(5);
  BagEncoderParams<double> p(6, 4, rng);
  CHECK(p.vocab_size() == 6);
  CHECK(p.dim() == 4);
  // PAD row is zero and frozen.
  for (int j = 0; j < 4; ++j) CHECK(p.word_table.tensor.value()[size_t(j)] == 0.0);
  REQUIRE(p.word_table.frozen_rows == std::vector<int>{kPadTokenIndex});
  const double bound = 1.0 / std::sqrt(4.0);
  for (size_t i = 4; i < p.word_table.tensor.value().size(); ++i) {
    CHECK(std::abs(p.word_table.tensor.value()[i]) <= bound);
  }
  // Deterministic per seed.
  Rng rng2(5);
  BagEncoderParams<double> q(6, 4, rng2);
  CHECK(q.word_table.tensor.value() == p.word_table.tensor.value());
}

TEST_CASE("encode_bag averages embedding rows") {
  Rng rng(9);
  BagEncoderParams<double> p(5, 3, rng);
  const auto& tbl = p.word_table.tensor.value();
  auto row_of = [&](int r, int j) { return tbl[size_t(r) * 3 + size_t(j)]; };

  SECTION("single token returns its row exactly") {
    auto v = encode_bag(p, {2}).value();
    for (int j = 0; j < 3; ++j) CHECK(v[size_t(j)] == row_of(2, j));
  }

  SECTION("two tokens return the midpoint") {
    auto v = encode_bag(p, {2, 4}).value();
    for (int j = 0; j < 3; ++j) CHECK(v[size_t(j)] == Approx((row_of(2, j) + row_of(4, j)) / 2).epsilon(1e-12));
  }

  SECTION("order does not matter") {
    auto a = encode_bag(p, {1, 2, 4, 4}).value();
    auto b = encode_bag(p, {4, 2, 4, 1}).value();
    for (int j = 0; j < 3; ++j) CHECK(a[size_t(j)] == Approx(b[size_t(j)]).epsilon(1e-12));
  }

  SECTION("empty token list is rejected") {
    CHECK_THROWS_AS(encode_bag(p, {}), std::invalid_argument);
  }
}

TEST_CASE("encode_bag gradient scales with occurrence count") {
  // Tokens {2, 2, 3, 2}: d(sum)/d(row 2) = 3/4 per coordinate, row 3 gets 1/4.
  Rng rng(9);
  BagEncoderParams<double> p(5, 3, rng);
  auto enc = encode_bag(p, {2, 2, 3, 2});
  backward(matvec(Tensor<double>::full({1, 3}, 1.0), enc));
  const auto& g = p.word_table.tensor.grad();
  for (int j = 0; j < 3; ++j) {
    CHECK(g[size_t(2 * 3 + j)] == Approx(3.0 / 4.0).epsilon(1e-12));
    CHECK(g[size_t(3 * 3 + j)] == Approx(1.0 / 4.0).epsilon(1e-12));
    CHECK(g[size_t(0 * 3 + j)] == 0.0);
    CHECK(g[size_t(1 * 3 + j)] == 0.0);
  }
}

TEST_CASE("encoder backend names round-trip") {
  for (auto b : {EncoderBackend::Bag, EncoderBackend::Precomputed})
    CHECK(encoder_backend_from_string(to_string(b)) == b);
  CHECK_THROWS_AS(encoder_backend_from_string("cnn"), std::invalid_argument);
}
