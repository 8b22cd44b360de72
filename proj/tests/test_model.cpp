#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "tknn/binary_io.hpp"
#include "tknn/model.hpp"

using namespace tknn;

namespace {

ModelShape tiny_shape() {
  ModelShape s;
  s.src_vocab = 11;
  s.tgt_vocab = 9;
  s.d_model = 8;
  s.heads = 2;
  s.ff = 12;
  s.enc_layers = 1;
  s.dec_layers = 1;
  s.max_len = 16;
  return s;
}

ModelShape small_shape() {
  ModelShape s;
  s.src_vocab = 30;
  s.tgt_vocab = 25;
  s.d_model = 16;
  s.heads = 4;
  s.ff = 32;
  s.max_len = 24;
  return s;
}

template <typename T>
double row_sum(const std::vector<T>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0);
}

}  // namespace

TEST_CASE("encode yields one row per source token") {
  auto m = NmtModel<float>::init(small_shape(), 1);
  const TokenIds src = {5, 6, 7, 8, 2};
  const Mat<float> mem = m.encode(src);
  CHECK(mem.rows() == 5);
  CHECK(mem.cols() == 16);
  CHECK(mem == m.encode(src));
}

TEST_CASE("encoder is position aware") {
  auto m = NmtModel<double>::init(small_shape(), 2);
  const Mat<double> a = m.encode(TokenIds{5, 6, 7, 2});
  const Mat<double> b = m.encode(TokenIds{7, 6, 5, 2});
  // Same multiset of tokens: without positions, row 0 of b would equal row 2 of a.
  CHECK((a.row(2) - b.row(0)).norm() > 1e-3);
  CHECK((a - b).norm() > 1e-3);
}

TEST_CASE("encode rejects out-of-vocabulary and empty input") {
  auto m = NmtModel<float>::init(small_shape(), 1);
  CHECK_THROWS_AS(m.encode(TokenIds{5, 30}), std::invalid_argument);
  CHECK_THROWS_AS(m.encode(TokenIds{}), std::invalid_argument);
}

TEST_CASE("decode_step distribution is normalized and equals the projected hidden state") {
  auto m = NmtModel<float>::init(small_shape(), 3);
  const Mat<float> mem = m.encode(TokenIds{4, 9, 12, 2});
  const auto out = m.decode_step(mem, TokenIds{BpeVocab::kBos, 7, 8});
  CHECK(out.hidden.size() == 16);
  CHECK(std::abs(row_sum(out.distribution) - 1.0) < 1e-6);
  const auto projected = m.project(out.hidden);
  for (std::size_t i = 0; i < projected.size(); ++i) CHECK(std::abs(projected[i] - out.distribution[i]) < 1e-6);
  for (float h : out.hidden) CHECK(std::isfinite(h));
}

TEST_CASE("zero output projection gives a uniform distribution") {
  auto m = NmtModel<double>::init(small_shape(), 4, true);
  const auto out = m.decode_step(m.encode(TokenIds{4, 2}), TokenIds{BpeVocab::kBos});
  for (double p : out.distribution) CHECK(std::abs(p - 1.0 / 25.0) < 1e-12);
}

TEST_CASE("decode_step rejects an empty prefix or a prefix without BOS") {
  auto m = NmtModel<float>::init(small_shape(), 1);
  const Mat<float> mem = m.encode(TokenIds{4, 2});
  CHECK_THROWS_AS(m.decode_step(mem, TokenIds{}), std::invalid_argument);
  CHECK_THROWS_AS(m.decode_step(mem, TokenIds{7}), std::invalid_argument);
}

TEST_CASE("teacher forcing yields one output per predicted token") {
  auto m = NmtModel<float>::init(small_shape(), 5);
  const auto out = m.forward_teacher_forced(TokenIds{4, 5, 2}, TokenIds{BpeVocab::kBos, 9, 10, BpeVocab::kEos});
  CHECK(out.size() == 3);
  CHECK_THROWS_AS(m.forward_teacher_forced(TokenIds{4, 2}, TokenIds{BpeVocab::kBos, 9}), std::invalid_argument);
  TokenIds too_long(30, 9);
  too_long.front() = BpeVocab::kBos;
  too_long.back() = BpeVocab::kEos;
  CHECK_THROWS_AS(m.forward_teacher_forced(TokenIds{4, 2}, too_long), std::invalid_argument);
}

TEST_CASE("causal masking: decode_step on a prefix matches teacher forcing on any extension") {
  auto m = NmtModel<float>::init(small_shape(), 6);
  const TokenIds src = {4, 17, 9, 2};
  const TokenIds tgt = {BpeVocab::kBos, 11, 5, 20, 7, BpeVocab::kEos};
  const Mat<float> mem = m.encode(src);
  const auto forced = m.forward_teacher_forced(src, tgt);
  for (std::size_t len = 1; len < tgt.size(); ++len) {
    const TokenIds prefix(tgt.begin(), tgt.begin() + static_cast<std::ptrdiff_t>(len));
    const auto step = m.decode_step(mem, prefix);
    const auto& f = forced[len - 1];
    for (std::size_t i = 0; i < step.distribution.size(); ++i) CHECK(std::abs(step.distribution[i] - f.distribution[i]) < 1e-6);
    for (std::size_t i = 0; i < step.hidden.size(); ++i) CHECK(std::abs(step.hidden[i] - f.hidden[i]) < 1e-5);
  }
}

TEST_CASE("batched teacher forcing matches per-sentence forcing") {
  auto m = NmtModel<double>::init(small_shape(), 7);
  const std::vector<TokenIds> src = {{4, 5, 2}, {9, 2}, {12, 13, 14, 2}};
  const std::vector<TokenIds> tgt = {{1, 6, 2}, {1, 8, 9, 10, 2}, {1, 2}};
  Tape<double> tape(false);
  auto d = m.forward_batch(tape, src, tgt);
  CHECK(d.hidden.rows() == 2 + 4 + 1);
  CHECK(d.labels == TokenIds{6, 2, 8, 9, 10, 2, 2});
  for (std::size_t s = 0; s < src.size(); ++s) {
    const auto single = m.forward_teacher_forced(src[s], tgt[s]);
    for (std::size_t p = 0; p < single.size(); ++p) {
      const auto r = static_cast<Eigen::Index>(d.offsets[s] + p);
      for (std::size_t i = 0; i < single[p].hidden.size(); ++i) {
        CHECK(std::abs(single[p].hidden[i] - d.hidden.value()(r, static_cast<Eigen::Index>(i))) < 1e-12);
      }
    }
  }
}

TEST_CASE("summed cross-entropy gradient passes the finite-difference check") {
  auto m = NmtModel<double>::init(tiny_shape(), 8);
  const std::vector<TokenIds> src = {{4, 5, 6, 2}, {7, 2}};
  const std::vector<TokenIds> tgt = {{1, 5, 6, 2}, {1, 8, 4, 7, 2}};
  auto params = m.param_arrays();
  auto loss = [&](Tape<double>& t) {
    auto d = m.forward_batch(t, src, tgt);
    return t.scale(t.sum(t.pick(t.log_softmax_rows(d.logits), d.labels)), -1.0);
  };
  CHECK(finite_diff_check(loss, params, 1e-5) < 1e-4);
}

TEST_CASE("float and double models start from identical weights") {
  auto f = NmtModel<float>::init(small_shape(), 9);
  auto d = NmtModel<double>::init(small_shape(), 9);
  for (std::size_t i = 0; i < f.params().size(); ++i) {
    CHECK(f.params()[i].second.value() == d.params()[i].second.value().cast<float>());
  }
}

TEST_CASE("checkpoint round-trips byte-identically") {
  auto m = NmtModel<float>::init(small_shape(), 10);
  m.set_generation(3);
  const std::string bytes = m.serialize();
  auto back = NmtModel<float>::deserialize(bytes);
  CHECK(back.generation() == 3);
  CHECK(back.shape() == m.shape());
  CHECK(back.serialize() == bytes);
  const auto path = std::filesystem::temp_directory_path() / "tknn_model_test.ckpt";
  m.save(path);
  CHECK(NmtModel<float>::load(path).serialize() == bytes);
  std::filesystem::remove(path);
}

TEST_CASE("corrupted checkpoints are rejected with a reason") {
  auto m = NmtModel<float>::init(tiny_shape(), 11);
  const std::string bytes = m.serialize();
  auto message = [](std::string b) {
    try {
      NmtModel<float>::deserialize(std::move(b));
    } catch (const FormatError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK(message(bad_magic).find("bad magic") != std::string::npos);
  std::string bad_version = bytes;
  bad_version[4] = 2;
  CHECK(message(bad_version).find("unsupported version 2") != std::string::npos);
  CHECK(message(bytes.substr(0, bytes.size() - 3)).find("truncated at offset") != std::string::npos);
}

TEST_CASE("copies own their parameters") {
  const auto a = NmtModel<float>::init(tiny_shape(), 3);
  auto b = a;
  NmtModel<float> c;
  c = a;
  const std::string before = a.serialize();
  CHECK(b.serialize() == before);
  b.params().front().second.mutable_value()(4, 0) += 1.0f;  // embedding of source token 4
  c.params().back().second.mutable_value()(0, 0) -= 1.0f;
  CHECK(a.serialize() == before);
  CHECK(b.serialize() != before);
  CHECK(c.serialize() != before);
  // A copy decodes through its own weights.
  const TokenIds src{4, 5, 2};
  CHECK(b.decode_step(b.encode(src), TokenIds{BpeVocab::kBos}).distribution !=
        a.decode_step(a.encode(src), TokenIds{BpeVocab::kBos}).distribution);
}
