#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "tknn/knn.hpp"

using namespace tknn;

namespace {

double total(const TokenDistribution& p) { return std::accumulate(p.begin(), p.end(), 0.0); }

// The k = 8 retrieval after the prefix "If checked,". Distances are
// chosen so that exp(-d/T) reproduces each neighbour's listed probability.
// Ids: T@@ 0, tab 1, you 2, noti@@ 3, hin@@ 4, promp@@ 5, de@@ 6.
RetrievedSet if_checked_retrieval(double temperature) {
  const std::vector<std::pair<double, TokenId>> rows = {{0.344, 0}, {0.236, 1}, {0.201, 2}, {0.096, 3},
                                                        {0.054, 4}, {0.028, 2}, {0.022, 5}, {0.019, 6}};
  RetrievedSet r;
  for (std::uint32_t i = 0; i < rows.size(); ++i) r.push_back({-temperature * std::log(rows[i].first), rows[i].second, i});
  return r;
}

RetrievedSet random_retrieval(std::mt19937_64& rng, std::size_t k, TokenId vocab) {
  std::uniform_real_distribution<double> d(0.0, 20.0);
  std::uniform_int_distribution<TokenId> v(0, vocab - 1);
  RetrievedSet r;
  for (std::uint32_t i = 0; i < k; ++i) r.push_back({d(rng), v(rng), i});
  std::sort(r.begin(), r.end(), [](auto& a, auto& b) { return a.distance < b.distance; });
  return r;
}

ModelShape shape() {
  ModelShape s;
  s.src_vocab = 20;
  s.tgt_vocab = 15;
  s.d_model = 16;
  s.heads = 2;
  s.ff = 24;
  s.enc_layers = 1;
  s.dec_layers = 1;
  s.max_len = 20;
  return s;
}

}  // namespace

TEST_CASE("knn_distribution: single neighbour and two-neighbour softmax") {
  const auto one = knn_distribution({{3.7, 4, 0}}, 2.0, 6);
  CHECK(one[4] == 1.0);
  CHECK(total(one) == 1.0);

  const auto two = knn_distribution({{1.0, 0, 0}, {2.0, 1, 1}}, 1.0, 3);
  CHECK(two[0] == doctest::Approx(0.7310585786300049).epsilon(1e-12));
  CHECK(two[1] == doctest::Approx(0.2689414213699951).epsilon(1e-12));
  CHECK(two[2] == 0.0);

  const auto squared = knn_distribution({{1.0, 0, 0}, {2.0, 1, 1}}, 1.0, 3, true);
  CHECK(squared[0] == doctest::Approx(1.0 / (1.0 + std::exp(-3.0))).epsilon(1e-12));

  CHECK_THROWS_AS(knn_distribution({}, 1.0, 3), std::invalid_argument);
  CHECK_THROWS_AS(knn_distribution({{1.0, 0, 0}}, 0.0, 3), std::invalid_argument);
  CHECK_THROWS_AS(knn_distribution({{1.0, 5, 0}}, 1.0, 3), std::invalid_argument);
}

TEST_CASE("worked retrieval: duplicate values aggregate and M_kNN is the top entry") {
  for (double t : {1.0, 10.0, 100.0}) {
    const auto p = knn_distribution(if_checked_retrieval(t), t, 7);
    CHECK(std::abs(p[2] - 0.229) < 1e-12);
    CHECK(std::abs(max_knn_prob(p) - 0.344) < 1e-12);
    CHECK(std::abs(total(p) - 1.0) < 1e-12);
  }
}

TEST_CASE("max_knn_prob on one-hot and uniform distributions") {
  TokenDistribution hot(5, 0.0);
  hot[3] = 1.0;
  CHECK(max_knn_prob(hot) == 1.0);
  RetrievedSet flat;
  for (std::uint32_t i = 0; i < 8; ++i) flat.push_back({2.5, i, i});
  CHECK(max_knn_prob(knn_distribution(flat, 10.0, 8)) == doctest::Approx(0.125).epsilon(1e-15));
}

TEST_CASE("interpolate: endpoints, worked example, and rejection") {
  const TokenDistribution nmt{0.5, 0.5};
  const TokenDistribution knn{0.8, 0.2};
  CHECK(interpolate(nmt, knn, 0.0) == nmt);
  CHECK(interpolate(nmt, knn, 1.0) == knn);
  const auto mixed = interpolate(nmt, knn, 0.6);
  CHECK(mixed[0] == doctest::Approx(0.68).epsilon(1e-14));
  CHECK(mixed[1] == doctest::Approx(0.32).epsilon(1e-14));
  CHECK_THROWS_AS(interpolate(nmt, knn, 1.5), std::invalid_argument);
  CHECK_THROWS_AS(interpolate(nmt, knn, -0.1), std::invalid_argument);
  CHECK_THROWS_AS(interpolate(nmt, TokenDistribution{1.0}, 0.5), std::invalid_argument);
}

TEST_CASE("distribution laws on random retrievals") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 1 + trial % 16;
    const auto r = random_retrieval(rng, k, 30);
    const double t = 0.5 + 20.0 * u(rng);
    const auto p = knn_distribution(r, t, 30);
    CHECK(std::abs(total(p) - 1.0) < 1e-9);
    std::vector<bool> retrieved(30, false);
    for (auto& n : r) retrieved[n.value] = true;
    for (TokenId v = 0; v < 30; ++v) {
      if (!retrieved[v]) CHECK(p[v] == 0.0);
    }

    // Shift invariance.
    RetrievedSet shifted = r;
    const double c = 50.0 * u(rng);
    for (auto& n : shifted) n.distance += c;
    const auto ps = knn_distribution(shifted, t, 30);
    for (TokenId v = 0; v < 30; ++v) CHECK(std::abs(ps[v] - p[v]) < 1e-9);

    // T -> infinity gives value frequencies.
    const auto flat = knn_distribution(r, 1e9, 30);
    std::vector<double> freq(30, 0.0);
    for (auto& n : r) freq[n.value] += 1.0 / static_cast<double>(k);
    for (TokenId v = 0; v < 30; ++v) CHECK(std::abs(flat[v] - freq[v]) < 1e-6);

    // Interpolation keeps normalization.
    TokenDistribution nmt(30);
    for (auto& x : nmt) x = u(rng);
    const double s = total(nmt);
    for (auto& x : nmt) x /= s;
    CHECK(std::abs(total(interpolate(nmt, p, u(rng))) - 1.0) < 1e-9);
  }
}

TEST_CASE("KnnParams validation") {
  KnnParams p;
  CHECK_NOTHROW(p.validate());
  p.k = 0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = {};
  p.temperature = -1;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = {};
  p.lambda = 2;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
}

TEST_CASE("greedy decoding is the argmax rollout of decode_step") {
  auto m = NmtModel<float>::init(shape(), 5);
  const TokenIds src{4, 9, 13, 2};
  const Mat<float> mem = m.encode(src);
  TokenIds prefix{BpeVocab::kBos};
  TokenIds expected;
  for (int step = 0; step < 12; ++step) {
    const auto out = m.decode_step(mem, prefix);
    const auto best = static_cast<TokenId>(std::max_element(out.distribution.begin(), out.distribution.end()) - out.distribution.begin());
    if (best == BpeVocab::kEos) break;
    expected.push_back(best);
    prefix.push_back(best);
  }
  TranslateOptions o;
  o.max_len = 12;
  const auto hyp = translate_ids(m, src, o);
  CHECK(hyp.tokens == expected);
}

TEST_CASE("lambda = 0 with a datastore decodes exactly like no datastore") {
  auto m = NmtModel<float>::init(shape(), 6);
  EncodedCorpus c;
  c.source = {{4, 5, 2}, {6, 7, 8, 2}, {9, 2}};
  c.target = {{1, 9, 10, 2}, {1, 11, 12, 13, 14, 2}, {1, 5, 2}};
  const auto ds = std::make_shared<const Datastore>(build_datastore(m, c));
  ExactRetriever r(ds);
  for (std::size_t beam : {1, 3}) {
    TranslateOptions plain;
    plain.beam = beam;
    plain.max_len = 10;
    TranslateOptions zero = plain;
    zero.knn = KnnParams{4, 10.0, 0.0, false};
    zero.retriever = &r;
    for (const auto& s : c.source) {
      const auto a = translate_ids(m, s, plain);
      const auto b = translate_ids(m, s, zero);
      CHECK(a.tokens == b.tokens);
      CHECK(a.score == b.score);
    }
  }
  // With lambda = 1 the retrieved continuation of a training source dominates.
  TranslateOptions full;
  full.knn = KnnParams{1, 1.0, 1.0, false};
  full.retriever = &r;
  full.max_len = 10;
  CHECK(translate_ids(m, c.source[1], full).finished);
}

TEST_CASE("an empty datastore falls back to the model distribution") {
  auto m = NmtModel<float>::init(shape(), 7);
  const auto empty = std::make_shared<const Datastore>(Mat<float>(0, 16), std::vector<TokenId>{}, 0);
  ExactRetriever r(empty);
  TranslateOptions plain;
  plain.max_len = 8;
  TranslateOptions knn = plain;
  knn.knn = KnnParams{};
  knn.retriever = &r;
  CHECK(translate_ids(m, TokenIds{5, 2}, plain).tokens == translate_ids(m, TokenIds{5, 2}, knn).tokens);
}

TEST_CASE("dimension mismatch and missing datastore are rejected before decoding") {
  auto m = NmtModel<float>::init(shape(), 8);
  const auto wrong = std::make_shared<const Datastore>(Mat<float>::Zero(3, 8), std::vector<TokenId>{1, 2, 3}, 0);
  ExactRetriever r(wrong);
  TranslateOptions o;
  o.knn = KnnParams{};
  CHECK_THROWS_AS(translate_ids(m, TokenIds{5, 2}, o), std::invalid_argument);
  o.retriever = &r;
  CHECK_THROWS_WITH_AS(translate_ids(m, TokenIds{5, 2}, o), doctest::Contains("dimension"), std::invalid_argument);
  TranslateOptions bad;
  bad.beam = 0;
  CHECK_THROWS_AS(translate_ids(m, TokenIds{5, 2}, bad), std::invalid_argument);
}

TEST_CASE("beam search is deterministic and respects max_len") {
  auto m = NmtModel<double>::init(shape(), 9);
  TranslateOptions o;
  o.beam = 4;
  o.max_len = 5;
  const auto a = translate_ids(m, TokenIds{3, 4, 5, 2}, o);
  const auto b = translate_ids(m, TokenIds{3, 4, 5, 2}, o);
  CHECK(a.tokens == b.tokens);
  CHECK(a.score == b.score);
  CHECK(a.tokens.size() <= 5);
  CHECK(a.score <= 0.0);
}

TEST_CASE("batched decoding matches one sentence at a time") {
  auto m = NmtModel<double>::init(shape(), 10);
  EncodedCorpus c;
  c.source = {{4, 5, 2}, {6, 7, 8, 9, 10, 2}, {9, 2}, {11, 4, 2}};
  c.target = {{1, 9, 10, 2}, {1, 11, 12, 13, 14, 2}, {1, 5, 2}, {1, 6, 6, 7, 2}};
  const auto ds = std::make_shared<const Datastore>(build_datastore(m, c));
  ExactRetriever r(ds);
  for (std::size_t beam : {1, 3}) {
    for (bool knn : {false, true}) {
      TranslateOptions o;
      o.beam = beam;
      o.max_len = 9;
      if (knn) {
        o.knn = KnnParams{3, 2.0, 0.5, false};
        o.retriever = &r;
      }
      const auto batch = translate_batch_ids(m, c.source, o);
      REQUIRE(batch.size() == c.size());
      for (std::size_t i = 0; i < c.size(); ++i) {
        const auto one = translate_ids(m, c.source[i], o);
        CHECK(batch[i].tokens == one.tokens);
        CHECK(batch[i].score == doctest::Approx(one.score).epsilon(1e-12));
        CHECK(batch[i].finished == one.finished);
      }
    }
  }
  CHECK(translate_batch_ids(m, std::vector<TokenIds>{}, TranslateOptions{}).empty());
}
