#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "tknn/bleu.hpp"

using namespace tknn;

namespace {

// Pinned from tests/bleu_oracle.py, which agrees with sacrebleu
// (tokenize none, no smoothing) on this fixture since no count is zero.
const std::vector<std::string> kFixtureHyp = {"the cat sat on the mat today",
                                              "a quick brown dog jumps over the lazy fox",
                                              "there is nothing here at all"};
const std::vector<std::string> kFixtureRef = {"the cat is sitting on the mat",
                                              "the quick brown fox jumps over the lazy dog", "nothing is here"};
constexpr double kFixtureBleu = 24.933021708758;

}  // namespace

TEST_CASE("identical corpora score 100") {
  const std::vector<std::string> s = {"a b c d e", "one", "x y"};
  const auto r = corpus_bleu(s, s);
  CHECK(r.bleu == doctest::Approx(100.0).epsilon(1e-12));
  CHECK(r.brevity_penalty == 1.0);
  CHECK(format_bleu(r).rfind("BLEU = 100.00", 0) == 0);
}

TEST_CASE("zero overlap is near zero") {
  const std::vector<std::string> h = {"a b c d", "e f"};
  const std::vector<std::string> g = {"p q r s", "t u"};
  const auto r = corpus_bleu(h, g);
  CHECK(r.bleu < 1.0);
  CHECK(r.bleu >= 0.0);
}

TEST_CASE("fixture matches the external oracle") {
  const auto r = corpus_bleu(kFixtureHyp, kFixtureRef);
  CHECK(r.bleu == doctest::Approx(kFixtureBleu).epsilon(1e-10));
  CHECK(r.matches == std::array<std::size_t, 4>{16, 7, 3, 1});
  CHECK(r.totals == std::array<std::size_t, 4>{22, 19, 16, 13});
  CHECK(r.hyp_length == 22);
  CHECK(r.ref_length == 19);
  CHECK(r.brevity_penalty == 1.0);
}

TEST_CASE("smoothing and brevity penalty by hand") {
  // hyp "a b" vs ref "a b c d": p1 = p2 = 1, p3 = p4 = 1/(0+1), BP = e^(1-2).
  const std::vector<std::string> h = {"a b"};
  const std::vector<std::string> g = {"a b c d"};
  const auto r = corpus_bleu(h, g);
  CHECK(r.precisions[2] == 1.0);
  CHECK(r.brevity_penalty == doctest::Approx(std::exp(-1.0)).epsilon(1e-14));
  CHECK(r.bleu == doctest::Approx(100.0 * std::exp(-1.0)).epsilon(1e-12));
  // Clipping: "the the the" vs "the cat" has p1 = 1/3.
  const auto c = corpus_bleu(std::vector<std::string>{"the the the"}, std::vector<std::string>{"the cat"});
  CHECK(c.precisions[0] == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("empty hypotheses give zero") {
  const auto r = corpus_bleu(std::vector<std::string>{""}, std::vector<std::string>{"a b"});
  CHECK(r.bleu == 0.0);
  CHECK(r.brevity_penalty == 0.0);
}

TEST_CASE("count mismatch and empty input are rejected") {
  CHECK_THROWS_AS(corpus_bleu(std::vector<std::string>{"a"}, std::vector<std::string>{"a", "b"}),
                  std::invalid_argument);
  CHECK_THROWS_AS(corpus_bleu(std::vector<std::string>{}, std::vector<std::string>{}), std::invalid_argument);
}

TEST_CASE("sentence order and corpus duplication do not change the score") {
  std::vector<std::size_t> order = {0, 1, 2};
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::string> h, g;
    for (auto i : order) {
      h.push_back(kFixtureHyp[i]);
      g.push_back(kFixtureRef[i]);
    }
    CHECK(corpus_bleu(h, g).bleu == doctest::Approx(kFixtureBleu).epsilon(1e-12));
  }
  std::vector<std::string> h2 = kFixtureHyp, g2 = kFixtureRef;
  h2.insert(h2.end(), kFixtureHyp.begin(), kFixtureHyp.end());
  g2.insert(g2.end(), kFixtureRef.begin(), kFixtureRef.end());
  CHECK(corpus_bleu(h2, g2).bleu == doctest::Approx(kFixtureBleu).epsilon(1e-12));
}

TEST_CASE("score stays within [0, 100]") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> word(0, 5), len(0, 8);
  for (int t = 0; t < 200; ++t) {
    std::vector<std::string> h(3), g(3);
    for (int s = 0; s < 3; ++s) {
      for (int i = len(rng); i > 0; --i) h[s] += "w" + std::to_string(word(rng)) + " ";
      for (int i = len(rng) + 1; i > 0; --i) g[s] += "w" + std::to_string(word(rng)) + " ";
    }
    const double b = corpus_bleu(h, g).bleu;
    CHECK(b >= 0.0);
    CHECK(b <= 100.0 + 1e-9);
  }
}
