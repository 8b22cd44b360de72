#include "tknn/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <stdexcept>
#include <vector>

namespace tknn {

namespace {

// Disjoint syllable inventories keep the two languages apart on the
// character level, so BPE learns different pieces per side.
constexpr const char* kSourceOnsets[] = {"b", "d", "f", "g", "l", "m", "n", "p", "r", "s", "t", "v", "br", "st", "pl"};
constexpr const char* kSourceNuclei[] = {"a", "e", "i", "o", "u", "ai", "ou"};
constexpr const char* kTargetOnsets[] = {"k", "h", "z", "j", "w", "y", "ch", "sh", "kr", "zh", "q", "x"};
constexpr const char* kTargetNuclei[] = {"a", "e", "i", "o", "u", "aa", "ei", "uu"};

class WordMaker {
 public:
  explicit WordMaker(std::mt19937_64& rng) : rng_(rng) {}

  template <std::size_t NO, std::size_t NN>
  std::string make(const char* const (&onsets)[NO], const char* const (&nuclei)[NN], int min_syl, int max_syl,
                   bool closed) {
    for (;;) {
      std::string w;
      const int syl = std::uniform_int_distribution<int>(min_syl, max_syl)(rng_);
      for (int s = 0; s < syl; ++s) {
        w += onsets[rng_() % NO];
        w += nuclei[rng_() % NN];
      }
      if (closed && rng_() % 2 == 0) w += "n";
      if (used_.insert(w).second) return w;
    }
  }
  void reserve(const std::string& w) { used_.insert(w); }

 private:
  std::mt19937_64& rng_;
  std::set<std::string> used_;
};

struct Entry {
  std::string src, tgt;
};

struct Lexicon {
  std::vector<Entry> nouns, verbs, adjectives;
};

struct Determiner {
  const char* src;
  const char* tgt;
  bool plural;
};

// Function words are shared by both domains.
constexpr Determiner kDeterminers[] = {{"the", "ko", false}, {"a", "hi", false},   {"this", "zei", false},
                                       {"that", "jo", false}, {"these", "zeiru", true}, {"those", "joru", true},
                                       {"some", "wa", true},  {"many", "kaa", true}};
struct Preposition {
  const char* src;
  const char* tgt;
};

constexpr Preposition kPrepositions[] = {{"in", "de"}, {"on", "ue"}, {"with", "to"}, {"near", "chika"}, {"for", "tame"}};
constexpr const char* kSubjectParticle = "ga";
constexpr const char* kObjectParticle = "wo";
constexpr const char* kPluralSuffix = "ra";
constexpr const char* kVerbSingular = "ta";
constexpr const char* kVerbPlural = "ri";

class Zipf {
 public:
  Zipf(std::size_t n, double s) {
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) w[i] = 1.0 / std::pow(static_cast<double>(i + 1), s);
    dist_ = std::discrete_distribution<std::size_t>(w.begin(), w.end());
  }
  std::size_t operator()(std::mt19937_64& rng) { return dist_(rng); }

 private:
  std::discrete_distribution<std::size_t> dist_;
};

class Generator {
 public:
  Generator(const Lexicon& lex, double zipf)
      : lex_(lex), nz_(lex.nouns.size(), zipf), vz_(lex.verbs.size(), zipf), az_(lex.adjectives.size(), zipf) {}

  std::pair<std::string, std::string> sentence(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto subj = noun_phrase(rng);
    const Entry& verb = lex_.verbs[vz_(rng)];
    const auto obj = noun_phrase(rng);
    std::string src = subj.src + " " + verb.src + " " + obj.src;
    std::string tgt = subj.tgt + " " + kSubjectParticle + " " + obj.tgt + " " + kObjectParticle;
    if (u(rng) < 0.3) {
      const Preposition& prep = kPrepositions[rng() % std::size(kPrepositions)];
      const auto pp = noun_phrase(rng);
      src += std::string(" ") + prep.src + " " + pp.src;
      tgt += " " + pp.tgt + " " + prep.tgt;
    }
    tgt += " " + verb.tgt + (subj.plural ? kVerbPlural : kVerbSingular);
    return {src, tgt};
  }

 private:
  struct Phrase {
    std::string src, tgt;
    bool plural;
  };

  Phrase noun_phrase(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const Determiner& det = kDeterminers[rng() % std::size(kDeterminers)];
    const std::size_t n_adj = u(rng) < 0.4 ? (u(rng) < 0.25 ? 2 : 1) : 0;
    std::vector<const Entry*> adjs;
    for (std::size_t i = 0; i < n_adj; ++i) adjs.push_back(&lex_.adjectives[az_(rng)]);
    const Entry& noun = lex_.nouns[nz_(rng)];
    Phrase p{det.src, noun.tgt + (det.plural ? kPluralSuffix : ""), det.plural};
    for (const Entry* a : adjs) p.src += " " + a->src;
    p.src += " " + noun.src;
    for (auto it = adjs.rbegin(); it != adjs.rend(); ++it) p.tgt += " " + (*it)->tgt;
    p.tgt += std::string(" ") + det.tgt;
    return p;
  }

  const Lexicon& lex_;
  Zipf nz_, vz_, az_;
};

std::vector<Entry> make_entries(std::size_t n, WordMaker& src_words, WordMaker& tgt_words, int min_syl,
                                int max_syl) {
  std::vector<Entry> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back({src_words.make(kSourceOnsets, kSourceNuclei, min_syl, max_syl, true),
                   tgt_words.make(kTargetOnsets, kTargetNuclei, min_syl, max_syl + 1, true)});
  }
  return out;
}

ParallelCorpus generate(Generator& gen, std::size_t n, std::mt19937_64& rng, const std::string& domain) {
  ParallelCorpus c;
  c.domain = domain;
  for (std::size_t i = 0; i < n; ++i) {
    auto [s, t] = gen.sentence(rng);
    c.add(std::move(s), std::move(t));
  }
  return c;
}

}  // namespace

CorpusBundle make_synthetic_bundle(const SyntheticOptions& o) {
  if (o.nouns == 0 || o.verbs == 0 || o.adjectives == 0) throw std::invalid_argument("synthetic: empty lexicon");
  if (o.shifted_nouns > o.nouns || o.shifted_verbs > o.verbs) {
    throw std::invalid_argument("synthetic: more shifted words than lexicon entries");
  }
  std::mt19937_64 rng(o.seed);
  WordMaker src_words(rng), tgt_words(rng);
  for (const auto& d : kDeterminers) {
    src_words.reserve(d.src);
    tgt_words.reserve(d.tgt);
  }
  for (const auto& p : kPrepositions) {
    src_words.reserve(p.src);
    tgt_words.reserve(p.tgt);
  }
  for (const char* w : {kSubjectParticle, kObjectParticle}) tgt_words.reserve(w);

  Lexicon a, b;
  a.nouns = make_entries(o.nouns, src_words, tgt_words, 2, 3);
  a.verbs = make_entries(o.verbs, src_words, tgt_words, 2, 3);
  a.adjectives = make_entries(o.adjectives, src_words, tgt_words, 1, 3);
  b.nouns = make_entries(o.nouns, src_words, tgt_words, 2, 3);
  b.verbs = make_entries(o.verbs, src_words, tgt_words, 2, 3);
  b.adjectives = make_entries(o.adjectives, src_words, tgt_words, 1, 3);

  // Frequent domain-A source words are reused in B at scattered ranks with
  // their own B translation.
  for (std::size_t i = 0; i < o.shifted_nouns; ++i) b.nouns[(i * 5 + 2) % o.nouns].src = a.nouns[i].src;
  for (std::size_t i = 0; i < o.shifted_verbs; ++i) b.verbs[(i * 5 + 2) % o.verbs].src = a.verbs[i].src;

  Generator ga(a, o.zipf), gb(b, o.zipf);
  CorpusBundle bundle;
  bundle["A"] = {generate(ga, o.train_a, rng, "A"), generate(ga, o.valid_a, rng, "A"),
                 generate(ga, o.test_a, rng, "A")};
  bundle["B"] = {generate(gb, o.train_b, rng, "B"), generate(gb, o.valid_b, rng, "B"),
                 generate(gb, o.test_b, rng, "B")};
  return bundle;
}

void write_bundle(const CorpusBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& [domain, s] : bundle) {
    write_corpus(s.train, dir / (domain + ".train"));
    write_corpus(s.valid, dir / (domain + ".valid"));
    write_corpus(s.test, dir / (domain + ".test"));
  }
}

CorpusBundle read_bundle(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("corpus bundle " + dir.string() + " not found");
  std::vector<std::string> domains;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    const std::string suffix = ".train.src";
    if (name.size() > suffix.size() && name.ends_with(suffix)) domains.push_back(name.substr(0, name.size() - suffix.size()));
  }
  if (domains.empty()) throw std::runtime_error("corpus bundle " + dir.string() + ": no <domain>.train.src files");
  CorpusBundle bundle;
  for (const auto& d : domains) {
    bundle[d] = {read_corpus(dir / (d + ".train"), d), read_corpus(dir / (d + ".valid"), d),
                 read_corpus(dir / (d + ".test"), d)};
  }
  return bundle;
}

}  // namespace tknn
