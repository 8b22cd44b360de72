#include "tknn/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <set>
#include <stdexcept>
#include <unordered_map>

namespace tknn {

namespace {

constexpr std::string_view kEndOfWord = "</w>";

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

// Splits UTF-8 into code points; invalid lead bytes become single-byte symbols.
std::vector<std::string> code_points(std::string_view word) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < word.size()) {
    const auto c = static_cast<unsigned char>(word[i]);
    std::size_t len = 1;
    if (c >= 0xF0) {
      len = 4;
    } else if (c >= 0xE0) {
      len = 3;
    } else if (c >= 0xC0) {
      len = 2;
    }
    len = std::min(len, word.size() - i);
    out.emplace_back(word.substr(i, len));
    i += len;
  }
  return out;
}

std::vector<std::string> initial_symbols(std::string_view word) {
  auto syms = code_points(word);
  if (!syms.empty()) syms.back() += kEndOfWord;
  return syms;
}

std::string surface(const std::string& symbol) {
  if (ends_with(symbol, kEndOfWord)) return symbol.substr(0, symbol.size() - kEndOfWord.size());
  return symbol + std::string(BpeVocab::kContinuation);
}

void apply_merge(std::vector<std::string>& syms, const BpeVocab::Merge& m) {
  std::vector<std::string> out;
  out.reserve(syms.size());
  for (std::size_t i = 0; i < syms.size(); ++i) {
    if (i + 1 < syms.size() && syms[i] == m.first && syms[i + 1] == m.second) {
      out.push_back(syms[i] + syms[i + 1]);
      ++i;
    } else {
      out.push_back(std::move(syms[i]));
    }
  }
  syms = std::move(out);
}

struct PairHash {
  std::size_t operator()(const BpeVocab::Merge& p) const {
    const std::size_t h = std::hash<std::string>{}(p.first);
    return h ^ (std::hash<std::string>{}(p.second) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2));
  }
};

}  // namespace

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

void write_lines(const std::filesystem::path& path, std::span<const std::string> lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
}

ParallelCorpus read_corpus(const std::filesystem::path& prefix, std::string domain) {
  ParallelCorpus c;
  c.source = read_lines(prefix.string() + ".src");
  c.target = read_lines(prefix.string() + ".tgt");
  c.domain = std::move(domain);
  if (c.source.size() != c.target.size()) {
    throw std::runtime_error("corpus " + prefix.string() + ": " + std::to_string(c.source.size()) +
                             " source lines but " + std::to_string(c.target.size()) + " target lines");
  }
  return c;
}

void write_corpus(const ParallelCorpus& corpus, const std::filesystem::path& prefix) {
  write_lines(prefix.string() + ".src", corpus.source);
  write_lines(prefix.string() + ".tgt", corpus.target);
}

std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

ParallelCorpus filter_by_length(const ParallelCorpus& corpus, std::size_t max_len) {
  if (max_len < 1) throw std::invalid_argument("filter_by_length: max_len must be >= 1");
  ParallelCorpus out;
  out.domain = corpus.domain;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (split_whitespace(corpus.source[i]).size() > max_len) continue;
    if (split_whitespace(corpus.target[i]).size() > max_len) continue;
    out.add(corpus.source[i], corpus.target[i]);
  }
  return out;
}

std::string remove_bpe(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  const std::string marker = std::string(BpeVocab::kContinuation) + " ";
  std::size_t i = 0;
  while (i < text.size()) {
    if (text.compare(i, marker.size(), marker) == 0) {
      i += marker.size();
    } else {
      out.push_back(text[i++]);
    }
  }
  if (ends_with(out, BpeVocab::kContinuation)) out.resize(out.size() - BpeVocab::kContinuation.size());
  return out;
}

BpeVocab BpeVocab::train(std::span<const std::string> sentences, std::size_t merge_count) {
  if (sentences.empty()) throw std::invalid_argument("train_bpe: empty corpus");

  std::map<std::string, std::size_t> word_counts;
  for (const auto& s : sentences) {
    for (auto& w : split_whitespace(s)) ++word_counts[w];
  }
  if (word_counts.empty()) throw std::invalid_argument("train_bpe: corpus has no words");

  std::vector<std::vector<std::string>> words;
  std::vector<std::size_t> counts;
  std::set<std::string> alphabet;
  for (const auto& [w, n] : word_counts) {
    for (auto& cp : code_points(w)) alphabet.insert(cp);
    words.push_back(initial_symbols(w));
    counts.push_back(n);
  }

  BpeVocab vocab;
  for (std::size_t m = 0; m < merge_count; ++m) {
    std::unordered_map<Merge, std::size_t, PairHash> pairs;
    for (std::size_t w = 0; w < words.size(); ++w) {
      const auto& syms = words[w];
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) pairs[{syms[i], syms[i + 1]}] += counts[w];
    }
    if (pairs.empty()) break;
    const Merge* best = nullptr;
    std::size_t best_count = 0;
    for (const auto& [p, n] : pairs) {
      if (n > best_count || (n == best_count && p < *best)) {
        best = &p;
        best_count = n;
      }
    }
    const Merge chosen = *best;
    for (auto& syms : words) apply_merge(syms, chosen);
    vocab.merges_.push_back(chosen);
  }

  vocab.tokens_ = {"<pad>", "<s>", "</s>", "<unk>"};
  std::set<std::string> seen(vocab.tokens_.begin(), vocab.tokens_.end());
  auto add = [&](std::string t) {
    if (seen.insert(t).second) vocab.tokens_.push_back(std::move(t));
  };
  for (const auto& c : alphabet) {
    add(c + std::string(kContinuation));
    add(c);
  }
  for (const auto& [l, r] : vocab.merges_) add(surface(l + r));
  vocab.build_index();
  return vocab;
}

void BpeVocab::build_index() {
  ids_.clear();
  rank_.clear();
  for (std::size_t i = 0; i < tokens_.size(); ++i) ids_.emplace(tokens_[i], static_cast<TokenId>(i));
  for (std::size_t i = 0; i < merges_.size(); ++i) rank_.emplace(merges_[i], i);
}

TokenId BpeVocab::id(std::string_view token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

std::vector<std::string> BpeVocab::segment_word(std::string_view word) const {
  auto syms = initial_symbols(word);
  while (syms.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      auto it = rank_.find({syms[i], syms[i + 1]});
      if (it != rank_.end()) best_rank = std::min(best_rank, it->second);
    }
    if (best_rank == std::numeric_limits<std::size_t>::max()) break;
    apply_merge(syms, merges_[best_rank]);
  }
  std::vector<std::string> out;
  out.reserve(syms.size());
  for (const auto& s : syms) out.push_back(surface(s));
  return out;
}

std::vector<std::string> BpeVocab::segment(std::string_view text) const {
  std::vector<std::string> out;
  for (const auto& w : split_whitespace(text)) {
    auto pieces = segment_word(w);
    out.insert(out.end(), pieces.begin(), pieces.end());
  }
  return out;
}

TokenIds BpeVocab::encode(std::string_view text) const {
  TokenIds ids;
  for (const auto& piece : segment(text)) ids.push_back(id(piece));
  return ids;
}

std::string BpeVocab::decode(std::span<const TokenId> ids) const {
  std::string joined;
  for (TokenId t : ids) {
    if (t == kPad || t == kBos || t == kEos) continue;
    if (!joined.empty()) joined.push_back(' ');
    joined += t < tokens_.size() ? tokens_[t] : tokens_[kUnk];
  }
  return remove_bpe(joined);
}

void BpeVocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "#tknn-bpe v1\n";
  out << "merges " << merges_.size() << '\n';
  for (const auto& [l, r] : merges_) out << l << ' ' << r << '\n';
  out << "tokens " << tokens_.size() << '\n';
  for (const auto& t : tokens_) out << t << '\n';
}

BpeVocab BpeVocab::load(const std::filesystem::path& path) {
  auto lines = read_lines(path);
  auto fail = [&](const std::string& why) -> BpeVocab {
    throw std::runtime_error("vocab " + path.string() + ": " + why);
  };
  if (lines.empty() || lines[0] != "#tknn-bpe v1") return fail("missing '#tknn-bpe v1' header");
  std::size_t pos = 1;
  auto read_count = [&](std::string_view keyword) -> std::size_t {
    if (pos >= lines.size()) fail("truncated before '" + std::string(keyword) + "'");
    const auto parts = split_whitespace(lines[pos]);
    if (parts.size() != 2 || parts[0] != keyword) fail("expected '" + std::string(keyword) + " <n>' at line " + std::to_string(pos + 1));
    ++pos;
    return std::stoul(parts[1]);
  };
  BpeVocab v;
  const std::size_t n_merges = read_count("merges");
  for (std::size_t i = 0; i < n_merges; ++i, ++pos) {
    if (pos >= lines.size()) fail("truncated merge list");
    const auto parts = split_whitespace(lines[pos]);
    if (parts.size() != 2) fail("malformed merge at line " + std::to_string(pos + 1));
    v.merges_.emplace_back(parts[0], parts[1]);
  }
  const std::size_t n_tokens = read_count("tokens");
  for (std::size_t i = 0; i < n_tokens; ++i, ++pos) {
    if (pos >= lines.size()) fail("truncated token table");
    v.tokens_.push_back(lines[pos]);
  }
  if (v.tokens_.size() < 4) fail("token table lacks special tokens");
  v.build_index();
  return v;
}

std::size_t EncodedCorpus::target_positions() const {
  std::size_t n = 0;
  for (const auto& t : target) n += t.size() - 1;
  return n;
}

TokenIds encode_source(const BpeVocab& vocab, std::string_view text) {
  TokenIds ids = vocab.encode(text);
  ids.push_back(BpeVocab::kEos);
  return ids;
}

TokenIds encode_target(const BpeVocab& vocab, std::string_view text) {
  TokenIds ids{BpeVocab::kBos};
  const TokenIds body = vocab.encode(text);
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(BpeVocab::kEos);
  return ids;
}

EncodedCorpus encode_corpus(const ParallelCorpus& corpus, const BpeVocab& source_vocab, const BpeVocab& target_vocab) {
  EncodedCorpus e;
  e.source.reserve(corpus.size());
  e.target.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    e.source.push_back(encode_source(source_vocab, corpus.source[i]));
    e.target.push_back(encode_target(target_vocab, corpus.target[i]));
  }
  return e;
}

}  // namespace tknn
