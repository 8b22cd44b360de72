#pragma once

// Parallel corpora and BPE subword vocabularies.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace tknn {

using TokenId = std::uint32_t;
using TokenIds = std::vector<TokenId>;

struct ParallelCorpus {
  std::vector<std::string> source;
  std::vector<std::string> target;
  std::string domain;

  std::size_t size() const { return source.size(); }
  void add(std::string src, std::string tgt) {
    source.push_back(std::move(src));
    target.push_back(std::move(tgt));
  }
};

/// Reads `<prefix>.src` and `<prefix>.tgt`; line counts must agree.
ParallelCorpus read_corpus(const std::filesystem::path& prefix, std::string domain = {});
void write_corpus(const ParallelCorpus& corpus, const std::filesystem::path& prefix);
std::vector<std::string> read_lines(const std::filesystem::path& path);
void write_lines(const std::filesystem::path& path, std::span<const std::string> lines);

std::vector<std::string> split_whitespace(std::string_view text);

/// Drops pairs where either side has more than `max_len` whitespace tokens.
ParallelCorpus filter_by_length(const ParallelCorpus& corpus, std::size_t max_len);

/// Joins "@@ " continuation markers back into words.
std::string remove_bpe(std::string_view text);

class BpeVocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr std::string_view kContinuation = "@@";

  using Merge = std::pair<std::string, std::string>;

  BpeVocab() = default;

  /// Learns `merge_count` merges (fewer if the corpus runs out of pairs).
  /// Pairs are chosen by descending frequency, ties by lexicographic order.
  static BpeVocab train(std::span<const std::string> sentences, std::size_t merge_count);

  std::vector<std::string> segment(std::string_view text) const;
  TokenIds encode(std::string_view text) const;
  /// Special ids other than UNK are skipped.
  std::string decode(std::span<const TokenId> ids) const;

  std::size_t size() const { return tokens_.size(); }
  const std::vector<Merge>& merges() const { return merges_; }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  TokenId id(std::string_view token) const;

  void save(const std::filesystem::path& path) const;
  static BpeVocab load(const std::filesystem::path& path);

  friend bool operator==(const BpeVocab& a, const BpeVocab& b) {
    return a.merges_ == b.merges_ && a.tokens_ == b.tokens_;
  }

 private:
  void build_index();
  std::vector<std::string> segment_word(std::string_view word) const;

  std::vector<Merge> merges_;
  std::vector<std::string> tokens_;
  std::map<std::string, TokenId, std::less<>> ids_;
  std::map<Merge, std::size_t> rank_;
};

/// Id sequences for a parallel corpus: sources end with EOS, targets are
/// BOS ... EOS.
struct EncodedCorpus {
  std::vector<TokenIds> source;
  std::vector<TokenIds> target;
  std::size_t size() const { return source.size(); }
  /// Total predicted target positions (every target token after BOS).
  std::size_t target_positions() const;
};

EncodedCorpus encode_corpus(const ParallelCorpus& corpus, const BpeVocab& source_vocab, const BpeVocab& target_vocab);
TokenIds encode_source(const BpeVocab& vocab, std::string_view text);
TokenIds encode_target(const BpeVocab& vocab, std::string_view text);

}  // namespace tknn
