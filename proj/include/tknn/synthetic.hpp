#pragma once

// Two-domain synthetic translation task. The source language is SVO with
// prenominal adjectives; the target is SOV with postposed adjectives and
// determiners, case particles, a plural noun suffix and subject-verb number
// agreement. Content words follow a Zipf law per domain, and a subset of
// domain-A source words takes a different translation in domain B.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "tknn/tokenizer.hpp"

namespace tknn {

struct CorpusSplits {
  ParallelCorpus train, valid, test;
};

/// Domain label -> splits. Files are `<dir>/<domain>.<split>.{src,tgt}`.
using CorpusBundle = std::map<std::string, CorpusSplits>;

struct SyntheticOptions {
  std::uint64_t seed = 1;
  std::size_t train_a = 10000, valid_a = 300, test_a = 300;
  std::size_t train_b = 3000, valid_b = 300, test_b = 500;
  std::size_t nouns = 150, verbs = 40, adjectives = 40;
  /// Domain-A source words reused in B with a new translation.
  std::size_t shifted_nouns = 30, shifted_verbs = 8;
  double zipf = 1.1;
};

/// Domains "A" and "B". Deterministic in `options`.
CorpusBundle make_synthetic_bundle(const SyntheticOptions& options);

void write_bundle(const CorpusBundle& bundle, const std::filesystem::path& dir);
/// Reads every `<domain>.train.src` found in `dir` and its sibling splits.
CorpusBundle read_bundle(const std::filesystem::path& dir);

}  // namespace tknn
