#pragma once

// Corpus-level 4-gram BLEU over whitespace tokens.

#include <array>
#include <span>
#include <string>

namespace tknn {

struct BleuReport {
  double bleu = 0.0;                   // 0-100
  std::array<double, 4> precisions{};  // smoothed, 0-1
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  double brevity_penalty = 0.0;
  std::size_t hyp_length = 0;
  std::size_t ref_length = 0;
};

/// Clipped n-gram precisions; a zero match count for n >= 2 becomes
/// 1 / (total + 1). Brevity penalty exp(1 - r/c) when c <= r.
BleuReport corpus_bleu(std::span<const std::string> hypotheses, std::span<const std::string> references);

/// "BLEU = 34.12 61.0/40.2/28.1/19.9 (BP = 0.950, hyp 100, ref 105)".
std::string format_bleu(const BleuReport& r);

}  // namespace tknn
