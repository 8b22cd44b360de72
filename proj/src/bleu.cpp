#include "tknn/bleu.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>
#include <vector>

#include "tknn/tokenizer.hpp"

namespace tknn {

namespace {

using Counts = std::map<std::vector<std::string_view>, std::size_t>;

Counts ngrams(const std::vector<std::string>& words, std::size_t n) {
  Counts c;
  for (std::size_t i = 0; i + n <= words.size(); ++i) {
    std::vector<std::string_view> g(words.begin() + static_cast<std::ptrdiff_t>(i),
                                    words.begin() + static_cast<std::ptrdiff_t>(i + n));
    ++c[std::move(g)];
  }
  return c;
}

}  // namespace

BleuReport corpus_bleu(std::span<const std::string> hypotheses, std::span<const std::string> references) {
  if (hypotheses.size() != references.size()) {
    throw std::invalid_argument("corpus_bleu: " + std::to_string(hypotheses.size()) + " hypotheses but " +
                                std::to_string(references.size()) + " references");
  }
  if (references.empty()) throw std::invalid_argument("corpus_bleu: no references");
  BleuReport r;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto hyp = split_whitespace(hypotheses[s]);
    const auto ref = split_whitespace(references[s]);
    r.hyp_length += hyp.size();
    r.ref_length += ref.size();
    for (std::size_t n = 1; n <= 4; ++n) {
      const Counts h = ngrams(hyp, n);
      const Counts g = ngrams(ref, n);
      for (const auto& [gram, count] : h) {
        r.totals[n - 1] += count;
        auto it = g.find(gram);
        if (it != g.end()) r.matches[n - 1] += std::min(count, it->second);
      }
    }
  }
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 0; n < 4; ++n) {
    double p = 0.0;
    if (r.matches[n] > 0) {
      p = static_cast<double>(r.matches[n]) / static_cast<double>(r.totals[n]);
    } else if (n >= 1) {
      p = 1.0 / (static_cast<double>(r.totals[n]) + 1.0);
    }
    r.precisions[n] = p;
    if (p == 0.0) {
      zero = true;
    } else {
      log_sum += std::log(p) / 4.0;
    }
  }
  if (r.hyp_length == 0) {
    r.brevity_penalty = 0.0;
  } else if (r.hyp_length > r.ref_length) {
    r.brevity_penalty = 1.0;
  } else {
    r.brevity_penalty = std::exp(1.0 - static_cast<double>(r.ref_length) / static_cast<double>(r.hyp_length));
  }
  r.bleu = zero ? 0.0 : 100.0 * r.brevity_penalty * std::exp(log_sum);
  return r;
}

std::string format_bleu(const BleuReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "BLEU = %.2f %.1f/%.1f/%.1f/%.1f (BP = %.3f, hyp %zu, ref %zu)", r.bleu,
                100 * r.precisions[0], 100 * r.precisions[1], 100 * r.precisions[2], 100 * r.precisions[3],
                r.brevity_penalty, r.hyp_length, r.ref_length);
  return buf;
}

}  // namespace tknn
