#pragma once

// P_kNN from retrieved neighbours, interpolation with P_NMT, and beam search
// over either distribution.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tknn/datastore.hpp"
#include "tknn/model.hpp"
#include "tknn/tokenizer.hpp"

namespace tknn {

/// Probability per target-vocabulary id.
using TokenDistribution = std::vector<double>;

struct KnnParams {
  std::size_t k = 8;
  double temperature = 10.0;
  double lambda = 0.6;
  /// Use squared instead of plain Euclidean distance inside exp(-d/T).
  bool squared_distance = false;

  void validate() const;
};

/// P(v) proportional to the sum of exp(-d/T) over neighbours with value v.
TokenDistribution knn_distribution(const RetrievedSet& retrieved, double temperature, std::size_t vocab_size,
                                   bool squared_distance = false);

double max_knn_prob(std::span<const double> p_knn);

/// lambda * p_knn + (1 - lambda) * p_nmt.
TokenDistribution interpolate(std::span<const double> p_nmt, std::span<const double> p_knn, double lambda);

struct TranslateOptions {
  std::size_t beam = 1;
  /// Generated tokens, EOS included; also capped by the model's max_len.
  std::size_t max_len = 128;
  std::optional<KnnParams> knn;
  const Retriever* retriever = nullptr;
};

struct Hypothesis {
  TokenIds tokens;     // generated ids, without BOS and EOS
  double score = 0.0;  // mean log-probability per generated token
  bool finished = false;
};

/// Beam search per sentence (greedy for beam 1); finished hypotheses are
/// ranked by mean log-probability. All sentences are decoded together, with
/// one decoder call and one batched retrieval per step.
template <typename T>
std::vector<Hypothesis> translate_batch_ids(const NmtModel<T>& model, std::span<const TokenIds> sources,
                                            const TranslateOptions& options);

/// One-sentence batch.
template <typename T>
Hypothesis translate_ids(const NmtModel<T>& model, const TokenIds& source, const TranslateOptions& options);

template <typename T>
std::string translate(const NmtModel<T>& model, const BpeVocab& source_vocab, const BpeVocab& target_vocab,
                      std::string_view text, const TranslateOptions& options);

template <typename T>
std::vector<std::string> translate_all(const NmtModel<T>& model, const BpeVocab& source_vocab,
                                       const BpeVocab& target_vocab, std::span<const std::string> lines,
                                       const TranslateOptions& options, std::size_t batch_size = 64);

}  // namespace tknn
