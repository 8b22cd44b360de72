#include "tknn/knn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace tknn {

void KnnParams::validate() const {
  if (k < 1) throw std::invalid_argument("knn: k must be >= 1");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw std::invalid_argument("knn: temperature must be > 0");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("knn: lambda must be in [0, 1]");
}

TokenDistribution knn_distribution(const RetrievedSet& retrieved, double temperature, std::size_t vocab_size,
                                   bool squared_distance) {
  if (retrieved.empty()) throw std::invalid_argument("knn_distribution: empty retrieval");
  if (!(temperature > 0.0)) throw std::invalid_argument("knn_distribution: temperature must be > 0");
  auto metric = [&](double d) { return squared_distance ? d * d : d; };
  double nearest = std::numeric_limits<double>::infinity();
  for (const auto& n : retrieved) {
    if (n.value >= vocab_size) {
      throw std::invalid_argument("knn_distribution: value " + std::to_string(n.value) + " outside vocabulary of " +
                                  std::to_string(vocab_size));
    }
    nearest = std::min(nearest, metric(n.distance));
  }
  // Shifting by the nearest distance cancels in the normalization.
  TokenDistribution p(vocab_size, 0.0);
  double total = 0.0;
  for (const auto& n : retrieved) {
    const double w = std::exp(-(metric(n.distance) - nearest) / temperature);
    p[n.value] += w;
    total += w;
  }
  for (double& x : p) x /= total;
  return p;
}

double max_knn_prob(std::span<const double> p_knn) {
  if (p_knn.empty()) throw std::invalid_argument("max_knn_prob: empty distribution");
  return *std::max_element(p_knn.begin(), p_knn.end());
}

TokenDistribution interpolate(std::span<const double> p_nmt, std::span<const double> p_knn, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("interpolate: lambda must be in [0, 1]");
  if (p_nmt.size() != p_knn.size()) {
    throw std::invalid_argument("interpolate: vocabulary sizes differ (" + std::to_string(p_nmt.size()) + " vs " +
                                std::to_string(p_knn.size()) + ")");
  }
  TokenDistribution out(p_nmt.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = lambda * p_knn[i] + (1.0 - lambda) * p_nmt[i];
  return out;
}

namespace {

struct Beam {
  TokenIds prefix;  // starts with BOS
  double logprob = 0.0;
};

struct Expansion {
  double logprob;
  std::size_t beam;
  TokenId token;
};

double normalized(double logprob, std::size_t length) { return logprob / static_cast<double>(std::max<std::size_t>(length, 1)); }

}  // namespace

template <typename T>
std::vector<Hypothesis> translate_batch_ids(const NmtModel<T>& model, std::span<const TokenIds> sources,
                                            const TranslateOptions& options) {
  if (options.beam < 1) throw std::invalid_argument("translate: beam must be >= 1");
  if (options.max_len < 1) throw std::invalid_argument("translate: max_len must be >= 1");
  const std::size_t vocab = model.shape().tgt_vocab;
  if (options.knn) {
    options.knn->validate();
    if (options.retriever == nullptr) throw std::invalid_argument("translate: kNN decoding requested without a datastore");
    if (options.retriever->dim() != model.shape().d_model) {
      throw std::invalid_argument("translate: datastore dimension " + std::to_string(options.retriever->dim()) +
                                  " does not match model dimension " + std::to_string(model.shape().d_model));
    }
  }
  if (sources.empty()) return {};
  const bool use_knn = options.knn.has_value() && options.retriever->datastore().size() > 0;
  const std::size_t max_len = std::min<std::size_t>(options.max_len, model.shape().max_len - 1);

  typename NmtModel<T>::Memory memory;
  {
    Tape<T> tape(false);
    memory = model.encode(tape, sources);
  }

  struct Search {
    std::vector<Beam> live{{TokenIds{BpeVocab::kBos}, 0.0}};
    std::vector<Hypothesis> done;
  };
  std::vector<Search> searches(sources.size());
  const std::size_t width = std::min(options.beam, vocab);
  std::vector<TokenId> order(vocab);

  for (std::size_t step = 0; step < max_len; ++step) {
    // Every live hypothesis of every sentence goes through one decoder call.
    std::vector<TokenIds> prefixes;
    std::vector<std::size_t> owner;
    for (std::size_t s = 0; s < searches.size(); ++s) {
      for (const auto& b : searches[s].live) {
        prefixes.push_back(b.prefix);
        owner.push_back(s);
      }
    }
    if (prefixes.empty()) break;

    Tape<T> tape(false);
    const auto dec = model.decode(tape, memory, prefixes, owner);
    const Mat<T> probs = tape.softmax_rows(dec.logits).value();
    const auto d = static_cast<Eigen::Index>(model.shape().d_model);
    std::vector<Eigen::Index> rows(prefixes.size());
    std::vector<TokenDistribution> dists(prefixes.size());
    for (std::size_t i = 0; i < prefixes.size(); ++i) {
      rows[i] = static_cast<Eigen::Index>(dec.offsets[i] + prefixes[i].size() - 1);
      dists[i].assign(probs.row(rows[i]).data(), probs.row(rows[i]).data() + vocab);
    }
    if (use_knn) {
      Mat<float> queries(static_cast<Eigen::Index>(prefixes.size()), d);
      for (std::size_t i = 0; i < prefixes.size(); ++i) {
        queries.row(static_cast<Eigen::Index>(i)) = dec.hidden.value().row(rows[i]).template cast<float>();
      }
      const auto retrieved = options.retriever->search_batch(queries, options.knn->k);
      for (std::size_t i = 0; i < prefixes.size(); ++i) {
        if (retrieved[i].empty()) continue;  // p_nmt alone for this step
        const auto p_knn = knn_distribution(retrieved[i], options.knn->temperature, vocab, options.knn->squared_distance);
        dists[i] = interpolate(dists[i], p_knn, options.knn->lambda);
      }
    }

    std::size_t row = 0;
    for (auto& search : searches) {
      // Best `beam` continuations of each hypothesis, then the best overall.
      std::vector<Expansion> candidates;
      for (std::size_t i = 0; i < search.live.size(); ++i, ++row) {
        const auto& p = dists[row];
        for (std::size_t v = 0; v < vocab; ++v) order[v] = static_cast<TokenId>(v);
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(width), order.end(),
                          [&](TokenId a, TokenId b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
        for (std::size_t r = 0; r < width; ++r) {
          candidates.push_back({search.live[i].logprob + std::log(p[order[r]]), i, order[r]});
        }
      }
      if (candidates.empty()) continue;
      std::stable_sort(candidates.begin(), candidates.end(),
                       [](const Expansion& a, const Expansion& b) { return a.logprob > b.logprob; });

      std::vector<Beam> next;
      for (const auto& c : candidates) {
        if (next.size() + search.done.size() >= options.beam) break;
        TokenIds prefix = search.live[c.beam].prefix;
        if (c.token == BpeVocab::kEos) {
          const std::size_t length = prefix.size();  // generated tokens incl. EOS
          search.done.push_back({TokenIds(prefix.begin() + 1, prefix.end()), normalized(c.logprob, length), true});
        } else {
          prefix.push_back(c.token);
          next.push_back({std::move(prefix), c.logprob});
        }
      }
      search.live = search.done.size() >= options.beam ? std::vector<Beam>{} : std::move(next);
    }
  }

  std::vector<Hypothesis> out;
  out.reserve(searches.size());
  for (auto& search : searches) {
    for (const auto& b : search.live) {
      search.done.push_back({TokenIds(b.prefix.begin() + 1, b.prefix.end()), normalized(b.logprob, b.prefix.size() - 1), false});
    }
    // Highest mean log-probability; earlier hypotheses win ties.
    std::size_t best = 0;
    for (std::size_t i = 1; i < search.done.size(); ++i) {
      if (search.done[i].score > search.done[best].score) best = i;
    }
    out.push_back(std::move(search.done[best]));
  }
  return out;
}

template <typename T>
Hypothesis translate_ids(const NmtModel<T>& model, const TokenIds& source, const TranslateOptions& options) {
  return std::move(translate_batch_ids(model, std::span<const TokenIds>(&source, 1), options).front());
}

template <typename T>
std::string translate(const NmtModel<T>& model, const BpeVocab& source_vocab, const BpeVocab& target_vocab,
                      std::string_view text, const TranslateOptions& options) {
  const auto hyp = translate_ids(model, encode_source(source_vocab, text), options);
  return remove_bpe(target_vocab.decode(hyp.tokens));
}

template <typename T>
std::vector<std::string> translate_all(const NmtModel<T>& model, const BpeVocab& source_vocab,
                                       const BpeVocab& target_vocab, std::span<const std::string> lines,
                                       const TranslateOptions& options, std::size_t batch_size) {
  if (batch_size < 1) throw std::invalid_argument("translate_all: batch_size must be >= 1");
  std::vector<std::string> out;
  out.reserve(lines.size());
  for (std::size_t begin = 0; begin < lines.size(); begin += batch_size) {
    std::vector<TokenIds> sources;
    for (std::size_t i = begin; i < std::min(lines.size(), begin + batch_size); ++i) {
      sources.push_back(encode_source(source_vocab, lines[i]));
    }
    for (const auto& h : translate_batch_ids(model, sources, options)) out.push_back(remove_bpe(target_vocab.decode(h.tokens)));
  }
  return out;
}

template Hypothesis translate_ids(const NmtModel<float>&, const TokenIds&, const TranslateOptions&);
template Hypothesis translate_ids(const NmtModel<double>&, const TokenIds&, const TranslateOptions&);
template std::string translate(const NmtModel<float>&, const BpeVocab&, const BpeVocab&, std::string_view,
                               const TranslateOptions&);
template std::string translate(const NmtModel<double>&, const BpeVocab&, const BpeVocab&, std::string_view,
                               const TranslateOptions&);
template std::vector<std::string> translate_all(const NmtModel<float>&, const BpeVocab&, const BpeVocab&,
                                                std::span<const std::string>, const TranslateOptions&, std::size_t);
template std::vector<std::string> translate_all(const NmtModel<double>&, const BpeVocab&, const BpeVocab&,
                                                std::span<const std::string>, const TranslateOptions&, std::size_t);
template std::vector<Hypothesis> translate_batch_ids(const NmtModel<float>&, std::span<const TokenIds>,
                                                     const TranslateOptions&);
template std::vector<Hypothesis> translate_batch_ids(const NmtModel<double>&, std::span<const TokenIds>,
                                                     const TranslateOptions&);

}  // namespace tknn
