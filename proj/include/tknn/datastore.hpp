#pragma once

// (key, value) datastore of decoder states and Euclidean top-k search, either
// exact or through an inverted-file index with optional 8-bit scalar codes.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tknn/model.hpp"
#include "tknn/tensor.hpp"
#include "tknn/tokenizer.hpp"

namespace tknn {

struct Neighbor {
  double distance;  // plain Euclidean distance
  TokenId value;
  std::uint32_t entry;

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

/// Ascending by (distance, entry).
using RetrievedSet = std::vector<Neighbor>;

/// Entry id that no query should exclude.
inline constexpr std::int64_t kNoExclusion = -1;

class Datastore {
 public:
  Datastore() = default;
  Datastore(Mat<float> keys, std::vector<TokenId> values, std::uint64_t generation);

  std::size_t size() const { return values_.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(keys_.cols()); }
  std::uint64_t generation() const { return generation_; }
  const Mat<float>& keys() const { return keys_; }
  const std::vector<TokenId>& values() const { return values_; }
  std::span<const float> key(std::size_t entry) const;

  /// Exact Euclidean distance between `query` and entry `entry`, in double.
  double distance(std::span<const float> query, std::size_t entry) const;

  /// Linear scan; ties go to the lower entry id.
  RetrievedSet search_exact(std::span<const float> query, std::size_t k) const;

  /// Same results as search_exact for each row of `queries`. Candidates come
  /// from a float GEMM expansion of the squared distance and are re-ranked
  /// exactly. `exclude[i]`, when given, removes one entry from query i.
  std::vector<RetrievedSet> search_exact_batch(const Mat<float>& queries, std::size_t k,
                                               std::span<const std::int64_t> exclude = {}) const;

  std::string serialize() const;
  static Datastore deserialize(std::string bytes, const std::string& what = "datastore");
  void save(const std::filesystem::path& path) const;
  static Datastore load(const std::filesystem::path& path);

  friend bool operator==(const Datastore& a, const Datastore& b) {
    return a.generation_ == b.generation_ && a.values_ == b.values_ && a.keys_ == b.keys_;
  }

 private:
  void check_query(std::size_t dim) const;

  Mat<float> keys_;
  std::vector<TokenId> values_;
  std::uint64_t generation_ = 0;
  std::vector<float> sq_norms_;
};

/// Keys are the f_kNN states of every predicted target position, in corpus
/// order; values are the tokens they predict (EOS included).
template <typename T>
Datastore build_datastore(const NmtModel<T>& model, const EncodedCorpus& corpus, std::size_t batch_size = 64);

struct IndexOptions {
  std::size_t n_clusters = 64;
  bool quantize = false;
  std::size_t kmeans_iters = 10;
  std::uint64_t seed = 1;
  /// Candidates kept for exact re-ranking, as a multiple of k.
  std::size_t rerank_factor = 4;
};

/// Inverted-file index over a datastore. Keys stay in the datastore; the
/// index holds centroids, inverted lists and (optionally) 8-bit codes of the
/// first min(64, dim) dimensions.
class ClusteredIndex {
 public:
  static constexpr std::size_t kMaxCodeDims = 64;

  static ClusteredIndex build(std::shared_ptr<const Datastore> store, const IndexOptions& options);

  RetrievedSet search(std::span<const float> query, std::size_t k, std::size_t nprobe) const;

  std::size_t n_clusters() const { return static_cast<std::size_t>(centroids_.rows()); }
  bool quantized() const { return !codes_.empty(); }
  std::size_t code_bytes() const { return code_dims_; }
  const Mat<float>& centroids() const { return centroids_; }
  /// Entries of cluster c.
  std::span<const std::uint32_t> list(std::size_t c) const;
  /// Sum of squared distances to the assigned centroid, one value per
  /// assignment pass (initial centroids first, final float centroids last).
  const std::vector<double>& objective_trace() const { return objective_; }
  const Datastore& datastore() const { return *store_; }
  std::size_t rerank_factor() const { return rerank_factor_; }
  void set_rerank_factor(std::size_t f);

  /// Distance between `query` and the decoded code of `entry`.
  double quantized_distance(std::span<const float> query, std::size_t entry) const;

  std::string serialize() const;
  /// `store` must be the datastore the index was built over.
  static ClusteredIndex deserialize(std::string bytes, std::shared_ptr<const Datastore> store,
                                    const std::string& what = "index");
  void save(const std::filesystem::path& path) const;
  static ClusteredIndex load(const std::filesystem::path& path, std::shared_ptr<const Datastore> store);

 private:
  std::shared_ptr<const Datastore> store_;
  Mat<float> centroids_;
  std::vector<std::uint64_t> offsets_;  // n_clusters + 1
  std::vector<std::uint32_t> entries_;  // grouped by cluster, ascending within a list
  std::size_t code_dims_ = 0;
  std::vector<float> code_min_, code_scale_;
  std::vector<std::uint8_t> codes_;  // size() x code_dims_, entry order
  std::vector<double> objective_;
  std::size_t rerank_factor_ = 4;
};

/// Search backend used by decoding and training.
class Retriever {
 public:
  virtual ~Retriever() = default;
  virtual const Datastore& datastore() const = 0;
  virtual RetrievedSet search(std::span<const float> query, std::size_t k) const = 0;
  virtual std::vector<RetrievedSet> search_batch(const Mat<float>& queries, std::size_t k,
                                                 std::span<const std::int64_t> exclude = {}) const;
  std::size_t dim() const { return datastore().dim(); }
  std::uint64_t generation() const { return datastore().generation(); }
};

class ExactRetriever final : public Retriever {
 public:
  explicit ExactRetriever(std::shared_ptr<const Datastore> store) : store_(std::move(store)) {}
  const Datastore& datastore() const override { return *store_; }
  RetrievedSet search(std::span<const float> query, std::size_t k) const override;
  std::vector<RetrievedSet> search_batch(const Mat<float>& queries, std::size_t k,
                                         std::span<const std::int64_t> exclude = {}) const override;

 private:
  std::shared_ptr<const Datastore> store_;
};

class ClusteredRetriever final : public Retriever {
 public:
  ClusteredRetriever(std::shared_ptr<const ClusteredIndex> index, std::size_t nprobe);
  const Datastore& datastore() const override { return index_->datastore(); }
  RetrievedSet search(std::span<const float> query, std::size_t k) const override;

 private:
  std::shared_ptr<const ClusteredIndex> index_;
  std::size_t nprobe_;
};

}  // namespace tknn
