#include "tknn/datastore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <random>
#include <stdexcept>

#include "tknn/binary_io.hpp"

namespace tknn {

namespace {

constexpr std::uint32_t kDatastoreVersion = 1;
constexpr std::uint32_t kIndexVersion = 1;

// (squared distance, entry) ordering used for every top-k selection.
template <typename D>
struct Candidate {
  D d2;
  std::uint32_t entry;
  bool operator<(const Candidate& o) const { return d2 < o.d2 || (d2 == o.d2 && entry < o.entry); }
};

// Keeps the `k` smallest candidates seen so far.
template <typename D>
class TopK {
 public:
  explicit TopK(std::size_t k) : k_(k) {}
  void push(D d2, std::uint32_t entry) {
    const Candidate<D> c{d2, entry};
    if (heap_.size() < k_) {
      heap_.push(c);
    } else if (c < heap_.top()) {
      heap_.pop();
      heap_.push(c);
    }
  }
  std::vector<Candidate<D>> sorted() {
    std::vector<Candidate<D>> out;
    out.reserve(heap_.size());
    while (!heap_.empty()) {
      out.push_back(heap_.top());
      heap_.pop();
    }
    std::reverse(out.begin(), out.end());
    return out;
  }

 private:
  std::size_t k_;
  std::priority_queue<Candidate<D>> heap_;
};

double squared_distance(std::span<const float> a, const float* b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += diff * diff;
  }
  return s;
}

RetrievedSet to_retrieved(const std::vector<Candidate<double>>& c, const std::vector<TokenId>& values) {
  RetrievedSet out;
  out.reserve(c.size());
  for (const auto& x : c) out.push_back({std::sqrt(x.d2), values[x.entry], x.entry});
  return out;
}

void check_k(std::size_t k) {
  if (k < 1) throw std::invalid_argument("k must be >= 1");
}

}  // namespace

Datastore::Datastore(Mat<float> keys, std::vector<TokenId> values, std::uint64_t generation)
    : keys_(std::move(keys)), values_(std::move(values)), generation_(generation) {
  if (static_cast<std::size_t>(keys_.rows()) != values_.size()) {
    throw std::invalid_argument("datastore: " + std::to_string(keys_.rows()) + " keys but " +
                                std::to_string(values_.size()) + " values");
  }
  sq_norms_.resize(values_.size());
  for (std::size_t i = 0; i < values_.size(); ++i) sq_norms_[i] = keys_.row(static_cast<Eigen::Index>(i)).squaredNorm();
}

std::span<const float> Datastore::key(std::size_t entry) const {
  return {keys_.data() + entry * dim(), dim()};
}

void Datastore::check_query(std::size_t d) const {
  if (d != dim()) {
    throw std::invalid_argument("query dimension " + std::to_string(d) + " does not match datastore dimension " +
                                std::to_string(dim()));
  }
}

double Datastore::distance(std::span<const float> query, std::size_t entry) const {
  check_query(query.size());
  return std::sqrt(squared_distance(query, keys_.data() + entry * dim()));
}

RetrievedSet Datastore::search_exact(std::span<const float> query, std::size_t k) const {
  check_query(query.size());
  check_k(k);
  TopK<double> top(k);
  for (std::size_t i = 0; i < size(); ++i) {
    top.push(squared_distance(query, keys_.data() + i * dim()), static_cast<std::uint32_t>(i));
  }
  return to_retrieved(top.sorted(), values_);
}

std::vector<RetrievedSet> Datastore::search_exact_batch(const Mat<float>& queries, std::size_t k,
                                                        std::span<const std::int64_t> exclude) const {
  check_query(static_cast<std::size_t>(queries.cols()));
  check_k(k);
  if (!exclude.empty() && exclude.size() != static_cast<std::size_t>(queries.rows())) {
    throw std::invalid_argument("search_exact_batch: exclude list size does not match query count");
  }
  const std::size_t n = size();
  const std::size_t pool = std::min(n, std::max(4 * k, k + 32) + (exclude.empty() ? 0 : 1));
  constexpr Eigen::Index kChunk = 256;

  std::vector<RetrievedSet> out(static_cast<std::size_t>(queries.rows()));
  Mat<float> dots;
  for (Eigen::Index begin = 0; begin < queries.rows(); begin += kChunk) {
    const Eigen::Index len = std::min(kChunk, queries.rows() - begin);
    dots.noalias() = queries.middleRows(begin, len) * keys_.transpose();
    for (Eigen::Index r = 0; r < len; ++r) {
      const std::size_t qi = static_cast<std::size_t>(begin + r);
      // |q|^2 is constant per row and left out of the approximate ranking.
      TopK<float> approx(pool);
      const float* row = dots.data() + r * dots.cols();
      for (std::size_t i = 0; i < n; ++i) approx.push(sq_norms_[i] - 2.0f * row[i], static_cast<std::uint32_t>(i));
      const std::span<const float> q(queries.data() + (begin + r) * queries.cols(), dim());
      TopK<double> exact(k);
      for (const auto& c : approx.sorted()) {
        if (!exclude.empty() && static_cast<std::int64_t>(c.entry) == exclude[qi]) continue;
        exact.push(squared_distance(q, keys_.data() + c.entry * dim()), c.entry);
      }
      out[qi] = to_retrieved(exact.sorted(), values_);
    }
  }
  return out;
}

std::string Datastore::serialize() const {
  ByteWriter w;
  w.put_bytes("TKDS");
  w.put<std::uint32_t>(kDatastoreVersion);
  w.put<std::uint64_t>(size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(dim()));
  w.put<std::uint64_t>(generation_);
  w.put_span<float>({keys_.data(), static_cast<std::size_t>(keys_.size())});
  w.put_span<TokenId>(values_);
  return w.bytes();
}

Datastore Datastore::deserialize(std::string bytes, const std::string& what) {
  ByteReader r(std::move(bytes), what);
  r.expect_magic("TKDS");
  r.expect_version(kDatastoreVersion);
  const auto n = r.get<std::uint64_t>("entry count");
  const auto d = r.get<std::uint32_t>("dimension");
  const auto generation = r.get<std::uint64_t>("generation");
  if (n > 0 && d == 0) r.fail("non-empty datastore with dimension 0");
  if (n > r.remaining() / (4ull * (d + 1ull))) {
    r.fail("truncated at offset " + std::to_string(r.offset()) + ": header declares " + std::to_string(n) +
           " entries of dimension " + std::to_string(d) + " but only " + std::to_string(r.remaining()) + " bytes follow");
  }
  Mat<float> keys(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  r.get_span<float>({keys.data(), static_cast<std::size_t>(keys.size())}, "keys");
  std::vector<TokenId> values(n);
  r.get_span<TokenId>(values, "values");
  r.expect_end();
  return Datastore(std::move(keys), std::move(values), generation);
}

void Datastore::save(const std::filesystem::path& path) const {
  ByteWriter w;
  w.put_bytes(serialize());
  w.write_file(path);
}

Datastore Datastore::load(const std::filesystem::path& path) {
  return deserialize(read_file(path), "datastore " + path.string());
}

template <typename T>
Datastore build_datastore(const NmtModel<T>& model, const EncodedCorpus& corpus, std::size_t batch_size) {
  if (corpus.size() == 0) throw std::invalid_argument("build_datastore: empty corpus");
  if (batch_size < 1) throw std::invalid_argument("build_datastore: batch_size must be >= 1");
  const auto d = static_cast<Eigen::Index>(model.shape().d_model);
  Mat<float> keys(static_cast<Eigen::Index>(corpus.target_positions()), d);
  std::vector<TokenId> values;
  values.reserve(static_cast<std::size_t>(keys.rows()));
  Eigen::Index row = 0;
  for (std::size_t begin = 0; begin < corpus.size(); begin += batch_size) {
    const std::size_t len = std::min(batch_size, corpus.size() - begin);
    Tape<T> tape(false);
    const auto out = model.forward_batch(tape, std::span(corpus.source).subspan(begin, len),
                                         std::span(corpus.target).subspan(begin, len));
    const auto& h = out.hidden.value();
    keys.middleRows(row, h.rows()) = h.template cast<float>();
    row += h.rows();
    values.insert(values.end(), out.labels.begin(), out.labels.end());
  }
  return Datastore(std::move(keys), std::move(values), model.generation());
}

template Datastore build_datastore(const NmtModel<float>&, const EncodedCorpus&, std::size_t);
template Datastore build_datastore(const NmtModel<double>&, const EncodedCorpus&, std::size_t);

// ---------------------------------------------------------------------------
// Clustered index

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Nearest centroid for every point, lower centroid id on ties. Returns the
// objective (sum of squared distances).
double assign(const MatD& x, const MatD& c, std::vector<std::uint32_t>& label, std::vector<double>& dist) {
  const Eigen::Index n = x.rows();
  label.assign(static_cast<std::size_t>(n), 0);
  dist.assign(static_cast<std::size_t>(n), 0.0);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t arg = 0;
    for (Eigen::Index j = 0; j < c.rows(); ++j) {
      const double d2 = (x.row(i) - c.row(j)).squaredNorm();
      if (d2 < best) {
        best = d2;
        arg = static_cast<std::uint32_t>(j);
      }
    }
    label[static_cast<std::size_t>(i)] = arg;
    dist[static_cast<std::size_t>(i)] = best;
    total += best;
  }
  return total;
}

// Recomputes means; an empty cluster takes the point of the largest cluster
// that lies farthest from that cluster's new mean.
void update(const MatD& x, MatD& c, std::vector<std::uint32_t>& label) {
  const auto k = static_cast<std::size_t>(c.rows());
  std::vector<std::size_t> count(k, 0);
  c.setZero();
  for (std::size_t i = 0; i < label.size(); ++i) {
    c.row(label[i]) += x.row(static_cast<Eigen::Index>(i));
    ++count[label[i]];
  }
  for (std::size_t j = 0; j < k; ++j) {
    if (count[j] > 0) c.row(static_cast<Eigen::Index>(j)) /= static_cast<double>(count[j]);
  }
  for (std::size_t j = 0; j < k; ++j) {
    if (count[j] > 0) continue;
    const auto largest = static_cast<std::size_t>(std::max_element(count.begin(), count.end()) - count.begin());
    if (count[largest] < 2) break;
    double far = -1.0;
    std::size_t pick = 0;
    for (std::size_t i = 0; i < label.size(); ++i) {
      if (label[i] != largest) continue;
      const double d2 = (x.row(static_cast<Eigen::Index>(i)) - c.row(static_cast<Eigen::Index>(largest))).squaredNorm();
      if (d2 > far) {
        far = d2;
        pick = i;
      }
    }
    c.row(static_cast<Eigen::Index>(j)) = x.row(static_cast<Eigen::Index>(pick));
    label[pick] = static_cast<std::uint32_t>(j);
    --count[largest];
    count[j] = 1;
  }
}

}  // namespace

ClusteredIndex ClusteredIndex::build(std::shared_ptr<const Datastore> store, const IndexOptions& options) {
  if (!store) throw std::invalid_argument("build_clustered_index: null datastore");
  const std::size_t n = store->size();
  if (options.n_clusters < 1) throw std::invalid_argument("build_clustered_index: n_clusters must be >= 1");
  if (options.n_clusters > n) {
    throw std::invalid_argument("build_clustered_index: n_clusters " + std::to_string(options.n_clusters) +
                                " exceeds datastore size " + std::to_string(n));
  }
  if (options.rerank_factor < 1) throw std::invalid_argument("build_clustered_index: rerank_factor must be >= 1");

  const MatD x = store->keys().cast<double>();
  const auto kc = static_cast<Eigen::Index>(options.n_clusters);

  // Seeded sampling of distinct entries (partial Fisher-Yates).
  std::mt19937_64 rng(options.seed);
  std::vector<std::uint32_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = static_cast<std::uint32_t>(i);
  MatD c(kc, x.cols());
  for (std::size_t j = 0; j < options.n_clusters; ++j) {
    const std::size_t pick = j + static_cast<std::size_t>(rng() % (n - j));
    std::swap(perm[j], perm[pick]);
    c.row(static_cast<Eigen::Index>(j)) = x.row(perm[j]);
  }

  ClusteredIndex index;
  index.store_ = store;
  index.rerank_factor_ = options.rerank_factor;
  std::vector<std::uint32_t> label;
  std::vector<double> dist;
  for (std::size_t it = 0; it < options.kmeans_iters; ++it) {
    index.objective_.push_back(assign(x, c, label, dist));
    update(x, c, label);
  }
  index.objective_.push_back(assign(x, c, label, dist));
  index.centroids_ = c.cast<float>();

  index.offsets_.assign(options.n_clusters + 1, 0);
  for (auto l : label) ++index.offsets_[l + 1];
  for (std::size_t j = 0; j < options.n_clusters; ++j) index.offsets_[j + 1] += index.offsets_[j];
  index.entries_.resize(n);
  std::vector<std::uint64_t> fill(index.offsets_.begin(), index.offsets_.end() - 1);
  for (std::size_t i = 0; i < n; ++i) index.entries_[fill[label[i]]++] = static_cast<std::uint32_t>(i);

  if (options.quantize) {
    const std::size_t cd = std::min(kMaxCodeDims, store->dim());
    index.code_dims_ = cd;
    index.code_min_.assign(cd, 0.0f);
    index.code_scale_.assign(cd, 0.0f);
    const auto& keys = store->keys();
    for (std::size_t j = 0; j < cd; ++j) {
      const auto col = keys.col(static_cast<Eigen::Index>(j));
      const float lo = col.minCoeff();
      const float hi = col.maxCoeff();
      index.code_min_[j] = lo;
      index.code_scale_[j] = (hi - lo) / 255.0f;
    }
    index.codes_.resize(n * cd);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < cd; ++j) {
        const float s = index.code_scale_[j];
        long q = 0;
        if (s > 0.0f) q = std::lround((keys(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) - index.code_min_[j]) / s);
        index.codes_[i * cd + j] = static_cast<std::uint8_t>(std::clamp(q, 0L, 255L));
      }
    }
  }
  return index;
}

std::span<const std::uint32_t> ClusteredIndex::list(std::size_t c) const {
  if (c >= n_clusters()) throw std::out_of_range("cluster id " + std::to_string(c) + " out of range");
  return {entries_.data() + offsets_[c], static_cast<std::size_t>(offsets_[c + 1] - offsets_[c])};
}

void ClusteredIndex::set_rerank_factor(std::size_t f) {
  if (f < 1) throw std::invalid_argument("rerank_factor must be >= 1");
  rerank_factor_ = f;
}

double ClusteredIndex::quantized_distance(std::span<const float> query, std::size_t entry) const {
  const std::uint8_t* code = codes_.data() + entry * code_dims_;
  double s = 0.0;
  for (std::size_t j = 0; j < code_dims_; ++j) {
    const double v = static_cast<double>(code_min_[j]) + static_cast<double>(code[j]) * static_cast<double>(code_scale_[j]);
    const double diff = static_cast<double>(query[j]) - v;
    s += diff * diff;
  }
  return std::sqrt(s);
}

RetrievedSet ClusteredIndex::search(std::span<const float> query, std::size_t k, std::size_t nprobe) const {
  const Datastore& ds = *store_;
  if (query.size() != ds.dim()) {
    throw std::invalid_argument("query dimension " + std::to_string(query.size()) +
                                " does not match datastore dimension " + std::to_string(ds.dim()));
  }
  check_k(k);
  if (nprobe < 1 || nprobe > n_clusters()) {
    throw std::invalid_argument("nprobe must be in [1, " + std::to_string(n_clusters()) + "], got " +
                                std::to_string(nprobe));
  }
  TopK<double> probes(nprobe);
  for (std::size_t c = 0; c < n_clusters(); ++c) {
    probes.push(squared_distance(query, centroids_.data() + c * ds.dim()), static_cast<std::uint32_t>(c));
  }
  const auto probed = probes.sorted();

  TopK<double> exact(k);
  if (quantized()) {
    TopK<double> pool(rerank_factor_ * k);
    for (const auto& p : probed) {
      for (auto e : list(p.entry)) {
        const double q = quantized_distance(query, e);
        pool.push(q * q, e);
      }
    }
    for (const auto& c : pool.sorted()) exact.push(squared_distance(query, ds.keys().data() + c.entry * ds.dim()), c.entry);
  } else {
    for (const auto& p : probed) {
      for (auto e : list(p.entry)) exact.push(squared_distance(query, ds.keys().data() + e * ds.dim()), e);
    }
  }
  return to_retrieved(exact.sorted(), ds.values());
}

std::string ClusteredIndex::serialize() const {
  ByteWriter w;
  w.put_bytes("TKIX");
  w.put<std::uint32_t>(kIndexVersion);
  w.put<std::uint64_t>(store_->size());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(store_->dim()));
  w.put<std::uint64_t>(store_->generation());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(n_clusters()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(code_dims_));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(rerank_factor_));
  w.put_span<float>({centroids_.data(), static_cast<std::size_t>(centroids_.size())});
  w.put_span<std::uint64_t>(offsets_);
  w.put_span<std::uint32_t>(entries_);
  w.put_span<float>(code_min_);
  w.put_span<float>(code_scale_);
  w.put_span<std::uint8_t>(codes_);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(objective_.size()));
  w.put_span<double>(objective_);
  return w.bytes();
}

ClusteredIndex ClusteredIndex::deserialize(std::string bytes, std::shared_ptr<const Datastore> store,
                                           const std::string& what) {
  if (!store) throw std::invalid_argument("index deserialize: null datastore");
  ByteReader r(std::move(bytes), what);
  r.expect_magic("TKIX");
  r.expect_version(kIndexVersion);
  const auto n = r.get<std::uint64_t>("entry count");
  const auto d = r.get<std::uint32_t>("dimension");
  const auto generation = r.get<std::uint64_t>("generation");
  if (n != store->size() || d != store->dim() || generation != store->generation()) {
    r.fail("index was built over a different datastore (N " + std::to_string(n) + ", dim " + std::to_string(d) +
           ", generation " + std::to_string(generation) + "; datastore has N " + std::to_string(store->size()) +
           ", dim " + std::to_string(store->dim()) + ", generation " + std::to_string(store->generation()) + ")");
  }
  const auto clusters = r.get<std::uint32_t>("cluster count");
  const auto code_dims = r.get<std::uint32_t>("code size");
  const auto rerank = r.get<std::uint32_t>("rerank factor");
  if (clusters < 1 || clusters > n) r.fail("cluster count " + std::to_string(clusters) + " out of range");
  if (clusters > r.remaining() / (4ull * d)) r.fail("truncated at offset " + std::to_string(r.offset()) + " while reading centroids");
  if (code_dims > std::min<std::size_t>(kMaxCodeDims, d)) r.fail("code size " + std::to_string(code_dims) + " out of range");
  if (rerank < 1) r.fail("rerank factor must be >= 1");

  ClusteredIndex index;
  index.store_ = std::move(store);
  index.rerank_factor_ = rerank;
  index.code_dims_ = code_dims;
  index.centroids_.resize(clusters, d);
  r.get_span<float>({index.centroids_.data(), static_cast<std::size_t>(index.centroids_.size())}, "centroids");
  index.offsets_.resize(clusters + 1);
  r.get_span<std::uint64_t>(index.offsets_, "list offsets");
  if (index.offsets_.front() != 0 || index.offsets_.back() != n ||
      !std::is_sorted(index.offsets_.begin(), index.offsets_.end())) {
    r.fail("inconsistent list offsets");
  }
  index.entries_.resize(n);
  r.get_span<std::uint32_t>(index.entries_, "list entries");
  std::vector<bool> seen(n, false);
  for (auto e : index.entries_) {
    if (e >= n || seen[e]) r.fail("inverted lists are not a partition of the entries");
    seen[e] = true;
  }
  index.code_min_.resize(code_dims);
  index.code_scale_.resize(code_dims);
  r.get_span<float>(index.code_min_, "code minima");
  r.get_span<float>(index.code_scale_, "code scales");
  index.codes_.resize(n * code_dims);
  r.get_span<std::uint8_t>(index.codes_, "codes");
  const auto trace = r.get<std::uint32_t>("objective count");
  index.objective_.resize(trace);
  r.get_span<double>(index.objective_, "objective trace");
  r.expect_end();
  return index;
}

void ClusteredIndex::save(const std::filesystem::path& path) const {
  ByteWriter w;
  w.put_bytes(serialize());
  w.write_file(path);
}

ClusteredIndex ClusteredIndex::load(const std::filesystem::path& path, std::shared_ptr<const Datastore> store) {
  return deserialize(read_file(path), std::move(store), "index " + path.string());
}

// ---------------------------------------------------------------------------
// Retrievers

std::vector<RetrievedSet> Retriever::search_batch(const Mat<float>& queries, std::size_t k,
                                                  std::span<const std::int64_t> exclude) const {
  if (!exclude.empty() && exclude.size() != static_cast<std::size_t>(queries.rows())) {
    throw std::invalid_argument("search_batch: exclude list size does not match query count");
  }
  std::vector<RetrievedSet> out;
  out.reserve(static_cast<std::size_t>(queries.rows()));
  for (Eigen::Index r = 0; r < queries.rows(); ++r) {
    const std::span<const float> q(queries.data() + r * queries.cols(), static_cast<std::size_t>(queries.cols()));
    const std::int64_t skip = exclude.empty() ? kNoExclusion : exclude[static_cast<std::size_t>(r)];
    RetrievedSet s = search(q, skip == kNoExclusion ? k : k + 1);
    if (skip != kNoExclusion) {
      std::erase_if(s, [&](const Neighbor& nb) { return static_cast<std::int64_t>(nb.entry) == skip; });
      if (s.size() > k) s.resize(k);
    }
    out.push_back(std::move(s));
  }
  return out;
}

RetrievedSet ExactRetriever::search(std::span<const float> query, std::size_t k) const {
  return store_->search_exact(query, k);
}

std::vector<RetrievedSet> ExactRetriever::search_batch(const Mat<float>& queries, std::size_t k,
                                                       std::span<const std::int64_t> exclude) const {
  return store_->search_exact_batch(queries, k, exclude);
}

ClusteredRetriever::ClusteredRetriever(std::shared_ptr<const ClusteredIndex> index, std::size_t nprobe)
    : index_(std::move(index)), nprobe_(nprobe) {
  if (!index_) throw std::invalid_argument("ClusteredRetriever: null index");
  if (nprobe_ < 1 || nprobe_ > index_->n_clusters()) {
    throw std::invalid_argument("nprobe must be in [1, " + std::to_string(index_->n_clusters()) + "], got " +
                                std::to_string(nprobe_));
  }
}

RetrievedSet ClusteredRetriever::search(std::span<const float> query, std::size_t k) const {
  return index_->search(query, k, nprobe_);
}

}  // namespace tknn
