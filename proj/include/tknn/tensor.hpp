#pragma once

// Dense 2-D arrays with a reverse-mode tape.
//
// Every array is a matrix (rows x cols, row-major); vectors are 1 x n or
// n x 1. Broadcasting is limited to the row-wise bias add. A Tape records the
// operations applied to arrays that require gradients; Tape::backward walks
// the record in reverse creation order, which is a topological order by
// construction.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace tknn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;
  friend bool operator==(const Shape&, const Shape&) = default;
  std::size_t size() const { return rows * cols; }
  std::string str() const;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

template <typename T>
struct Node {
  Mat<T> value;
  Mat<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::function<void()> backward;

  void accumulate(const Mat<T>& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

}  // namespace detail

/// Handle to a value on (or a leaf beside) a tape. Copies share the node.
template <typename T>
class Array {
 public:
  Array() = default;

  /// A leaf that collects gradients across backward passes.
  static Array parameter(Mat<T> value);
  /// A leaf with no gradient.
  static Array constant(Mat<T> value);

  bool defined() const { return node_ != nullptr; }
  const Mat<T>& value() const { return node_->value; }
  /// Mutable access for optimizers and checkpoint loading only.
  Mat<T>& mutable_value() { return node_->value; }
  const Mat<T>& grad() const { return node_->grad; }
  Mat<T>& mutable_grad() { return node_->grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  void zero_grad() { node_->grad.resize(0, 0); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  Shape shape() const {
    return {static_cast<std::size_t>(node_->value.rows()),
            static_cast<std::size_t>(node_->value.cols())};
  }
  std::size_t rows() const { return static_cast<std::size_t>(node_->value.rows()); }
  std::size_t cols() const { return static_cast<std::size_t>(node_->value.cols()); }
  T item() const;

 private:
  template <typename>
  friend class Tape;
  explicit Array(std::shared_ptr<detail::Node<T>> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node<T>> node_;
};

/// One attention block: queries [q_begin, q_begin+q_len) attend keys
/// [k_begin, k_begin+k_len). Several segments may share a key range.
struct AttentionSegment {
  std::size_t q_begin = 0;
  std::size_t q_len = 0;
  std::size_t k_begin = 0;
  std::size_t k_len = 0;
};

template <typename T>
class Tape {
 public:
  /// With record == false no backward rules are stored (inference mode).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Array<T> matmul(const Array<T>& a, const Array<T>& b);
  Array<T> add(const Array<T>& a, const Array<T>& b);
  /// a (n x m) plus bias (1 x m) added to every row.
  Array<T> add_bias(const Array<T>& a, const Array<T>& bias);
  Array<T> mul(const Array<T>& a, const Array<T>& b);
  Array<T> scale(const Array<T>& a, T s);
  Array<T> relu(const Array<T>& a);
  Array<T> log(const Array<T>& a);
  Array<T> softmax_rows(const Array<T>& a);
  Array<T> log_softmax_rows(const Array<T>& a);
  /// Rows of `table` selected by `ids` (embedding lookup).
  Array<T> gather_rows(const Array<T>& table, std::span<const std::uint32_t> ids);
  /// out[i] = a(i, cols[i]); result is n x 1.
  Array<T> pick(const Array<T>& a, std::span<const std::uint32_t> cols);
  Array<T> sum(const Array<T>& a);
  Array<T> layer_norm(const Array<T>& x, const Array<T>& gamma, const Array<T>& beta,
                      T eps = T(1e-5));
  /// Multi-head scaled dot-product attention over row segments.
  Array<T> attention(const Array<T>& q, const Array<T>& k, const Array<T>& v,
                     std::span<const AttentionSegment> segments, std::size_t heads,
                     bool causal);

  /// User-defined primitive. `vjp` maps the output gradient to one gradient
  /// per input (same shapes as the inputs).
  using Vjp = std::function<std::vector<Mat<T>>(const Mat<T>& grad_out)>;
  Array<T> custom(Mat<T> value, std::vector<Array<T>> inputs, Vjp vjp);

  /// Populates gradients of every requires-grad leaf reachable from `loss`
  /// and clears the tape.
  void backward(const Array<T>& loss);
  void clear() { nodes_.clear(); }

 private:
  Array<T> make(Mat<T> value, std::initializer_list<const Array<T>*> inputs);
  void record(const Array<T>& out, std::function<void()> fn);

  bool record_;
  std::vector<std::shared_ptr<detail::Node<T>>> nodes_;
};

/// Max over parameter arrays of |analytic - numeric| / max(|analytic|,
/// |numeric|, 1e-12), with |.| the Frobenius norm of each array's gradient
/// and numeric gradients from central differences of the given step.
/// `loss` builds the scalar on the supplied tape from the current values of
/// `params`; it must be deterministic.
double finite_diff_check(const std::function<Array<double>(Tape<double>&)>& loss,
                         std::span<Array<double>> params, double step);

extern template class Array<float>;
extern template class Array<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace tknn
