#include "tknn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace tknn {

std::string Shape::str() const {
  std::ostringstream os;
  os << "(" << rows << " x " << cols << ")";
  return os.str();
}

namespace {

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  std::ostringstream os;
  os << op << ": shape mismatch " << a.str() << " vs " << b.str();
  throw ShapeError(os.str());
}

}  // namespace

template <typename T>
Array<T> Array<T>::parameter(Mat<T> value) {
  auto n = std::make_shared<detail::Node<T>>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Array(std::move(n));
}

template <typename T>
Array<T> Array<T>::constant(Mat<T> value) {
  auto n = std::make_shared<detail::Node<T>>();
  n->value = std::move(value);
  return Array(std::move(n));
}

template <typename T>
T Array<T>::item() const {
  if (node_->value.size() != 1) {
    throw ShapeError("item: expected a scalar, got " + shape().str());
  }
  return node_->value(0, 0);
}

template <typename T>
Array<T> Tape<T>::make(Mat<T> value, std::initializer_list<const Array<T>*> inputs) {
  auto n = std::make_shared<detail::Node<T>>();
  n->value = std::move(value);
  if (record_) {
    for (const Array<T>* in : inputs) {
      if (in->requires_grad()) {
        n->requires_grad = true;
        break;
      }
    }
  }
  if (n->requires_grad) nodes_.push_back(n);
  return Array<T>(std::move(n));
}

template <typename T>
void Tape<T>::record(const Array<T>& out, std::function<void()> fn) {
  if (out.requires_grad()) out.node_->backward = std::move(fn);
}

template <typename T>
Array<T> Tape<T>::matmul(const Array<T>& a, const Array<T>& b) {
  if (a.cols() != b.rows()) shape_fail("matmul", a.shape(), b.shape());
  Array<T> out = make(a.value() * b.value(), {&a, &b});
  auto an = a.node_, bn = b.node_;
  auto* o = out.node_.get();
  record(out, [an, bn, o] {
    if (an->requires_grad) an->accumulate(o->grad * bn->value.transpose());
    if (bn->requires_grad) bn->accumulate(an->value.transpose() * o->grad);
  });
  return out;
}

template <typename T>
Array<T> Tape<T>::add(const Array<T>& a, const Array<T>& b) {
  if (a.shape() != b.shape()) shape_fail("add", a.shape(), b.shape());
  Array<T> out = make(a.value() + b.value(), {&a, &b});
  auto an = a.node_, bn = b.node_;
  auto* o = out.node_.get();
  record(out, [an, bn, o] {
    if (an->requires_grad) an->accumulate(o->grad);
    if (bn->requires_grad) bn->accumulate(o->grad);
  });
  return out;
}

template <typename T>
Array<T> Tape<T>::add_bias(const Array<T>& a, const Array<T>& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) shape_fail("add_bias", a.shape(), bias.shape());
  Mat<T> v = a.value();
  v.rowwise() += bias.value().row(0);
  Array<T> out = make(std::move(v), {&a, &bias});
  auto an = a.node_, bn = bias.node_;
  auto* o = out.node_.get();
  record(out, [an, bn, o] {
    if (an->requires_grad) an->accumulate(o->grad);
    if (bn->requires_grad) bn->accumulate(o->grad.colwise().sum());
  });
  return out;
}

template <typename T>
Array<T> Tape<T>::mul(const Array<T>& a, const Array<T>& b) {
  if (a.shape() != b.shape()) shape_fail("mul", a.shape(), b.shape());
  Array<T> out = make(a.value().cwiseProduct(b.value()), {&a, &b});
  auto an = a.node_, bn = b.node_;
  auto* o = out.node_.get();
  record(out, [an, bn, o] {
    if (an->requires_grad) an->accumulate(o->grad.cwiseProduct(bn->value));
    if (bn->requires_grad) bn->accumulate(o->grad.cwiseProduct(an->value));
  });
  return out;
}

template <typename T>
Array<T> Tape<T>::scale(const Array<T>& a, T s) {
  Array<T> out = make(a.value() * s, {&a});
  auto an = a.node_;
  auto* o = out.node_.get();
  record(out, [an, o, s] { an->accumulate(o->grad * s); });
  return out;
}

template <typename T>
Array<T> Tape<T>::relu(const Array<T>& a) {
  Array<T> out = make(a.value().cwiseMax(T(0)), {&a});
  auto an = a.node_;
  auto* o = out.node_.get();
  record(out, [an, o] {
    an->accumulate((an->value.array() > T(0)).select(o->grad, T(0)).matrix());
  });
  return out;
}

template <typename T>
Array<T> Tape<T>::log(const Array<T>& a) {
  Array<T> out = make(a.value().array().log().matrix(), {&a});
  auto an = a.node_;
  auto* o = out.node_.get();
  record(out, [an, o] { an->accumulate(o->grad.cwiseQuotient(an->value)); });
  return out;
}

namespace {

template <typename T>
Mat<T> row_softmax(const Mat<T>& x) {
  Mat<T> y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T mx = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - mx).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

}  // namespace

template <typename T>
Array<T> Tape<T>::softmax_rows(const Array<T>& a) {
  Array<T> out = make(row_softmax(a.value()), {&a});
  auto an = a.node_;
  auto* o = out.node_.get();
  record(out, [an, o] {
    const Mat<T>& y = o->value;
    Mat<T> gy = o->grad.cwiseProduct(y);
    Eigen::Matrix<T, Eigen::Dynamic, 1> s = gy.rowwise().sum();
    gy -= (y.array().colwise() * s.array()).matrix();
    an->accumulate(gy);
  });
  return out;
}

template <typename T>
Array<T> Tape<T>::log_softmax_rows(const Array<T>& a) {
  const Mat<T>& x = a.value();
  Mat<T> y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T mx = x.row(r).maxCoeff();
    const T lse = mx + std::log((x.row(r).array() - mx).exp().sum());
    y.row(r) = (x.row(r).array() - lse).matrix();
  }
  Array<T> out = make(std::move(y), {&a});
  auto an = a.node_;
  auto* o = out.node_.get();
  record(out, [an, o] {
    Mat<T> p = o->value.array().exp().matrix();
    Eigen::Matrix<T, Eigen::Dynamic, 1> s = o->grad.rowwise().sum();
    an->accumulate(o->grad - (p.array().colwise() * s.array()).matrix());
  });
  return out;
}

template <typename T>
Array<T> Tape<T>::gather_rows(const Array<T>& table, std::span<const std::uint32_t> ids) {
  const auto n_rows = table.rows();
  Mat<T> v(static_cast<Eigen::Index>(ids.size()), table.value().cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= n_rows) {
      throw ShapeError("gather_rows: id " + std::to_string(ids[i]) + " out of range for table " +
                       table.shape().str());
    }
    v.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
  }
  Array<T> out = make(std::move(v), {&table});
  auto tn = table.node_;
  auto* o = out.node_.get();
  std::vector<std::uint32_t> idx(ids.begin(), ids.end());
  record(out, [tn, o, idx = std::move(idx)] {
    Mat<T> g = Mat<T>::Zero(tn->value.rows(), tn->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += o->grad.row(static_cast<Eigen::Index>(i));
    tn->accumulate(g);
  });
  return out;
}

template <typename T>
Array<T> Tape<T>::pick(const Array<T>& a, std::span<const std::uint32_t> cols) {
  if (cols.size() != a.rows()) {
    shape_fail("pick", a.shape(), Shape{cols.size(), 1});
  }
  Mat<T> v(static_cast<Eigen::Index>(cols.size()), 1);
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (cols[i] >= a.cols()) {
      throw ShapeError("pick: column " + std::to_string(cols[i]) + " out of range for " + a.shape().str());
    }
    v(static_cast<Eigen::Index>(i), 0) = a.value()(static_cast<Eigen::Index>(i), cols[i]);
  }
  Array<T> out = make(std::move(v), {&a});
  auto an = a.node_;
  auto* o = out.node_.get();
  std::vector<std::uint32_t> idx(cols.begin(), cols.end());
  record(out, [an, o, idx = std::move(idx)] {
    Mat<T> g = Mat<T>::Zero(an->value.rows(), an->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g(static_cast<Eigen::Index>(i), idx[i]) = o->grad(static_cast<Eigen::Index>(i), 0);
    an->accumulate(g);
  });
  return out;
}

template <typename T>
Array<T> Tape<T>::sum(const Array<T>& a) {
  Mat<T> v(1, 1);
  v(0, 0) = a.value().sum();
  Array<T> out = make(std::move(v), {&a});
  auto an = a.node_;
  auto* o = out.node_.get();
  record(out, [an, o] {
    an->accumulate(Mat<T>::Constant(an->value.rows(), an->value.cols(), o->grad(0, 0)));
  });
  return out;
}

template <typename T>
Array<T> Tape<T>::layer_norm(const Array<T>& x, const Array<T>& gamma, const Array<T>& beta, T eps) {
  const auto n = x.value().rows();
  const auto d = x.value().cols();
  if (gamma.rows() != 1 || gamma.cols() != x.cols()) shape_fail("layer_norm", x.shape(), gamma.shape());
  if (beta.shape() != gamma.shape()) shape_fail("layer_norm", gamma.shape(), beta.shape());
  Mat<T> xhat(n, d);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mean = x.value().row(r).mean();
    const auto centered = (x.value().row(r).array() - mean).eval();
    const T var = centered.square().mean();
    inv_std(r) = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (centered * inv_std(r)).matrix();
  }
  Mat<T> y = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  y.rowwise() += beta.value().row(0);
  Array<T> out = make(std::move(y), {&x, &gamma, &beta});
  auto xn = x.node_, gn = gamma.node_, bn = beta.node_;
  auto* o = out.node_.get();
  record(out, [xn, gn, bn, o, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
    const Mat<T>& g = o->grad;
    if (gn->requires_grad) gn->accumulate(g.cwiseProduct(xhat).colwise().sum());
    if (bn->requires_grad) bn->accumulate(g.colwise().sum());
    if (xn->requires_grad) {
      Mat<T> gx = (g.array().rowwise() * gn->value.row(0).array()).matrix();
      const T inv_d = T(1) / static_cast<T>(gx.cols());
      for (Eigen::Index r = 0; r < gx.rows(); ++r) {
        const T m1 = gx.row(r).sum() * inv_d;
        const T m2 = gx.row(r).dot(xhat.row(r)) * inv_d;
        gx.row(r) = ((gx.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r)).matrix();
      }
      xn->accumulate(gx);
    }
  });
  return out;
}

template <typename T>
Array<T> Tape<T>::attention(const Array<T>& q, const Array<T>& k, const Array<T>& v,
                            std::span<const AttentionSegment> segments, std::size_t heads,
                            bool causal) {
  if (k.shape() != v.shape()) shape_fail("attention", k.shape(), v.shape());
  if (q.cols() != k.cols()) shape_fail("attention", q.shape(), k.shape());
  const std::size_t d = q.cols();
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  const auto dh = static_cast<Eigen::Index>(d / heads);
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  for (const auto& s : segments) {
    if (s.q_begin + s.q_len > q.rows() || s.k_begin + s.k_len > k.rows()) {
      throw ShapeError("attention: segment out of range");
    }
    if (causal && s.q_len > s.k_len) throw ShapeError("attention: causal segment needs q_len <= k_len");
    if (s.k_len == 0 && s.q_len > 0) throw ShapeError("attention: empty key range");
  }

  Mat<T> out = Mat<T>::Zero(q.value().rows(), q.value().cols());
  // Attention weights per (segment, head), kept for the backward pass.
  std::vector<Mat<T>> probs;
  probs.reserve(segments.size() * heads);
  for (const auto& s : segments) {
    const auto qb = static_cast<Eigen::Index>(s.q_begin), ql = static_cast<Eigen::Index>(s.q_len);
    const auto kb = static_cast<Eigen::Index>(s.k_begin), kl = static_cast<Eigen::Index>(s.k_len);
    // Causal: query i sees keys 0..(kl - ql + i).
    const Eigen::Index offset = kl - ql;
    for (std::size_t h = 0; h < heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h) * dh;
      Mat<T> sc = (q.value().block(qb, c0, ql, dh) * k.value().block(kb, c0, kl, dh).transpose()) * scale;
      if (causal) {
        for (Eigen::Index i = 0; i < ql; ++i) {
          for (Eigen::Index j = offset + i + 1; j < kl; ++j) sc(i, j) = -std::numeric_limits<T>::infinity();
        }
      }
      Mat<T> p = row_softmax(sc);
      out.block(qb, c0, ql, dh) = p * v.value().block(kb, c0, kl, dh);
      probs.push_back(std::move(p));
    }
  }

  Array<T> res = make(std::move(out), {&q, &k, &v});
  auto qn = q.node_, kn = k.node_, vn = v.node_;
  auto* o = res.node_.get();
  std::vector<AttentionSegment> segs(segments.begin(), segments.end());
  record(res, [qn, kn, vn, o, segs = std::move(segs), probs = std::move(probs), heads, dh, scale] {
    Mat<T> gq, gk, gv;
    if (qn->requires_grad) gq = Mat<T>::Zero(qn->value.rows(), qn->value.cols());
    if (kn->requires_grad) gk = Mat<T>::Zero(kn->value.rows(), kn->value.cols());
    if (vn->requires_grad) gv = Mat<T>::Zero(vn->value.rows(), vn->value.cols());
    std::size_t pi = 0;
    for (const auto& s : segs) {
      const auto qb = static_cast<Eigen::Index>(s.q_begin), ql = static_cast<Eigen::Index>(s.q_len);
      const auto kb = static_cast<Eigen::Index>(s.k_begin), kl = static_cast<Eigen::Index>(s.k_len);
      for (std::size_t h = 0; h < heads; ++h, ++pi) {
        const auto c0 = static_cast<Eigen::Index>(h) * dh;
        const Mat<T>& p = probs[pi];
        const auto go = o->grad.block(qb, c0, ql, dh);
        if (vn->requires_grad) gv.block(kb, c0, kl, dh) += p.transpose() * go;
        Mat<T> gp = go * vn->value.block(kb, c0, kl, dh).transpose();
        Eigen::Matrix<T, Eigen::Dynamic, 1> rs = gp.cwiseProduct(p).rowwise().sum();
        Mat<T> gs = (p.array() * (gp.array().colwise() - rs.array())).matrix() * scale;
        if (qn->requires_grad) gq.block(qb, c0, ql, dh) += gs * kn->value.block(kb, c0, kl, dh);
        if (kn->requires_grad) gk.block(kb, c0, kl, dh) += gs.transpose() * qn->value.block(qb, c0, ql, dh);
      }
    }
    if (qn->requires_grad) qn->accumulate(gq);
    if (kn->requires_grad) kn->accumulate(gk);
    if (vn->requires_grad) vn->accumulate(gv);
  });
  return res;
}

template <typename T>
Array<T> Tape<T>::custom(Mat<T> value, std::vector<Array<T>> inputs, Vjp vjp) {
  auto n = std::make_shared<detail::Node<T>>();
  n->value = std::move(value);
  if (record_) {
    n->requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                   [](const Array<T>& a) { return a.requires_grad(); });
  }
  if (n->requires_grad) nodes_.push_back(n);
  Array<T> out(std::move(n));
  auto* o = out.node_.get();
  record(out, [inputs = std::move(inputs), vjp = std::move(vjp), o] {
    std::vector<Mat<T>> grads = vjp(o->grad);
    if (grads.size() != inputs.size()) throw ShapeError("custom: vjp returned wrong gradient count");
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      if (!inputs[i].requires_grad()) continue;
      if (grads[i].rows() != inputs[i].node_->value.rows() || grads[i].cols() != inputs[i].node_->value.cols()) {
        shape_fail("custom", inputs[i].shape(), Shape{static_cast<std::size_t>(grads[i].rows()),
                                                      static_cast<std::size_t>(grads[i].cols())});
      }
      inputs[i].node_->accumulate(grads[i]);
    }
  });
  return out;
}

template <typename T>
void Tape<T>::backward(const Array<T>& loss) {
  if (!loss.defined() || loss.value().size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " +
                     (loss.defined() ? loss.shape().str() : std::string("undefined")));
  }
  if (!loss.requires_grad()) {
    nodes_.clear();
    return;
  }
  loss.node_->accumulate(Mat<T>::Ones(1, 1));
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    detail::Node<T>& n = **it;
    if (n.backward && n.grad.size() != 0) n.backward();
  }
  nodes_.clear();
}

double finite_diff_check(const std::function<Array<double>(Tape<double>&)>& loss,
                         std::span<Array<double>> params, double step) {
  for (auto& p : params) p.zero_grad();
  {
    Tape<double> tape;
    Array<double> l = loss(tape);
    tape.backward(l);
  }
  auto eval = [&] {
    Tape<double> tape(false);
    return loss(tape).item();
  };
  double worst = 0.0;
  for (auto& p : params) {
    const Mat<double> analytic = p.has_grad() ? p.grad() : Mat<double>::Zero(p.value().rows(), p.value().cols());
    Mat<double> numeric(analytic.rows(), analytic.cols());
    Mat<double>& v = p.mutable_value();
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const double orig = v.data()[i];
      v.data()[i] = orig + step;
      const double fp = eval();
      v.data()[i] = orig - step;
      const double fm = eval();
      v.data()[i] = orig;
      numeric.data()[i] = (fp - fm) / (2.0 * step);
    }
    const double denom = std::max({analytic.norm(), numeric.norm(), 1e-12});
    worst = std::max(worst, (analytic - numeric).norm() / denom);
  }
  return worst;
}

template class Array<float>;
template class Array<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace tknn
