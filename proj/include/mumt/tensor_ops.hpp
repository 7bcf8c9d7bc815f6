#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstring>

#include "mumt/tensor.hpp"

// Primitive ops with hand-derived gradients. The closed primitive set is:
// matmul, add, mul, transpose, reshape, concat, slice, sum/mean over axis,
// relu, softmax, layer_norm, exp, log, gather. Everything else in the model
// (sigmoid, log-softmax, batch norm, conv1d) is composed from these, so its
// gradients come out of the same machinery the finite-difference oracle
// checks.

namespace mumt::ops {

namespace detail {

template <typename S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Map = Eigen::Map<EMat<S>>;
template <typename S>
using CMap = Eigen::Map<const EMat<S>>;

inline int64_t normalize_axis(int64_t axis, size_t rank) {
  int64_t r = int64_t(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(r));
  return axis;
}

// Decompose a shape around `axis` into [outer, n, inner].
inline void axis_strides(const Shape& s, int64_t axis, int64_t& outer, int64_t& n,
                         int64_t& inner) {
  outer = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s[i];
  n = s[axis];
  inner = 1;
  for (size_t i = size_t(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

// True when `suffix` equals the trailing dims of `shape`.
inline bool is_suffix(const Shape& shape, const Shape& suffix) {
  if (suffix.size() > shape.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), shape.rbegin());
}

template <typename S>
Tensor<S> make_result(Shape shape, std::vector<S> data, const char* op,
                      std::vector<std::shared_ptr<TensorNode<S>>> parents,
                      std::function<void(TensorNode<S>&)> backward_fn) {
  Tensor<S> out = Tensor<S>::from_data(std::move(shape), std::move(data));
  bool track = grad_mode_enabled();
  bool any = false;
  if (track)
    for (auto& p : parents)
      if (p->requires_grad) any = true;
  if (any) {
    auto& node = *out.node();
    node.requires_grad = true;
    node.is_leaf = false;
    node.op = op;
    node.parents = std::move(parents);
    node.backward_fn = std::move(backward_fn);
  }
  return out;
}

template <typename S>
void accum(const std::shared_ptr<TensorNode<S>>& p, const std::vector<S>& v) {
  if (!p->requires_grad) return;
  mumt::detail::accumulate_grad(*p, v.data(), v.size());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

// a [.. x m x k] @ b [k x n]  (leading dims of a flattened into rows), or
// a [B x m x k] @ b [B x k x n] batch-matched. Gradients: da = g.b^T, db = a^T.g.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto fail = [&] {
    throw ShapeError("matmul shape mismatch: " + shape_str(sa) + " @ " + shape_str(sb));
  };
  if (sa.size() < 2 || sb.size() < 2) fail();

  if (sb.size() == 2) {
    int64_t k = sa.back(), n = sb[1];
    if (sb[0] != k) fail();
    int64_t rows = a.numel() / k;
    std::vector<S> out(size_t(rows) * n);
    detail::CMap<S> A(a.data().data(), rows, k), B(b.data().data(), k, n);
    detail::Map<S>(out.data(), rows, n).noalias() = A * B;
    Shape os(sa.begin(), sa.end() - 1);
    os.push_back(n);
    auto an = a.node(), bn = b.node();
    return detail::make_result<S>(
        std::move(os), std::move(out), "matmul", {an, bn},
        [an, bn, rows, k, n](TensorNode<S>& self) {
          detail::CMap<S> G(self.grad.data(), rows, n);
          detail::CMap<S> A(an->data.data(), rows, k), B(bn->data.data(), k, n);
          if (an->requires_grad) {
            std::vector<S> da(size_t(rows) * k);
            detail::Map<S>(da.data(), rows, k).noalias() = G * B.transpose();
            detail::accum(an, da);
          }
          if (bn->requires_grad) {
            std::vector<S> db(size_t(k) * n);
            detail::Map<S>(db.data(), k, n).noalias() = A.transpose() * G;
            detail::accum(bn, db);
          }
        });
  }

  if (sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] && sa[2] == sb[1]) {
    int64_t bt = sa[0], m = sa[1], k = sa[2], n = sb[2];
    std::vector<S> out(size_t(bt) * m * n);
    for (int64_t i = 0; i < bt; ++i) {
      detail::CMap<S> A(a.data().data() + i * m * k, m, k);
      detail::CMap<S> B(b.data().data() + i * k * n, k, n);
      detail::Map<S>(out.data() + i * m * n, m, n).noalias() = A * B;
    }
    auto an = a.node(), bn = b.node();
    return detail::make_result<S>(
        {bt, m, n}, std::move(out), "matmul", {an, bn},
        [an, bn, bt, m, k, n](TensorNode<S>& self) {
          std::vector<S> da, db;
          if (an->requires_grad) da.assign(size_t(bt) * m * k, S(0));
          if (bn->requires_grad) db.assign(size_t(bt) * k * n, S(0));
          for (int64_t i = 0; i < bt; ++i) {
            detail::CMap<S> G(self.grad.data() + i * m * n, m, n);
            detail::CMap<S> A(an->data.data() + i * m * k, m, k);
            detail::CMap<S> B(bn->data.data() + i * k * n, k, n);
            if (an->requires_grad)
              detail::Map<S>(da.data() + i * m * k, m, k).noalias() = G * B.transpose();
            if (bn->requires_grad)
              detail::Map<S>(db.data() + i * k * n, k, n).noalias() = A.transpose() * G;
          }
          if (an->requires_grad) detail::accum(an, da);
          if (bn->requires_grad) detail::accum(bn, db);
        });
  }
  fail();
  return {};  // unreachable
}

// ---------------------------------------------------------------------------
// elementwise add/mul (equal shape or suffix broadcast), scalar variants
// ---------------------------------------------------------------------------

namespace detail {

// Shared forward/backward for add and mul under the suffix-broadcast rule.
template <typename S, bool kMul>
Tensor<S> binary_op(const Tensor<S>& a, const Tensor<S>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (!is_suffix(sa, sb))
    throw ShapeError(std::string(kMul ? "mul" : "add") + " shape mismatch: " + shape_str(sa) +
                     " vs " + shape_str(sb) +
                     " (shapes must match or the second must be a trailing suffix)");
  int64_t nb = b.numel();
  int64_t reps = a.numel() / nb;
  std::vector<S> out(a.data().begin(), a.data().end());
  const S* pb = b.data().data();
  S* po = out.data();
#pragma omp parallel for if (reps * nb > (1 << 16))
  for (int64_t r = 0; r < reps; ++r)
    for (int64_t i = 0; i < nb; ++i) {
      if constexpr (kMul)
        po[r * nb + i] *= pb[i];
      else
        po[r * nb + i] += pb[i];
    }
  auto an = a.node(), bn = b.node();
  return make_result<S>(
      sa, std::move(out), kMul ? "mul" : "add", {an, bn},
      [an, bn, reps, nb](TensorNode<S>& self) {
        const S* g = self.grad.data();
        if (an->requires_grad) {
          if constexpr (kMul) {
            std::vector<S> da(self.grad.size());
            const S* pb = bn->data.data();
#pragma omp parallel for if (reps * nb > (1 << 16))
            for (int64_t r = 0; r < reps; ++r)
              for (int64_t i = 0; i < nb; ++i) da[r * nb + i] = g[r * nb + i] * pb[i];
            accum(an, da);
          } else {
            mumt::detail::accumulate_grad(*an, g, self.grad.size());
          }
        }
        if (bn->requires_grad) {
          std::vector<S> db(size_t(nb), S(0));
          const S* pa = an->data.data();
          for (int64_t r = 0; r < reps; ++r)
            for (int64_t i = 0; i < nb; ++i) {
              if constexpr (kMul)
                db[i] += g[r * nb + i] * pa[r * nb + i];
              else
                db[i] += g[r * nb + i];
            }
          accum(bn, db);
        }
      });
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S, false>(a, b);
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S, true>(a, b);
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  std::vector<S> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += c;
  auto an = a.node();
  return detail::make_result<S>(a.shape(), std::move(out), "add_scalar", {an},
                                [an](TensorNode<S>& self) {
                                  detail::accum(an, self.grad);
                                });
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, S c) {
  std::vector<S> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= c;
  auto an = a.node();
  return detail::make_result<S>(a.shape(), std::move(out), "mul_scalar", {an},
                                [an, c](TensorNode<S>& self) {
                                  if (!an->requires_grad) return;
                                  std::vector<S> da(self.grad.size());
                                  for (size_t i = 0; i < da.size(); ++i) da[i] = self.grad[i] * c;
                                  detail::accum(an, da);
                                });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return mul_scalar(a, S(-1));
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, neg(b));
}

// ---------------------------------------------------------------------------
// transpose / reshape / concat / slice / gather
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> transpose(const Tensor<S>& a, int64_t dim0, int64_t dim1) {
  const Shape& s = a.shape();
  int64_t d0 = detail::normalize_axis(dim0, s.size());
  int64_t d1 = detail::normalize_axis(dim1, s.size());
  if (d0 == d1) return a;
  if (d0 > d1) std::swap(d0, d1);

  Shape os = s;
  std::swap(os[d0], os[d1]);
  // View the shape as [outer, n0, mid, n1, inner] with n0/n1 the swapped dims.
  int64_t outer = 1, mid = 1, inner = 1;
  for (int64_t i = 0; i < d0; ++i) outer *= s[i];
  for (int64_t i = d0 + 1; i < d1; ++i) mid *= s[i];
  for (size_t i = size_t(d1) + 1; i < s.size(); ++i) inner *= s[i];
  int64_t n0 = s[d0], n1 = s[d1];

  auto permute = [outer, n0, mid, n1, inner](const S* src, S* dst) {
#pragma omp parallel for if (outer * n0 * mid * n1 * inner > (1 << 16))
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i1 = 0; i1 < n1; ++i1)
        for (int64_t m = 0; m < mid; ++m)
          for (int64_t i0 = 0; i0 < n0; ++i0) {
            const S* ps = src + ((((o * n0 + i0) * mid + m) * n1 + i1) * inner);
            S* pd = dst + ((((o * n1 + i1) * mid + m) * n0 + i0) * inner);
            std::memcpy(pd, ps, sizeof(S) * size_t(inner));
          }
  };

  std::vector<S> out(a.data().size());
  permute(a.data().data(), out.data());
  auto an = a.node();
  return detail::make_result<S>(
      std::move(os), std::move(out), "transpose", {an},
      [an, outer, n0, mid, n1, inner](TensorNode<S>& self) {
        if (!an->requires_grad) return;
        // Inverse permutation: swap the same two axes back.
        std::vector<S> da(self.grad.size());
        const S* src = self.grad.data();
        S* dst = da.data();
#pragma omp parallel for if (outer * n0 * mid * n1 * inner > (1 << 16))
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t i0 = 0; i0 < n0; ++i0)
            for (int64_t m = 0; m < mid; ++m)
              for (int64_t i1 = 0; i1 < n1; ++i1) {
                const S* ps = src + ((((o * n1 + i1) * mid + m) * n0 + i0) * inner);
                S* pd = dst + ((((o * n0 + i0) * mid + m) * n1 + i1) * inner);
                std::memcpy(pd, ps, sizeof(S) * size_t(inner));
              }
        detail::accum(an, da);
      });
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel(shape) != a.numel())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                     " changes element count");
  std::vector<S> out(a.data().begin(), a.data().end());
  auto an = a.node();
  return detail::make_result<S>(std::move(shape), std::move(out), "reshape", {an},
                                [an](TensorNode<S>& self) {
                                  detail::accum(an, self.grad);
                                });
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int64_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  int64_t ax = detail::normalize_axis(axis, s0.size());
  int64_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size())
      throw ShapeError("concat rank mismatch: " + shape_str(s0) + " vs " + shape_str(s));
    for (size_t i = 0; i < s.size(); ++i)
      if (int64_t(i) != ax && s[i] != s0[i])
        throw ShapeError("concat shape mismatch off axis: " + shape_str(s0) + " vs " +
                         shape_str(s));
    total += s[ax];
  }
  Shape os = s0;
  os[ax] = total;
  int64_t outer, n, inner;
  detail::axis_strides(os, ax, outer, n, inner);
  std::vector<S> out(size_t(numel(os)));
  std::vector<int64_t> offsets(parts.size() + 1, 0);
  for (size_t k = 0; k < parts.size(); ++k) offsets[k + 1] = offsets[k] + parts[k].shape()[ax];
  for (size_t k = 0; k < parts.size(); ++k) {
    int64_t nk = parts[k].shape()[ax];
    const S* src = parts[k].data().data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + (o * n + offsets[k]) * inner, src + o * nk * inner,
                  sizeof(S) * size_t(nk * inner));
  }
  std::vector<std::shared_ptr<TensorNode<S>>> ps;
  ps.reserve(parts.size());
  for (const auto& p : parts) ps.push_back(p.node());
  return detail::make_result<S>(
      std::move(os), std::move(out), "concat", ps,
      [ps, offsets, outer, n, inner](TensorNode<S>& self) {
        for (size_t k = 0; k < ps.size(); ++k) {
          if (!ps[k]->requires_grad) continue;
          int64_t nk = offsets[k + 1] - offsets[k];
          std::vector<S> dp(size_t(outer * nk * inner));
          for (int64_t o = 0; o < outer; ++o)
            std::memcpy(dp.data() + o * nk * inner,
                        self.grad.data() + (o * n + offsets[k]) * inner,
                        sizeof(S) * size_t(nk * inner));
          detail::accum(ps[k], dp);
        }
      });
}

template <typename S>
Tensor<S> slice(const Tensor<S>& a, int64_t axis, int64_t start, int64_t len) {
  const Shape& s = a.shape();
  int64_t ax = detail::normalize_axis(axis, s.size());
  if (start < 0 || len <= 0 || start + len > s[ax])
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(start + len) +
                     ") out of range for axis " + std::to_string(ax) + " of " + shape_str(s));
  Shape os = s;
  os[ax] = len;
  int64_t outer, n, inner;
  detail::axis_strides(s, ax, outer, n, inner);
  std::vector<S> out(size_t(numel(os)));
  const S* src = a.data().data();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * len * inner, src + (o * n + start) * inner,
                sizeof(S) * size_t(len * inner));
  auto an = a.node();
  return detail::make_result<S>(
      std::move(os), std::move(out), "slice", {an},
      [an, outer, n, inner, start, len](TensorNode<S>& self) {
        if (!an->requires_grad) return;
        if (an->grad.empty()) an->grad.assign(an->data.size(), S(0));
        for (int64_t o = 0; o < outer; ++o) {
          S* dst = an->grad.data() + (o * n + start) * inner;
          const S* g = self.grad.data() + o * len * inner;
          for (int64_t i = 0; i < len * inner; ++i) dst[i] += g[i];
        }
      });
}

// out[.., k, ..] = a[.., indices[k], ..] along `axis`.
template <typename S>
Tensor<S> gather(const Tensor<S>& a, int64_t axis, const std::vector<int64_t>& indices) {
  const Shape& s = a.shape();
  int64_t ax = detail::normalize_axis(axis, s.size());
  int64_t outer, n, inner;
  detail::axis_strides(s, ax, outer, n, inner);
  for (int64_t idx : indices)
    if (idx < 0 || idx >= n)
      throw ShapeError("gather index " + std::to_string(idx) + " out of range for axis size " +
                       std::to_string(n));
  int64_t m = int64_t(indices.size());
  if (m == 0) throw ShapeError("gather with empty index list");
  Shape os = s;
  os[ax] = m;
  std::vector<S> out(size_t(outer * m * inner));
  const S* src = a.data().data();
#pragma omp parallel for if (outer * m * inner > (1 << 16))
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t k = 0; k < m; ++k)
      std::memcpy(out.data() + (o * m + k) * inner, src + (o * n + indices[k]) * inner,
                  sizeof(S) * size_t(inner));
  auto an = a.node();
  return detail::make_result<S>(
      std::move(os), std::move(out), "gather", {an},
      [an, indices, outer, n, inner, m](TensorNode<S>& self) {
        if (!an->requires_grad) return;
        if (an->grad.empty()) an->grad.assign(an->data.size(), S(0));
        // Scatter-add; sequential over repeated indices for determinism.
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t k = 0; k < m; ++k) {
            S* dst = an->grad.data() + (o * n + indices[k]) * inner;
            const S* g = self.grad.data() + (o * m + k) * inner;
            for (int64_t i = 0; i < inner; ++i) dst[i] += g[i];
          }
      });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& a, int64_t axis, bool keepdim = false) {
  const Shape& s = a.shape();
  int64_t ax = detail::normalize_axis(axis, s.size());
  int64_t outer, n, inner;
  detail::axis_strides(s, ax, outer, n, inner);
  Shape os;
  for (size_t i = 0; i < s.size(); ++i) {
    if (int64_t(i) == ax) {
      if (keepdim) os.push_back(1);
    } else {
      os.push_back(s[i]);
    }
  }
  if (os.empty()) os.push_back(1);
  std::vector<S> out(size_t(outer * inner));
  const S* src = a.data().data();
#pragma omp parallel for if (outer * inner > (1 << 12))
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < inner; ++j) {
      double acc = 0;  // double accumulator keeps long reductions tight
      for (int64_t i = 0; i < n; ++i) acc += double(src[(o * n + i) * inner + j]);
      out[o * inner + j] = S(acc);
    }
  auto an = a.node();
  return detail::make_result<S>(
      std::move(os), std::move(out), "sum", {an},
      [an, outer, n, inner](TensorNode<S>& self) {
        if (!an->requires_grad) return;
        if (an->grad.empty()) an->grad.assign(an->data.size(), S(0));
        const S* g = self.grad.data();
#pragma omp parallel for if (outer * n * inner > (1 << 16))
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < inner; ++j) an->grad[(o * n + i) * inner + j] += g[o * inner + j];
      });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& a, int64_t axis, bool keepdim = false) {
  int64_t n = a.shape()[detail::normalize_axis(axis, a.rank())];
  return mul_scalar(sum(a, axis, keepdim), S(1) / S(n));
}

template <typename S>
Tensor<S> sum_all(const Tensor<S>& a) {
  double acc = 0;
  for (S v : a.data()) acc += double(v);
  auto an = a.node();
  return detail::make_result<S>({1}, {S(acc)}, "sum_all", {an},
                                [an](TensorNode<S>& self) {
                                  if (!an->requires_grad) return;
                                  if (an->grad.empty()) an->grad.assign(an->data.size(), S(0));
                                  S g = self.grad[0];
                                  for (auto& v : an->grad) v += g;
                                });
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& a) {
  return mul_scalar(sum_all(a), S(1) / S(a.numel()));
}

// ---------------------------------------------------------------------------
// nonlinearities
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  std::vector<S> out(a.data().begin(), a.data().end());
#pragma omp parallel for if (int64_t(out.size()) > (1 << 16))
  for (int64_t i = 0; i < int64_t(out.size()); ++i)
    if (out[i] < S(0)) out[i] = S(0);
  auto an = a.node();
  return detail::make_result<S>(
      a.shape(), std::move(out), "relu", {an},
      [an](TensorNode<S>& self) {
        if (!an->requires_grad) return;
        if (an->grad.empty()) an->grad.assign(an->data.size(), S(0));
        const S* y = self.data.data();
        const S* g = self.grad.data();
        S* d = an->grad.data();
#pragma omp parallel for if (int64_t(self.data.size()) > (1 << 16))
        for (int64_t i = 0; i < int64_t(self.data.size()); ++i)
          if (y[i] > S(0)) d[i] += g[i];
      });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  std::vector<S> out(a.data().size());
  const S* src = a.data().data();
#pragma omp parallel for if (int64_t(out.size()) > (1 << 16))
  for (int64_t i = 0; i < int64_t(out.size()); ++i) out[i] = std::exp(src[i]);
  auto an = a.node();
  return detail::make_result<S>(a.shape(), std::move(out), "exp", {an},
                                [an](TensorNode<S>& self) {
                                  if (!an->requires_grad) return;
                                  if (an->grad.empty()) an->grad.assign(an->data.size(), S(0));
                                  for (size_t i = 0; i < self.data.size(); ++i)
                                    an->grad[i] += self.grad[i] * self.data[i];
                                });
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  std::vector<S> out(a.data().size());
  const S* src = a.data().data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(src[i]);
  auto an = a.node();
  return detail::make_result<S>(a.shape(), std::move(out), "log", {an},
                                [an](TensorNode<S>& self) {
                                  if (!an->requires_grad) return;
                                  if (an->grad.empty()) an->grad.assign(an->data.size(), S(0));
                                  for (size_t i = 0; i < self.data.size(); ++i)
                                    an->grad[i] += self.grad[i] / an->data[i];
                                });
}

// Max-subtracted softmax along `axis`; slices sum to 1 (normalizer accumulated
// in double). NaN inputs are rejected.
template <typename S>
Tensor<S> softmax(const Tensor<S>& a, int64_t axis) {
  const Shape& s = a.shape();
  int64_t ax = detail::normalize_axis(axis, s.size());
  int64_t outer, n, inner;
  detail::axis_strides(s, ax, outer, n, inner);
  const S* src = a.data().data();
  for (size_t i = 0; i < a.data().size(); ++i)
    if (std::isnan(double(src[i]))) throw NumericError("softmax input contains NaN");
  std::vector<S> out(a.data().size());
#pragma omp parallel for if (outer * inner > 64)
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < inner; ++j) {
      S mx = src[(o * n) * inner + j];
      for (int64_t i = 1; i < n; ++i) mx = std::max(mx, src[(o * n + i) * inner + j]);
      double denom = 0;
      for (int64_t i = 0; i < n; ++i) {
        S e = std::exp(src[(o * n + i) * inner + j] - mx);
        out[(o * n + i) * inner + j] = e;
        denom += double(e);
      }
      for (int64_t i = 0; i < n; ++i) out[(o * n + i) * inner + j] = S(double(out[(o * n + i) * inner + j]) / denom);
    }
  auto an = a.node();
  return detail::make_result<S>(
      s, std::move(out), "softmax", {an},
      [an, outer, n, inner](TensorNode<S>& self) {
        if (!an->requires_grad) return;
        if (an->grad.empty()) an->grad.assign(an->data.size(), S(0));
        const S* y = self.data.data();
        const S* g = self.grad.data();
        S* d = an->grad.data();
#pragma omp parallel for if (outer * inner > 64)
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t j = 0; j < inner; ++j) {
            double dot = 0;
            for (int64_t i = 0; i < n; ++i) {
              size_t k = size_t((o * n + i) * inner + j);
              dot += double(g[k]) * double(y[k]);
            }
            for (int64_t i = 0; i < n; ++i) {
              size_t k = size_t((o * n + i) * inner + j);
              d[k] += y[k] * (g[k] - S(dot));
            }
          }
      });
}

// Layer normalization over the last axis with affine parameters.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                     S eps = S(1e-5)) {
  const Shape& s = x.shape();
  int64_t n = s.back();
  if (gamma.numel() != n || beta.numel() != n)
    throw ShapeError("layer_norm affine params must have length " + std::to_string(n) +
                     ", got gamma " + shape_str(gamma.shape()) + ", beta " +
                     shape_str(beta.shape()));
  int64_t rows = x.numel() / n;
  std::vector<S> out(x.data().size());
  // rstd per row is saved for backward; xhat is recomputed there.
  auto rstd = std::make_shared<std::vector<S>>(size_t(rows));
  auto mu = std::make_shared<std::vector<S>>(size_t(rows));
  const S* px = x.data().data();
  const S* pg = gamma.data().data();
  const S* pb = beta.data().data();
#pragma omp parallel for if (rows > 16)
  for (int64_t r = 0; r < rows; ++r) {
    double m = 0;
    for (int64_t i = 0; i < n; ++i) m += double(px[r * n + i]);
    m /= double(n);
    double var = 0;
    for (int64_t i = 0; i < n; ++i) {
      double d = double(px[r * n + i]) - m;
      var += d * d;
    }
    var /= double(n);
    S rs = S(1.0 / std::sqrt(var + double(eps)));
    (*mu)[r] = S(m);
    (*rstd)[r] = rs;
    for (int64_t i = 0; i < n; ++i)
      out[r * n + i] = (px[r * n + i] - S(m)) * rs * pg[i] + pb[i];
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::make_result<S>(
      s, std::move(out), "layer_norm", {xn, gn, bn},
      [xn, gn, bn, mu, rstd, rows, n](TensorNode<S>& self) {
        const S* g = self.grad.data();
        const S* px = xn->data.data();
        const S* pg = gn->data.data();
        std::vector<S> dx, dgamma, dbeta;
        if (xn->requires_grad) dx.assign(size_t(rows * n), S(0));
        if (gn->requires_grad) dgamma.assign(size_t(n), S(0));
        if (bn->requires_grad) dbeta.assign(size_t(n), S(0));
        for (int64_t r = 0; r < rows; ++r) {
          S m = (*mu)[r], rs = (*rstd)[r];
          if (xn->requires_grad) {
            double s1 = 0, s2 = 0;
            for (int64_t i = 0; i < n; ++i) {
              S xh = (px[r * n + i] - m) * rs;
              S dyh = g[r * n + i] * pg[i];
              s1 += double(dyh);
              s2 += double(dyh) * double(xh);
            }
            s1 /= double(n);
            s2 /= double(n);
            for (int64_t i = 0; i < n; ++i) {
              S xh = (px[r * n + i] - m) * rs;
              S dyh = g[r * n + i] * pg[i];
              dx[r * n + i] = rs * (dyh - S(s1) - xh * S(s2));
            }
          }
          for (int64_t i = 0; i < n; ++i) {
            S xh = (px[r * n + i] - m) * rs;
            if (gn->requires_grad) dgamma[i] += g[r * n + i] * xh;
            if (bn->requires_grad) dbeta[i] += g[r * n + i];
          }
        }
        if (xn->requires_grad) detail::accum(xn, dx);
        if (gn->requires_grad) detail::accum(gn, dgamma);
        if (bn->requires_grad) detail::accum(bn, dbeta);
      });
}

// ---------------------------------------------------------------------------
// composites (no new gradient rules)
// ---------------------------------------------------------------------------

// abs = relu(x) + relu(-x)
template <typename S>
Tensor<S> abs(const Tensor<S>& a) {
  return add(relu(a), relu(neg(a)));
}

// Numerically stable sigmoid: exp(-softplus(-x)), softplus(z) = relu(z) + log1p(exp(-|z|)).
template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  Tensor<S> nx = neg(a);
  Tensor<S> sp = add(relu(nx), log(add_scalar(exp(neg(abs(nx))), S(1))));
  return exp(neg(sp));
}

// log softmax along the last axis via a detached max shift (exact: logsumexp is
// shift invariant, so the constant shift carries no gradient).
template <typename S>
Tensor<S> log_softmax(const Tensor<S>& a, int64_t axis) {
  const Shape& s = a.shape();
  int64_t ax = detail::normalize_axis(axis, s.size());
  int64_t outer, n, inner;
  detail::axis_strides(s, ax, outer, n, inner);
  std::vector<S> mx(size_t(outer * inner));
  const S* src = a.data().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < inner; ++j) {
      S m = src[(o * n) * inner + j];
      for (int64_t i = 1; i < n; ++i) m = std::max(m, src[(o * n + i) * inner + j]);
      mx[o * inner + j] = m;
    }
  // Broadcast the detached shift to the full shape.
  std::vector<S> shift(a.data().size());
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < inner; ++j)
        shift[(o * n + i) * inner + j] = mx[o * inner + j];
  Tensor<S> z = sub(a, Tensor<S>::from_data(s, std::move(shift)));
  Tensor<S> lse = log(sum(exp(z), ax, /*keepdim=*/true));
  // Expand lse back along the axis by gathering the single entry n times.
  std::vector<int64_t> idx(size_t(n), 0);
  return sub(z, gather(lse, ax, idx));
}

// Constant one-hot matrix [len(classes) x n_classes]; no gradient.
template <typename S>
Tensor<S> one_hot(const std::vector<int>& classes, int64_t n_classes) {
  std::vector<S> data(classes.size() * size_t(n_classes), S(0));
  for (size_t i = 0; i < classes.size(); ++i) {
    if (classes[i] < 0 || classes[i] >= n_classes)
      throw ValueError("class index " + std::to_string(classes[i]) + " out of range [0, " +
                       std::to_string(n_classes) + ")");
    data[i * size_t(n_classes) + size_t(classes[i])] = S(1);
  }
  return Tensor<S>::from_data({int64_t(classes.size()), n_classes}, std::move(data));
}

// Repeat a [B x 1 x D] tensor to [B x reps x D] (reshape+concat composite).
template <typename S>
Tensor<S> tile_middle(const Tensor<S>& a, int64_t reps) {
  std::vector<Tensor<S>> copies(size_t(reps), a);
  return concat(copies, 1);
}

}  // namespace mumt::ops
