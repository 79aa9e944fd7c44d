#pragma once

// Differentiable primitives over Tensor<S>, plus the value-level kernels
// behind them. Every op allocates a fresh output (no views with aliasing,
// no fusion).
//
// Reduction order is fixed and documented here so reruns are bit-identical
// within one build:
//   - matmul accumulates inner products through Eigen's GEMM kernel, whose
//     order depends only on the operand shapes;
//   - softmax, layer_norm and cross-entropy reduce each row with Eigen's
//     fixed-length vectorized sums;
//   - sum/mean and gradient row-reductions accumulate in row-major order
//     with per-row partial sums;
//   - parallelism only ever splits independent output slices, never a
//     reduction, so results do not depend on the thread count.

#include <Eigen/Dense>
#include <unsupported/Eigen/SpecialFunctions>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "equitab/errors.hpp"
#include "equitab/parallel.hpp"
#include "equitab/tensor.hpp"

namespace equitab {
namespace detail {

template <class S>
using EigenMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<EigenMat<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const EigenMat<S>>;
template <class S>
using ArrMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
template <class S>
using ConstArrMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;

constexpr Index kEwChunk = 16384;

// Large activation buffers churn every step; keep glibc from returning them
// to the kernel so reuse does not re-fault pages.
inline void tune_allocator_once() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_MAX, 0);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)done;
#endif
}

template <class S>
Tensor<S> fresh(Shape shape) {
  tune_allocator_once();
  return Tensor<S>::uninit(std::move(shape));
}

template <class S>
std::shared_ptr<Tape<S>> common_tape(std::initializer_list<const Tensor<S>*> ts) {
  std::shared_ptr<Tape<S>> tape;
  for (const Tensor<S>* t : ts) {
    if (!t->on_tape()) continue;
    if (!tape)
      tape = t->tape();
    else if (tape != t->tape())
      throw ConfigError("operands are recorded on different tapes");
  }
  return tape;
}

inline std::vector<int> parents_of(std::initializer_list<int> ids) {
  std::vector<int> out;
  for (int id : ids)
    if (id >= 0) out.push_back(id);
  return out;
}

inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t ra = a.size(), rb = b.size();
  const std::size_t r = std::max(ra, rb);
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const Index ea = i < r - ra ? 1 : a[i - (r - ra)];
    const Index eb = i < r - rb ? 1 : b[i - (r - rb)];
    if (ea == eb)
      out[i] = ea;
    else if (ea == 1)
      out[i] = eb;
    else if (eb == 1)
      out[i] = ea;
    else
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcast-compatible");
  }
  return out;
}

// Strides of `s` aligned to the broadcast result `out`; 0 on broadcast dims.
inline std::vector<Index> broadcast_strides(const Shape& s, const Shape& out) {
  std::vector<Index> st(out.size(), 0);
  Index acc = 1;
  for (int i = static_cast<int>(s.size()) - 1,
           o = static_cast<int>(out.size()) - 1;
       i >= 0; --i, --o) {
    st[static_cast<std::size_t>(o)] = (s[static_cast<std::size_t>(i)] == 1 &&
                                       out[static_cast<std::size_t>(o)] != 1)
                                          ? 0
                                          : acc;
    acc *= s[static_cast<std::size_t>(i)];
  }
  return st;
}

inline std::vector<Index> row_major_strides(const Shape& s) {
  std::vector<Index> st(s.size(), 1);
  Index acc = 1;
  for (int i = static_cast<int>(s.size()) - 1; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] = acc;
    acc *= s[static_cast<std::size_t>(i)];
  }
  return st;
}

// Offset into an array with strides `st` for the `o`-th row-major position
// of the leading dims of `shape` (last dim excluded).
inline Index decompose_offset(Index o, const Shape& shape,
                              const std::vector<Index>& st) {
  Index off = 0;
  for (int d = static_cast<int>(shape.size()) - 2; d >= 0; --d) {
    const Index e = shape[static_cast<std::size_t>(d)];
    off += (o % e) * st[static_cast<std::size_t>(d)];
    o /= e;
  }
  return off;
}

template <class S, class F>
Tensor<S> ew_binary_values(const Tensor<S>& a, const Tensor<S>& b, F f) {
  if (a.shape() == b.shape()) {
    Tensor<S> out = fresh<S>(a.shape());
    const Index n = out.numel();
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    const Index nchunks = (n + kEwChunk - 1) / kEwChunk;
    parallel_for(nchunks, [&](Index c) {
      const Index lo = c * kEwChunk;
      const Index hi = std::min(n, lo + kEwChunk);
      for (Index i = lo; i < hi; ++i) po[i] = f(pa[i], pb[i]);
    }, 2);
    return out;
  }
  const Shape os = broadcast_shapes(a.shape(), b.shape());
  Tensor<S> out = fresh<S>(os);
  if (out.numel() == 0) return out;
  const int r = static_cast<int>(os.size());
  const auto sa = broadcast_strides(a.shape(), os);
  const auto sb = broadcast_strides(b.shape(), os);
  const Index inner = os[static_cast<std::size_t>(r - 1)];
  const Index outer = out.numel() / inner;
  const Index la = sa[static_cast<std::size_t>(r - 1)];
  const Index lb = sb[static_cast<std::size_t>(r - 1)];
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  parallel_for(outer, [&](Index o) {
    const Index offa = decompose_offset(o, os, sa);
    const Index offb = decompose_offset(o, os, sb);
    S* row = po + o * inner;
    for (Index i = 0; i < inner; ++i) row[i] = f(pa[offa + i * la], pb[offb + i * lb]);
  }, 64);
  return out;
}

template <class S, class F>
Tensor<S> ew_unary_values(const Tensor<S>& a, F f) {
  Tensor<S> out = fresh<S>(a.shape());
  const Index n = out.numel();
  const S* pa = a.data();
  S* po = out.data();
  const Index nchunks = (n + kEwChunk - 1) / kEwChunk;
  parallel_for(nchunks, [&](Index c) {
    const Index lo = c * kEwChunk;
    const Index hi = std::min(n, lo + kEwChunk);
    for (Index i = lo; i < hi; ++i) po[i] = f(pa[i]);
  }, 2);
  return out;
}

// Reduces `g` onto `target` by summing over broadcast axes; row-major
// iteration of g with per-row partial sums.
template <class S>
Tensor<S> sum_to_shape(const Tensor<S>& g, const Shape& target) {
  if (g.shape() == target) return g;
  if (broadcast_shapes(g.shape(), target) != g.shape())
    throw ShapeError("sum_to_shape: " + shape_str(target) +
                     " does not broadcast to " + shape_str(g.shape()));
  Tensor<S> out = Tensor<S>::zeros(target);
  if (g.numel() == 0) return out;
  const Shape& gs = g.shape();
  const int r = static_cast<int>(gs.size());
  if (r == 0) {
    out.at(0) = g.at(0);
    return out;
  }
  const auto so = broadcast_strides(target, gs);
  const Index inner = gs[static_cast<std::size_t>(r - 1)];
  const Index outer = g.numel() / inner;
  const Index lo_ = so[static_cast<std::size_t>(r - 1)];
  const S* pg = g.data();
  S* po = out.data();
  for (Index o = 0; o < outer; ++o) {
    const S* row = pg + o * inner;
    const Index offo = decompose_offset(o, gs, so);
    if (lo_ == 0) {
      S acc = 0;
      for (Index i = 0; i < inner; ++i) acc += row[i];
      po[offo] += acc;
    } else {
      ArrMap<S>(po + offo, inner) += ConstArrMap<S>(row, inner);
    }
  }
  return out;
}

template <class S>
Tensor<S> reshape_value(const Tensor<S>& t, Shape shape) {
  Index known = 1;
  int wild = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (wild >= 0) throw ShapeError("reshape: more than one -1 extent");
      wild = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (wild >= 0) {
    if (known == 0 || t.numel() % known != 0)
      throw ShapeError("reshape: cannot infer extent for " + shape_str(shape) +
                       " from " + shape_str(t.shape()));
    shape[static_cast<std::size_t>(wild)] = t.numel() / known;
  }
  if (shape_numel(shape) != t.numel())
    throw ShapeError("reshape: " + shape_str(t.shape()) + " to " +
                     shape_str(shape) + " changes the element count");
  return t.reshaped(std::move(shape));
}

// Batched matrix product with broadcast leading dims and optional
// transposition of either operand's trailing two dims.
template <class S>
Tensor<S> matmul_values(const Tensor<S>& a, const Tensor<S>& b, bool ta, bool tb) {
  if (a.rank() < 2 || b.rank() < 2)
    throw RankError("matmul requires rank >= 2 operands, got " +
                    shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const Shape& A = a.shape();
  const Shape& B = b.shape();
  const std::size_t ra = A.size(), rb = B.size();
  const Index ar = A[ra - 2], ac = A[ra - 1];
  const Index br = B[rb - 2], bc = B[rb - 1];
  const Index m = ta ? ac : ar, k = ta ? ar : ac;
  const Index kb = tb ? bc : br, n = tb ? br : bc;
  if (k != kb)
    throw ShapeError(std::string("matmul: inner dimensions do not match: ") +
                     shape_str(A) + (ta ? "^T" : "") + " x " + shape_str(B) +
                     (tb ? "^T" : ""));
  const Shape abatch(A.begin(), A.end() - 2);
  const Shape bbatch(B.begin(), B.end() - 2);
  const Shape obatch = broadcast_shapes(abatch, bbatch);
  Shape oshape = obatch;
  oshape.push_back(m);
  oshape.push_back(n);
  Tensor<S> out = fresh<S>(oshape);
  if (out.numel() == 0) return out;

  // Hot path: unbatched right operand, left operand collapsible into one
  // tall GEMM.
  if (rb == 2 && !ta && abatch == obatch) {
    const Index rows = a.numel() / ac;
    ConstMatMap<S> MA(a.data(), rows, ac);
    ConstMatMap<S> MB(b.data(), br, bc);
    MatMap<S> MO(out.data(), rows, n);
    if (tb)
      MO.noalias() = MA * MB.transpose();
    else
      MO.noalias() = MA * MB;
    return out;
  }

  const Index nbatch = shape_numel(obatch);
  Shape obatch_plus = obatch;
  obatch_plus.push_back(1);  // so decompose_offset sees batch dims as leading
  const auto sa = broadcast_strides(abatch, obatch);
  const auto sb = broadcast_strides(bbatch, obatch);
  std::vector<Index> sa_full(sa), sb_full(sb);
  sa_full.push_back(0);
  sb_full.push_back(0);
  const Index asz = ar * ac, bsz = br * bc, osz = m * n;
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  parallel_for(nbatch, [&](Index ob) {
    const Index offa = decompose_offset(ob, obatch_plus, sa_full) * asz;
    const Index offb = decompose_offset(ob, obatch_plus, sb_full) * bsz;
    ConstMatMap<S> MA(pa + offa, ar, ac);
    ConstMatMap<S> MB(pb + offb, br, bc);
    MatMap<S> MO(po + ob * osz, m, n);
    if (!ta && !tb)
      MO.noalias() = MA * MB;
    else if (!ta && tb)
      MO.noalias() = MA * MB.transpose();
    else if (ta && !tb)
      MO.noalias() = MA.transpose() * MB;
    else
      MO.noalias() = MA.transpose() * MB.transpose();
  }, 2);
  return out;
}

template <class S>
Tensor<S> transpose_values(const Tensor<S>& t, int d0, int d1) {
  const int r = static_cast<int>(t.rank());
  if (d0 < 0 || d1 < 0 || d0 >= r || d1 >= r)
    throw RankError("transpose: axes (" + std::to_string(d0) + ", " +
                    std::to_string(d1) + ") out of range for " +
                    shape_str(t.shape()));
  if (d0 == d1) return t.clone();
  Shape os = t.shape();
  std::swap(os[static_cast<std::size_t>(d0)], os[static_cast<std::size_t>(d1)]);
  const auto src_st = row_major_strides(t.shape());
  std::vector<Index> st(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    int sd = i == d0 ? d1 : (i == d1 ? d0 : i);
    st[static_cast<std::size_t>(i)] = src_st[static_cast<std::size_t>(sd)];
  }
  Tensor<S> out = fresh<S>(os);
  if (out.numel() == 0) return out;
  const Index inner = os[static_cast<std::size_t>(r - 1)];
  const Index outer = out.numel() / inner;
  const Index li = st[static_cast<std::size_t>(r - 1)];
  const S* ps = t.data();
  S* po = out.data();
  parallel_for(outer, [&](Index o) {
    const Index off = decompose_offset(o, os, st);
    S* row = po + o * inner;
    if (li == 1) {
      std::memcpy(row, ps + off, static_cast<std::size_t>(inner) * sizeof(S));
    } else {
      for (Index i = 0; i < inner; ++i) row[i] = ps[off + i * li];
    }
  }, 64);
  return out;
}

template <class S>
Tensor<S> broadcast_values(const Tensor<S>& t, const Shape& shape) {
  if (broadcast_shapes(t.shape(), shape) != shape)
    throw ShapeError("broadcast_to: cannot broadcast " + shape_str(t.shape()) +
                     " to " + shape_str(shape));
  Tensor<S> out = fresh<S>(shape);
  if (out.numel() == 0) return out;
  const int r = static_cast<int>(shape.size());
  if (r == 0) {
    out.at(0) = t.at(0);
    return out;
  }
  const auto st = broadcast_strides(t.shape(), shape);
  const Index inner = shape[static_cast<std::size_t>(r - 1)];
  const Index outer = out.numel() / inner;
  const Index li = st[static_cast<std::size_t>(r - 1)];
  const S* ps = t.data();
  S* po = out.data();
  parallel_for(outer, [&](Index o) {
    const Index off = decompose_offset(o, shape, st);
    S* row = po + o * inner;
    for (Index i = 0; i < inner; ++i) row[i] = ps[off + i * li];
  }, 64);
  return out;
}

template <class S>
Tensor<S> slice_values(const Tensor<S>& t, int dim, Index start, Index len) {
  const int r = static_cast<int>(t.rank());
  if (dim < 0 || dim >= r)
    throw RankError("slice: axis " + std::to_string(dim) + " out of range for " +
                    shape_str(t.shape()));
  const Index extent = t.shape()[static_cast<std::size_t>(dim)];
  if (start < 0 || len < 0 || start + len > extent)
    throw ShapeError("slice: window [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of range for extent " +
                     std::to_string(extent));
  Shape os = t.shape();
  os[static_cast<std::size_t>(dim)] = len;
  Tensor<S> out = fresh<S>(os);
  Index innerN = 1;
  for (int i = dim + 1; i < r; ++i) innerN *= t.shape()[static_cast<std::size_t>(i)];
  Index outerN = 1;
  for (int i = 0; i < dim; ++i) outerN *= t.shape()[static_cast<std::size_t>(i)];
  const S* ps = t.data();
  S* po = out.data();
  parallel_for(outerN, [&](Index o) {
    const S* src = ps + (o * extent + start) * innerN;
    S* dst = po + o * len * innerN;
    std::copy(src, src + len * innerN, dst);
  }, 8);
  return out;
}

// Adds `g` (shaped like the slice output) back into a zero tensor shaped
// like the slice input.
template <class S>
Tensor<S> slice_scatter_values(const Tensor<S>& g, const Shape& parent, int dim,
                               Index start) {
  Tensor<S> out = Tensor<S>::zeros(parent);
  const int r = static_cast<int>(parent.size());
  const Index extent = parent[static_cast<std::size_t>(dim)];
  const Index len = g.shape()[static_cast<std::size_t>(dim)];
  Index innerN = 1;
  for (int i = dim + 1; i < r; ++i) innerN *= parent[static_cast<std::size_t>(i)];
  Index outerN = 1;
  for (int i = 0; i < dim; ++i) outerN *= parent[static_cast<std::size_t>(i)];
  const S* pg = g.data();
  S* po = out.data();
  parallel_for(outerN, [&](Index o) {
    const S* src = pg + o * len * innerN;
    S* dst = po + (o * extent + start) * innerN;
    std::copy(src, src + len * innerN, dst);
  }, 8);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (NumPy-style broadcasting).

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> out = detail::ew_binary_values<S>(a, b, [](S x, S y) { return x + y; });
  if (auto tape = detail::common_tape<S>({&a, &b})) {
    const int pa = a.node(), pb = b.node();
    const Shape sa = a.shape(), sb = b.shape();
    out.attach(tape, tape->emit(out.shape(), detail::parents_of({pa, pb}),
                                [pa, pb, sa, sb](Tape<S>& t, const Tensor<S>& g) {
                                  if (pa >= 0) t.accumulate(pa, detail::sum_to_shape(g, sa));
                                  if (pb >= 0) t.accumulate(pb, detail::sum_to_shape(g, sb));
                                }));
  }
  return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> out = detail::ew_binary_values<S>(a, b, [](S x, S y) { return x - y; });
  if (auto tape = detail::common_tape<S>({&a, &b})) {
    const int pa = a.node(), pb = b.node();
    const Shape sa = a.shape(), sb = b.shape();
    out.attach(tape, tape->emit(out.shape(), detail::parents_of({pa, pb}),
                                [pa, pb, sa, sb](Tape<S>& t, const Tensor<S>& g) {
                                  if (pa >= 0) t.accumulate(pa, detail::sum_to_shape(g, sa));
                                  if (pb >= 0) {
                                    Tensor<S> neg = detail::ew_unary_values<S>(
                                        g, [](S x) { return -x; });
                                    t.accumulate(pb, detail::sum_to_shape(neg, sb));
                                  }
                                }));
  }
  return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> out = detail::ew_binary_values<S>(a, b, [](S x, S y) { return x * y; });
  if (auto tape = detail::common_tape<S>({&a, &b})) {
    const int pa = a.node(), pb = b.node();
    const Tensor<S> av = a.detached(), bv = b.detached();
    out.attach(tape, tape->emit(out.shape(), detail::parents_of({pa, pb}),
                                [pa, pb, av, bv](Tape<S>& t, const Tensor<S>& g) {
                                  if (pa >= 0) {
                                    Tensor<S> ga = detail::ew_binary_values<S>(
                                        g, bv, [](S x, S y) { return x * y; });
                                    t.accumulate(pa, detail::sum_to_shape(ga, av.shape()));
                                  }
                                  if (pb >= 0) {
                                    Tensor<S> gb = detail::ew_binary_values<S>(
                                        g, av, [](S x, S y) { return x * y; });
                                    t.accumulate(pb, detail::sum_to_shape(gb, bv.shape()));
                                  }
                                }));
  }
  return out;
}

template <class S>
Tensor<S> mul_scalar(const Tensor<S>& a, S c) {
  Tensor<S> out = detail::ew_unary_values<S>(a, [c](S x) { return x * c; });
  if (a.on_tape()) {
    auto tape = a.tape();
    const int pa = a.node();
    out.attach(tape, tape->emit(out.shape(), {pa},
                                [pa, c](Tape<S>& t, const Tensor<S>& g) {
                                  t.accumulate(pa, detail::ew_unary_values<S>(
                                                       g, [c](S x) { return x * c; }));
                                }));
  }
  return out;
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  Tensor<S> out = detail::ew_unary_values<S>(a, [c](S x) { return x + c; });
  if (a.on_tape()) {
    auto tape = a.tape();
    const int pa = a.node();
    out.attach(tape, tape->emit(out.shape(), {pa},
                                [pa](Tape<S>& t, const Tensor<S>& g) {
                                  t.accumulate(pa, g);
                                }));
  }
  return out;
}

template <class S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <class S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <class S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }
template <class S>
Tensor<S> operator*(const Tensor<S>& a, S c) { return mul_scalar(a, c); }
template <class S>
Tensor<S> operator*(S c, const Tensor<S>& a) { return mul_scalar(a, c); }
template <class S>
Tensor<S> neg(const Tensor<S>& a) { return mul_scalar(a, S(-1)); }

// ---------------------------------------------------------------------------
// Structure ops.

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  Tensor<S> out = detail::matmul_values(a, b, false, false);
  if (auto tape = detail::common_tape<S>({&a, &b})) {
    const int pa = a.node(), pb = b.node();
    const Tensor<S> av = a.detached(), bv = b.detached();
    out.attach(tape, tape->emit(out.shape(), detail::parents_of({pa, pb}),
        [pa, pb, av, bv](Tape<S>& t, const Tensor<S>& g) {
          if (pa >= 0) {
            Tensor<S> ga = detail::matmul_values(g, bv, false, true);
            t.accumulate(pa, detail::sum_to_shape(ga, av.shape()));
          }
          if (pb >= 0) {
            if (bv.rank() == 2 && av.rank() > 2) {
              // Collapse the batch into one tall GEMM: gb = A^T G.
              const Index k = av.shape().back();
              const Index n = g.shape().back();
              Tensor<S> gb = detail::matmul_values(
                  detail::reshape_value(av, {-1, k}),
                  detail::reshape_value(g, {-1, n}), true, false);
              t.accumulate(pb, gb);
            } else {
              Tensor<S> gb = detail::matmul_values(av, g, true, false);
              t.accumulate(pb, detail::sum_to_shape(gb, bv.shape()));
            }
          }
        }));
  }
  return out;
}

template <class S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  Tensor<S> out = detail::reshape_value(a, std::move(shape));
  if (a.on_tape()) {
    auto tape = a.tape();
    const int pa = a.node();
    const Shape ps = a.shape();
    out.attach(tape, tape->emit(out.shape(), {pa},
                                [pa, ps](Tape<S>& t, const Tensor<S>& g) {
                                  t.accumulate(pa, detail::reshape_value(g, ps));
                                }));
  }
  return out;
}

template <class S>
Tensor<S> transpose(const Tensor<S>& a, int d0, int d1) {
  Tensor<S> out = detail::transpose_values(a, d0, d1);
  if (a.on_tape()) {
    auto tape = a.tape();
    const int pa = a.node();
    out.attach(tape, tape->emit(out.shape(), {pa},
                                [pa, d0, d1](Tape<S>& t, const Tensor<S>& g) {
                                  t.accumulate(pa, detail::transpose_values(g, d0, d1));
                                }));
  }
  return out;
}

template <class S>
Tensor<S> broadcast_to(const Tensor<S>& a, const Shape& shape) {
  Tensor<S> out = detail::broadcast_values(a, shape);
  if (a.on_tape()) {
    auto tape = a.tape();
    const int pa = a.node();
    const Shape ps = a.shape();
    out.attach(tape, tape->emit(out.shape(), {pa},
                                [pa, ps](Tape<S>& t, const Tensor<S>& g) {
                                  t.accumulate(pa, detail::sum_to_shape(g, ps));
                                }));
  }
  return out;
}

template <class S>
Tensor<S> slice(const Tensor<S>& a, int dim, Index start, Index len) {
  Tensor<S> out = detail::slice_values(a, dim, start, len);
  if (a.on_tape()) {
    auto tape = a.tape();
    const int pa = a.node();
    const Shape ps = a.shape();
    out.attach(tape, tape->emit(out.shape(), {pa},
                                [pa, ps, dim, start](Tape<S>& t, const Tensor<S>& g) {
                                  t.accumulate(pa, detail::slice_scatter_values(
                                                       g, ps, dim, start));
                                }));
  }
  return out;
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int dim) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  const int r = static_cast<int>(parts[0].rank());
  if (dim < 0 || dim >= r)
    throw RankError("concat: axis " + std::to_string(dim) + " out of range");
  Shape os = parts[0].shape();
  Index total = 0;
  for (const Tensor<S>& p : parts) {
    if (p.rank() != r)
      throw ShapeError("concat: rank mismatch between operands");
    for (int i = 0; i < r; ++i) {
      if (i != dim && p.shape()[static_cast<std::size_t>(i)] != os[static_cast<std::size_t>(i)])
        throw ShapeError("concat: shapes " + shape_str(os) + " and " +
                         shape_str(p.shape()) + " differ off-axis");
    }
    total += p.shape()[static_cast<std::size_t>(dim)];
  }
  os[static_cast<std::size_t>(dim)] = total;
  Tensor<S> out = detail::fresh<S>(os);
  Index innerN = 1;
  for (int i = dim + 1; i < r; ++i) innerN *= os[static_cast<std::size_t>(i)];
  Index outerN = 1;
  for (int i = 0; i < dim; ++i) outerN *= os[static_cast<std::size_t>(i)];
  Index at = 0;
  for (const Tensor<S>& p : parts) {
    const Index len = p.shape()[static_cast<std::size_t>(dim)];
    const S* ps = p.data();
    S* po = out.data();
    parallel_for(outerN, [&](Index o) {
      const S* src = ps + o * len * innerN;
      S* dst = po + (o * total + at) * innerN;
      std::copy(src, src + len * innerN, dst);
    }, 8);
    at += len;
  }

  std::shared_ptr<Tape<S>> tape;
  for (const Tensor<S>& p : parts) {
    if (!p.on_tape()) continue;
    if (!tape)
      tape = p.tape();
    else if (tape != p.tape())
      throw ConfigError("operands are recorded on different tapes");
  }
  if (tape) {
    std::vector<int> ids;
    std::vector<Index> lens;
    std::vector<int> valid;
    for (const Tensor<S>& p : parts) {
      ids.push_back(p.node());
      lens.push_back(p.shape()[static_cast<std::size_t>(dim)]);
      if (p.node() >= 0) valid.push_back(p.node());
    }
    out.attach(tape, tape->emit(out.shape(), valid,
        [ids, lens, dim](Tape<S>& t, const Tensor<S>& g) {
          Index pos = 0;
          for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] >= 0)
              t.accumulate(ids[i], detail::slice_values(g, dim, pos, lens[i]));
            pos += lens[i];
          }
        }));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Neural-net primitives.

namespace detail {

// Per-row admissible-prefix lengths of a mask whose last extent is L and
// whose rows are contiguous; -1 marks rows that are not prefix-shaped.
template <class S>
std::vector<Index> mask_prefix_lengths(const S* mask, Index rows, Index L) {
  std::vector<Index> prefix(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    const S* row = mask + r * L;
    Index p = 0;
    while (p < L && row[p] != S(0)) ++p;
    Index rest = p;
    while (rest < L && row[rest] == S(0)) ++rest;
    prefix[static_cast<std::size_t>(r)] = rest == L ? p : -1;
  }
  return prefix;
}

// Softmax over the last axis. Masked positions (mask value 0) receive an
// additive -inf before the exp, which makes their weight exactly 0; rows
// with no admissible position raise DegenerateMaskError. A null mask means
// all positions are admissible.
template <class S>
Tensor<S> softmax_values(const Tensor<S>& logits, const Tensor<S>* mask) {
  const Shape& ls = logits.shape();
  if (ls.empty()) throw RankError("softmax: rank-0 input");
  const Index L = ls.back();
  const Index rows = logits.numel() / L;
  std::vector<Index> ms;
  bool mask_contiguous_rows = false;
  std::vector<Index> prefix;
  if (mask) {
    if (broadcast_shapes(mask->shape(), ls) != ls)
      throw ShapeError("softmax mask " + shape_str(mask->shape()) +
                       " does not broadcast to logits " + shape_str(ls));
    ms = broadcast_strides(mask->shape(), ls);
    mask_contiguous_rows = !mask->shape().empty() && mask->shape().back() == L;
    if (mask_contiguous_rows)
      prefix = mask_prefix_lengths(mask->data(), mask->numel() / L, L);
  }
  Tensor<S> out = fresh<S>(ls);
  const S* pl = logits.data();
  const S* pm = mask ? mask->data() : nullptr;
  S* po = out.data();
  std::atomic<Index> bad_row{-1};
  parallel_for(rows, [&](Index r) {
    const S* lrow = pl + r * L;
    S* orow = po + r * L;
    Index plen = L;  // admissible prefix length; L when unmasked
    const S* mrow = nullptr;
    if (pm) {
      const Index moff = decompose_offset(r, ls, ms);
      mrow = pm + moff;
      if (mask_contiguous_rows)
        plen = prefix[static_cast<std::size_t>(moff / L)];
      else
        plen = -1;
    }
    if (plen == 0) {
      bad_row.store(r);
      return;
    }
    if (plen > 0) {
      ConstArrMap<S> in(lrow, plen);
      ArrMap<S> res(orow, plen);
      const S mx = in.maxCoeff();
      res = (in - mx).exp();
      const S sum = res.sum();
      res *= S(1) / sum;
      for (Index i = plen; i < L; ++i) orow[i] = S(0);
      return;
    }
    // general mask row (not a prefix): scalar path
    const Index mstride = ms.back();
    S mx = -std::numeric_limits<S>::infinity();
    for (Index i = 0; i < L; ++i) {
      const bool ok = mrow[i * mstride] != S(0);
      if (ok && lrow[i] > mx) mx = lrow[i];
    }
    if (mx == -std::numeric_limits<S>::infinity()) {
      bad_row.store(r);
      return;
    }
    S sum = 0;
    for (Index i = 0; i < L; ++i) {
      const bool ok = mrow[i * mstride] != S(0);
      const S e = ok ? std::exp(lrow[i] - mx) : S(0);
      orow[i] = e;
      sum += e;
    }
    const S inv = S(1) / sum;
    for (Index i = 0; i < L; ++i) orow[i] *= inv;
  }, 16);
  if (bad_row.load() >= 0)
    throw DegenerateMaskError("softmax_masked: row " +
                              std::to_string(bad_row.load()) +
                              " has every position masked");
  return out;
}

template <class S>
Tensor<S> softmax_backward_values(const Tensor<S>& y, const Tensor<S>& g) {
  const Index L = y.shape().back();
  const Index rows = y.numel() / L;
  Tensor<S> out = fresh<S>(y.shape());
  const S* py = y.data();
  const S* pg = g.data();
  S* po = out.data();
  parallel_for(rows, [&](Index r) {
    ConstArrMap<S> yrow(py + r * L, L);
    ConstArrMap<S> grow(pg + r * L, L);
    ArrMap<S> orow(po + r * L, L);
    const S dot = (yrow * grow).sum();
    orow = yrow * (grow - dot);
  }, 16);
  return out;
}

}  // namespace detail

template <class S>
Tensor<S> softmax_masked(const Tensor<S>& logits, const Tensor<S>& mask) {
  Tensor<S> out = detail::softmax_values(logits, &mask);
  if (logits.on_tape()) {
    auto tape = logits.tape();
    const int pl = logits.node();
    const Tensor<S> yv = out.detached();
    out.attach(tape, tape->emit(out.shape(), {pl},
                                [pl, yv](Tape<S>& t, const Tensor<S>& g) {
                                  t.accumulate(pl, detail::softmax_backward_values(yv, g));
                                }));
  }
  return out;
}

template <class S>
Tensor<S> softmax(const Tensor<S>& logits) {
  Tensor<S> out = detail::softmax_values<S>(logits, nullptr);
  if (logits.on_tape()) {
    auto tape = logits.tape();
    const int pl = logits.node();
    const Tensor<S> yv = out.detached();
    out.attach(tape, tape->emit(out.shape(), {pl},
                                [pl, yv](Tape<S>& t, const Tensor<S>& g) {
                                  t.accumulate(pl, detail::softmax_backward_values(yv, g));
                                }));
  }
  return out;
}

// Per-row normalization over the last axis (biased variance), then affine.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain,
                     const Tensor<S>& bias, double eps = 1e-5) {
  if (x.rank() < 1) throw RankError("layer_norm: rank-0 input");
  const Index d = x.shape().back();
  if (gain.rank() != 1 || bias.rank() != 1 || gain.extent(0) != d ||
      bias.extent(0) != d)
    throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                     shape_str(bias.shape()) + " do not match last extent " +
                     std::to_string(d));
  const S e = static_cast<S>(eps);
  const Index rows = x.numel() / d;
  Tensor<S> out = detail::fresh<S>(x.shape());
  const S* px = x.data();
  const S* pg = gain.data();
  const S* pb = bias.data();
  S* po = out.data();
  detail::ConstArrMap<S> gmap(pg, d);
  detail::ConstArrMap<S> bmap(pb, d);
  parallel_for(rows, [&](Index r) {
    detail::ConstArrMap<S> xr(px + r * d, d);
    detail::ArrMap<S> orow(po + r * d, d);
    const S mean = xr.sum() / static_cast<S>(d);
    const S var = (xr - mean).square().sum() / static_cast<S>(d);
    const S inv = S(1) / std::sqrt(var + e);
    orow = gmap * ((xr - mean) * inv) + bmap;
  }, 16);

  if (auto tape = detail::common_tape<S>({&x, &gain, &bias})) {
    const int pxn = x.node(), pgn = gain.node(), pbn = bias.node();
    const Tensor<S> xv = x.detached(), gv = gain.detached();
    out.attach(tape, tape->emit(out.shape(), detail::parents_of({pxn, pgn, pbn}),
        [pxn, pgn, pbn, xv, gv, e, d, rows](Tape<S>& t, const Tensor<S>& g) {
          const S* px2 = xv.data();
          const S* pg2 = gv.data();
          const S* pgr = g.data();
          detail::ConstArrMap<S> gainmap(pg2, d);
          if (pxn >= 0) {
            Tensor<S> gx = detail::fresh<S>(xv.shape());
            S* pgx = gx.data();
            parallel_for(rows, [&](Index r) {
              detail::ConstArrMap<S> xr(px2 + r * d, d);
              detail::ConstArrMap<S> grow(pgr + r * d, d);
              detail::ArrMap<S> orow(pgx + r * d, d);
              const S mean = xr.sum() / static_cast<S>(d);
              const S var = (xr - mean).square().sum() / static_cast<S>(d);
              const S inv = S(1) / std::sqrt(var + e);
              const auto xh = (xr - mean) * inv;
              const auto dxh = grow * gainmap;
              const S c1 = dxh.sum() / static_cast<S>(d);
              const S c2 = (dxh * xh).sum() / static_cast<S>(d);
              orow = inv * (dxh - c1 - xh * c2);
            }, 16);
            t.accumulate(pxn, gx);
          }
          if (pgn >= 0 || pbn >= 0) {
            Tensor<S> dgain = Tensor<S>::zeros({d});
            Tensor<S> dbias = Tensor<S>::zeros({d});
            detail::ArrMap<S> dg(dgain.data(), d);
            detail::ArrMap<S> db(dbias.data(), d);
            for (Index r = 0; r < rows; ++r) {  // fixed row order
              detail::ConstArrMap<S> xr(px2 + r * d, d);
              detail::ConstArrMap<S> grow(pgr + r * d, d);
              const S mean = xr.sum() / static_cast<S>(d);
              const S var = (xr - mean).square().sum() / static_cast<S>(d);
              const S inv = S(1) / std::sqrt(var + e);
              dg += grow * ((xr - mean) * inv);
              db += grow;
            }
            if (pgn >= 0) t.accumulate(pgn, dgain);
            if (pbn >= 0) t.accumulate(pbn, dbias);
          }
        }));
  }
  return out;
}

namespace detail {
inline constexpr double kInvSqrt2 = 0.7071067811865475244;
inline constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace detail

// Exact (erf-based) GELU.
template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
  Tensor<S> out = detail::fresh<S>(x.shape());
  {
    const Index n = x.numel();
    const Index nchunks = (n + detail::kEwChunk - 1) / detail::kEwChunk;
    const S* px = x.data();
    S* po = out.data();
    parallel_for(nchunks, [&](Index c) {
      const Index lo = c * detail::kEwChunk;
      const Index len = std::min(n - lo, detail::kEwChunk);
      detail::ConstArrMap<S> in(px + lo, len);
      detail::ArrMap<S> res(po + lo, len);
      res = S(0.5) * in * (S(1) + (in * S(detail::kInvSqrt2)).erf());
    }, 2);
  }
  if (x.on_tape()) {
    auto tape = x.tape();
    const int px = x.node();
    const Tensor<S> xv = x.detached();
    out.attach(tape, tape->emit(out.shape(), {px},
        [px, xv](Tape<S>& t, const Tensor<S>& g) {
          Tensor<S> dx = detail::fresh<S>(xv.shape());
          const Index n = xv.numel();
          const Index nchunks = (n + detail::kEwChunk - 1) / detail::kEwChunk;
          const S* pxv = xv.data();
          const S* pg = g.data();
          S* po = dx.data();
          parallel_for(nchunks, [&](Index c) {
            const Index lo = c * detail::kEwChunk;
            const Index len = std::min(n - lo, detail::kEwChunk);
            detail::ConstArrMap<S> in(pxv + lo, len);
            detail::ConstArrMap<S> gr(pg + lo, len);
            detail::ArrMap<S> res(po + lo, len);
            const auto phi =
                S(detail::kInvSqrt2Pi) * (S(-0.5) * in.square()).exp();
            const auto Phi = S(0.5) * (S(1) + (in * S(detail::kInvSqrt2)).erf());
            res = (Phi + in * phi) * gr;
          }, 2);
          t.accumulate(px, dx);
        }));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses.

template <class S>
Tensor<S> sum(const Tensor<S>& x) {
  double acc = 0;
  const S* px = x.data();
  const Index n = x.numel();
  for (Index i = 0; i < n; ++i) acc += static_cast<double>(px[i]);
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc));
  if (x.on_tape()) {
    auto tape = x.tape();
    const int pn = x.node();
    const Shape ps = x.shape();
    out.attach(tape, tape->emit({}, {pn},
                                [pn, ps](Tape<S>& t, const Tensor<S>& g) {
                                  t.accumulate(pn, Tensor<S>::full(ps, g.at(0)));
                                }));
  }
  return out;
}

template <class S>
Tensor<S> mean(const Tensor<S>& x) {
  const Index n = x.numel();
  Tensor<S> s = sum(x);
  return mul_scalar(s, static_cast<S>(1.0 / static_cast<double>(n)));
}

// Mean over all rows of -log softmax(logits) at the one-hot target class.
// Targets are data, not parameters: no gradient flows into them.
template <class S>
Tensor<S> cross_entropy_from_logits(const Tensor<S>& logits,
                                    const Tensor<S>& targets) {
  if (logits.shape() != targets.shape())
    throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) +
                     " vs targets " + shape_str(targets.shape()));
  if (logits.rank() < 1) throw RankError("cross_entropy: rank-0 input");
  const Index q = logits.shape().back();
  const Index rows = logits.numel() / q;
  const S* pl = logits.data();
  const S* pt = targets.data();
  // validate one-hot rows
  for (Index r = 0; r < rows; ++r) {
    const S* trow = pt + r * q;
    int ones = 0;
    for (Index j = 0; j < q; ++j) {
      if (trow[j] == S(1))
        ++ones;
      else if (trow[j] != S(0))
        throw EncodingError("cross_entropy: target row " + std::to_string(r) +
                            " is not one-hot (entry " + std::to_string(j) + ")");
    }
    if (ones != 1)
      throw EncodingError("cross_entropy: target row " + std::to_string(r) +
                          " has " + std::to_string(ones) + " ones");
  }
  std::vector<double> row_loss(static_cast<std::size_t>(rows));
  parallel_for(rows, [&](Index r) {
    const S* lrow = pl + r * q;
    const S* trow = pt + r * q;
    S mx = lrow[0];
    for (Index j = 1; j < q; ++j) mx = std::max(mx, lrow[j]);
    double lse = 0;
    double ltrue = 0;
    for (Index j = 0; j < q; ++j) {
      lse += std::exp(static_cast<double>(lrow[j] - mx));
      if (trow[j] == S(1)) ltrue = static_cast<double>(lrow[j] - mx);
    }
    row_loss[static_cast<std::size_t>(r)] = std::log(lse) - ltrue;
  }, 16);
  double acc = 0;
  for (Index r = 0; r < rows; ++r) acc += row_loss[static_cast<std::size_t>(r)];
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(acc / static_cast<double>(rows)));

  if (logits.on_tape()) {
    auto tape = logits.tape();
    const int pn = logits.node();
    const Tensor<S> lv = logits.detached(), tv = targets.detached();
    out.attach(tape, tape->emit({}, {pn},
        [pn, lv, tv, rows](Tape<S>& t, const Tensor<S>& g) {
          const S scale = g.at(0) / static_cast<S>(rows);
          Tensor<S> probs = detail::softmax_values<S>(lv, nullptr);
          Tensor<S> dl = detail::ew_binary_values<S>(
              probs, tv, [scale](S p, S y) { return (p - y) * scale; });
          t.accumulate(pn, dl);
        }));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Value-level helpers (not differentiable).

// Argmax over the last axis; ties break toward the lowest index.
template <class S>
std::vector<Index> argmax_rows(const Tensor<S>& t) {
  const Index L = t.shape().back();
  const Index rows = t.numel() / L;
  std::vector<Index> out(static_cast<std::size_t>(rows));
  const S* p = t.data();
  for (Index r = 0; r < rows; ++r) {
    const S* row = p + r * L;
    Index best = 0;
    for (Index i = 1; i < L; ++i)
      if (row[i] > row[best]) best = i;
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

template <class S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("max_abs_diff: shapes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  double m = 0;
  const S* pa = a.data();
  const S* pb = b.data();
  const Index n = a.numel();
  for (Index i = 0; i < n; ++i)
    m = std::max(m, std::abs(static_cast<double>(pa[i]) - static_cast<double>(pb[i])));
  return m;
}

template <class S>
bool all_finite(const Tensor<S>& t) {
  const S* p = t.data();
  const Index n = t.numel();
  for (Index i = 0; i < n; ++i)
    if (!std::isfinite(static_cast<double>(p[i]))) return false;
  return true;
}

template <class S>
double sum_sq(const Tensor<S>& t) {
  double acc = 0;
  const S* p = t.data();
  const Index n = t.numel();
  for (Index i = 0; i < n; ++i)
    acc += static_cast<double>(p[i]) * static_cast<double>(p[i]);
  return acc;
}

}  // namespace equitab
