#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "diin/tape.hpp"

// Differentiable op builders. Each op appends one node to the tape, computes
// the forward value eagerly, and registers a closure that scatters the node's
// gradient into its inputs. Gradients are only propagated into inputs that
// require them.

namespace diin {

namespace detail {

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

inline std::int64_t rows_of(const Shape& s) {
  std::int64_t r = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) r *= s[i];
  return r;
}

inline int last_of(const Shape& s) { return s.back(); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
  if (t.shape(a) != t.shape(b)) detail::shape_fail("add", t.shape(a), t.shape(b));
  int id = t.emplace(OpKind::add, t.shape(a), {a.id, b.id});
  const auto& xa = t.value(a);
  const auto& xb = t.value(b);
  auto& out = t.mutable_value(id);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xa[i] + xb[i];
  t.set_backward(id, [a = a.id, b = b.id](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    if (tp.node(a).requires_grad) {
      auto& ga = tp.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.node(b).requires_grad) {
      auto& gb = tp.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
  t.finish_node(id);
  return Var{id};
}

template <typename T>
Var mul(Tape<T>& t, Var a, Var b) {
  if (t.shape(a) != t.shape(b)) detail::shape_fail("mul", t.shape(a), t.shape(b));
  int id = t.emplace(OpKind::mul, t.shape(a), {a.id, b.id});
  const auto& xa = t.value(a);
  const auto& xb = t.value(b);
  auto& out = t.mutable_value(id);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xa[i] * xb[i];
  t.set_backward(id, [a = a.id, b = b.id](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    const auto& xa = tp.node(a).value;
    const auto& xb = tp.node(b).value;
    if (tp.node(a).requires_grad) {
      auto& ga = tp.grad_buffer(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * xb[i];
    }
    if (tp.node(b).requires_grad) {
      auto& gb = tp.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * xa[i];
    }
  });
  t.finish_node(id);
  return Var{id};
}

// y = mul_c * x + add_c
template <typename T>
Var affine_scalar(Tape<T>& t, Var x, T mul_c, T add_c) {
  int id = t.emplace(OpKind::affine_scalar, t.shape(x), {x.id});
  const auto& xv = t.value(x);
  auto& out = t.mutable_value(id);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = mul_c * xv[i] + add_c;
  t.set_backward(id, [x = x.id, mul_c](Tape<T>& tp, int self) {
    if (!tp.node(x).requires_grad) return;
    const auto& g = tp.node(self).grad;
    auto& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += mul_c * g[i];
  });
  t.finish_node(id);
  return Var{id};
}

// x[..., F] + b[F]
template <typename T>
Var add_bias(Tape<T>& t, Var x, Var b) {
  const Shape& xs = t.shape(x);
  const Shape& bs = t.shape(b);
  if (bs.size() != 1 || bs[0] != detail::last_of(xs)) detail::shape_fail("add_bias", xs, bs);
  const std::int64_t rows = detail::rows_of(xs);
  const int f = bs[0];
  int id = t.emplace(OpKind::add_bias, xs, {x.id, b.id});
  const auto& xv = t.value(x);
  const auto& bv = t.value(b);
  auto& out = t.mutable_value(id);
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::int64_t base = r * f;
    for (int j = 0; j < f; ++j) out[base + j] = xv[base + j] + bv[j];
  }
  t.set_backward(id, [x = x.id, b = b.id, rows, f](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    if (tp.node(x).requires_grad) {
      auto& gx = tp.grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (tp.node(b).requires_grad) {
      auto& gb = tp.grad_buffer(b);
      for (std::int64_t r = 0; r < rows; ++r) {
        const std::int64_t base = r * f;
        for (int j = 0; j < f; ++j) gb[j] += g[base + j];
      }
    }
  });
  t.finish_node(id);
  return Var{id};
}

// x[..., d] * v[d]
template <typename T>
Var mul_last(Tape<T>& t, Var x, Var v) {
  const Shape& xs = t.shape(x);
  const Shape& vs = t.shape(v);
  if (vs.size() != 1 || vs[0] != detail::last_of(xs)) detail::shape_fail("mul_last", xs, vs);
  const std::int64_t rows = detail::rows_of(xs);
  const int d = vs[0];
  int id = t.emplace(OpKind::mul_last, xs, {x.id, v.id});
  const auto& xv = t.value(x);
  const auto& vv = t.value(v);
  auto& out = t.mutable_value(id);
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::int64_t base = r * d;
    for (int j = 0; j < d; ++j) out[base + j] = xv[base + j] * vv[j];
  }
  t.set_backward(id, [x = x.id, v = v.id, rows, d](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    const auto& xv = tp.node(x).value;
    const auto& vv = tp.node(v).value;
    if (tp.node(x).requires_grad) {
      auto& gx = tp.grad_buffer(x);
      for (std::int64_t r = 0; r < rows; ++r) {
        const std::int64_t base = r * d;
        for (int j = 0; j < d; ++j) gx[base + j] += g[base + j] * vv[j];
      }
    }
    if (tp.node(v).requires_grad) {
      auto& gv = tp.grad_buffer(v);
      for (std::int64_t r = 0; r < rows; ++r) {
        const std::int64_t base = r * d;
        for (int j = 0; j < d; ++j) gv[j] += g[base + j] * xv[base + j];
      }
    }
  });
  t.finish_node(id);
  return Var{id};
}

// m[b,i,j] + r[b,i] + c[b,j]
template <typename T>
Var add_outer(Tape<T>& t, Var m, Var r, Var c) {
  const Shape& ms = t.shape(m);
  const Shape& rs = t.shape(r);
  const Shape& cs = t.shape(c);
  if (ms.size() != 3 || rs.size() != 2 || cs.size() != 2 || rs[0] != ms[0] || cs[0] != ms[0] ||
      rs[1] != ms[1] || cs[1] != ms[2]) {
    detail::shape_fail("add_outer", ms, rs);
  }
  const int bn = ms[0], rn = ms[1], cn = ms[2];
  int id = t.emplace(OpKind::add_outer, ms, {m.id, r.id, c.id});
  const auto& mv = t.value(m);
  const auto& rv = t.value(r);
  const auto& cv = t.value(c);
  auto& out = t.mutable_value(id);
  for (int b = 0; b < bn; ++b) {
    for (int i = 0; i < rn; ++i) {
      const std::int64_t base = (static_cast<std::int64_t>(b) * rn + i) * cn;
      const T ri = rv[b * rn + i];
      for (int j = 0; j < cn; ++j) out[base + j] = mv[base + j] + ri + cv[b * cn + j];
    }
  }
  t.set_backward(id, [m = m.id, r = r.id, c = c.id, bn, rn, cn](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    if (tp.node(m).requires_grad) {
      auto& gm = tp.grad_buffer(m);
      for (std::size_t i = 0; i < g.size(); ++i) gm[i] += g[i];
    }
    if (tp.node(r).requires_grad) {
      auto& gr = tp.grad_buffer(r);
      for (int b = 0; b < bn; ++b)
        for (int i = 0; i < rn; ++i) {
          const std::int64_t base = (static_cast<std::int64_t>(b) * rn + i) * cn;
          T s = 0;
          for (int j = 0; j < cn; ++j) s += g[base + j];
          gr[b * rn + i] += s;
        }
    }
    if (tp.node(c).requires_grad) {
      auto& gc = tp.grad_buffer(c);
      for (int b = 0; b < bn; ++b)
        for (int i = 0; i < rn; ++i) {
          const std::int64_t base = (static_cast<std::int64_t>(b) * rn + i) * cn;
          for (int j = 0; j < cn; ++j) gc[b * cn + j] += g[base + j];
        }
    }
  });
  t.finish_node(id);
  return Var{id};
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void gemm_acc(const T* a, const T* b, T* out, int m, int k, int n) {
  // out[m,n] += a[m,k] * b[k,n]
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::int64_t>(i) * k;
    T* orow = out + static_cast<std::int64_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const T av = arow[l];
      if (av == T(0)) continue;
      const T* brow = b + static_cast<std::int64_t>(l) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// a[m,k] * b[k,n]
template <typename T>
Var matmul(Tape<T>& t, Var a, Var b) {
  const Shape& as = t.shape(a);
  const Shape& bs = t.shape(b);
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0]) detail::shape_fail("matmul", as, bs);
  const int m = as[0], k = as[1], n = bs[1];
  int id = t.emplace(OpKind::matmul, Shape{m, n}, {a.id, b.id});
  detail::gemm_acc(t.value(a).data(), t.value(b).data(), t.mutable_value(id).data(), m, k, n);
  t.set_backward(id, [a = a.id, b = b.id, m, k, n](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    const auto& av = tp.node(a).value;
    const auto& bv = tp.node(b).value;
    if (tp.node(a).requires_grad) {
      // da[i,l] = dot(g[i,:], b[l,:])
      auto& ga = tp.grad_buffer(a);
      for (int i = 0; i < m; ++i) {
        const T* grow = g.data() + static_cast<std::int64_t>(i) * n;
        for (int l = 0; l < k; ++l) {
          const T* brow = bv.data() + static_cast<std::int64_t>(l) * n;
          T s = 0;
          for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
          ga[static_cast<std::int64_t>(i) * k + l] += s;
        }
      }
    }
    if (tp.node(b).requires_grad) {
      // db[l,j] += a[i,l] * g[i,j]
      auto& gb = tp.grad_buffer(b);
      for (int i = 0; i < m; ++i) {
        const T* arow = av.data() + static_cast<std::int64_t>(i) * k;
        const T* grow = g.data() + static_cast<std::int64_t>(i) * n;
        for (int l = 0; l < k; ++l) {
          const T av_il = arow[l];
          if (av_il == T(0)) continue;
          T* brow = gb.data() + static_cast<std::int64_t>(l) * n;
          for (int j = 0; j < n; ++j) brow[j] += av_il * grow[j];
        }
      }
    }
  });
  t.finish_node(id);
  return Var{id};
}

// a[B,m,k] * b[B,k,n]
template <typename T>
Var bmm(Tape<T>& t, Var a, Var b) {
  const Shape& as = t.shape(a);
  const Shape& bs = t.shape(b);
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[1]) {
    detail::shape_fail("bmm", as, bs);
  }
  const int bn = as[0], m = as[1], k = as[2], n = bs[2];
  int id = t.emplace(OpKind::bmm, Shape{bn, m, n}, {a.id, b.id});
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  auto& out = t.mutable_value(id);
  for (int bi = 0; bi < bn; ++bi) {
    detail::gemm_acc(av.data() + static_cast<std::int64_t>(bi) * m * k,
                     bv.data() + static_cast<std::int64_t>(bi) * k * n,
                     out.data() + static_cast<std::int64_t>(bi) * m * n, m, k, n);
  }
  t.set_backward(id, [a = a.id, b = b.id, bn, m, k, n](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    const auto& av = tp.node(a).value;
    const auto& bv = tp.node(b).value;
    if (tp.node(a).requires_grad) {
      auto& ga = tp.grad_buffer(a);
      for (int bi = 0; bi < bn; ++bi) {
        const T* gb_ = g.data() + static_cast<std::int64_t>(bi) * m * n;
        const T* bb = bv.data() + static_cast<std::int64_t>(bi) * k * n;
        T* gab = ga.data() + static_cast<std::int64_t>(bi) * m * k;
        for (int i = 0; i < m; ++i)
          for (int l = 0; l < k; ++l) {
            const T* grow = gb_ + static_cast<std::int64_t>(i) * n;
            const T* brow = bb + static_cast<std::int64_t>(l) * n;
            T s = 0;
            for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
            gab[static_cast<std::int64_t>(i) * k + l] += s;
          }
      }
    }
    if (tp.node(b).requires_grad) {
      auto& gbuf = tp.grad_buffer(b);
      for (int bi = 0; bi < bn; ++bi) {
        const T* gb_ = g.data() + static_cast<std::int64_t>(bi) * m * n;
        const T* ab = av.data() + static_cast<std::int64_t>(bi) * m * k;
        T* gbb = gbuf.data() + static_cast<std::int64_t>(bi) * k * n;
        for (int i = 0; i < m; ++i) {
          const T* arow = ab + static_cast<std::int64_t>(i) * k;
          const T* grow = gb_ + static_cast<std::int64_t>(i) * n;
          for (int l = 0; l < k; ++l) {
            const T av_il = arow[l];
            if (av_il == T(0)) continue;
            T* orow = gbb + static_cast<std::int64_t>(l) * n;
            for (int j = 0; j < n; ++j) orow[j] += av_il * grow[j];
          }
        }
      }
    }
  });
  t.finish_node(id);
  return Var{id};
}

// a[B,m,k] * transpose(b[B,n,k]) -> [B,m,n]
template <typename T>
Var bmm_nt(Tape<T>& t, Var a, Var b) {
  const Shape& as = t.shape(a);
  const Shape& bs = t.shape(b);
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[2]) {
    detail::shape_fail("bmm_nt", as, bs);
  }
  const int bn = as[0], m = as[1], k = as[2], n = bs[1];
  int id = t.emplace(OpKind::bmm_nt, Shape{bn, m, n}, {a.id, b.id});
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  auto& out = t.mutable_value(id);
  for (int bi = 0; bi < bn; ++bi) {
    const T* ab = av.data() + static_cast<std::int64_t>(bi) * m * k;
    const T* bb = bv.data() + static_cast<std::int64_t>(bi) * n * k;
    T* ob = out.data() + static_cast<std::int64_t>(bi) * m * n;
    for (int i = 0; i < m; ++i) {
      const T* arow = ab + static_cast<std::int64_t>(i) * k;
      for (int j = 0; j < n; ++j) {
        const T* brow = bb + static_cast<std::int64_t>(j) * k;
        T s = 0;
        for (int l = 0; l < k; ++l) s += arow[l] * brow[l];
        ob[static_cast<std::int64_t>(i) * n + j] = s;
      }
    }
  }
  t.set_backward(id, [a = a.id, b = b.id, bn, m, k, n](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    const auto& av = tp.node(a).value;
    const auto& bv = tp.node(b).value;
    for (int bi = 0; bi < bn; ++bi) {
      const T* gb_ = g.data() + static_cast<std::int64_t>(bi) * m * n;
      const T* ab = av.data() + static_cast<std::int64_t>(bi) * m * k;
      const T* bb = bv.data() + static_cast<std::int64_t>(bi) * n * k;
      if (tp.node(a).requires_grad) {
        T* gab = tp.grad_buffer(a).data() + static_cast<std::int64_t>(bi) * m * k;
        for (int i = 0; i < m; ++i) {
          const T* grow = gb_ + static_cast<std::int64_t>(i) * n;
          T* garow = gab + static_cast<std::int64_t>(i) * k;
          for (int j = 0; j < n; ++j) {
            const T gv = grow[j];
            if (gv == T(0)) continue;
            const T* brow = bb + static_cast<std::int64_t>(j) * k;
            for (int l = 0; l < k; ++l) garow[l] += gv * brow[l];
          }
        }
      }
      if (tp.node(b).requires_grad) {
        T* gbb = tp.grad_buffer(b).data() + static_cast<std::int64_t>(bi) * n * k;
        for (int i = 0; i < m; ++i) {
          const T* grow = gb_ + static_cast<std::int64_t>(i) * n;
          const T* arow = ab + static_cast<std::int64_t>(i) * k;
          for (int j = 0; j < n; ++j) {
            const T gv = grow[j];
            if (gv == T(0)) continue;
            T* gbrow = gbb + static_cast<std::int64_t>(j) * k;
            for (int l = 0; l < k; ++l) gbrow[l] += gv * arow[l];
          }
        }
      }
    }
  });
  t.finish_node(id);
  return Var{id};
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

template <typename T>
Var reshape(Tape<T>& t, Var x, Shape s) {
  if (shape_numel(s) != shape_numel(t.shape(x))) detail::shape_fail("reshape", t.shape(x), s);
  int id = t.emplace(OpKind::reshape, std::move(s), {x.id});
  t.mutable_value(id) = t.value(x);
  t.set_backward(id, [x = x.id](Tape<T>& tp, int self) {
    if (!tp.node(x).requires_grad) return;
    const auto& g = tp.node(self).grad;
    auto& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  t.finish_node(id);
  return Var{id};
}

template <typename T>
Var slice_last(Tape<T>& t, Var x, int start, int len) {
  const Shape& xs = t.shape(x);
  const int d = detail::last_of(xs);
  if (start < 0 || len <= 0 || start + len > d) {
    throw ShapeError("slice_last: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of " + shape_str(xs));
  }
  Shape os = xs;
  os.back() = len;
  const std::int64_t rows = detail::rows_of(xs);
  int id = t.emplace(OpKind::slice_last, os, {x.id});
  const auto& xv = t.value(x);
  auto& out = t.mutable_value(id);
  for (std::int64_t r = 0; r < rows; ++r) {
    for (int j = 0; j < len; ++j) out[r * len + j] = xv[r * d + start + j];
  }
  t.set_backward(id, [x = x.id, start, len, d, rows](Tape<T>& tp, int self) {
    if (!tp.node(x).requires_grad) return;
    const auto& g = tp.node(self).grad;
    auto& gx = tp.grad_buffer(x);
    for (std::int64_t r = 0; r < rows; ++r)
      for (int j = 0; j < len; ++j) gx[r * d + start + j] += g[r * len + j];
  });
  t.finish_node(id);
  return Var{id};
}

template <typename T>
Var concat_last(Tape<T>& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_last: no inputs");
  Shape lead = t.shape(parts[0]);
  lead.pop_back();
  int total = 0;
  std::vector<int> widths;
  std::vector<int> ids;
  for (Var p : parts) {
    Shape s = t.shape(p);
    const int w = s.back();
    s.pop_back();
    if (s != lead) detail::shape_fail("concat_last", t.shape(parts[0]), t.shape(p));
    widths.push_back(w);
    ids.push_back(p.id);
    total += w;
  }
  Shape os = lead;
  os.push_back(total);
  int id = t.emplace(OpKind::concat_last, os, ids);
  auto& out = t.mutable_value(id);
  const std::int64_t rows = detail::rows_of(os);
  int offset = 0;
  for (std::size_t pi = 0; pi < ids.size(); ++pi) {
    const auto& xv = t.value(Var{ids[pi]});
    const int w = widths[pi];
    for (std::int64_t r = 0; r < rows; ++r)
      for (int j = 0; j < w; ++j) out[r * total + offset + j] = xv[r * w + j];
    offset += w;
  }
  t.set_backward(id, [ids, widths, total, rows](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    int offset = 0;
    for (std::size_t pi = 0; pi < ids.size(); ++pi) {
      const int w = widths[pi];
      if (tp.node(ids[pi]).requires_grad) {
        auto& gx = tp.grad_buffer(ids[pi]);
        for (std::int64_t r = 0; r < rows; ++r)
          for (int j = 0; j < w; ++j) gx[r * w + j] += g[r * total + offset + j];
      }
      offset += w;
    }
  });
  t.finish_node(id);
  return Var{id};
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Var sum_last(Tape<T>& t, Var x) {
  const Shape& xs = t.shape(x);
  Shape os(xs.begin(), xs.end() - 1);
  if (os.empty()) os.push_back(1);
  const int d = detail::last_of(xs);
  const std::int64_t rows = detail::rows_of(xs);
  int id = t.emplace(OpKind::sum_last, os, {x.id});
  const auto& xv = t.value(x);
  auto& out = t.mutable_value(id);
  for (std::int64_t r = 0; r < rows; ++r) {
    T s = 0;
    for (int j = 0; j < d; ++j) s += xv[r * d + j];
    out[r] = s;
  }
  t.set_backward(id, [x = x.id, d, rows](Tape<T>& tp, int self) {
    if (!tp.node(x).requires_grad) return;
    const auto& g = tp.node(self).grad;
    auto& gx = tp.grad_buffer(x);
    for (std::int64_t r = 0; r < rows; ++r)
      for (int j = 0; j < d; ++j) gx[r * d + j] += g[r];
  });
  t.finish_node(id);
  return Var{id};
}

template <typename T>
Var sum_all(Tape<T>& t, Var x) {
  int id = t.emplace(OpKind::sum_all, Shape{1}, {x.id});
  const auto& xv = t.value(x);
  T s = 0;
  for (T v : xv) s += v;
  t.mutable_value(id)[0] = s;
  t.set_backward(id, [x = x.id](Tape<T>& tp, int self) {
    if (!tp.node(x).requires_grad) return;
    const T g = tp.node(self).grad[0];
    auto& gx = tp.grad_buffer(x);
    for (auto& v : gx) v += g;
  });
  t.finish_node(id);
  return Var{id};
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
Var relu(Tape<T>& t, Var x) {
  int id = t.emplace(OpKind::relu, t.shape(x), {x.id});
  const auto& xv = t.value(x);
  auto& out = t.mutable_value(id);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
  t.set_backward(id, [x = x.id](Tape<T>& tp, int self) {
    if (!tp.node(x).requires_grad) return;
    const auto& g = tp.node(self).grad;
    const auto& xv = tp.node(x).value;
    auto& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > T(0)) gx[i] += g[i];
    }
  });
  t.finish_node(id);
  return Var{id};
}

template <typename T>
Var tanh(Tape<T>& t, Var x) {
  int id = t.emplace(OpKind::tanh_act, t.shape(x), {x.id});
  const auto& xv = t.value(x);
  auto& out = t.mutable_value(id);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
  t.set_backward(id, [x = x.id](Tape<T>& tp, int self) {
    if (!tp.node(x).requires_grad) return;
    const auto& g = tp.node(self).grad;
    const auto& y = tp.node(self).value;
    auto& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (T(1) - y[i] * y[i]);
  });
  t.finish_node(id);
  return Var{id};
}

template <typename T>
Var sigmoid(Tape<T>& t, Var x) {
  int id = t.emplace(OpKind::sigmoid_act, t.shape(x), {x.id});
  const auto& xv = t.value(x);
  auto& out = t.mutable_value(id);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-xv[i]));
  t.set_backward(id, [x = x.id](Tape<T>& tp, int self) {
    if (!tp.node(x).requires_grad) return;
    const auto& g = tp.node(self).grad;
    const auto& y = tp.node(self).value;
    auto& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
  });
  t.finish_node(id);
  return Var{id};
}

// ---------------------------------------------------------------------------
// Embedding lookup
// ---------------------------------------------------------------------------

// table[V,d] gathered by ids; output shaped ids_shape + [d].
template <typename T>
Var embedding(Tape<T>& t, Var table, const std::vector<int>& ids, const Shape& ids_shape) {
  const Shape& ts = t.shape(table);
  if (ts.size() != 2) detail::shape_fail("embed", ts, ids_shape);
  if (shape_numel(ids_shape) != static_cast<std::int64_t>(ids.size())) {
    throw ShapeError("embed: ids shape " + shape_str(ids_shape) + " does not match id count " +
                     std::to_string(ids.size()));
  }
  const int v = ts[0], d = ts[1];
  for (int idx : ids) {
    if (idx < 0 || idx >= v) {
      throw ShapeError("embed: id " + std::to_string(idx) + " out of range for table " +
                       shape_str(ts));
    }
  }
  Shape os = ids_shape;
  os.push_back(d);
  int id = t.emplace(OpKind::embed, os, {table.id});
  const auto& tv = t.value(table);
  auto& out = t.mutable_value(id);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const T* row = tv.data() + static_cast<std::int64_t>(ids[r]) * d;
    T* orow = out.data() + static_cast<std::int64_t>(r) * d;
    std::copy(row, row + d, orow);
  }
  t.set_backward(id, [table = table.id, ids, d](Tape<T>& tp, int self) {
    if (!tp.node(table).requires_grad) return;
    const auto& g = tp.node(self).grad;
    auto& gt = tp.grad_buffer(table);
    for (std::size_t r = 0; r < ids.size(); ++r) {
      T* trow = gt.data() + static_cast<std::int64_t>(ids[r]) * d;
      const T* grow = g.data() + static_cast<std::int64_t>(r) * d;
      for (int j = 0; j < d; ++j) trow[j] += grow[j];
    }
  });
  t.finish_node(id);
  return Var{id};
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

namespace detail {

struct ConvGeom {
  int batch, h, w, cin, kh, kw, f;
  bool batched;  // input had a leading batch dim
};

template <typename T>
ConvGeom conv_geom(const Tape<T>& t, Var x, Var k) {
  const Shape& xs = t.shape(x);
  const Shape& ks = t.shape(k);
  if (ks.size() != 4) throw ShapeError("conv2d: kernel must be rank 4, got " + shape_str(ks));
  ConvGeom g{};
  if (xs.size() == 4) {
    g = ConvGeom{xs[0], xs[1], xs[2], xs[3], ks[0], ks[1], ks[3], true};
  } else if (xs.size() == 3) {
    g = ConvGeom{1, xs[0], xs[1], xs[2], ks[0], ks[1], ks[3], false};
  } else {
    throw ShapeError("conv2d: input must be rank 3 or 4, got " + shape_str(xs));
  }
  if (g.kh % 2 == 0 || g.kw % 2 == 0) {
    throw ShapeError("conv2d: kernel extents must be odd for same padding, got " + shape_str(ks));
  }
  if (ks[2] != g.cin) {
    throw ShapeError("conv2d: input channels " + std::to_string(g.cin) +
                     " do not match kernel " + shape_str(ks));
  }
  return g;
}

}  // namespace detail

// Same zero padding, stride 1. Bias is optional (pass Var{} for none); the
// activation is the caller's responsibility.
template <typename T>
Var conv2d(Tape<T>& t, Var x, Var k, Var bias = Var{}) {
  const detail::ConvGeom g = detail::conv_geom(t, x, k);
  const bool has_bias = bias.valid();
  if (has_bias) {
    const Shape& bs = t.shape(bias);
    if (bs.size() != 1 || bs[0] != g.f) detail::shape_fail("conv2d bias", t.shape(k), bs);
  }
  Shape os = g.batched ? Shape{g.batch, g.h, g.w, g.f} : Shape{g.h, g.w, g.f};
  std::vector<int> ins{x.id, k.id};
  if (has_bias) ins.push_back(bias.id);
  int id = t.emplace(OpKind::conv2d, os, ins);
  t.node(id).has_bias = has_bias;

  const auto& xv = t.value(x);
  const auto& kv = t.value(k);
  auto& out = t.mutable_value(id);
  const int ph = g.kh / 2, pw = g.kw / 2;
  for (int b = 0; b < g.batch; ++b) {
    const T* xb = xv.data() + static_cast<std::int64_t>(b) * g.h * g.w * g.cin;
    T* ob = out.data() + static_cast<std::int64_t>(b) * g.h * g.w * g.f;
    for (int i = 0; i < g.h; ++i) {
      for (int j = 0; j < g.w; ++j) {
        T* orow = ob + (static_cast<std::int64_t>(i) * g.w + j) * g.f;
        if (has_bias) {
          const auto& bv = t.value(bias);
          std::copy(bv.begin(), bv.end(), orow);
        }
        for (int di = 0; di < g.kh; ++di) {
          const int ii = i + di - ph;
          if (ii < 0 || ii >= g.h) continue;
          for (int dj = 0; dj < g.kw; ++dj) {
            const int jj = j + dj - pw;
            if (jj < 0 || jj >= g.w) continue;
            const T* xrow = xb + (static_cast<std::int64_t>(ii) * g.w + jj) * g.cin;
            const T* kmat = kv.data() + (static_cast<std::int64_t>(di) * g.kw + dj) * g.cin * g.f;
            for (int c = 0; c < g.cin; ++c) {
              const T xvv = xrow[c];
              if (xvv == T(0)) continue;
              const T* krow = kmat + static_cast<std::int64_t>(c) * g.f;
              for (int fo = 0; fo < g.f; ++fo) orow[fo] += xvv * krow[fo];
            }
          }
        }
      }
    }
  }

  t.set_backward(id, [x = x.id, k = k.id, bid = has_bias ? bias.id : -1, g](Tape<T>& tp,
                                                                            int self) {
    const auto& gr = tp.node(self).grad;
    const auto& xv = tp.node(x).value;
    const auto& kv = tp.node(k).value;
    const bool need_x = tp.node(x).requires_grad;
    const bool need_k = tp.node(k).requires_grad;
    const bool need_b = bid >= 0 && tp.node(bid).requires_grad;
    T* gx = need_x ? tp.grad_buffer(x).data() : nullptr;
    T* gk = need_k ? tp.grad_buffer(k).data() : nullptr;
    T* gb = need_b ? tp.grad_buffer(bid).data() : nullptr;
    const int ph = g.kh / 2, pw = g.kw / 2;
    for (int b = 0; b < g.batch; ++b) {
      const T* xb = xv.data() + static_cast<std::int64_t>(b) * g.h * g.w * g.cin;
      const T* grb = gr.data() + static_cast<std::int64_t>(b) * g.h * g.w * g.f;
      T* gxb = need_x ? gx + static_cast<std::int64_t>(b) * g.h * g.w * g.cin : nullptr;
      for (int i = 0; i < g.h; ++i) {
        for (int j = 0; j < g.w; ++j) {
          const T* grow = grb + (static_cast<std::int64_t>(i) * g.w + j) * g.f;
          if (need_b) {
            for (int fo = 0; fo < g.f; ++fo) gb[fo] += grow[fo];
          }
          for (int di = 0; di < g.kh; ++di) {
            const int ii = i + di - ph;
            if (ii < 0 || ii >= g.h) continue;
            for (int dj = 0; dj < g.kw; ++dj) {
              const int jj = j + dj - pw;
              if (jj < 0 || jj >= g.w) continue;
              const std::int64_t xoff = (static_cast<std::int64_t>(ii) * g.w + jj) * g.cin;
              const std::int64_t koff = (static_cast<std::int64_t>(di) * g.kw + dj) * g.cin * g.f;
              for (int c = 0; c < g.cin; ++c) {
                const T* krow = kv.data() + koff + static_cast<std::int64_t>(c) * g.f;
                if (need_x) {
                  T s = 0;
                  for (int fo = 0; fo < g.f; ++fo) s += grow[fo] * krow[fo];
                  gxb[xoff + c] += s;
                }
                if (need_k) {
                  const T xvv = xb[xoff + c];
                  if (xvv == T(0)) continue;
                  T* gkrow = gk + koff + static_cast<std::int64_t>(c) * g.f;
                  for (int fo = 0; fo < g.f; ++fo) gkrow[fo] += xvv * grow[fo];
                }
              }
            }
          }
        }
      }
    }
  });
  t.finish_node(id);
  return Var{id};
}

namespace detail {

struct PoolGeom {
  int batch, h, w, c, oh, ow;
  bool batched;
};

template <typename T>
PoolGeom pool_geom(const Tape<T>& t, Var x, const char* op) {
  const Shape& xs = t.shape(x);
  PoolGeom g{};
  if (xs.size() == 4) {
    g = PoolGeom{xs[0], xs[1], xs[2], xs[3], 0, 0, true};
  } else if (xs.size() == 3) {
    g = PoolGeom{1, xs[0], xs[1], xs[2], 0, 0, false};
  } else {
    throw ShapeError(std::string(op) + ": input must be rank 3 or 4, got " + shape_str(xs));
  }
  g.oh = (g.h + 1) / 2;
  g.ow = (g.w + 1) / 2;
  return g;
}

}  // namespace detail

// 2x2 window, stride 2; ragged right/bottom edges pool over the partial
// window. Backward routes gradient to the first-occurrence argmax.
template <typename T>
Var max_pool2d(Tape<T>& t, Var x) {
  const detail::PoolGeom g = detail::pool_geom(t, x, "max_pool2d");
  Shape os = g.batched ? Shape{g.batch, g.oh, g.ow, g.c} : Shape{g.oh, g.ow, g.c};
  int id = t.emplace(OpKind::max_pool2d, os, {x.id});
  const auto& xv = t.value(x);
  auto& out = t.mutable_value(id);
  std::vector<std::int64_t> argmax(out.size());
  for (int b = 0; b < g.batch; ++b) {
    const std::int64_t xbase = static_cast<std::int64_t>(b) * g.h * g.w * g.c;
    const std::int64_t obase = static_cast<std::int64_t>(b) * g.oh * g.ow * g.c;
    for (int oi = 0; oi < g.oh; ++oi) {
      for (int oj = 0; oj < g.ow; ++oj) {
        const int i0 = oi * 2, j0 = oj * 2;
        const int i1 = std::min(i0 + 2, g.h), j1 = std::min(j0 + 2, g.w);
        for (int c = 0; c < g.c; ++c) {
          T best = -std::numeric_limits<T>::infinity();
          std::int64_t bestpos = -1;
          for (int i = i0; i < i1; ++i) {
            for (int j = j0; j < j1; ++j) {
              const std::int64_t pos = xbase + (static_cast<std::int64_t>(i) * g.w + j) * g.c + c;
              if (xv[pos] > best) {
                best = xv[pos];
                bestpos = pos;
              }
            }
          }
          const std::int64_t opos = obase + (static_cast<std::int64_t>(oi) * g.ow + oj) * g.c + c;
          out[opos] = best;
          argmax[opos] = bestpos;
        }
      }
    }
  }
  t.set_backward(id, [x = x.id, argmax = std::move(argmax)](Tape<T>& tp, int self) {
    if (!tp.node(x).requires_grad) return;
    const auto& g = tp.node(self).grad;
    auto& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
  });
  t.finish_node(id);
  return Var{id};
}

// 2x2 window, stride 2, partial windows averaged over their actual size.
// Not used by the inference network; present so graph audits are checking a
// real alternative.
template <typename T>
Var avg_pool2d(Tape<T>& t, Var x) {
  const detail::PoolGeom g = detail::pool_geom(t, x, "avg_pool2d");
  Shape os = g.batched ? Shape{g.batch, g.oh, g.ow, g.c} : Shape{g.oh, g.ow, g.c};
  int id = t.emplace(OpKind::avg_pool2d, os, {x.id});
  const auto& xv = t.value(x);
  auto& out = t.mutable_value(id);
  for (int b = 0; b < g.batch; ++b) {
    const std::int64_t xbase = static_cast<std::int64_t>(b) * g.h * g.w * g.c;
    const std::int64_t obase = static_cast<std::int64_t>(b) * g.oh * g.ow * g.c;
    for (int oi = 0; oi < g.oh; ++oi) {
      for (int oj = 0; oj < g.ow; ++oj) {
        const int i0 = oi * 2, j0 = oj * 2;
        const int i1 = std::min(i0 + 2, g.h), j1 = std::min(j0 + 2, g.w);
        const T inv = T(1) / static_cast<T>((i1 - i0) * (j1 - j0));
        for (int c = 0; c < g.c; ++c) {
          T s = 0;
          for (int i = i0; i < i1; ++i)
            for (int j = j0; j < j1; ++j)
              s += xv[xbase + (static_cast<std::int64_t>(i) * g.w + j) * g.c + c];
          out[obase + (static_cast<std::int64_t>(oi) * g.ow + oj) * g.c + c] = s * inv;
        }
      }
    }
  }
  t.set_backward(id, [x = x.id, g](Tape<T>& tp, int self) {
    if (!tp.node(x).requires_grad) return;
    const auto& gr = tp.node(self).grad;
    auto& gx = tp.grad_buffer(x);
    for (int b = 0; b < g.batch; ++b) {
      const std::int64_t xbase = static_cast<std::int64_t>(b) * g.h * g.w * g.c;
      const std::int64_t obase = static_cast<std::int64_t>(b) * g.oh * g.ow * g.c;
      for (int oi = 0; oi < g.oh; ++oi) {
        for (int oj = 0; oj < g.ow; ++oj) {
          const int i0 = oi * 2, j0 = oj * 2;
          const int i1 = std::min(i0 + 2, g.h), j1 = std::min(j0 + 2, g.w);
          const T inv = T(1) / static_cast<T>((i1 - i0) * (j1 - j0));
          for (int c = 0; c < g.c; ++c) {
            const T gv = gr[obase + (static_cast<std::int64_t>(oi) * g.ow + oj) * g.c + c] * inv;
            for (int i = i0; i < i1; ++i)
              for (int j = j0; j < j1; ++j)
                gx[xbase + (static_cast<std::int64_t>(i) * g.w + j) * g.c + c] += gv;
          }
        }
      }
    }
  });
  t.finish_node(id);
  return Var{id};
}

// Max over all spatial positions: [B,H,W,C] -> [B,C].
template <typename T>
Var global_max_pool(Tape<T>& t, Var x) {
  const Shape& xs = t.shape(x);
  if (xs.size() != 4) throw ShapeError("global_max_pool: input must be rank 4, got " + shape_str(xs));
  const int bn = xs[0], hw = xs[1] * xs[2], c = xs[3];
  int id = t.emplace(OpKind::global_max_pool, Shape{bn, c}, {x.id});
  const auto& xv = t.value(x);
  auto& out = t.mutable_value(id);
  std::vector<std::int64_t> argmax(out.size());
  for (int b = 0; b < bn; ++b) {
    const std::int64_t xbase = static_cast<std::int64_t>(b) * hw * c;
    for (int ch = 0; ch < c; ++ch) {
      T best = -std::numeric_limits<T>::infinity();
      std::int64_t bestpos = -1;
      for (int p = 0; p < hw; ++p) {
        const std::int64_t pos = xbase + static_cast<std::int64_t>(p) * c + ch;
        if (xv[pos] > best) {
          best = xv[pos];
          bestpos = pos;
        }
      }
      out[static_cast<std::int64_t>(b) * c + ch] = best;
      argmax[static_cast<std::int64_t>(b) * c + ch] = bestpos;
    }
  }
  t.set_backward(id, [x = x.id, argmax = std::move(argmax)](Tape<T>& tp, int self) {
    if (!tp.node(x).requires_grad) return;
    const auto& g = tp.node(self).grad;
    auto& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
  });
  t.finish_node(id);
  return Var{id};
}

// x[N,S,C] with mask[N*S]: per row, max over unmasked positions in each
// channel. A fully masked row yields a zero vector and passes no gradient.
template <typename T>
Var max_over_time(Tape<T>& t, Var x, const std::vector<std::uint8_t>& mask) {
  const Shape& xs = t.shape(x);
  if (xs.size() != 3) throw ShapeError("max_over_time: input must be rank 3, got " + shape_str(xs));
  const int n = xs[0], s = xs[1], c = xs[2];
  if (static_cast<std::int64_t>(mask.size()) != static_cast<std::int64_t>(n) * s) {
    throw ShapeError("max_over_time: mask length " + std::to_string(mask.size()) +
                     " does not match " + shape_str(xs));
  }
  int id = t.emplace(OpKind::max_over_time, Shape{n, c}, {x.id});
  const auto& xv = t.value(x);
  auto& out = t.mutable_value(id);
  std::vector<std::int64_t> argmax(out.size(), -1);
  for (int r = 0; r < n; ++r) {
    const std::int64_t xbase = static_cast<std::int64_t>(r) * s * c;
    for (int ch = 0; ch < c; ++ch) {
      T best = -std::numeric_limits<T>::infinity();
      std::int64_t bestpos = -1;
      for (int p = 0; p < s; ++p) {
        if (!mask[static_cast<std::int64_t>(r) * s + p]) continue;
        const std::int64_t pos = xbase + static_cast<std::int64_t>(p) * c + ch;
        if (xv[pos] > best) {
          best = xv[pos];
          bestpos = pos;
        }
      }
      const std::int64_t opos = static_cast<std::int64_t>(r) * c + ch;
      out[opos] = bestpos >= 0 ? best : T(0);
      argmax[opos] = bestpos;
    }
  }
  t.set_backward(id, [x = x.id, argmax = std::move(argmax)](Tape<T>& tp, int self) {
    if (!tp.node(x).requires_grad) return;
    const auto& g = tp.node(self).grad;
    auto& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (argmax[i] >= 0) gx[argmax[i]] += g[i];
    }
  });
  t.finish_node(id);
  return Var{id};
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

// Row-wise softmax over the last dim with a boolean mask of identical layout.
// Masked positions get probability zero; each row must have at least one
// unmasked position. Stabilized by max subtraction.
template <typename T>
Var masked_softmax(Tape<T>& t, Var x, const std::vector<std::uint8_t>& mask) {
  const Shape& xs = t.shape(x);
  if (static_cast<std::int64_t>(mask.size()) != shape_numel(xs)) {
    throw ShapeError("masked_softmax: mask length " + std::to_string(mask.size()) +
                     " does not match " + shape_str(xs));
  }
  const int d = detail::last_of(xs);
  const std::int64_t rows = detail::rows_of(xs);
  int id = t.emplace(OpKind::masked_softmax, xs, {x.id});
  const auto& xv = t.value(x);
  auto& out = t.mutable_value(id);
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::int64_t base = r * d;
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < d; ++j) {
      if (mask[base + j] && xv[base + j] > mx) mx = xv[base + j];
    }
    if (mx == -std::numeric_limits<T>::infinity()) {
      throw ShapeError("masked_softmax: all-false mask in row " + std::to_string(r));
    }
    T sum = 0;
    for (int j = 0; j < d; ++j) {
      const T e = mask[base + j] ? std::exp(xv[base + j] - mx) : T(0);
      out[base + j] = e;
      sum += e;
    }
    const T inv = T(1) / sum;
    for (int j = 0; j < d; ++j) out[base + j] *= inv;
  }
  t.set_backward(id, [x = x.id, d, rows](Tape<T>& tp, int self) {
    if (!tp.node(x).requires_grad) return;
    const auto& g = tp.node(self).grad;
    const auto& p = tp.node(self).value;
    auto& gx = tp.grad_buffer(x);
    for (std::int64_t r = 0; r < rows; ++r) {
      const std::int64_t base = r * d;
      T dot = 0;
      for (int j = 0; j < d; ++j) dot += g[base + j] * p[base + j];
      for (int j = 0; j < d; ++j) gx[base + j] += p[base + j] * (g[base + j] - dot);
    }
  });
  t.finish_node(id);
  return Var{id};
}

// Mean cross-entropy of logits[B,K] against integer labels, fused with the
// softmax for stability. Output is scalar.
template <typename T>
Var softmax_xent_mean(Tape<T>& t, Var logits, const std::vector<int>& labels) {
  const Shape& ls = t.shape(logits);
  if (ls.size() != 2 || static_cast<std::size_t>(ls[0]) != labels.size()) {
    throw ShapeError("softmax_xent: logits " + shape_str(ls) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  }
  const int bn = ls[0], k = ls[1];
  for (int y : labels) {
    if (y < 0 || y >= k) throw ShapeError("softmax_xent: label " + std::to_string(y) + " out of range");
  }
  int id = t.emplace(OpKind::softmax_xent, Shape{1}, {logits.id});
  const auto& lv = t.value(logits);
  std::vector<T> probs(lv.size());
  T loss = 0;
  for (int b = 0; b < bn; ++b) {
    const std::int64_t base = static_cast<std::int64_t>(b) * k;
    T mx = lv[base];
    for (int j = 1; j < k; ++j) mx = std::max(mx, lv[base + j]);
    T sum = 0;
    for (int j = 0; j < k; ++j) {
      probs[base + j] = std::exp(lv[base + j] - mx);
      sum += probs[base + j];
    }
    const T inv = T(1) / sum;
    for (int j = 0; j < k; ++j) probs[base + j] *= inv;
    loss -= std::log(probs[base + labels[b]]);
  }
  t.mutable_value(id)[0] = loss / static_cast<T>(bn);
  t.set_backward(id, [logits = logits.id, labels, probs = std::move(probs), bn,
                      k](Tape<T>& tp, int self) {
    if (!tp.node(logits).requires_grad) return;
    const T g = tp.node(self).grad[0] / static_cast<T>(bn);
    auto& gl = tp.grad_buffer(logits);
    for (int b = 0; b < bn; ++b) {
      const std::int64_t base = static_cast<std::int64_t>(b) * k;
      for (int j = 0; j < k; ++j) {
        gl[base + j] += g * (probs[base + j] - (j == labels[b] ? T(1) : T(0)));
      }
    }
  });
  t.finish_node(id);
  return Var{id};
}

// ---------------------------------------------------------------------------
// Dropout (inverted: scales survivors by 1/(1-rate) so eval is identity)
// ---------------------------------------------------------------------------

template <typename T>
Var dropout(Tape<T>& t, Var x, double rate, std::mt19937& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ShapeError("dropout: rate must be in [0,1), got " + std::to_string(rate));
  }
  int id = t.emplace(OpKind::dropout, t.shape(x), {x.id});
  const auto& xv = t.value(x);
  auto& out = t.mutable_value(id);
  std::vector<T> keep(xv.size());
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  for (std::size_t i = 0; i < xv.size(); ++i) {
    keep[i] = unif(rng) < rate ? T(0) : scale;
    out[i] = xv[i] * keep[i];
  }
  t.set_backward(id, [x = x.id, keep = std::move(keep)](Tape<T>& tp, int self) {
    if (!tp.node(x).requires_grad) return;
    const auto& g = tp.node(self).grad;
    auto& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * keep[i];
  });
  t.finish_node(id);
  return Var{id};
}

// ---------------------------------------------------------------------------
// Interaction tensor
// ---------------------------------------------------------------------------

// out[b,i,j,:] = p[b,i,:] * h[b,j,:]
template <typename T>
Var interact(Tape<T>& t, Var p, Var h) {
  const Shape& ps = t.shape(p);
  const Shape& hs = t.shape(h);
  if (ps.size() != 3 || hs.size() != 3 || ps[0] != hs[0] || ps[2] != hs[2]) {
    detail::shape_fail("interact", ps, hs);
  }
  const int bn = ps[0], pl = ps[1], hl = hs[1], d = ps[2];
  int id = t.emplace(OpKind::interact, Shape{bn, pl, hl, d}, {p.id, h.id});
  const auto& pv = t.value(p);
  const auto& hv = t.value(h);
  auto& out = t.mutable_value(id);
  for (int b = 0; b < bn; ++b) {
    for (int i = 0; i < pl; ++i) {
      const T* prow = pv.data() + (static_cast<std::int64_t>(b) * pl + i) * d;
      for (int j = 0; j < hl; ++j) {
        const T* hrow = hv.data() + (static_cast<std::int64_t>(b) * hl + j) * d;
        T* orow = out.data() + ((static_cast<std::int64_t>(b) * pl + i) * hl + j) * d;
        for (int c = 0; c < d; ++c) orow[c] = prow[c] * hrow[c];
      }
    }
  }
  t.set_backward(id, [p = p.id, h = h.id, bn, pl, hl, d](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    const auto& pv = tp.node(p).value;
    const auto& hv = tp.node(h).value;
    const bool need_p = tp.node(p).requires_grad;
    const bool need_h = tp.node(h).requires_grad;
    T* gp = need_p ? tp.grad_buffer(p).data() : nullptr;
    T* gh = need_h ? tp.grad_buffer(h).data() : nullptr;
    for (int b = 0; b < bn; ++b) {
      for (int i = 0; i < pl; ++i) {
        const T* prow = pv.data() + (static_cast<std::int64_t>(b) * pl + i) * d;
        T* gprow = need_p ? gp + (static_cast<std::int64_t>(b) * pl + i) * d : nullptr;
        for (int j = 0; j < hl; ++j) {
          const T* hrow = hv.data() + (static_cast<std::int64_t>(b) * hl + j) * d;
          const T* grow = g.data() + ((static_cast<std::int64_t>(b) * pl + i) * hl + j) * d;
          if (need_p) {
            for (int c = 0; c < d; ++c) gprow[c] += grow[c] * hrow[c];
          }
          if (need_h) {
            T* ghrow = gh + (static_cast<std::int64_t>(b) * hl + j) * d;
            for (int c = 0; c < d; ++c) ghrow[c] += grow[c] * prow[c];
          }
        }
      }
    }
  });
  t.finish_node(id);
  return Var{id};
}

// Plain (non-tape) row softmax used at inference time.
template <typename T>
std::vector<T> softmax_rows(const std::vector<T>& logits, int k) {
  std::vector<T> out(logits.size());
  const std::int64_t rows = static_cast<std::int64_t>(logits.size()) / k;
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::int64_t base = r * k;
    T mx = logits[base];
    for (int j = 1; j < k; ++j) mx = std::max(mx, logits[base + j]);
    T sum = 0;
    for (int j = 0; j < k; ++j) {
      out[base + j] = std::exp(logits[base + j] - mx);
      sum += out[base + j];
    }
    for (int j = 0; j < k; ++j) out[base + j] /= sum;
  }
  return out;
}

}  // namespace diin
