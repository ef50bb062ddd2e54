#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "meta/autograd.hpp"
#include "meta/kernels.hpp"

// Differentiable operations over Tape values. Every op records its output on
// the tape of its inputs; backward closures capture whatever forward values
// they need by value.

namespace meta {

namespace detail {

inline Tape& common_tape(const Var& a, const Var& b) {
  Tape& t = a.tape();
  require(&t == &b.tape(), ErrorKind::state, "operands live on different tapes");
  return t;
}

inline void require_same_shape(const char* op, const Var& a, const Var& b) {
  require(a.shape() == b.shape(), ErrorKind::shape,
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void require_rank(const char* op, const Var& a, std::size_t rank) {
  require(a.shape().size() == rank, ErrorKind::shape,
          std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape()));
}

inline void add_into(std::vector<double>& dst, const std::vector<double>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// (outer, axis, inner) decomposition of a shape around `axis`.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  require(axis < s.size(), ErrorKind::shape, "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Var add(Var a, Var b) {
  Tape& t = detail::common_tape(a, b);
  detail::require_same_shape("add", a, b);
  t.check_inputs({a, b});
  Tensor out = a.value();
  out.grad.clear();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), a.requires_grad() || b.requires_grad(), [ia, ib](Tape& tp, const auto& g) {
    if (tp.requires_grad(ia)) detail::add_into(tp.grad_buffer(ia), g);
    if (tp.requires_grad(ib)) detail::add_into(tp.grad_buffer(ib), g);
  });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::common_tape(a, b);
  detail::require_same_shape("sub", a, b);
  t.check_inputs({a, b});
  Tensor out = a.value();
  out.grad.clear();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), a.requires_grad() || b.requires_grad(), [ia, ib](Tape& tp, const auto& g) {
    if (tp.requires_grad(ia)) detail::add_into(tp.grad_buffer(ia), g);
    if (tp.requires_grad(ib)) {
      auto& gb = tp.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::common_tape(a, b);
  detail::require_same_shape("mul", a, b);
  t.check_inputs({a, b});
  const auto& av = a.value().data;
  const auto& bv = b.value().data;
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = av[i] * bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), a.requires_grad() || b.requires_grad(), [ia, ib, av, bv](Tape& tp, const auto& g) {
    if (tp.requires_grad(ia)) {
      auto& ga = tp.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(ib)) {
      auto& gb = tp.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Var div(Var a, Var b) {
  Tape& t = detail::common_tape(a, b);
  detail::require_same_shape("div", a, b);
  t.check_inputs({a, b});
  const auto& av = a.value().data;
  const auto& bv = b.value().data;
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = av[i] / bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), a.requires_grad() || b.requires_grad(), [ia, ib, av, bv](Tape& tp, const auto& g) {
    if (tp.requires_grad(ia)) {
      auto& ga = tp.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv[i];
    }
    if (tp.requires_grad(ib)) {
      auto& gb = tp.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

inline Var add_scalar(Var a, double s) {
  Tape& t = a.tape();
  t.check_inputs({a});
  Tensor out(a.shape(), a.value().data);
  for (double& v : out.data) v += s;
  const std::size_t ia = a.id();
  return t.record(std::move(out), a.requires_grad(),
                  [ia](Tape& tp, const auto& g) { detail::add_into(tp.grad_buffer(ia), g); });
}

inline Var mul_scalar(Var a, double s) {
  Tape& t = a.tape();
  t.check_inputs({a});
  Tensor out(a.shape(), a.value().data);
  for (double& v : out.data) v *= s;
  const std::size_t ia = a.id();
  return t.record(std::move(out), a.requires_grad(), [ia, s](Tape& tp, const auto& g) {
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

/// max(x, 0); subgradient 0 at the kink.
inline Var relu(Var a) {
  Tape& t = a.tape();
  t.check_inputs({a});
  const auto& av = a.value().data;
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = av[i] > 0.0 ? av[i] : 0.0;
  const std::size_t ia = a.id();
  std::vector<char> mask(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) mask[i] = av[i] > 0.0;
  return t.record(std::move(out), a.requires_grad(), [ia, mask = std::move(mask)](Tape& tp, const auto& g) {
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (mask[i]) ga[i] += g[i];
  });
}

inline Var exp(Var a) {
  Tape& t = a.tape();
  t.check_inputs({a});
  Tensor out(a.shape(), a.value().data);
  for (double& v : out.data) v = std::exp(v);
  const std::size_t ia = a.id();
  std::vector<double> ov = out.data;
  return t.record(std::move(out), a.requires_grad(), [ia, ov = std::move(ov)](Tape& tp, const auto& g) {
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * ov[i];
  });
}

inline Var log(Var a) {
  Tape& t = a.tape();
  t.check_inputs({a});
  const auto& av = a.value().data;
  Tensor out(a.shape(), av);
  for (double& v : out.data) v = std::log(v);
  const std::size_t ia = a.id();
  return t.record(std::move(out), a.requires_grad(), [ia, av](Tape& tp, const auto& g) {
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / av[i];
  });
}

inline Var sqrt(Var a) {
  Tape& t = a.tape();
  t.check_inputs({a});
  Tensor out(a.shape(), a.value().data);
  for (double& v : out.data) v = std::sqrt(v);
  const std::size_t ia = a.id();
  std::vector<double> ov = out.data;
  return t.record(std::move(out), a.requires_grad(), [ia, ov = std::move(ov)](Tape& tp, const auto& g) {
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * 0.5 / ov[i];
  });
}

/// Copy of the value with no gradient connection.
inline Var detach(Var a) { return a.tape().constant(Tensor(a.shape(), a.value().data)); }

inline Var reshape(Var a, Shape shape) {
  require(numel(shape) == a.size(), ErrorKind::shape,
          "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tape& t = a.tape();
  Tensor out(std::move(shape), a.value().data);
  const std::size_t ia = a.id();
  return t.record(std::move(out), a.requires_grad(),
                  [ia](Tape& tp, const auto& g) { detail::add_into(tp.grad_buffer(ia), g); });
}

// ----------------------------------------------------------------- reductions

inline Var sum(Var a) {
  Tape& t = a.tape();
  t.check_inputs({a});
  double s = 0.0;
  for (double v : a.value().data) s += v;
  const std::size_t ia = a.id();
  return t.record(Tensor({1}, std::vector<double>{s}), a.requires_grad(), [ia](Tape& tp, const auto& g) {
    auto& ga = tp.grad_buffer(ia);
    for (double& v : ga) v += g[0];
  });
}

inline Var mean(Var a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.size())); }

/// Sum over one axis; the axis is removed (rank-1 inputs reduce to shape {1}).
inline Var sum_axis(Var a, std::size_t axis) {
  Tape& t = a.tape();
  t.check_inputs({a});
  const auto sp = detail::split_at(a.shape(), axis);
  Shape os;
  for (std::size_t i = 0; i < a.shape().size(); ++i)
    if (i != axis) os.push_back(a.shape()[i]);
  if (os.empty()) os.push_back(1);
  Tensor out(os);
  const auto& av = a.value().data;
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.extent; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) out.data[o * sp.inner + i] += av[(o * sp.extent + k) * sp.inner + i];
  const std::size_t ia = a.id();
  return t.record(std::move(out), a.requires_grad(), [ia, sp](Tape& tp, const auto& g) {
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < sp.extent; ++k)
        for (std::size_t i = 0; i < sp.inner; ++i) ga[(o * sp.extent + k) * sp.inner + i] += g[o * sp.inner + i];
  });
}

inline Var mean_axis(Var a, std::size_t axis) {
  const double n = static_cast<double>(a.shape().at(axis));
  return mul_scalar(sum_axis(a, axis), 1.0 / n);
}

// --------------------------------------------------------------- shape ops

inline Var concat(std::span<const Var> parts, std::size_t axis) {
  require(!parts.empty(), ErrorKind::shape, "concat of zero tensors");
  Tape& t = parts[0].tape();
  const Shape& s0 = parts[0].shape();
  require(axis < s0.size(), ErrorKind::shape, "concat: axis out of range for " + shape_str(s0));
  Shape os = s0;
  os[axis] = 0;
  bool rg = false;
  for (const Var& p : parts) {
    require(&p.tape() == &t, ErrorKind::state, "concat operands live on different tapes");
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i)
      if (i != axis && s[i] != s0[i]) ok = false;
    require(ok, ErrorKind::shape, "concat: shape mismatch " + shape_str(s0) + " vs " + shape_str(s));
    os[axis] += s[axis];
    rg = rg || p.requires_grad();
    t.check_inputs({p});
  }
  Tensor out(os);
  const auto sp = detail::split_at(os, axis);
  std::vector<std::size_t> ids, offsets, extents;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const std::size_t e = p.shape()[axis];
    const auto& pv = p.value().data;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * e * sp.inner), e * sp.inner,
                  out.data.begin() + static_cast<std::ptrdiff_t>((o * sp.extent + off) * sp.inner));
    ids.push_back(p.id());
    offsets.push_back(off);
    extents.push_back(e);
    off += e;
  }
  return t.record(std::move(out), rg, [ids, offsets, extents, sp](Tape& tp, const auto& g) {
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (!tp.requires_grad(ids[p])) continue;
      auto& gp = tp.grad_buffer(ids[p]);
      const std::size_t e = extents[p];
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t j = 0; j < e * sp.inner; ++j) gp[o * e * sp.inner + j] += g[(o * sp.extent + offsets[p]) * sp.inner + j];
    }
  });
}

inline Var concat(std::initializer_list<Var> parts, std::size_t axis) {
  std::vector<Var> v(parts);
  return concat(std::span<const Var>(v), axis);
}

/// Entries [begin, end) along `axis`.
inline Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto sp = detail::split_at(a.shape(), axis);
  require(begin < end && end <= sp.extent, ErrorKind::shape,
          "slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " + shape_str(a.shape()));
  Tape& t = a.tape();
  Shape os = a.shape();
  os[axis] = end - begin;
  Tensor out(os);
  const std::size_t e = end - begin;
  const auto& av = a.value().data;
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>((o * sp.extent + begin) * sp.inner), e * sp.inner,
                out.data.begin() + static_cast<std::ptrdiff_t>(o * e * sp.inner));
  const std::size_t ia = a.id();
  return t.record(std::move(out), a.requires_grad(), [ia, sp, begin, e](Tape& tp, const auto& g) {
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < e * sp.inner; ++j) ga[(o * sp.extent + begin) * sp.inner + j] += g[o * e * sp.inner + j];
  });
}

/// Selects flat entries by index into a rank-1 result.
inline Var gather(Var a, std::vector<std::size_t> index) {
  require(!index.empty(), ErrorKind::shape, "gather: empty index");
  Tape& t = a.tape();
  const auto& av = a.value().data;
  Tensor out({index.size()});
  for (std::size_t i = 0; i < index.size(); ++i) {
    require(index[i] < av.size(), ErrorKind::shape, "gather: index out of range for " + shape_str(a.shape()));
    out.data[i] = av[index[i]];
  }
  const std::size_t ia = a.id();
  return t.record(std::move(out), a.requires_grad(), [ia, index = std::move(index)](Tape& tp, const auto& g) {
    auto& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < index.size(); ++i) ga[index[i]] += g[i];
  });
}

// ------------------------------------------------------------- linear algebra

/// (M,K) x (K,N) -> (M,N)
inline Var matmul(Var a, Var b) {
  Tape& t = detail::common_tape(a, b);
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const std::size_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
  require(b.shape()[0] == K, ErrorKind::shape,
          "matmul: inner dims differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  t.check_inputs({a, b});
  const auto& av = a.value().data;
  const auto& bv = b.value().data;
  Tensor out({M, N});
  kernels::gemm_nn(M, N, K, av.data(), bv.data(), out.data.data());
  const std::size_t ia = a.id(), ib = b.id();
  return t.record(std::move(out), a.requires_grad() || b.requires_grad(),
                  [ia, ib, av, bv, M, N, K](Tape& tp, const auto& g) {
                    if (tp.requires_grad(ia)) {
                      // dA = G * B^T
                      std::vector<double> bt(N * K);
                      kernels::transpose(K, N, bv.data(), bt.data());
                      kernels::gemm_nn(M, K, N, g.data(), bt.data(), tp.grad_buffer(ia).data());
                    }
                    if (tp.requires_grad(ib)) {
                      // dB = A^T * G
                      kernels::gemm_tn(K, N, M, av.data(), g.data(), tp.grad_buffer(ib).data());
                    }
                  });
}

/// x(N,I) W(O,I)^T + b(O) -> (N,O)
inline Var linear(Var x, Var w, Var b) {
  Tape& t = detail::common_tape(x, w);
  detail::common_tape(x, b);
  detail::require_rank("linear", x, 2);
  detail::require_rank("linear", w, 2);
  const std::size_t N = x.shape()[0], I = x.shape()[1], O = w.shape()[0];
  require(w.shape()[1] == I, ErrorKind::shape,
          "linear: input " + shape_str(x.shape()) + " does not match weight " + shape_str(w.shape()));
  require(b.shape() == Shape{O}, ErrorKind::shape,
          "linear: bias " + shape_str(b.shape()) + " does not match weight " + shape_str(w.shape()));
  t.check_inputs({x, w, b});
  const auto& xv = x.value().data;
  const auto& wv = w.value().data;
  const auto& bv = b.value().data;
  std::vector<double> wt(I * O);
  kernels::transpose(O, I, wv.data(), wt.data());
  Tensor out({N, O});
  for (std::size_t n = 0; n < N; ++n) std::copy(bv.begin(), bv.end(), out.data.begin() + static_cast<std::ptrdiff_t>(n * O));
  kernels::gemm_nn(N, O, I, xv.data(), wt.data(), out.data.data());
  const std::size_t ix = x.id(), iw = w.id(), ib = b.id();
  return t.record(std::move(out), x.requires_grad() || w.requires_grad() || b.requires_grad(),
                  [ix, iw, ib, xv, wv, N, I, O](Tape& tp, const auto& g) {
                    if (tp.requires_grad(ix)) kernels::gemm_nn(N, I, O, g.data(), wv.data(), tp.grad_buffer(ix).data());
                    if (tp.requires_grad(iw)) kernels::gemm_tn(O, I, N, g.data(), xv.data(), tp.grad_buffer(iw).data());
                    if (tp.requires_grad(ib)) {
                      auto& gb = tp.grad_buffer(ib);
                      for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t o = 0; o < O; ++o) gb[o] += g[n * O + o];
                    }
                  });
}

/// 3x3 convolution, stride 1, zero padding 1, no bias. x(N,C,H,W), w(O,C,3,3).
inline Var conv2d(Var x, Var w) {
  Tape& t = detail::common_tape(x, w);
  detail::require_rank("conv2d", x, 4);
  detail::require_rank("conv2d", w, 4);
  const std::size_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::size_t O = w.shape()[0];
  require(w.shape()[1] == C && w.shape()[2] == 3 && w.shape()[3] == 3, ErrorKind::shape,
          "conv2d: input " + shape_str(x.shape()) + " does not match 3x3 kernel " + shape_str(w.shape()));
  t.check_inputs({x, w});
  const std::size_t hw = H * W, ck = C * 9;
  const auto& xv = x.value().data;
  const auto& wv = w.value().data;
  Tensor out({N, O, H, W});
  std::vector<double> col(ck * hw);
  for (std::size_t n = 0; n < N; ++n) {
    kernels::im2col3x3(xv.data() + n * C * hw, C, H, W, col.data());
    kernels::gemm_nn(O, hw, ck, wv.data(), col.data(), out.data.data() + n * O * hw);
  }
  const std::size_t ix = x.id(), iw = w.id();
  return t.record(std::move(out), x.requires_grad() || w.requires_grad(),
                  [ix, iw, xv, wv, N, C, H, W, O, hw, ck](Tape& tp, const auto& g) {
                    const bool gx = tp.requires_grad(ix), gw = tp.requires_grad(iw);
                    std::vector<double> col(ck * hw), colt(hw * ck), dcol;
                    if (gx) dcol.resize(ck * hw);
                    for (std::size_t n = 0; n < N; ++n) {
                      const double* gn = g.data() + n * O * hw;
                      if (gw) {
                        kernels::im2col3x3(xv.data() + n * C * hw, C, H, W, col.data());
                        kernels::transpose(ck, hw, col.data(), colt.data());
                        kernels::gemm_nn(O, ck, hw, gn, colt.data(), tp.grad_buffer(iw).data());
                      }
                      if (gx) {
                        std::fill(dcol.begin(), dcol.end(), 0.0);
                        kernels::gemm_tn(ck, hw, O, wv.data(), gn, dcol.data());
                        kernels::col2im3x3(dcol.data(), C, H, W, tp.grad_buffer(ix).data() + n * C * hw);
                      }
                    }
                  });
}

/// (N,C,H,W) -> (N,C)
inline Var global_average_pool(Var x) {
  Tape& t = x.tape();
  detail::require_rank("global_average_pool", x, 4);
  t.check_inputs({x});
  const std::size_t N = x.shape()[0], C = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  const auto& xv = x.value().data;
  Tensor out({N, C});
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += xv[nc * hw + i];
    out.data[nc] = s / static_cast<double>(hw);
  }
  const std::size_t ix = x.id();
  return t.record(std::move(out), x.requires_grad(), [ix, N, C, hw](Tape& tp, const auto& g) {
    auto& gx = tp.grad_buffer(ix);
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t nc = 0; nc < N * C; ++nc)
      for (std::size_t i = 0; i < hw; ++i) gx[nc * hw + i] += g[nc] * inv;
  });
}

/// Euclidean distance matrix between rows of x(N,D). The square root's
/// derivative is taken as 0 where the squared distance is below 1e-24.
inline Var pairwise_distance(Var x) {
  Tape& t = x.tape();
  detail::require_rank("pairwise_distance", x, 2);
  t.check_inputs({x});
  const std::size_t N = x.shape()[0], D = x.shape()[1];
  const auto& xv = x.value().data;
  Tensor out({N, N});
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = i + 1; j < N; ++j) {
      double s = 0.0;
      for (std::size_t d = 0; d < D; ++d) {
        const double diff = xv[i * D + d] - xv[j * D + d];
        s += diff * diff;
      }
      out.data[i * N + j] = out.data[j * N + i] = std::sqrt(s);
    }
  std::vector<double> dist = out.data;
  const std::size_t ix = x.id();
  return t.record(std::move(out), x.requires_grad(), [ix, xv, dist = std::move(dist), N, D](Tape& tp, const auto& g) {
    auto& gx = tp.grad_buffer(ix);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        if (i == j) continue;
        const double gij = g[i * N + j];
        const double d = dist[i * N + j];
        if (gij == 0.0 || d * d < 1e-24) continue;
        const double coef = gij / d;
        for (std::size_t k = 0; k < D; ++k) {
          const double diff = xv[i * D + k] - xv[j * D + k];
          gx[i * D + k] += coef * diff;
          gx[j * D + k] -= coef * diff;
        }
      }
  });
}

/// Multiplies row n of x(N,D) by s(N,1).
inline Var scale_rows(Var x, Var s) {
  Tape& t = detail::common_tape(x, s);
  detail::require_rank("scale_rows", x, 2);
  const std::size_t N = x.shape()[0], D = x.shape()[1];
  require(s.shape() == Shape{N, 1}, ErrorKind::shape,
          "scale_rows: scale " + shape_str(s.shape()) + " does not match rows of " + shape_str(x.shape()));
  t.check_inputs({x, s});
  const auto& xv = x.value().data;
  const auto& sv = s.value().data;
  Tensor out({N, D});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t d = 0; d < D; ++d) out.data[n * D + d] = xv[n * D + d] * sv[n];
  const std::size_t ix = x.id(), is = s.id();
  return t.record(std::move(out), x.requires_grad() || s.requires_grad(), [ix, is, xv, sv, N, D](Tape& tp, const auto& g) {
    if (tp.requires_grad(ix)) {
      auto& gx = tp.grad_buffer(ix);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t d = 0; d < D; ++d) gx[n * D + d] += g[n * D + d] * sv[n];
    }
    if (tp.requires_grad(is)) {
      auto& gs = tp.grad_buffer(is);
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t d = 0; d < D; ++d) gs[n] += g[n * D + d] * xv[n * D + d];
    }
  });
}

// ------------------------------------------------------------------- softmax

/// Row-wise softmax of x(N,M).
inline Var softmax(Var x) {
  Tape& t = x.tape();
  detail::require_rank("softmax", x, 2);
  t.check_inputs({x});
  const std::size_t N = x.shape()[0], M = x.shape()[1];
  const auto& xv = x.value().data;
  Tensor out({N, M});
  for (std::size_t n = 0; n < N; ++n) {
    const double* row = xv.data() + n * M;
    const double mx = *std::max_element(row, row + M);
    double z = 0.0;
    for (std::size_t m = 0; m < M; ++m) z += (out.data[n * M + m] = std::exp(row[m] - mx));
    for (std::size_t m = 0; m < M; ++m) out.data[n * M + m] /= z;
  }
  std::vector<double> p = out.data;
  const std::size_t ix = x.id();
  return t.record(std::move(out), x.requires_grad(), [ix, p = std::move(p), N, M](Tape& tp, const auto& g) {
    auto& gx = tp.grad_buffer(ix);
    for (std::size_t n = 0; n < N; ++n) {
      double dot = 0.0;
      for (std::size_t m = 0; m < M; ++m) dot += g[n * M + m] * p[n * M + m];
      for (std::size_t m = 0; m < M; ++m) gx[n * M + m] += p[n * M + m] * (g[n * M + m] - dot);
    }
  });
}

/// Mean over rows of -log softmax(logits)[label].
inline Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels) {
  Tape& t = logits.tape();
  detail::require_rank("cross_entropy", logits, 2);
  const std::size_t N = logits.shape()[0], M = logits.shape()[1];
  require(labels.size() == N, ErrorKind::shape,
          "cross_entropy: " + std::to_string(labels.size()) + " labels for logits " + shape_str(logits.shape()));
  for (std::size_t y : labels)
    require(y < M, ErrorKind::invalid_argument,
            "cross_entropy: label " + std::to_string(y) + " out of range for " + std::to_string(M) + " classes");
  t.check_inputs({logits});
  const auto& xv = logits.value().data;
  std::vector<double> p(N * M);
  double loss = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const double* row = xv.data() + n * M;
    const double mx = *std::max_element(row, row + M);
    double z = 0.0;
    for (std::size_t m = 0; m < M; ++m) z += (p[n * M + m] = std::exp(row[m] - mx));
    for (std::size_t m = 0; m < M; ++m) p[n * M + m] /= z;
    loss += -(row[labels[n]] - mx - std::log(z));
  }
  loss /= static_cast<double>(N);
  std::vector<std::size_t> y(labels.begin(), labels.end());
  const std::size_t ix = logits.id();
  return t.record(Tensor({1}, std::vector<double>{loss}), logits.requires_grad(),
                  [ix, p = std::move(p), y = std::move(y), N, M](Tape& tp, const auto& g) {
                    auto& gx = tp.grad_buffer(ix);
                    const double s = g[0] / static_cast<double>(N);
                    for (std::size_t n = 0; n < N; ++n)
                      for (std::size_t m = 0; m < M; ++m)
                        gx[n * M + m] += s * (p[n * M + m] - (m == y[n] ? 1.0 : 0.0));
                  });
}

// ------------------------------------------------------------- normalization

/// Per-channel statistics returned by batch_norm_train.
struct ChannelStats {
  std::vector<double> mean, var;
};

/// Training-mode batch normalization with biased batch statistics over
/// (N,H,W). x(N,C,H,W), gamma/beta (C).
inline Var batch_norm_train(Var x, Var gamma, Var beta, double eps, ChannelStats* stats_out = nullptr) {
  Tape& t = detail::common_tape(x, gamma);
  detail::common_tape(x, beta);
  detail::require_rank("batch_norm", x, 4);
  const std::size_t N = x.shape()[0], C = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  require(gamma.shape() == Shape{C} && beta.shape() == Shape{C}, ErrorKind::shape,
          "batch_norm: affine " + shape_str(gamma.shape()) + " does not match input " + shape_str(x.shape()));
  require(N * hw >= 2, ErrorKind::shape, "batch_norm: training needs at least 2 values per channel, got " + shape_str(x.shape()));
  t.check_inputs({x, gamma, beta});
  const auto& xv = x.value().data;
  const auto& gv = gamma.value().data;
  const auto& bv = beta.value().data;
  const double m = static_cast<double>(N * hw);
  std::vector<double> mu(C, 0.0), var(C, 0.0), inv(C);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = xv.data() + (n * C + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) mu[c] += p[i];
    }
  for (double& v : mu) v /= m;
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double* p = xv.data() + (n * C + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) var[c] += (p[i] - mu[c]) * (p[i] - mu[c]);
    }
  for (double& v : var) v /= m;
  for (std::size_t c = 0; c < C; ++c) inv[c] = 1.0 / std::sqrt(var[c] + eps);
  Tensor out(x.shape());
  std::vector<double> xhat(xv.size());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        xhat[base + i] = (xv[base + i] - mu[c]) * inv[c];
        out.data[base + i] = gv[c] * xhat[base + i] + bv[c];
      }
    }
  if (stats_out) *stats_out = ChannelStats{mu, var};
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return t.record(std::move(out), x.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
                  [ix, ig, ib, xhat = std::move(xhat), inv, gv, N, C, hw, m](Tape& tp, const auto& g) {
                    std::vector<double> sg(C, 0.0), sgx(C, 0.0);
                    for (std::size_t n = 0; n < N; ++n)
                      for (std::size_t c = 0; c < C; ++c) {
                        const std::size_t base = (n * C + c) * hw;
                        for (std::size_t i = 0; i < hw; ++i) {
                          sg[c] += g[base + i];
                          sgx[c] += g[base + i] * xhat[base + i];
                        }
                      }
                    if (tp.requires_grad(ig)) {
                      auto& gg = tp.grad_buffer(ig);
                      for (std::size_t c = 0; c < C; ++c) gg[c] += sgx[c];
                    }
                    if (tp.requires_grad(ib)) {
                      auto& gb = tp.grad_buffer(ib);
                      for (std::size_t c = 0; c < C; ++c) gb[c] += sg[c];
                    }
                    if (tp.requires_grad(ix)) {
                      auto& gx = tp.grad_buffer(ix);
                      for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t c = 0; c < C; ++c) {
                          const std::size_t base = (n * C + c) * hw;
                          const double k = gv[c] * inv[c];
                          const double mg = sg[c] / m, mgx = sgx[c] / m;
                          for (std::size_t i = 0; i < hw; ++i) gx[base + i] += k * (g[base + i] - mg - xhat[base + i] * mgx);
                        }
                    }
                  });
}

/// Batch normalization with fixed statistics; gradients reach x, gamma, beta.
inline Var batch_norm_fixed(Var x, Var gamma, Var beta, std::span<const double> mean, std::span<const double> var,
                            double eps) {
  Tape& t = detail::common_tape(x, gamma);
  detail::common_tape(x, beta);
  detail::require_rank("batch_norm", x, 4);
  const std::size_t N = x.shape()[0], C = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  require(gamma.shape() == Shape{C} && beta.shape() == Shape{C} && mean.size() == C && var.size() == C,
          ErrorKind::shape, "batch_norm: parameters do not match input " + shape_str(x.shape()));
  t.check_inputs({x, gamma, beta});
  const auto& xv = x.value().data;
  const auto& gv = gamma.value().data;
  const auto& bv = beta.value().data;
  std::vector<double> mu(mean.begin(), mean.end()), inv(C);
  for (std::size_t c = 0; c < C; ++c) inv[c] = 1.0 / std::sqrt(var[c] + eps);
  Tensor out(x.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) out.data[base + i] = gv[c] * ((xv[base + i] - mu[c]) * inv[c]) + bv[c];
    }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return t.record(std::move(out), x.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
                  [ix, ig, ib, xv, gv, mu = std::move(mu), inv, N, C, hw](Tape& tp, const auto& g) {
                    const bool gx = tp.requires_grad(ix), gg = tp.requires_grad(ig), gb = tp.requires_grad(ib);
                    for (std::size_t n = 0; n < N; ++n)
                      for (std::size_t c = 0; c < C; ++c) {
                        const std::size_t base = (n * C + c) * hw;
                        for (std::size_t i = 0; i < hw; ++i) {
                          const double gi = g[base + i];
                          if (gx) tp.grad_buffer(ix)[base + i] += gi * gv[c] * inv[c];
                          if (gg) tp.grad_buffer(ig)[c] += gi * (xv[base + i] - mu[c]) * inv[c];
                          if (gb) tp.grad_buffer(ib)[c] += gi;
                        }
                      }
                  });
}

/// Instance normalization: biased statistics per (sample, channel) over H*W.
inline Var instance_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = detail::common_tape(x, gamma);
  detail::common_tape(x, beta);
  detail::require_rank("instance_norm", x, 4);
  const std::size_t N = x.shape()[0], C = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  require(gamma.shape() == Shape{C} && beta.shape() == Shape{C}, ErrorKind::shape,
          "instance_norm: affine " + shape_str(gamma.shape()) + " does not match input " + shape_str(x.shape()));
  t.check_inputs({x, gamma, beta});
  const auto& xv = x.value().data;
  const auto& gv = gamma.value().data;
  const auto& bv = beta.value().data;
  const double m = static_cast<double>(hw);
  Tensor out(x.shape());
  std::vector<double> xhat(xv.size()), inv(N * C);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * hw;
      double mu = 0.0, var = 0.0;
      for (std::size_t i = 0; i < hw; ++i) mu += xv[base + i];
      mu /= m;
      for (std::size_t i = 0; i < hw; ++i) var += (xv[base + i] - mu) * (xv[base + i] - mu);
      var /= m;
      const double k = 1.0 / std::sqrt(var + eps);
      inv[n * C + c] = k;
      for (std::size_t i = 0; i < hw; ++i) {
        xhat[base + i] = (xv[base + i] - mu) * k;
        out.data[base + i] = gv[c] * xhat[base + i] + bv[c];
      }
    }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return t.record(std::move(out), x.requires_grad() || gamma.requires_grad() || beta.requires_grad(),
                  [ix, ig, ib, xhat = std::move(xhat), inv = std::move(inv), gv, N, C, hw, m](Tape& tp, const auto& g) {
                    const bool gx = tp.requires_grad(ix), gg = tp.requires_grad(ig), gb = tp.requires_grad(ib);
                    for (std::size_t n = 0; n < N; ++n)
                      for (std::size_t c = 0; c < C; ++c) {
                        const std::size_t base = (n * C + c) * hw;
                        double sg = 0.0, sgx = 0.0;
                        for (std::size_t i = 0; i < hw; ++i) {
                          sg += g[base + i];
                          sgx += g[base + i] * xhat[base + i];
                        }
                        if (gg) tp.grad_buffer(ig)[c] += sgx;
                        if (gb) tp.grad_buffer(ib)[c] += sg;
                        if (gx) {
                          auto& gxb = tp.grad_buffer(ix);
                          const double k = gv[c] * inv[n * C + c];
                          for (std::size_t i = 0; i < hw; ++i)
                            gxb[base + i] += k * (g[base + i] - sg / m - xhat[base + i] * sgx / m);
                        }
                      }
                  });
}

}  // namespace meta
