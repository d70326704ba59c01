#include "flowseg/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "flowseg/linalg.hpp"

namespace flowseg {

namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

constexpr Real kHalfLog2Pi = Real(0.91893853320467274178032973640562);

Tape& tape_of(const char* op, const Var& a) {
  if (!a.valid()) throw Error(std::string(op) + ": invalid (unbound) Var");
  return *a.tape();
}

Tape& tape_of(const char* op, const Var& a, const Var& b) {
  Tape& t = tape_of(op, a);
  if (b.tape() != &t) throw Error(std::string(op) + ": operands live on different tapes");
  return t;
}

std::int64_t inner_size(const Shape& s, std::size_t from) {
  std::int64_t n = 1;
  for (std::size_t i = from; i < s.size(); ++i) n *= s[i];
  return n;
}

template <class F, class D>
Var unary(const char* op, const Var& a, F f, D df) {
  Tape& t = tape_of(op, a);
  const NdArr& x = a.value();
  NdArr y(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const auto ia = a.id();
  return t.push(std::move(y), {ia}, [ia, df](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(ia)) return;
    const NdArr& g = tp.grad(self);
    const NdArr& xv = tp.value(ia);
    const NdArr& yv = tp.value(self);
    NdArr& ga = tp.grad_buffer(ia);
    for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(xv[i], yv[i]);
  });
}

void im2col(const Real* x, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh, std::int64_t kw,
            std::int64_t s, std::int64_t p, std::int64_t Ho, std::int64_t Wo, Real* col, std::int64_t ld,
            std::int64_t offset) {
  // col row r = (c, i, j), column offset + (oh * Wo + ow); leading dimension ld.
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t i = 0; i < kh; ++i)
      for (std::int64_t j = 0; j < kw; ++j) {
        Real* row = col + ((c * kh + i) * kw + j) * ld + offset;
        for (std::int64_t oh = 0; oh < Ho; ++oh) {
          const std::int64_t h = oh * s - p + i;
          Real* dst = row + oh * Wo;
          if (h < 0 || h >= H) {
            std::fill(dst, dst + Wo, Real(0));
            continue;
          }
          const Real* src = x + (c * H + h) * W;
          for (std::int64_t ow = 0; ow < Wo; ++ow) {
            const std::int64_t w = ow * s - p + j;
            dst[ow] = (w >= 0 && w < W) ? src[w] : Real(0);
          }
        }
      }
}

void col2im(const Real* col, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh, std::int64_t kw,
            std::int64_t s, std::int64_t p, std::int64_t Ho, std::int64_t Wo, Real* x, std::int64_t ld,
            std::int64_t offset) {
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t i = 0; i < kh; ++i)
      for (std::int64_t j = 0; j < kw; ++j) {
        const Real* row = col + ((c * kh + i) * kw + j) * ld + offset;
        for (std::int64_t oh = 0; oh < Ho; ++oh) {
          const std::int64_t h = oh * s - p + i;
          if (h < 0 || h >= H) continue;
          const Real* src = row + oh * Wo;
          Real* dst = x + (c * H + h) * W;
          for (std::int64_t ow = 0; ow < Wo; ++ow) {
            const std::int64_t w = ow * s - p + j;
            if (w >= 0 && w < W) dst[w] += src[ow];
          }
        }
      }
}

/// [N, C, P] -> [C, N*P]
RowMat batch_to_channel_major(const NdArr& a) {
  const auto N = a.dim(0), C = a.dim(1), P = inner_size(a.shape(), 2);
  RowMat m(C, N * P);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c)
      std::copy_n(a.data() + (n * C + c) * P, P, m.data() + c * N * P + n * P);
  return m;
}

/// [C, N*P] -> accumulate into [N, C, P]
void channel_major_add_to(const RowMat& m, NdArr& a) {
  const auto N = a.dim(0), C = a.dim(1), P = inner_size(a.shape(), 2);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const Real* src = m.data() + c * N * P + n * P;
      Real* dst = a.data() + (n * C + c) * P;
      for (std::int64_t q = 0; q < P; ++q) dst[q] += src[q];
    }
}

void require_rank(const char* op, const NdArr& a, std::size_t r) {
  if (a.rank() != r) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(a.shape()));
  }
}

}  // namespace

void zero_grads(const ParameterList& params) {
  for (auto* p : params) p->zero_grad();
}

// ---- Var / Tape -------------------------------------------------------------

const NdArr& Var::value() const {
  if (!tape_) throw Error("Var::value on an unbound Var");
  return tape_->value(id_);
}

NdArr Var::grad() const {
  if (!tape_) throw Error("Var::grad on an unbound Var");
  const NdArr& g = tape_->grad(id_);
  return g.shape() == value().shape() ? g : NdArr(value().shape());
}

Var Tape::constant(NdArr value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(NdArr value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, record_});
  return Var(this, nodes_.size() - 1);
}

Var Tape::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  nodes_.push_back(Node{p.value, {}, {}, &p, record_});
  param_nodes_.emplace(&p, nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Tape::push(NdArr value, std::vector<std::size_t> inputs, BackwardFn fn) {
  bool needs = false;
  if (record_) {
    for (auto i : inputs) needs = needs || nodes_[i].needs_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(fn) : BackwardFn{}, nullptr, needs});
  return Var(this, nodes_.size() - 1);
}

NdArr& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.shape() != n.value.shape()) n.grad = NdArr(n.value.shape());
  return n.grad;
}

void Tape::backward(const Var& loss) {
  if (!record_) throw Error("backward: tape was created without recording");
  if (backward_done_) throw Error("backward: already run on this tape; call reset() first");
  if (loss.tape() != this) throw Error("backward: loss belongs to another tape");
  if (value(loss.id()).size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(value(loss.id()).shape()));
  }
  backward_done_ = true;
  grad_buffer(loss.id())[0] = 1;
  for (std::size_t k = loss.id() + 1; k-- > 0;) {
    Node& n = nodes_[k];
    if (!n.needs_grad || n.grad.shape() != n.value.shape() || !n.backward) continue;
    n.backward(*this, k);
  }
  for (auto& [p, id] : param_nodes_) {
    const Node& n = nodes_[id];
    if (n.grad.shape() != n.value.shape()) continue;
    if (p->grad.shape() != p->value.shape()) p->grad = NdArr(p->value.shape());
    p->grad += n.grad;
  }
}

void Tape::reset() {
  nodes_.clear();
  param_nodes_.clear();
  backward_done_ = false;
}

// ---- elementwise ------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  Tape& t = tape_of("add", a, b);
  require_same_shape("add", a.shape(), b.shape());
  NdArr y = a.value() + b.value();
  const auto ia = a.id(), ib = b.id();
  return t.push(std::move(y), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const NdArr& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.grad_buffer(ia) += g;
    if (tp.needs_grad(ib)) tp.grad_buffer(ib) += g;
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = tape_of("sub", a, b);
  require_same_shape("sub", a.shape(), b.shape());
  NdArr y = a.value() - b.value();
  const auto ia = a.id(), ib = b.id();
  return t.push(std::move(y), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const NdArr& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.grad_buffer(ia) += g;
    if (tp.needs_grad(ib)) tp.grad_buffer(ib) -= g;
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = tape_of("mul", a, b);
  require_same_shape("mul", a.shape(), b.shape());
  NdArr y(a.shape());
  for (std::int64_t i = 0; i < y.size(); ++i) y[i] = a.value()[i] * b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return t.push(std::move(y), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const NdArr& g = tp.grad(self);
    if (tp.needs_grad(ia)) {
      NdArr& ga = tp.grad_buffer(ia);
      const NdArr& bv = tp.value(ib);
      for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.needs_grad(ib)) {
      NdArr& gb = tp.grad_buffer(ib);
      const NdArr& av = tp.value(ia);
      for (std::int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(const Var& a, Real c) {
  return unary("scale", a, [c](Real x) { return c * x; }, [c](Real, Real) { return c; });
}

Var add_scalar(const Var& a, Real c) {
  return unary("add_scalar", a, [c](Real x) { return x + c; }, [](Real, Real) { return Real(1); });
}

Var exp(const Var& a) {
  return unary("exp", a, [](Real x) { return std::exp(x); }, [](Real, Real y) { return y; });
}

Var log(const Var& a) {
  return unary("log", a, [](Real x) { return std::log(x); }, [](Real x, Real) { return Real(1) / x; });
}

Var sigmoid(const Var& a) {
  return unary(
      "sigmoid", a,
      [](Real x) {
        if (x >= 0) return Real(1) / (Real(1) + std::exp(-x));
        const Real e = std::exp(x);
        return e / (Real(1) + e);
      },
      [](Real, Real y) { return y * (Real(1) - y); });
}

Var relu(const Var& a) {
  return unary("relu", a, [](Real x) { return x > 0 ? x : Real(0); },
               [](Real x, Real) { return x > 0 ? Real(1) : Real(0); });
}

Var tanh(const Var& a) {
  return unary("tanh", a, [](Real x) { return std::tanh(x); }, [](Real, Real y) { return Real(1) - y * y; });
}

Var square(const Var& a) {
  return unary("square", a, [](Real x) { return x * x; }, [](Real x, Real) { return Real(2) * x; });
}

// ---- reductions -------------------------------------------------------------

Var sum(const Var& a) {
  Tape& t = tape_of("sum", a);
  const auto ia = a.id();
  return t.push(NdArr::scalar(flowseg::sum(a.value())), {ia}, [ia](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(ia)) return;
    const Real g = tp.grad(self)[0];
    for (auto& v : tp.grad_buffer(ia).vec()) v += g;
  });
}

Var mean(const Var& a) {
  const auto n = a.value().size();
  if (n == 0) throw ShapeError("mean: empty input");
  return scale(sum(a), Real(1) / static_cast<Real>(n));
}

Var sum_per_sample(const Var& a) {
  Tape& t = tape_of("sum_per_sample", a);
  if (a.value().rank() < 1) throw ShapeError("sum_per_sample: rank-0 input");
  const auto N = a.dim(0);
  const auto P = inner_size(a.shape(), 1);
  NdArr y(Shape{N});
  for (std::int64_t n = 0; n < N; ++n) {
    Real s = 0;
    for (std::int64_t q = 0; q < P; ++q) s += a.value()[n * P + q];
    y[n] = s;
  }
  const auto ia = a.id();
  return t.push(std::move(y), {ia}, [ia, N, P](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(ia)) return;
    const NdArr& g = tp.grad(self);
    NdArr& ga = tp.grad_buffer(ia);
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t q = 0; q < P; ++q) ga[n * P + q] += g[n];
  });
}

Var expand(const Var& scalar, const Shape& shape) {
  Tape& t = tape_of("expand", scalar);
  if (scalar.value().size() != 1) {
    throw ShapeError("expand: expected a one-element input, got " + shape_str(scalar.shape()));
  }
  const auto ia = scalar.id();
  return t.push(NdArr(shape, scalar.value()[0]), {ia}, [ia](Tape& tp, std::size_t self) {
    if (tp.needs_grad(ia)) tp.grad_buffer(ia)[0] += flowseg::sum(tp.grad(self));
  });
}

// ---- shape manipulation -----------------------------------------------------

Var reshape(const Var& a, const Shape& shape) {
  Tape& t = tape_of("reshape", a);
  NdArr y = a.value().reshaped(shape);
  const auto ia = a.id();
  return t.push(std::move(y), {ia}, [ia](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(ia)) return;
    NdArr& ga = tp.grad_buffer(ia);
    const NdArr& g = tp.grad(self);
    for (std::int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var slice_channels(const Var& a, std::int64_t c0, std::int64_t c1) {
  Tape& t = tape_of("slice_channels", a);
  const Shape& s = a.shape();
  if (s.size() < 2 || c0 < 0 || c1 > s[1] || c0 >= c1) {
    throw ShapeError("slice_channels: invalid range [" + std::to_string(c0) + "," + std::to_string(c1) +
                     ") for shape " + shape_str(s));
  }
  const auto N = s[0], C = s[1], P = inner_size(s, 2), K = c1 - c0;
  Shape os = s;
  os[1] = K;
  NdArr y(os);
  for (std::int64_t n = 0; n < N; ++n)
    std::copy_n(a.value().data() + (n * C + c0) * P, K * P, y.data() + n * K * P);
  const auto ia = a.id();
  return t.push(std::move(y), {ia}, [ia, N, C, P, K, c0](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(ia)) return;
    const NdArr& g = tp.grad(self);
    NdArr& ga = tp.grad_buffer(ia);
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t q = 0; q < K * P; ++q) ga[(n * C + c0) * P + q] += g[n * K * P + q];
  });
}

Var concat_channels(const Var& a, const Var& b) {
  Tape& t = tape_of("concat_channels", a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool ok = sa.size() >= 2 && sa.size() == sb.size() && sa[0] == sb[0];
  for (std::size_t i = 2; ok && i < sa.size(); ++i) ok = sa[i] == sb[i];
  if (!ok) throw ShapeError("concat_channels: incompatible " + shape_str(sa) + " and " + shape_str(sb));
  const auto N = sa[0], Ca = sa[1], Cb = sb[1], P = inner_size(sa, 2);
  Shape os = sa;
  os[1] = Ca + Cb;
  NdArr y(os);
  for (std::int64_t n = 0; n < N; ++n) {
    std::copy_n(a.value().data() + n * Ca * P, Ca * P, y.data() + n * (Ca + Cb) * P);
    std::copy_n(b.value().data() + n * Cb * P, Cb * P, y.data() + (n * (Ca + Cb) + Ca) * P);
  }
  const auto ia = a.id(), ib = b.id();
  return t.push(std::move(y), {ia, ib}, [ia, ib, N, Ca, Cb, P](Tape& tp, std::size_t self) {
    const NdArr& g = tp.grad(self);
    if (tp.needs_grad(ia)) {
      NdArr& ga = tp.grad_buffer(ia);
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t q = 0; q < Ca * P; ++q) ga[n * Ca * P + q] += g[n * (Ca + Cb) * P + q];
    }
    if (tp.needs_grad(ib)) {
      NdArr& gb = tp.grad_buffer(ib);
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t q = 0; q < Cb * P; ++q) gb[n * Cb * P + q] += g[(n * (Ca + Cb) + Ca) * P + q];
    }
  });
}

Var gather(const Var& a, std::vector<std::int64_t> index, const Shape& shape) {
  Tape& t = tape_of("gather", a);
  if (numel(shape) != static_cast<std::int64_t>(index.size())) {
    throw ShapeError("gather: " + std::to_string(index.size()) + " indices for shape " + shape_str(shape));
  }
  NdArr y(shape);
  const NdArr& x = a.value();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= x.size()) throw ShapeError("gather: index out of range");
    y[static_cast<std::int64_t>(i)] = x[index[i]];
  }
  const auto ia = a.id();
  return t.push(std::move(y), {ia}, [ia, index = std::move(index)](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(ia)) return;
    const NdArr& g = tp.grad(self);
    NdArr& ga = tp.grad_buffer(ia);
    for (std::size_t i = 0; i < index.size(); ++i) ga[index[i]] += g[static_cast<std::int64_t>(i)];
  });
}

// ---- neural building blocks ---------------------------------------------------

Var channel_affine(const Var& x, const Var& s, const Var& b) {
  Tape& t = tape_of("channel_affine", x, s);
  tape_of("channel_affine", x, b);
  const Shape& xs = x.shape();
  if (xs.size() < 2 || s.shape() != Shape{xs[1]} || b.shape() != Shape{xs[1]}) {
    throw ShapeError("channel_affine: x " + shape_str(xs) + " scale " + shape_str(s.shape()) + " bias " +
                     shape_str(b.shape()));
  }
  const auto N = xs[0], C = xs[1], P = inner_size(xs, 2);
  NdArr y(xs);
  const NdArr& xv = x.value();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const Real sc = s.value()[c], bc = b.value()[c];
      const auto off = (n * C + c) * P;
      for (std::int64_t q = 0; q < P; ++q) y[off + q] = xv[off + q] * sc + bc;
    }
  const auto ix = x.id(), is = s.id(), ib = b.id();
  return t.push(std::move(y), {ix, is, ib}, [ix, is, ib, N, C, P](Tape& tp, std::size_t self) {
    const NdArr& g = tp.grad(self);
    const NdArr& xv = tp.value(ix);
    const NdArr& sv = tp.value(is);
    const bool gx = tp.needs_grad(ix), gs = tp.needs_grad(is), gb = tp.needs_grad(ib);
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        const auto off = (n * C + c) * P;
        Real ds = 0, db = 0;
        for (std::int64_t q = 0; q < P; ++q) {
          ds += g[off + q] * xv[off + q];
          db += g[off + q];
        }
        if (gx) {
          NdArr& gxa = tp.grad_buffer(ix);
          for (std::int64_t q = 0; q < P; ++q) gxa[off + q] += g[off + q] * sv[c];
        }
        if (gs) tp.grad_buffer(is)[c] += ds;
        if (gb) tp.grad_buffer(ib)[c] += db;
      }
  });
}

Shape conv2d_output_shape(const Shape& x, const Shape& w, Conv2dGeometry g) {
  if (x.size() != 4 || w.size() != 4 || x[1] != w[1] || g.stride < 1 || g.pad < 0) {
    throw ShapeError("conv2d: incompatible input " + shape_str(x) + " and kernel " + shape_str(w));
  }
  const auto Ho = (x[2] + 2 * g.pad - w[2]) / g.stride + 1;
  const auto Wo = (x[3] + 2 * g.pad - w[3]) / g.stride + 1;
  if (x[2] + 2 * g.pad < w[2] || x[3] + 2 * g.pad < w[3]) {
    throw ShapeError("conv2d: kernel " + shape_str(w) + " larger than padded input " + shape_str(x));
  }
  return {x[0], w[0], Ho, Wo};
}

Shape conv_transpose2d_output_shape(const Shape& x, const Shape& w, Conv2dGeometry g) {
  if (x.size() != 4 || w.size() != 4 || x[1] != w[0] || g.stride < 1 || g.pad < 0 || g.output_pad < 0 ||
      g.output_pad >= g.stride) {
    throw ShapeError("conv_transpose2d: incompatible input " + shape_str(x) + " and kernel " + shape_str(w));
  }
  const auto Ho = (x[2] - 1) * g.stride - 2 * g.pad + w[2] + g.output_pad;
  const auto Wo = (x[3] - 1) * g.stride - 2 * g.pad + w[3] + g.output_pad;
  if (Ho <= 0 || Wo <= 0) throw ShapeError("conv_transpose2d: empty output for input " + shape_str(x));
  return {x[0], w[1], Ho, Wo};
}

Var conv2d(const Var& x, const Var& w, const Var& b, Conv2dGeometry geo) {
  Tape& t = tape_of("conv2d", x, w);
  if (b.valid()) tape_of("conv2d", x, b);
  const Shape os = conv2d_output_shape(x.shape(), w.shape(), geo);
  if (b.valid() && b.shape() != Shape{w.dim(0)}) {
    throw ShapeError("conv2d: bias " + shape_str(b.shape()) + " for kernel " + shape_str(w.shape()));
  }
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const auto Ho = os[2], Wo = os[3], P = Ho * Wo, CK = C * kh * kw;

  auto build_col = [=](const NdArr& xv) {
    RowMat col(CK, N * P);
    for (std::int64_t n = 0; n < N; ++n)
      im2col(xv.data() + n * C * H * W, C, H, W, kh, kw, geo.stride, geo.pad, Ho, Wo, col.data(), N * P, n * P);
    return col;
  };

  const RowMat col = build_col(x.value());
  const RowMat out = CMatMap(w.value().data(), O, CK) * col;
  NdArr y(os);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t o = 0; o < O; ++o) {
      const Real bias = b.valid() ? b.value()[o] : Real(0);
      const Real* src = out.data() + o * N * P + n * P;
      Real* dst = y.data() + (n * O + o) * P;
      for (std::int64_t q = 0; q < P; ++q) dst[q] = src[q] + bias;
    }

  const auto ix = x.id(), iw = w.id();
  const bool has_b = b.valid();
  const auto ib = has_b ? b.id() : 0;
  std::vector<std::size_t> inputs{ix, iw};
  if (has_b) inputs.push_back(ib);
  return t.push(std::move(y), std::move(inputs),
                [=](Tape& tp, std::size_t self) {
                  const NdArr& g = tp.grad(self);
                  const RowMat G = batch_to_channel_major(g);  // O x N*P
                  if (has_b && tp.needs_grad(ib)) {
                    NdArr& gb = tp.grad_buffer(ib);
                    for (std::int64_t o = 0; o < O; ++o) gb[o] += G.row(o).sum();
                  }
                  if (tp.needs_grad(iw)) {
                    const RowMat colv = build_col(tp.value(ix));
                    MatMap(tp.grad_buffer(iw).data(), O, CK).noalias() += G * colv.transpose();
                  }
                  if (tp.needs_grad(ix)) {
                    const RowMat dcol = CMatMap(tp.value(iw).data(), O, CK).transpose() * G;
                    NdArr& gx = tp.grad_buffer(ix);
                    for (std::int64_t n = 0; n < N; ++n)
                      col2im(dcol.data(), C, H, W, kh, kw, geo.stride, geo.pad, Ho, Wo, gx.data() + n * C * H * W,
                             N * P, n * P);
                  }
                });
}

Var conv_transpose2d(const Var& x, const Var& w, const Var& b, Conv2dGeometry geo) {
  Tape& t = tape_of("conv_transpose2d", x, w);
  if (b.valid()) tape_of("conv_transpose2d", x, b);
  const Shape os = conv_transpose2d_output_shape(x.shape(), w.shape(), geo);
  if (b.valid() && b.shape() != Shape{w.dim(1)}) {
    throw ShapeError("conv_transpose2d: bias " + shape_str(b.shape()) + " for kernel " + shape_str(w.shape()));
  }
  const auto N = x.dim(0), Ci = x.dim(1), Hi = x.dim(2), Wi = x.dim(3);
  const auto Co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const auto Ho = os[2], Wo = os[3], Pi = Hi * Wi, Po = Ho * Wo, CK = Co * kh * kw;

  const RowMat X = batch_to_channel_major(x.value());  // Ci x N*Pi
  const RowMat col = CMatMap(w.value().data(), Ci, CK).transpose() * X;
  NdArr y(os);
  for (std::int64_t n = 0; n < N; ++n)
    col2im(col.data(), Co, Ho, Wo, kh, kw, geo.stride, geo.pad, Hi, Wi, y.data() + n * Co * Po, N * Pi, n * Pi);
  if (b.valid()) {
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < Co; ++c) {
        Real* dst = y.data() + (n * Co + c) * Po;
        for (std::int64_t q = 0; q < Po; ++q) dst[q] += b.value()[c];
      }
  }

  const auto ix = x.id(), iw = w.id();
  const bool has_b = b.valid();
  const auto ib = has_b ? b.id() : 0;
  std::vector<std::size_t> inputs{ix, iw};
  if (has_b) inputs.push_back(ib);
  return t.push(std::move(y), std::move(inputs), [=](Tape& tp, std::size_t self) {
    const NdArr& g = tp.grad(self);
    if (has_b && tp.needs_grad(ib)) {
      NdArr& gb = tp.grad_buffer(ib);
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < Co; ++c) {
          const Real* src = g.data() + (n * Co + c) * Po;
          Real s = 0;
          for (std::int64_t q = 0; q < Po; ++q) s += src[q];
          gb[c] += s;
        }
    }
    const bool gx = tp.needs_grad(ix), gw = tp.needs_grad(iw);
    if (!gx && !gw) return;
    RowMat gcol(CK, N * Pi);
    for (std::int64_t n = 0; n < N; ++n)
      im2col(g.data() + n * Co * Po, Co, Ho, Wo, kh, kw, geo.stride, geo.pad, Hi, Wi, gcol.data(), N * Pi, n * Pi);
    if (gw) {
      const RowMat Xv = batch_to_channel_major(tp.value(ix));
      MatMap(tp.grad_buffer(iw).data(), Ci, CK).noalias() += Xv * gcol.transpose();
    }
    if (gx) {
      const RowMat dX = CMatMap(tp.value(iw).data(), Ci, CK) * gcol;
      channel_major_add_to(dX, tp.grad_buffer(ix));
    }
  });
}

Var maxpool2d(const Var& x, std::int64_t k) {
  Tape& t = tape_of("maxpool2d", x);
  require_rank("maxpool2d", x.value(), 4);
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (k < 1 || H % k != 0 || W % k != 0) {
    throw ShapeError("maxpool2d: spatial dims of " + shape_str(x.shape()) + " not divisible by " + std::to_string(k));
  }
  const auto Ho = H / k, Wo = W / k;
  NdArr y(Shape{N, C, Ho, Wo});
  std::vector<std::int64_t> arg(static_cast<std::size_t>(y.size()));
  const NdArr& xv = x.value();
  for (std::int64_t nc = 0; nc < N * C; ++nc)
    for (std::int64_t oh = 0; oh < Ho; ++oh)
      for (std::int64_t ow = 0; ow < Wo; ++ow) {
        std::int64_t best = (nc * H + oh * k) * W + ow * k;
        for (std::int64_t i = 0; i < k; ++i)
          for (std::int64_t j = 0; j < k; ++j) {
            const auto idx = (nc * H + oh * k + i) * W + ow * k + j;
            if (xv[idx] > xv[best]) best = idx;
          }
        const auto o = (nc * Ho + oh) * Wo + ow;
        y[o] = xv[best];
        arg[static_cast<std::size_t>(o)] = best;
      }
  const auto ix = x.id();
  return t.push(std::move(y), {ix}, [ix, arg = std::move(arg)](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(ix)) return;
    const NdArr& g = tp.grad(self);
    NdArr& gx = tp.grad_buffer(ix);
    for (std::size_t o = 0; o < arg.size(); ++o) gx[arg[o]] += g[static_cast<std::int64_t>(o)];
  });
}

Var dense(const Var& x, const Var& w, const Var& b) {
  Tape& t = tape_of("dense", x, w);
  if (b.valid()) tape_of("dense", x, b);
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 2 || ws.size() != 2 || xs[1] != ws[1] || (b.valid() && b.shape() != Shape{ws[0]})) {
    throw ShapeError("dense: input " + shape_str(xs) + " weight " + shape_str(ws) +
                     (b.valid() ? " bias " + shape_str(b.shape()) : std::string()));
  }
  const auto N = xs[0], I = xs[1], O = ws[0];
  NdArr y(Shape{N, O});
  MatMap Y(y.data(), N, O);
  Y.noalias() = CMatMap(x.value().data(), N, I) * CMatMap(w.value().data(), O, I).transpose();
  if (b.valid()) {
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t o = 0; o < O; ++o) Y(n, o) += b.value()[o];
  }
  const auto ix = x.id(), iw = w.id();
  const bool has_b = b.valid();
  const auto ib = has_b ? b.id() : 0;
  std::vector<std::size_t> inputs{ix, iw};
  if (has_b) inputs.push_back(ib);
  return t.push(std::move(y), std::move(inputs), [=](Tape& tp, std::size_t self) {
    const CMatMap G(tp.grad(self).data(), N, O);
    if (tp.needs_grad(ix)) MatMap(tp.grad_buffer(ix).data(), N, I).noalias() += G * CMatMap(tp.value(iw).data(), O, I);
    if (tp.needs_grad(iw))
      MatMap(tp.grad_buffer(iw).data(), O, I).noalias() += G.transpose() * CMatMap(tp.value(ix).data(), N, I);
    if (has_b && tp.needs_grad(ib)) {
      NdArr& gb = tp.grad_buffer(ib);
      for (std::int64_t o = 0; o < O; ++o) gb[o] += G.col(o).sum();
    }
  });
}

Var logabsdet(const Var& w) {
  Tape& t = tape_of("logabsdet", w);
  const Real v = linalg::log_abs_det(w.value());
  if (!std::isfinite(v)) throw Error("logabsdet: matrix is singular");
  const auto iw = w.id();
  return t.push(NdArr::scalar(v), {iw}, [iw](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(iw)) return;
    const Real g = tp.grad(self)[0];
    const NdArr inv_t = linalg::transpose(linalg::inverse(tp.value(iw), Real(0)));
    NdArr& gw = tp.grad_buffer(iw);
    for (std::int64_t i = 0; i < gw.size(); ++i) gw[i] += g * inv_t[i];
  });
}

Var bce_with_logits(const Var& logits, const NdArr& targets) {
  Tape& t = tape_of("bce_with_logits", logits);
  require_same_shape("bce_with_logits", logits.shape(), targets.shape());
  const NdArr& l = logits.value();
  NdArr y(l.shape());
  for (std::int64_t i = 0; i < l.size(); ++i) {
    const Real x = l[i];
    y[i] = std::max(x, Real(0)) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
  }
  const auto il = logits.id();
  return t.push(std::move(y), {il}, [il, targets](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(il)) return;
    const NdArr& g = tp.grad(self);
    const NdArr& lv = tp.value(il);
    NdArr& gl = tp.grad_buffer(il);
    for (std::int64_t i = 0; i < g.size(); ++i) {
      const Real x = lv[i];
      const Real s = x >= 0 ? Real(1) / (Real(1) + std::exp(-x)) : std::exp(x) / (Real(1) + std::exp(x));
      gl[i] += g[i] * (s - targets[i]);
    }
  });
}

Var normal_logprob(const Var& z, const Var& mu, const Var& log_sigma) {
  Tape& t = tape_of("normal_logprob", z, mu);
  tape_of("normal_logprob", z, log_sigma);
  require_same_shape("normal_logprob", z.shape(), mu.shape());
  require_same_shape("normal_logprob", z.shape(), log_sigma.shape());
  const auto N = z.dim(0);
  const auto P = inner_size(z.shape(), 1);
  NdArr y(Shape{N});
  const NdArr &zv = z.value(), &mv = mu.value(), &lv = log_sigma.value();
  for (std::int64_t n = 0; n < N; ++n) {
    Real s = 0;
    for (std::int64_t q = 0; q < P; ++q) {
      const auto i = n * P + q;
      const Real d = (zv[i] - mv[i]) * std::exp(-lv[i]);
      s += -kHalfLog2Pi - lv[i] - Real(0.5) * d * d;
    }
    y[n] = s;
  }
  const auto iz = z.id(), im = mu.id(), il = log_sigma.id();
  return t.push(std::move(y), {iz, im, il}, [iz, im, il, N, P](Tape& tp, std::size_t self) {
    const NdArr& g = tp.grad(self);
    const NdArr &zv = tp.value(iz), &mv = tp.value(im), &lv = tp.value(il);
    const bool gz = tp.needs_grad(iz), gm = tp.needs_grad(im), gl = tp.needs_grad(il);
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t q = 0; q < P; ++q) {
        const auto i = n * P + q;
        const Real inv_var = std::exp(Real(-2) * lv[i]);
        const Real d = zv[i] - mv[i];
        if (gz) tp.grad_buffer(iz)[i] += -g[n] * d * inv_var;
        if (gm) tp.grad_buffer(im)[i] += g[n] * d * inv_var;
        if (gl) tp.grad_buffer(il)[i] += g[n] * (d * d * inv_var - Real(1));
      }
  });
}

Var std_normal_logprob(const Var& z) {
  Tape& t = tape_of("std_normal_logprob", z);
  const auto N = z.dim(0);
  const auto P = inner_size(z.shape(), 1);
  NdArr y(Shape{N});
  for (std::int64_t n = 0; n < N; ++n) {
    Real s = 0;
    for (std::int64_t q = 0; q < P; ++q) {
      const Real v = z.value()[n * P + q];
      s += -kHalfLog2Pi - Real(0.5) * v * v;
    }
    y[n] = s;
  }
  const auto iz = z.id();
  return t.push(std::move(y), {iz}, [iz, N, P](Tape& tp, std::size_t self) {
    if (!tp.needs_grad(iz)) return;
    const NdArr& g = tp.grad(self);
    const NdArr& zv = tp.value(iz);
    NdArr& gz = tp.grad_buffer(iz);
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t q = 0; q < P; ++q) gz[n * P + q] -= g[n] * zv[n * P + q];
  });
}

}  // namespace flowseg
