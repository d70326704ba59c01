#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "flowseg/ndarray.hpp"

namespace flowseg {

/// Trainable tensor owned by a model. `grad` holds the accumulated gradient
/// of the last backward pass that touched it.
struct Parameter {
  std::string name;
  NdArr value;
  NdArr grad;

  Parameter() = default;
  Parameter(std::string n, NdArr v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad = NdArr(value.shape()); }
};

using ParameterList = std::vector<Parameter*>;

void zero_grads(const ParameterList& params);

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the
/// tape is alive and has not been reset.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }

  const NdArr& value() const;
  const Shape& shape() const { return value().shape(); }
  std::int64_t dim(std::size_t i) const { return shape().at(i); }
  /// Gradient after backward(); zeros if the value did not influence the loss.
  NdArr grad() const;

 private:
  friend class Tape;
  Var(Tape* t, std::size_t id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode differentiation tape. Nodes are appended in evaluation order,
/// so reverse iteration is a valid topological order. A tape belongs to one
/// thread. With `record == false` no backward closures are kept (inference).
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(NdArr value);
  /// Leaf whose gradient is kept on the tape (read with Var::grad()).
  Var variable(NdArr value);
  /// Leaf bound to a model parameter; backward() accumulates into p.grad.
  /// Repeated calls with the same parameter return the same node.
  Var param(Parameter& p);

  void backward(const Var& loss);
  void reset();

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  // Op-implementation interface.
  Var push(NdArr value, std::vector<std::size_t> inputs, BackwardFn fn);
  const NdArr& value(std::size_t id) const { return nodes_[id].value; }
  const NdArr& grad(std::size_t id) const { return nodes_[id].grad; }
  NdArr& grad_buffer(std::size_t id);
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty() || nodes_[id].value.empty(); }

 private:
  struct Node {
    NdArr value;
    NdArr grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool needs_grad = false;
  };
  std::deque<Node> nodes_;
  std::unordered_map<Parameter*, std::size_t> param_nodes_;
  bool record_;
  bool backward_done_ = false;
};

// ---- elementwise ---------------------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, Real c);
Var add_scalar(const Var& a, Real c);
Var exp(const Var& a);
Var log(const Var& a);
Var sigmoid(const Var& a);
Var relu(const Var& a);
Var tanh(const Var& a);
Var square(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(const Var& a, Real c) { return scale(a, c); }
inline Var operator*(Real c, const Var& a) { return scale(a, c); }
inline Var operator-(const Var& a) { return scale(a, Real(-1)); }

// ---- reductions and broadcasting ----------------------------------------

/// Sum of all elements, shape [1].
Var sum(const Var& a);
Var mean(const Var& a);
/// Sum over every axis but the first: [N, ...] -> [N].
Var sum_per_sample(const Var& a);
/// Broadcast a one-element value to `shape`.
Var expand(const Var& scalar, const Shape& shape);

// ---- shape manipulation ---------------------------------------------------

Var reshape(const Var& a, const Shape& shape);
/// Channels [c0, c1) along axis 1 of an N x C x ... tensor.
Var slice_channels(const Var& a, std::int64_t c0, std::int64_t c1);
Var concat_channels(const Var& a, const Var& b);
/// out[i] = a[index[i]]; out has `shape`.
Var gather(const Var& a, std::vector<std::int64_t> index, const Shape& shape);

// ---- neural building blocks -----------------------------------------------

/// y[n,c,...] = x[n,c,...] * s[c] + b[c].
Var channel_affine(const Var& x, const Var& s, const Var& b);

struct Conv2dGeometry {
  std::int64_t stride = 1;
  std::int64_t pad = 0;
  /// Transposed convolution only: extra rows/cols on the bottom/right.
  std::int64_t output_pad = 0;
};

/// x: N x C x H x W; w: O x C x kh x kw; b: [O] or invalid Var for no bias.
Var conv2d(const Var& x, const Var& w, const Var& b, Conv2dGeometry g);
/// Adjoint of conv2d in x. x: N x Ci x H x W; w: Ci x Co x kh x kw.
Var conv_transpose2d(const Var& x, const Var& w, const Var& b, Conv2dGeometry g);
/// Non-overlapping k x k max pooling.
Var maxpool2d(const Var& x, std::int64_t k);
/// x: N x in; w: out x in; b: [out] or invalid.
Var dense(const Var& x, const Var& w, const Var& b);

/// log|det w| for a square matrix; [1].
Var logabsdet(const Var& w);

/// Elementwise numerically stable binary cross-entropy of sigmoid(logits) vs targets.
Var bce_with_logits(const Var& logits, const NdArr& targets);

/// Per-sample Gaussian log-density: sum over all non-batch elements of
/// -0.5 log(2 pi) - log_sigma - (z - mu)^2 / (2 sigma^2). Returns [N].
Var normal_logprob(const Var& z, const Var& mu, const Var& log_sigma);
/// Standard-normal special case of normal_logprob.
Var std_normal_logprob(const Var& z);

// Raw kernels, exposed for reuse by inference code and tests.
Shape conv2d_output_shape(const Shape& x, const Shape& w, Conv2dGeometry g);
Shape conv_transpose2d_output_shape(const Shape& x, const Shape& w, Conv2dGeometry g);

}  // namespace flowseg
