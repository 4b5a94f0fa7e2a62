// SPDX-License-Identifier: Apache-2.0
//
// Define-by-run reverse-mode automatic differentiation over dense
// double-precision tensors (rank 1 or rank 2, row-major).
//
// A Tape owns every recorded node and its forward value. Var is a cheap
// handle (tape pointer + node index). A fresh tape is built for each forward
// pass; tapes are not thread-safe but distinct tapes share nothing.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <initializer_list>
#include <new>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace s2meta::ad {

using Shape = std::vector<std::size_t>;

/// Allocates on 64-byte boundaries. Vectorized kernels split their loops by
/// pointer alignment, so equal alignment keeps results bitwise reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

inline bool operator==(const Buffer& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}

std::string to_string(const Shape& shape);

/// Raised when operand shapes are incompatible with an op.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major tensor value. Rank 1 tensors are treated as row vectors
/// where a matrix is expected only by ops that say so.
struct Tensor {
  Shape shape;
  Buffer values;

  Tensor() = default;
  Tensor(Shape s, Buffer v);
  Tensor(Shape s, const std::vector<double>& v);
  explicit Tensor(Shape s, double fill = 0.0);

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t size() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }
  /// Rows of the matrix view: shape[0] for rank 2, 1 for rank 1.
  std::size_t rows() const;
  /// Columns of the matrix view: shape[1] for rank 2, shape[0] for rank 1.
  std::size_t cols() const;

  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  double item() const;

  bool all_finite() const;
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

enum class OpKind : std::uint8_t {
  leaf,
  matmul,
  transpose,
  add,
  add_bias,
  sub,
  elementwise_mul,
  scale,
  concat,
  slice_cols,
  reshape,
  relu,
  sigmoid,
  tanh,
  max_with_zero,
  mean,
  sum,
  l2_norm,
  log1m_sigmoid,
  preprocess,
  lstm_cell,
};

const char* op_name(OpKind kind);

class Tape;
struct OpRecorder;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Result of a backward pass: one optional gradient per tape node.
class Gradients {
 public:
  /// Gradient of the loss w.r.t. `v`, or zeros of v's shape when no
  /// gradient reached it.
  Tensor wrt(const Var& v) const;
  bool has(const Var& v) const;

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::vector<std::optional<Tensor>> grads_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  // Vars point at their tape, so tapes stay put.
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  /// Record a leaf. Leaves with requires_grad receive gradients.
  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Gradients of a scalar `loss` w.r.t. every node that requires grad.
  /// Visits each reachable node once in reverse recording order.
  Gradients backward(const Var& loss) const;

  std::size_t size() const { return nodes_.size(); }
  OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }
  std::span<const std::size_t> inputs(std::size_t id) const { return nodes_.at(id).inputs; }

 private:
  friend class Var;
  friend struct OpRecorder;

  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    bool requires_grad = false;
    // op-specific saved forward state and scalar parameter
    Buffer saved;
    double param = 0.0;
  };

  Var push(Node node);
  void backward_node(const Node& node, const Tensor& grad,
                     std::vector<std::optional<Tensor>>& grads) const;

  // deque: references to node values stay valid as the tape grows
  std::deque<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Ops. All operands must live on the same tape.

/// a[r×k] · b[k×c]. Rank-1 `b` of length k is treated as a column (result
/// has shape [r]); rank-1 `a` is treated as a row.
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
/// Same-shape elementwise sum.
Var add(const Var& a, const Var& b);
/// Adds a bias vector of length cols(a) to every row of a.
Var add_bias(const Var& a, const Var& bias);
Var sub(const Var& a, const Var& b);
Var elementwise_mul(const Var& a, const Var& b);
Var scale(const Var& a, double k);
/// Column-wise concatenation of rank-2 tensors (or rank-1 as single rows)
/// with equal row counts.
Var concat(std::span<const Var> parts);
Var concat(std::initializer_list<Var> parts);
Var slice_cols(const Var& a, std::size_t begin, std::size_t count);
Var reshape(const Var& a, Shape shape);
/// relu'(0) = 0.
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
/// Same as relu; kept separate so hinge terms read as max(0, x).
Var max_with_zero(const Var& a);
Var mean(const Var& a);
Var sum(const Var& a);
Var l2_norm(const Var& a);
/// ln(1 - sigmoid(z)), stable for large |z|.
Var log1m_sigmoid(const Var& a);
/// Gradient preprocessing: each element x maps to the pair
/// (log|x|/p, sgn x) when |x| >= e^{-p}, else (-1, e^p x). Output [size(a) × 2].
Var preprocess(const Var& a, double p = 10.0);
/// One LSTM step over a batch of n rows. Gate order (i, f, g, o).
/// x[n×in], h[n×H], c[n×H], w_x[in×4H], w_h[H×4H], b[4H] -> [n×2H] = [h' | c'].
Var lstm_cell(const Var& x, const Var& h, const Var& c, const Var& w_x, const Var& w_h,
              const Var& b);

/// Stop-gradient: a new leaf on the same tape with identical values and no
/// lineage.
Var detach(const Var& a);

// Scalar helpers shared with non-tape code paths.
double stable_sigmoid(double z);
double log1m_sigmoid_value(double z);
std::pair<double, double> preprocess_value(double x, double p = 10.0);

}  // namespace s2meta::ad
