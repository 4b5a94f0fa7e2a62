// SPDX-License-Identifier: Apache-2.0

#include "s2meta/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace s2meta::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

ConstMatMap as_matrix(const Tensor& t) {
  return ConstMatMap(t.values.data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}

MatMap as_matrix(Tensor& t) {
  return MatMap(t.values.data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}

[[noreturn]] void shape_error(OpKind kind, const std::string& detail) {
  throw ShapeError(std::string(op_name(kind)) + ": " + detail);
}

void require_same_tape(OpKind kind, std::initializer_list<const Var*> vars) {
  Tape* tape = nullptr;
  for (const Var* v : vars) {
    if (!v->valid()) shape_error(kind, "operand is not bound to a tape");
    if (tape == nullptr) tape = v->tape();
    if (v->tape() != tape) shape_error(kind, "operands live on different tapes");
  }
}

void require_same_shape(OpKind kind, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    shape_error(kind, "shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

void accumulate(std::optional<Tensor>& slot, const Tensor& g) {
  if (!slot) {
    slot = g;
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) slot->values[i] += g.values[i];
}

// Adds into slot, allocating zeros of `shape` first if needed.
Tensor& slot_for(std::optional<Tensor>& slot, const Shape& shape) {
  if (!slot) slot = Tensor(shape, 0.0);
  return *slot;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, const std::vector<double>& v)
    : Tensor(std::move(s), Buffer(v.begin(), v.end())) {}

Tensor::Tensor(Shape s, Buffer v) : shape(std::move(s)), values(std::move(v)) {
  if (shape.empty() || shape.size() > 2) {
    throw ShapeError("tensor rank must be 1 or 2, got shape " + to_string(shape));
  }
  if (product(shape) != values.size()) {
    throw ShapeError("tensor shape " + to_string(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
}

Tensor::Tensor(Shape s, double fill) : Tensor(s, Buffer(product(s), fill)) {}

Tensor Tensor::vector(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n}, v);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
  return Tensor({rows, cols}, v);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  Buffer v;
  std::size_t cols = rows.size() ? rows.begin()->size() : 0;
  for (const auto& r : rows) {
    if (r.size() != cols) throw ShapeError("ragged matrix literal");
    v.insert(v.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), cols}, std::move(v));
}

std::size_t Tensor::rows() const { return shape.size() == 2 ? shape[0] : 1; }
std::size_t Tensor::cols() const { return shape.size() == 2 ? shape[1] : shape.at(0); }

double Tensor::item() const {
  if (values.size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape));
  return values[0];
}

bool Tensor::all_finite() const {
  return std::all_of(values.begin(), values.end(), [](double x) { return std::isfinite(x); });
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::transpose: return "transpose";
    case OpKind::add: return "add";
    case OpKind::add_bias: return "add_bias";
    case OpKind::sub: return "sub";
    case OpKind::elementwise_mul: return "elementwise_mul";
    case OpKind::scale: return "scale";
    case OpKind::concat: return "concat";
    case OpKind::slice_cols: return "slice_cols";
    case OpKind::reshape: return "reshape";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::tanh: return "tanh";
    case OpKind::max_with_zero: return "max_with_zero";
    case OpKind::mean: return "mean";
    case OpKind::sum: return "sum";
    case OpKind::l2_norm: return "l2_norm";
    case OpKind::log1m_sigmoid: return "log1m_sigmoid";
    case OpKind::preprocess: return "preprocess";
    case OpKind::lstm_cell: return "lstm_cell";
  }
  return "unknown";
}

double stable_sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double log1m_sigmoid_value(double z) {
  // ln(1 - σ(z)) = -softplus(z)
  if (z > 0.0) return -z - std::log1p(std::exp(-z));
  return -std::log1p(std::exp(z));
}

std::pair<double, double> preprocess_value(double x, double p) {
  if (std::abs(x) >= std::exp(-p)) {
    const double sign = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
    return {std::log(std::abs(x)) / p, sign};
  }
  return {-1.0, std::exp(p) * x};
}

// ---------------------------------------------------------------------------

const Tensor& Var::value() const { return tape_->nodes_.at(id_).value; }
bool Var::requires_grad() const { return tape_->nodes_.at(id_).requires_grad; }

Tensor Gradients::wrt(const Var& v) const {
  if (v.tape() != tape_) throw std::invalid_argument("gradient requested for a foreign tape");
  if (v.id() < grads_.size() && grads_[v.id()]) return *grads_[v.id()];
  return Tensor(v.shape(), 0.0);
}

bool Gradients::has(const Var& v) const {
  return v.tape() == tape_ && v.id() < grads_.size() && grads_[v.id()].has_value();
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node node;
  node.kind = OpKind::leaf;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  return push(std::move(node));
}

struct OpRecorder {
  static Var record(OpKind kind, std::initializer_list<const Var*> inputs, Tensor value,
                    Buffer saved = {}, double param = 0.0) {
    Tape* tape = (*inputs.begin())->tape();
    Tape::Node node;
    node.kind = kind;
    node.value = std::move(value);
    node.saved = std::move(saved);
    node.param = param;
    for (const Var* v : inputs) {
      node.inputs.push_back(v->id());
      node.requires_grad = node.requires_grad || v->requires_grad();
    }
    return tape->push(std::move(node));
  }

  static Var record_many(OpKind kind, std::span<const Var> inputs, Tensor value) {
    Tape* tape = inputs.front().tape();
    Tape::Node node;
    node.kind = kind;
    node.value = std::move(value);
    for (const Var& v : inputs) {
      node.inputs.push_back(v.id());
      node.requires_grad = node.requires_grad || v.requires_grad();
    }
    return tape->push(std::move(node));
  }

  static const Tensor& value_of(const Tape& tape, std::size_t id) { return tape.nodes_[id].value; }
  static bool needs(const Tape& tape, std::size_t id) { return tape.nodes_[id].requires_grad; }
};

Gradients Tape::backward(const Var& loss) const {
  if (loss.tape() != this) throw std::invalid_argument("backward: loss is not on this tape");
  if (loss.id() >= nodes_.size()) throw std::invalid_argument("backward: loss node out of range");
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  }
  Gradients out;
  out.tape_ = this;
  out.grads_.resize(loss.id() + 1);
  out.grads_[loss.id()] = Tensor(loss.shape(), 1.0);
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    const Node& node = nodes_[id];
    if (!node.requires_grad || !out.grads_[id] || node.kind == OpKind::leaf) continue;
    // inputs always precede their consumer, so this slot is never written
    // while it is being read
    backward_node(node, *out.grads_[id], out.grads_);
  }
  return out;
}

void Tape::backward_node(const Node& node, const Tensor& g,
                         std::vector<std::optional<Tensor>>& grads) const {
  auto in = [&](std::size_t k) -> const Tensor& { return nodes_[node.inputs[k]].value; };
  auto needs = [&](std::size_t k) { return nodes_[node.inputs[k]].requires_grad; };
  auto slot = [&](std::size_t k) -> std::optional<Tensor>& { return grads[node.inputs[k]]; };

  switch (node.kind) {
    case OpKind::leaf:
      return;
    case OpKind::matmul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const bool b_col = b.rank() == 1;
      const auto ar = static_cast<Eigen::Index>(a.rows());
      const auto ak = static_cast<Eigen::Index>(a.cols());
      const auto bc = static_cast<Eigen::Index>(b_col ? 1 : b.cols());
      ConstMatMap A(a.values.data(), ar, ak);
      ConstMatMap B(b.values.data(), ak, bc);
      ConstMatMap G(g.values.data(), ar, bc);
      if (needs(0)) {
        Tensor& ga = slot_for(slot(0), a.shape);
        as_matrix(ga).noalias() += G * B.transpose();
      }
      if (needs(1)) {
        Tensor& gb = slot_for(slot(1), b.shape);
        MatMap GB(gb.values.data(), ak, bc);
        GB.noalias() += A.transpose() * G;
      }
      return;
    }
    case OpKind::transpose: {
      if (!needs(0)) return;
      const Tensor& a = in(0);
      Tensor& ga = slot_for(slot(0), a.shape);
      as_matrix(ga) += as_matrix(g).transpose();
      return;
    }
    case OpKind::add:
    case OpKind::reshape: {
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        if (!needs(k)) continue;
        Tensor& gk = slot_for(slot(k), in(k).shape);
        for (std::size_t i = 0; i < g.size(); ++i) gk.values[i] += g.values[i];
      }
      return;
    }
    case OpKind::add_bias: {
      if (needs(0)) accumulate(slot(0), Tensor(in(0).shape, g.values));
      if (needs(1)) {
        Tensor& gb = slot_for(slot(1), in(1).shape);
        const std::size_t cols = gb.size();
        for (std::size_t i = 0; i < g.size(); ++i) gb.values[i % cols] += g.values[i];
      }
      return;
    }
    case OpKind::sub: {
      if (needs(0)) accumulate(slot(0), g);
      if (needs(1)) {
        Tensor& gb = slot_for(slot(1), in(1).shape);
        for (std::size_t i = 0; i < g.size(); ++i) gb.values[i] -= g.values[i];
      }
      return;
    }
    case OpKind::elementwise_mul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (needs(0)) {
        Tensor& ga = slot_for(slot(0), a.shape);
        for (std::size_t i = 0; i < g.size(); ++i) ga.values[i] += g.values[i] * b.values[i];
      }
      if (needs(1)) {
        Tensor& gb = slot_for(slot(1), b.shape);
        for (std::size_t i = 0; i < g.size(); ++i) gb.values[i] += g.values[i] * a.values[i];
      }
      return;
    }
    case OpKind::scale: {
      if (!needs(0)) return;
      Tensor& ga = slot_for(slot(0), in(0).shape);
      for (std::size_t i = 0; i < g.size(); ++i) ga.values[i] += node.param * g.values[i];
      return;
    }
    case OpKind::concat: {
      const std::size_t rows = node.value.rows();
      const std::size_t total = node.value.cols();
      std::size_t offset = 0;
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const Tensor& part = in(k);
        const std::size_t cols = part.cols();
        if (needs(k)) {
          Tensor& gk = slot_for(slot(k), part.shape);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
              gk.values[r * cols + c] += g.values[r * total + offset + c];
            }
          }
        }
        offset += cols;
      }
      return;
    }
    case OpKind::slice_cols: {
      if (!needs(0)) return;
      const Tensor& a = in(0);
      const auto begin = static_cast<std::size_t>(node.param);
      const std::size_t rows = a.rows();
      const std::size_t cols = a.cols();
      const std::size_t count = node.value.cols();
      Tensor& ga = slot_for(slot(0), a.shape);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < count; ++c) {
          ga.values[r * cols + begin + c] += g.values[r * count + c];
        }
      }
      return;
    }
    case OpKind::relu:
    case OpKind::max_with_zero: {
      if (!needs(0)) return;
      const Tensor& a = in(0);
      Tensor& ga = slot_for(slot(0), a.shape);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (a.values[i] > 0.0) ga.values[i] += g.values[i];
      }
      return;
    }
    case OpKind::sigmoid: {
      if (!needs(0)) return;
      Tensor& ga = slot_for(slot(0), in(0).shape);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double y = node.value.values[i];
        ga.values[i] += g.values[i] * y * (1.0 - y);
      }
      return;
    }
    case OpKind::tanh: {
      if (!needs(0)) return;
      Tensor& ga = slot_for(slot(0), in(0).shape);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double y = node.value.values[i];
        ga.values[i] += g.values[i] * (1.0 - y * y);
      }
      return;
    }
    case OpKind::mean:
    case OpKind::sum: {
      if (!needs(0)) return;
      const Tensor& a = in(0);
      Tensor& ga = slot_for(slot(0), a.shape);
      const double d = node.kind == OpKind::mean ? g.values[0] / static_cast<double>(a.size())
                                                 : g.values[0];
      for (double& v : ga.values) v += d;
      return;
    }
    case OpKind::l2_norm: {
      if (!needs(0)) return;
      const Tensor& a = in(0);
      const double norm = node.value.values[0];
      if (norm == 0.0) return;
      Tensor& ga = slot_for(slot(0), a.shape);
      for (std::size_t i = 0; i < a.size(); ++i) ga.values[i] += g.values[0] * a.values[i] / norm;
      return;
    }
    case OpKind::log1m_sigmoid: {
      if (!needs(0)) return;
      const Tensor& a = in(0);
      Tensor& ga = slot_for(slot(0), a.shape);
      for (std::size_t i = 0; i < a.size(); ++i) {
        ga.values[i] -= g.values[i] * stable_sigmoid(a.values[i]);
      }
      return;
    }
    case OpKind::preprocess: {
      if (!needs(0)) return;
      const Tensor& a = in(0);
      const double p = node.param;
      const double threshold = std::exp(-p);
      const double ep = std::exp(p);
      Tensor& ga = slot_for(slot(0), a.shape);
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a.values[i];
        if (std::abs(x) >= threshold) {
          ga.values[i] += g.values[2 * i] / (p * x);
        } else {
          ga.values[i] += g.values[2 * i + 1] * ep;
        }
      }
      return;
    }
    case OpKind::lstm_cell: {
      const Tensor& x = in(0);
      const Tensor& h = in(1);
      const Tensor& c = in(2);
      const Tensor& wx = in(3);
      const Tensor& wh = in(4);
      const auto n = static_cast<Eigen::Index>(x.rows());
      const std::size_t H = h.cols();
      const std::size_t H4 = 4 * H;
      // saved: activated gates [n×4H] then tanh(c') [n×H]
      const double* gates = node.saved.data();
      const double* tanh_c = node.saved.data() + static_cast<std::size_t>(n) * H4;
      Tensor dgate({static_cast<std::size_t>(n), H4}, 0.0);
      std::vector<double> dc_prev(static_cast<std::size_t>(n) * H);
      for (std::size_t r = 0; r < static_cast<std::size_t>(n); ++r) {
        const double* gr = gates + r * H4;
        const double* gh = g.values.data() + r * 2 * H;
        double* dg = dgate.values.data() + r * H4;
        for (std::size_t j = 0; j < H; ++j) {
          const double ig = gr[j];
          const double fg = gr[H + j];
          const double gg = gr[2 * H + j];
          const double og = gr[3 * H + j];
          const double tc = tanh_c[r * H + j];
          const double dh = gh[j];
          const double dc = gh[H + j] + dh * og * (1.0 - tc * tc);
          dg[j] = dc * gg * ig * (1.0 - ig);
          dg[H + j] = dc * c.values[r * H + j] * fg * (1.0 - fg);
          dg[2 * H + j] = dc * ig * (1.0 - gg * gg);
          dg[3 * H + j] = dh * tc * og * (1.0 - og);
          dc_prev[r * H + j] = dc * fg;
        }
      }
      ConstMatMap dG(dgate.values.data(), n, static_cast<Eigen::Index>(H4));
      if (needs(0)) as_matrix(slot_for(slot(0), x.shape)).noalias() += dG * as_matrix(wx).transpose();
      if (needs(1)) as_matrix(slot_for(slot(1), h.shape)).noalias() += dG * as_matrix(wh).transpose();
      if (needs(2)) {
        Tensor& gc = slot_for(slot(2), c.shape);
        for (std::size_t i = 0; i < dc_prev.size(); ++i) gc.values[i] += dc_prev[i];
      }
      if (needs(3)) as_matrix(slot_for(slot(3), wx.shape)).noalias() += as_matrix(x).transpose() * dG;
      if (needs(4)) as_matrix(slot_for(slot(4), wh.shape)).noalias() += as_matrix(h).transpose() * dG;
      if (needs(5)) {
        Tensor& gb = slot_for(slot(5), in(5).shape);
        Eigen::Map<Eigen::RowVectorXd>(gb.values.data(), static_cast<Eigen::Index>(H4)) +=
            dG.colwise().sum();
      }
      return;
    }
  }
}

// ---------------------------------------------------------------------------
// Forward ops

Var matmul(const Var& a, const Var& b) {
  require_same_tape(OpKind::matmul, {&a, &b});
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  const std::size_t k_b = B.rank() == 1 ? B.size() : B.rows();
  if (A.cols() != k_b) {
    shape_error(OpKind::matmul, "inner dimensions differ: " + to_string(A.shape) + " · " +
                                    to_string(B.shape));
  }
  const std::size_t r = A.rows();
  const std::size_t c = B.rank() == 1 ? 1 : B.cols();
  Shape out_shape;
  if (A.rank() == 1 && B.rank() == 1) {
    out_shape = {1};
  } else if (A.rank() == 1) {
    out_shape = {c};
  } else if (B.rank() == 1) {
    out_shape = {r};
  } else {
    out_shape = {r, c};
  }
  Tensor out(out_shape, 0.0);
  MatMap C(out.values.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  C.noalias() = as_matrix(A) * ConstMatMap(B.values.data(), static_cast<Eigen::Index>(k_b),
                                           static_cast<Eigen::Index>(c));
  return OpRecorder::record(OpKind::matmul, {&a, &b}, std::move(out));
}

Var transpose(const Var& a) {
  require_same_tape(OpKind::transpose, {&a});
  const Tensor& A = a.value();
  if (A.rank() != 2) shape_error(OpKind::transpose, "needs rank 2, got " + to_string(A.shape));
  Tensor out({A.cols(), A.rows()}, 0.0);
  as_matrix(out) = as_matrix(A).transpose();
  return OpRecorder::record(OpKind::transpose, {&a}, std::move(out));
}

namespace {

template <typename F>
Var binary_same_shape(OpKind kind, const Var& a, const Var& b, F f) {
  require_same_tape(kind, {&a, &b});
  require_same_shape(kind, a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  Tensor out(A.shape, 0.0);
  for (std::size_t i = 0; i < A.size(); ++i) out.values[i] = f(A.values[i], B.values[i]);
  return OpRecorder::record(kind, {&a, &b}, std::move(out));
}

template <typename F>
Var unary(OpKind kind, const Var& a, F f) {
  require_same_tape(kind, {&a});
  const Tensor& A = a.value();
  Tensor out(A.shape, 0.0);
  for (std::size_t i = 0; i < A.size(); ++i) out.values[i] = f(A.values[i]);
  return OpRecorder::record(kind, {&a}, std::move(out));
}

}  // namespace

Var add(const Var& a, const Var& b) {
  return binary_same_shape(OpKind::add, a, b, [](double x, double y) { return x + y; });
}

Var sub(const Var& a, const Var& b) {
  return binary_same_shape(OpKind::sub, a, b, [](double x, double y) { return x - y; });
}

Var elementwise_mul(const Var& a, const Var& b) {
  return binary_same_shape(OpKind::elementwise_mul, a, b,
                           [](double x, double y) { return x * y; });
}

Var add_bias(const Var& a, const Var& bias) {
  require_same_tape(OpKind::add_bias, {&a, &bias});
  const Tensor& A = a.value();
  const Tensor& B = bias.value();
  if (B.rank() != 1 || B.size() != A.cols()) {
    shape_error(OpKind::add_bias, "bias " + to_string(B.shape) + " does not fit rows of " +
                                      to_string(A.shape));
  }
  Tensor out = A;
  const std::size_t cols = A.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += B.values[i % cols];
  return OpRecorder::record(OpKind::add_bias, {&a, &bias}, std::move(out));
}

Var scale(const Var& a, double k) {
  require_same_tape(OpKind::scale, {&a});
  Tensor out = a.value();
  for (double& v : out.values) v *= k;
  return OpRecorder::record(OpKind::scale, {&a}, std::move(out), {}, k);
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) shape_error(OpKind::concat, "no operands");
  const std::size_t rows = parts.front().value().rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    require_same_tape(OpKind::concat, {&parts.front(), &p});
    if (p.value().rows() != rows) {
      shape_error(OpKind::concat, "row count mismatch " + to_string(parts.front().shape()) +
                                      " vs " + to_string(p.shape()));
    }
    total += p.value().cols();
  }
  const bool as_vector = parts.front().value().rank() == 1;
  Tensor out(as_vector ? Shape{total} : Shape{rows, total}, 0.0);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const Tensor& t = p.value();
    const std::size_t cols = t.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(t.values.begin() + static_cast<std::ptrdiff_t>(r * cols), cols,
                  out.values.begin() + static_cast<std::ptrdiff_t>(r * total + offset));
    }
    offset += cols;
  }
  return OpRecorder::record_many(OpKind::concat, parts, std::move(out));
}

Var concat(std::initializer_list<Var> parts) {
  return concat(std::span<const Var>(parts.begin(), parts.size()));
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t count) {
  require_same_tape(OpKind::slice_cols, {&a});
  const Tensor& A = a.value();
  if (begin + count > A.cols() || count == 0) {
    shape_error(OpKind::slice_cols, "columns [" + std::to_string(begin) + ", " +
                                        std::to_string(begin + count) + ") out of " +
                                        to_string(A.shape));
  }
  const std::size_t rows = A.rows();
  Tensor out(A.rank() == 1 ? Shape{count} : Shape{rows, count}, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(A.values.begin() + static_cast<std::ptrdiff_t>(r * A.cols() + begin), count,
                out.values.begin() + static_cast<std::ptrdiff_t>(r * count));
  }
  return OpRecorder::record(OpKind::slice_cols, {&a}, std::move(out), {},
                            static_cast<double>(begin));
}

Var reshape(const Var& a, Shape shape) {
  require_same_tape(OpKind::reshape, {&a});
  if (product(shape) != a.size()) {
    shape_error(OpKind::reshape, "cannot reshape " + to_string(a.shape()) + " to " +
                                     to_string(shape));
  }
  Tensor out(std::move(shape), a.value().values);
  return OpRecorder::record(OpKind::reshape, {&a}, std::move(out));
}

Var relu(const Var& a) {
  return unary(OpKind::relu, a, [](double x) { return x > 0.0 ? x : 0.0; });
}

Var max_with_zero(const Var& a) {
  return unary(OpKind::max_with_zero, a, [](double x) { return x > 0.0 ? x : 0.0; });
}

Var sigmoid(const Var& a) { return unary(OpKind::sigmoid, a, stable_sigmoid); }

Var tanh(const Var& a) {
  return unary(OpKind::tanh, a, [](double x) { return std::tanh(x); });
}

Var log1m_sigmoid(const Var& a) { return unary(OpKind::log1m_sigmoid, a, log1m_sigmoid_value); }

Var mean(const Var& a) {
  require_same_tape(OpKind::mean, {&a});
  const Tensor& A = a.value();
  const double s = std::accumulate(A.values.begin(), A.values.end(), 0.0);
  return OpRecorder::record(OpKind::mean, {&a}, Tensor::scalar(s / static_cast<double>(A.size())));
}

Var sum(const Var& a) {
  require_same_tape(OpKind::sum, {&a});
  const Tensor& A = a.value();
  return OpRecorder::record(OpKind::sum, {&a},
                            Tensor::scalar(std::accumulate(A.values.begin(), A.values.end(), 0.0)));
}

Var l2_norm(const Var& a) {
  require_same_tape(OpKind::l2_norm, {&a});
  const Tensor& A = a.value();
  double s = 0.0;
  for (double v : A.values) s += v * v;
  return OpRecorder::record(OpKind::l2_norm, {&a}, Tensor::scalar(std::sqrt(s)));
}

Var preprocess(const Var& a, double p) {
  require_same_tape(OpKind::preprocess, {&a});
  if (!(p > 0.0)) shape_error(OpKind::preprocess, "p must be positive");
  const Tensor& A = a.value();
  Tensor out({A.size(), 2}, 0.0);
  for (std::size_t i = 0; i < A.size(); ++i) {
    const auto [first, second] = preprocess_value(A.values[i], p);
    out.values[2 * i] = first;
    out.values[2 * i + 1] = second;
  }
  return OpRecorder::record(OpKind::preprocess, {&a}, std::move(out), {}, p);
}

Var lstm_cell(const Var& x, const Var& h, const Var& c, const Var& w_x, const Var& w_h,
              const Var& b) {
  require_same_tape(OpKind::lstm_cell, {&x, &h, &c, &w_x, &w_h, &b});
  const Tensor& X = x.value();
  const Tensor& Hs = h.value();
  const Tensor& Cs = c.value();
  const Tensor& Wx = w_x.value();
  const Tensor& Wh = w_h.value();
  const Tensor& B = b.value();
  const std::size_t n = X.rows();
  const std::size_t H = Hs.cols();
  const std::size_t H4 = 4 * H;
  if (X.rank() != 2 || Hs.rank() != 2 || Cs.shape != Hs.shape || Hs.rows() != n ||
      Wx.rank() != 2 || Wx.rows() != X.cols() || Wx.cols() != H4 || Wh.rank() != 2 ||
      Wh.rows() != H || Wh.cols() != H4 || B.rank() != 1 || B.size() != H4) {
    shape_error(OpKind::lstm_cell, "incompatible shapes x" + to_string(X.shape) + " h" +
                                       to_string(Hs.shape) + " c" + to_string(Cs.shape) +
                                       " w_x" + to_string(Wx.shape) + " w_h" +
                                       to_string(Wh.shape) + " b" + to_string(B.shape));
  }
  Buffer saved(n * H4 + n * H);
  MatMap G(saved.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(H4));
  G.noalias() = as_matrix(X) * as_matrix(Wx);
  G.noalias() += as_matrix(Hs) * as_matrix(Wh);
  G.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(B.values.data(),
                                                      static_cast<Eigen::Index>(H4));
  const auto cols = static_cast<Eigen::Index>(H);
  // σ(z) = 1 / (1 + e^{-z}) and tanh(z) = 1 − 2 / (e^{2z} + 1) saturate cleanly
  // at ±inf, and Eigen vectorizes the exponentials.
  auto sig = [](auto block) { block.array() = (1.0 + (-block.array()).exp()).inverse(); };
  auto tnh = [](auto block) { block.array() = 1.0 - 2.0 / ((2.0 * block.array()).exp() + 1.0); };
  sig(G.leftCols(2 * cols));
  tnh(G.middleCols(2 * cols, cols));
  sig(G.rightCols(cols));
  Tensor out({n, 2 * H}, 0.0);
  MatMap O(out.values.data(), static_cast<Eigen::Index>(n), 2 * cols);
  MatMap TC(saved.data() + n * H4, static_cast<Eigen::Index>(n), cols);
  O.rightCols(cols).array() = G.middleCols(cols, cols).array() * as_matrix(Cs).array() +
                              G.leftCols(cols).array() * G.middleCols(2 * cols, cols).array();
  TC = O.rightCols(cols);
  tnh(TC);
  O.leftCols(cols).array() = G.rightCols(cols).array() * TC.array();
  return OpRecorder::record(OpKind::lstm_cell, {&x, &h, &c, &w_x, &w_h, &b}, std::move(out),
                            std::move(saved));
}

Var detach(const Var& a) {
  if (!a.valid()) throw std::invalid_argument("detach: operand is not bound to a tape");
  return a.tape()->leaf(a.value(), false);
}

}  // namespace s2meta::ad
