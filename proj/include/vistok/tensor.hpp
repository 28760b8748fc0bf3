#pragma once

// Dense-tensor kernels with reverse-mode automatic differentiation.
//
// A Graph is a tape: every executed operation appends one Node in execution
// order, so the tape is already topologically sorted. backward() walks it
// once in reverse. Tensors are cheap handles into the tape and must not
// outlive the Graph that produced them.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_map>
#include <vector>

#include "vistok/common.hpp"

namespace vistok {

enum class Group : std::uint8_t {
  VisualEncoder = 0,
  Adapter = 1,
  Decoder = 2,
  MmHead = 3,
  VmHead = 4,
};

inline const char* group_name(Group g) {
  switch (g) {
    case Group::VisualEncoder: return "visual_encoder";
    case Group::Adapter: return "adapter";
    case Group::Decoder: return "decoder";
    case Group::MmHead: return "mm_head";
    case Group::VmHead: return "vm_head";
  }
  return "?";
}

// A named model parameter. Lives outside any Graph; graphs reference it
// through leaf nodes and the trainer accumulates gradients back into `grad`.
template <class S>
struct Parameter {
  std::string name;
  Group group = Group::Decoder;
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Group g, Shape sh)
      : name(std::move(n)), group(g), shape(std::move(sh)),
        value(numel(shape), S(0)), grad(numel(shape), S(0)) {}

  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), S(0)); }
};

template <class S>
struct Node {
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  std::function<void()> backward;  // empty for leaves
  Parameter<S>* source = nullptr;  // set for parameter leaves

  std::size_t size() const { return value.size(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), S(0));
  }
};

// Handle into a Graph's tape.
template <class S>
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(Node<S>* n) : node_(n) {}

  bool valid() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.at(1); }

  const std::vector<S>& value() const { return node_->value; }
  std::vector<S>& value() { return node_->value; }
  const std::vector<S>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  bool requires_grad() const { return node_->requires_grad; }
  S item() const {
    if (node_->value.size() != 1)
      throw ContractError("item: tensor is not scalar, shape " + shape_str(node_->shape));
    return node_->value[0];
  }

  Node<S>* node() const { return node_; }

private:
  Node<S>* node_ = nullptr;
};

template <class S>
class Graph {
public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t node_count() const { return tape_.size(); }

  // ---- leaves ------------------------------------------------------------

  Tensor<S> input(Shape shape, std::vector<S> data) {
    if (numel(shape) != data.size())
      throw ShapeError("input: shape " + shape_str(shape) + " does not match data length " +
                       std::to_string(data.size()));
    Node<S>* n = fresh(std::move(shape));
    n->value = std::move(data);
    return Tensor<S>(n);
  }

  Tensor<S> zeros(Shape shape) { return input(std::move(shape), std::vector<S>(numel(shape), S(0))); }

  Tensor<S> scalar(S v) { return input({1}, {v}); }

  // Parameter leaf. Cached so every use of the same parameter within one
  // graph shares a node and gradients accumulate in one place.
  Tensor<S> param(Parameter<S>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Tensor<S>(it->second);
    Node<S>* n = fresh(p.shape);
    n->value = p.value;
    n->requires_grad = grad_enabled_ && p.trainable;
    n->source = &p;
    param_nodes_.emplace(&p, n);
    return Tensor<S>(n);
  }

  // Copy of `t`'s values as a fresh non-differentiable leaf.
  Tensor<S> detach(Tensor<S> t) {
    Node<S>* n = fresh(t.shape());
    n->value = t.value();
    return Tensor<S>(n);
  }

  // ---- elementwise -------------------------------------------------------

  Tensor<S> add(Tensor<S> a, Tensor<S> b) {
    check_same_shape("add", a, b);
    Node<S>* n = fresh(a.shape());
    const std::size_t m = n->size();
    for (std::size_t i = 0; i < m; ++i) n->value[i] = a.value()[i] + b.value()[i];
    if (wants_grad(n, {a, b})) {
      Node<S>* an = a.node(); Node<S>* bn = b.node();
      n->backward = [n, an, bn] {
        if (an->requires_grad) { an->ensure_grad();
          for (std::size_t i = 0; i < n->size(); ++i) an->grad[i] += n->grad[i]; }
        if (bn->requires_grad) { bn->ensure_grad();
          for (std::size_t i = 0; i < n->size(); ++i) bn->grad[i] += n->grad[i]; }
      };
    }
    return Tensor<S>(n);
  }

  Tensor<S> sub(Tensor<S> a, Tensor<S> b) {
    check_same_shape("sub", a, b);
    Node<S>* n = fresh(a.shape());
    const std::size_t m = n->size();
    for (std::size_t i = 0; i < m; ++i) n->value[i] = a.value()[i] - b.value()[i];
    if (wants_grad(n, {a, b})) {
      Node<S>* an = a.node(); Node<S>* bn = b.node();
      n->backward = [n, an, bn] {
        if (an->requires_grad) { an->ensure_grad();
          for (std::size_t i = 0; i < n->size(); ++i) an->grad[i] += n->grad[i]; }
        if (bn->requires_grad) { bn->ensure_grad();
          for (std::size_t i = 0; i < n->size(); ++i) bn->grad[i] -= n->grad[i]; }
      };
    }
    return Tensor<S>(n);
  }

  Tensor<S> mul(Tensor<S> a, Tensor<S> b) {
    check_same_shape("mul", a, b);
    Node<S>* n = fresh(a.shape());
    const std::size_t m = n->size();
    for (std::size_t i = 0; i < m; ++i) n->value[i] = a.value()[i] * b.value()[i];
    if (wants_grad(n, {a, b})) {
      Node<S>* an = a.node(); Node<S>* bn = b.node();
      n->backward = [n, an, bn] {
        if (an->requires_grad) { an->ensure_grad();
          for (std::size_t i = 0; i < n->size(); ++i) an->grad[i] += n->grad[i] * bn->value[i]; }
        if (bn->requires_grad) { bn->ensure_grad();
          for (std::size_t i = 0; i < n->size(); ++i) bn->grad[i] += n->grad[i] * an->value[i]; }
      };
    }
    return Tensor<S>(n);
  }

  Tensor<S> scale(Tensor<S> a, S c) {
    Node<S>* n = fresh(a.shape());
    const std::size_t m = n->size();
    for (std::size_t i = 0; i < m; ++i) n->value[i] = a.value()[i] * c;
    if (wants_grad(n, {a})) {
      Node<S>* an = a.node();
      n->backward = [n, an, c] {
        an->ensure_grad();
        for (std::size_t i = 0; i < n->size(); ++i) an->grad[i] += n->grad[i] * c;
      };
    }
    return Tensor<S>(n);
  }

  // matrix [r x c] + row vector [c], broadcast over rows. The only broadcast
  // in the kernel set.
  Tensor<S> add_bias(Tensor<S> m, Tensor<S> bias) {
    require_rank("add_bias", m, 2);
    require_rank("add_bias", bias, 1);
    const std::size_t r = m.rows(), c = m.cols();
    if (bias.size() != c)
      throw ShapeError("add_bias: matrix " + shape_str(m.shape()) + " vs bias " + shape_str(bias.shape()));
    Node<S>* n = fresh(m.shape());
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        n->value[i * c + j] = m.value()[i * c + j] + bias.value()[j];
    if (wants_grad(n, {m, bias})) {
      Node<S>* mn = m.node(); Node<S>* bn = bias.node();
      n->backward = [n, mn, bn, r, c] {
        if (mn->requires_grad) { mn->ensure_grad();
          for (std::size_t i = 0; i < r * c; ++i) mn->grad[i] += n->grad[i]; }
        if (bn->requires_grad) { bn->ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) bn->grad[j] += n->grad[i * c + j]; }
      };
    }
    return Tensor<S>(n);
  }

  Tensor<S> exp(Tensor<S> a) {
    Node<S>* n = fresh(a.shape());
    const std::size_t m = n->size();
    for (std::size_t i = 0; i < m; ++i) n->value[i] = std::exp(a.value()[i]);
    if (wants_grad(n, {a})) {
      Node<S>* an = a.node();
      n->backward = [n, an] {
        an->ensure_grad();
        for (std::size_t i = 0; i < n->size(); ++i) an->grad[i] += n->grad[i] * n->value[i];
      };
    }
    return Tensor<S>(n);
  }

  Tensor<S> log(Tensor<S> a) {
    Node<S>* n = fresh(a.shape());
    const std::size_t m = n->size();
    for (std::size_t i = 0; i < m; ++i) {
      if (!(a.value()[i] > S(0)))
        throw DomainError("log: input " + std::to_string(static_cast<double>(a.value()[i])) +
                          " at flat index " + std::to_string(i) + " is not positive");
      n->value[i] = std::log(a.value()[i]);
    }
    if (wants_grad(n, {a})) {
      Node<S>* an = a.node();
      n->backward = [n, an] {
        an->ensure_grad();
        for (std::size_t i = 0; i < n->size(); ++i) an->grad[i] += n->grad[i] / an->value[i];
      };
    }
    return Tensor<S>(n);
  }

  // log(max(x, floor)). Used by the losses so probabilities can be zero.
  // Gradient is zero where the floor is active.
  Tensor<S> log_floored(Tensor<S> a, S floor = S(1e-12)) {
    Node<S>* n = fresh(a.shape());
    const std::size_t m = n->size();
    for (std::size_t i = 0; i < m; ++i) n->value[i] = std::log(std::max(a.value()[i], floor));
    if (wants_grad(n, {a})) {
      Node<S>* an = a.node();
      n->backward = [n, an, floor] {
        an->ensure_grad();
        for (std::size_t i = 0; i < n->size(); ++i)
          if (an->value[i] > floor) an->grad[i] += n->grad[i] / an->value[i];
      };
    }
    return Tensor<S>(n);
  }

  // tanh-approximation GELU.
  Tensor<S> gelu(Tensor<S> a) {
    Node<S>* n = fresh(a.shape());
    const std::size_t m = n->size();
    const S k = S(0.7978845608028654);  // sqrt(2/pi)
    const S c3 = S(0.044715);
    for (std::size_t i = 0; i < m; ++i) {
      const S x = a.value()[i];
      n->value[i] = S(0.5) * x * (S(1) + std::tanh(k * (x + c3 * x * x * x)));
    }
    if (wants_grad(n, {a})) {
      Node<S>* an = a.node();
      n->backward = [n, an, k, c3] {
        an->ensure_grad();
        for (std::size_t i = 0; i < n->size(); ++i) {
          const S x = an->value[i];
          const S u = k * (x + c3 * x * x * x);
          const S t = std::tanh(u);
          const S sech2 = S(1) - t * t;
          const S du = k * (S(1) + S(3) * c3 * x * x);
          an->grad[i] += n->grad[i] * (S(0.5) * (S(1) + t) + S(0.5) * x * sech2 * du);
        }
      };
    }
    return Tensor<S>(n);
  }

  // Row-wise layer normalization with affine gain/bias over the last axis.
  // eps = 1e-5 inside the sqrt; a constant row normalizes to zeros.
  Tensor<S> layer_norm(Tensor<S> x, Tensor<S> gain, Tensor<S> bias) {
    require_rank("layer_norm", x, 2);
    const std::size_t r = x.rows(), c = x.cols();
    if (gain.size() != c || bias.size() != c)
      throw ShapeError("layer_norm: input " + shape_str(x.shape()) + " vs gain " +
                       shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()));
    const S eps = S(1e-5);
    Node<S>* n = fresh(x.shape());
    std::vector<S> inv_std(r), normed(r * c);
    for (std::size_t i = 0; i < r; ++i) {
      const S* row = x.value().data() + i * c;
      S mean = std::accumulate(row, row + c, S(0)) / S(c);
      S var = S(0);
      for (std::size_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
      var /= S(c);
      const S is = S(1) / std::sqrt(var + eps);
      inv_std[i] = is;
      for (std::size_t j = 0; j < c; ++j) {
        const S y = (row[j] - mean) * is;
        normed[i * c + j] = y;
        n->value[i * c + j] = y * gain.value()[j] + bias.value()[j];
      }
    }
    if (wants_grad(n, {x, gain, bias})) {
      Node<S>* xn = x.node(); Node<S>* gn = gain.node(); Node<S>* bn = bias.node();
      auto istd = std::make_shared<std::vector<S>>(std::move(inv_std));
      auto nrm = std::make_shared<std::vector<S>>(std::move(normed));
      n->backward = [n, xn, gn, bn, istd, nrm, r, c] {
        for (std::size_t i = 0; i < r; ++i) {
          const S* dy = n->grad.data() + i * c;
          const S* y = nrm->data() + i * c;
          if (gn->requires_grad) { gn->ensure_grad();
            for (std::size_t j = 0; j < c; ++j) gn->grad[j] += dy[j] * y[j]; }
          if (bn->requires_grad) { bn->ensure_grad();
            for (std::size_t j = 0; j < c; ++j) bn->grad[j] += dy[j]; }
          if (xn->requires_grad) {
            xn->ensure_grad();
            // dx = (g - mean(g) - y*mean(g*y)) * inv_std, g = dy*gain
            S mg = S(0), mgy = S(0);
            for (std::size_t j = 0; j < c; ++j) {
              const S g = dy[j] * gn->value[j];
              mg += g;
              mgy += g * y[j];
            }
            mg /= S(c);
            mgy /= S(c);
            for (std::size_t j = 0; j < c; ++j) {
              const S g = dy[j] * gn->value[j];
              xn->grad[i * c + j] += (g - mg - y[j] * mgy) * (*istd)[i];
            }
          }
        }
      };
    }
    return Tensor<S>(n);
  }

  // ---- matrix products ----------------------------------------------------

  // [m x k] * [k x n] -> [m x n]
  Tensor<S> matmul(Tensor<S> a, Tensor<S> b) {
    require_rank("matmul", a, 2);
    require_rank("matmul", b, 2);
    if (a.cols() != b.rows())
      throw ShapeError("matmul: lhs " + shape_str(a.shape()) + " rhs " + shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
    Node<S>* n = fresh({m, p});
    gemm_nn(a.value().data(), b.value().data(), n->value.data(), m, k, p, false);
    if (wants_grad(n, {a, b})) {
      Node<S>* an = a.node(); Node<S>* bn = b.node();
      n->backward = [n, an, bn, m, k, p] {
        if (an->requires_grad) { an->ensure_grad();
          // dA += dC * B^T
          gemm_nt(n->grad.data(), bn->value.data(), an->grad.data(), m, p, k, true);
        }
        if (bn->requires_grad) { bn->ensure_grad();
          // dB += A^T * dC
          gemm_tn(an->value.data(), n->grad.data(), bn->grad.data(), k, m, p, true);
        }
      };
    }
    return Tensor<S>(n);
  }

  // [m x k] * [n x k]^T -> [m x n]
  Tensor<S> matmul_nt(Tensor<S> a, Tensor<S> b) {
    require_rank("matmul_nt", a, 2);
    require_rank("matmul_nt", b, 2);
    if (a.cols() != b.cols())
      throw ShapeError("matmul_nt: lhs " + shape_str(a.shape()) + " rhs " + shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), p = b.rows();
    Node<S>* n = fresh({m, p});
    gemm_nt(a.value().data(), b.value().data(), n->value.data(), m, k, p, false);
    if (wants_grad(n, {a, b})) {
      Node<S>* an = a.node(); Node<S>* bn = b.node();
      n->backward = [n, an, bn, m, k, p] {
        if (an->requires_grad) { an->ensure_grad();
          // dA += dC * B
          gemm_nn(n->grad.data(), bn->value.data(), an->grad.data(), m, p, k, true);
        }
        if (bn->requires_grad) { bn->ensure_grad();
          // dB += dC^T * A
          gemm_tn(n->grad.data(), an->value.data(), bn->grad.data(), p, m, k, true);
        }
      };
    }
    return Tensor<S>(n);
  }

  // ---- softmax family ------------------------------------------------------

  Tensor<S> softmax(Tensor<S> x) {
    auto [r, c] = last_axis_dims("softmax", x);
    check_finite("softmax", x);
    Node<S>* n = fresh(x.shape());
    for (std::size_t i = 0; i < r; ++i) {
      const S* in = x.value().data() + i * c;
      S* out = n->value.data() + i * c;
      softmax_row(in, out, c);
    }
    if (wants_grad(n, {x})) {
      Node<S>* xn = x.node();
      n->backward = [n, xn, r, c] {
        xn->ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
          const S* y = n->value.data() + i * c;
          const S* dy = n->grad.data() + i * c;
          S dot = S(0);
          for (std::size_t j = 0; j < c; ++j) dot += dy[j] * y[j];
          for (std::size_t j = 0; j < c; ++j) xn->grad[i * c + j] += y[j] * (dy[j] - dot);
        }
      };
    }
    return Tensor<S>(n);
  }

  Tensor<S> log_softmax(Tensor<S> x) {
    auto [r, c] = last_axis_dims("log_softmax", x);
    check_finite("log_softmax", x);
    Node<S>* n = fresh(x.shape());
    for (std::size_t i = 0; i < r; ++i) {
      const S* in = x.value().data() + i * c;
      S* out = n->value.data() + i * c;
      const S mx = *std::max_element(in, in + c);
      S sum = S(0);
      for (std::size_t j = 0; j < c; ++j) sum += std::exp(in[j] - mx);
      const S lse = mx + std::log(sum);
      for (std::size_t j = 0; j < c; ++j) out[j] = in[j] - lse;
    }
    if (wants_grad(n, {x})) {
      Node<S>* xn = x.node();
      n->backward = [n, xn, r, c] {
        xn->ensure_grad();
        for (std::size_t i = 0; i < r; ++i) {
          const S* y = n->value.data() + i * c;
          const S* dy = n->grad.data() + i * c;
          S sum = S(0);
          for (std::size_t j = 0; j < c; ++j) sum += dy[j];
          for (std::size_t j = 0; j < c; ++j)
            xn->grad[i * c + j] += dy[j] - std::exp(y[j]) * sum;
        }
      };
    }
    return Tensor<S>(n);
  }

  // Softmax of row i over columns 0..i only; later columns are exactly zero.
  // Square input. This is the causal attention kernel.
  Tensor<S> causal_softmax(Tensor<S> x) {
    require_rank("causal_softmax", x, 2);
    if (x.rows() != x.cols())
      throw ShapeError("causal_softmax: expected square scores, got " + shape_str(x.shape()));
    check_finite("causal_softmax", x);
    const std::size_t L = x.rows();
    Node<S>* n = fresh(x.shape());
    for (std::size_t i = 0; i < L; ++i) {
      const S* in = x.value().data() + i * L;
      S* out = n->value.data() + i * L;
      softmax_row(in, out, i + 1);
      for (std::size_t j = i + 1; j < L; ++j) out[j] = S(0);
    }
    if (wants_grad(n, {x})) {
      Node<S>* xn = x.node();
      n->backward = [n, xn, L] {
        xn->ensure_grad();
        for (std::size_t i = 0; i < L; ++i) {
          const S* y = n->value.data() + i * L;
          const S* dy = n->grad.data() + i * L;
          S dot = S(0);
          for (std::size_t j = 0; j <= i; ++j) dot += dy[j] * y[j];
          for (std::size_t j = 0; j <= i; ++j) xn->grad[i * L + j] += y[j] * (dy[j] - dot);
        }
      };
    }
    return Tensor<S>(n);
  }

  // ---- gather / structure ---------------------------------------------------

  // Rows of a matrix by index; the embedding lookup and row-selection kernel.
  Tensor<S> take_rows(Tensor<S> x, std::vector<std::size_t> rows) {
    require_rank("take_rows", x, 2);
    const std::size_t c = x.cols();
    for (std::size_t r : rows)
      if (r >= x.rows())
        throw ShapeError("take_rows: row index " + std::to_string(r) + " out of range for " +
                         shape_str(x.shape()));
    Node<S>* n = fresh({rows.size(), c});
    for (std::size_t i = 0; i < rows.size(); ++i)
      std::copy_n(x.value().data() + rows[i] * c, c, n->value.data() + i * c);
    if (wants_grad(n, {x})) {
      Node<S>* xn = x.node();
      auto idx = std::make_shared<std::vector<std::size_t>>(std::move(rows));
      n->backward = [n, xn, idx, c] {
        xn->ensure_grad();
        for (std::size_t i = 0; i < idx->size(); ++i)
          for (std::size_t j = 0; j < c; ++j)
            xn->grad[(*idx)[i] * c + j] += n->grad[i * c + j];
      };
    }
    return Tensor<S>(n);
  }

  // One element per row: out[i] = x[i, cols[i]].
  Tensor<S> pick(Tensor<S> x, std::vector<std::size_t> cols) {
    require_rank("pick", x, 2);
    if (cols.size() != x.rows())
      throw ShapeError("pick: " + std::to_string(cols.size()) + " column indices for " +
                       shape_str(x.shape()));
    const std::size_t c = x.cols();
    for (std::size_t j : cols)
      if (j >= c)
        throw ShapeError("pick: column index " + std::to_string(j) + " out of range for " +
                         shape_str(x.shape()));
    Node<S>* n = fresh({cols.size()});
    for (std::size_t i = 0; i < cols.size(); ++i) n->value[i] = x.value()[i * c + cols[i]];
    if (wants_grad(n, {x})) {
      Node<S>* xn = x.node();
      auto idx = std::make_shared<std::vector<std::size_t>>(std::move(cols));
      n->backward = [n, xn, idx, c] {
        xn->ensure_grad();
        for (std::size_t i = 0; i < idx->size(); ++i)
          xn->grad[i * c + (*idx)[i]] += n->grad[i];
      };
    }
    return Tensor<S>(n);
  }

  Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    const std::size_t c = parts.front().cols();
    std::size_t r = 0;
    for (const auto& p : parts) {
      require_rank("concat_rows", p, 2);
      if (p.cols() != c)
        throw ShapeError("concat_rows: column mismatch " + shape_str(p.shape()) + " vs " +
                         shape_str(parts.front().shape()));
      r += p.rows();
    }
    Node<S>* n = fresh({r, c});
    std::size_t off = 0;
    for (const auto& p : parts) {
      std::copy(p.value().begin(), p.value().end(), n->value.begin() + off);
      off += p.size();
    }
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (grad_enabled_ && any) {
      n->requires_grad = true;
      auto srcs = std::make_shared<std::vector<Node<S>*>>();
      for (const auto& p : parts) srcs->push_back(p.node());
      n->backward = [n, srcs] {
        std::size_t off = 0;
        for (Node<S>* p : *srcs) {
          if (p->requires_grad) {
            p->ensure_grad();
            for (std::size_t i = 0; i < p->size(); ++i) p->grad[i] += n->grad[off + i];
          }
          off += p->size();
        }
      };
    }
    return Tensor<S>(n);
  }

  // Contiguous column range [c0, c1).
  Tensor<S> slice_cols(Tensor<S> x, std::size_t c0, std::size_t c1) {
    require_rank("slice_cols", x, 2);
    if (c0 >= c1 || c1 > x.cols())
      throw ShapeError("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                       ") invalid for " + shape_str(x.shape()));
    const std::size_t r = x.rows(), c = x.cols(), w = c1 - c0;
    Node<S>* n = fresh({r, w});
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(x.value().data() + i * c + c0, w, n->value.data() + i * w);
    if (wants_grad(n, {x})) {
      Node<S>* xn = x.node();
      n->backward = [n, xn, r, c, c0, w] {
        xn->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j)
            xn->grad[i * c + c0 + j] += n->grad[i * w + j];
      };
    }
    return Tensor<S>(n);
  }

  Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    const std::size_t r = parts.front().rows();
    std::size_t c = 0;
    for (const auto& p : parts) {
      require_rank("concat_cols", p, 2);
      if (p.rows() != r)
        throw ShapeError("concat_cols: row mismatch " + shape_str(p.shape()) + " vs " +
                         shape_str(parts.front().shape()));
      c += p.cols();
    }
    Node<S>* n = fresh({r, c});
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t w = p.cols();
      for (std::size_t i = 0; i < r; ++i)
        std::copy_n(p.value().data() + i * w, w, n->value.data() + i * c + off);
      off += w;
    }
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (grad_enabled_ && any) {
      n->requires_grad = true;
      auto srcs = std::make_shared<std::vector<Node<S>*>>();
      for (const auto& p : parts) srcs->push_back(p.node());
      n->backward = [n, srcs, r, c] {
        std::size_t off = 0;
        for (Node<S>* p : *srcs) {
          const std::size_t w = p->shape[1];
          if (p->requires_grad) {
            p->ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
              for (std::size_t j = 0; j < w; ++j)
                p->grad[i * w + j] += n->grad[i * c + off + j];
          }
          off += w;
        }
      };
    }
    return Tensor<S>(n);
  }

  // ---- reductions ------------------------------------------------------------

  Tensor<S> sum(Tensor<S> x) {
    Node<S>* n = fresh({1});
    n->value[0] = std::accumulate(x.value().begin(), x.value().end(), S(0));
    if (wants_grad(n, {x})) {
      Node<S>* xn = x.node();
      n->backward = [n, xn] {
        xn->ensure_grad();
        for (std::size_t i = 0; i < xn->size(); ++i) xn->grad[i] += n->grad[0];
      };
    }
    return Tensor<S>(n);
  }

  Tensor<S> mean(Tensor<S> x) { return scale(sum(x), S(1) / S(x.size())); }

  // ---- backward ---------------------------------------------------------------

  // Reverse pass from a scalar loss. One pass per graph: every node is
  // visited exactly once, in reverse execution order.
  void backward(Tensor<S> loss) {
    if (loss.size() != 1)
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (backward_done_)
      throw ContractError("backward: graph already differentiated");
    backward_done_ = true;
    loss.node()->ensure_grad();
    loss.node()->grad[0] = S(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
      Node<S>* n = it->get();
      if (n->requires_grad && n->backward && !n->grad.empty()) n->backward();
    }
  }

  // Adds scale * (leaf gradient) into each referenced parameter's grad.
  void accumulate_param_grads(S scale = S(1)) {
    for (auto& [p, node] : param_nodes_) {
      if (!node->requires_grad || node->grad.empty()) continue;
      for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += scale * node->grad[i];
    }
  }

  // Gradient held by this graph for a parameter (zeros if unused/frozen).
  std::vector<S> param_grad(const Parameter<S>& p) const {
    auto it = param_nodes_.find(const_cast<Parameter<S>*>(&p));
    if (it == param_nodes_.end() || it->second->grad.empty())
      return std::vector<S>(p.size(), S(0));
    return it->second->grad;
  }

private:
  Node<S>* fresh(Shape shape) {
    tape_.push_back(std::make_unique<Node<S>>());
    Node<S>* n = tape_.back().get();
    n->shape = std::move(shape);
    n->value.assign(numel(n->shape), S(0));
    return n;
  }

  bool wants_grad(Node<S>* n, std::initializer_list<Tensor<S>> ins) {
    if (!grad_enabled_) return false;
    bool any = false;
    for (const auto& t : ins) any = any || t.requires_grad();
    n->requires_grad = any;
    return any;
  }

  static void check_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
    if (a.shape() != b.shape())
      throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
  }

  static void require_rank(const char* op, const Tensor<S>& t, std::size_t rank) {
    if (t.shape().size() != rank)
      throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                       shape_str(t.shape()));
  }

  static std::pair<std::size_t, std::size_t> last_axis_dims(const char* op, const Tensor<S>& t) {
    if (t.shape().empty()) throw ShapeError(std::string(op) + ": scalar input");
    const std::size_t c = t.shape().back();
    return {t.size() / c, c};
  }

  static void check_finite(const char* op, const Tensor<S>& t) {
    for (S v : t.value())
      if (!std::isfinite(v))
        throw NumericError(std::string(op) + ": non-finite input");
  }

  // Max-subtracted softmax of in[0..n) into out[0..n).
  static void softmax_row(const S* in, S* out, std::size_t n) {
    const S mx = *std::max_element(in, in + n);
    S sum = S(0);
    for (std::size_t j = 0; j < n; ++j) {
      out[j] = std::exp(in[j] - mx);
      sum += out[j];
    }
    const S inv = S(1) / sum;
    for (std::size_t j = 0; j < n; ++j) out[j] *= inv;
  }

  // C (+)= A[m x k] * B[k x n]
  static void gemm_nn(const S* a, const S* b, S* cmat, std::size_t m, std::size_t k,
                      std::size_t n, bool accumulate) {
    if (!accumulate) std::fill(cmat, cmat + m * n, S(0));
    for (std::size_t i = 0; i < m; ++i) {
      const S* arow = a + i * k;
      S* crow = cmat + i * n;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const S av = arow[kk];
        if (av == S(0)) continue;
        const S* brow = b + kk * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }

  // C (+)= A[m x k] * B[n x k]^T
  static void gemm_nt(const S* a, const S* b, S* cmat, std::size_t m, std::size_t k,
                      std::size_t n, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
      const S* arow = a + i * k;
      S* crow = cmat + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const S* brow = b + j * k;
        S acc = S(0);
        for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
        crow[j] = accumulate ? crow[j] + acc : acc;
      }
    }
  }

  // C (+)= A[k x m]^T * B[k x n]
  static void gemm_tn(const S* a, const S* b, S* cmat, std::size_t m, std::size_t k,
                      std::size_t n, bool accumulate) {
    if (!accumulate) std::fill(cmat, cmat + m * n, S(0));
    for (std::size_t kk = 0; kk < k; ++kk) {
      const S* arow = a + kk * m;
      const S* brow = b + kk * n;
      for (std::size_t i = 0; i < m; ++i) {
        const S av = arow[i];
        if (av == S(0)) continue;
        S* crow = cmat + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }

  bool grad_enabled_;
  bool backward_done_ = false;
  std::vector<std::unique_ptr<Node<S>>> tape_;
  std::unordered_map<Parameter<S>*, Node<S>*> param_nodes_;
};

}  // namespace vistok
