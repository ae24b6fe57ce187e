#pragma once

// Tape-based reverse-mode differentiation over 2-D tensors.
//
// Every op appends a node holding its output value and a closure that, given
// the node's gradient, accumulates into its inputs' gradients. Nodes are
// created in topological order, so backward is a single reverse sweep.
// Parameters enter the tape as leaves that reference (not copy) their value;
// their gradients land on the tape and are folded into Parameter::grad by
// accumulate_param_grads().

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include "genrec/tensor.hpp"

namespace genrec::nn {

template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape; }
};

template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  // In checked mode every op output is scanned for NaN/Inf.
  explicit Tape(bool checked = false) : checked_(checked) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
  }

  // A leaf that receives a gradient but is not a model parameter.
  Var<T> variable(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = true;
    return push(std::move(n));
  }

  // Leaf bound to a parameter. Repeated calls return the same node.
  Var<T> param(const Parameter<T>& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return {this, it->second};
    Node n;
    n.param = &p;
    n.requires_grad = true;
    auto v = push(std::move(n));
    param_nodes_.emplace(&p, v.id);
    return v;
  }

  Var<T> record(const char* op, Tensor<T> value, bool requires_grad, Backward backward) {
    if (checked_ && !value.all_finite()) throw Error(std::string("non-finite output in op ") + op);
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  const Tensor<T>& value(std::size_t id) const {
    const auto& n = nodes_.at(id);
    return n.param ? n.param->value : n.value;
  }

  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  // Gradient buffer of a node, zero-initialized on first use.
  Tensor<T>& grad(std::size_t id) {
    auto& n = nodes_.at(id);
    if (n.grad.shape != value(id).shape || n.grad.data.size() != value(id).size()) n.grad = Tensor<T>(value(id).shape);
    return n.grad;
  }

  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.data.empty(); }

  // Gradient of a parameter leaf, or nullptr if the parameter was not used or
  // received no gradient.
  const Tensor<T>* grad_of(const Parameter<T>& p) const {
    auto it = param_nodes_.find(&p);
    if (it == param_nodes_.end() || !has_grad(it->second)) return nullptr;
    return &nodes_[it->second].grad;
  }

  void backward(Var<T> loss) {
    if (loss.tape != this) throw Error("backward: tensor belongs to a different tape");
    if (loss.id >= nodes_.size()) throw Error("backward: unknown tensor");
    const auto& root = nodes_[loss.id];
    if (!root.requires_grad) {
      throw Error("backward: tensor is not derived from recorded differentiable ops");
    }
    if (value(loss.id).size() != 1) {
      throw ShapeError("backward: loss must be a scalar, got " + shape_str(value(loss.id).shape));
    }
    grad(loss.id).data[0] += T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.backward && has_grad(i)) n.backward(*this, i);
    }
  }

  // Adds tape gradients into Parameter::grad for each parameter used here.
  template <class Params>
  void accumulate_param_grads(Params&& params) const {
    for (Parameter<T>* p : params) {
      if (const auto* g = grad_of(*p)) {
        for (std::size_t k = 0; k < g->size(); ++k) p->grad.data[k] += g->data[k];
      }
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    const Parameter<T>* param = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var<T> push(Node n) {
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::size_t> param_nodes_;
  bool checked_ = false;
};

namespace detail {

template <class T>
Tape<T>& same_tape(const char* op, Var<T> a, Var<T> b) {
  if (a.tape != b.tape || a.tape == nullptr) throw Error(std::string(op) + ": operands from different tapes");
  return *a.tape;
}

inline void require(bool ok, const char* op, const std::string& detail) {
  if (!ok) throw ShapeError(std::string(op) + ": " + detail);
}

template <class T>
bool is_matrix(const Tensor<T>& t) {
  return t.rank() == 2;
}

}  // namespace detail

// [m x k] * [k x n]
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape("matmul", a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  detail::require(detail::is_matrix(A) && detail::is_matrix(B) && A.shape[1] == B.shape[0], "matmul",
                  "shapes " + shape_str(A.shape) + " and " + shape_str(B.shape));
  const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
  Tensor<T> C({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    T* c = C.data.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = A.data[i * k + p];
      const T* brow = B.data.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
    }
  }
  const bool rg = tape.requires_grad(a.id) || tape.requires_grad(b.id);
  return tape.record("matmul", std::move(C), rg, [ai = a.id, bi = b.id, m, k, n](Tape<T>& t, std::size_t self) {
    const auto& G = t.grad(self);
    const auto& A = t.value(ai);
    const auto& B = t.value(bi);
    if (t.requires_grad(ai)) {
      auto& GA = t.grad(ai);
      for (std::size_t i = 0; i < m; ++i) {
        const T* g = G.data.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const T* brow = B.data.data() + p * n;
          T acc = 0;
          for (std::size_t j = 0; j < n; ++j) acc += g[j] * brow[j];
          GA.data[i * k + p] += acc;
        }
      }
    }
    if (t.requires_grad(bi)) {
      auto& GB = t.grad(bi);
      for (std::size_t i = 0; i < m; ++i) {
        const T* g = G.data.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const T av = A.data[i * k + p];
          T* gb = GB.data.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gb[j] += av * g[j];
        }
      }
    }
  });
}

// [m x k] * [n x k]^T
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape("matmul_nt", a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  detail::require(detail::is_matrix(A) && detail::is_matrix(B) && A.shape[1] == B.shape[1], "matmul_nt",
                  "shapes " + shape_str(A.shape) + " and " + shape_str(B.shape));
  const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[0];
  Tensor<T> C({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = A.data.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = B.data.data() + j * k;
      T acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      C.data[i * n + j] = acc;
    }
  }
  const bool rg = tape.requires_grad(a.id) || tape.requires_grad(b.id);
  return tape.record("matmul_nt", std::move(C), rg, [ai = a.id, bi = b.id, m, k, n](Tape<T>& t, std::size_t self) {
    const auto& G = t.grad(self);
    const auto& A = t.value(ai);
    const auto& B = t.value(bi);
    if (t.requires_grad(ai)) {
      auto& GA = t.grad(ai);
      for (std::size_t i = 0; i < m; ++i) {
        T* ga = GA.data.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
          const T g = G.data[i * n + j];
          const T* brow = B.data.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) ga[p] += g * brow[p];
        }
      }
    }
    if (t.requires_grad(bi)) {
      auto& GB = t.grad(bi);
      for (std::size_t i = 0; i < m; ++i) {
        const T* arow = A.data.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
          const T g = G.data[i * n + j];
          T* gb = GB.data.data() + j * k;
          for (std::size_t p = 0; p < k; ++p) gb[p] += g * arow[p];
        }
      }
    }
  });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape("add", a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  detail::require(A.shape == B.shape, "add", "shapes " + shape_str(A.shape) + " and " + shape_str(B.shape));
  Tensor<T> C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C.data[i] += B.data[i];
  const bool rg = tape.requires_grad(a.id) || tape.requires_grad(b.id);
  return tape.record("add", std::move(C), rg, [ai = a.id, bi = b.id](Tape<T>& t, std::size_t self) {
    const auto& G = t.grad(self);
    for (auto id : {ai, bi}) {
      if (!t.requires_grad(id)) continue;
      auto& g = t.grad(id);
      for (std::size_t i = 0; i < G.size(); ++i) g.data[i] += G.data[i];
    }
  });
}

// [m x n] + bias[n], broadcast over rows.
template <class T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
  auto& tape = detail::same_tape("add_bias", a, bias);
  const auto& A = a.value();
  const auto& B = bias.value();
  detail::require(detail::is_matrix(A) && B.rank() == 1 && B.shape[0] == A.shape[1], "add_bias",
                  "shapes " + shape_str(A.shape) + " and " + shape_str(B.shape));
  const std::size_t m = A.shape[0], n = A.shape[1];
  Tensor<T> C = A;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) C.data[i * n + j] += B.data[j];
  const bool rg = tape.requires_grad(a.id) || tape.requires_grad(bias.id);
  return tape.record("add_bias", std::move(C), rg, [ai = a.id, bi = bias.id, m, n](Tape<T>& t, std::size_t self) {
    const auto& G = t.grad(self);
    if (t.requires_grad(ai)) {
      auto& g = t.grad(ai);
      for (std::size_t i = 0; i < G.size(); ++i) g.data[i] += G.data[i];
    }
    if (t.requires_grad(bi)) {
      auto& g = t.grad(bi);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g.data[j] += G.data[i * n + j];
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape("mul", a, b);
  const auto& A = a.value();
  const auto& B = b.value();
  detail::require(A.shape == B.shape, "mul", "shapes " + shape_str(A.shape) + " and " + shape_str(B.shape));
  Tensor<T> C = A;
  for (std::size_t i = 0; i < C.size(); ++i) C.data[i] *= B.data[i];
  const bool rg = tape.requires_grad(a.id) || tape.requires_grad(b.id);
  return tape.record("mul", std::move(C), rg, [ai = a.id, bi = b.id](Tape<T>& t, std::size_t self) {
    const auto& G = t.grad(self);
    if (t.requires_grad(ai)) {
      const auto& B = t.value(bi);
      auto& g = t.grad(ai);
      for (std::size_t i = 0; i < G.size(); ++i) g.data[i] += G.data[i] * B.data[i];
    }
    if (t.requires_grad(bi)) {
      const auto& A = t.value(ai);
      auto& g = t.grad(bi);
      for (std::size_t i = 0; i < G.size(); ++i) g.data[i] += G.data[i] * A.data[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, std::type_identity_t<T> factor) {
  auto& tape = *a.tape;
  Tensor<T> C = a.value();
  for (auto& v : C.data) v *= factor;
  return tape.record("scale", std::move(C), tape.requires_grad(a.id), [ai = a.id, factor](Tape<T>& t, std::size_t self) {
    const auto& G = t.grad(self);
    auto& g = t.grad(ai);
    for (std::size_t i = 0; i < G.size(); ++i) g.data[i] += G.data[i] * factor;
  });
}

// Row-wise softmax restricted to positions where `allowed` is nonzero.
// Disallowed positions get exactly 0; a row with nothing allowed is all 0.
template <class T>
Var<T> masked_softmax(Var<T> a, std::shared_ptr<const std::vector<std::uint8_t>> allowed) {
  auto& tape = *a.tape;
  const auto& A = a.value();
  detail::require(detail::is_matrix(A), "softmax", "expected a matrix, got " + shape_str(A.shape));
  const std::size_t m = A.shape[0], n = A.shape[1];
  detail::require(!allowed || allowed->size() == m * n, "softmax", "mask size does not match " + shape_str(A.shape));
  Tensor<T> Y({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const T* x = A.data.data() + i * n;
    T* y = Y.data.data() + i * n;
    const std::uint8_t* ok = allowed ? allowed->data() + i * n : nullptr;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (!ok || ok[j]) mx = std::max(mx, x[j]);
    if (mx == -std::numeric_limits<T>::infinity()) continue;
    T sum = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (ok && !ok[j]) continue;
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= sum;
  }
  return tape.record("softmax", std::move(Y), tape.requires_grad(a.id), [ai = a.id, m, n](Tape<T>& t, std::size_t self) {
    const auto& G = t.grad(self);
    const auto& Y = t.value(self);
    auto& g = t.grad(ai);
    for (std::size_t i = 0; i < m; ++i) {
      const T* y = Y.data.data() + i * n;
      const T* gy = G.data.data() + i * n;
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) g.data[i * n + j] += y[j] * (gy[j] - dot);
    }
  });
}

template <class T>
Var<T> softmax(Var<T> a) {
  return masked_softmax<T>(a, nullptr);
}

// Row-wise layer normalization with learned gain and bias.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, std::type_identity_t<T> eps = T(1e-5)) {
  auto& tape = detail::same_tape("layer_norm", x, gain);
  detail::same_tape("layer_norm", x, bias);
  const auto& X = x.value();
  const std::size_t n = X.cols();
  detail::require(detail::is_matrix(X) && gain.value().shape == Shape{n} && bias.value().shape == Shape{n},
                  "layer_norm",
                  "shapes " + shape_str(X.shape) + ", " + shape_str(gain.shape()) + ", " + shape_str(bias.shape()));
  const std::size_t m = X.shape[0];
  const auto& Gn = gain.value();
  const auto& Bs = bias.value();
  Tensor<T> Y({m, n});
  auto xhat = std::make_shared<std::vector<T>>(m * n);
  auto rstd = std::make_shared<std::vector<T>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const T* xr = X.data.data() + i * n;
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= T(n);
    const T r = T(1) / std::sqrt(var + eps);
    (*rstd)[i] = r;
    for (std::size_t j = 0; j < n; ++j) {
      const T h = (xr[j] - mean) * r;
      (*xhat)[i * n + j] = h;
      Y.data[i * n + j] = h * Gn.data[j] + Bs.data[j];
    }
  }
  const bool rg = tape.requires_grad(x.id) || tape.requires_grad(gain.id) || tape.requires_grad(bias.id);
  return tape.record("layer_norm", std::move(Y), rg,
                     [xi = x.id, gi = gain.id, bi = bias.id, m, n, xhat, rstd](Tape<T>& t, std::size_t self) {
                       const auto& G = t.grad(self);
                       const auto& Gn = t.value(gi);
                       if (t.requires_grad(gi)) {
                         auto& gg = t.grad(gi);
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) gg.data[j] += G.data[i * n + j] * (*xhat)[i * n + j];
                       }
                       if (t.requires_grad(bi)) {
                         auto& gb = t.grad(bi);
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t j = 0; j < n; ++j) gb.data[j] += G.data[i * n + j];
                       }
                       if (t.requires_grad(xi)) {
                         auto& gx = t.grad(xi);
                         std::vector<T> dh(n);
                         for (std::size_t i = 0; i < m; ++i) {
                           T sum_dh = 0, sum_dh_h = 0;
                           for (std::size_t j = 0; j < n; ++j) {
                             dh[j] = G.data[i * n + j] * Gn.data[j];
                             sum_dh += dh[j];
                             sum_dh_h += dh[j] * (*xhat)[i * n + j];
                           }
                           const T r = (*rstd)[i] / T(n);
                           for (std::size_t j = 0; j < n; ++j) {
                             gx.data[i * n + j] += r * (T(n) * dh[j] - sum_dh - (*xhat)[i * n + j] * sum_dh_h);
                           }
                         }
                       }
                     });
}

// Exact (erf) GELU.
template <class T>
Var<T> gelu(Var<T> a) {
  auto& tape = *a.tape;
  Tensor<T> Y = a.value();
  const T inv_sqrt2 = T(0.70710678118654752440);
  for (auto& v : Y.data) v = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  return tape.record("gelu", std::move(Y), tape.requires_grad(a.id), [ai = a.id, inv_sqrt2](Tape<T>& t, std::size_t self) {
    const auto& G = t.grad(self);
    const auto& X = t.value(ai);
    auto& g = t.grad(ai);
    const T inv_sqrt2pi = T(0.39894228040143267794);
    for (std::size_t i = 0; i < G.size(); ++i) {
      const T x = X.data[i];
      const T d = T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(T(-0.5) * x * x);
      g.data[i] += G.data[i] * d;
    }
  });
}

// Rows of `table` selected by `ids`; a negative id yields a zero row.
template <class T>
Var<T> embedding(Var<T> table, std::vector<std::int64_t> ids) {
  auto& tape = *table.tape;
  const auto& W = table.value();
  detail::require(detail::is_matrix(W), "embedding", "table must be a matrix, got " + shape_str(W.shape));
  const std::size_t rows = W.shape[0], d = W.shape[1];
  Tensor<T> Y({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0) continue;
    if (std::size_t(ids[i]) >= rows) {
      throw Error("embedding: id " + std::to_string(ids[i]) + " out of range for table with " + std::to_string(rows) +
                  " rows");
    }
    std::copy_n(W.data.data() + std::size_t(ids[i]) * d, d, Y.data.data() + i * d);
  }
  return tape.record("embedding", std::move(Y), tape.requires_grad(table.id),
                     [ti = table.id, ids = std::move(ids), d](Tape<T>& t, std::size_t self) {
                       const auto& G = t.grad(self);
                       auto& g = t.grad(ti);
                       for (std::size_t i = 0; i < ids.size(); ++i) {
                         if (ids[i] < 0) continue;
                         T* dst = g.data.data() + std::size_t(ids[i]) * d;
                         for (std::size_t j = 0; j < d; ++j) dst[j] += G.data[i * d + j];
                       }
                     });
}

// Concatenation along columns of matrices with equal row counts.
template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  detail::require(!parts.empty(), "concat", "no inputs");
  auto& tape = *parts[0].tape;
  const std::size_t m = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::same_tape("concat", parts[0], p);
    detail::require(detail::is_matrix(p.value()) && p.value().shape[0] == m, "concat",
                    "part shape " + shape_str(p.shape()) + " vs rows " + std::to_string(m));
    widths.push_back(p.value().shape[1]);
    total += widths.back();
    rg = rg || tape.requires_grad(p.id);
  }
  Tensor<T> Y({m, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& P = parts[k].value();
    for (std::size_t i = 0; i < m; ++i) std::copy_n(P.data.data() + i * widths[k], widths[k], Y.data.data() + i * total + off);
    off += widths[k];
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id);
  return tape.record("concat", std::move(Y), rg, [ids, widths, m, total](Tape<T>& t, std::size_t self) {
    const auto& G = t.grad(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        auto& g = t.grad(ids[k]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < widths[k]; ++j) g.data[i * widths[k] + j] += G.data[i * total + off + j];
      }
      off += widths[k];
    }
  });
}

// Columns [begin, end) of a matrix.
template <class T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end) {
  auto& tape = *a.tape;
  const auto& A = a.value();
  detail::require(detail::is_matrix(A) && begin < end && end <= A.shape[1], "slice",
                  "columns [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_str(A.shape));
  const std::size_t m = A.shape[0], n = A.shape[1], w = end - begin;
  Tensor<T> Y({m, w});
  for (std::size_t i = 0; i < m; ++i) std::copy_n(A.data.data() + i * n + begin, w, Y.data.data() + i * w);
  return tape.record("slice", std::move(Y), tape.requires_grad(a.id), [ai = a.id, m, n, w, begin](Tape<T>& t, std::size_t self) {
    const auto& G = t.grad(self);
    auto& g = t.grad(ai);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) g.data[i * n + begin + j] += G.data[i * w + j];
  });
}

// Rows [begin, end) of a matrix.
template <class T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t end) {
  auto& tape = *a.tape;
  const auto& A = a.value();
  detail::require(detail::is_matrix(A) && begin < end && end <= A.shape[0], "slice_rows",
                  "rows [" + std::to_string(begin) + "," + std::to_string(end) + ") of " + shape_str(A.shape));
  const std::size_t n = A.shape[1];
  Tensor<T> Y({end - begin, n});
  std::copy(A.data.begin() + std::ptrdiff_t(begin * n), A.data.begin() + std::ptrdiff_t(end * n), Y.data.begin());
  return tape.record("slice_rows", std::move(Y), tape.requires_grad(a.id), [ai = a.id, begin, n](Tape<T>& t, std::size_t self) {
    const auto& G = t.grad(self);
    auto& g = t.grad(ai);
    for (std::size_t k = 0; k < G.size(); ++k) g.data[begin * n + k] += G.data[k];
  });
}

template <class T>
Var<T> sum(Var<T> a) {
  auto& tape = *a.tape;
  double acc = 0;
  for (T v : a.value().data) acc += double(v);
  return tape.record("sum", Tensor<T>::scalar(T(acc)), tape.requires_grad(a.id), [ai = a.id](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self).data[0];
    auto& ga = t.grad(ai);
    for (auto& v : ga.data) v += g;
  });
}

// Mean over rows whose target is not `ignore_index` of -log softmax(logits)[target].
template <class T>
Var<T> cross_entropy(Var<T> logits, std::vector<std::int64_t> targets, std::int64_t ignore_index = -100) {
  auto& tape = *logits.tape;
  const auto& L = logits.value();
  detail::require(detail::is_matrix(L) && L.shape[0] == targets.size(), "cross_entropy",
                  "logits " + shape_str(L.shape) + " vs " + std::to_string(targets.size()) + " targets");
  const std::size_t m = L.shape[0], v = L.shape[1];
  auto probs = std::make_shared<std::vector<T>>(m * v, T(0));
  double total = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] == ignore_index) continue;
    if (targets[i] < 0 || std::size_t(targets[i]) >= v) {
      throw Error("cross_entropy: target " + std::to_string(targets[i]) + " out of range");
    }
    const T* x = L.data.data() + i * v;
    const double mx = double(*std::max_element(x, x + v));
    double z = 0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(double(x[j]) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < v; ++j) (*probs)[i * v + j] = T(std::exp(double(x[j]) - lse));
    total += lse - double(x[std::size_t(targets[i])]);
    ++count;
  }
  if (count == 0) throw Error("cross_entropy: every target is ignored");
  const T loss = T(total / double(count));
  return tape.record("cross_entropy", Tensor<T>::scalar(loss), tape.requires_grad(logits.id),
                     [li = logits.id, targets = std::move(targets), probs, m, v, count, ignore_index](Tape<T>& t,
                                                                                                     std::size_t self) {
                       const T g = t.grad(self).data[0] / T(count);
                       auto& gl = t.grad(li);
                       for (std::size_t i = 0; i < m; ++i) {
                         if (targets[i] == ignore_index) continue;
                         for (std::size_t j = 0; j < v; ++j) gl.data[i * v + j] += g * (*probs)[i * v + j];
                         gl.data[i * v + std::size_t(targets[i])] -= g;
                       }
                     });
}

// Inverted dropout. `rate` 0 returns the input unchanged.
template <class T, class Rng>
Var<T> dropout(Var<T> a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw Error("dropout: rate must be < 1");
  const auto& A = a.value();
  Tensor<T> mask(A.shape);
  std::bernoulli_distribution keep(1.0 - rate);
  const T s = T(1.0 / (1.0 - rate));
  for (auto& v : mask.data) v = keep(rng) ? s : T(0);
  return mul(a, a.tape->constant(std::move(mask)));
}

}  // namespace genrec::nn
