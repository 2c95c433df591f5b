#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "mapet/errors.hpp"
#include "mapet/matrix.hpp"

// Minimal reverse-mode differentiation over dense matrices.
//
// A Tape records every intermediate produced during one forward pass. Nodes are
// appended in evaluation order, which is a topological order, so backward() is
// a single reverse sweep. Leaves created with Tape::parameter() remember the
// index of the parameter they mirror; after backward() their gradients are read
// out with Tape::parameter_grads().

namespace mapet {

using BoolMatrix = Matrix<std::uint8_t>;

template <typename S>
class Tape;

template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  std::size_t id = 0;

  const Matrix<S>& value() const { return tape->value(*this); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

template <typename S>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<S> constant(Matrix<S> v) { return push(std::move(v), false, nullptr); }

  Var<S> parameter(const Matrix<S>& v, std::size_t param_index) {
    auto var = push(v, true, nullptr);
    nodes_[var.id].param = static_cast<long>(param_index);
    return var;
  }

  // Appends a derived node. `requires_grad` should be the OR over its inputs;
  // when false the backward closure is dropped.
  Var<S> push(Matrix<S> v, bool requires_grad, Backward bw) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Var<S>{this, nodes_.size() - 1};
  }

  const Matrix<S>& value(Var<S> v) const { return nodes_[v.id].value; }
  const Matrix<S>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(Var<S> v) const { return nodes_[v.id].requires_grad; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient accumulator of a node, allocated on first touch.
  Matrix<S>& grad(std::size_t id) {
    auto& n = nodes_[id];
    if (!n.grad.same_shape(n.value)) n.grad = Matrix<S>(n.value.rows(), n.value.cols());
    return n.grad;
  }
  Matrix<S>& grad(Var<S> v) { return grad(v.id); }

  void backward(Var<S> out) {
    detail::check_shape(value(out).rows() == 1 && value(out).cols() == 1, "backward: output must be a scalar");
    Matrix<S> seed(1, 1, S(1));
    backward(out, seed);
  }

  void backward(Var<S> out, const Matrix<S>& seed) {
    detail::check_shape(seed.same_shape(value(out)), "backward: seed shape mismatch");
    for (auto& n : nodes_) n.grad = Matrix<S>();
    if (!nodes_[out.id].requires_grad) return;
    grad(out.id) = seed;
    for (std::size_t i = out.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

  // Calls fn(param_index, grad) for every parameter leaf that received a gradient.
  template <typename Fn>
  void parameter_grads(Fn&& fn) const {
    for (const auto& n : nodes_) {
      if (n.param >= 0 && !n.grad.empty()) fn(static_cast<std::size_t>(n.param), n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<S> value;
    Matrix<S> grad;
    Backward backward;
    long param = -1;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

namespace ad {

namespace detail_ad {

template <typename S>
bool any_grad(std::initializer_list<Var<S>> vs) {
  for (auto v : vs)
    if (v.tape->requires_grad(v)) return true;
  return false;
}

template <typename S>
void add_into(Matrix<S>& dst, const Matrix<S>& src) {
  S* d = dst.data();
  const S* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace detail_ad

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  auto& t = *a.tape;
  Matrix<S> out;
  gemm_nn(a.value(), b.value(), out);
  return t.push(std::move(out), detail_ad::any_grad({a, b}), [a, b](Tape<S>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a)) gemm_nt(g, t.value(b), t.grad(a), true);
    if (t.requires_grad(b)) gemm_tn(t.value(a), g, t.grad(b), true);
  });
}

// a * b^T
template <typename S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  auto& t = *a.tape;
  Matrix<S> out;
  gemm_nt(a.value(), b.value(), out);
  return t.push(std::move(out), detail_ad::any_grad({a, b}), [a, b](Tape<S>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a)) gemm_nn(g, t.value(b), t.grad(a), true);
    if (t.requires_grad(b)) gemm_tn(g, t.value(a), t.grad(b), true);
  });
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  auto& t = *a.tape;
  detail::check_shape(a.value().same_shape(b.value()), "add: shape mismatch");
  Matrix<S> out = a.value();
  detail_ad::add_into(out, b.value());
  return t.push(std::move(out), detail_ad::any_grad({a, b}), [a, b](Tape<S>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a)) detail_ad::add_into(t.grad(a), g);
    if (t.requires_grad(b)) detail_ad::add_into(t.grad(b), g);
  });
}

// Adds a 1 x n row to every row of a.
template <typename S>
Var<S> add_row(Var<S> a, Var<S> row) {
  auto& t = *a.tape;
  const auto& r = row.value();
  detail::check_shape(r.rows() == 1 && r.cols() == a.cols(), "add_row: bias shape mismatch");
  Matrix<S> out = a.value();
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += r(0, j);
  return t.push(std::move(out), detail_ad::any_grad({a, row}), [a, row](Tape<S>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a)) detail_ad::add_into(t.grad(a), g);
    if (t.requires_grad(row)) {
      auto& gr = t.grad(row);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gr(0, j) += g(i, j);
    }
  });
}

// Multiplies every row of a elementwise by a 1 x n row (layer scale).
template <typename S>
Var<S> mul_row(Var<S> a, Var<S> row) {
  auto& t = *a.tape;
  const auto& r = row.value();
  detail::check_shape(r.rows() == 1 && r.cols() == a.cols(), "mul_row: scale shape mismatch");
  Matrix<S> out = a.value();
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) *= r(0, j);
  return t.push(std::move(out), detail_ad::any_grad({a, row}), [a, row](Tape<S>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& av = t.value(a);
    const auto& rv = t.value(row);
    if (t.requires_grad(a)) {
      auto& ga = t.grad(a);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) ga(i, j) += g(i, j) * rv(0, j);
    }
    if (t.requires_grad(row)) {
      auto& gr = t.grad(row);
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gr(0, j) += g(i, j) * av(i, j);
    }
  });
}

template <typename S>
Var<S> scale(Var<S> a, S s) {
  auto& t = *a.tape;
  Matrix<S> out = a.value();
  for (auto& v : out.values()) v *= s;
  return t.push(std::move(out), t.requires_grad(a), [a, s](Tape<S>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += s * g.data()[i];
  });
}

// Row-wise layer normalization with affine 1 x n gamma/beta.
template <typename S>
Var<S> layer_norm(Var<S> x, Var<S> gamma, Var<S> beta, S eps = S(1e-6)) {
  auto& t = *x.tape;
  const auto& xv = x.value();
  const std::size_t n = xv.cols();
  detail::check_shape(gamma.value().cols() == n && beta.value().cols() == n, "layer_norm: affine shape mismatch");
  Matrix<S> xhat(xv.rows(), n);
  std::vector<S> inv_std(xv.rows());
  Matrix<S> out(xv.rows(), n);
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    S mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += xv(i, j);
    mean /= S(n);
    S var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (xv(i, j) - mean) * (xv(i, j) - mean);
    var /= S(n);
    inv_std[i] = S(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat(i, j) = (xv(i, j) - mean) * inv_std[i];
      out(i, j) = xhat(i, j) * gamma.value()(0, j) + beta.value()(0, j);
    }
  }
  return t.push(std::move(out), detail_ad::any_grad({x, gamma, beta}),
                [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<S>& t, std::size_t self) {
                  const auto& g = t.grad(self);
                  const auto& gm = t.value(gamma);
                  const std::size_t n = g.cols();
                  if (t.requires_grad(gamma) || t.requires_grad(beta)) {
                    auto* gg = t.requires_grad(gamma) ? &t.grad(gamma) : nullptr;
                    auto* gb = t.requires_grad(beta) ? &t.grad(beta) : nullptr;
                    for (std::size_t i = 0; i < g.rows(); ++i)
                      for (std::size_t j = 0; j < n; ++j) {
                        if (gg) (*gg)(0, j) += g(i, j) * xhat(i, j);
                        if (gb) (*gb)(0, j) += g(i, j);
                      }
                  }
                  if (!t.requires_grad(x)) return;
                  auto& gx = t.grad(x);
                  for (std::size_t i = 0; i < g.rows(); ++i) {
                    S sum_d = 0, sum_dx = 0;
                    for (std::size_t j = 0; j < n; ++j) {
                      const S d = g(i, j) * gm(0, j);
                      sum_d += d;
                      sum_dx += d * xhat(i, j);
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                      const S d = g(i, j) * gm(0, j);
                      gx(i, j) += inv_std[i] * (d - sum_d / S(n) - xhat(i, j) * sum_dx / S(n));
                    }
                  }
                });
}

// Exact (erf) GELU.
template <typename S>
Var<S> gelu(Var<S> x) {
  auto& t = *x.tape;
  Matrix<S> out = x.value();
  for (auto& v : out.values()) v = S(0.5) * v * (S(1) + std::erf(v / std::numbers::sqrt2_v<S>));
  return t.push(std::move(out), t.requires_grad(x), [x](Tape<S>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& xv = t.value(x);
    auto& gx = t.grad(x);
    const S inv_sqrt_2pi = S(1) / std::sqrt(S(2) * std::numbers::pi_v<S>);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const S v = xv.data()[i];
      const S cdf = S(0.5) * (S(1) + std::erf(v / std::numbers::sqrt2_v<S>));
      const S pdf = inv_sqrt_2pi * std::exp(S(-0.5) * v * v);
      gx.data()[i] += g.data()[i] * (cdf + v * pdf);
    }
  });
}

template <typename S>
Var<S> relu(Var<S> x) {
  auto& t = *x.tape;
  Matrix<S> out = x.value();
  for (auto& v : out.values()) v = v > S(0) ? v : S(0);
  return t.push(std::move(out), t.requires_grad(x), [x](Tape<S>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& xv = t.value(x);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv.data()[i] > S(0)) gx.data()[i] += g.data()[i];
  });
}

// Row-wise softmax. With a mask, hidden entries (mask == 0) get probability
// exactly zero and take no part in the max or the normalizer, so whatever they
// hold cannot influence the visible entries. Every row must keep at least one
// visible column.
template <typename S>
Var<S> softmax_rows(Var<S> x, const BoolMatrix* mask = nullptr) {
  auto& t = *x.tape;
  const auto& xv = x.value();
  if (mask) detail::check_shape(mask->rows() == xv.rows() && mask->cols() == xv.cols(), "softmax_rows: mask shape mismatch");
  Matrix<S> out(xv.rows(), xv.cols());
  for (std::size_t i = 0; i < xv.rows(); ++i) {
    S mx = -std::numeric_limits<S>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < xv.cols(); ++j) {
      if (mask && !(*mask)(i, j)) continue;
      mx = any ? std::max(mx, xv(i, j)) : xv(i, j);
      any = true;
    }
    detail::check(any, "softmax_rows: row " + std::to_string(i) + " has no visible column");
    S sum = 0;
    for (std::size_t j = 0; j < xv.cols(); ++j) {
      if (mask && !(*mask)(i, j)) continue;
      out(i, j) = std::exp(xv(i, j) - mx);
      sum += out(i, j);
    }
    for (std::size_t j = 0; j < xv.cols(); ++j) out(i, j) /= sum;
  }
  return t.push(std::move(out), t.requires_grad(x), [x](Tape<S>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& y = t.value(self);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < g.rows(); ++i) {
      S dot = 0;
      for (std::size_t j = 0; j < g.cols(); ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < g.cols(); ++j) gx(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

template <typename S>
Var<S> slice_cols(Var<S> x, std::size_t start, std::size_t len) {
  auto& t = *x.tape;
  const auto& xv = x.value();
  detail::check_shape(start + len <= xv.cols(), "slice_cols: range out of bounds");
  Matrix<S> out(xv.rows(), len);
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < len; ++j) out(i, j) = xv(i, start + j);
  return t.push(std::move(out), t.requires_grad(x), [x, start](Tape<S>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) gx(i, start + j) += g(i, j);
  });
}

template <typename S>
Var<S> concat_cols(std::span<const Var<S>> parts) {
  detail::check(!parts.empty(), "concat_cols: no inputs");
  auto& t = *parts[0].tape;
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  bool req = false;
  for (auto p : parts) {
    detail::check_shape(p.rows() == rows, "concat_cols: row count mismatch");
    cols += p.cols();
    req = req || t.requires_grad(p);
  }
  Matrix<S> out(rows, cols);
  std::size_t off = 0;
  for (auto p : parts) {
    const auto& pv = p.value();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < pv.cols(); ++j) out(i, off + j) = pv(i, j);
    off += pv.cols();
  }
  std::vector<Var<S>> ps(parts.begin(), parts.end());
  return t.push(std::move(out), req, [ps = std::move(ps)](Tape<S>& t, std::size_t self) {
    const auto& g = t.grad(self);
    std::size_t off = 0;
    for (auto p : ps) {
      const std::size_t pc = t.value(p).cols();
      if (t.requires_grad(p)) {
        auto& gp = t.grad(p);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < pc; ++j) gp(i, j) += g(i, off + j);
      }
      off += pc;
    }
  });
}

template <typename S>
Var<S> concat_rows(std::span<const Var<S>> parts) {
  detail::check(!parts.empty(), "concat_rows: no inputs");
  auto& t = *parts[0].tape;
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  bool req = false;
  for (auto p : parts) {
    detail::check_shape(p.cols() == cols, "concat_rows: column count mismatch");
    rows += p.rows();
    req = req || t.requires_grad(p);
  }
  Matrix<S> out(rows, cols);
  std::size_t off = 0;
  for (auto p : parts) {
    std::copy_n(p.value().data(), p.value().size(), out.data() + off * cols);
    off += p.rows();
  }
  std::vector<Var<S>> ps(parts.begin(), parts.end());
  return t.push(std::move(out), req, [ps = std::move(ps)](Tape<S>& t, std::size_t self) {
    const auto& g = t.grad(self);
    std::size_t off = 0;
    for (auto p : ps) {
      const auto& pv = t.value(p);
      if (t.requires_grad(p)) {
        auto& gp = t.grad(p);
        for (std::size_t k = 0; k < pv.size(); ++k) gp.data()[k] += g.data()[off * pv.cols() + k];
      }
      off += pv.rows();
    }
  });
}

template <typename S>
Var<S> gather_rows(Var<S> x, std::vector<std::size_t> index) {
  auto& t = *x.tape;
  Matrix<S> out = mapet::gather_rows(x.value(), std::span<const std::size_t>(index));
  return t.push(std::move(out), t.requires_grad(x), [x, index = std::move(index)](Tape<S>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j) gx(index[i], j) += g(i, j);
  });
}

// Row i of the result is b[i] where pick[i] is set, a[i] otherwise.
template <typename S>
Var<S> where_rows(Var<S> a, Var<S> b, std::vector<std::uint8_t> pick) {
  auto& t = *a.tape;
  detail::check_shape(a.value().same_shape(b.value()) && pick.size() == a.rows(), "where_rows: shape mismatch");
  Matrix<S> out = a.value();
  for (std::size_t i = 0; i < out.rows(); ++i)
    if (pick[i]) std::copy_n(b.value().data() + i * out.cols(), out.cols(), out.data() + i * out.cols());
  return t.push(std::move(out), detail_ad::any_grad({a, b}), [a, b, pick = std::move(pick)](Tape<S>& t, std::size_t self) {
    const auto& g = t.grad(self);
    for (auto [v, want] : {std::pair{a, std::uint8_t{0}}, std::pair{b, std::uint8_t{1}}}) {
      if (!t.requires_grad(v)) continue;
      auto& gv = t.grad(v);
      for (std::size_t i = 0; i < g.rows(); ++i)
        if ((pick[i] != 0) == (want != 0))
          for (std::size_t j = 0; j < g.cols(); ++j) gv(i, j) += g(i, j);
    }
  });
}

// 1 x n mean over rows.
template <typename S>
Var<S> mean_rows(Var<S> x) {
  auto& t = *x.tape;
  const auto& xv = x.value();
  detail::check_shape(xv.rows() > 0, "mean_rows: empty input");
  Matrix<S> out(1, xv.cols());
  for (std::size_t i = 0; i < xv.rows(); ++i)
    for (std::size_t j = 0; j < xv.cols(); ++j) out(0, j) += xv(i, j);
  for (auto& v : out.values()) v /= S(xv.rows());
  return t.push(std::move(out), t.requires_grad(x), [x](Tape<S>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(x);
    const S inv = S(1) / S(gx.rows());
    for (std::size_t i = 0; i < gx.rows(); ++i)
      for (std::size_t j = 0; j < gx.cols(); ++j) gx(i, j) += g(0, j) * inv;
  });
}

// Mean over rows of -sum_k target(i,k) * log softmax(logits)(i,k); the target
// rows are probability distributions (one-hot for hard labels).
template <typename S>
Var<S> cross_entropy(Var<S> logits, const Matrix<S>& target) {
  auto& t = *logits.tape;
  const auto& lv = logits.value();
  detail::check_shape(target.same_shape(lv), "cross_entropy: target shape mismatch");
  detail::check_shape(lv.rows() > 0, "cross_entropy: no targets");
  Matrix<S> prob(lv.rows(), lv.cols());
  S total = 0;
  for (std::size_t i = 0; i < lv.rows(); ++i) {
    S mx = lv(i, 0);
    for (std::size_t j = 1; j < lv.cols(); ++j) mx = std::max(mx, lv(i, j));
    S sum = 0;
    for (std::size_t j = 0; j < lv.cols(); ++j) sum += std::exp(lv(i, j) - mx);
    const S lse = mx + std::log(sum);
    for (std::size_t j = 0; j < lv.cols(); ++j) {
      prob(i, j) = std::exp(lv(i, j) - lse);
      if (target(i, j) != S(0)) total -= target(i, j) * (lv(i, j) - lse);
    }
  }
  const S n = S(lv.rows());
  Matrix<S> out(1, 1, total / n);
  return t.push(std::move(out), t.requires_grad(logits),
                [logits, target, prob = std::move(prob), n](Tape<S>& t, std::size_t self) {
                  const S g = t.grad(self)(0, 0);
                  auto& gl = t.grad(logits);
                  for (std::size_t i = 0; i < gl.rows(); ++i) {
                    S mass = 0;
                    for (std::size_t j = 0; j < gl.cols(); ++j) mass += target(i, j);
                    for (std::size_t j = 0; j < gl.cols(); ++j)
                      gl(i, j) += g * (mass * prob(i, j) - target(i, j)) / n;
                  }
                });
}

template <typename S>
Matrix<S> one_hot(std::span<const std::size_t> ids, std::size_t classes, S smoothing = S(0)) {
  Matrix<S> m(ids.size(), classes, smoothing / S(classes));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    detail::check(ids[i] < classes, "one_hot: id " + std::to_string(ids[i]) + " out of range");
    m(i, ids[i]) += S(1) - smoothing;
  }
  return m;
}

}  // namespace ad
}  // namespace mapet
