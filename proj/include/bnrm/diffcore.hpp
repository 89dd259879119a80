#pragma once

// Minimal dynamic-tape reverse-mode differentiation over dense float64
// tensors. Every primitive allocates a fresh node; the graph lives as long as
// the output tensor that references it and is rebuilt on every forward pass.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include "bnrm/error.hpp"

namespace bnrm::diff {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Accumulates this node's grad into the grads of its parents.
  std::function<void(const Node&)> backward;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> data) {
    return make_leaf(std::move(shape), std::move(data), false);
  }
  static Tensor parameter(Shape shape, std::vector<double> data) {
    return make_leaf(std::move(shape), std::move(data), true);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return make_leaf({}, {v}, requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> data(numel(shape), 0.0);
    return make_leaf(std::move(shape), std::move(data), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rank() const { return node_->shape.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  std::string_view op() const { return node_->op; }

  std::span<const double> data() const { return node_->value; }
  // Leaf mutation is how optimizers and the gradient checker perturb
  // parameters. Mutating an interior node does not re-run its forward pass.
  std::span<double> mutable_data() { return node_->value; }
  double at(std::size_t i) const { return node_->value.at(i); }
  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  const detail::Node* id() const { return node_.get(); }

  // Internal: used by primitives to build graph nodes.
  static Tensor from_node(std::shared_ptr<detail::Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  static Tensor make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
    if (numel(shape) != data.size()) {
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    if (requires_grad) node->grad.assign(node->value.size(), 0.0);
    return from_node(std::move(node));
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline void check_finite(std::string_view op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw DomainError(std::string(op) + ": produced a non-finite value");
    }
  }
}

inline Tensor make_result(std::string_view op, Shape shape, std::vector<double> value,
                          std::vector<Tensor> inputs,
                          std::function<void(const Node&)> backward) {
  check_finite(op, value);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  for (const auto& in : inputs) node->requires_grad = node->requires_grad || in.requires_grad();
  if (node->requires_grad) {
    for (auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor::from_node(std::move(node));
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> ia;
  std::vector<std::size_t> ib;
};

// Numpy-style right-aligned broadcasting.
inline Broadcast broadcast(const Shape& a, const Shape& b, std::string_view op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
  Broadcast bc;
  bc.out.resize(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    if (pa[d] != pb[d] && pa[d] != 1 && pb[d] != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    }
    bc.out[d] = std::max(pa[d], pb[d]);
  }
  std::vector<std::size_t> sa(rank, 0), sb(rank, 0);
  std::size_t ra = 1, rb = 1;
  for (std::size_t d = rank; d-- > 0;) {
    sa[d] = pa[d] == 1 ? 0 : ra;
    sb[d] = pb[d] == 1 ? 0 : rb;
    ra *= pa[d];
    rb *= pb[d];
  }
  const std::size_t n = numel(bc.out);
  bc.ia.resize(n);
  bc.ib.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t i = 0; i < n; ++i) {
    bc.ia[i] = oa;
    bc.ib[i] = ob;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < bc.out[d]) break;
      oa -= sa[d] * idx[d];
      ob -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
  return bc;
}

// f(x, y) forward; da/db(x, y, out) local partials.
template <class F, class DA, class DB>
Tensor binary(std::string_view op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  auto bc = std::make_shared<Broadcast>(broadcast(a.shape(), b.shape(), op));
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(bc->ia.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[bc->ia[i]], bv[bc->ib[i]]);
  Shape shape = bc->out;
  return make_result(op, std::move(shape), std::move(out), {a, b}, [bc, da, db](const Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double g = self.grad[i];
      if (g == 0.0) continue;
      const double x = pa.value[bc->ia[i]];
      const double y = pb.value[bc->ib[i]];
      if (pa.requires_grad) pa.grad[bc->ia[i]] += g * da(x, y, self.value[i]);
      if (pb.requires_grad) pb.grad[bc->ib[i]] += g * db(x, y, self.value[i]);
    }
  });
}

// f(x) forward; d(x, out) local derivative.
template <class F, class D>
Tensor unary(std::string_view op, const Tensor& a, F f, D d) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return make_result(op, a.shape(), std::move(out), {a}, [d](const Node& self) {
    Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      p.grad[i] += self.grad[i] * d(p.value[i], self.value[i]);
    }
  });
}

inline void require_positive(std::string_view op, const Tensor& a) {
  for (double x : a.data()) {
    if (!(x > 0.0)) {
      throw DomainError(std::string(op) + ": argument must be strictly positive, got " +
                        std::to_string(x));
    }
  }
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

// ---- elementwise binary -------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  for (double y : b.data()) {
    if (y == 0.0) throw DomainError("div: division by zero");
  }
  return detail::binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

// ---- elementwise unary --------------------------------------------------

inline Tensor neg(const Tensor& a) {
  return detail::unary(
      "neg", a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double out) { return out; });
}

inline Tensor log(const Tensor& a) {
  detail::require_positive("log", a);
  return detail::unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      "sigmoid", a, detail::stable_sigmoid,
      [](double, double out) { return out * (1.0 - out); });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

// max(x,0) + log1p(exp(-|x|)), overflow-safe for large |x|.
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline Tensor softplus(const Tensor& a) {
  return detail::unary(
      "softplus", a, [](double x) { return softplus(x); },
      [](double x, double) { return detail::stable_sigmoid(x); });
}

inline Tensor lgamma(const Tensor& a) {
  detail::require_positive("lgamma", a);
  return detail::unary(
      "lgamma", a, [](double x) { return std::lgamma(x); },
      [](double x, double) { return boost::math::digamma(x); });
}

inline Tensor digamma(const Tensor& a) {
  detail::require_positive("digamma", a);
  return detail::unary(
      "digamma", a, [](double x) { return boost::math::digamma(x); },
      [](double x, double) { return boost::math::trigamma(x); });
}

/// max(x, floor); the gradient is zero wherever the floor is active.
inline Tensor clamp_min(const Tensor& a, double floor) {
  return detail::unary(
      "clamp_min", a, [floor](double x) { return std::max(x, floor); },
      [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}

// ---- structural ---------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      if (x == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += x * bv[p * n + j];
    }
  }
  return detail::make_result("matmul", {m, n}, std::move(out), {a, b},
                             [m, k, n](const detail::Node& self) {
    detail::Node& pa = *self.parents[0];
    detail::Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += self.grad[i * n + j] * pb.value[p * n + j];
          pa.grad[i * k + p] += s;
        }
    }
    if (pb.requires_grad) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double x = pa.value[i * k + p];
          if (x == 0.0) continue;
          for (std::size_t j = 0; j < n; ++j) pb.grad[p * n + j] += x * self.grad[i * n + j];
        }
    }
  });
}

inline Tensor sum(const Tensor& a) {
  const auto av = a.data();
  double s = 0.0;
  for (double x : av) s += x;
  return detail::make_result("sum", {}, {s}, {a}, [](const detail::Node& self) {
    detail::Node& p = *self.parents[0];
    for (double& g : p.grad) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  const double inv = 1.0 / static_cast<double>(a.size());
  double s = 0.0;
  for (double x : a.data()) s += x;
  return detail::make_result("mean", {}, {s * inv}, {a}, [inv](const detail::Node& self) {
    detail::Node& p = *self.parents[0];
    for (double& g : p.grad) g += self.grad[0] * inv;
  });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(a.shape()));
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  const auto av = a.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return detail::make_result("transpose", {n, m}, std::move(out), {a},
                             [m, n](const detail::Node& self) {
    detail::Node& p = *self.parents[0];
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) p.grad[i * n + j] += self.grad[j * m + i];
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {a},
                             [](const detail::Node& self) {
    detail::Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

/// Rows [begin, end) along the leading dimension.
inline Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() == 0 || begin > end || end > a.shape()[0]) {
    throw ShapeError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of range for " + shape_str(a.shape()));
  }
  const std::size_t stride = a.size() / a.shape()[0];
  Shape shape = a.shape();
  shape[0] = end - begin;
  const auto av = a.data();
  std::vector<double> out(av.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                          av.begin() + static_cast<std::ptrdiff_t>(end * stride));
  const std::size_t offset = begin * stride;
  return detail::make_result("slice_rows", std::move(shape), std::move(out), {a},
                             [offset](const detail::Node& self) {
    detail::Node& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[offset + i] += self.grad[i];
  });
}

// ---- scalar conveniences ------------------------------------------------

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double c) { return add(a, Tensor::scalar(c)); }
inline Tensor operator+(double c, const Tensor& a) { return add(Tensor::scalar(c), a); }
inline Tensor operator-(const Tensor& a, double c) { return sub(a, Tensor::scalar(c)); }
inline Tensor operator-(double c, const Tensor& a) { return sub(Tensor::scalar(c), a); }
inline Tensor operator*(const Tensor& a, double c) { return mul(a, Tensor::scalar(c)); }
inline Tensor operator*(double c, const Tensor& a) { return mul(Tensor::scalar(c), a); }
inline Tensor operator/(const Tensor& a, double c) { return div(a, Tensor::scalar(c)); }
inline Tensor operator/(double c, const Tensor& a) { return div(Tensor::scalar(c), a); }

/// Name-based dispatch over the primitive set, mostly for generic tests and tooling.
inline Tensor apply_primitive(std::string_view name, std::span<const Tensor> in) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      throw ShapeError(std::string(name) + ": expected " + std::to_string(n) + " inputs, got " +
                       std::to_string(in.size()));
    }
  };
  if (name == "add") return need(2), add(in[0], in[1]);
  if (name == "sub") return need(2), sub(in[0], in[1]);
  if (name == "mul") return need(2), mul(in[0], in[1]);
  if (name == "div") return need(2), div(in[0], in[1]);
  if (name == "matmul") return need(2), matmul(in[0], in[1]);
  if (name == "neg") return need(1), neg(in[0]);
  if (name == "exp") return need(1), exp(in[0]);
  if (name == "log") return need(1), log(in[0]);
  if (name == "sigmoid") return need(1), sigmoid(in[0]);
  if (name == "relu") return need(1), relu(in[0]);
  if (name == "softplus") return need(1), softplus(in[0]);
  if (name == "lgamma") return need(1), lgamma(in[0]);
  if (name == "digamma") return need(1), digamma(in[0]);
  if (name == "sum") return need(1), sum(in[0]);
  if (name == "mean") return need(1), mean(in[0]);
  if (name == "transpose") return need(1), transpose(in[0]);
  throw std::invalid_argument("unknown primitive: " + std::string(name));
}

// ---- reverse pass -------------------------------------------------------

/// Populates grad() of every tensor reachable from `output` that requires a
/// gradient. Gradients of reachable nodes are reset first, so calling
/// backward twice does not accumulate. Unreachable parameters are untouched.
inline void backward(const Tensor& output) {
  if (!output.defined() || !output.requires_grad()) {
    throw GraphError("backward: output is detached from every parameter");
  }
  if (output.size() != 1) {
    throw ShapeError("backward: output must be scalar, got shape " + shape_str(output.shape()));
  }
  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(output.node().get(), 0);
  seen.insert(output.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (detail::Node* n : order) n->grad.assign(n->value.size(), 0.0);
  output.node()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

// ---- finite-difference checker ------------------------------------------

struct GradReport {
  std::vector<double> max_rel_error;  // one entry per parameter
  double worst = 0.0;
  bool pass = true;
  double epsilon = 0.0;
  double tolerance = 0.0;
};

/// Compares backward() against central differences for every element of
/// every parameter. `loss_fn` must be deterministic: any sampling noise has
/// to be fixed outside it. Relative error uses max(|a|, |n|, 1e-8).
inline GradReport check_gradients(const std::function<Tensor()>& loss_fn,
                                  std::vector<Tensor> params, double epsilon,
                                  double tolerance) {
  GradReport report;
  report.epsilon = epsilon;
  report.tolerance = tolerance;
  for (auto& p : params) p.zero_grad();
  backward(loss_fn());
  for (auto& p : params) {
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());
    auto values = p.mutable_data();
    double worst = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + epsilon;
      const double up = loss_fn().item();
      values[i] = saved - epsilon;
      const double down = loss_fn().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    report.max_rel_error.push_back(worst);
    report.worst = std::max(report.worst, worst);
  }
  report.pass = report.worst <= tolerance;
  return report;
}

}  // namespace bnrm::diff
