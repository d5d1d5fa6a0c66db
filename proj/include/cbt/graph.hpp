#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "cbt/errors.hpp"
#include "cbt/tensor.hpp"

namespace cbt {

template <std::floating_point T>
class Graph;

// Handle to a node in a Graph. Cheap to copy; only valid while the graph lives.
template <std::floating_point T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

template <std::floating_point T>
class Gradients {
 public:
  Gradients() = default;
  Gradients(const Graph<T>* graph, std::vector<Tensor<T>> grads)
      : graph_(graph), grads_(std::move(grads)) {}

  bool has(Var<T> v) const { return v.id < grads_.size() && !grads_[v.id].empty(); }

  // Gradient of the loss with respect to `v`; zeros when nothing flowed there.
  Tensor<T> of(Var<T> v) const {
    if (has(v)) return grads_[v.id];
    return Tensor<T>(graph_->value(v.id).shape(), T(0));
  }

  const Tensor<T>* find(Var<T> v) const { return has(v) ? &grads_[v.id] : nullptr; }

 private:
  const Graph<T>* graph_ = nullptr;
  std::vector<Tensor<T>> grads_;
};

template <std::floating_point T>
class BackwardContext {
 public:
  BackwardContext(const Graph<T>& graph, std::vector<Tensor<T>>& grads, std::size_t node)
      : graph_(graph), grads_(grads), node_(node) {}

  const Tensor<T>& out_grad() const { return grads_[node_]; }
  const Tensor<T>& out_value() const { return graph_.value(node_); }
  const Tensor<T>& value(std::size_t id) const { return graph_.value(id); }

  // Accumulator for an input's gradient, or nullptr if that input does not
  // need one. Fan-out accumulates by summation.
  Tensor<T>* acc(std::size_t id) {
    if (!graph_.requires_grad(id)) return nullptr;
    if (grads_[id].empty()) grads_[id] = Tensor<T>(graph_.value(id).shape(), T(0));
    return &grads_[id];
  }

 private:
  const Graph<T>& graph_;
  std::vector<Tensor<T>>& grads_;
  std::size_t node_;
};

// Tape of recorded operations. Nodes are appended in evaluation order, so
// node ids are a topological order and backward is a reverse sweep.
template <std::floating_point T>
class Graph {
 public:
  using BackwardFn = std::function<void(BackwardContext<T>&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), {}, false, nullptr); }

  Var<T> leaf(Tensor<T> value, bool trainable) {
    return push(std::move(value), {}, trainable, nullptr);
  }

  Var<T> record(Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn) {
    bool needs = false;
    for (std::size_t in : inputs) needs = needs || nodes_[in].requires_grad;
    if (!needs) fn = nullptr;
    return push(std::move(value), std::move(inputs), needs, std::move(fn));
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Pure: every call starts from zero gradients and leaves the tape as is.
  Gradients<T> backward(Var<T> loss) const {
    if (loss.graph != this) throw ShapeError("backward: loss belongs to another graph");
    if (value(loss.id).size() != 1) {
      throw ShapeError(detail::concat("backward: loss must be scalar, got shape ",
                                      detail::shape_string(value(loss.id).shape())));
    }
    std::vector<Tensor<T>> grads(nodes_.size());
    if (nodes_[loss.id].requires_grad) {
      grads[loss.id] = Tensor<T>(value(loss.id).shape(), T(1));
    }
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      const Node& node = nodes_[i];
      if (!node.backward || grads[i].empty()) continue;
      BackwardContext<T> ctx(*this, grads, i);
      node.backward(ctx);
      // Interior gradients are no longer needed once propagated.
      if (!node.inputs.empty() && i != loss.id) grads[i] = Tensor<T>();
    }
    return Gradients<T>(this, std::move(grads));
  }

 private:
  struct Node {
    Tensor<T> value;
    std::vector<std::size_t> inputs;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var<T> push(Tensor<T> value, std::vector<std::size_t> inputs, bool needs, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), std::move(inputs), needs, std::move(fn)});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Dense kernels. All row-major, accumulate into `c`.

namespace kernel {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;

// c[m x n] += a[m x k] * b[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  Map<T>(c, m, n).noalias() += MapC<T>(a, m, k) * MapC<T>(b, k, n);
}

// c[m x n] += a[m x k] * b[n x k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  Map<T>(c, m, n).noalias() += MapC<T>(a, m, k) * MapC<T>(b, n, k).transpose();
}

// c[m x n] += a[k x m]^T * b[k x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t k, std::size_t m, std::size_t n) {
  Map<T>(c, m, n).noalias() += MapC<T>(a, k, m).transpose() * MapC<T>(b, k, n);
}

}  // namespace kernel

// ---------------------------------------------------------------------------
// Operations. Shapes are checked eagerly; nothing broadcasts except add_row.

namespace detail {

template <std::floating_point T>
Graph<T>& graph_of(Var<T> a) {
  if (!a.graph) throw ShapeError("operation on an unbound Var");
  return *a.graph;
}

template <std::floating_point T>
void require_matrix(Var<T> a, const char* op) {
  if (a.value().rank() != 2) {
    throw ShapeError(concat(op, ": expected a matrix, got shape ", shape_string(a.shape())));
  }
}

template <std::floating_point T>
void require_same(Var<T> a, Var<T> b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(concat(op, ": shape mismatch ", shape_string(a.shape()), " vs ",
                            shape_string(b.shape())));
  }
}

}  // namespace detail

template <std::floating_point T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError(detail::concat("matmul: inner extents differ, ",
                                    detail::shape_string(a.shape()), " x ",
                                    detail::shape_string(b.shape())));
  }
  Tensor<T> out(Shape{m, n});
  kernel::gemm_nn(a.value().data().data(), b.value().data().data(), out.data().data(), m, k, n);
  const std::size_t ia = a.id, ib = b.id;
  return detail::graph_of(a).record(std::move(out), {ia, ib}, [=](BackwardContext<T>& ctx) {
    const T* g = ctx.out_grad().data().data();
    if (auto* da = ctx.acc(ia)) {
      kernel::gemm_nt(g, ctx.value(ib).data().data(), da->data().data(), m, n, k);
    }
    if (auto* db = ctx.acc(ib)) {
      kernel::gemm_tn(ctx.value(ia).data().data(), g, db->data().data(), m, k, n);
    }
  });
}

// a[m x k] * b[n x k]^T
template <std::floating_point T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw ShapeError(detail::concat("matmul_nt: inner extents differ, ",
                                    detail::shape_string(a.shape()), " x ",
                                    detail::shape_string(b.shape()), "^T"));
  }
  Tensor<T> out(Shape{m, n});
  kernel::gemm_nt(a.value().data().data(), b.value().data().data(), out.data().data(), m, k, n);
  const std::size_t ia = a.id, ib = b.id;
  return detail::graph_of(a).record(std::move(out), {ia, ib}, [=](BackwardContext<T>& ctx) {
    const T* g = ctx.out_grad().data().data();
    if (auto* da = ctx.acc(ia)) {
      kernel::gemm_nn(g, ctx.value(ib).data().data(), da->data().data(), m, n, k);
    }
    if (auto* db = ctx.acc(ib)) {
      kernel::gemm_tn(g, ctx.value(ia).data().data(), db->data().data(), m, n, k);
    }
  });
}

template <std::floating_point T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same(a, b, "add");
  Tensor<T> out = a.value();
  out += b.value();
  const std::size_t ia = a.id, ib = b.id;
  return detail::graph_of(a).record(std::move(out), {ia, ib}, [=](BackwardContext<T>& ctx) {
    if (auto* da = ctx.acc(ia)) *da += ctx.out_grad();
    if (auto* db = ctx.acc(ib)) *db += ctx.out_grad();
  });
}

template <std::floating_point T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same(a, b, "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  const std::size_t ia = a.id, ib = b.id;
  return detail::graph_of(a).record(std::move(out), {ia, ib}, [=](BackwardContext<T>& ctx) {
    const auto& g = ctx.out_grad();
    if (auto* da = ctx.acc(ia)) *da += g;
    if (auto* db = ctx.acc(ib)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] -= g[i];
    }
  });
}

// Element-wise product.
template <std::floating_point T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same(a, b, "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id, ib = b.id;
  return detail::graph_of(a).record(std::move(out), {ia, ib}, [=](BackwardContext<T>& ctx) {
    const auto& g = ctx.out_grad();
    if (auto* da = ctx.acc(ia)) {
      const auto& bv = ctx.value(ib);
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * bv[i];
    }
    if (auto* db = ctx.acc(ib)) {
      const auto& av = ctx.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * av[i];
    }
  });
}

template <std::floating_point T>
Var<T> scale(Var<T> a, T c) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= c;
  const std::size_t ia = a.id;
  return detail::graph_of(a).record(std::move(out), {ia}, [=](BackwardContext<T>& ctx) {
    const auto& g = ctx.out_grad();
    if (auto* da = ctx.acc(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += c * g[i];
    }
  });
}

// a[m x n] + bias[n] on every row. The only broadcasting operation.
template <std::floating_point T>
Var<T> add_row(Var<T> a, Var<T> bias) {
  detail::require_matrix(a, "add_row");
  const std::size_t m = a.rows(), n = a.cols();
  if (bias.value().size() != n) {
    throw ShapeError(detail::concat("add_row: bias ", detail::shape_string(bias.shape()),
                                    " does not match rows of ",
                                    detail::shape_string(a.shape())));
  }
  Tensor<T> out = a.value();
  const auto& b = bias.value();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(i, j) += b[j];
  const std::size_t ia = a.id, ib = bias.id;
  return detail::graph_of(a).record(std::move(out), {ia, ib}, [=](BackwardContext<T>& ctx) {
    const auto& g = ctx.out_grad();
    if (auto* da = ctx.acc(ia)) *da += g;
    if (auto* db = ctx.acc(ib)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*db)[j] += g(i, j);
    }
  });
}

template <std::floating_point T>
Var<T> reshape(Var<T> a, Shape shape) {
  if (shape_size(shape) != a.value().size()) {
    throw ShapeError(detail::concat("reshape: ", detail::shape_string(a.shape()), " -> ",
                                    detail::shape_string(shape)));
  }
  Tensor<T> out(std::move(shape), a.value().values());
  const std::size_t ia = a.id;
  return detail::graph_of(a).record(std::move(out), {ia}, [=](BackwardContext<T>& ctx) {
    const auto& g = ctx.out_grad();
    if (auto* da = ctx.acc(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
    }
  });
}

namespace detail {

template <typename T>
constexpr T gelu_c = T(0.7978845608028654);  // sqrt(2/pi)

template <typename T>
T gelu_value(T x) {
  const T u = gelu_c<T> * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_grad(T x) {
  const T u = gelu_c<T> * (x + T(0.044715) * x * x * x);
  const T t = std::tanh(u);
  const T du = gelu_c<T> * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

}  // namespace detail

// GELU, tanh approximation.
template <std::floating_point T>
Var<T> gelu(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = detail::gelu_value(v);
  const std::size_t ia = a.id;
  return detail::graph_of(a).record(std::move(out), {ia}, [=](BackwardContext<T>& ctx) {
    const auto& g = ctx.out_grad();
    if (auto* da = ctx.acc(ia)) {
      const auto& x = ctx.value(ia);
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * detail::gelu_grad(x[i]);
    }
  });
}

template <std::floating_point T>
Var<T> tanh(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = std::tanh(v);
  const std::size_t ia = a.id;
  return detail::graph_of(a).record(std::move(out), {ia}, [=](BackwardContext<T>& ctx) {
    const auto& g = ctx.out_grad();
    const auto& y = ctx.out_value();
    if (auto* da = ctx.acc(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * (T(1) - y[i] * y[i]);
    }
  });
}

// Row-wise softmax restricted to the columns where `allowed` is nonzero;
// excluded columns get probability exactly 0. An empty `allowed` admits all.
template <std::floating_point T>
Var<T> masked_row_softmax(Var<T> a, std::span<const std::uint8_t> allowed) {
  detail::require_matrix(a, "row_softmax");
  const std::size_t m = a.rows(), n = a.cols();
  if (!allowed.empty() && allowed.size() != n) {
    throw ShapeError(detail::concat("row_softmax: mask length ", allowed.size(),
                                    " does not match ", n, " columns"));
  }
  std::vector<std::uint8_t> keep(allowed.begin(), allowed.end());
  if (keep.empty()) keep.assign(n, 1);
  if (std::all_of(keep.begin(), keep.end(), [](std::uint8_t k) { return k == 0; })) {
    throw ShapeError("row_softmax: every column is masked");
  }
  Tensor<T> out(Shape{m, n});
  const auto& x = a.value();
  for (std::size_t i = 0; i < m; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (keep[j]) mx = std::max(mx, x(i, j));
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const T e = keep[j] ? std::exp(x(i, j) - mx) : T(0);
      out(i, j) = e;
      s += e;
    }
    for (std::size_t j = 0; j < n; ++j) out(i, j) /= s;
  }
  const std::size_t ia = a.id;
  return detail::graph_of(a).record(std::move(out), {ia}, [=](BackwardContext<T>& ctx) {
    auto* da = ctx.acc(ia);
    if (!da) return;
    const auto& g = ctx.out_grad();
    const auto& y = ctx.out_value();
    for (std::size_t i = 0; i < m; ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < n; ++j) (*da)(i, j) += y(i, j) * (g(i, j) - dot);
    }
  });
}

template <std::floating_point T>
Var<T> row_softmax(Var<T> a) {
  return masked_row_softmax(a, std::span<const std::uint8_t>{});
}

// Per-row normalisation to zero mean / unit variance, then gain and bias.
template <std::floating_point T>
Var<T> layer_norm(Var<T> a, Var<T> gain, Var<T> bias, T eps) {
  detail::require_matrix(a, "layer_norm");
  const std::size_t m = a.rows(), d = a.cols();
  if (gain.value().size() != d || bias.value().size() != d) {
    throw ShapeError(detail::concat("layer_norm: gain/bias ", detail::shape_string(gain.shape()),
                                    "/", detail::shape_string(bias.shape()),
                                    " do not match trailing extent of ",
                                    detail::shape_string(a.shape())));
  }
  const auto& x = a.value();
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  Tensor<T> out(Shape{m, d});
  auto xhat = std::make_shared<std::vector<T>>(m * d);
  auto rstd = std::make_shared<std::vector<T>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += x(i, j);
    mean /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= T(d);
    const T r = T(1) / std::sqrt(var + eps);
    (*rstd)[i] = r;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (x(i, j) - mean) * r;
      (*xhat)[i * d + j] = h;
      out(i, j) = h * gv[j] + bv[j];
    }
  }
  const std::size_t ia = a.id, ig = gain.id, ib = bias.id;
  return detail::graph_of(a).record(std::move(out), {ia, ig, ib}, [=](BackwardContext<T>& ctx) {
    const auto& g = ctx.out_grad();
    const auto& gv2 = ctx.value(ig);
    if (auto* dg = ctx.acc(ig)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) (*dg)[j] += g(i, j) * (*xhat)[i * d + j];
    }
    if (auto* db = ctx.acc(ib)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) (*db)[j] += g(i, j);
    }
    if (auto* da = ctx.acc(ia)) {
      for (std::size_t i = 0; i < m; ++i) {
        T mean_dh = 0, mean_dh_h = 0;
        for (std::size_t j = 0; j < d; ++j) {
          const T dh = g(i, j) * gv2[j];
          mean_dh += dh;
          mean_dh_h += dh * (*xhat)[i * d + j];
        }
        mean_dh /= T(d);
        mean_dh_h /= T(d);
        for (std::size_t j = 0; j < d; ++j) {
          const T dh = g(i, j) * gv2[j];
          (*da)(i, j) += (*rstd)[i] * (dh - mean_dh - (*xhat)[i * d + j] * mean_dh_h);
        }
      }
    }
  });
}

// Each row scaled to unit L2 norm (smoothed by eps under the square root).
template <std::floating_point T>
Var<T> row_l2_normalize(Var<T> a, T eps = T(1e-12)) {
  detail::require_matrix(a, "row_l2_normalize");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor<T> out = a.value();
  auto norms = std::make_shared<std::vector<T>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) s += out(i, j) * out(i, j);
    (*norms)[i] = std::sqrt(s + eps);
    for (std::size_t j = 0; j < n; ++j) out(i, j) /= (*norms)[i];
  }
  const std::size_t ia = a.id;
  return detail::graph_of(a).record(std::move(out), {ia}, [=](BackwardContext<T>& ctx) {
    auto* da = ctx.acc(ia);
    if (!da) return;
    const auto& g = ctx.out_grad();
    const auto& y = ctx.out_value();
    for (std::size_t i = 0; i < m; ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += g(i, j) * y(i, j);
      for (std::size_t j = 0; j < n; ++j) (*da)(i, j) += (g(i, j) - y(i, j) * dot) / (*norms)[i];
    }
  });
}

// Rows of `a` at `index`, in order; repeats allowed.
template <std::floating_point T>
Var<T> gather_rows(Var<T> a, std::vector<std::size_t> index) {
  detail::require_matrix(a, "gather_rows");
  const std::size_t n = a.cols();
  if (index.empty()) throw ShapeError("gather_rows: empty index list");
  Tensor<T> out(Shape{index.size(), n});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= a.rows()) {
      throw ShapeError(detail::concat("gather_rows: row ", index[r], " out of range for ",
                                      detail::shape_string(a.shape())));
    }
    std::copy_n(a.value().row(index[r]).begin(), n, out.row(r).begin());
  }
  const std::size_t ia = a.id;
  return detail::graph_of(a).record(
      std::move(out), {ia}, [=, index = std::move(index)](BackwardContext<T>& ctx) {
        auto* da = ctx.acc(ia);
        if (!da) return;
        const auto& g = ctx.out_grad();
        for (std::size_t r = 0; r < index.size(); ++r)
          for (std::size_t j = 0; j < n; ++j) (*da)(index[r], j) += g(r, j);
      });
}

template <std::floating_point T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  std::vector<std::size_t> ids, offsets;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_rows");
    if (p.cols() != n) {
      throw ShapeError(detail::concat("concat_rows: column mismatch ",
                                      detail::shape_string(parts[0].shape()), " vs ",
                                      detail::shape_string(p.shape())));
    }
    ids.push_back(p.id);
    offsets.push_back(m);
    m += p.rows();
  }
  Tensor<T> out(Shape{m, n});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].value().data();
    std::copy(src.begin(), src.end(), out.data().begin() + offsets[k] * n);
  }
  return detail::graph_of(parts[0]).record(
      std::move(out), ids, [=](BackwardContext<T>& ctx) {
        const auto g = ctx.out_grad().data();
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (auto* dp = ctx.acc(ids[k])) {
            for (std::size_t i = 0; i < dp->size(); ++i) (*dp)[i] += g[offsets[k] * n + i];
          }
        }
      });
}

template <std::floating_point T>
Var<T> concat_rows(std::initializer_list<Var<T>> parts) {
  return concat_rows(std::span<const Var<T>>(parts.begin(), parts.size()));
}

// Columns [begin, begin + width) of a matrix.
template <std::floating_point T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t width) {
  detail::require_matrix(a, "slice_cols");
  const std::size_t m = a.rows(), n = a.cols();
  if (width == 0 || begin + width > n) {
    throw ShapeError(detail::concat("slice_cols: [", begin, ", ", begin + width,
                                    ") outside ", detail::shape_string(a.shape())));
  }
  Tensor<T> out(Shape{m, width});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < width; ++j) out(i, j) = a.value()(i, begin + j);
  const std::size_t ia = a.id;
  return detail::graph_of(a).record(std::move(out), {ia}, [=](BackwardContext<T>& ctx) {
    auto* da = ctx.acc(ia);
    if (!da) return;
    const auto& g = ctx.out_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < width; ++j) (*da)(i, begin + j) += g(i, j);
  });
}

template <std::floating_point T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  std::vector<std::size_t> ids, offsets, widths;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_cols");
    if (p.rows() != m) {
      throw ShapeError(detail::concat("concat_cols: row mismatch ",
                                      detail::shape_string(parts[0].shape()), " vs ",
                                      detail::shape_string(p.shape())));
    }
    ids.push_back(p.id);
    offsets.push_back(n);
    widths.push_back(p.cols());
    n += p.cols();
  }
  Tensor<T> out(Shape{m, n});
  for (std::size_t k = 0; k < parts.size(); ++k)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out(i, offsets[k] + j) = parts[k].value()(i, j);
  return detail::graph_of(parts[0]).record(
      std::move(out), ids, [=](BackwardContext<T>& ctx) {
        const auto& g = ctx.out_grad();
        for (std::size_t k = 0; k < ids.size(); ++k) {
          if (auto* dp = ctx.acc(ids[k])) {
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < widths[k]; ++j) (*dp)(i, j) += g(i, offsets[k] + j);
          }
        }
      });
}

template <std::floating_point T>
Var<T> concat_cols(std::initializer_list<Var<T>> parts) {
  return concat_cols(std::span<const Var<T>>(parts.begin(), parts.size()));
}

// Zeroes the rows where `keep` is 0.
template <std::floating_point T>
Var<T> row_mask(Var<T> a, std::span<const std::uint8_t> keep) {
  detail::require_matrix(a, "row_mask");
  const std::size_t m = a.rows(), n = a.cols();
  if (keep.size() != m) {
    throw ShapeError(detail::concat("row_mask: mask length ", keep.size(), " vs ", m, " rows"));
  }
  Tensor<T> out = a.value();
  std::vector<std::uint8_t> k(keep.begin(), keep.end());
  for (std::size_t i = 0; i < m; ++i)
    if (!k[i]) std::fill(out.row(i).begin(), out.row(i).end(), T(0));
  const std::size_t ia = a.id;
  return detail::graph_of(a).record(
      std::move(out), {ia}, [=, k = std::move(k)](BackwardContext<T>& ctx) {
        auto* da = ctx.acc(ia);
        if (!da) return;
        const auto& g = ctx.out_grad();
        for (std::size_t i = 0; i < m; ++i)
          if (k[i])
            for (std::size_t j = 0; j < n; ++j) (*da)(i, j) += g(i, j);
      });
}

// Rows listed in `index` replaced by `vec`; the replaced rows pass no
// gradient back into `a`.
template <std::floating_point T>
Var<T> replace_rows(Var<T> a, std::span<const std::size_t> index, Var<T> vec) {
  detail::require_matrix(a, "replace_rows");
  const std::size_t m = a.rows(), n = a.cols();
  if (vec.value().size() != n) {
    throw ShapeError(detail::concat("replace_rows: vector ", detail::shape_string(vec.shape()),
                                    " does not match rows of ", detail::shape_string(a.shape())));
  }
  std::vector<std::uint8_t> replaced(m, 0);
  for (std::size_t r : index) {
    if (r >= m) throw ShapeError(detail::concat("replace_rows: row ", r, " out of range"));
    replaced[r] = 1;
  }
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < m; ++i)
    if (replaced[i]) std::copy_n(vec.value().data().begin(), n, out.row(i).begin());
  const std::size_t ia = a.id, iv = vec.id;
  return detail::graph_of(a).record(
      std::move(out), {ia, iv}, [=, replaced = std::move(replaced)](BackwardContext<T>& ctx) {
        const auto& g = ctx.out_grad();
        auto* da = ctx.acc(ia);
        auto* dv = ctx.acc(iv);
        for (std::size_t i = 0; i < m; ++i) {
          if (replaced[i]) {
            if (dv)
              for (std::size_t j = 0; j < n; ++j) (*dv)[j] += g(i, j);
          } else if (da) {
            for (std::size_t j = 0; j < n; ++j) (*da)(i, j) += g(i, j);
          }
        }
      });
}

template <std::floating_point T>
Var<T> sum(Var<T> a) {
  T s = 0;
  for (T v : a.value().data()) s += v;
  const std::size_t ia = a.id;
  return detail::graph_of(a).record(Tensor<T>::scalar(s), {ia}, [=](BackwardContext<T>& ctx) {
    if (auto* da = ctx.acc(ia)) {
      const T g = ctx.out_grad()[0];
      for (auto& v : da->data()) v += g;
    }
  });
}

template <std::floating_point T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / T(a.value().size()));
}

// Per-row log-sum-exp over the columns where mask(i, j) != 0. `mask` is
// row-major m x n. Result has shape [m].
template <std::floating_point T>
Var<T> masked_row_logsumexp(Var<T> a, std::vector<std::uint8_t> mask) {
  detail::require_matrix(a, "masked_row_logsumexp");
  const std::size_t m = a.rows(), n = a.cols();
  if (mask.size() != m * n) {
    throw ShapeError(detail::concat("masked_row_logsumexp: mask size ", mask.size(),
                                    " does not match ", detail::shape_string(a.shape())));
  }
  const auto& x = a.value();
  Tensor<T> out(Shape{m});
  auto prob = std::make_shared<std::vector<T>>(m * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false, nan = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (!mask[i * n + j]) continue;
      any = true;
      nan = nan || std::isnan(x(i, j));
      mx = std::max(mx, x(i, j));
    }
    if (!any) throw ShapeError(detail::concat("masked_row_logsumexp: row ", i, " has no candidates"));
    if (nan) {
      out[i] = std::numeric_limits<T>::quiet_NaN();
      continue;
    }
    T s = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!mask[i * n + j]) continue;
      const T e = std::exp(x(i, j) - mx);
      (*prob)[i * n + j] = e;
      s += e;
    }
    for (std::size_t j = 0; j < n; ++j) (*prob)[i * n + j] /= s;
    out[i] = mx + std::log(s);
  }
  const std::size_t ia = a.id;
  return detail::graph_of(a).record(std::move(out), {ia}, [=](BackwardContext<T>& ctx) {
    auto* da = ctx.acc(ia);
    if (!da) return;
    const auto& g = ctx.out_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) (*da)(i, j) += g[i] * (*prob)[i * n + j];
  });
}

// out[i] = a(i, index[i]).
template <std::floating_point T>
Var<T> pick(Var<T> a, std::vector<std::size_t> index) {
  detail::require_matrix(a, "pick");
  const std::size_t m = a.rows(), n = a.cols();
  if (index.size() != m) {
    throw ShapeError(detail::concat("pick: ", index.size(), " indices for ", m, " rows"));
  }
  Tensor<T> out(Shape{m});
  for (std::size_t i = 0; i < m; ++i) {
    if (index[i] >= n) throw ShapeError(detail::concat("pick: column ", index[i], " out of range"));
    out[i] = a.value()(i, index[i]);
  }
  const std::size_t ia = a.id;
  return detail::graph_of(a).record(
      std::move(out), {ia}, [=, index = std::move(index)](BackwardContext<T>& ctx) {
        auto* da = ctx.acc(ia);
        if (!da) return;
        const auto& g = ctx.out_grad();
        for (std::size_t i = 0; i < m; ++i) (*da)(i, index[i]) += g[i];
      });
}

// Σ_k weights[k] * terms[k] over scalar terms.
template <std::floating_point T>
Var<T> weighted_sum(std::span<const Var<T>> terms, std::span<const T> weights) {
  if (terms.empty() || terms.size() != weights.size()) {
    throw ShapeError("weighted_sum: terms and weights must be non-empty and equal length");
  }
  T s = 0;
  std::vector<std::size_t> ids;
  for (std::size_t k = 0; k < terms.size(); ++k) {
    if (terms[k].value().size() != 1) throw ShapeError("weighted_sum: terms must be scalars");
    s += weights[k] * terms[k].value()[0];
    ids.push_back(terms[k].id);
  }
  std::vector<T> w(weights.begin(), weights.end());
  return detail::graph_of(terms[0]).record(
      Tensor<T>::scalar(s), ids, [=, w = std::move(w)](BackwardContext<T>& ctx) {
        const T g = ctx.out_grad()[0];
        for (std::size_t k = 0; k < ids.size(); ++k)
          if (auto* dt = ctx.acc(ids[k])) (*dt)[0] += w[k] * g;
      });
}

}  // namespace cbt
