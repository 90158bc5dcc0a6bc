#include "va3/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>
#include <utility>

namespace va3::ad {

namespace {

thread_local bool t_grad_enabled = true;

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (t_grad_enabled) {
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Var& v) { return v.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (auto& v : inputs) node->parents.push_back(v.shared());
      node->backward = std::move(fn);
    }
  }
  return Var(std::move(node));
}

void require_defined(const Var& v, const char* op) {
  if (!v.defined()) throw ShapeError(std::string(op) + ": undefined input");
}

// Splits a shape around `axis` into (outer, axis length, inner).
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for " + shape_to_string(shape));
  }
  AxisSplit s;
  for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
  s.len = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
  return s;
}

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
  bool same = false;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const std::size_t r = std::max(a.size(), b.size());
  p.out.assign(r, 1);
  p.stride_a.assign(r, 0);
  p.stride_b.assign(r, 0);
  auto dim_at = [r](const Shape& s, std::size_t d) -> std::size_t {
    const std::size_t offset = r - s.size();
    return d < offset ? 1 : s[d - offset];
  };
  for (std::size_t d = 0; d < r; ++d) {
    const std::size_t da = dim_at(a, d), db = dim_at(b, d);
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " +
                       shape_to_string(a) + " with " + shape_to_string(b));
    }
    p.out[d] = std::max(da, db);
  }
  std::size_t sa = 1, sb = 1;
  for (std::size_t d = r; d-- > 0;) {
    const std::size_t da = dim_at(a, d), db = dim_at(b, d);
    p.stride_a[d] = da == 1 ? 0 : sa;
    p.stride_b[d] = db == 1 ? 0 : sb;
    sa *= da;
    sb *= db;
  }
  return p;
}

template <class F>
void broadcast_loop(const Broadcast& p, F&& f) {
  const std::size_t n = numel(p.out);
  if (p.same) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t r = p.out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.stride_a[d] * p.out[d];
      ib -= p.stride_b[d] * p.out[d];
      idx[d] = 0;
    }
  }
}

// Binary elementwise op. `Fwd(a, b)`, `Da(a, b, g)`, `Db(a, b, g)`.
template <class Fwd, class Da, class Db>
Var binary_op(const Var& a, const Var& b, const char* name, Fwd fwd, Da da, Db db) {
  require_defined(a, name);
  require_defined(b, name);
  Broadcast p = plan_broadcast(a.shape(), b.shape(), name);
  Tensor out(p.out);
  const auto& av = a.value();
  const auto& bv = b.value();
  broadcast_loop(p, [&](std::size_t o, std::size_t i, std::size_t j) {
    out[o] = fwd(av[i], bv[j]);
  });
  return make_op(std::move(out), {a, b}, [p, da, db](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    const Tensor& g = self.grad;
    if (na.requires_grad) {
      Tensor& ga = na.grad_buffer();
      broadcast_loop(p, [&](std::size_t o, std::size_t i, std::size_t j) {
        ga[i] += da(na.value[i], nb.value[j], g[o]);
      });
    }
    if (nb.requires_grad) {
      Tensor& gb = nb.grad_buffer();
      broadcast_loop(p, [&](std::size_t o, std::size_t i, std::size_t j) {
        gb[j] += db(na.value[i], nb.value[j], g[o]);
      });
    }
  });
}

// Unary elementwise op. `Deriv(x, y)` is dy/dx given input and output.
template <class Fwd, class Deriv>
Var unary_op(const Var& x, const char* name, Fwd fwd, Deriv deriv) {
  require_defined(x, name);
  Tensor out(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xv[i]);
  return make_op(std::move(out), {x}, [deriv](Node& self) {
    Node& nx = *self.parents[0];
    Tensor& gx = nx.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      gx[i] += self.grad[i] * deriv(nx.value[i], self.value[i]);
    }
  });
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (!has_grad) {
    grad = Tensor(value.shape(), 0.0);
    has_grad = true;
  }
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
  if (node_->has_grad) return node_->grad;
  return Tensor(node_->value.shape(), 0.0);
}

void Var::zero_grad() {
  node_->grad = Tensor();
  node_->has_grad = false;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

void backward(const Var& root) {
  require_defined(root, "backward");
  if (root.size() != 1) {
    throw ShapeError("backward: root must be a single element, got " +
                     shape_to_string(root.shape()));
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS: parents are emitted before the nodes using them.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && node->has_grad) node->backward(*node);
  }
}

Var add(const Var& a, const Var& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double g) { return g; },
      [](double, double, double g) { return g; });
}

Var sub(const Var& a, const Var& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double g) { return g; },
      [](double, double, double g) { return -g; });
}

Var mul(const Var& a, const Var& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double g) { return g * y; },
      [](double x, double, double g) { return g * x; });
}

Var div(const Var& a, const Var& b) {
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double g) { return g / y; },
      [](double x, double y, double g) { return -g * x / (y * y); });
}

Var scale(const Var& x, double factor) {
  return unary_op(
      x, "scale", [factor](double v) { return v * factor; },
      [factor](double, double) { return factor; });
}

Var add_scalar(const Var& x, double offset) {
  return unary_op(
      x, "add_scalar", [offset](double v) { return v + offset; },
      [](double, double) { return 1.0; });
}

Var exp(const Var& x) {
  return unary_op(
      x, "exp", [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Var log(const Var& x) {
  return unary_op(
      x, "log", [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Var relu(const Var& x) {
  return unary_op(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& x, double slope) {
  return unary_op(
      x, "leaky_relu", [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

Var sigmoid(const Var& x) {
  return unary_op(
      x, "sigmoid",
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var matmul(const Var& a, const Var& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_to_string(a.shape()) +
                     " and " + shape_to_string(b.shape()));
  }
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Tensor out(Shape{n, m});
  const double* av = a.value().data().data();
  const double* bv = b.value().data().data();
  double* ov = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = bv + p * m;
      double* orow = ov + i * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += aip * brow[j];
    }
  }
  return make_op(std::move(out), {a, b}, [n, k, m](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    const double* g = self.grad.data().data();
    if (na.requires_grad) {
      double* ga = na.grad_buffer().data().data();
      const double* bv = nb.value.data().data();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < m; ++j) acc += g[i * m + j] * bv[p * m + j];
          ga[i * k + p] += acc;
        }
      }
    }
    if (nb.requires_grad) {
      double* gb = nb.grad_buffer().data().data();
      const double* av = na.value.data().data();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          if (aip == 0.0) continue;
          for (std::size_t j = 0; j < m; ++j) gb[p * m + j] += aip * g[i * m + j];
        }
      }
    }
  });
}

Var transpose(const Var& x) {
  require_defined(x, "transpose");
  if (x.shape().size() != 2) {
    throw ShapeError("transpose: expected 2-D, got " + shape_to_string(x.shape()));
  }
  const std::size_t n = x.dim(0), m = x.dim(1);
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = x.value()[i * m + j];
  }
  return make_op(std::move(out), {x}, [n, m](Node& self) {
    Tensor& gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) gx[i * m + j] += self.grad[j * n + i];
    }
  });
}

Var reshape(const Var& x, Shape shape) {
  require_defined(x, "reshape");
  Tensor out = x.value().reshaped(std::move(shape));
  return make_op(std::move(out), {x}, [](Node& self) {
    Tensor& gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

Var sum(const Var& x) {
  require_defined(x, "sum");
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  return make_op(Tensor::scalar(total), {x}, [](Node& self) {
    Tensor& gx = self.parents[0]->grad_buffer();
    const double g = self.grad[0];
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
}

Var sum(const Var& x, std::size_t axis, bool keepdim) {
  require_defined(x, "sum");
  const AxisSplit s = split_axis(x.shape(), axis, "sum");
  Shape shape = x.shape();
  if (keepdim) {
    shape[axis] = 1;
  } else {
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  Tensor out(shape);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t a = 0; a < s.len; ++a) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        out[o * s.inner + i] += xv[(o * s.len + a) * s.inner + i];
      }
    }
  }
  return make_op(std::move(out), {x}, [s](Node& self) {
    Tensor& gx = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t a = 0; a < s.len; ++a) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          gx[(o * s.len + a) * s.inner + i] += self.grad[o * s.inner + i];
        }
      }
    }
  });
}

Var mean(const Var& x) {
  require_defined(x, "mean");
  if (x.size() == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Var mean(const Var& x, std::size_t axis, bool keepdim) {
  require_defined(x, "mean");
  const std::size_t len = x.value().dim(axis);
  if (len == 0) throw ShapeError("mean over an empty axis");
  return scale(sum(x, axis, keepdim), 1.0 / static_cast<double>(len));
}

Var softmax(const Var& x, std::size_t axis) {
  require_defined(x, "softmax");
  const AxisSplit s = split_axis(x.shape(), axis, "softmax");
  Tensor out(x.shape());
  const auto& xv = x.value();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t a) { return (o * s.len + a) * s.inner + i; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < s.len; ++a) mx = std::max(mx, xv[at(a)]);
      double z = 0.0;
      for (std::size_t a = 0; a < s.len; ++a) {
        out[at(a)] = std::exp(xv[at(a)] - mx);
        z += out[at(a)];
      }
      for (std::size_t a = 0; a < s.len; ++a) out[at(a)] /= z;
    }
  }
  return make_op(std::move(out), {x}, [s](Node& self) {
    Tensor& gx = self.parents[0]->grad_buffer();
    const Tensor& y = self.value;
    const Tensor& g = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        auto at = [&](std::size_t a) { return (o * s.len + a) * s.inner + i; };
        double dotp = 0.0;
        for (std::size_t a = 0; a < s.len; ++a) dotp += g[at(a)] * y[at(a)];
        for (std::size_t a = 0; a < s.len; ++a) {
          gx[at(a)] += y[at(a)] * (g[at(a)] - dotp);
        }
      }
    }
  });
}

Var log_softmax(const Var& x, std::size_t axis) {
  require_defined(x, "log_softmax");
  const AxisSplit s = split_axis(x.shape(), axis, "log_softmax");
  Tensor out(x.shape());
  const auto& xv = x.value();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t a) { return (o * s.len + a) * s.inner + i; };
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < s.len; ++a) mx = std::max(mx, xv[at(a)]);
      double z = 0.0;
      for (std::size_t a = 0; a < s.len; ++a) z += std::exp(xv[at(a)] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t a = 0; a < s.len; ++a) out[at(a)] = xv[at(a)] - lse;
    }
  }
  return make_op(std::move(out), {x}, [s](Node& self) {
    Tensor& gx = self.parents[0]->grad_buffer();
    const Tensor& y = self.value;
    const Tensor& g = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        auto at = [&](std::size_t a) { return (o * s.len + a) * s.inner + i; };
        double gsum = 0.0;
        for (std::size_t a = 0; a < s.len; ++a) gsum += g[at(a)];
        for (std::size_t a = 0; a < s.len; ++a) {
          gx[at(a)] += g[at(a)] - std::exp(y[at(a)]) * gsum;
        }
      }
    }
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  for (const auto& p : parts) require_defined(p, "concat");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) {
    throw ShapeError("concat: axis out of range for " + shape_to_string(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) {
      ok = d == axis || s[d] == first[d];
    }
    if (!ok) {
      throw ShapeError("concat: shape " + shape_to_string(s) +
                       " incompatible with " + shape_to_string(first));
    }
    out_shape[axis] += s[axis];
  }
  const AxisSplit os = split_axis(out_shape, axis, "concat");
  Tensor out(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t block = p.dim(axis) * os.inner;
    const auto& pv = p.value();
    for (std::size_t o = 0; o < os.outer; ++o) {
      std::copy_n(pv.data().begin() + static_cast<std::ptrdiff_t>(o * block), block,
                  out.data().begin() +
                      static_cast<std::ptrdiff_t>(o * os.len * os.inner + offset));
    }
    offset += block;
  }
  return make_op(std::move(out), parts, [os, offsets, axis](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node& part = *self.parents[k];
      if (!part.requires_grad) continue;
      Tensor& gp = part.grad_buffer();
      const std::size_t block = part.value.shape()[axis] * os.inner;
      for (std::size_t o = 0; o < os.outer; ++o) {
        const std::size_t base = o * os.len * os.inner + offsets[k];
        for (std::size_t i = 0; i < block; ++i) gp[o * block + i] += self.grad[base + i];
      }
    }
  });
}

Var slice(const Var& x, std::size_t axis, std::size_t start, std::size_t length) {
  require_defined(x, "slice");
  const AxisSplit s = split_axis(x.shape(), axis, "slice");
  if (start + length > s.len) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") exceeds axis length " +
                     std::to_string(s.len));
  }
  Shape shape = x.shape();
  shape[axis] = length;
  Tensor out(shape);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t a = 0; a < length; ++a) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        out[(o * length + a) * s.inner + i] = xv[(o * s.len + start + a) * s.inner + i];
      }
    }
  }
  return make_op(std::move(out), {x}, [s, start, length](Node& self) {
    Tensor& gx = self.parents[0]->grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t a = 0; a < length; ++a) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          gx[(o * s.len + start + a) * s.inner + i] +=
              self.grad[(o * length + a) * s.inner + i];
        }
      }
    }
  });
}

Var index_select(const Var& x, std::span<const std::size_t> indices) {
  require_defined(x, "index_select");
  if (x.shape().empty()) throw ShapeError("index_select on a scalar");
  const std::size_t rows = x.dim(0);
  const std::size_t width = rows == 0 ? 0 : x.size() / rows;
  for (std::size_t idx : indices) {
    if (idx >= rows) {
      throw IndexError("index_select: row " + std::to_string(idx) +
                       " out of range for " + shape_to_string(x.shape()));
    }
  }
  Shape shape = x.shape();
  shape[0] = indices.size();
  Tensor out(shape);
  const auto& xv = x.value();
  for (std::size_t r = 0; r < indices.size(); ++r) {
    std::copy_n(xv.data().begin() + static_cast<std::ptrdiff_t>(indices[r] * width),
                width, out.data().begin() + static_cast<std::ptrdiff_t>(r * width));
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_op(std::move(out), {x}, [idx = std::move(idx), width](Node& self) {
    Tensor& gx = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t i = 0; i < width; ++i) {
        gx[idx[r] * width + i] += self.grad[r * width + i];
      }
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  require_defined(x, "layer_norm");
  if (x.shape().empty()) throw ShapeError("layer_norm on a scalar");
  const std::size_t d = x.shape().back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(d) + "]");
  }
  const std::size_t rows = d == 0 ? 0 : x.size() / d;
  Tensor out(x.shape());
  Tensor normed(x.shape());
  std::vector<double> inv_std(rows);
  const auto& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xv[r * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = xv[r * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      normed[r * d + j] = (xv[r * d + j] - mu) * inv_std[r];
      out[r * d + j] = normed[r * d + j] * gain.value()[j] + bias.value()[j];
    }
  }
  return make_op(
      std::move(out), {x, gain, bias},
      [normed = std::move(normed), inv_std = std::move(inv_std), rows, d](Node& self) {
        Node& nx = *self.parents[0];
        Node& ng = *self.parents[1];
        Node& nb = *self.parents[2];
        const Tensor& g = self.grad;
        if (ng.requires_grad || nb.requires_grad) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
              if (ng.requires_grad) ng.grad_buffer()[j] += g[r * d + j] * normed[r * d + j];
              if (nb.requires_grad) nb.grad_buffer()[j] += g[r * d + j];
            }
          }
        }
        if (!nx.requires_grad) return;
        Tensor& gx = nx.grad_buffer();
        std::vector<double> dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = g[r * d + j] * ng.value[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * normed[r * d + j];
          }
          mean_d /= static_cast<double>(d);
          mean_dx /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            gx[r * d + j] +=
                inv_std[r] * (dxhat[j] - mean_d - normed[r * d + j] * mean_dx);
          }
        }
      });
}

Var dot(const Var& a, const Var& b) {
  require_defined(a, "dot");
  require_defined(b, "dot");
  if (a.shape().size() != 1 || a.shape() != b.shape()) {
    throw ShapeError("dot: expected equal 1-D shapes, got " +
                     shape_to_string(a.shape()) + " and " + shape_to_string(b.shape()));
  }
  return sum(mul(a, b));
}

Var euclidean_distance(const Var& a, const Var& b) {
  require_defined(a, "euclidean_distance");
  require_defined(b, "euclidean_distance");
  if (a.shape() != b.shape()) {
    throw ShapeError("euclidean_distance: shape mismatch " +
                     shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
  double ss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double diff = a.value()[i] - b.value()[i];
    ss += diff * diff;
  }
  const double dist = std::sqrt(ss);
  return make_op(Tensor::scalar(dist), {a, b}, [](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    const double dist = self.value[0];
    if (dist == 0.0) return;  // subgradient 0 at coincident points
    const double g = self.grad[0] / dist;
    for (std::size_t i = 0; i < na.value.size(); ++i) {
      const double diff = na.value[i] - nb.value[i];
      if (na.requires_grad) na.grad_buffer()[i] += g * diff;
      if (nb.requires_grad) nb.grad_buffer()[i] -= g * diff;
    }
  });
}

Var row_distance(const Var& a, const Var& b) {
  require_defined(a, "row_distance");
  require_defined(b, "row_distance");
  if (a.shape().size() != 2 || a.shape() != b.shape()) {
    throw ShapeError("row_distance: expected equal 2-D shapes, got " +
                     shape_to_string(a.shape()) + " and " + shape_to_string(b.shape()));
  }
  const std::size_t n = a.dim(0), h = a.dim(1);
  Tensor out(Shape{n});
  for (std::size_t r = 0; r < n; ++r) {
    double ss = 0.0;
    for (std::size_t i = 0; i < h; ++i) {
      const double diff = a.value()[r * h + i] - b.value()[r * h + i];
      ss += diff * diff;
    }
    out[r] = std::sqrt(ss);
  }
  return make_op(std::move(out), {a, b}, [n, h](Node& self) {
    Node& na = *self.parents[0];
    Node& nb = *self.parents[1];
    for (std::size_t r = 0; r < n; ++r) {
      const double dist = self.value[r];
      if (dist == 0.0) continue;
      const double g = self.grad[r] / dist;
      for (std::size_t i = 0; i < h; ++i) {
        const double diff = na.value[r * h + i] - nb.value[r * h + i];
        if (na.requires_grad) na.grad_buffer()[r * h + i] += g * diff;
        if (nb.requires_grad) nb.grad_buffer()[r * h + i] -= g * diff;
      }
    }
  });
}

Var softmax_cross_entropy(const Var& logits, std::span<const std::size_t> targets) {
  require_defined(logits, "softmax_cross_entropy");
  const Shape& shape = logits.shape();
  std::size_t rows, k;
  if (shape.size() == 1) {
    rows = 1;
    k = shape[0];
  } else if (shape.size() == 2) {
    rows = shape[0];
    k = shape[1];
  } else {
    throw ShapeError("softmax_cross_entropy: logits must be 1-D or 2-D");
  }
  if (targets.size() != rows || rows == 0) {
    throw ShapeError("softmax_cross_entropy: expected " + std::to_string(rows) +
                     " targets, got " + std::to_string(targets.size()));
  }
  for (std::size_t t : targets) {
    if (t >= k) {
      throw IndexError("softmax_cross_entropy: target " + std::to_string(t) +
                       " out of range for " + std::to_string(k) + " classes");
    }
  }
  const auto& x = logits.value();
  Tensor probs(Shape{rows, k});
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, x[r * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      probs[r * k + j] = std::exp(x[r * k + j] - mx);
      z += probs[r * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] /= z;
    loss += mx + std::log(z) - x[r * k + targets[r]];
  }
  loss /= static_cast<double>(rows);
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return make_op(Tensor::scalar(loss), {logits},
                 [probs = std::move(probs), tgt = std::move(tgt), rows, k](Node& self) {
                   Tensor& gx = self.parents[0]->grad_buffer();
                   const double g = self.grad[0] / static_cast<double>(rows);
                   for (std::size_t r = 0; r < rows; ++r) {
                     for (std::size_t j = 0; j < k; ++j) {
                       const double onehot = j == tgt[r] ? 1.0 : 0.0;
                       gx[r * k + j] += g * (probs[r * k + j] - onehot);
                     }
                   }
                 });
}

Var straight_through(Tensor hard, const Var& soft) {
  require_defined(soft, "straight_through");
  if (hard.shape() != soft.shape()) {
    throw ShapeError("straight_through: hard " + shape_to_string(hard.shape()) +
                     " vs soft " + shape_to_string(soft.shape()));
  }
  return make_op(std::move(hard), {soft}, [](Node& self) {
    Tensor& gs = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gs.size(); ++i) gs[i] += self.grad[i];
  });
}

Var detach(const Var& x) {
  require_defined(x, "detach");
  return Var::constant(x.value());
}

Var segment_softmax(const Var& scores, std::span<const std::size_t> segments,
                    std::size_t n_segments) {
  require_defined(scores, "segment_softmax");
  if (scores.shape().size() != 1 || scores.size() != segments.size()) {
    throw ShapeError("segment_softmax: scores must be 1-D with one segment id each");
  }
  for (std::size_t s : segments) {
    if (s >= n_segments) throw IndexError("segment_softmax: segment id out of range");
  }
  const auto& x = scores.value();
  std::vector<double> mx(n_segments, -std::numeric_limits<double>::infinity());
  for (std::size_t p = 0; p < x.size(); ++p) {
    mx[segments[p]] = std::max(mx[segments[p]], x[p]);
  }
  std::vector<double> z(n_segments, 0.0);
  Tensor out(scores.shape());
  for (std::size_t p = 0; p < x.size(); ++p) {
    out[p] = std::exp(x[p] - mx[segments[p]]);
    z[segments[p]] += out[p];
  }
  for (std::size_t p = 0; p < x.size(); ++p) out[p] /= z[segments[p]];
  std::vector<std::size_t> seg(segments.begin(), segments.end());
  return make_op(std::move(out), {scores},
                 [seg = std::move(seg), n_segments](Node& self) {
                   Tensor& gx = self.parents[0]->grad_buffer();
                   const Tensor& y = self.value;
                   std::vector<double> dotp(n_segments, 0.0);
                   for (std::size_t p = 0; p < y.size(); ++p) {
                     dotp[seg[p]] += self.grad[p] * y[p];
                   }
                   for (std::size_t p = 0; p < y.size(); ++p) {
                     gx[p] += y[p] * (self.grad[p] - dotp[seg[p]]);
                   }
                 });
}

Var segment_sum(const Var& values, std::span<const std::size_t> segments,
                std::size_t n_segments) {
  require_defined(values, "segment_sum");
  if (values.shape().empty() || values.dim(0) != segments.size()) {
    throw ShapeError("segment_sum: one segment id per row required");
  }
  for (std::size_t s : segments) {
    if (s >= n_segments) throw IndexError("segment_sum: segment id out of range");
  }
  const std::size_t width = segments.empty() ? 0 : values.size() / segments.size();
  Shape shape = values.shape();
  shape[0] = n_segments;
  Tensor out(shape);
  const auto& v = values.value();
  for (std::size_t p = 0; p < segments.size(); ++p) {
    for (std::size_t i = 0; i < width; ++i) out[segments[p] * width + i] += v[p * width + i];
  }
  std::vector<std::size_t> seg(segments.begin(), segments.end());
  return make_op(std::move(out), {values}, [seg = std::move(seg), width](Node& self) {
    Tensor& gv = self.parents[0]->grad_buffer();
    for (std::size_t p = 0; p < seg.size(); ++p) {
      for (std::size_t i = 0; i < width; ++i) gv[p * width + i] += self.grad[seg[p] * width + i];
    }
  });
}

}  // namespace va3::ad
