#include "wrcfusion/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "wrcfusion/error.hpp"

namespace wrc {

using detail::NodePtr;
using detail::TensorNode;

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

namespace {

thread_local bool g_grad_enabled = true;

NodePtr make_node(Shape shape, std::vector<double> value) {
  auto n = std::make_shared<TensorNode>();
  if (shape_numel(shape) != value.size())
    throw DimensionError("tensor data length " + std::to_string(value.size()) +
                         " does not match shape " + shape_str(shape));
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

std::vector<double>& grad_buf(TensorNode& n) {
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

bool any_requires_grad(std::initializer_list<const Tensor*> ins) {
  for (const Tensor* t : ins)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

// Wraps a freshly computed value; records the graph edge only when autograd
// is active and some input carries grad.
Tensor make_result(Shape shape, std::vector<double> value,
                   std::initializer_list<const Tensor*> ins,
                   std::function<void(TensorNode&)> backprop) {
  auto n = make_node(std::move(shape), std::move(value));
  if (g_grad_enabled && any_requires_grad(ins)) {
    n->requires_grad = true;
    for (const Tensor* t : ins)
      if (t->defined()) n->parents.push_back(t->node());
    n->backprop = std::move(backprop);
  }
  return Tensor::from_node(std::move(n));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void check_defined(const Tensor& t, const char* op) {
  if (!t.defined())
    throw ContractError(std::string(op) + ": undefined tensor");
}

}  // namespace

// ---- Tensor basics ----

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  node_ = make_node(std::move(shape), std::move(data));
  node_->requires_grad = requires_grad;
}

Tensor Tensor::from_node(NodePtr n) {
  Tensor t;
  t.node_ = std::move(n);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{1}, std::vector<double>{value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  std::vector<double> d(n);
  for (auto& v : d) v = rng.normal(0.0, stddev);
  return Tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::rand_uniform(Shape shape, Rng& rng, double lo, double hi,
                            bool requires_grad) {
  std::size_t n = shape_numel(shape);
  std::vector<double> d(n);
  for (auto& v : d) v = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(d), requires_grad);
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("shape() on undefined tensor");
  return node_->shape;
}

std::size_t Tensor::size() const {
  return node_ ? node_->value.size() : 0;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

std::span<const double> Tensor::data() const {
  if (!node_) throw ContractError("data() on undefined tensor");
  return node_->value;
}

std::span<double> Tensor::raw() {
  if (!node_) throw ContractError("raw() on undefined tensor");
  return node_->value;
}

double Tensor::item() const {
  if (size() != 1)
    throw ContractError("item() requires a scalar, got shape " +
                        shape_str(shape()));
  return node_->value[0];
}

double Tensor::operator()(std::size_t i) const { return node_->value.at(i); }

double Tensor::operator()(std::size_t i, std::size_t j) const {
  const Shape& s = shape();
  if (s.size() != 2) throw DimensionError("2-index access on rank-" + std::to_string(s.size()) + " tensor");
  return node_->value[i * s[1] + j];
}

double Tensor::operator()(std::size_t i, std::size_t j, std::size_t k) const {
  const Shape& s = shape();
  if (s.size() != 3) throw DimensionError("3-index access on rank-" + std::to_string(s.size()) + " tensor");
  return node_->value[(i * s[1] + j) * s[2] + k];
}

double Tensor::operator()(std::size_t i, std::size_t j, std::size_t k,
                          std::size_t l) const {
  const Shape& s = shape();
  if (s.size() != 4) throw DimensionError("4-index access on rank-" + std::to_string(s.size()) + " tensor");
  return node_->value[((i * s[1] + j) * s[2] + k) * s[3] + l];
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad())
    throw ContractError("grad() called before backward populated it");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

// ---- backward ----

void backward(const Tensor& loss) {
  check_defined(loss, "backward");
  if (loss.size() != 1)
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_str(loss.shape()));
  TensorNode* root = loss.node().get();
  if (!root->requires_grad)
    throw ContractError("backward: loss does not require grad (no parameters reachable)");
  if (root->backward_used)
    throw ContractError("backward called twice on the same loss without rebuilding the graph");
  root->backward_used = true;

  // iterative DFS: reverse post-order is a valid topological order
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::unordered_set<TensorNode*> on_stack;
  struct Frame {
    TensorNode* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({root, 0});
  on_stack.insert(root);
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      TensorNode* p = f.node->parents[f.next_parent++].get();
      if (on_stack.count(p))
        throw InternalError("cycle detected in differentiation graph");
      if (!visited.count(p) && p->requires_grad) {
        visited.insert(p);
        on_stack.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      on_stack.erase(f.node);
      stack.pop_back();
    }
  }

  grad_buf(*root).assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
}

// ---- elementwise ----

namespace {

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& x, const char* name, Fwd fwd, Bwd bwd) {
  check_defined(x, name);
  auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = fwd(xs[i]);
  NodePtr xn = x.node();
  return make_result(x.shape(), std::move(out), {&x},
                     [xn, bwd](TensorNode& self) {
                       auto& gx = grad_buf(*xn);
                       for (std::size_t i = 0; i < gx.size(); ++i)
                         gx[i] += self.grad[i] * bwd(xn->value[i], self.value[i]);
                     });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_defined(a, "add");
  check_defined(b, "add");
  check_same_shape(a, b, "add");
  auto as = a.data(), bs = b.data();
  std::vector<double> out(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) out[i] = as[i] + bs[i];
  NodePtr an = a.node(), bn = b.node();
  return make_result(a.shape(), std::move(out), {&a, &b},
                     [an, bn](TensorNode& self) {
                       if (an->requires_grad) {
                         auto& ga = grad_buf(*an);
                         for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
                       }
                       if (bn->requires_grad) {
                         auto& gb = grad_buf(*bn);
                         for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i];
                       }
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_defined(a, "sub");
  check_defined(b, "sub");
  check_same_shape(a, b, "sub");
  auto as = a.data(), bs = b.data();
  std::vector<double> out(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) out[i] = as[i] - bs[i];
  NodePtr an = a.node(), bn = b.node();
  return make_result(a.shape(), std::move(out), {&a, &b},
                     [an, bn](TensorNode& self) {
                       if (an->requires_grad) {
                         auto& ga = grad_buf(*an);
                         for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
                       }
                       if (bn->requires_grad) {
                         auto& gb = grad_buf(*bn);
                         for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
                       }
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_defined(a, "mul");
  check_defined(b, "mul");
  check_same_shape(a, b, "mul");
  auto as = a.data(), bs = b.data();
  std::vector<double> out(as.size());
  for (std::size_t i = 0; i < as.size(); ++i) out[i] = as[i] * bs[i];
  NodePtr an = a.node(), bn = b.node();
  return make_result(a.shape(), std::move(out), {&a, &b},
                     [an, bn](TensorNode& self) {
                       if (an->requires_grad) {
                         auto& ga = grad_buf(*an);
                         for (std::size_t i = 0; i < ga.size(); ++i)
                           ga[i] += self.grad[i] * bn->value[i];
                       }
                       if (bn->requires_grad) {
                         auto& gb = grad_buf(*bn);
                         for (std::size_t i = 0; i < gb.size(); ++i)
                           gb[i] += self.grad[i] * an->value[i];
                       }
                     });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary_op(x, "add_scalar", [c](double v) { return v + c; },
                  [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return unary_op(x, "mul_scalar", [c](double v) { return v * c; },
                  [c](double, double) { return c; });
}

Tensor add_scalar_tensor(const Tensor& x, const Tensor& s) {
  check_defined(x, "add_scalar_tensor");
  check_defined(s, "add_scalar_tensor");
  if (s.size() != 1)
    throw DimensionError("add_scalar_tensor: bias must be scalar, got " +
                         shape_str(s.shape()));
  double c = s.data()[0];
  auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = xs[i] + c;
  NodePtr xn = x.node(), sn = s.node();
  return make_result(x.shape(), std::move(out), {&x, &s},
                     [xn, sn](TensorNode& self) {
                       if (xn->requires_grad) {
                         auto& gx = grad_buf(*xn);
                         for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
                       }
                       if (sn->requires_grad) {
                         auto& gs = grad_buf(*sn);
                         double acc = 0.0;
                         for (double g : self.grad) acc += g;
                         gs[0] += acc;
                       }
                     });
}

Tensor neg(const Tensor& x) {
  return unary_op(x, "neg", [](double v) { return -v; },
                  [](double, double) { return -1.0; });
}

Tensor relu(const Tensor& x) {
  return unary_op(x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
                  [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(x, "sigmoid",
                  [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                  [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
  return unary_op(x, "exp", [](double v) { return std::exp(v); },
                  [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(x, "log", [](double v) { return std::log(v); },
                  [](double v, double) { return 1.0 / v; });
}

Tensor abs(const Tensor& x) {
  return unary_op(x, "abs", [](double v) { return std::fabs(v); },
                  [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor pow_scalar(const Tensor& x, double p) {
  return unary_op(x, "pow_scalar", [p](double v) { return std::pow(v, p); },
                  [p](double v, double) { return p * std::pow(v, p - 1.0); });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary_op(x, "clamp",
                  [lo, hi](double v) { return std::min(hi, std::max(lo, v)); },
                  [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

// ---- softmax family ----

namespace {

struct AxisView {
  std::size_t outer, axis, inner;
};

AxisView axis_view(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size())
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(s));
  AxisView v{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis) {
  check_defined(x, "softmax");
  AxisView v = axis_view(x.shape(), axis, "softmax");
  auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.axis * v.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < v.axis; ++a)
        mx = std::max(mx, xs[base + a * v.inner]);
      double denom = 0.0;
      for (std::size_t a = 0; a < v.axis; ++a) {
        double e = std::exp(xs[base + a * v.inner] - mx);
        out[base + a * v.inner] = e;
        denom += e;
      }
      for (std::size_t a = 0; a < v.axis; ++a) out[base + a * v.inner] /= denom;
    }
  NodePtr xn = x.node();
  return make_result(x.shape(), std::move(out), {&x},
                     [xn, v](TensorNode& self) {
                       auto& gx = grad_buf(*xn);
                       for (std::size_t o = 0; o < v.outer; ++o)
                         for (std::size_t in = 0; in < v.inner; ++in) {
                           const std::size_t base = o * v.axis * v.inner + in;
                           double dot = 0.0;
                           for (std::size_t a = 0; a < v.axis; ++a) {
                             std::size_t i = base + a * v.inner;
                             dot += self.grad[i] * self.value[i];
                           }
                           for (std::size_t a = 0; a < v.axis; ++a) {
                             std::size_t i = base + a * v.inner;
                             gx[i] += self.value[i] * (self.grad[i] - dot);
                           }
                         }
                     });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  check_defined(x, "log_softmax");
  AxisView v = axis_view(x.shape(), axis, "log_softmax");
  auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t in = 0; in < v.inner; ++in) {
      const std::size_t base = o * v.axis * v.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < v.axis; ++a)
        mx = std::max(mx, xs[base + a * v.inner]);
      double denom = 0.0;
      for (std::size_t a = 0; a < v.axis; ++a)
        denom += std::exp(xs[base + a * v.inner] - mx);
      double lse = mx + std::log(denom);
      for (std::size_t a = 0; a < v.axis; ++a)
        out[base + a * v.inner] = xs[base + a * v.inner] - lse;
    }
  NodePtr xn = x.node();
  return make_result(x.shape(), std::move(out), {&x},
                     [xn, v](TensorNode& self) {
                       auto& gx = grad_buf(*xn);
                       for (std::size_t o = 0; o < v.outer; ++o)
                         for (std::size_t in = 0; in < v.inner; ++in) {
                           const std::size_t base = o * v.axis * v.inner + in;
                           double gsum = 0.0;
                           for (std::size_t a = 0; a < v.axis; ++a)
                             gsum += self.grad[base + a * v.inner];
                           for (std::size_t a = 0; a < v.axis; ++a) {
                             std::size_t i = base + a * v.inner;
                             gx[i] += self.grad[i] - std::exp(self.value[i]) * gsum;
                           }
                         }
                     });
}

Tensor layer_norm(const Tensor& x) {
  check_defined(x, "layer_norm");
  const Shape& s = x.shape();
  if (s.empty()) throw DimensionError("layer_norm: rank-0 tensor");
  const std::size_t d = s.back();
  const std::size_t rows = x.size() / d;
  constexpr double kEps = 1e-12;
  auto xs = x.data();
  std::vector<double> out(xs.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* px = xs.data() + r * d;
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += px[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (px[i] - mu) * (px[i] - mu);
    var /= static_cast<double>(d);
    double is = 1.0 / std::sqrt(var + kEps);
    inv_std[r] = is;
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = (px[i] - mu) * is;
  }
  NodePtr xn = x.node();
  return make_result(s, std::move(out), {&x},
                     [xn, d, rows, inv_std](TensorNode& self) {
                       auto& gx = grad_buf(*xn);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* g = self.grad.data() + r * d;
                         const double* y = self.value.data() + r * d;
                         double gmean = 0.0, gy = 0.0;
                         for (std::size_t i = 0; i < d; ++i) {
                           gmean += g[i];
                           gy += g[i] * y[i];
                         }
                         gmean /= static_cast<double>(d);
                         gy /= static_cast<double>(d);
                         for (std::size_t i = 0; i < d; ++i)
                           gx[r * d + i] += inv_std[r] * (g[i] - gmean - y[i] * gy);
                       }
                     });
}

// ---- full reductions ----

Tensor mean(const Tensor& x) {
  check_defined(x, "mean");
  auto xs = x.data();
  double acc = 0.0;
  for (double v : xs) acc += v;
  const double n = static_cast<double>(xs.size());
  NodePtr xn = x.node();
  return make_result(Shape{1}, {acc / n}, {&x}, [xn, n](TensorNode& self) {
    auto& gx = grad_buf(*xn);
    const double g = self.grad[0] / n;
    for (double& v : gx) v += g;
  });
}

Tensor sum(const Tensor& x) {
  check_defined(x, "sum");
  auto xs = x.data();
  double acc = 0.0;
  for (double v : xs) acc += v;
  NodePtr xn = x.node();
  return make_result(Shape{1}, {acc}, {&x}, [xn](TensorNode& self) {
    auto& gx = grad_buf(*xn);
    const double g = self.grad[0];
    for (double& v : gx) v += g;
  });
}

Tensor variance(const Tensor& x) {
  check_defined(x, "variance");
  auto xs = x.data();
  const double n = static_cast<double>(xs.size());
  double mu = 0.0;
  for (double v : xs) mu += v;
  mu /= n;
  double var = 0.0;
  for (double v : xs) var += (v - mu) * (v - mu);
  var /= n;
  NodePtr xn = x.node();
  return make_result(Shape{1}, {var}, {&x}, [xn, mu, n](TensorNode& self) {
    auto& gx = grad_buf(*xn);
    const double g = self.grad[0] * 2.0 / n;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * (xn->value[i] - mu);
  });
}

Tensor max(const Tensor& x) {
  check_defined(x, "max");
  auto xs = x.data();
  std::size_t arg = 0;
  for (std::size_t i = 1; i < xs.size(); ++i)
    if (xs[i] > xs[arg]) arg = i;
  NodePtr xn = x.node();
  return make_result(Shape{1}, {xs[arg]}, {&x}, [xn, arg](TensorNode& self) {
    grad_buf(*xn)[arg] += self.grad[0];
  });
}

// ---- structure ----

Tensor reshape(const Tensor& x, Shape shape) {
  check_defined(x, "reshape");
  if (shape_numel(shape) != x.size())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) +
                         " as " + shape_str(shape));
  NodePtr xn = x.node();
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {&x},
                     [xn](TensorNode& self) {
                       auto& gx = grad_buf(*xn);
                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
                     });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size())
    throw DimensionError("concat: axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(s0));
  Shape out_shape = s0;
  std::size_t axis_total = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size())
      throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i])
        throw DimensionError("concat: shape mismatch " + shape_str(s) +
                             " vs " + shape_str(s0));
    axis_total += s[axis];
  }
  out_shape[axis] = axis_total;

  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];

  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> axis_sizes;
  for (const Tensor& p : parts) axis_sizes.push_back(p.shape()[axis]);
  std::size_t offset = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    auto src = parts[pi].data();
    const std::size_t a = axis_sizes[pi];
    for (std::size_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + (o * axis_total + offset) * inner,
                  src.data() + o * a * inner, a * inner * sizeof(double));
    offset += a;
  }

  std::vector<NodePtr> pn;
  for (const Tensor& p : parts) pn.push_back(p.node());
  bool rg = false;
  for (const Tensor& p : parts) rg = rg || p.requires_grad();
  auto n = make_node(std::move(out_shape), std::move(out));
  if (g_grad_enabled && rg) {
    n->requires_grad = true;
    n->parents.assign(pn.begin(), pn.end());
    n->backprop = [pn, axis_sizes, outer, inner, axis_total](TensorNode& self) {
      std::size_t offset = 0;
      for (std::size_t pi = 0; pi < pn.size(); ++pi) {
        const std::size_t a = axis_sizes[pi];
        if (pn[pi]->requires_grad) {
          auto& g = grad_buf(*pn[pi]);
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = self.grad.data() + (o * axis_total + offset) * inner;
            double* dst = g.data() + o * a * inner;
            for (std::size_t i = 0; i < a * inner; ++i) dst[i] += src[i];
          }
        }
        offset += a;
      }
    };
  }
  return Tensor::from_node(std::move(n));
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t len) {
  check_defined(x, "slice");
  const Shape& s = x.shape();
  if (axis >= s.size())
    throw DimensionError("slice: axis out of range");
  if (start + len > s[axis])
    throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") exceeds axis size " +
                         std::to_string(s[axis]));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape out_shape = s;
  out_shape[axis] = len;
  std::vector<double> out(outer * len * inner);
  auto xs = x.data();
  const std::size_t a = s[axis];
  for (std::size_t o = 0; o < outer; ++o)
    std::memcpy(out.data() + o * len * inner,
                xs.data() + (o * a + start) * inner, len * inner * sizeof(double));
  NodePtr xn = x.node();
  return make_result(std::move(out_shape), std::move(out), {&x},
                     [xn, outer, inner, a, start, len](TensorNode& self) {
                       auto& gx = grad_buf(*xn);
                       for (std::size_t o = 0; o < outer; ++o) {
                         const double* src = self.grad.data() + o * len * inner;
                         double* dst = gx.data() + (o * a + start) * inner;
                         for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                       }
                     });
}

Tensor row(const Tensor& x, std::size_t i) {
  check_defined(x, "row");
  if (x.rank() != 2) throw DimensionError("row: expects a rank-2 tensor");
  Tensor r = slice(x, 0, i, 1);
  return reshape(r, Shape{x.shape()[1]});
}

Tensor transpose(const Tensor& x) {
  check_defined(x, "transpose");
  const Shape& s = x.shape();
  if (s.size() != 2) throw DimensionError("transpose: expects a rank-2 tensor");
  const std::size_t r = s[0], c = s[1];
  auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xs[i * c + j];
  NodePtr xn = x.node();
  return make_result(Shape{c, r}, std::move(out), {&x},
                     [xn, r, c](TensorNode& self) {
                       auto& gx = grad_buf(*xn);
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j)
                           gx[i * c + j] += self.grad[j * r + i];
                     });
}

Tensor flatten_spatial(const Tensor& x) {
  check_defined(x, "flatten_spatial");
  const Shape& s = x.shape();
  if (s.size() != 3) throw DimensionError("flatten_spatial: expects [C x H x W]");
  const std::size_t c = s[0], hw = s[1] * s[2];
  auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) out[p * c + ch] = xs[ch * hw + p];
  NodePtr xn = x.node();
  return make_result(Shape{hw, c}, std::move(out), {&x},
                     [xn, c, hw](TensorNode& self) {
                       auto& gx = grad_buf(*xn);
                       for (std::size_t ch = 0; ch < c; ++ch)
                         for (std::size_t p = 0; p < hw; ++p)
                           gx[ch * hw + p] += self.grad[p * c + ch];
                     });
}

Tensor unflatten_spatial(const Tensor& x, std::size_t h, std::size_t w) {
  check_defined(x, "unflatten_spatial");
  const Shape& s = x.shape();
  if (s.size() != 2 || s[0] != h * w)
    throw DimensionError("unflatten_spatial: shape " + shape_str(s) +
                         " does not match " + std::to_string(h) + "x" +
                         std::to_string(w) + " grid");
  const std::size_t c = s[1], hw = h * w;
  auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t ch = 0; ch < c; ++ch) out[ch * hw + p] = xs[p * c + ch];
  NodePtr xn = x.node();
  return make_result(Shape{c, h, w}, std::move(out), {&x},
                     [xn, c, hw](TensorNode& self) {
                       auto& gx = grad_buf(*xn);
                       for (std::size_t p = 0; p < hw; ++p)
                         for (std::size_t ch = 0; ch < c; ++ch)
                           gx[p * c + ch] += self.grad[ch * hw + p];
                     });
}

Tensor take_per_row(const Tensor& x, const std::vector<std::size_t>& idx) {
  check_defined(x, "take_per_row");
  const Shape& s = x.shape();
  if (s.size() != 2) throw DimensionError("take_per_row: expects [R x C]");
  if (idx.size() != s[0])
    throw DimensionError("take_per_row: index count " + std::to_string(idx.size()) +
                         " != row count " + std::to_string(s[0]));
  const std::size_t c = s[1];
  std::vector<double> out(s[0]);
  auto xs = x.data();
  for (std::size_t r = 0; r < s[0]; ++r) {
    if (idx[r] >= c) throw DimensionError("take_per_row: column index out of range");
    out[r] = xs[r * c + idx[r]];
  }
  NodePtr xn = x.node();
  return make_result(Shape{s[0]}, std::move(out), {&x},
                     [xn, idx, c](TensorNode& self) {
                       auto& gx = grad_buf(*xn);
                       for (std::size_t r = 0; r < idx.size(); ++r)
                         gx[r * c + idx[r]] += self.grad[r];
                     });
}

Tensor tile_channels(const Tensor& x, std::size_t c) {
  check_defined(x, "tile_channels");
  const Shape& s = x.shape();
  if (s.size() != 3 || s[0] != 1)
    throw DimensionError("tile_channels: expects [1 x h x w], got " + shape_str(s));
  const std::size_t hw = s[1] * s[2];
  auto xs = x.data();
  std::vector<double> out(c * hw);
  for (std::size_t ch = 0; ch < c; ++ch)
    std::memcpy(out.data() + ch * hw, xs.data(), hw * sizeof(double));
  NodePtr xn = x.node();
  return make_result(Shape{c, s[1], s[2]}, std::move(out), {&x},
                     [xn, c, hw](TensorNode& self) {
                       auto& gx = grad_buf(*xn);
                       for (std::size_t ch = 0; ch < c; ++ch)
                         for (std::size_t p = 0; p < hw; ++p)
                           gx[p] += self.grad[ch * hw + p];
                     });
}

Tensor tile_rows(const Tensor& x, std::size_t r) {
  check_defined(x, "tile_rows");
  if (x.rank() != 1)
    throw DimensionError("tile_rows: expects a rank-1 tensor, got " +
                         shape_str(x.shape()));
  const std::size_t c = x.shape()[0];
  auto xs = x.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    std::memcpy(out.data() + i * c, xs.data(), c * sizeof(double));
  NodePtr xn = x.node();
  return make_result(Shape{r, c}, std::move(out), {&x},
                     [xn, r, c](TensorNode& self) {
                       auto& gx = grad_buf(*xn);
                       for (std::size_t i = 0; i < r; ++i)
                         for (std::size_t j = 0; j < c; ++j)
                           gx[j] += self.grad[i * c + j];
                     });
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw DimensionError("matmul: incompatible shapes " + shape_str(sa) +
                         " and " + shape_str(sb));
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  auto as = a.data(), bs = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = as[i * k + p];
      if (av == 0.0) continue;
      const double* brow = bs.data() + p * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  NodePtr an = a.node(), bn = b.node();
  return make_result(Shape{m, n}, std::move(out), {&a, &b},
                     [an, bn, m, k, n](TensorNode& self) {
                       if (an->requires_grad) {
                         auto& ga = grad_buf(*an);
                         // ga += g @ b^T
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t p = 0; p < k; ++p) {
                             const double* g = self.grad.data() + i * n;
                             const double* brow = bn->value.data() + p * n;
                             double acc = 0.0;
                             for (std::size_t j = 0; j < n; ++j) acc += g[j] * brow[j];
                             ga[i * k + p] += acc;
                           }
                       }
                       if (bn->requires_grad) {
                         auto& gb = grad_buf(*bn);
                         // gb += a^T @ g
                         for (std::size_t p = 0; p < k; ++p)
                           for (std::size_t i = 0; i < m; ++i) {
                             const double av = an->value[i * k + p];
                             if (av == 0.0) continue;
                             const double* g = self.grad.data() + i * n;
                             double* grow = gb.data() + p * n;
                             for (std::size_t j = 0; j < n; ++j) grow[j] += av * g[j];
                           }
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  check_defined(x, "linear");
  check_defined(w, "linear");
  const bool vec = x.rank() == 1;
  Tensor x2 = vec ? reshape(x, Shape{1, x.shape()[0]}) : x;
  if (x2.rank() != 2 || w.rank() != 2 || x2.shape()[1] != w.shape()[0])
    throw DimensionError("linear: incompatible shapes " + shape_str(x.shape()) +
                         " and " + shape_str(w.shape()));
  Tensor y = matmul(x2, w);
  if (b.defined()) {
    const std::size_t n = w.shape()[1];
    if (b.size() != n)
      throw DimensionError("linear: bias size " + std::to_string(b.size()) +
                           " != output width " + std::to_string(n));
    const std::size_t rows = y.shape()[0];
    auto ys = y.data();
    auto bs = b.data();
    std::vector<double> out(ys.size());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < n; ++j) out[r * n + j] = ys[r * n + j] + bs[j];
    NodePtr yn = y.node(), bn = b.node();
    y = make_result(y.shape(), std::move(out), {&y, &b},
                    [yn, bn, rows, n](TensorNode& self) {
                      if (yn->requires_grad) {
                        auto& gy = grad_buf(*yn);
                        for (std::size_t i = 0; i < gy.size(); ++i) gy[i] += self.grad[i];
                      }
                      if (bn->requires_grad) {
                        auto& gb = grad_buf(*bn);
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t j = 0; j < n; ++j)
                            gb[j] += self.grad[r * n + j];
                      }
                    });
  }
  return vec ? reshape(y, Shape{w.shape()[1]}) : y;
}

// ---- conv2d ----

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              const Conv2dOpts& opts) {
  check_defined(x, "conv2d");
  check_defined(w, "conv2d");
  const Shape& sx = x.shape();
  const Shape& sw = w.shape();
  if (sx.size() != 3) throw DimensionError("conv2d: input must be [Cin x H x W], got " + shape_str(sx));
  if (sw.size() != 4) throw DimensionError("conv2d: weights must be [Cout x Cin/g x kh x kw], got " + shape_str(sw));
  if (opts.dilation < 1 || opts.stride < 1)
    throw ConfigError("conv2d: stride and dilation must be >= 1");
  const std::size_t cin = sx[0], h = sx[1], wdt = sx[2];
  const std::size_t cout = sw[0], cin_g = sw[1], kh = sw[2], kw = sw[3];
  const std::size_t g = opts.groups;
  if (g == 0 || cin % g != 0 || cout % g != 0 || cin / g != cin_g)
    throw ConfigError("conv2d: channel/group mismatch: cin=" + std::to_string(cin) +
                      " cout=" + std::to_string(cout) + " groups=" + std::to_string(g) +
                      " weight cin/g=" + std::to_string(cin_g));
  if (bias.defined() && bias.size() != cout)
    throw DimensionError("conv2d: bias size != cout");
  const std::ptrdiff_t eff_kh = static_cast<std::ptrdiff_t>(opts.dilation * (kh - 1) + 1);
  const std::ptrdiff_t eff_kw = static_cast<std::ptrdiff_t>(opts.dilation * (kw - 1) + 1);
  const std::ptrdiff_t oh_n = static_cast<std::ptrdiff_t>(h + 2 * opts.padding) - eff_kh;
  const std::ptrdiff_t ow_n = static_cast<std::ptrdiff_t>(wdt + 2 * opts.padding) - eff_kw;
  if (oh_n < 0 || ow_n < 0)
    throw DimensionError("conv2d: kernel does not fit input " + shape_str(sx));
  const std::size_t oh = static_cast<std::size_t>(oh_n) / opts.stride + 1;
  const std::size_t ow = static_cast<std::size_t>(ow_n) / opts.stride + 1;

  const std::size_t cout_g = cout / g;
  auto xs = x.data();
  auto ws = w.data();
  std::vector<double> out(cout * oh * ow, 0.0);
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(opts.padding);
  for (std::size_t oc = 0; oc < cout; ++oc) {
    const std::size_t grp = oc / cout_g;
    const double bv = bias.defined() ? bias.data()[oc] : 0.0;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = bv;
        for (std::size_t ic = 0; ic < cin_g; ++ic) {
          const std::size_t xc = grp * cin_g + ic;
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * opts.stride + ky * opts.dilation) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * opts.stride + kx * opts.dilation) - pad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wdt)) continue;
              acc += xs[(xc * h + iy) * wdt + ix] *
                     ws[((oc * cin_g + ic) * kh + ky) * kw + kx];
            }
          }
        }
        out[(oc * oh + oy) * ow + ox] = acc;
      }
  }

  NodePtr xn = x.node(), wn = w.node(), bn = bias.defined() ? bias.node() : nullptr;
  Conv2dOpts o = opts;
  auto n = make_node(Shape{cout, oh, ow}, std::move(out));
  bool rg = x.requires_grad() || w.requires_grad() ||
            (bias.defined() && bias.requires_grad());
  if (g_grad_enabled && rg) {
    n->requires_grad = true;
    n->parents.push_back(xn);
    n->parents.push_back(wn);
    if (bn) n->parents.push_back(bn);
    n->backprop = [xn, wn, bn, o, cin, h, wdt, cout, cin_g, kh, kw, oh, ow,
                   cout_g](TensorNode& self) {
      const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(o.padding);
      const bool need_gx = xn->requires_grad;
      const bool need_gw = wn->requires_grad;
      double* gx = need_gx ? grad_buf(*xn).data() : nullptr;
      double* gw = need_gw ? grad_buf(*wn).data() : nullptr;
      double* gb = (bn && bn->requires_grad) ? grad_buf(*bn).data() : nullptr;
      for (std::size_t oc = 0; oc < cout; ++oc) {
        const std::size_t grp = oc / cout_g;
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const double gout = self.grad[(oc * oh + oy) * ow + ox];
            if (gout == 0.0) continue;
            if (gb) gb[oc] += gout;
            for (std::size_t ic = 0; ic < cin_g; ++ic) {
              const std::size_t xc = grp * cin_g + ic;
              for (std::size_t ky = 0; ky < kh; ++ky) {
                const std::ptrdiff_t iy =
                    static_cast<std::ptrdiff_t>(oy * o.stride + ky * o.dilation) - pad;
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const std::ptrdiff_t ix =
                      static_cast<std::ptrdiff_t>(ox * o.stride + kx * o.dilation) - pad;
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wdt)) continue;
                  const std::size_t xi = (xc * h + iy) * wdt + ix;
                  const std::size_t wi = ((oc * cin_g + ic) * kh + ky) * kw + kx;
                  if (need_gx) gx[xi] += gout * wn->value[wi];
                  if (need_gw) gw[wi] += gout * xn->value[xi];
                }
              }
            }
          }
      }
    };
  }
  return Tensor::from_node(std::move(n));
}

// ---- pooling / resampling ----

Tensor adaptive_max_pool2d(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  check_defined(x, "adaptive_max_pool2d");
  const Shape& s = x.shape();
  if (s.size() != 3) throw DimensionError("adaptive_max_pool2d: input must be [C x H x W]");
  const std::size_t c = s[0], h = s[1], w = s[2];
  if (out_h == 0 || out_w == 0 || out_h > h || out_w > w)
    throw ConfigError("adaptive_max_pool2d: output " + std::to_string(out_h) + "x" +
                      std::to_string(out_w) + " exceeds input " + std::to_string(h) +
                      "x" + std::to_string(w));
  auto xs = x.data();
  std::vector<double> out(c * out_h * out_w);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const std::size_t y0 = (oy * h) / out_h;
      const std::size_t y1 = ((oy + 1) * h + out_h - 1) / out_h;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const std::size_t x0 = (ox * w) / out_w;
        const std::size_t x1 = ((ox + 1) * w + out_w - 1) / out_w;
        std::size_t best = (ch * h + y0) * w + x0;
        for (std::size_t iy = y0; iy < y1; ++iy)
          for (std::size_t ix = x0; ix < x1; ++ix) {
            const std::size_t idx = (ch * h + iy) * w + ix;
            if (xs[idx] > xs[best]) best = idx;
          }
        const std::size_t oi = (ch * out_h + oy) * out_w + ox;
        out[oi] = xs[best];
        argmax[oi] = best;
      }
    }
  NodePtr xn = x.node();
  return make_result(Shape{c, out_h, out_w}, std::move(out), {&x},
                     [xn, argmax](TensorNode& self) {
                       auto& gx = grad_buf(*xn);
                       for (std::size_t i = 0; i < argmax.size(); ++i)
                         gx[argmax[i]] += self.grad[i];
                     });
}

Tensor upsample_nearest2x(const Tensor& x) {
  check_defined(x, "upsample_nearest2x");
  const Shape& s = x.shape();
  if (s.size() != 3) throw DimensionError("upsample_nearest2x: input must be [C x H x W]");
  const std::size_t c = s[0], h = s[1], w = s[2];
  std::vector<double> out(c * 2 * h * 2 * w);
  auto xs = x.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx)
        out[(ch * 2 * h + y) * 2 * w + xx] = xs[(ch * h + y / 2) * w + xx / 2];
  NodePtr xn = x.node();
  return make_result(Shape{c, 2 * h, 2 * w}, std::move(out), {&x},
                     [xn, c, h, w](TensorNode& self) {
                       auto& gx = grad_buf(*xn);
                       for (std::size_t ch = 0; ch < c; ++ch)
                         for (std::size_t y = 0; y < 2 * h; ++y)
                           for (std::size_t xx = 0; xx < 2 * w; ++xx)
                             gx[(ch * h + y / 2) * w + xx / 2] +=
                                 self.grad[(ch * 2 * h + y) * 2 * w + xx];
                     });
}

Tensor bilinear_sample(const Tensor& feat, const Tensor& points) {
  check_defined(feat, "bilinear_sample");
  check_defined(points, "bilinear_sample");
  const Shape& sf = feat.shape();
  const Shape& sp = points.shape();
  if (sf.size() != 3) throw DimensionError("bilinear_sample: features must be [C x H x W]");
  if (sp.size() != 2 || sp[1] != 2)
    throw DimensionError("bilinear_sample: points must be [P x 2], got " + shape_str(sp));
  const std::size_t c = sf[0], h = sf[1], w = sf[2], p = sp[0];
  auto fs = feat.data();
  auto ps = points.data();
  for (double v : ps)
    if (!std::isfinite(v)) throw NumericError("bilinear_sample: non-finite sample point");

  // (u, v) in [0,1]^2 maps onto cell centers: u=0 -> column 0, u=1 -> column W-1
  struct Corner {
    std::size_t x0, x1, y0, y1;
    double fx, fy;     // fractional parts
    bool interior_x, interior_y;  // inside the clamp range (grad wrt coords)
  };
  std::vector<Corner> corners(p);
  std::vector<double> out(p * c);
  for (std::size_t i = 0; i < p; ++i) {
    double u = ps[i * 2 + 0], v = ps[i * 2 + 1];
    double px = u * static_cast<double>(w - 1);
    double py = v * static_cast<double>(h - 1);
    const double px_raw = px, py_raw = py;
    px = std::min(std::max(px, 0.0), static_cast<double>(w - 1));
    py = std::min(std::max(py, 0.0), static_cast<double>(h - 1));
    Corner cr;
    cr.x0 = static_cast<std::size_t>(px);
    cr.y0 = static_cast<std::size_t>(py);
    if (cr.x0 >= w - 1 && w > 1) cr.x0 = w - 2;
    if (cr.y0 >= h - 1 && h > 1) cr.y0 = h - 2;
    cr.x1 = (w > 1) ? cr.x0 + 1 : cr.x0;
    cr.y1 = (h > 1) ? cr.y0 + 1 : cr.y0;
    cr.fx = (w > 1) ? px - static_cast<double>(cr.x0) : 0.0;
    cr.fy = (h > 1) ? py - static_cast<double>(cr.y0) : 0.0;
    cr.interior_x = px_raw > 0.0 && px_raw < static_cast<double>(w - 1);
    cr.interior_y = py_raw > 0.0 && py_raw < static_cast<double>(h - 1);
    corners[i] = cr;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* plane = fs.data() + ch * h * w;
      const double v00 = plane[cr.y0 * w + cr.x0];
      const double v01 = plane[cr.y0 * w + cr.x1];
      const double v10 = plane[cr.y1 * w + cr.x0];
      const double v11 = plane[cr.y1 * w + cr.x1];
      out[i * c + ch] = (1 - cr.fy) * ((1 - cr.fx) * v00 + cr.fx * v01) +
                        cr.fy * ((1 - cr.fx) * v10 + cr.fx * v11);
    }
  }
  NodePtr fn = feat.node(), pn = points.node();
  return make_result(Shape{p, c}, std::move(out), {&feat, &points},
                     [fn, pn, corners, c, h, w](TensorNode& self) {
                       const bool need_gf = fn->requires_grad;
                       const bool need_gp = pn->requires_grad;
                       double* gf = need_gf ? grad_buf(*fn).data() : nullptr;
                       double* gp = need_gp ? grad_buf(*pn).data() : nullptr;
                       for (std::size_t i = 0; i < corners.size(); ++i) {
                         const Corner& cr = corners[i];
                         for (std::size_t ch = 0; ch < c; ++ch) {
                           const double g = self.grad[i * c + ch];
                           if (g == 0.0) continue;
                           const double* plane = fn->value.data() + ch * h * w;
                           if (need_gf) {
                             double* gplane = gf + ch * h * w;
                             gplane[cr.y0 * w + cr.x0] += g * (1 - cr.fy) * (1 - cr.fx);
                             gplane[cr.y0 * w + cr.x1] += g * (1 - cr.fy) * cr.fx;
                             gplane[cr.y1 * w + cr.x0] += g * cr.fy * (1 - cr.fx);
                             gplane[cr.y1 * w + cr.x1] += g * cr.fy * cr.fx;
                           }
                           if (need_gp) {
                             const double v00 = plane[cr.y0 * w + cr.x0];
                             const double v01 = plane[cr.y0 * w + cr.x1];
                             const double v10 = plane[cr.y1 * w + cr.x0];
                             const double v11 = plane[cr.y1 * w + cr.x1];
                             if (cr.interior_x) {
                               const double dfx = (1 - cr.fy) * (v01 - v00) + cr.fy * (v11 - v10);
                               gp[i * 2 + 0] += g * dfx * static_cast<double>(w - 1);
                             }
                             if (cr.interior_y) {
                               const double dfy = (1 - cr.fx) * (v10 - v00) + cr.fx * (v11 - v01);
                               gp[i * 2 + 1] += g * dfy * static_cast<double>(h - 1);
                             }
                           }
                         }
                       }
                     });
}

Tensor topk_softmax_gate(const Tensor& logits, std::size_t top_k,
                         double temperature) {
  check_defined(logits, "topk_softmax_gate");
  const Shape& s = logits.shape();
  if (s.size() != 3) throw DimensionError("topk_softmax_gate: logits must be [E x h x w]");
  const std::size_t e = s[0], hw = s[1] * s[2];
  if (top_k == 0 || top_k > e)
    throw ConfigError("topk_softmax_gate: top_k=" + std::to_string(top_k) +
                      " outside [1, " + std::to_string(e) + "]");
  if (temperature <= 0.0) throw ConfigError("topk_softmax_gate: temperature must be positive");
  auto xs = logits.data();
  std::vector<double> out(xs.size(), 0.0);
  std::vector<std::size_t> chosen(hw * top_k);
  std::vector<std::size_t> order(e);
  for (std::size_t p = 0; p < hw; ++p) {
    for (std::size_t i = 0; i < e; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return xs[a * hw + p] > xs[b * hw + p];
    });
    double mx = xs[order[0] * hw + p] / temperature;
    double denom = 0.0;
    for (std::size_t k = 0; k < top_k; ++k) {
      chosen[p * top_k + k] = order[k];
      denom += std::exp(xs[order[k] * hw + p] / temperature - mx);
    }
    for (std::size_t k = 0; k < top_k; ++k) {
      const std::size_t i = order[k];
      out[i * hw + p] = std::exp(xs[i * hw + p] / temperature - mx) / denom;
    }
  }
  NodePtr xn = logits.node();
  return make_result(s, std::move(out), {&logits},
                     [xn, chosen, top_k, hw, temperature](TensorNode& self) {
                       auto& gx = grad_buf(*xn);
                       const std::size_t locs = chosen.size() / top_k;
                       for (std::size_t p = 0; p < locs; ++p) {
                         double dot = 0.0;
                         for (std::size_t k = 0; k < top_k; ++k) {
                           const std::size_t i = chosen[p * top_k + k];
                           dot += self.grad[i * hw + p] * self.value[i * hw + p];
                         }
                         for (std::size_t k = 0; k < top_k; ++k) {
                           const std::size_t i = chosen[p * top_k + k];
                           const double y = self.value[i * hw + p];
                           gx[i * hw + p] += y * (self.grad[i * hw + p] - dot) / temperature;
                         }
                       }
                     });
}

// ---- parameters & optimizer ----

Parameter& ParamStore::create(const std::string& name, Tensor init) {
  for (auto& p : params_)
    if (p->name == name)
      throw ConfigError("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->tensor = Tensor(init.shape(), std::vector<double>(init.data().begin(), init.data().end()), true);
  p->m.assign(p->tensor.size(), 0.0);
  p->v.assign(p->tensor.size(), 0.0);
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter* ParamStore::find(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->tensor.size();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& p : params_) p->tensor.zero_grad();
}

void adamw_step(ParamStore& params, const AdamWOpts& opts, std::size_t step) {
  if (step == 0) throw ContractError("adamw_step: step counts from 1");
  const double bc1 = 1.0 - std::pow(opts.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(opts.beta2, static_cast<double>(step));
  for (auto& p : params.all()) {
    Parameter& pm = const_cast<Parameter&>(*p);
    if (!pm.tensor.has_grad())
      throw ContractError("adamw_step: parameter '" + pm.name + "' has no gradient");
    auto g = pm.tensor.grad();
    auto wv = pm.tensor.raw();
    for (std::size_t i = 0; i < wv.size(); ++i) {
      pm.m[i] = opts.beta1 * pm.m[i] + (1.0 - opts.beta1) * g[i];
      pm.v[i] = opts.beta2 * pm.v[i] + (1.0 - opts.beta2) * g[i] * g[i];
      const double mhat = pm.m[i] / bc1;
      const double vhat = pm.v[i] / bc2;
      wv[i] -= opts.lr * (mhat / (std::sqrt(vhat) + opts.eps) +
                          opts.weight_decay * wv[i]);
    }
  }
}

double clip_grad_norm(ParamStore& params, double max_norm) {
  double sq = 0.0;
  for (auto& p : params.all())
    if (p->tensor.has_grad())
      for (double g : p->tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (auto& p : params.all())
      if (p->tensor.has_grad()) {
        auto& n = *p->tensor.node();
        for (double& g : n.grad) g *= scale;
      }
  }
  return norm;
}

double cosine_lr(std::size_t step, std::size_t total, double lr0) {
  if (total == 0) throw ContractError("cosine_lr: total must be positive");
  if (step >= total) return 0.0;
  const double t = static_cast<double>(step) / static_cast<double>(total);
  return lr0 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

}  // namespace wrc
