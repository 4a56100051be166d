#pragma once
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "wrcfusion/rng.hpp"

namespace wrc {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<double> grad;  // allocated lazily during backward
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;  // scatter grad into parents
  bool backward_used = false;                 // set on the loss root

  std::size_t numel() const { return value.size(); }
};

using NodePtr = std::shared_ptr<TensorNode>;

}  // namespace detail

// Dense 64-bit float tensor participating in a dynamically recorded
// reverse-mode differentiation graph. Values are immutable once the tensor
// has been consumed by an op; gradients accumulate into `grad`.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false);
  static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi,
                             bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  bool requires_grad() const;

  std::span<const double> data() const;
  // Mutable access to the underlying buffer. Only valid for leaf tensors
  // (parameters, inputs) between graph passes.
  std::span<double> raw();

  double item() const;  // scalar value; ContractError if size != 1
  double operator()(std::size_t i) const;
  double operator()(std::size_t i, std::size_t j) const;
  double operator()(std::size_t i, std::size_t j, std::size_t k) const;
  double operator()(std::size_t i, std::size_t j, std::size_t k,
                    std::size_t l) const;

  bool has_grad() const;
  std::span<const double> grad() const;  // ContractError if absent
  void zero_grad();

  detail::NodePtr node() const { return node_; }
  static Tensor from_node(detail::NodePtr n);

 private:
  detail::NodePtr node_;
};

// Scoped switch that disables graph recording (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// Reverse topological sweep from a scalar loss. Populates grad on every
// reachable tensor that requires grad. Calling twice on the same loss
// without rebuilding the graph is an error.
void backward(const Tensor& loss);

// ---- elementwise / reduction kernels ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
// broadcast-add of a scalar tensor (learnable scalar bias)
Tensor add_scalar_tensor(const Tensor& x, const Tensor& s);
Tensor neg(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor pow_scalar(const Tensor& x, double p);
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x);  // normalizes the last axis, eps 1e-12
Tensor mean(const Tensor& x);
Tensor variance(const Tensor& x);  // population variance
Tensor max(const Tensor& x);       // grad routes to the first argmax
Tensor sum(const Tensor& x);

// ---- structure kernels ----
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t len);
Tensor row(const Tensor& x, std::size_t i);  // [R x C] -> [C]
Tensor transpose(const Tensor& x);           // 2-D only
// [C x H x W] -> [H*W x C] (token-major view used by attention)
Tensor flatten_spatial(const Tensor& x);
// [N x C] -> [C x H x W], inverse of flatten_spatial
Tensor unflatten_spatial(const Tensor& x, std::size_t h, std::size_t w);
// per-row gather: out[i] = x[i, idx[i]]
Tensor take_per_row(const Tensor& x, const std::vector<std::size_t>& idx);
// repeat a [1 x h x w] plane across c channels -> [c x h x w]
Tensor tile_channels(const Tensor& x, std::size_t c);
// repeat a [C] vector across r rows -> [r x C]
Tensor tile_rows(const Tensor& x, std::size_t r);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);  // [MxK]@[KxN]
// x [K] or [MxK], w [KxN], optional bias [N]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor());

// ---- conv / pooling / sampling ----
struct Conv2dOpts {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
  std::size_t groups = 1;
};
// x [Cin x H x W], w [Cout x Cin/groups x kh x kw], optional bias [Cout]
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              const Conv2dOpts& opts);
Tensor adaptive_max_pool2d(const Tensor& x, std::size_t out_h,
                           std::size_t out_w);
Tensor upsample_nearest2x(const Tensor& x);
// feat [C x H x W], points [P x 2] of (u, v) in [0,1]^2 -> [P x C].
// Out-of-range points clamp to the border; differentiable in both inputs.
Tensor bilinear_sample(const Tensor& feat, const Tensor& points);

// sparse gate: per spatial location keep the top_k logits, softmax them at
// the given temperature, zero the rest. logits [E x h x w].
Tensor topk_softmax_gate(const Tensor& logits, std::size_t top_k,
                         double temperature);

// ---- parameters & optimizer ----
struct Parameter {
  Tensor tensor;
  std::string name;
  std::vector<double> m;  // AdamW first moment
  std::vector<double> v;  // AdamW second moment
};

// Owning registry of named parameters; names must be unique.
class ParamStore {
 public:
  Parameter& create(const std::string& name, Tensor init);
  Parameter* find(const std::string& name);
  const std::vector<std::unique_ptr<Parameter>>& all() const { return params_; }
  std::size_t total_elements() const;
  void zero_grads();

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

struct AdamWOpts {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// One decoupled-weight-decay Adam update. `step` counts from 1.
void adamw_step(ParamStore& params, const AdamWOpts& opts, std::size_t step);

// global-norm gradient clipping; returns the pre-clip norm
double clip_grad_norm(ParamStore& params, double max_norm);

double cosine_lr(std::size_t step, std::size_t total, double lr0);

}  // namespace wrc
