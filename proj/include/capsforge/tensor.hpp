// Dense tensors with reverse-mode automatic differentiation.
//
// Every op builds a tape node holding the forward value and a backward
// closure. Gradient accumulation loops run in a fixed order and parallel
// sections split over independent output slots only, so repeated runs are
// bit-identical for any thread count.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "capsforge/core.hpp"

namespace capsforge {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i)
    s += (i ? "x" : "") + std::to_string(shape[i]);
  return s + "]";
}

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated lazily, same length as values
  bool requires_grad = false;
  bool is_leaf = true;
  bool backward_done = false;
  const char* op = "leaf";
  std::string label;
  std::vector<NodePtr> parents;
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
  }
};

// Value-semantics handle over a shared tape node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), 0.0, requires_grad);
  }

  static Tensor filled(Shape shape, double value, bool requires_grad = false) {
    auto n = std::make_shared<TensorNode>();
    n->values.assign(size_t(numel(shape)), value);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(std::vector<double> values, Shape shape,
                     bool requires_grad = false) {
    if (int64_t(values.size()) != numel(shape))
      fail("tensor: ", values.size(), " values do not fill shape ",
           shape_str(shape));
    auto n = std::make_shared<TensorNode>();
    n->values = std::move(values);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({v}, {1}, requires_grad);
  }

  // Glorot/Xavier-uniform init over [-sqrt(6/(fan_in+fan_out)), +..].
  static Tensor glorot(Shape shape, int fan_in, int fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / double(fan_in + fan_out));
    auto n = std::make_shared<TensorNode>();
    n->values.resize(size_t(numel(shape)));
    for (double& v : n->values) v = rng.uniform(-bound, bound);
    n->shape = std::move(shape);
    n->requires_grad = true;
    return Tensor(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t size() const { return int64_t(node_->values.size()); }
  const std::vector<double>& values() const { return node_->values; }
  double value_at(int64_t i) const { return node_->values[size_t(i)]; }
  double scalar_value() const {
    if (node_->values.size() != 1)
      fail("scalar_value on tensor of shape ", shape_str(node_->shape));
    return node_->values[0];
  }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }
  const std::vector<double>& grad() const {
    if (node_->grad.size() != node_->values.size())
      fail("grad not populated for tensor ", shape_str(node_->shape));
    return node_->grad;
  }
  void zero_grad() {
    node_->grad.assign(node_->values.size(), 0.0);
    node_->backward_done = false;
  }

  // Leaf-only in-place update used by the optimizer between tapes.
  void apply_gradient_step(double lr, double scale = 1.0) {
    if (!node_->is_leaf) fail("gradient step on non-leaf tensor");
    node_->ensure_grad();
    for (size_t i = 0; i < node_->values.size(); ++i)
      node_->values[i] -= lr * scale * node_->grad[i];
  }

  void set_values(const std::vector<double>& values) {
    if (values.size() != node_->values.size())
      fail("set_values: size mismatch");
    node_->values = values;
  }

  void set_label(std::string label) { node_->label = std::move(label); }
  const std::string& label() const { return node_->label; }
  const char* op_name() const { return node_->op; }

  NodePtr node() const { return node_; }

 private:
  NodePtr node_;
};

// Builds a non-leaf node; requires_grad is inherited from parents.
inline Tensor make_op(const char* op, Shape shape, std::vector<double> values,
                      std::vector<Tensor> parents,
                      std::function<void(TensorNode&)> backward_fn) {
  auto n = std::make_shared<TensorNode>();
  if (int64_t(values.size()) != numel(shape))
    fail("op ", op, ": ", values.size(), " values do not fill shape ",
         shape_str(shape));
  n->shape = std::move(shape);
  n->values = std::move(values);
  n->is_leaf = false;
  n->op = op;
  bool needs = false;
  n->parents.reserve(parents.size());
  for (const Tensor& p : parents) {
    needs = needs || p.requires_grad();
    n->parents.push_back(p.node());
  }
  n->requires_grad = needs;
  if (needs) n->backward_fn = std::move(backward_fn);
  return Tensor(std::move(n));
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

namespace detail {
inline void topo_order(const NodePtr& root, std::vector<TensorNode*>& order) {
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* parent = node->parents[next++].get();
      if (seen.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
}
}  // namespace detail

// Populates grad on every requires_grad node reachable from `loss`.
// Leaves accumulate across calls (mini-batch summation); invoking backward a
// second time on the same recorded graph is an error.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1)
    fail("backward requires a scalar loss, got shape ",
         shape_str(loss.shape()));
  TensorNode* root = loss.node().get();
  if (root->backward_done)
    fail("backward already ran on this graph; rebuild the forward pass or "
         "reset gradients first");
  if (!root->requires_grad) return;

  std::vector<TensorNode*> order;
  detail::topo_order(loss.node(), order);
  for (TensorNode* n : order)
    if (n->requires_grad && !n->is_leaf) n->grad.assign(n->values.size(), 0.0);
  for (TensorNode* n : order)
    if (n->requires_grad && n->is_leaf) n->ensure_grad();

  root->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->requires_grad && n->backward_fn) n->backward_fn(*n);
    if (!n->is_leaf) n->backward_done = true;
  }
}

// First node in execution order whose values contain a non-finite entry.
// Used to attribute NaN/Inf losses to the op that produced them.
inline std::string first_nonfinite_op(const Tensor& loss) {
  std::vector<TensorNode*> order;
  detail::topo_order(loss.node(), order);
  for (TensorNode* n : order) {
    for (size_t i = 0; i < n->values.size(); ++i) {
      if (!std::isfinite(n->values[i])) {
        std::string where = n->label.empty() ? std::string(n->op)
                                             : n->label + " (" + n->op + ")";
        return cat(where, " value[", i, "] = ", n->values[i]);
      }
    }
  }
  return "no non-finite tensor found";
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

namespace detail {
inline void check_same_shape(const char* op, const Tensor& a,
                             const Tensor& b) {
  if (a.shape() != b.shape())
    fail(op, ": shape mismatch ", shape_str(a.shape()), " vs ",
         shape_str(b.shape()));
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("add", a, b);
  std::vector<double> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] += b.value_at(int64_t(i));
  return make_op("add", a.shape(), std::move(out), {a, b},
                 [](TensorNode& n) {
                   for (int k = 0; k < 2; ++k) {
                     TensorNode& p = *n.parents[k];
                     if (!p.requires_grad) continue;
                     for (size_t i = 0; i < n.grad.size(); ++i)
                       p.grad[i] += n.grad[i];
                   }
                 });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("sub", a, b);
  std::vector<double> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] -= b.value_at(int64_t(i));
  return make_op("sub", a.shape(), std::move(out), {a, b},
                 [](TensorNode& n) {
                   TensorNode& pa = *n.parents[0];
                   TensorNode& pb = *n.parents[1];
                   if (pa.requires_grad)
                     for (size_t i = 0; i < n.grad.size(); ++i)
                       pa.grad[i] += n.grad[i];
                   if (pb.requires_grad)
                     for (size_t i = 0; i < n.grad.size(); ++i)
                       pb.grad[i] -= n.grad[i];
                 });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("mul", a, b);
  std::vector<double> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b.value_at(int64_t(i));
  return make_op("mul", a.shape(), std::move(out), {a, b},
                 [](TensorNode& n) {
                   TensorNode& pa = *n.parents[0];
                   TensorNode& pb = *n.parents[1];
                   if (pa.requires_grad)
                     for (size_t i = 0; i < n.grad.size(); ++i)
                       pa.grad[i] += n.grad[i] * pb.values[i];
                   if (pb.requires_grad)
                     for (size_t i = 0; i < n.grad.size(); ++i)
                       pb.grad[i] += n.grad[i] * pa.values[i];
                 });
}

inline Tensor scale(const Tensor& a, double k) {
  std::vector<double> out(a.values());
  for (double& v : out) v *= k;
  return make_op("scale", a.shape(), std::move(out), {a},
                 [k](TensorNode& n) {
                   TensorNode& p = *n.parents[0];
                   for (size_t i = 0; i < n.grad.size(); ++i)
                     p.grad[i] += k * n.grad[i];
                 });
}

inline Tensor sum(const Tensor& a) {
  const double total =
      std::accumulate(a.values().begin(), a.values().end(), 0.0);
  return make_op("sum", {1}, {total}, {a}, [](TensorNode& n) {
    TensorNode& p = *n.parents[0];
    const double g = n.grad[0];
    for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.values());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return make_op("relu", a.shape(), std::move(out), {a},
                 [](TensorNode& n) {
                   TensorNode& p = *n.parents[0];
                   for (size_t i = 0; i < n.grad.size(); ++i)
                     if (p.values[i] > 0.0) p.grad[i] += n.grad[i];
                 });
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.values());
  for (double& v : out) v = 1.0 / (1.0 + std::exp(-v));
  return make_op("sigmoid", a.shape(), std::move(out), {a},
                 [](TensorNode& n) {
                   TensorNode& p = *n.parents[0];
                   for (size_t i = 0; i < n.grad.size(); ++i) {
                     const double s = n.values[i];
                     p.grad[i] += n.grad[i] * s * (1.0 - s);
                   }
                 });
}

inline Tensor softmax(const Tensor& a, int axis) {
  const Shape& shape = a.shape();
  if (axis < 0 || axis >= int(shape.size()))
    fail("softmax: axis ", axis, " invalid for shape ", shape_str(shape));
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= shape[d];
  for (int d = axis + 1; d < int(shape.size()); ++d) inner *= shape[d];
  const int64_t len = shape[axis];

  std::vector<double> out(a.values());
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * len * inner + in;
      double mx = out[base];
      for (int64_t k = 1; k < len; ++k)
        mx = std::max(mx, out[base + k * inner]);
      double z = 0.0;
      for (int64_t k = 0; k < len; ++k) {
        double& v = out[base + k * inner];
        v = std::exp(v - mx);
        z += v;
      }
      for (int64_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  }
  return make_op(
      "softmax", shape, std::move(out), {a},
      [outer, inner, len](TensorNode& n) {
        TensorNode& p = *n.parents[0];
        for (int64_t o = 0; o < outer; ++o) {
          for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * len * inner + in;
            double dot = 0.0;
            for (int64_t k = 0; k < len; ++k) {
              const int64_t idx = base + k * inner;
              dot += n.grad[idx] * n.values[idx];
            }
            for (int64_t k = 0; k < len; ++k) {
              const int64_t idx = base + k * inner;
              p.grad[idx] += n.values[idx] * (n.grad[idx] - dot);
            }
          }
        }
      });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    fail("reshape: ", shape_str(a.shape()), " has ", a.size(),
         " values, target ", shape_str(shape), " needs ", numel(shape));
  return make_op("reshape", std::move(shape), a.values(), {a},
                 [](TensorNode& n) {
                   TensorNode& p = *n.parents[0];
                   for (size_t i = 0; i < n.grad.size(); ++i)
                     p.grad[i] += n.grad[i];
                 });
}

inline Tensor flatten(const Tensor& a) { return reshape(a, {int(a.size())}); }

// Stops gradient flow; the result is a constant leaf.
inline Tensor detach(const Tensor& a) {
  return Tensor::from(a.values(), a.shape(), false);
}

inline Tensor pick(const Tensor& a, int64_t index) {
  if (index < 0 || index >= a.size())
    fail("pick: index ", index, " out of range for ", shape_str(a.shape()));
  return make_op("pick", {1}, {a.value_at(index)}, {a},
                 [index](TensorNode& n) {
                   n.parents[0]->grad[size_t(index)] += n.grad[0];
                 });
}

// out[r,:] = a[r,:] * mask[r]; mask is a plain constant.
inline Tensor mask_rows(const Tensor& a, const std::vector<double>& mask) {
  const Shape& shape = a.shape();
  if (shape.size() != 2 || size_t(shape[0]) != mask.size())
    fail("mask_rows: need [R,d] tensor with R==mask size");
  const int64_t rows = shape[0], cols = shape[1];
  std::vector<double> out(a.values());
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) out[r * cols + c] *= mask[size_t(r)];
  return make_op("mask_rows", shape, std::move(out), {a},
                 [mask, rows, cols](TensorNode& n) {
                   TensorNode& p = *n.parents[0];
                   for (int64_t r = 0; r < rows; ++r)
                     for (int64_t c = 0; c < cols; ++c)
                       p.grad[r * cols + c] +=
                           n.grad[r * cols + c] * mask[size_t(r)];
                 });
}

inline Tensor dropout(const Tensor& a, double rate, Rng& rng, bool training) {
  if (rate < 0.0 || rate >= 1.0) fail("dropout: rate must be in [0,1)");
  if (!training || rate == 0.0) return a;
  const double keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(a.values().size());
  std::vector<double> out(a.values());
  for (size_t i = 0; i < out.size(); ++i) {
    const double m = rng.uniform() < rate ? 0.0 : keep_scale;
    (*mask)[i] = m;
    out[i] *= m;
  }
  return make_op("dropout", a.shape(), std::move(out), {a},
                 [mask](TensorNode& n) {
                   TensorNode& p = *n.parents[0];
                   for (size_t i = 0; i < n.grad.size(); ++i)
                     p.grad[i] += n.grad[i] * (*mask)[i];
                 });
}

// ---------------------------------------------------------------------------
// Dense layer
// ---------------------------------------------------------------------------

inline Tensor dense(const Tensor& input, const Tensor& weights,
                    const Tensor& bias) {
  if (input.shape().size() != 1 || weights.shape().size() != 2 ||
      bias.shape().size() != 1)
    fail("dense: expected input[n], weights[m,n], bias[m]");
  const int64_t n = input.shape()[0];
  const int64_t m = weights.shape()[0];
  if (weights.shape()[1] != n || bias.shape()[0] != m)
    fail("dense: dimension mismatch, input ", shape_str(input.shape()),
         " weights ", shape_str(weights.shape()), " bias ",
         shape_str(bias.shape()));

  std::vector<double> out(size_t(m));
  const double* x = input.values().data();
  const double* w = weights.values().data();
  const double* b = bias.values().data();
  parallel_for(m, [&](int64_t i) {
    const double* row = w + i * n;
    double acc = b[i];
    for (int64_t j = 0; j < n; ++j) acc += row[j] * x[j];
    out[size_t(i)] = acc;
  });
  return make_op(
      "dense", {int(m)}, std::move(out), {input, weights, bias},
      [m, n](TensorNode& node) {
        TensorNode& px = *node.parents[0];
        TensorNode& pw = *node.parents[1];
        TensorNode& pb = *node.parents[2];
        const double* g = node.grad.data();
        if (px.requires_grad) {
          const double* w = pw.values.data();
          double* dx = px.grad.data();
          parallel_for(n, [&](int64_t j) {
            double acc = 0.0;
            for (int64_t i = 0; i < m; ++i) acc += g[i] * w[i * n + j];
            dx[j] += acc;
          });
        }
        if (pw.requires_grad) {
          const double* x = px.values.data();
          double* dw = pw.grad.data();
          parallel_for(m, [&](int64_t i) {
            double* row = dw + i * n;
            const double gi = g[i];
            for (int64_t j = 0; j < n; ++j) row[j] += gi * x[j];
          });
        }
        if (pb.requires_grad)
          for (int64_t i = 0; i < m; ++i) pb.grad[size_t(i)] += g[i];
      });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

enum class Padding { valid, same };

struct ConvGeometry {
  int out_h = 0, out_w = 0;
  int pad_top = 0, pad_left = 0;
};

// "same" pads with zeros to ceil(extent/stride) outputs, splitting the pad
// symmetrically with the extra pixel on the bottom/right.
inline ConvGeometry conv_geometry(int in_h, int in_w, int kh, int kw,
                                  int stride, Padding padding) {
  if (stride < 1) fail("conv2d: stride must be >= 1, got ", stride);
  ConvGeometry g;
  if (padding == Padding::valid) {
    if (kh > in_h || kw > in_w)
      fail("conv2d: kernel ", kh, "x", kw, " exceeds input ", in_h, "x", in_w,
           " with valid padding");
    g.out_h = (in_h - kh) / stride + 1;
    g.out_w = (in_w - kw) / stride + 1;
  } else {
    g.out_h = (in_h + stride - 1) / stride;
    g.out_w = (in_w + stride - 1) / stride;
    const int pad_h = std::max(0, (g.out_h - 1) * stride + kh - in_h);
    const int pad_w = std::max(0, (g.out_w - 1) * stride + kw - in_w);
    g.pad_top = pad_h / 2;
    g.pad_left = pad_w / 2;
  }
  return g;
}

// Cross-correlation of input[C,H,W] with kernels[F,C,kh,kw].
inline Tensor conv2d(const Tensor& input, const Tensor& kernels, int stride,
                     Padding padding) {
  if (input.shape().size() != 3 || kernels.shape().size() != 4)
    fail("conv2d: expected input[C,H,W] and kernels[F,C,kh,kw], got ",
         shape_str(input.shape()), " and ", shape_str(kernels.shape()));
  const int c_in = input.shape()[0], in_h = input.shape()[1],
            in_w = input.shape()[2];
  const int f = kernels.shape()[0], kc = kernels.shape()[1],
            kh = kernels.shape()[2], kw = kernels.shape()[3];
  if (kc != c_in)
    fail("conv2d: input has ", c_in, " channels but kernels expect ", kc);
  const ConvGeometry geo = conv_geometry(in_h, in_w, kh, kw, stride, padding);

  std::vector<double> out(size_t(f) * geo.out_h * geo.out_w, 0.0);
  const double* x = input.values().data();
  const double* k = kernels.values().data();
  parallel_for(f, [&](int64_t fi) {
    double* out_map = out.data() + fi * geo.out_h * geo.out_w;
    const double* kern = k + fi * c_in * kh * kw;
    for (int oy = 0; oy < geo.out_h; ++oy) {
      for (int ox = 0; ox < geo.out_w; ++ox) {
        double acc = 0.0;
        const int y0 = oy * stride - geo.pad_top;
        const int x0 = ox * stride - geo.pad_left;
        for (int c = 0; c < c_in; ++c) {
          const double* chan = x + size_t(c) * in_h * in_w;
          const double* kchan = kern + size_t(c) * kh * kw;
          for (int ky = 0; ky < kh; ++ky) {
            const int y = y0 + ky;
            if (y < 0 || y >= in_h) continue;
            const double* row = chan + size_t(y) * in_w;
            const double* krow = kchan + size_t(ky) * kw;
            const int kx_lo = std::max(0, -x0);
            const int kx_hi = std::min(kw, in_w - x0);
            for (int kx = kx_lo; kx < kx_hi; ++kx)
              acc += row[x0 + kx] * krow[kx];
          }
        }
        out_map[size_t(oy) * geo.out_w + ox] = acc;
      }
    }
  });

  return make_op(
      "conv2d", {f, geo.out_h, geo.out_w}, std::move(out), {input, kernels},
      [c_in, in_h, in_w, f, kh, kw, stride, geo](TensorNode& node) {
        TensorNode& px = *node.parents[0];
        TensorNode& pk = *node.parents[1];
        const double* g = node.grad.data();
        if (pk.requires_grad) {
          const double* x = px.values.data();
          double* dk = pk.grad.data();
          parallel_for(f, [&](int64_t fi) {
            const double* gmap = g + fi * geo.out_h * geo.out_w;
            double* kern = dk + fi * c_in * kh * kw;
            for (int oy = 0; oy < geo.out_h; ++oy) {
              for (int ox = 0; ox < geo.out_w; ++ox) {
                const double gv = gmap[size_t(oy) * geo.out_w + ox];
                if (gv == 0.0) continue;
                const int y0 = oy * stride - geo.pad_top;
                const int x0 = ox * stride - geo.pad_left;
                for (int c = 0; c < c_in; ++c) {
                  const double* chan = x + size_t(c) * in_h * in_w;
                  double* kchan = kern + size_t(c) * kh * kw;
                  for (int ky = 0; ky < kh; ++ky) {
                    const int y = y0 + ky;
                    if (y < 0 || y >= in_h) continue;
                    const double* row = chan + size_t(y) * in_w;
                    double* krow = kchan + size_t(ky) * kw;
                    const int kx_lo = std::max(0, -x0);
                    const int kx_hi = std::min(kw, in_w - x0);
                    for (int kx = kx_lo; kx < kx_hi; ++kx)
                      krow[kx] += gv * row[x0 + kx];
                  }
                }
              }
            }
          });
        }
        if (px.requires_grad) {
          const double* k = pk.values.data();
          double* dx = px.grad.data();
          parallel_for(c_in, [&](int64_t c) {
            double* dchan = dx + c * in_h * in_w;
            for (int fi = 0; fi < f; ++fi) {
              const double* gmap =
                  g + size_t(fi) * geo.out_h * geo.out_w;
              const double* kchan =
                  k + (size_t(fi) * c_in + size_t(c)) * kh * kw;
              for (int oy = 0; oy < geo.out_h; ++oy) {
                for (int ox = 0; ox < geo.out_w; ++ox) {
                  const double gv = gmap[size_t(oy) * geo.out_w + ox];
                  if (gv == 0.0) continue;
                  const int y0 = oy * stride - geo.pad_top;
                  const int x0 = ox * stride - geo.pad_left;
                  for (int ky = 0; ky < kh; ++ky) {
                    const int y = y0 + ky;
                    if (y < 0 || y >= in_h) continue;
                    double* drow = dchan + size_t(y) * in_w;
                    const double* krow = kchan + size_t(ky) * kw;
                    const int kx_lo = std::max(0, -x0);
                    const int kx_hi = std::min(kw, in_w - x0);
                    for (int kx = kx_lo; kx < kx_hi; ++kx)
                      drow[x0 + kx] += gv * krow[kx];
                  }
                }
              }
            }
          });
        }
      });
}

// Adds bias[F] across the spatial extent of x[F,H,W].
inline Tensor bias_channels(const Tensor& x, const Tensor& bias) {
  if (x.shape().size() != 3 || bias.shape().size() != 1 ||
      bias.shape()[0] != x.shape()[0])
    fail("bias_channels: need x[F,H,W] and bias[F]");
  const int64_t f = x.shape()[0];
  const int64_t hw = int64_t(x.shape()[1]) * x.shape()[2];
  std::vector<double> out(x.values());
  for (int64_t fi = 0; fi < f; ++fi) {
    const double b = bias.value_at(fi);
    double* map = out.data() + fi * hw;
    for (int64_t i = 0; i < hw; ++i) map[i] += b;
  }
  return make_op("bias_channels", x.shape(), std::move(out), {x, bias},
                 [f, hw](TensorNode& n) {
                   TensorNode& px = *n.parents[0];
                   TensorNode& pb = *n.parents[1];
                   if (px.requires_grad)
                     for (size_t i = 0; i < n.grad.size(); ++i)
                       px.grad[i] += n.grad[i];
                   if (pb.requires_grad)
                     for (int64_t fi = 0; fi < f; ++fi) {
                       double acc = 0.0;
                       const double* gmap = n.grad.data() + fi * hw;
                       for (int64_t i = 0; i < hw; ++i) acc += gmap[i];
                       pb.grad[size_t(fi)] += acc;
                     }
                 });
}

inline Tensor maxpool2(const Tensor& x) {
  if (x.shape().size() != 3) fail("maxpool2: need x[C,H,W]");
  const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const int oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0) fail("maxpool2: input ", h, "x", w, " too small");
  std::vector<double> out(size_t(c) * oh * ow);
  auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
  const double* xs = x.values().data();
  for (int ci = 0; ci < c; ++ci) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double best = -1e300;
        int64_t best_idx = -1;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const int64_t idx =
                (int64_t(ci) * h + (oy * 2 + dy)) * w + (ox * 2 + dx);
            if (xs[idx] > best) {
              best = xs[idx];
              best_idx = idx;
            }
          }
        const size_t o = (size_t(ci) * oh + oy) * ow + ox;
        out[o] = best;
        (*argmax)[o] = best_idx;
      }
    }
  }
  return make_op("maxpool2", {c, oh, ow}, std::move(out), {x},
                 [argmax](TensorNode& n) {
                   TensorNode& p = *n.parents[0];
                   for (size_t i = 0; i < n.grad.size(); ++i)
                     p.grad[size_t((*argmax)[i])] += n.grad[i];
                 });
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 3 || b.shape().size() != 3 ||
      a.shape()[1] != b.shape()[1] || a.shape()[2] != b.shape()[2])
    fail("concat_channels: spatial dims differ, ", shape_str(a.shape()),
         " vs ", shape_str(b.shape()));
  const int ca = a.shape()[0], cb = b.shape()[0];
  std::vector<double> out;
  out.reserve(a.values().size() + b.values().size());
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  const size_t na = a.values().size();
  return make_op("concat_channels",
                 {ca + cb, a.shape()[1], a.shape()[2]}, std::move(out),
                 {a, b}, [na](TensorNode& n) {
                   TensorNode& pa = *n.parents[0];
                   TensorNode& pb = *n.parents[1];
                   if (pa.requires_grad)
                     for (size_t i = 0; i < na; ++i) pa.grad[i] += n.grad[i];
                   if (pb.requires_grad)
                     for (size_t i = na; i < n.grad.size(); ++i)
                       pb.grad[i - na] += n.grad[i];
                 });
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

// Central finite differences against the recorded backward pass. Returns
// max over coordinates of |analytic - numeric| / max(1e-8, |analytic|+|numeric|).
inline double grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    const std::vector<Tensor>& inputs, double epsilon) {
  if (epsilon <= 0.0) fail("grad_check: epsilon must be positive");

  std::vector<Tensor> leaves;
  leaves.reserve(inputs.size());
  for (const Tensor& t : inputs)
    leaves.push_back(Tensor::from(t.values(), t.shape(), true));
  Tensor loss = f(leaves);
  if (loss.size() != 1) fail("grad_check: f must be scalar-valued");
  if (!std::isfinite(loss.scalar_value()))
    fail("grad_check: non-finite loss at base point");
  backward(loss);

  std::vector<std::vector<double>> analytic;
  for (Tensor& t : leaves) analytic.push_back(t.grad());

  struct Coord {
    size_t input;
    size_t index;
  };
  std::vector<Coord> coords;
  for (size_t i = 0; i < inputs.size(); ++i)
    for (size_t j = 0; j < inputs[i].values().size(); ++j)
      coords.push_back({i, j});

  std::vector<double> errors(coords.size(), 0.0);
  parallel_for(int64_t(coords.size()), [&](int64_t ci) {
    const Coord c = coords[size_t(ci)];
    auto eval = [&](double delta) {
      std::vector<Tensor> probe;
      probe.reserve(inputs.size());
      for (size_t i = 0; i < inputs.size(); ++i) {
        std::vector<double> vals = inputs[i].values();
        if (i == c.input) vals[c.index] += delta;
        probe.push_back(Tensor::from(std::move(vals), inputs[i].shape()));
      }
      return f(probe).scalar_value();
    };
    const double hi = eval(epsilon);
    const double lo = eval(-epsilon);
    const double numeric = (hi - lo) / (2.0 * epsilon);
    const double a = analytic[c.input][c.index];
    if (!std::isfinite(numeric) || !std::isfinite(a)) {
      errors[size_t(ci)] = std::numeric_limits<double>::infinity();
      return;
    }
    errors[size_t(ci)] =
        std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
  });

  double max_err = 0.0;
  for (double e : errors) max_err = std::max(max_err, e);
  if (!std::isfinite(max_err))
    fail("grad_check: non-finite values encountered");
  return max_err;
}

}  // namespace capsforge
