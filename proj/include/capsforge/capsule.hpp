// Capsule primitives: squash, primary-capsule formation, dynamic
// routing-by-agreement, margin loss, reconstruction loss.
#pragma once

#include <cmath>
#include <vector>

#include "capsforge/core.hpp"
#include "capsforge/image.hpp"
#include "capsforge/tensor.hpp"

namespace capsforge {

// Norms are epsilon-stabilized so squash stays differentiable at the origin.
constexpr double kNormEpsilon = 1e-12;

struct CapsuleLayerConfig {
  int num_capsules = 8;       // grid values: 8, 16, 32, 64
  int capsule_dim = 16;
  int routing_iterations = 3;  // tuning range 1..5
  bool relax_domain = false;   // permits off-grid sizes for tiny test models

  void validate() const {
    if (!relax_domain && num_capsules != 8 && num_capsules != 16 &&
        num_capsules != 32 && num_capsules != 64)
      fail_validation("capsule config: num_capsules must be one of "
                      "{8,16,32,64}, got ", num_capsules);
    if (num_capsules < 1) fail_validation("capsule config: num_capsules < 1");
    if (capsule_dim < 1) fail_validation("capsule config: capsule_dim < 1");
    if (routing_iterations < 1 || routing_iterations > 5)
      fail_validation("capsule config: routing_iterations must be in [1,5], "
                      "got ", routing_iterations);
  }
};

struct LossWeights {
  double reconstruction_weight = 0.0005;
  double margin_plus = 0.9;
  double margin_minus = 0.1;
  double down_weight = 0.5;

  void validate() const {
    if (reconstruction_weight < 0 || margin_plus < 0 || margin_minus < 0 ||
        down_weight < 0)
      fail_validation("loss weights must be non-negative");
    if (margin_plus <= margin_minus)
      fail_validation("loss weights: margin_plus must exceed margin_minus");
  }
};

// One routing pass, kept around for inspection and tests.
struct CapsuleLayerState {
  Tensor prediction_vectors;  // [num_in, num_out, out_dim]
  Tensor routing_logits;      // [num_in, num_out], constant
  Tensor couplings;           // [num_in, num_out], constant
  Tensor outputs;             // [num_out, out_dim], on the tape
};

namespace detail {

inline double squash_factor(double norm) { return norm / (1.0 + norm * norm); }

inline void squash_row(const double* s, double* v, int64_t d) {
  double sq = 0.0;
  for (int64_t i = 0; i < d; ++i) sq += s[i] * s[i];
  const double n = std::sqrt(sq + kNormEpsilon);
  const double h = squash_factor(n);
  for (int64_t i = 0; i < d; ++i) v[i] = h * s[i];
}

}  // namespace detail

// Rowwise squash of [R, d]: each row maps to the same direction with norm
// ||s||^2 / (1 + ||s||^2) < 1.
inline Tensor squash_rows(const Tensor& s) {
  if (s.shape().size() != 2) fail("squash_rows: need [R,d] tensor");
  const int64_t rows = s.shape()[0], d = s.shape()[1];
  std::vector<double> out(s.values().size());
  for (int64_t r = 0; r < rows; ++r)
    detail::squash_row(s.values().data() + r * d, out.data() + r * d, d);
  return make_op(
      "squash", s.shape(), std::move(out), {s}, [rows, d](TensorNode& node) {
        TensorNode& p = *node.parents[0];
        for (int64_t r = 0; r < rows; ++r) {
          const double* sv = p.values.data() + r * d;
          const double* g = node.grad.data() + r * d;
          double* ds = p.grad.data() + r * d;
          double sq = 0.0, sg = 0.0;
          for (int64_t i = 0; i < d; ++i) {
            sq += sv[i] * sv[i];
            sg += sv[i] * g[i];
          }
          const double n = std::sqrt(sq + kNormEpsilon);
          const double h = detail::squash_factor(n);
          const double hp = (1.0 - n * n) / ((1.0 + n * n) * (1.0 + n * n));
          const double radial = hp / n * sg;
          for (int64_t i = 0; i < d; ++i) ds[i] += h * g[i] + radial * sv[i];
        }
      });
}

inline Tensor squash(const Tensor& s) {
  if (s.shape().size() != 1) fail("squash: need a vector tensor");
  return reshape(squash_rows(reshape(s, {1, s.shape()[0]})), s.shape());
}

// Per-row epsilon-stabilized Euclidean norms of [R, d] -> [R].
inline Tensor capsule_norms(const Tensor& v) {
  if (v.shape().size() != 2) fail("capsule_norms: need [R,d] tensor");
  const int64_t rows = v.shape()[0], d = v.shape()[1];
  std::vector<double> out(size_t(rows));
  for (int64_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (int64_t i = 0; i < d; ++i) {
      const double x = v.value_at(r * d + i);
      sq += x * x;
    }
    out[size_t(r)] = std::sqrt(sq + kNormEpsilon);
  }
  return make_op("capsule_norms", {int(rows)}, std::move(out), {v},
                 [rows, d](TensorNode& node) {
                   TensorNode& p = *node.parents[0];
                   for (int64_t r = 0; r < rows; ++r) {
                     const double gn = node.grad[size_t(r)] / node.values[size_t(r)];
                     const double* pv = p.values.data() + r * d;
                     double* pg = p.grad.data() + r * d;
                     for (int64_t i = 0; i < d; ++i) pg[i] += gn * pv[i];
                   }
                 });
}

// Prediction vectors u_hat[i,j,:] = W[i,j] * u[i] for routing.
inline Tensor capsule_predict(const Tensor& weights, const Tensor& u) {
  if (weights.shape().size() != 4 || u.shape().size() != 2)
    fail("capsule_predict: need weights[ni,no,dout,din] and u[ni,din]");
  const int64_t ni = weights.shape()[0], no = weights.shape()[1],
                dout = weights.shape()[2], din = weights.shape()[3];
  if (u.shape()[0] != ni || u.shape()[1] != din)
    fail("capsule_predict: u ", shape_str(u.shape()),
         " does not match weights ", shape_str(weights.shape()));

  std::vector<double> out(size_t(ni) * no * dout);
  const double* w = weights.values().data();
  const double* uv = u.values().data();
  parallel_for(ni, [&](int64_t i) {
    const double* ui = uv + i * din;
    for (int64_t j = 0; j < no; ++j) {
      const double* wij = w + ((i * no + j) * dout) * din;
      double* o = out.data() + (i * no + j) * dout;
      for (int64_t k = 0; k < dout; ++k) {
        const double* row = wij + k * din;
        double acc = 0.0;
        for (int64_t d = 0; d < din; ++d) acc += row[d] * ui[d];
        o[k] = acc;
      }
    }
  });
  return make_op(
      "capsule_predict", {int(ni), int(no), int(dout)}, std::move(out),
      {weights, u}, [ni, no, dout, din](TensorNode& node) {
        TensorNode& pw = *node.parents[0];
        TensorNode& pu = *node.parents[1];
        const double* g = node.grad.data();
        if (pw.requires_grad) {
          const double* uv = pu.values.data();
          double* dw = pw.grad.data();
          parallel_for(ni, [&](int64_t i) {
            const double* ui = uv + i * din;
            for (int64_t j = 0; j < no; ++j) {
              const double* gij = g + (i * no + j) * dout;
              double* wij = dw + ((i * no + j) * dout) * din;
              for (int64_t k = 0; k < dout; ++k) {
                double* row = wij + k * din;
                const double gk = gij[k];
                for (int64_t d = 0; d < din; ++d) row[d] += gk * ui[d];
              }
            }
          });
        }
        if (pu.requires_grad) {
          const double* w = pw.values.data();
          double* du = pu.grad.data();
          parallel_for(ni, [&](int64_t i) {
            double* dui = du + i * din;
            for (int64_t j = 0; j < no; ++j) {
              const double* gij = g + (i * no + j) * dout;
              const double* wij = w + ((i * no + j) * dout) * din;
              for (int64_t k = 0; k < dout; ++k) {
                const double gk = gij[k];
                const double* row = wij + k * din;
                for (int64_t d = 0; d < din; ++d) dui[d] += gk * row[d];
              }
            }
          });
        }
      });
}

// s[j,:] = sum_i c[i,j] * u_hat[i,j,:], couplings held constant.
inline Tensor capsule_weighted_sum(const Tensor& u_hat,
                                   const std::vector<double>& couplings) {
  const int64_t ni = u_hat.shape()[0], no = u_hat.shape()[1],
                dout = u_hat.shape()[2];
  if (int64_t(couplings.size()) != ni * no)
    fail("capsule_weighted_sum: couplings size mismatch");
  std::vector<double> out(size_t(no) * dout, 0.0);
  const double* uh = u_hat.values().data();
  for (int64_t i = 0; i < ni; ++i)
    for (int64_t j = 0; j < no; ++j) {
      const double c = couplings[size_t(i * no + j)];
      const double* src = uh + (i * no + j) * dout;
      double* dst = out.data() + j * dout;
      for (int64_t k = 0; k < dout; ++k) dst[k] += c * src[k];
    }
  auto c_owned = std::make_shared<std::vector<double>>(couplings);
  return make_op("capsule_weighted_sum", {int(no), int(dout)}, std::move(out),
                 {u_hat}, [ni, no, dout, c_owned](TensorNode& node) {
                   TensorNode& p = *node.parents[0];
                   const double* g = node.grad.data();
                   double* dp = p.grad.data();
                   parallel_for(ni, [&](int64_t i) {
                     for (int64_t j = 0; j < no; ++j) {
                       const double c = (*c_owned)[size_t(i * no + j)];
                       const double* gj = g + j * dout;
                       double* d = dp + (i * no + j) * dout;
                       for (int64_t k = 0; k < dout; ++k) d[k] += c * gj[k];
                     }
                   });
                 });
}

namespace detail {

// softmax of logits over the output-capsule axis, so each input capsule
// distributes a unit budget across the outputs.
inline std::vector<double> routing_softmax(const std::vector<double>& logits,
                                           int64_t ni, int64_t no) {
  std::vector<double> c(logits.size());
  for (int64_t i = 0; i < ni; ++i) {
    const double* row = logits.data() + i * no;
    double mx = row[0];
    for (int64_t j = 1; j < no; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    double* crow = c.data() + i * no;
    for (int64_t j = 0; j < no; ++j) {
      crow[j] = std::exp(row[j] - mx);
      z += crow[j];
    }
    for (int64_t j = 0; j < no; ++j) crow[j] /= z;
  }
  return c;
}

}  // namespace detail

// Routing-by-agreement. Logits start at zero; each iteration computes
// couplings c = softmax(b), candidate outputs v = squash(sum_i c*u_hat), and
// for all but the last iteration reinforces b[i,j] += u_hat[i,j] . v[j].
// Gradients flow only through the final iteration, earlier iterations are
// value-only.
inline CapsuleLayerState dynamic_routing(const Tensor& u_hat, int iterations) {
  if (iterations < 1)
    fail("dynamic_routing: iterations must be >= 1, got ", iterations);
  if (u_hat.shape().size() != 3)
    fail("dynamic_routing: need u_hat[num_in, num_out, out_dim]");
  const int64_t ni = u_hat.shape()[0], no = u_hat.shape()[1],
                dout = u_hat.shape()[2];

  std::vector<double> logits(size_t(ni) * no, 0.0);
  std::vector<double> couplings;
  const double* uh = u_hat.values().data();

  for (int iter = 0; iter + 1 < iterations; ++iter) {
    couplings = detail::routing_softmax(logits, ni, no);
    std::vector<double> s(size_t(no) * dout, 0.0);
    for (int64_t i = 0; i < ni; ++i)
      for (int64_t j = 0; j < no; ++j) {
        const double c = couplings[size_t(i * no + j)];
        const double* src = uh + (i * no + j) * dout;
        double* dst = s.data() + j * dout;
        for (int64_t k = 0; k < dout; ++k) dst[k] += c * src[k];
      }
    std::vector<double> v(s.size());
    for (int64_t j = 0; j < no; ++j)
      detail::squash_row(s.data() + j * dout, v.data() + j * dout, dout);
    for (int64_t i = 0; i < ni; ++i)
      for (int64_t j = 0; j < no; ++j) {
        const double* src = uh + (i * no + j) * dout;
        const double* vj = v.data() + j * dout;
        double agree = 0.0;
        for (int64_t k = 0; k < dout; ++k) agree += src[k] * vj[k];
        logits[size_t(i * no + j)] += agree;
      }
  }

  couplings = detail::routing_softmax(logits, ni, no);
  Tensor s = capsule_weighted_sum(u_hat, couplings);
  Tensor v = squash_rows(s);

  CapsuleLayerState state;
  state.prediction_vectors = u_hat;
  state.routing_logits = Tensor::from(logits, {int(ni), int(no)});
  state.couplings = Tensor::from(couplings, {int(ni), int(no)});
  state.outputs = v;
  return state;
}

// Reshapes feature maps [F,H,W] into dim-sized capsule vectors and squashes
// each one.
inline Tensor primary_capsules(const Tensor& features, int capsule_dim) {
  if (features.shape().size() != 3)
    fail("primary_capsules: need features[F,H,W]");
  if (capsule_dim < 1) fail("primary_capsules: capsule_dim must be positive");
  const int64_t total = features.size();
  if (total % capsule_dim != 0)
    fail("primary_capsules: ", total, " feature values not divisible by "
         "capsule_dim ", capsule_dim);
  const int64_t count = total / capsule_dim;
  return squash_rows(reshape(features, {int(count), capsule_dim}));
}

// Margin loss over class-capsule norms:
//   L_k = T_k max(0, m+ - n_k)^2 + lambda (1 - T_k) max(0, n_k - m-)^2
inline Tensor margin_loss(const Tensor& v_norms,
                          const std::vector<double>& one_hot,
                          const LossWeights& weights) {
  weights.validate();
  if (v_norms.shape().size() != 1 ||
      size_t(v_norms.shape()[0]) != one_hot.size())
    fail("margin_loss: norms ", shape_str(v_norms.shape()),
         " do not match label of size ", one_hot.size());
  double hot_sum = 0.0;
  for (double t : one_hot) {
    if (t != 0.0 && t != 1.0)
      fail("margin_loss: label is not one-hot (entry ", t, ")");
    hot_sum += t;
  }
  if (hot_sum != 1.0) fail("margin_loss: label is not one-hot (sum ", hot_sum, ")");

  const double mp = weights.margin_plus, mm = weights.margin_minus,
               lam = weights.down_weight;
  const int64_t k = v_norms.size();
  double loss = 0.0;
  for (int64_t i = 0; i < k; ++i) {
    const double n = v_norms.value_at(i);
    const double t = one_hot[size_t(i)];
    const double pos = std::max(0.0, mp - n);
    const double neg = std::max(0.0, n - mm);
    loss += t * pos * pos + lam * (1.0 - t) * neg * neg;
  }
  auto hot = std::make_shared<std::vector<double>>(one_hot);
  return make_op("margin_loss", {1}, {loss}, {v_norms},
                 [hot, mp, mm, lam, k](TensorNode& node) {
                   TensorNode& p = *node.parents[0];
                   const double g = node.grad[0];
                   for (int64_t i = 0; i < k; ++i) {
                     const double n = p.values[size_t(i)];
                     const double t = (*hot)[size_t(i)];
                     const double pos = std::max(0.0, mp - n);
                     const double neg = std::max(0.0, n - mm);
                     p.grad[size_t(i)] +=
                         g * (-2.0 * t * pos + 2.0 * lam * (1.0 - t) * neg);
                   }
                 });
}

// weight * sum of squared pixel differences against the original image.
inline Tensor reconstruction_loss(const Tensor& decoded, const Image& original,
                                  double weight) {
  if (weight < 0) fail("reconstruction_loss: negative weight");
  const int64_t n = int64_t(original.pixels.size());
  if (decoded.size() != n)
    fail("reconstruction_loss: decoded has ", decoded.size(),
         " values, original image has ", n);
  Tensor target = Tensor::from(original.pixels, {int(n)});
  Tensor diff = sub(flatten(decoded), target);
  return scale(sum(mul(diff, diff)), weight);
}

// Total trainable scalars across a parameter list.
inline int64_t count_parameters(const std::vector<Tensor>& params) {
  int64_t total = 0;
  for (const Tensor& p : params) total += p.size();
  return total;
}

}  // namespace capsforge
