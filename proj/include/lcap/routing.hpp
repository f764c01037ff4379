#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lcap/aggregation.hpp"
#include "lcap/tensor.hpp"

namespace lcap {

// Working set of one routing call, kept for diagnostics. Tensors carry
// trailing axes as documented; any leading axes (batch, position) pass
// through untouched, which is what makes routing per-position.
struct RoutingState {
  Tensor logits;       // B [.., L, N] (dynamic routing only)
  Tensor assignments;  // C [.., L, N], the final assignment probabilities
  Tensor votes;        // V [.., L, N, h]
  Tensor mu;           // [.., N, h] (EM only)
  Tensor sigma2;       // [.., N, h] (EM only)
  Tensor act_in;       // A^H [.., L] (EM only)
  Tensor act_out;      // A^Omega [.., N] (EM only)
  std::vector<Tensor> iteration_trace;  // C as consumed by iteration t (t = 1..T)
};

struct CapsuleOutput {
  Tensor capsules;   // [.., N, h]
  Tensor flattened;  // [.., N*h]; row-major reshape == concatenation over n
};

struct RoutingResult {
  CapsuleOutput output;
  RoutingState state;
};

namespace routing_detail {

inline constexpr double kSquashEps = 1e-12;
inline constexpr double kDenomFloor = 1e-30;
inline constexpr double kLogProbFloor = 1e-300;

inline Shape leading_shape(const Tensor& votes) {
  if (votes.rank() < 3) {
    throw ShapeError("routing: votes must have trailing [L, N, h] axes, got " +
                     shape_to_string(votes.shape()));
  }
  return Shape(votes.shape().begin(), votes.shape().end() - 3);
}

inline Tensor flatten_capsules(const Tensor& capsules) {
  Shape s(capsules.shape().begin(), capsules.shape().end() - 2);
  s.push_back(capsules.shape()[capsules.shape().size() - 2] * capsules.shape().back());
  return reshape(capsules, s);
}

}  // namespace routing_detail

// Norm-bounding nonlinearity over the last axis:
//   squash(s) = (|s|^2 / (1 + |s|^2)) * (s / |s|),  squash(0) = 0.
// Output norm is strictly below 1.
inline Tensor squash(const Tensor& s) {
  Tensor n2 = sum(square(s), -1, /*keepdims=*/true);
  Tensor scale = div(n2, mul(add_scalar(n2, 1.0), sqrt(add_scalar(n2, routing_detail::kSquashEps))));
  return mul(s, scale);
}

// ---------------------------------------------------------------------------
// Votes: V[.., l, n, :] = input_capsule_l . W_{l->n}
// ---------------------------------------------------------------------------

struct VoteParams {
  // weights[l][n] is [d, d/N]
  std::vector<std::vector<Tensor>> weights;
};

inline Tensor compute_votes(const std::vector<Tensor>& input_capsules, const VoteParams& params) {
  if (input_capsules.empty()) throw ShapeError("compute_votes: no input capsules");
  const std::int64_t L = static_cast<std::int64_t>(input_capsules.size());
  const std::int64_t d = input_capsules.front().shape().back();
  if (static_cast<std::int64_t>(params.weights.size()) != L) {
    throw ConfigError("compute_votes: weight rows (" + std::to_string(params.weights.size()) +
                      ") != layer count (" + std::to_string(L) + ")");
  }
  const std::int64_t N = static_cast<std::int64_t>(params.weights.front().size());
  const std::int64_t h = params.weights.front().front().shape().back();

  std::vector<Tensor> per_layer;
  per_layer.reserve(static_cast<std::size_t>(L));
  for (std::int64_t l = 0; l < L; ++l) {
    const auto& row = params.weights[static_cast<std::size_t>(l)];
    if (static_cast<std::int64_t>(row.size()) != N) {
      throw ConfigError("compute_votes: ragged weight rows");
    }
    std::vector<Tensor> per_capsule;
    per_capsule.reserve(static_cast<std::size_t>(N));
    for (std::int64_t n = 0; n < N; ++n) {
      const Tensor& w = row[static_cast<std::size_t>(n)];
      if (w.rank() != 2 || w.shape()[0] != d || w.shape()[1] != h) {
        throw ConfigError("compute_votes: weight (" + std::to_string(l) + "," + std::to_string(n) +
                          ") has shape " + shape_to_string(w.shape()));
      }
      per_capsule.push_back(matmul(input_capsules[static_cast<std::size_t>(l)], w));
    }
    per_layer.push_back(unsqueeze(concat(per_capsule, -1), -2));  // [.., 1, N*h]
  }
  Tensor stacked = concat(per_layer, -2);  // [.., L, N*h]
  Shape out(stacked.shape().begin(), stacked.shape().end() - 1);
  out.push_back(N);
  out.push_back(h);
  return reshape(stacked, out);
}

// ---------------------------------------------------------------------------
// Iterative dynamic routing. Votes in, capsules out; assignment
// probabilities refine over `iterations` rounds of agreement updates.
// `initial_logits` overrides the all-zero B initialization (testing hook).
// ---------------------------------------------------------------------------

inline RoutingResult dynamic_routing(const Tensor& votes, std::int64_t iterations,
                                     const Tensor* initial_logits = nullptr) {
  if (iterations < 1) {
    throw ConfigError("dynamic_routing: iterations must be >= 1, got " +
                      std::to_string(iterations));
  }
  Shape bn_shape = routing_detail::leading_shape(votes);
  bn_shape.push_back(votes.shape()[votes.shape().size() - 3]);  // L
  bn_shape.push_back(votes.shape()[votes.shape().size() - 2]);  // N

  Tensor logits = initial_logits ? *initial_logits : Tensor::zeros(bn_shape);
  if (logits.shape() != bn_shape) {
    throw ShapeError("dynamic_routing: initial logits shape " + shape_to_string(logits.shape()) +
                     ", expected " + shape_to_string(bn_shape));
  }

  RoutingState state;
  state.votes = votes;
  Tensor capsules;
  for (std::int64_t t = 0; t < iterations; ++t) {
    Tensor c = softmax(logits, -1);
    state.iteration_trace.push_back(c);
    Tensor s = sum(mul(unsqueeze(c, -1), votes), -3);  // [.., N, h]
    capsules = squash(s);
    Tensor agreement = sum(mul(unsqueeze(capsules, -3), votes), -1);  // [.., L, N]
    logits = add(logits, agreement);
  }
  state.logits = logits;
  state.assignments = state.iteration_trace.back();

  RoutingResult result;
  result.output.capsules = capsules;
  result.output.flattened = routing_detail::flatten_capsules(capsules);
  result.state = std::move(state);
  return result;
}

// ---------------------------------------------------------------------------
// EM routing
// ---------------------------------------------------------------------------

// A^H_l = sigmoid(capsule_l . W^H_l), computed once before the iterations and
// held fixed throughout.
inline Tensor input_activation(const std::vector<Tensor>& input_capsules,
                               const std::vector<Tensor>& w_act) {
  if (input_capsules.size() != w_act.size()) {
    throw ConfigError("input_activation: weight count != layer count");
  }
  std::vector<Tensor> parts;
  parts.reserve(input_capsules.size());
  for (std::size_t l = 0; l < input_capsules.size(); ++l) {
    parts.push_back(matmul(input_capsules[l], w_act[l]));  // [.., 1]
  }
  return sigmoid(concat(parts, -1));  // [.., L]
}

struct EmParams {
  Tensor beta_a;   // scalar
  Tensor beta_mu;  // scalar
};

struct MStepResult {
  Tensor mu;          // [.., N, h]
  Tensor sigma2;      // [.., N, h], floored
  Tensor act_out;     // A^Omega [.., N]
  Tensor weight_sum;  // sum_l C'_{l->n} [.., N]
};

// Gaussian re-fit with C held fixed. A capsule that receives zero total
// assignment keeps mu = 0, sigma2 = floor and a cost of zero, so nothing
// divides by zero.
inline MStepResult m_step(const Tensor& assignments, const Tensor& act_in, const Tensor& votes,
                          double lambda_t, const Tensor& beta_a, const Tensor& beta_mu,
                          double variance_floor) {
  Tensor cp = mul(assignments, unsqueeze(act_in, -1));           // [.., L, N]
  Tensor denom = sum(cp, -2);                                    // [.., N]
  Tensor safe_denom = clamp_min(denom, routing_detail::kDenomFloor);
  Tensor cp_h = unsqueeze(cp, -1);                               // [.., L, N, 1]

  MStepResult r;
  r.weight_sum = denom;
  r.mu = div(sum(mul(cp_h, votes), -3), unsqueeze(safe_denom, -1));
  Tensor centered = square(sub(votes, unsqueeze(r.mu, -3)));
  r.sigma2 = clamp_min(div(sum(mul(cp_h, centered), -3), unsqueeze(safe_denom, -1)),
                       variance_floor);

  constexpr double kHalfLog2PiPlusHalf = 1.4189385332046727;  // (1 + log(2*pi)) / 2
  Tensor log_sigma = mul_scalar(log(r.sigma2), 0.5);
  Tensor cost = mul(add_scalar(log_sigma, kHalfLog2PiPlusHalf), unsqueeze(denom, -1));
  Tensor cost_sum = sum(cost, -1);                               // [.., N]
  Tensor act_logits = mul_scalar(sub(sub(beta_a, mul(beta_mu, denom)), cost_sum), lambda_t);
  r.act_out = sigmoid(act_logits);
  return r;
}

// Responsibility update: C_{l->n} proportional to A^Omega_n * p_n, where p_n
// is the Gaussian density of the vote. Evaluated in log space; the softmax
// renormalizes with max-subtraction, and a row whose terms all vanish falls
// back to uniform.
inline Tensor e_step(const Tensor& mu, const Tensor& sigma2, const Tensor& act_out,
                     const Tensor& votes) {
  constexpr double kTwoPi = 6.283185307179586;
  Tensor sig = unsqueeze(sigma2, -3);                            // [.., 1, N, h]
  Tensor centered = square(sub(votes, unsqueeze(mu, -3)));
  Tensor log_p_h = sub(mul_scalar(log(mul_scalar(sig, kTwoPi)), -0.5),
                       div(centered, mul_scalar(sig, 2.0)));
  Tensor log_p = sum(log_p_h, -1);                               // [.., L, N]
  Tensor log_a = unsqueeze(log(clamp_min(act_out, routing_detail::kLogProbFloor)), -2);
  return softmax(add(log_p, log_a), -1);
}

struct EmRoutingConfig {
  std::int64_t iterations = 3;
  std::vector<double> lambda_schedule;  // one entry per iteration
  double variance_floor = 1e-6;
};

inline RoutingResult em_routing(const Tensor& votes, const Tensor& act_in,
                                const EmParams& params, const EmRoutingConfig& cfg) {
  if (cfg.iterations < 1) {
    throw ConfigError("em_routing: iterations must be >= 1, got " +
                      std::to_string(cfg.iterations));
  }
  if (static_cast<std::int64_t>(cfg.lambda_schedule.size()) != cfg.iterations) {
    throw ConfigError("em_routing: lambda schedule has " +
                      std::to_string(cfg.lambda_schedule.size()) + " entries for " +
                      std::to_string(cfg.iterations) + " iterations");
  }
  const std::int64_t N = votes.shape()[votes.shape().size() - 2];
  Shape ln_shape = routing_detail::leading_shape(votes);
  ln_shape.push_back(votes.shape()[votes.shape().size() - 3]);
  ln_shape.push_back(N);

  RoutingState state;
  state.votes = votes;
  state.act_in = act_in;

  Tensor assignments = Tensor::full(ln_shape, 1.0 / static_cast<double>(N));
  MStepResult m;
  for (std::int64_t t = 0; t < cfg.iterations; ++t) {
    state.iteration_trace.push_back(assignments);
    m = m_step(assignments, act_in, votes, cfg.lambda_schedule[static_cast<std::size_t>(t)],
               params.beta_a, params.beta_mu, cfg.variance_floor);
    if (!m.mu.all_finite() || !m.sigma2.all_finite() || !m.act_out.all_finite()) {
      throw NumericError("em_routing: non-finite statistics at iteration " +
                         std::to_string(t + 1));
    }
    assignments = e_step(m.mu, m.sigma2, m.act_out, votes);
  }
  state.assignments = assignments;
  state.mu = m.mu;
  state.sigma2 = m.sigma2;
  state.act_out = m.act_out;

  RoutingResult result;
  result.output.capsules = mul(unsqueeze(m.act_out, -1), m.mu);
  result.output.flattened = routing_detail::flatten_capsules(result.output.capsules);
  result.state = std::move(state);
  return result;
}

}  // namespace lcap
