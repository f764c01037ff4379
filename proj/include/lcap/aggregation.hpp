#pragma once

#include <string>
#include <vector>

#include "lcap/tensor.hpp"

namespace lcap {

// All layer outputs H^1..H^L of one encoder or decoder stack. Every entry
// shares the same [.., J, d] shape; the embedding layer is not part of it.
struct LayerStack {
  std::vector<Tensor> layers;

  std::int64_t depth() const { return static_cast<std::int64_t>(layers.size()); }
  std::int64_t width() const { return layers.front().shape().back(); }

  void validate() const {
    if (layers.empty()) throw ShapeError("LayerStack: needs at least one layer");
    for (const auto& l : layers) {
      if (l.shape() != layers.front().shape()) {
        throw ShapeError("LayerStack: layer shape " + shape_to_string(l.shape()) +
                         " differs from " + shape_to_string(layers.front().shape()));
      }
    }
  }
};

enum class AggregationStrategy { kNone, kLinear, kDynamicFfn, kDynamicRouting, kEmRouting };

enum class CapsuleInputMode { kPerLayer, kAllLayers };

inline std::string to_string(AggregationStrategy s) {
  switch (s) {
    case AggregationStrategy::kNone: return "none";
    case AggregationStrategy::kLinear: return "linear";
    case AggregationStrategy::kDynamicFfn: return "dynamic-ffn";
    case AggregationStrategy::kDynamicRouting: return "dynamic-routing";
    case AggregationStrategy::kEmRouting: return "em-routing";
  }
  return "?";
}

inline std::string to_string(CapsuleInputMode m) {
  return m == CapsuleInputMode::kPerLayer ? "per-layer" : "all-layers";
}

struct AggregatorConfig {
  AggregationStrategy strategy = AggregationStrategy::kNone;
  std::int64_t capsules = 8;            // N, output capsule count
  std::int64_t iterations = 3;          // T, routing iterations
  CapsuleInputMode capsule_input_mode = CapsuleInputMode::kAllLayers;
  double variance_floor = 1e-6;
  std::vector<double> lambda_schedule;  // empty -> 1 + t for t = 0..T-1
  bool normalize_dynamic_weights = false;
  bool trainable_betas = true;

  bool is_routing() const {
    return strategy == AggregationStrategy::kDynamicRouting ||
           strategy == AggregationStrategy::kEmRouting;
  }

  std::vector<double> effective_lambda_schedule() const {
    if (!lambda_schedule.empty()) return lambda_schedule;
    std::vector<double> s(static_cast<std::size_t>(iterations));
    for (std::size_t t = 0; t < s.size(); ++t) s[t] = 1.0 + static_cast<double>(t);
    return s;
  }
};

// ---------------------------------------------------------------------------
// Static linear combination: H~ = sum_l W_l (.) H^l with W_l of size d shared
// by every position.
// ---------------------------------------------------------------------------

inline Tensor linear_combine(const LayerStack& stack, const std::vector<Tensor>& weights) {
  stack.validate();
  if (static_cast<std::int64_t>(weights.size()) != stack.depth()) {
    throw ConfigError("linear_combine: got " + std::to_string(weights.size()) +
                      " weight vectors for " + std::to_string(stack.depth()) + " layers");
  }
  Tensor out;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    if (weights[l].rank() != 1 || weights[l].shape()[0] != stack.width()) {
      throw ConfigError("linear_combine: weight " + std::to_string(l) + " has shape " +
                        shape_to_string(weights[l].shape()) + ", expected [" +
                        std::to_string(stack.width()) + "]");
    }
    Tensor term = mul(stack.layers[l], weights[l]);
    out = out.defined() ? add(out, term) : term;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dynamic combination: per position j, W_l[j] = FFN_l(H^1[j] || ... || H^L[j])
// and the output is sum_l W_l[j] (.) H^l[j].
//
// FFN_l is linear (L*d -> d/2), ReLU, affine (d/2 -> d). The half-width hidden
// layer keeps the parameter count of this strategy strictly below the routing
// strategies for any L, d.
// ---------------------------------------------------------------------------

struct PositionwiseFfn {
  Tensor w1;  // [in, hidden]
  Tensor b1;  // [hidden]
  Tensor w2;  // [hidden, out]
  Tensor b2;  // [out]

  Tensor apply(const Tensor& x) const {
    return add(matmul(relu(add(matmul(x, w1), b1)), w2), b2);
  }
};

struct DynamicCombineParams {
  std::vector<PositionwiseFfn> ffns;  // one per layer
};

inline Tensor concat_layers(const LayerStack& stack) {
  return concat(stack.layers, -1);  // [.., L*d]
}

inline Tensor dynamic_combine(const LayerStack& stack, const DynamicCombineParams& params,
                              bool normalize_weights = false) {
  stack.validate();
  const std::int64_t L = stack.depth();
  const std::int64_t d = stack.width();
  if (static_cast<std::int64_t>(params.ffns.size()) != L) {
    throw ConfigError("dynamic_combine: got " + std::to_string(params.ffns.size()) +
                      " FFNs for " + std::to_string(L) + " layers");
  }
  const Tensor context = concat_layers(stack);
  std::vector<Tensor> weights(static_cast<std::size_t>(L));
  for (std::int64_t l = 0; l < L; ++l) {
    const auto& ffn = params.ffns[static_cast<std::size_t>(l)];
    if (ffn.w2.shape().back() != d) {
      throw ConfigError("dynamic_combine: FFN " + std::to_string(l) + " outputs width " +
                        std::to_string(ffn.w2.shape().back()) + ", expected " + std::to_string(d));
    }
    weights[static_cast<std::size_t>(l)] = ffn.apply(context);
  }
  if (normalize_weights) {
    // Softmax across layers, separately per position and per dimension.
    std::vector<Tensor> lifted;
    lifted.reserve(weights.size());
    for (auto& w : weights) lifted.push_back(unsqueeze(w, -2));
    Tensor stacked = softmax(concat(lifted, -2), -2);
    for (std::int64_t l = 0; l < L; ++l) {
      Tensor w = slice(stacked, -2, l, 1);
      Shape s = w.shape();
      s.erase(s.end() - 2);
      weights[static_cast<std::size_t>(l)] = reshape(w, s);
    }
  }
  Tensor out;
  for (std::int64_t l = 0; l < L; ++l) {
    Tensor term = mul(weights[static_cast<std::size_t>(l)], stack.layers[static_cast<std::size_t>(l)]);
    out = out.defined() ? add(out, term) : term;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Input-capsule construction, shared by both routing strategies.
// per-layer:  H^^l = H^l A_l + b_l          (A_l is d x d)
// all-layers: H^^l = (H^1 || ... || H^L) A_l + b_l   (A_l is L*d x d)
// ---------------------------------------------------------------------------

struct AffineParams {
  Tensor w;  // [in, d]
  Tensor b;  // [d]
};

struct CapsuleTransformParams {
  std::vector<AffineParams> transforms;  // one per layer
};

inline std::vector<Tensor> build_input_capsules(const LayerStack& stack, CapsuleInputMode mode,
                                                const CapsuleTransformParams& params) {
  stack.validate();
  const std::int64_t L = stack.depth();
  const std::int64_t d = stack.width();
  if (static_cast<std::int64_t>(params.transforms.size()) != L) {
    throw ConfigError("build_input_capsules: got " + std::to_string(params.transforms.size()) +
                      " transforms for " + std::to_string(L) + " layers");
  }
  const std::int64_t expected_in = mode == CapsuleInputMode::kPerLayer ? d : L * d;
  Tensor context;
  if (mode == CapsuleInputMode::kAllLayers) context = concat_layers(stack);

  std::vector<Tensor> capsules(static_cast<std::size_t>(L));
  for (std::int64_t l = 0; l < L; ++l) {
    const auto& t = params.transforms[static_cast<std::size_t>(l)];
    if (t.w.shape()[0] != expected_in || t.w.shape()[1] != d) {
      throw ConfigError("build_input_capsules: transform " + std::to_string(l) + " has shape " +
                        shape_to_string(t.w.shape()) + ", expected [" +
                        std::to_string(expected_in) + "," + std::to_string(d) + "]");
    }
    const Tensor& in = mode == CapsuleInputMode::kPerLayer
                           ? stack.layers[static_cast<std::size_t>(l)]
                           : context;
    capsules[static_cast<std::size_t>(l)] = add(matmul(in, t.w), t.b);
  }
  return capsules;
}

}  // namespace lcap
