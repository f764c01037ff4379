#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "lcap/aggregation.hpp"
#include "lcap/params.hpp"
#include "lcap/routing.hpp"
#include "lcap/tensor.hpp"

namespace lcap {

inline constexpr std::int64_t kPadToken = 0;
inline constexpr std::int64_t kBosToken = 1;
inline constexpr std::int64_t kEosToken = 2;
inline constexpr std::int64_t kFirstDataToken = 3;

struct ModelConfig {
  std::int64_t layers = 4;
  std::int64_t d_model = 32;
  std::int64_t heads = 4;
  std::int64_t d_ff = 64;
  std::int64_t vocab_size = 32;
  std::int64_t max_len = 32;
  bool aggregate_encoder = false;
  bool aggregate_decoder = false;
  AggregatorConfig aggregator;

  std::vector<std::string> validation_errors() const {
    std::vector<std::string> errs;
    if (layers < 1) errs.push_back("model.layers: must be >= 1");
    if (d_model < 1) errs.push_back("model.d_model: must be >= 1");
    if (heads < 1) errs.push_back("model.heads: must be >= 1");
    if (heads >= 1 && d_model >= 1 && d_model % heads != 0) {
      errs.push_back("model.d_model: " + std::to_string(d_model) + " not divisible by heads " +
                     std::to_string(heads));
    }
    if (d_ff < 1) errs.push_back("model.d_ff: must be >= 1");
    if (vocab_size < kFirstDataToken + 1) {
      errs.push_back("model.vocab_size: must be >= " + std::to_string(kFirstDataToken + 1) +
                     " (pad/bos/eos plus data tokens)");
    }
    if (max_len < 2) errs.push_back("model.max_len: must be >= 2");
    if (aggregator.iterations < 1) errs.push_back("aggregator.iterations: must be >= 1");
    if (aggregator.capsules < 1) errs.push_back("aggregator.capsules: must be >= 1");
    if (aggregator.variance_floor <= 0) {
      errs.push_back("aggregator.variance_floor: must be > 0");
    }
    if (aggregator.is_routing() && aggregator.capsules >= 1 && d_model >= 1 &&
        d_model % aggregator.capsules != 0) {
      errs.push_back("aggregator.capsules: d_model " + std::to_string(d_model) +
                     " not divisible by N " + std::to_string(aggregator.capsules));
    }
    if (!aggregator.lambda_schedule.empty() &&
        static_cast<std::int64_t>(aggregator.lambda_schedule.size()) != aggregator.iterations) {
      errs.push_back("aggregator.lambda_schedule: has " +
                     std::to_string(aggregator.lambda_schedule.size()) + " entries for T = " +
                     std::to_string(aggregator.iterations));
    }
    return errs;
  }

  void validate() const {
    auto errs = validation_errors();
    if (!errs.empty()) {
      std::string msg = "invalid model config:";
      for (const auto& e : errs) msg += "\n  - " + e;
      throw ConfigError(msg);
    }
  }
};

struct Batch {
  IntMatrix src;       // [B, J_src], kPadToken padded
  IntMatrix src_mask;  // 1 on real tokens
  IntMatrix tgt_in;    // [B, J_tgt], BOS-shifted decoder input
  IntMatrix tgt_out;   // [B, J_tgt], gold targets ending in EOS
  IntMatrix tgt_mask;  // 1 where the loss counts

  std::int64_t batch_size() const { return src.rows; }
};

// Captured routing states of one forward pass (diagnostics).
struct ForwardTrace {
  std::optional<RoutingState> encoder_routing;
  std::optional<RoutingState> decoder_routing;
};

namespace model_detail {

inline Tensor sinusoidal_positions(std::int64_t max_len, std::int64_t d) {
  Tensor pe = Tensor::zeros({max_len, d});
  for (std::int64_t pos = 0; pos < max_len; ++pos) {
    for (std::int64_t i = 0; i < d; i += 2) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      pe.data()[static_cast<std::size_t>(pos * d + i)] = std::sin(angle);
      if (i + 1 < d) pe.data()[static_cast<std::size_t>(pos * d + i + 1)] = std::cos(angle);
    }
  }
  return pe;
}

inline constexpr double kMaskedScore = -1e9;
inline constexpr double kLayerNormEps = 1e-5;

}  // namespace model_detail

// Miniature pre-norm transformer encoder/decoder. Every layer output H^1..H^L
// of both stacks is exposed to the configured aggregator; the placement flags
// choose which side's top layer gets replaced by the aggregate.
class Seq2SeqModel {
 public:
  enum class Side { kEncoder, kDecoder };

  Seq2SeqModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, "init"));
    positions_ = model_detail::sinusoidal_positions(cfg_.max_len, cfg_.d_model);
    build_base_parameters(rng);
    // Aggregator parameters come after every base parameter so that models
    // differing only in strategy share the same base initialization.
    if (cfg_.aggregate_encoder) build_aggregator_parameters("enc.agg.", enc_agg_, rng);
    if (cfg_.aggregate_decoder) build_aggregator_parameters("dec.agg.", dec_agg_, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  std::int64_t param_count() const { return params_.total_count(); }

  // Encoder stack H^1..H^L (embeddings excluded).
  LayerStack encode(const Batch& batch) const {
    const Tensor key_mask = additive_key_mask(batch.src_mask);
    Tensor x = embed(params_.get("src_embed").tensor, batch.src);
    LayerStack stack;
    for (std::int64_t l = 0; l < cfg_.layers; ++l) {
      const std::string p = "enc.l" + std::to_string(l) + ".";
      Tensor normed = ln(p + "ln1.", x);
      Tensor h = add(x, attention(p + "attn.", normed, normed, key_mask));
      x = add(h, ffn(p + "ffn.", ln(p + "ln2.", h)));
      stack.layers.push_back(x);
    }
    return stack;
  }

  // Strategy dispatch over one side's stack. Strategy none hands back H^L
  // itself, bit for bit.
  Tensor aggregate(const LayerStack& stack, Side side, RoutingState* state = nullptr) const {
    const AggregatorSideParams& agg = side == Side::kEncoder ? enc_agg_ : dec_agg_;
    const auto& acfg = cfg_.aggregator;
    switch (acfg.strategy) {
      case AggregationStrategy::kNone:
        return stack.layers.back();
      case AggregationStrategy::kLinear:
        return linear_combine(stack, agg.linear_weights);
      case AggregationStrategy::kDynamicFfn:
        return dynamic_combine(stack, agg.dyn, acfg.normalize_dynamic_weights);
      case AggregationStrategy::kDynamicRouting: {
        auto caps = build_input_capsules(stack, acfg.capsule_input_mode, agg.caps);
        auto res = dynamic_routing(compute_votes(caps, agg.votes), acfg.iterations);
        if (state) *state = res.state;
        return res.output.flattened;
      }
      case AggregationStrategy::kEmRouting: {
        auto caps = build_input_capsules(stack, acfg.capsule_input_mode, agg.caps);
        Tensor act_in = input_activation(caps, agg.act_weights);
        EmRoutingConfig rcfg;
        rcfg.iterations = acfg.iterations;
        rcfg.lambda_schedule = acfg.effective_lambda_schedule();
        rcfg.variance_floor = acfg.variance_floor;
        auto res = em_routing(compute_votes(caps, agg.votes), act_in, agg.em, rcfg);
        if (state) *state = res.state;
        return res.output.flattened;
      }
    }
    throw ConfigError("aggregate: unknown strategy");
  }

  // Teacher-forced logits [B, J_tgt, vocab].
  Tensor forward(const Batch& batch, ForwardTrace* trace = nullptr) const {
    LayerStack enc_stack = encode(batch);
    Tensor enc_repr;
    if (cfg_.aggregate_encoder) {
      RoutingState st;
      enc_repr = aggregate(enc_stack, Side::kEncoder,
                           trace && cfg_.aggregator.is_routing() ? &st : nullptr);
      if (trace && cfg_.aggregator.is_routing()) trace->encoder_routing = std::move(st);
    } else {
      enc_repr = enc_stack.layers.back();
    }
    Tensor memory = ln("enc.ln_f.", enc_repr);

    LayerStack dec_stack = decode_stack(batch, memory);
    Tensor dec_repr;
    if (cfg_.aggregate_decoder) {
      RoutingState st;
      dec_repr = aggregate(dec_stack, Side::kDecoder,
                           trace && cfg_.aggregator.is_routing() ? &st : nullptr);
      if (trace && cfg_.aggregator.is_routing()) trace->decoder_routing = std::move(st);
    } else {
      dec_repr = dec_stack.layers.back();
    }
    return output_logits(ln("dec.ln_f.", dec_repr));
  }

  // The same wiring with the aggregation module compiled out of the path:
  // this function never touches the aggregation or routing code.
  Tensor forward_plain(const Batch& batch) const {
    LayerStack enc_stack = encode(batch);
    Tensor memory = ln("enc.ln_f.", enc_stack.layers.back());
    LayerStack dec_stack = decode_stack(batch, memory);
    return output_logits(ln("dec.ln_f.", dec_stack.layers.back()));
  }

  // Greedy decoding; a pure function of the source tokens.
  std::vector<std::vector<std::int64_t>> greedy_decode(const IntMatrix& src,
                                                       const IntMatrix& src_mask,
                                                       std::int64_t limit) const {
    NoGradGuard ng;
    const std::int64_t B = src.rows;
    std::vector<std::vector<std::int64_t>> out(static_cast<std::size_t>(B));
    std::vector<bool> done(static_cast<std::size_t>(B), false);
    const std::int64_t steps = std::min(limit, cfg_.max_len - 1);
    for (std::int64_t t = 0; t < steps; ++t) {
      Batch batch;
      batch.src = src;
      batch.src_mask = src_mask;
      batch.tgt_in = IntMatrix(B, t + 1, kPadToken);
      batch.tgt_out = IntMatrix(B, t + 1, kPadToken);
      batch.tgt_mask = IntMatrix(B, t + 1, 1);
      for (std::int64_t b = 0; b < B; ++b) {
        batch.tgt_in.at(b, 0) = kBosToken;
        for (std::int64_t k = 0; k < t; ++k) {
          batch.tgt_in.at(b, k + 1) = out[static_cast<std::size_t>(b)].size() > static_cast<std::size_t>(k)
                                          ? out[static_cast<std::size_t>(b)][static_cast<std::size_t>(k)]
                                          : kPadToken;
        }
      }
      Tensor logits = forward(batch);
      const std::int64_t V = cfg_.vocab_size;
      bool all_done = true;
      for (std::int64_t b = 0; b < B; ++b) {
        if (done[static_cast<std::size_t>(b)]) continue;
        const double* row = logits.data().data() + ((b * (t + 1)) + t) * V;
        std::int64_t best = 0;
        for (std::int64_t v = 1; v < V; ++v) {
          if (row[v] > row[best]) best = v;
        }
        if (best == kEosToken) {
          done[static_cast<std::size_t>(b)] = true;
        } else {
          out[static_cast<std::size_t>(b)].push_back(best);
          all_done = false;
        }
      }
      if (all_done) break;
    }
    return out;
  }

  // Parameter bundles of one side's aggregator (registered in params()).
  struct AggregatorSideParams {
    std::vector<Tensor> linear_weights;
    DynamicCombineParams dyn;
    CapsuleTransformParams caps;
    VoteParams votes;
    std::vector<Tensor> act_weights;
    EmParams em;
  };

  const AggregatorSideParams& aggregator_params(Side side) const {
    return side == Side::kEncoder ? enc_agg_ : dec_agg_;
  }

 private:

  void build_base_parameters(Rng& rng) {
    const std::int64_t d = cfg_.d_model;
    const std::int64_t V = cfg_.vocab_size;
    params_.add("src_embed", Tensor::randn({V, d}, rng, 1.0 / std::sqrt(static_cast<double>(d))));
    params_.add("tgt_embed", Tensor::randn({V, d}, rng, 1.0 / std::sqrt(static_cast<double>(d))));
    for (std::int64_t l = 0; l < cfg_.layers; ++l) {
      const std::string p = "enc.l" + std::to_string(l) + ".";
      add_layer_norm(p + "ln1.");
      add_attention(p + "attn.", rng);
      add_layer_norm(p + "ln2.");
      add_ffn(p + "ffn.", rng);
    }
    add_layer_norm("enc.ln_f.");
    for (std::int64_t l = 0; l < cfg_.layers; ++l) {
      const std::string p = "dec.l" + std::to_string(l) + ".";
      add_layer_norm(p + "ln1.");
      add_attention(p + "attn.", rng);
      add_layer_norm(p + "ln2.");
      add_attention(p + "cross.", rng);
      add_layer_norm(p + "ln3.");
      add_ffn(p + "ffn.", rng);
    }
    add_layer_norm("dec.ln_f.");
    params_.add("out.w", Tensor::xavier({d, V}, rng));
    params_.add("out.b", Tensor::zeros({V}));
  }

  void add_layer_norm(const std::string& prefix) {
    params_.add(prefix + "g", Tensor::ones({cfg_.d_model}));
    params_.add(prefix + "b", Tensor::zeros({cfg_.d_model}));
  }

  void add_attention(const std::string& prefix, Rng& rng) {
    const std::int64_t d = cfg_.d_model;
    params_.add(prefix + "wq", Tensor::xavier({d, d}, rng));
    params_.add(prefix + "wk", Tensor::xavier({d, d}, rng));
    params_.add(prefix + "wv", Tensor::xavier({d, d}, rng));
    params_.add(prefix + "wo", Tensor::xavier({d, d}, rng));
  }

  void add_ffn(const std::string& prefix, Rng& rng) {
    const std::int64_t d = cfg_.d_model;
    params_.add(prefix + "w1", Tensor::xavier({d, cfg_.d_ff}, rng));
    params_.add(prefix + "b1", Tensor::zeros({cfg_.d_ff}));
    params_.add(prefix + "w2", Tensor::xavier({cfg_.d_ff, d}, rng));
    params_.add(prefix + "b2", Tensor::zeros({d}));
  }

  void build_aggregator_parameters(const std::string& prefix, AggregatorSideParams& agg, Rng& rng) {
    const std::int64_t L = cfg_.layers;
    const std::int64_t d = cfg_.d_model;
    const auto& acfg = cfg_.aggregator;
    switch (acfg.strategy) {
      case AggregationStrategy::kNone:
        return;
      case AggregationStrategy::kLinear: {
        for (std::int64_t l = 0; l < L; ++l) {
          agg.linear_weights.push_back(params_.add(
              prefix + "w" + std::to_string(l), Tensor::full({d}, 1.0 / static_cast<double>(L))));
        }
        return;
      }
      case AggregationStrategy::kDynamicFfn: {
        const std::int64_t hidden = std::max<std::int64_t>(1, d / 2);
        for (std::int64_t l = 0; l < L; ++l) {
          const std::string p = prefix + "ffn" + std::to_string(l) + ".";
          PositionwiseFfn f;
          f.w1 = params_.add(p + "w1", Tensor::xavier({L * d, hidden}, rng));
          f.b1 = params_.add(p + "b1", Tensor::zeros({hidden}));
          f.w2 = params_.add(p + "w2", Tensor::xavier({hidden, d}, rng));
          f.b2 = params_.add(p + "b2", Tensor::full({d}, 1.0 / static_cast<double>(L)));
          agg.dyn.ffns.push_back(f);
        }
        return;
      }
      case AggregationStrategy::kDynamicRouting:
      case AggregationStrategy::kEmRouting: {
        const std::int64_t N = acfg.capsules;
        const std::int64_t h = d / N;
        const std::int64_t cap_in = acfg.capsule_input_mode == CapsuleInputMode::kPerLayer ? d : L * d;
        for (std::int64_t l = 0; l < L; ++l) {
          const std::string p = prefix + "cap" + std::to_string(l) + ".";
          AffineParams t;
          t.w = params_.add(p + "w", Tensor::xavier({cap_in, d}, rng));
          t.b = params_.add(p + "b", Tensor::zeros({d}));
          agg.caps.transforms.push_back(t);
        }
        agg.votes.weights.resize(static_cast<std::size_t>(L));
        for (std::int64_t l = 0; l < L; ++l) {
          for (std::int64_t n = 0; n < N; ++n) {
            agg.votes.weights[static_cast<std::size_t>(l)].push_back(
                params_.add(prefix + "vote.l" + std::to_string(l) + ".n" + std::to_string(n),
                            Tensor::xavier({d, h}, rng)));
          }
        }
        if (acfg.strategy == AggregationStrategy::kEmRouting) {
          for (std::int64_t l = 0; l < L; ++l) {
            agg.act_weights.push_back(params_.add(prefix + "act" + std::to_string(l) + ".w",
                                                  Tensor::xavier({d, 1}, rng)));
          }
          agg.em.beta_a =
              params_.add(prefix + "beta_a", Tensor::scalar(0.0), acfg.trainable_betas);
          agg.em.beta_mu =
              params_.add(prefix + "beta_mu", Tensor::scalar(0.0), acfg.trainable_betas);
        }
        return;
      }
    }
  }

  Tensor embed(const Tensor& table, const IntMatrix& tokens) const {
    if (tokens.cols > cfg_.max_len) {
      throw ContractError("sequence length " + std::to_string(tokens.cols) +
                          " exceeds max_len " + std::to_string(cfg_.max_len));
    }
    Tensor e = mul_scalar(embedding(table, tokens), std::sqrt(static_cast<double>(cfg_.d_model)));
    Tensor pos = unsqueeze(slice(positions_, 0, 0, tokens.cols), 0);
    return add(e, pos);
  }

  Tensor ln(const std::string& prefix, const Tensor& x) const {
    return layer_norm(x, params_.get(prefix + "g").tensor, params_.get(prefix + "b").tensor,
                      model_detail::kLayerNormEps);
  }

  Tensor ffn(const std::string& prefix, const Tensor& x) const {
    Tensor h = relu(add(matmul(x, params_.get(prefix + "w1").tensor),
                        params_.get(prefix + "b1").tensor));
    return add(matmul(h, params_.get(prefix + "w2").tensor), params_.get(prefix + "b2").tensor);
  }

  Tensor split_heads(const Tensor& x) const {
    const std::int64_t B = x.shape()[0];
    const std::int64_t J = x.shape()[1];
    const std::int64_t H = cfg_.heads;
    const std::int64_t dk = cfg_.d_model / H;
    return transpose(reshape(x, {B, J, H, dk}), 1, 2);  // [B, H, J, dk]
  }

  Tensor merge_heads(const Tensor& x) const {
    const std::int64_t B = x.shape()[0];
    const std::int64_t J = x.shape()[2];
    return reshape(transpose(x, 1, 2), {B, J, cfg_.d_model});
  }

  // Multi-head attention; `mask` is additive over the score matrix.
  Tensor attention(const std::string& prefix, const Tensor& q_in, const Tensor& kv_in,
                   const Tensor& mask) const {
    const std::int64_t dk = cfg_.d_model / cfg_.heads;
    Tensor q = split_heads(matmul(q_in, params_.get(prefix + "wq").tensor));
    Tensor k = split_heads(matmul(kv_in, params_.get(prefix + "wk").tensor));
    Tensor v = split_heads(matmul(kv_in, params_.get(prefix + "wv").tensor));
    Tensor scores = mul_scalar(matmul(q, transpose(k, -1, -2)),
                               1.0 / std::sqrt(static_cast<double>(dk)));
    scores = add(scores, mask);
    Tensor ctx = merge_heads(matmul(softmax(scores, -1), v));
    return matmul(ctx, params_.get(prefix + "wo").tensor);
  }

  // [B, 1, 1, J] additive mask from a 0/1 key mask.
  Tensor additive_key_mask(const IntMatrix& mask) const {
    Tensor t = Tensor::zeros({mask.rows, 1, 1, mask.cols});
    for (std::size_t i = 0; i < mask.values.size(); ++i) {
      t.data()[i] = mask.values[i] ? 0.0 : model_detail::kMaskedScore;
    }
    return t;
  }

  // [B, 1, J, J] additive causal-plus-padding mask for decoder self-attention.
  Tensor causal_mask(const IntMatrix& mask) const {
    const std::int64_t B = mask.rows;
    const std::int64_t J = mask.cols;
    Tensor t = Tensor::zeros({B, 1, J, J});
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t i = 0; i < J; ++i) {
        for (std::int64_t j = 0; j < J; ++j) {
          const bool visible = j <= i && mask.at(b, j) != 0;
          t.data()[static_cast<std::size_t>(((b * J) + i) * J + j)] =
              visible ? 0.0 : model_detail::kMaskedScore;
        }
      }
    }
    return t;
  }

  LayerStack decode_stack(const Batch& batch, const Tensor& memory) const {
    const Tensor self_mask = causal_mask(batch.tgt_mask);
    const Tensor mem_mask = additive_key_mask(batch.src_mask);
    Tensor x = embed(params_.get("tgt_embed").tensor, batch.tgt_in);
    LayerStack stack;
    for (std::int64_t l = 0; l < cfg_.layers; ++l) {
      const std::string p = "dec.l" + std::to_string(l) + ".";
      Tensor normed = ln(p + "ln1.", x);
      Tensor h = add(x, attention(p + "attn.", normed, normed, self_mask));
      Tensor c = add(h, attention(p + "cross.", ln(p + "ln2.", h), memory, mem_mask));
      x = add(c, ffn(p + "ffn.", ln(p + "ln3.", c)));
      stack.layers.push_back(x);
    }
    return stack;
  }

  Tensor output_logits(const Tensor& dec_repr) const {
    return add(matmul(dec_repr, params_.get("out.w").tensor), params_.get("out.b").tensor);
  }

  ModelConfig cfg_;
  ParameterStore params_;
  Tensor positions_;
  AggregatorSideParams enc_agg_;
  AggregatorSideParams dec_agg_;
};

// Masked token-level cross entropy, averaged over unmasked target positions.
inline Tensor cross_entropy_loss(const Tensor& logits, const IntMatrix& targets,
                                 const IntMatrix& mask) {
  Tensor logp = log_softmax(logits, -1);
  Tensor picked = gather_index(logp, targets);
  Tensor mask_t = Tensor::zeros({mask.rows, mask.cols});
  double count = 0;
  for (std::size_t i = 0; i < mask.values.size(); ++i) {
    mask_t.data()[i] = mask.values[i] ? 1.0 : 0.0;
    count += mask_t.data()[i];
  }
  if (count == 0) throw ContractError("cross_entropy_loss: empty target mask");
  return mul_scalar(sum_all(mul(picked, mask_t)), -1.0 / count);
}

// Fraction of unmasked target positions whose argmax matches the gold token.
inline double token_accuracy(const Tensor& logits, const IntMatrix& targets,
                             const IntMatrix& mask) {
  const std::int64_t V = logits.shape().back();
  std::int64_t correct = 0, total = 0;
  for (std::size_t i = 0; i < targets.values.size(); ++i) {
    if (!mask.values[i]) continue;
    const double* row = logits.data().data() + i * static_cast<std::size_t>(V);
    std::int64_t best = 0;
    for (std::int64_t v = 1; v < V; ++v) {
      if (row[v] > row[best]) best = v;
    }
    correct += best == targets.values[i] ? 1 : 0;
    ++total;
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

}  // namespace lcap
