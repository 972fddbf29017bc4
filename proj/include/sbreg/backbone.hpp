#pragma once

// Toy pre-LN transformer encoder used as the frozen backbone.
//
// Layer i maps h to h + delta with
//   a     = Attn(LN1(h))            (adapter on a, if attached)
//   f     = FFN(LN2(h + a))         (adapter on f, if attached)
//   delta = a + f
// so the hidden-state recursion is exactly residual. The output head is tied
// to the token embedding table and reads the final-LN state at the mask slot.

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sbreg/optim.hpp"
#include "sbreg/pet_params.hpp"
#include "sbreg/random.hpp"
#include "sbreg/snapshot.hpp"
#include "sbreg/tensor.hpp"

namespace sbreg {

struct ModelConfig {
  std::size_t num_layers = 4;
  std::size_t hidden_dim = 32;
  std::size_t num_heads = 2;
  std::size_t vocab_size = 64;
  std::size_t max_seq_len = 32;
  std::size_t ffn_dim = 256;
  int mask_token = 1;
  double ln_eps = 1e-5;

  void validate() const {
    if (num_layers < 1 || hidden_dim < 1 || num_heads < 1 || vocab_size < 2 || max_seq_len < 1 || ffn_dim < 1) {
      throw std::invalid_argument("model config: all sizes must be positive");
    }
    if (hidden_dim % num_heads != 0) {
      throw std::invalid_argument("model config: hidden_dim " + std::to_string(hidden_dim) +
                                  " not divisible by num_heads " + std::to_string(num_heads));
    }
    if (mask_token < 0 || static_cast<std::size_t>(mask_token) >= vocab_size) {
      throw std::invalid_argument("model config: mask token outside the vocabulary");
    }
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"num_layers", c.num_layers}, {"hidden_dim", c.hidden_dim}, {"num_heads", c.num_heads},
       {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}, {"ffn_dim", c.ffn_dim},
       {"mask_token", c.mask_token}, {"ln_eps", c.ln_eps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.num_layers = j.value("num_layers", c.num_layers);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.mask_token = j.value("mask_token", c.mask_token);
  c.ln_eps = j.value("ln_eps", c.ln_eps);
}

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1, w2, b2;
};

/// Number of bias slots per layer: ln1, q, k, v, o, ln2, ffn1, ffn2.
inline constexpr std::size_t kBiasesPerLayer = 8;

struct BackboneState {
  ModelConfig config;
  Tensor token_embedding;     // |V|×d, also the output head
  Tensor position_embedding;  // max_seq_len×d
  std::vector<LayerWeights> layers;
  Tensor final_ln_gain, final_ln_bias;
  Tensor head_bias;  // |V|

  std::vector<std::pair<std::string, Tensor*>> named_tensors() {
    std::vector<std::pair<std::string, Tensor*>> out{{"token_embedding", &token_embedding},
                                                     {"position_embedding", &position_embedding}};
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& w = layers[l];
      const auto p = "layers." + std::to_string(l) + ".";
      for (auto& [n, t] : std::initializer_list<std::pair<const char*, Tensor*>>{
               {"ln1_gain", &w.ln1_gain}, {"ln1_bias", &w.ln1_bias}, {"wq", &w.wq}, {"bq", &w.bq},
               {"wk", &w.wk},             {"bk", &w.bk},             {"wv", &w.wv}, {"bv", &w.bv},
               {"wo", &w.wo},             {"bo", &w.bo},             {"ln2_gain", &w.ln2_gain},
               {"ln2_bias", &w.ln2_bias}, {"w1", &w.w1},             {"b1", &w.b1}, {"w2", &w.w2},
               {"b2", &w.b2}}) {
        out.emplace_back(p + n, t);
      }
    }
    out.emplace_back("final_ln_gain", &final_ln_gain);
    out.emplace_back("final_ln_bias", &final_ln_bias);
    out.emplace_back("head_bias", &head_bias);
    return out;
  }

  std::vector<const Tensor*> all_tensors() const {
    auto named = const_cast<BackboneState*>(this)->named_tensors();
    std::vector<const Tensor*> out;
    for (auto& [n, t] : named) out.push_back(t);
    return out;
  }

  /// Bias slots in a fixed order: per layer (ln1, q, k, v, o, ln2, ffn1, ffn2), then final LN, head.
  std::vector<Tensor> bias_tensors() const {
    std::vector<Tensor> out;
    for (const auto& w : layers) {
      for (const Tensor* t : {&w.ln1_bias, &w.bq, &w.bk, &w.bv, &w.bo, &w.ln2_bias, &w.b1, &w.b2}) out.push_back(*t);
    }
    out.push_back(final_ln_bias);
    out.push_back(head_bias);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* t : all_tensors()) n += t->size();
    return n;
  }

  void set_trainable(bool flag) {
    for (auto& [n, t] : named_tensors()) t->set_requires_grad(flag);
  }
  void freeze() { set_trainable(false); }
  std::uint64_t checksum() const { return sbreg::checksum(all_tensors()); }

  BackboneState clone() const {
    BackboneState c = *this;
    for (auto& [n, t] : c.named_tensors()) *t = t->clone(t->requires_grad());
    return c;
  }
};

inline BackboneState init_backbone(const ModelConfig& config, Rng& rng) {
  config.validate();
  const std::size_t d = config.hidden_dim;
  auto normal = [&](Shape s, double std) {
    const auto n = shape_size(s);
    return Tensor::parameter(std::move(s), normal_vector(rng, n, std));
  };
  auto fill = [](Shape s, double v) {
    const auto n = shape_size(s);
    return Tensor::parameter(std::move(s), std::vector<double>(n, v));
  };
  const double wstd = 1.0 / std::sqrt(static_cast<double>(d));
  BackboneState s;
  s.config = config;
  s.token_embedding = normal({config.vocab_size, d}, 0.5);
  s.position_embedding = normal({config.max_seq_len, d}, 0.1);
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    LayerWeights w;
    w.ln1_gain = fill({d}, 1.0);
    w.ln1_bias = fill({d}, 0.0);
    w.wq = normal({d, d}, wstd);
    w.bq = fill({d}, 0.0);
    w.wk = normal({d, d}, wstd);
    w.bk = fill({d}, 0.0);
    w.wv = normal({d, d}, wstd);
    w.bv = fill({d}, 0.0);
    w.wo = normal({d, d}, wstd * 0.5);
    w.bo = fill({d}, 0.0);
    w.ln2_gain = fill({d}, 1.0);
    w.ln2_bias = fill({d}, 0.0);
    w.w1 = normal({config.ffn_dim, d}, wstd);
    w.b1 = fill({config.ffn_dim}, 0.0);
    w.w2 = normal({d, config.ffn_dim}, 0.5 / std::sqrt(static_cast<double>(config.ffn_dim)));
    w.b2 = fill({d}, 0.0);
    s.layers.push_back(std::move(w));
  }
  s.final_ln_gain = fill({d}, 1.0);
  s.final_ln_bias = fill({d}, 0.0);
  s.head_bias = fill({config.vocab_size}, 0.0);
  return s;
}

/// States at the output position and per-layer position means, layers 0..L.
struct HiddenTrace {
  std::vector<Tensor> h_out;  // each 1×d
  std::vector<Tensor> h_ctx;  // each 1×d

  std::size_t size() const { return h_out.size(); }

  /// (L+1)×d stacks, still on the graph.
  Tensor stacked_out() const { return concat(h_out, 0); }
  Tensor stacked_ctx() const { return concat(h_ctx, 0); }

  HiddenTrace detached() const {
    HiddenTrace t;
    for (const auto& h : h_out) t.h_out.push_back(h.detach());
    for (const auto& h : h_ctx) t.h_ctx.push_back(h.detach());
    return t;
  }
};

struct ForwardResult {
  Tensor logits;                // 1×|V|
  HiddenTrace trace;
  std::vector<Tensor> updates;  // per-layer residual updates, h_i = h_{i-1} + updates[i-1]
};

inline void check_tokens(const ModelConfig& config, std::span<const int> tokens) {
  if (tokens.empty()) throw std::invalid_argument("backbone: empty token sequence");
  if (tokens.size() > config.max_seq_len) {
    throw std::length_error("backbone: sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_seq_len " +
                            std::to_string(config.max_seq_len));
  }
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= config.vocab_size) {
      throw std::out_of_range("backbone: token id " + std::to_string(t) + " outside vocabulary of size " +
                              std::to_string(config.vocab_size));
    }
  }
}

/// Token plus positional embeddings: the N×d layer-0 states.
inline Tensor embed(const BackboneState& s, std::span<const int> tokens) {
  check_tokens(s.config, tokens);
  return add(gather_rows(s.token_embedding, tokens), slice_rows(s.position_embedding, 0, tokens.size()));
}

namespace detail {

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w, true), b); }

inline Tensor affine_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  return add(elementwise_mul(layer_norm(x, eps), gain), bias);
}

}  // namespace detail

inline ForwardResult forward(const BackboneState& s, std::span<const int> tokens, std::size_t mask_position,
                             const PetParams* pet = nullptr) {
  const auto& cfg = s.config;
  if (mask_position >= tokens.size()) {
    throw std::out_of_range("backbone: mask position " + std::to_string(mask_position) + " outside sequence of length " +
                            std::to_string(tokens.size()));
  }
  const PetKind kind = pet ? pet->config.kind : PetKind::Prompt;
  const bool use_prompt = pet && kind == PetKind::Prompt;
  const bool use_lora = pet && kind == PetKind::LoRA;
  const bool use_adapter = pet && kind == PetKind::Adapter;
  const std::vector<Tensor> biases = pet && kind == PetKind::BitFit ? pet->biases : s.bias_tensors();
  if (biases.size() != kBiasesPerLayer * cfg.num_layers + 2) throw std::invalid_argument("backbone: bias slot mismatch");

  Tensor h = embed(s, tokens);
  if (use_prompt) h = attach_prompt(pet->prompt, h, cfg.max_seq_len);

  ForwardResult res;
  auto record = [&](const Tensor& states) {
    res.trace.h_out.push_back(slice_rows(states, mask_position, mask_position + 1));
    res.trace.h_ctx.push_back(mean_over_axis(states, 0));
  };
  record(h);

  const std::size_t d = cfg.hidden_dim;
  const std::size_t dh = d / cfg.num_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto& w = s.layers[l];
    const Tensor* b = &biases[l * kBiasesPerLayer];
    // b: 0 ln1, 1 q, 2 k, 3 v, 4 o, 5 ln2, 6 ffn1, 7 ffn2
    Tensor x = detail::affine_norm(h, w.ln1_gain, b[0], cfg.ln_eps);
    Tensor q = use_lora ? add(lora_forward(w.wq, pet->lora_query[l].a, pet->lora_query[l].b, x), b[1])
                        : detail::linear(x, w.wq, b[1]);
    Tensor k = detail::linear(x, w.wk, b[2]);
    Tensor v = use_lora ? add(lora_forward(w.wv, pet->lora_value[l].a, pet->lora_value[l].b, x), b[3])
                        : detail::linear(x, w.wv, b[3]);
    std::vector<Tensor> heads;
    for (std::size_t hd = 0; hd < cfg.num_heads; ++hd) {
      const std::size_t c0 = hd * dh, c1 = c0 + dh;
      Tensor qh = slice_cols(q, c0, c1);
      Tensor kh = slice_cols(k, c0, c1);
      Tensor vh = slice_cols(v, c0, c1);
      Tensor att = softmax(scalar_mul(matmul(qh, kh, true), scale));
      heads.push_back(matmul(att, vh));
    }
    Tensor ctx = cfg.num_heads == 1 ? heads[0] : concat(heads, 1);
    Tensor a = detail::linear(ctx, w.wo, b[4]);
    if (use_adapter) a = adapter_forward(a, pet->adapter_attn[l].down, pet->adapter_attn[l].up);
    Tensor mid = add(h, a);
    Tensor y = detail::affine_norm(mid, w.ln2_gain, b[5], cfg.ln_eps);
    Tensor f = detail::linear(gelu(detail::linear(y, w.w1, b[6])), w.w2, b[7]);
    if (use_adapter) f = adapter_forward(f, pet->adapter_ffn[l].down, pet->adapter_ffn[l].up);
    Tensor delta = add(a, f);
    h = add(h, delta);
    res.updates.push_back(delta);
    record(h);
  }
  const std::size_t fb = cfg.num_layers * kBiasesPerLayer;
  Tensor z = detail::affine_norm(res.trace.h_out.back(), s.final_ln_gain, biases[fb], cfg.ln_eps);
  res.logits = add(matmul(z, s.token_embedding, true), biases[fb + 1]);
  return res;
}

// ---------------------------------------------------------------------------
// Masked-token pretraining

struct PretrainHyper {
  std::size_t steps = 3000;
  std::size_t batch_size = 16;
  double learning_rate = 3e-3;
  double grad_clip = 1.0;
  double last_position_ratio = 0.5;  // share of samples masking the final token
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const PretrainHyper& h) {
  j = {{"steps", h.steps}, {"batch_size", h.batch_size}, {"learning_rate", h.learning_rate},
       {"grad_clip", h.grad_clip}, {"last_position_ratio", h.last_position_ratio}, {"seed", h.seed}};
}

inline void from_json(const nlohmann::json& j, PretrainHyper& h) {
  h.steps = j.value("steps", h.steps);
  h.batch_size = j.value("batch_size", h.batch_size);
  h.learning_rate = j.value("learning_rate", h.learning_rate);
  h.grad_clip = j.value("grad_clip", h.grad_clip);
  h.last_position_ratio = j.value("last_position_ratio", h.last_position_ratio);
  h.seed = j.value("seed", h.seed);
}

struct MaskedExample {
  std::vector<int> tokens;  // with the mask token in place
  std::size_t mask_position;
  int target;
};

inline MaskedExample mask_one(const std::vector<int>& seq, int mask_token, double last_ratio, Rng& rng) {
  std::size_t pos = uniform01(rng) < last_ratio ? seq.size() - 1 : uniform_index(rng, seq.size());
  MaskedExample ex{seq, pos, seq[pos]};
  ex.tokens[pos] = mask_token;
  return ex;
}

/// Trains a fresh backbone with masked-token cross-entropy and returns it frozen.
inline BackboneState pretrain_mlm(const ModelConfig& config, const std::vector<std::vector<int>>& corpus,
                                  const PretrainHyper& hyper) {
  if (corpus.empty()) throw std::invalid_argument("pretrain: empty corpus");
  Rng rng(hyper.seed);
  BackboneState s = init_backbone(config, rng);
  std::vector<Tensor> params;
  for (auto& [n, t] : s.named_tensors()) params.push_back(*t);
  AdamState adam = make_adam(hyper.learning_rate);
  for (std::size_t step = 0; step < hyper.steps; ++step) {
    Tensor loss = Tensor::scalar(0.0);
    for (std::size_t b = 0; b < hyper.batch_size; ++b) {
      const auto& seq = corpus[uniform_index(rng, corpus.size())];
      auto ex = mask_one(seq, config.mask_token, hyper.last_position_ratio, rng);
      auto out = forward(s, ex.tokens, ex.mask_position);
      loss = add(loss, cross_entropy_with_logits(out.logits, static_cast<std::size_t>(ex.target)));
    }
    loss = scalar_mul(loss, 1.0 / static_cast<double>(hyper.batch_size));
    auto grads = backward(loss);
    clip_grad_norm(params, grads, hyper.grad_clip);
    adam_step(params, grads, adam);
  }
  s.freeze();
  return s;
}

// ---------------------------------------------------------------------------
// Snapshots

inline Snapshot to_snapshot(BackboneState& s) {
  Snapshot snap;
  snap.kind = SnapshotKind::Backbone;
  snap.header = {{"model", s.config}};
  for (auto& [n, t] : s.named_tensors()) snap.add(n, *t);
  return snap;
}

inline BackboneState backbone_from_snapshot(const Snapshot& snap) {
  if (snap.kind != SnapshotKind::Backbone) throw SnapshotError("snapshot: not a backbone snapshot");
  BackboneState s;
  s.config = snap.header.at("model").get<ModelConfig>();
  s.config.validate();
  s.layers.resize(s.config.num_layers);
  for (auto& [n, t] : s.named_tensors()) *t = snap.tensor(n);
  return s;
}

}  // namespace sbreg
