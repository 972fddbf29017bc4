#pragma once

// Trainable parameter sets of the four parameter-efficient tuning methods and
// their elementary forward rules. Row convention: a sequence of N states is an
// N×d tensor, and a linear map W (out×in) acts as x W^T.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sbreg/tensor.hpp"

namespace sbreg {

enum class PetKind { Prompt, LoRA, BitFit, Adapter };

inline const char* pet_name(PetKind k) {
  switch (k) {
    case PetKind::Prompt: return "prompt";
    case PetKind::LoRA: return "lora";
    case PetKind::BitFit: return "bitfit";
    case PetKind::Adapter: return "adapter";
  }
  return "unknown";
}

inline PetKind parse_pet(const std::string& s) {
  if (s == "prompt") return PetKind::Prompt;
  if (s == "lora") return PetKind::LoRA;
  if (s == "bitfit") return PetKind::BitFit;
  if (s == "adapter") return PetKind::Adapter;
  throw std::invalid_argument("unknown PET '" + s + "' (expected prompt|lora|bitfit|adapter)");
}

struct PetConfig {
  PetKind kind = PetKind::Prompt;
  std::size_t prompt_len = 8;
  std::size_t lora_rank = 4;
  std::size_t adapter_dim = 8;

  void validate(std::size_t hidden_dim) const {
    if (prompt_len < 1) throw std::invalid_argument("pet: prompt length must be at least 1");
    if (lora_rank < 1 || lora_rank >= hidden_dim) throw std::invalid_argument("pet: LoRA rank must be in [1, d)");
    if (adapter_dim < 1) throw std::invalid_argument("pet: adapter bottleneck must be at least 1");
  }
};

struct LoraFactors {
  Tensor a;  // r×k
  Tensor b;  // d×r
};

struct AdapterWeights {
  Tensor down;  // r×d
  Tensor up;    // d×r
};

/// Only the members used by config.kind are populated.
struct PetParams {
  PetConfig config;
  Tensor prompt;                         // m×d
  std::vector<LoraFactors> lora_query;   // per layer
  std::vector<LoraFactors> lora_value;   // per layer
  std::vector<Tensor> biases;            // bias slots, backbone order
  std::vector<AdapterWeights> adapter_attn;
  std::vector<AdapterWeights> adapter_ffn;

  std::vector<std::pair<std::string, Tensor>> named() const {
    std::vector<std::pair<std::string, Tensor>> out;
    switch (config.kind) {
      case PetKind::Prompt: out.emplace_back("prompt", prompt); break;
      case PetKind::LoRA:
        for (std::size_t l = 0; l < lora_query.size(); ++l) {
          const auto p = "layers." + std::to_string(l) + ".";
          out.emplace_back(p + "lora_q.a", lora_query[l].a);
          out.emplace_back(p + "lora_q.b", lora_query[l].b);
          out.emplace_back(p + "lora_v.a", lora_value[l].a);
          out.emplace_back(p + "lora_v.b", lora_value[l].b);
        }
        break;
      case PetKind::BitFit:
        for (std::size_t k = 0; k < biases.size(); ++k) out.emplace_back("bias." + std::to_string(k), biases[k]);
        break;
      case PetKind::Adapter:
        for (std::size_t l = 0; l < adapter_attn.size(); ++l) {
          const auto p = "layers." + std::to_string(l) + ".";
          out.emplace_back(p + "adapter_attn.down", adapter_attn[l].down);
          out.emplace_back(p + "adapter_attn.up", adapter_attn[l].up);
          out.emplace_back(p + "adapter_ffn.down", adapter_ffn[l].down);
          out.emplace_back(p + "adapter_ffn.up", adapter_ffn[l].up);
        }
        break;
    }
    return out;
  }

  std::vector<Tensor> trainables() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named()) n += t.size();
    return n;
  }

  /// Independent copy with fresh leaves (used for best-on-dev checkpoints).
  PetParams clone() const {
    PetParams c;
    c.config = config;
    auto copy = [](const Tensor& t) { return t.defined() ? t.clone(t.requires_grad()) : Tensor{}; };
    c.prompt = copy(prompt);
    for (const auto& f : lora_query) c.lora_query.push_back({copy(f.a), copy(f.b)});
    for (const auto& f : lora_value) c.lora_value.push_back({copy(f.a), copy(f.b)});
    for (const auto& b : biases) c.biases.push_back(copy(b));
    for (const auto& w : adapter_attn) c.adapter_attn.push_back({copy(w.down), copy(w.up)});
    for (const auto& w : adapter_ffn) c.adapter_ffn.push_back({copy(w.down), copy(w.up)});
    return c;
  }
};

/// Appends m trainable virtual-token states after the N input states.
inline Tensor attach_prompt(const Tensor& prompt, const Tensor& states, std::size_t max_seq_len) {
  if (prompt.ndim() != 2 || states.ndim() != 2 || prompt.cols() != states.cols()) {
    throw ShapeError("attach_prompt: prompt " + shape_str(prompt.shape()) + " does not match states " +
                     shape_str(states.shape()));
  }
  if (states.rows() + prompt.rows() > max_seq_len) {
    throw std::length_error("attach_prompt: " + std::to_string(states.rows()) + " tokens + " +
                            std::to_string(prompt.rows()) + " prompt slots exceed max_seq_len " +
                            std::to_string(max_seq_len));
  }
  return concat({states, prompt}, 0);
}

/// x W^T + (x A^T) B^T, for rows x of width k.
inline Tensor lora_forward(const Tensor& w, const Tensor& a, const Tensor& b, const Tensor& x) {
  if (a.ndim() != 2 || b.ndim() != 2 || w.ndim() != 2 || a.cols() != w.cols() || b.rows() != w.rows() ||
      b.cols() != a.rows()) {
    throw ShapeError("lora_forward: W " + shape_str(w.shape()) + ", A " + shape_str(a.shape()) + ", B " +
                     shape_str(b.shape()) + " do not conform");
  }
  return add(matmul(x, w, true), matmul(matmul(x, a, true), b, true));
}

/// h + W_u relu(W_d h), for rows h of width d.
inline Tensor adapter_forward(const Tensor& h, const Tensor& down, const Tensor& up) {
  if (down.ndim() != 2 || up.ndim() != 2 || down.cols() != h.cols() || up.rows() != h.cols() ||
      up.cols() != down.rows()) {
    throw ShapeError("adapter_forward: W_d " + shape_str(down.shape()) + ", W_u " + shape_str(up.shape()) +
                     " do not conform to h " + shape_str(h.shape()));
  }
  return add(h, matmul(relu(matmul(h, down, true)), up, true));
}

}  // namespace sbreg
