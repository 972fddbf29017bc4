#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sbreg/backbone.hpp"
#include "sbreg/pet_params.hpp"
#include "sbreg/random.hpp"
#include "sbreg/snapshot.hpp"

namespace sbreg {

inline void to_json(nlohmann::json& j, const PetConfig& c) {
  j = {{"kind", pet_name(c.kind)}, {"prompt_len", c.prompt_len}, {"lora_rank", c.lora_rank},
       {"adapter_dim", c.adapter_dim}};
}

inline void from_json(const nlohmann::json& j, PetConfig& c) {
  if (j.contains("kind")) c.kind = parse_pet(j.at("kind").get<std::string>());
  c.prompt_len = j.value("prompt_len", c.prompt_len);
  c.lora_rank = j.value("lora_rank", c.lora_rank);
  c.adapter_dim = j.value("adapter_dim", c.adapter_dim);
}

/// Trainable copies of every bias slot; the frozen backbone is left untouched.
inline std::vector<Tensor> bitfit_trainables(const BackboneState& s) {
  std::vector<Tensor> out;
  for (const auto& b : s.bias_tensors()) out.push_back(b.clone(true));
  return out;
}

/// Fresh PET parameters. LoRA B and adapter W_u start at zero so the attached
/// model initially computes exactly the frozen forward.
inline PetParams init_pet(const PetConfig& config, const BackboneState& s, Rng& rng) {
  const auto& mc = s.config;
  config.validate(mc.hidden_dim);
  const std::size_t d = mc.hidden_dim;
  PetParams p;
  p.config = config;
  auto normal = [&](Shape shape, double std) {
    const auto n = shape_size(shape);
    return Tensor::parameter(std::move(shape), normal_vector(rng, n, std));
  };
  switch (config.kind) {
    case PetKind::Prompt: {
      // Initialized from the embeddings of randomly drawn vocabulary tokens.
      std::vector<double> data;
      auto table = s.token_embedding.data();
      for (std::size_t i = 0; i < config.prompt_len; ++i) {
        const std::size_t tok = uniform_index(rng, mc.vocab_size);
        data.insert(data.end(), table.begin() + static_cast<std::ptrdiff_t>(tok * d),
                    table.begin() + static_cast<std::ptrdiff_t>((tok + 1) * d));
      }
      p.prompt = Tensor::parameter({config.prompt_len, d}, std::move(data));
      break;
    }
    case PetKind::LoRA:
      for (std::size_t l = 0; l < mc.num_layers; ++l) {
        p.lora_query.push_back({normal({config.lora_rank, d}, 0.02), Tensor::zeros({d, config.lora_rank}, true)});
        p.lora_value.push_back({normal({config.lora_rank, d}, 0.02), Tensor::zeros({d, config.lora_rank}, true)});
      }
      break;
    case PetKind::BitFit: p.biases = bitfit_trainables(s); break;
    case PetKind::Adapter:
      for (std::size_t l = 0; l < mc.num_layers; ++l) {
        p.adapter_attn.push_back({normal({config.adapter_dim, d}, 0.02), Tensor::zeros({d, config.adapter_dim}, true)});
        p.adapter_ffn.push_back({normal({config.adapter_dim, d}, 0.02), Tensor::zeros({d, config.adapter_dim}, true)});
      }
      break;
  }
  return p;
}

inline Snapshot to_snapshot(const PetParams& p) {
  Snapshot snap;
  snap.kind = SnapshotKind::Pet;
  snap.header = {{"pet", p.config}};
  for (const auto& [n, t] : p.named()) snap.add(n, t);
  return snap;
}

inline PetParams pet_from_snapshot(const Snapshot& snap, const BackboneState& s) {
  if (snap.kind != SnapshotKind::Pet) throw SnapshotError("snapshot: not a PET snapshot");
  PetParams p;
  p.config = snap.header.at("pet").get<PetConfig>();
  const std::size_t L = s.config.num_layers;
  switch (p.config.kind) {
    case PetKind::Prompt: p.prompt = snap.tensor("prompt", true); break;
    case PetKind::LoRA:
      for (std::size_t l = 0; l < L; ++l) {
        const auto pre = "layers." + std::to_string(l) + ".";
        p.lora_query.push_back({snap.tensor(pre + "lora_q.a", true), snap.tensor(pre + "lora_q.b", true)});
        p.lora_value.push_back({snap.tensor(pre + "lora_v.a", true), snap.tensor(pre + "lora_v.b", true)});
      }
      break;
    case PetKind::BitFit:
      for (std::size_t k = 0; k < L * kBiasesPerLayer + 2; ++k) p.biases.push_back(snap.tensor("bias." + std::to_string(k), true));
      break;
    case PetKind::Adapter:
      for (std::size_t l = 0; l < L; ++l) {
        const auto pre = "layers." + std::to_string(l) + ".";
        p.adapter_attn.push_back({snap.tensor(pre + "adapter_attn.down", true), snap.tensor(pre + "adapter_attn.up", true)});
        p.adapter_ffn.push_back({snap.tensor(pre + "adapter_ffn.down", true), snap.tensor(pre + "adapter_ffn.up", true)});
      }
      break;
  }
  return p;
}

}  // namespace sbreg
