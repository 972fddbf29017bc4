#pragma once

// PET training with terminal cross-entropy plus an optional bridge running
// cost, few-shot splitting, evaluation, and run-directory output.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sbreg/backbone.hpp"
#include "sbreg/bridges.hpp"
#include "sbreg/dataset.hpp"
#include "sbreg/latent_map.hpp"
#include "sbreg/metrics.hpp"
#include "sbreg/optim.hpp"
#include "sbreg/pets.hpp"
#include "sbreg/random.hpp"
#include "sbreg/snapshot.hpp"

namespace sbreg {

enum class RegMethod { None, PDF, SDE };

inline const char* reg_name(RegMethod m) {
  switch (m) {
    case RegMethod::None: return "none";
    case RegMethod::PDF: return "pdf";
    case RegMethod::SDE: return "sde";
  }
  return "unknown";
}

inline RegMethod parse_reg(const std::string& s) {
  if (s == "none") return RegMethod::None;
  if (s == "pdf") return RegMethod::PDF;
  if (s == "sde") return RegMethod::SDE;
  throw std::invalid_argument("unknown regularizer '" + s + "' (expected none|pdf|sde)");
}

struct TrainConfig {
  double alpha = 0.0;
  RegMethod method = RegMethod::None;
  BridgeKind bridge_kind = BridgeKind::Brownian;
  double ou_q = 1.0;
  double ou_sigma = 1.0;
  double learning_rate = 1e-2;
  std::size_t batch_size = 2;
  std::size_t max_steps = 1000;
  std::size_t eval_every = 50;
  std::uint64_t seed = 0;
  double grad_clip = 1.0;
  std::size_t sde_steps = 16;
  Metric metric = Metric::Accuracy;

  void validate() const {
    if (!(alpha >= 0.0)) throw std::invalid_argument("train: alpha must be non-negative");
    if (batch_size < 1 || max_steps < 1 || eval_every < 1) throw std::invalid_argument("train: batch, steps and eval_every must be positive");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train: learning rate must be positive");
  }

  /// Bridge template; beta is filled per sample.
  BridgeSpec bridge() const {
    BridgeSpec s;
    s.kind = bridge_kind;
    s.q = ou_q;
    s.sigma = ou_sigma;
    return s;
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"alpha", c.alpha},
       {"method", reg_name(c.method)},
       {"bridge", bridge_name(c.bridge_kind)},
       {"ou_q", c.ou_q},
       {"ou_sigma", c.ou_sigma},
       {"learning_rate", c.learning_rate},
       {"batch_size", c.batch_size},
       {"max_steps", c.max_steps},
       {"eval_every", c.eval_every},
       {"seed", c.seed},
       {"grad_clip", c.grad_clip},
       {"sde_steps", c.sde_steps},
       {"metric", metric_name(c.metric)}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.alpha = j.value("alpha", c.alpha);
  if (j.contains("method")) c.method = parse_reg(j.at("method").get<std::string>());
  if (j.contains("bridge")) c.bridge_kind = parse_bridge(j.at("bridge").get<std::string>());
  c.ou_q = j.value("ou_q", c.ou_q);
  c.ou_sigma = j.value("ou_sigma", c.ou_sigma);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.seed = j.value("seed", c.seed);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.sde_steps = j.value("sde_steps", c.sde_steps);
  if (j.contains("metric")) c.metric = parse_metric(j.at("metric").get<std::string>());
}

/// Frozen mapping network and endpoint table used by the running cost.
struct Regularizer {
  const MapNet* map = nullptr;
  const EndpointTable* endpoints = nullptr;
};

struct LossParts {
  Tensor total;
  double terminal = 0.0;
  double running = 0.0;
};

/// Cross-entropy at the mask plus alpha times the running cost. With alpha = 0
/// or method None the running cost is not evaluated at all.
inline LossParts total_loss(const Tensor& logits, int label_word, const HiddenTrace& trace, const Regularizer& reg,
                            const TrainConfig& cfg, Rng& sde_rng, const SdeGrid* grid = nullptr) {
  Tensor terminal = cross_entropy_with_logits(logits, static_cast<std::size_t>(label_word));
  LossParts out{terminal, terminal.item(), 0.0};
  if (cfg.method == RegMethod::None || cfg.alpha == 0.0) return out;
  if (!reg.map || !reg.endpoints) throw std::invalid_argument("total_loss: regularized method requires a map and endpoints");
  const bool want_sde = cfg.method == RegMethod::SDE;
  if ((reg.map->method == FitMethod::SDE) != want_sde) {
    throw std::invalid_argument(std::string("total_loss: map was fitted with ") + method_name(reg.map->method) +
                                " but the run uses " + reg_name(cfg.method));
  }
  const BridgeSpec spec = cfg.bridge().with_beta(reg.endpoints->row(static_cast<std::size_t>(label_word)));
  Tensor running;
  if (want_sde) {
    std::optional<SdeGrid> local;
    if (!grid) local = SdeGrid::make(trace.size() - 1, cfg.sde_steps);
    running = goodness_sde(*reg.map, trace, spec, grid ? *grid : *local, sde_rng);
  } else {
    running = scalar_mul(goodness_pdf(*reg.map, trace, spec), -1.0);
  }
  out.running = running.item();
  out.total = add(terminal, scalar_mul(running, cfg.alpha));
  return out;
}

/// Sorted distinct label words of the given sets.
inline std::vector<int> label_set(std::initializer_list<const std::vector<TaskSample>*> sets) {
  std::set<int> s;
  for (const auto* d : sets)
    for (const auto& x : *d) s.insert(x.label_word);
  return {s.begin(), s.end()};
}

/// Argmax of the mask logits restricted to the candidate label words.
inline int predict(const BackboneState& backbone, const PetParams* pet, const TaskSample& s,
                   const std::vector<int>& label_words) {
  auto res = forward(backbone, s.tokens, s.mask_position, pet);
  int best = label_words.at(0);
  double best_v = -std::numeric_limits<double>::infinity();
  for (int w : label_words) {
    const double v = res.logits.at(0, static_cast<std::size_t>(w));
    if (v > best_v) {
      best_v = v;
      best = w;
    }
  }
  return best;
}

inline double evaluate(const BackboneState& backbone, const PetParams* pet, const std::vector<TaskSample>& data,
                       Metric metric, const std::vector<int>& label_words) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  if (metric != Metric::Accuracy && label_words.size() != 2) {
    throw std::invalid_argument(std::string("evaluate: ") + metric_name(metric) + " requires binary labels, got " +
                                std::to_string(label_words.size()));
  }
  std::vector<int> pred, gold;
  for (const auto& s : data) {
    pred.push_back(predict(backbone, pet, s, label_words));
    gold.push_back(s.label_word);
  }
  return score(metric, pred, gold, label_words);
}

struct MetricRow {
  std::size_t step = 0;
  double train_loss = 0.0;
  double terminal_loss = 0.0;
  double running_cost = 0.0;
  double dev_metric = 0.0;
};

struct TrainResult {
  PetParams best;
  std::vector<MetricRow> history;
  double best_dev_metric = 0.0;
  std::size_t best_step = 0;
  std::vector<int> label_words;
};

/// Optimizes only the PET parameters; the backbone and map stay frozen. The
/// returned checkpoint is the one with the best dev metric (earliest on ties).
inline TrainResult train_pet(const BackboneState& backbone, const PetConfig& pet_cfg, const Regularizer& reg,
                             const std::vector<TaskSample>& train, const std::vector<TaskSample>& dev,
                             const TrainConfig& cfg) {
  cfg.validate();
  if (train.empty() || dev.empty()) throw std::invalid_argument("train_pet: empty train or dev set");
  validate_samples(train, backbone.config.vocab_size);
  validate_samples(dev, backbone.config.vocab_size);
  Rng init_rng(cfg.seed);
  Rng batch_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  Rng sde_rng(cfg.seed ^ 0xc2b2ae3d27d4eb4full);
  PetParams pet = init_pet(pet_cfg, backbone, init_rng);
  auto params = pet.trainables();
  AdamState adam = make_adam(cfg.learning_rate);

  std::optional<SdeGrid> grid;
  if (cfg.method == RegMethod::SDE && cfg.alpha != 0.0) grid = SdeGrid::make(backbone.config.num_layers, cfg.sde_steps);

  TrainResult result;
  result.label_words = label_set({&train, &dev});
  result.best = pet.clone();
  result.best_dev_metric = -std::numeric_limits<double>::infinity();

  double acc_total = 0.0, acc_terminal = 0.0, acc_running = 0.0;
  std::size_t acc_n = 0;
  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    Tensor loss = Tensor::scalar(0.0);
    double terminal = 0.0, running = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const auto& s = train[uniform_index(batch_rng, train.size())];
      auto res = forward(backbone, s.tokens, s.mask_position, &pet);
      auto parts = total_loss(res.logits, s.label_word, res.trace, reg, cfg, sde_rng, grid ? &*grid : nullptr);
      loss = add(loss, parts.total);
      terminal += parts.terminal;
      running += parts.running;
    }
    const double inv = 1.0 / static_cast<double>(cfg.batch_size);
    loss = scalar_mul(loss, inv);
    acc_total += loss.item();
    acc_terminal += terminal * inv;
    acc_running += running * inv;
    ++acc_n;
    auto grads = backward(loss);
    clip_grad_norm(params, grads, cfg.grad_clip);
    adam_step(params, grads, adam);

    if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
      const double dev_metric = evaluate(backbone, &pet, dev, cfg.metric, result.label_words);
      const double n = static_cast<double>(acc_n);
      result.history.push_back({step, acc_total / n, acc_terminal / n, acc_running / n, dev_metric});
      acc_total = acc_terminal = acc_running = 0.0;
      acc_n = 0;
      if (dev_metric > result.best_dev_metric) {
        result.best_dev_metric = dev_metric;
        result.best_step = step;
        result.best = pet.clone();
      }
    }
  }
  return result;
}

/// Per class (ascending label word), 2k samples without replacement: the first
/// k go to train, the next k to dev.
inline std::pair<std::vector<TaskSample>, std::vector<TaskSample>> fewshot_split(const std::vector<TaskSample>& data,
                                                                                 std::size_t k, std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("fewshot: k must be positive");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < data.size(); ++i) by_class[data[i].label_word].push_back(i);
  Rng rng(seed);
  std::vector<TaskSample> train, dev;
  for (auto& [label, idx] : by_class) {
    if (idx.size() < 2 * k) {
      throw DataError("fewshot: class " + std::to_string(label) + " has " + std::to_string(idx.size()) +
                      " examples, need " + std::to_string(2 * k));
    }
    // Partial Fisher-Yates: the first 2k positions become a uniform sample.
    for (std::size_t i = 0; i < 2 * k; ++i) std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
    for (std::size_t i = 0; i < k; ++i) train.push_back(data[idx[i]]);
    for (std::size_t i = k; i < 2 * k; ++i) dev.push_back(data[idx[i]]);
  }
  return {std::move(train), std::move(dev)};
}

// ---------------------------------------------------------------------------
// Run directories

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::string out = "step,train_loss,terminal_loss,running_cost,dev_metric\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + format_real(r.train_loss) + "," + format_real(r.terminal_loss) + "," +
           format_real(r.running_cost) + "," + format_real(r.dev_metric) + "\n";
  }
  return out;
}

/// Final-layer mask-position states of the probe set, recorded in inference mode.
struct ProbeTraces {
  std::vector<int> labels;
  std::vector<HiddenTrace> traces;
};

inline ProbeTraces record_probe(const BackboneState& backbone, const PetParams* pet,
                                const std::vector<TaskSample>& probe) {
  ProbeTraces p;
  for (const auto& s : probe) {
    auto res = forward(backbone, s.tokens, s.mask_position, pet);
    p.labels.push_back(s.label_word);
    p.traces.push_back(res.trace.detached());
  }
  return p;
}

inline nlohmann::json probe_to_json(const ProbeTraces& p) {
  nlohmann::json samples = nlohmann::json::array();
  for (std::size_t i = 0; i < p.labels.size(); ++i) {
    nlohmann::json out = nlohmann::json::array(), ctx = nlohmann::json::array();
    for (const auto& t : p.traces[i].h_out) out.push_back(std::vector<double>(t.data().begin(), t.data().end()));
    for (const auto& t : p.traces[i].h_ctx) ctx.push_back(std::vector<double>(t.data().begin(), t.data().end()));
    samples.push_back({{"label_word", p.labels[i]}, {"h_out", out}, {"h_ctx", ctx}});
  }
  return {{"samples", samples}};
}

inline ProbeTraces probe_from_json(const nlohmann::json& j) {
  ProbeTraces p;
  for (const auto& s : j.at("samples")) {
    p.labels.push_back(s.at("label_word").get<int>());
    HiddenTrace tr;
    for (const auto& v : s.at("h_out")) {
      auto d = v.get<std::vector<double>>();
      const std::size_t n = d.size();
      tr.h_out.push_back(Tensor::constant({1, n}, std::move(d)));
    }
    for (const auto& v : s.at("h_ctx")) {
      auto d = v.get<std::vector<double>>();
      const std::size_t n = d.size();
      tr.h_ctx.push_back(Tensor::constant({1, n}, std::move(d)));
    }
    p.traces.push_back(std::move(tr));
  }
  return p;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
  f << text;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

/// config.json, metrics.csv, pet.bin and probe.json.
inline void write_run(const std::filesystem::path& dir, const BackboneState& backbone, const PetConfig& pet_cfg,
                      const TrainConfig& cfg, const TrainResult& result, const std::vector<TaskSample>& probe) {
  std::filesystem::create_directories(dir);
  nlohmann::json config = {{"train", cfg},
                           {"pet", pet_cfg},
                           {"model", backbone.config},
                           {"label_words", result.label_words},
                           {"best_step", result.best_step},
                           {"best_dev_metric", result.best_dev_metric}};
  write_text(dir / "config.json", config.dump(2) + "\n");
  write_text(dir / "metrics.csv", metrics_csv(result.history));
  save_snapshot((dir / "pet.bin").string(), to_snapshot(result.best));
  write_text(dir / "probe.json", probe_to_json(record_probe(backbone, &result.best, probe)).dump() + "\n");
}

}  // namespace sbreg
