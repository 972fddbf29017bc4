#pragma once

// Command-line front end. Exit codes: 0 success, 1 usage error, 2 data error.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sbreg/analysis.hpp"
#include "sbreg/backbone.hpp"
#include "sbreg/bridges.hpp"
#include "sbreg/dataset.hpp"
#include "sbreg/latent_map.hpp"
#include "sbreg/pets.hpp"
#include "sbreg/pipeline.hpp"
#include "sbreg/snapshot.hpp"
#include "sbreg/svg.hpp"
#include "sbreg/synthetic.hpp"

namespace sbreg {

namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace cli_detail {

/// Settings gathered from --config and the command line.
struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  nlohmann::json config = nlohmann::json::object();

  template <class T>
  T section(const char* name) const {
    T value{};
    if (config.contains(name)) value = config.at(name).get<T>();
    return value;
  }
};

inline void load_config(Globals& g) {
  if (g.config_path.empty()) return;
  std::ifstream f(g.config_path);
  if (!f) throw DataError("config: cannot open '" + g.config_path + "'");
  try {
    g.config = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("config: " + std::string(e.what()));
  }
  if (!g.config.is_object()) throw DataError("config: top level must be a JSON object");
}

inline std::string csv_header_values(std::size_t r) {
  if (r == 1) return "value";
  std::string h;
  for (std::size_t j = 0; j < r; ++j) h += (j ? ",value_" : "value_") + std::to_string(j);
  return h;
}

inline BackboneState load_backbone(const std::string& path) { return backbone_from_snapshot(load_snapshot(path)); }

inline std::vector<MaskedExample> mask_corpus(const std::vector<std::vector<int>>& corpus, const ModelConfig& mc,
                                              double last_ratio, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<MaskedExample> out;
  out.reserve(corpus.size());
  for (const auto& seq : corpus) {
    if (seq.empty()) throw DataError("corpus: empty sequence");
    out.push_back(mask_one(seq, mc.mask_token, last_ratio, rng));
  }
  return out;
}

/// Options shared by train-pet and fewshot.
struct TrainOptions {
  std::string backbone, data, train, dev, map, endpoints, probe, pet = "prompt", method, bridge, metric;
  std::optional<double> alpha, lr, ou_q, ou_sigma;
  std::optional<std::size_t> steps, batch, eval_every, prompt_len, lora_rank, adapter_dim, k;

  void attach(CLI::App* sub) {
    sub->add_option("--backbone", backbone, "backbone snapshot")->required();
    sub->add_option("--data", data, "task JSONL (few-shot sampled with --k)");
    sub->add_option("--train", train, "explicit train JSONL");
    sub->add_option("--dev", dev, "explicit dev JSONL");
    sub->add_option("--map", map, "fitted mapping network snapshot");
    sub->add_option("--endpoints", endpoints, "endpoint table snapshot");
    sub->add_option("--probe", probe, "probe JSONL for recorded traces (default: dev)");
    sub->add_option("--pet", pet, "prompt|lora|bitfit|adapter")->check(CLI::IsMember({"prompt", "lora", "bitfit", "adapter"}));
    sub->add_option("--method", method, "none|pdf|sde")->check(CLI::IsMember({"none", "pdf", "sde"}));
    sub->add_option("--bridge", bridge, "brownian|ou")->check(CLI::IsMember({"brownian", "ou"}));
    sub->add_option("--metric", metric, "accuracy|f1|matthews")->check(CLI::IsMember({"accuracy", "f1", "matthews"}));
    sub->add_option("--alpha", alpha, "regularization intensity")->check(CLI::NonNegativeNumber);
    sub->add_option("--lr", lr, "learning rate")->check(CLI::PositiveNumber);
    sub->add_option("--ou-q", ou_q)->check(CLI::PositiveNumber);
    sub->add_option("--ou-sigma", ou_sigma)->check(CLI::PositiveNumber);
    sub->add_option("--steps", steps)->check(CLI::PositiveNumber);
    sub->add_option("--batch", batch)->check(CLI::PositiveNumber);
    sub->add_option("--eval-every", eval_every)->check(CLI::PositiveNumber);
    sub->add_option("--prompt-len", prompt_len)->check(CLI::PositiveNumber);
    sub->add_option("--lora-rank", lora_rank)->check(CLI::PositiveNumber);
    sub->add_option("--adapter-dim", adapter_dim)->check(CLI::PositiveNumber);
    sub->add_option("--k", k, "examples per class")->check(CLI::PositiveNumber);
  }

  TrainConfig train_config(const Globals& g) const {
    TrainConfig c = g.section<TrainConfig>("train");
    if (g.seed) c.seed = *g.seed;
    if (alpha) c.alpha = *alpha;
    if (!method.empty()) c.method = parse_reg(method);
    if (!bridge.empty()) c.bridge_kind = parse_bridge(bridge);
    if (!metric.empty()) c.metric = parse_metric(metric);
    if (lr) c.learning_rate = *lr;
    if (ou_q) c.ou_q = *ou_q;
    if (ou_sigma) c.ou_sigma = *ou_sigma;
    if (steps) c.max_steps = *steps;
    if (batch) c.batch_size = *batch;
    if (eval_every) c.eval_every = *eval_every;
    return c;
  }

  PetConfig pet_config(const Globals& g, bool pet_given) const {
    PetConfig p = g.section<PetConfig>("pet");
    if (pet_given || !g.config.contains("pet")) p.kind = parse_pet(pet);
    if (prompt_len) p.prompt_len = *prompt_len;
    if (lora_rank) p.lora_rank = *lora_rank;
    if (adapter_dim) p.adapter_dim = *adapter_dim;
    return p;
  }

  std::size_t shots(const Globals& g) const {
    if (k) return *k;
    return g.config.contains("fewshot") ? g.config["fewshot"].value("k", std::size_t{16}) : 16;
  }
};

/// Frozen map and endpoints, loaded only when the running cost is active.
struct LoadedRegularizer {
  std::optional<MapNet> map;
  std::optional<EndpointTable> endpoints;
  Regularizer view() const { return {map ? &*map : nullptr, endpoints ? &*endpoints : nullptr}; }
};

inline LoadedRegularizer load_regularizer(const TrainOptions& o, const TrainConfig& cfg) {
  LoadedRegularizer r;
  if (cfg.method == RegMethod::None || cfg.alpha == 0.0) return r;
  if (o.map.empty() || o.endpoints.empty()) throw UsageError("--method pdf|sde with alpha > 0 needs --map and --endpoints");
  r.map = mapnet_from_snapshot(load_snapshot(o.map));
  r.endpoints = endpoints_from_snapshot(load_snapshot(o.endpoints));
  return r;
}

inline int run_one(const BackboneState& backbone, const PetConfig& pet_cfg, const LoadedRegularizer& reg,
                   const std::vector<TaskSample>& train, const std::vector<TaskSample>& dev,
                   const std::vector<TaskSample>& probe, const TrainConfig& cfg, const fs::path& dir,
                   double* best_out) {
  auto result = train_pet(backbone, pet_cfg, reg.view(), train, dev, cfg);
  write_run(dir, backbone, pet_cfg, cfg, result, probe);
  if (best_out) *best_out = result.best_dev_metric;
  std::cout << dir.string() << ": best " << metric_name(cfg.metric) << " " << format_real(result.best_dev_metric)
            << " at step " << result.best_step << "\n";
  return 0;
}

}  // namespace cli_detail

/// Entry point shared by the executable and the tests.
inline int run_cli(int argc, const char* const* argv, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"Stochastic-bridge regularizers for parameter-efficient tuning on a toy transformer", "sbreg"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed_value = 0;
  app.add_option("--config", g.config_path, "JSON configuration");
  auto* seed_opt = app.add_option("--seed", seed_value, "random seed");
  app.add_option("--out", g.out, "output directory");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write a synthetic pretraining corpus and downstream task");
  std::string gen_what = "all";
  std::optional<std::size_t> gen_samples;
  gen->add_option("--what", gen_what, "corpus|task|all")->check(CLI::IsMember({"corpus", "task", "all"}));
  gen->add_option("--samples", gen_samples, "number of sequences or samples")->check(CLI::PositiveNumber);

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "build the frozen toy backbone by masked-token pretraining");
  std::string pre_corpus;
  std::optional<std::size_t> pre_steps;
  pre->add_option("--corpus", pre_corpus, "corpus JSONL (generated when omitted)");
  pre->add_option("--steps", pre_steps)->check(CLI::PositiveNumber);

  // fit-map
  auto* fit = app.add_subcommand("fit-map", "fit the mapping network on the frozen backbone");
  std::string fit_backbone, fit_corpus, fit_method = "pdf", fit_bridge = "brownian";
  std::optional<double> fit_eta, fit_q, fit_sigma;
  std::optional<std::size_t> fit_steps, fit_latent;
  fit->add_option("--backbone", fit_backbone)->required();
  fit->add_option("--corpus", fit_corpus)->required();
  fit->add_option("--method", fit_method)->check(CLI::IsMember({"pdf", "sde"}));
  fit->add_option("--bridge", fit_bridge)->check(CLI::IsMember({"brownian", "ou"}));
  fit->add_option("--eta", fit_eta)->check(CLI::PositiveNumber);
  fit->add_option("--ou-q", fit_q)->check(CLI::PositiveNumber);
  fit->add_option("--ou-sigma", fit_sigma)->check(CLI::PositiveNumber);
  fit->add_option("--steps", fit_steps)->check(CLI::PositiveNumber);
  fit->add_option("--latent-dim", fit_latent)->check(CLI::PositiveNumber);

  // train-pet
  auto* tp = app.add_subcommand("train-pet", "train one PET run");
  TrainOptions tp_opts;
  tp_opts.attach(tp);

  // fewshot
  auto* fs_cmd = app.add_subcommand("fewshot", "k-shot runs over several seeds");
  TrainOptions fs_opts;
  fs_opts.attach(fs_cmd);
  std::size_t fs_seeds = 5;
  std::string fs_test;
  fs_cmd->add_option("--seeds", fs_seeds)->check(CLI::PositiveNumber);
  fs_cmd->add_option("--test", fs_test, "held-out JSONL scored with each best checkpoint");

  // eval
  auto* ev = app.add_subcommand("eval", "score a PET checkpoint");
  std::string ev_backbone, ev_pet, ev_data, ev_metric = "accuracy";
  ev->add_option("--backbone", ev_backbone)->required();
  ev->add_option("--pet", ev_pet, "PET snapshot (omit for the bare backbone)");
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--metric", ev_metric)->check(CLI::IsMember({"accuracy", "f1", "matthews"}));

  // sample-bridge
  auto* sb = app.add_subcommand("sample-bridge", "emit Euler-Maruyama bridge paths as CSV");
  std::string sb_bridge = "brownian";
  std::vector<double> sb_beta{1.0};
  double sb_q = 1.0, sb_sigma = 1.0, sb_horizon = 1.0;
  std::size_t sb_steps = 100, sb_paths = 1;
  sb->add_option("--bridge", sb_bridge)->check(CLI::IsMember({"brownian", "ou"}));
  sb->add_option("--beta", sb_beta, "endpoint (repeat or comma-separate for r > 1)")->delimiter(',');
  sb->add_option("--q", sb_q)->check(CLI::PositiveNumber);
  sb->add_option("--sigma", sb_sigma)->check(CLI::PositiveNumber);
  sb->add_option("--horizon", sb_horizon)->check(CLI::PositiveNumber);
  sb->add_option("--steps", sb_steps)->check(CLI::PositiveNumber);
  sb->add_option("--paths", sb_paths)->check(CLI::PositiveNumber);

  // analyze
  auto* an = app.add_subcommand("analyze", "centroid distances, bridge distances and correlations over runs");
  std::vector<std::string> an_runs;
  std::string an_map, an_endpoints, an_bridge = "brownian";
  int an_layer = -1;
  an->add_option("--runs", an_runs, "run directories")->required();
  an->add_option("--map", an_map, "PDF mapping network for bridge distances");
  an->add_option("--endpoints", an_endpoints);
  an->add_option("--bridge", an_bridge)->check(CLI::IsMember({"brownian", "ou"}));
  an->add_option("--layer", an_layer, "trace layer for centroids (negative counts from the end)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return 1;
  }
  if (seed_opt->count()) g.seed = seed_value;

  try {
    load_config(g);
    const fs::path out(g.out);
    ModelConfig mc = g.section<ModelConfig>("model");
    mc.validate();

    if (gen->parsed()) {
      fs::create_directories(out);
      if (gen_what != "task") {
        CorpusSpec cs = g.section<CorpusSpec>("corpus");
        cs.layout.vocab_size = mc.vocab_size;
        if (g.seed) cs.seed = *g.seed;
        if (gen_samples) cs.num_sequences = *gen_samples;
        write_corpus((out / "corpus.jsonl").string(), generate_corpus(cs));
      }
      if (gen_what != "corpus") {
        TaskSpec ts = g.section<TaskSpec>("task");
        ts.layout.vocab_size = mc.vocab_size;
        if (g.seed) ts.seed = *g.seed + 1;
        if (gen_samples) ts.num_samples = *gen_samples;
        write_raw_jsonl((out / "task.jsonl").string(), generate_task(ts));
      }
      return 0;
    }

    if (pre->parsed()) {
      PretrainHyper h = g.section<PretrainHyper>("pretrain");
      if (g.seed) h.seed = *g.seed;
      if (pre_steps) h.steps = *pre_steps;
      std::vector<std::vector<int>> corpus;
      if (pre_corpus.empty()) {
        CorpusSpec cs = g.section<CorpusSpec>("corpus");
        cs.layout.vocab_size = mc.vocab_size;
        corpus = generate_corpus(cs);
      } else {
        corpus = read_corpus(pre_corpus);
      }
      for (const auto& seq : corpus) check_tokens(mc, seq);
      auto backbone = pretrain_mlm(mc, corpus, h);
      fs::create_directories(out);
      save_snapshot((out / "backbone.bin").string(), to_snapshot(backbone));
      write_text(out / "pretrain.json", nlohmann::json({{"model", mc}, {"pretrain", h}}).dump(2) + "\n");
      std::cout << "backbone: " << backbone.parameter_count() << " parameters, checksum " << backbone.checksum() << "\n";
      return 0;
    }

    if (fit->parsed()) {
      auto backbone = load_backbone(fit_backbone);
      MapFitHyper h = g.section<MapFitHyper>("map");
      if (g.seed) h.seed = *g.seed;
      if (fit_steps) h.steps = *fit_steps;
      if (fit_latent) h.dims.latent = *fit_latent;
      double eta = g.config.contains("map") ? g.config["map"].value("eta", 1.0) : 1.0;
      if (fit_eta) eta = *fit_eta;
      BridgeSpec bridge;
      bridge.kind = parse_bridge(fit_bridge);
      if (fit_q) bridge.q = *fit_q;
      if (fit_sigma) bridge.sigma = *fit_sigma;
      const auto corpus = read_corpus(fit_corpus);
      for (const auto& seq : corpus) check_tokens(backbone.config, seq);
      const auto examples = mask_corpus(corpus, backbone.config, 1.0, h.seed);
      const auto endpoints = build_endpoints(backbone.token_embedding, h.dims.latent, eta);
      MapFitReport report;
      const auto method = parse_fit_method(fit_method);
      auto map = fit_map(backbone, examples, method, endpoints, bridge, h, &report);
      fs::create_directories(out);
      save_snapshot((out / "map.bin").string(), to_snapshot(map));
      save_snapshot((out / "endpoints.bin").string(), to_snapshot(endpoints));
      std::string log = "step,loss\n";
      for (std::size_t i = 0; i < report.train_loss.size(); ++i)
        log += std::to_string(i + 1) + "," + format_real(report.train_loss[i]) + "\n";
      write_text(out / "fit_log.csv", log);
      write_text(out / "fit.json", nlohmann::json({{"method", fit_method},
                                                   {"bridge", fit_bridge},
                                                   {"ou_q", bridge.q},
                                                   {"ou_sigma", bridge.sigma},
                                                   {"eta", eta},
                                                   {"hyper", h}})
                                           .dump(2) +
                                       "\n");
      return 0;
    }

    if (tp->parsed() || fs_cmd->parsed()) {
      const bool few = fs_cmd->parsed();
      const TrainOptions& o = few ? fs_opts : tp_opts;
      auto* sub = few ? fs_cmd : tp;
      const bool pet_given = sub->get_option("--pet")->count() > 0;
      auto backbone = load_backbone(o.backbone);
      const TrainConfig base = o.train_config(g);
      const PetConfig pet_cfg = o.pet_config(g, pet_given);
      pet_cfg.validate(backbone.config.hidden_dim);
      const auto reg = load_regularizer(o, base);
      std::vector<TaskSample> pool, fixed_train, fixed_dev, probe;
      if (!o.train.empty() || !o.dev.empty()) {
        if (o.train.empty() || o.dev.empty()) throw UsageError("--train and --dev must be given together");
        if (few) throw UsageError("fewshot samples its splits from --data");
        fixed_train = read_jsonl(o.train, backbone.config.mask_token);
        fixed_dev = read_jsonl(o.dev, backbone.config.mask_token);
      } else if (!o.data.empty()) {
        pool = read_jsonl(o.data, backbone.config.mask_token);
        validate_samples(pool, backbone.config.vocab_size);
      } else {
        throw UsageError("give --data, or --train with --dev");
      }
      if (!o.probe.empty()) probe = read_jsonl(o.probe, backbone.config.mask_token);
      const std::uint64_t seed0 = base.seed;
      if (!few) {
        std::vector<TaskSample> train = fixed_train, dev = fixed_dev;
        if (!pool.empty()) std::tie(train, dev) = fewshot_split(pool, o.shots(g), seed0);
        return run_one(backbone, pet_cfg, reg, train, dev, probe.empty() ? dev : probe, base, out, nullptr);
      }
      std::vector<TaskSample> test;
      if (!fs_test.empty()) test = read_jsonl(fs_test, backbone.config.mask_token);
      std::string summary = "seed,best_dev_metric,test_metric\n";
      double dev_sum = 0.0, test_sum = 0.0;
      for (std::size_t s = 0; s < fs_seeds; ++s) {
        TrainConfig cfg = base;
        cfg.seed = seed0 + s;
        auto [train, dev] = fewshot_split(pool, o.shots(g), cfg.seed);
        auto result = train_pet(backbone, pet_cfg, reg.view(), train, dev, cfg);
        const fs::path dir = out / ("seed_" + std::to_string(cfg.seed));
        write_run(dir, backbone, pet_cfg, cfg, result, probe.empty() ? dev : probe);
        double test_metric = 0.0;
        if (!test.empty()) test_metric = evaluate(backbone, &result.best, test, cfg.metric, result.label_words);
        dev_sum += result.best_dev_metric;
        test_sum += test_metric;
        summary += std::to_string(cfg.seed) + "," + format_real(result.best_dev_metric) + "," +
                   (test.empty() ? std::string() : format_real(test_metric)) + "\n";
      }
      write_text(out / "summary.csv", summary);
      std::cout << "mean best dev " << metric_name(base.metric) << " " << format_real(dev_sum / fs_seeds);
      if (!test.empty()) std::cout << ", mean test " << format_real(test_sum / fs_seeds);
      std::cout << "\n";
      return 0;
    }

    if (ev->parsed()) {
      auto backbone = load_backbone(ev_backbone);
      auto data = read_jsonl(ev_data, backbone.config.mask_token);
      validate_samples(data, backbone.config.vocab_size);
      std::optional<PetParams> pet;
      if (!ev_pet.empty()) pet = pet_from_snapshot(load_snapshot(ev_pet), backbone);
      const auto labels = label_set({&data});
      const double v = evaluate(backbone, pet ? &*pet : nullptr, data, parse_metric(ev_metric), labels);
      std::cout << ev_metric << "," << format_real(v) << "\n";
      return 0;
    }

    if (sb->parsed()) {
      BridgeSpec spec;
      spec.kind = parse_bridge(sb_bridge);
      spec.beta = sb_beta;
      spec.q = sb_q;
      spec.sigma = sb_sigma;
      spec.horizon = sb_horizon;
      spec.validate();
      Rng rng(g.seed.value_or(0));
      std::ostringstream csv;
      csv << "path,t," << csv_header_values(spec.dim()) << "\n";
      for (std::size_t p = 0; p < sb_paths; ++p) {
        auto path = sample_path(spec, sb_steps, rng);
        for (std::size_t k = 1; k < path.times.size(); ++k) {
          csv << p << "," << format_real(path.times[k]);
          for (double v : path.values[k]) csv << "," << format_real(v);
          csv << "\n";
        }
      }
      if (app.get_option("--out")->count()) {
        fs::create_directories(out);
        write_text(out / "paths.csv", csv.str());
      } else {
        std::cout << csv.str();
      }
      return 0;
    }

    if (an->parsed()) {
      std::optional<MapNet> map;
      std::optional<EndpointTable> endpoints;
      if (!an_map.empty()) {
        if (an_endpoints.empty()) throw UsageError("--map needs --endpoints");
        map = mapnet_from_snapshot(load_snapshot(an_map));
        endpoints = endpoints_from_snapshot(load_snapshot(an_endpoints));
      }
      BridgeSpec bridge;
      bridge.kind = parse_bridge(an_bridge);
      std::vector<double> alphas, centroids, dev_metrics, bridge_means;
      std::string table = "run,alpha,dev_metric,centroid_distance";
      if (map) table += ",bridge_distance_sum,bridge_distance_mean";
      table += "\n";
      for (const auto& run : an_runs) {
        const fs::path dir(run);
        const auto config = nlohmann::json::parse(read_text(dir / "config.json"));
        const auto probe = probe_from_json(nlohmann::json::parse(read_text(dir / "probe.json")));
        if (probe.traces.empty()) throw DataError(run + ": empty probe set");
        const int n_layers = static_cast<int>(probe.traces[0].size());
        const int layer = an_layer < 0 ? n_layers + an_layer : an_layer;
        if (layer < 0 || layer >= n_layers) throw UsageError("--layer outside the recorded trace");
        std::map<int, std::vector<std::vector<double>>> by_label;
        for (std::size_t i = 0; i < probe.labels.size(); ++i) {
          const auto& h = probe.traces[i].h_out[static_cast<std::size_t>(layer)];
          by_label[probe.labels[i]].emplace_back(h.data().begin(), h.data().end());
        }
        const double alpha = config.at("train").at("alpha").get<double>();
        const double dev_metric = config.at("best_dev_metric").get<double>();
        const double cd = centroid_distance(by_label);
        alphas.push_back(alpha);
        centroids.push_back(cd);
        dev_metrics.push_back(dev_metric);
        table += run + "," + format_real(alpha) + "," + format_real(dev_metric) + "," + format_real(cd);
        if (map) {
          BridgeDistance total;
          for (std::size_t i = 0; i < probe.labels.size(); ++i) {
            auto d = bridge_distance(probe.traces[i], *map,
                                     bridge.with_beta(endpoints->row(static_cast<std::size_t>(probe.labels[i]))));
            total.sum += d.sum;
            total.mean += d.mean;
          }
          total.sum /= static_cast<double>(probe.labels.size());
          total.mean /= static_cast<double>(probe.labels.size());
          bridge_means.push_back(total.mean);
          table += "," + format_real(total.sum) + "," + format_real(total.mean);
        }
        table += "\n";
      }
      std::string corr = "statistic,x,y,coefficient,p_value\n";
      auto add_corr = [&](const char* stat, const char* xn, const char* yn, const std::vector<double>& x,
                          const std::vector<double>& y, bool use_pearson) {
        try {
          const auto c = use_pearson ? pearson(x, y) : kendall_tau_b(x, y);
          corr += std::string(stat) + "," + xn + "," + yn + "," + format_real(c.coefficient) + "," +
                  format_real(c.p_value) + "\n";
        } catch (const StatisticsError& e) {
          corr += std::string(stat) + "," + xn + "," + yn + ",nan,nan\n";
          err << "warning: " << e.what() << "\n";
        }
      };
      add_corr("pearson", "alpha", "centroid_distance", alphas, centroids, true);
      if (map) add_corr("kendall_tau_b", "bridge_distance_mean", "dev_metric", bridge_means, dev_metrics, false);
      std::cout << table << "\n" << corr;
      if (app.get_option("--out")->count()) {
        fs::create_directories(out);
        write_text(out / "analysis.csv", table);
        write_text(out / "correlations.csv", corr);
        std::vector<std::size_t> order(alphas.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return alphas[a] < alphas[b]; });
        Series s{"centroid distance", {}, {}};
        for (auto i : order) s.x.push_back(alphas[i]), s.y.push_back(centroids[i]);
        write_line_chart((out / "alpha_centroid.svg").string(), "Label-centroid distance vs alpha", "alpha",
                         "centroid distance", {s});
      }
      return 0;
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    err << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace sbreg
