#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>
#include <vector>

#include "sbreg/pipeline.hpp"
#include "test_util.hpp"

using namespace sbreg;
using sbreg::testing::tiny_config;
using sbreg::testing::values;

namespace {

const TopicLayout kLayout{16, 2, 6};

struct Fixture {
  BackboneState backbone;
  EndpointTable endpoints;
  MapNet pdf_map, sde_map;
  std::vector<TaskSample> data;

  Fixture() {
    Rng rng(21);
    backbone = init_backbone(tiny_config(), rng);
    backbone.freeze();
    endpoints = build_endpoints(backbone.token_embedding, 4, 1.0);
    pdf_map = init_mapnet(FitMethod::PDF, 8, {12, 8, 4}, rng);
    sde_map = init_mapnet(FitMethod::SDE, 8, {12, 8, 4}, rng);
    pdf_map.freeze();
    sde_map.freeze();
    TaskSpec ts;
    ts.layout = kLayout;
    ts.num_samples = 60;
    ts.min_len = 6;
    ts.max_len = 10;
    data = to_samples(generate_task(ts));
  }

  Regularizer reg(RegMethod m) const { return {m == RegMethod::SDE ? &sde_map : &pdf_map, &endpoints}; }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

TrainConfig short_run(RegMethod method, double alpha, std::uint64_t seed = 3) {
  TrainConfig c;
  c.method = method;
  c.alpha = alpha;
  c.max_steps = 40;
  c.eval_every = 10;
  c.seed = seed;
  c.sde_steps = 8;
  return c;
}

PetConfig lora() {
  PetConfig p;
  p.kind = PetKind::LoRA;
  p.lora_rank = 2;
  return p;
}

std::vector<TaskSample> slice(const std::vector<TaskSample>& v, std::size_t a, std::size_t b) {
  return {v.begin() + static_cast<std::ptrdiff_t>(a), v.begin() + static_cast<std::ptrdiff_t>(b)};
}

std::uint64_t pet_checksum(const PetParams& p) {
  auto ts = p.trainables();
  std::vector<const Tensor*> v;
  for (auto& t : ts) v.push_back(&t);
  return checksum(v);
}

}  // namespace

TEST(Metrics, PerfectPredictions) {
  std::vector<int> g{2, 8, 8, 2};
  for (Metric m : {Metric::Accuracy, Metric::F1, Metric::Matthews}) EXPECT_DOUBLE_EQ(score(m, g, g, {2, 8}), 1.0);
}

TEST(Metrics, HandConfusion) {
  // Positive label 8: TP=2, FP=1, FN=1, TN=2.
  std::vector<int> gold{8, 8, 8, 2, 2, 2}, pred{8, 8, 2, 8, 2, 2};
  auto c = confusion(pred, gold, 8);
  EXPECT_EQ(c.tp, 2u);
  EXPECT_EQ(c.fp, 1u);
  EXPECT_EQ(c.fn, 1u);
  EXPECT_EQ(c.tn, 2u);
  EXPECT_NEAR(score(Metric::F1, pred, gold, {2, 8}), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(score(Metric::Matthews, pred, gold, {2, 8}), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(score(Metric::Accuracy, pred, gold, {2, 8}), 4.0 / 6.0, 1e-15);
}

TEST(Metrics, SingleClassPredictionsGiveZeroMatthews) {
  std::vector<int> gold{2, 8, 2, 8}, pred{8, 8, 8, 8};
  EXPECT_EQ(score(Metric::Matthews, pred, gold, {2, 8}), 0.0);
}

TEST(Metrics, RejectsWrongLabelCardinality) {
  std::vector<int> g{1, 2, 3};
  EXPECT_THROW(score(Metric::F1, g, g, {1, 2, 3}), std::invalid_argument);
  EXPECT_THROW(score(Metric::Accuracy, g, {1}, {1, 2, 3}), std::invalid_argument);
  EXPECT_THROW(parse_metric("auc"), std::invalid_argument);
}

TEST(TotalLoss, ZeroAlphaIsCrossEntropy) {
  const auto& f = fixture();
  const auto& s = f.data[0];
  auto res = forward(f.backbone, s.tokens, s.mask_position);
  const double ce = cross_entropy_with_logits(res.logits, static_cast<std::size_t>(s.label_word)).item();
  Rng rng(0);
  for (RegMethod m : {RegMethod::None, RegMethod::PDF, RegMethod::SDE}) {
    auto parts = total_loss(res.logits, s.label_word, res.trace, f.reg(m), short_run(m, 0.0), rng);
    EXPECT_EQ(parts.total.item(), ce);
    EXPECT_EQ(parts.running, 0.0);
  }
  // None ignores the regularizer entirely, even when it is missing.
  EXPECT_EQ(total_loss(res.logits, s.label_word, res.trace, {}, short_run(RegMethod::None, 0.5), rng).total.item(), ce);
}

TEST(TotalLoss, LinearInAlpha) {
  const auto& f = fixture();
  const auto& s = f.data[1];
  auto res = forward(f.backbone, s.tokens, s.mask_position);
  for (RegMethod m : {RegMethod::PDF, RegMethod::SDE}) {
    auto at = [&](double a) {
      Rng rng(5);
      return total_loss(res.logits, s.label_word, res.trace, f.reg(m), short_run(m, a), rng).total.item();
    };
    const double l0 = at(0.0), l1 = at(0.1), l2 = at(0.2);
    EXPECT_NEAR(l2 - l0, 2.0 * (l1 - l0), 1e-12 * std::max(1.0, std::abs(l2))) << reg_name(m);
    EXPECT_NE(l1, l0);
  }
}

TEST(TotalLoss, PdfRunningCostIsNegatedGoodness) {
  const auto& f = fixture();
  const auto& s = f.data[2];
  auto res = forward(f.backbone, s.tokens, s.mask_position);
  Rng rng(0);
  auto parts = total_loss(res.logits, s.label_word, res.trace, f.reg(RegMethod::PDF), short_run(RegMethod::PDF, 1.0), rng);
  BridgeSpec spec;
  spec.beta = f.endpoints.row(static_cast<std::size_t>(s.label_word));
  EXPECT_DOUBLE_EQ(parts.running, -goodness_pdf(f.pdf_map, res.trace, spec).item());
}

TEST(TotalLoss, RequiresMatchingMap) {
  const auto& f = fixture();
  const auto& s = f.data[0];
  auto res = forward(f.backbone, s.tokens, s.mask_position);
  Rng rng(0);
  EXPECT_THROW(total_loss(res.logits, s.label_word, res.trace, {}, short_run(RegMethod::PDF, 0.1), rng),
               std::invalid_argument);
  Regularizer wrong{&f.sde_map, &f.endpoints};
  EXPECT_THROW(total_loss(res.logits, s.label_word, res.trace, wrong, short_run(RegMethod::PDF, 0.1), rng),
               std::invalid_argument);
}

TEST(TrainPet, ZeroAlphaMatchesVanillaBitForBit) {
  const auto& f = fixture();
  auto train = slice(f.data, 0, 20), dev = slice(f.data, 20, 40);
  auto vanilla = train_pet(f.backbone, lora(), {}, train, dev, short_run(RegMethod::None, 0.0));
  for (RegMethod m : {RegMethod::PDF, RegMethod::SDE}) {
    auto zero = train_pet(f.backbone, lora(), f.reg(m), train, dev, short_run(m, 0.0));
    EXPECT_EQ(metrics_csv(zero.history), metrics_csv(vanilla.history)) << reg_name(m);
    EXPECT_EQ(pet_checksum(zero.best), pet_checksum(vanilla.best));
  }
}

TEST(TrainPet, DeterministicAndBackboneUntouched) {
  const auto& f = fixture();
  auto train = slice(f.data, 0, 20), dev = slice(f.data, 20, 40);
  const auto before = f.backbone.checksum();
  for (RegMethod m : {RegMethod::PDF, RegMethod::SDE}) {
    auto a = train_pet(f.backbone, lora(), f.reg(m), train, dev, short_run(m, 0.1));
    auto b = train_pet(f.backbone, lora(), f.reg(m), train, dev, short_run(m, 0.1));
    EXPECT_EQ(metrics_csv(a.history), metrics_csv(b.history));
    EXPECT_EQ(a.history.size(), 4u);
    EXPECT_GT(a.history[0].running_cost, 0.0) << reg_name(m);
    EXPECT_EQ(f.backbone.checksum(), before);
    auto c = train_pet(f.backbone, lora(), f.reg(m), train, dev, short_run(m, 0.1, 4));
    EXPECT_NE(metrics_csv(a.history), metrics_csv(c.history));
  }
}

TEST(TrainPet, BestCheckpointReproducesStoredMetric) {
  const auto& f = fixture();
  auto train = slice(f.data, 0, 20), dev = slice(f.data, 20, 40);
  for (PetKind k : {PetKind::Prompt, PetKind::BitFit}) {
    PetConfig pc;
    pc.kind = k;
    pc.prompt_len = 3;
    auto r = train_pet(f.backbone, pc, f.reg(RegMethod::PDF), train, dev, short_run(RegMethod::PDF, 0.05));
    EXPECT_EQ(evaluate(f.backbone, &r.best, dev, Metric::Accuracy, r.label_words), r.best_dev_metric);
    double best = -1.0;
    std::size_t best_step = 0;
    for (const auto& row : r.history)
      if (row.dev_metric > best) best = row.dev_metric, best_step = row.step;
    EXPECT_EQ(best, r.best_dev_metric);
    EXPECT_EQ(best_step, r.best_step);
  }
}

TEST(TrainPet, RejectsBadConfig) {
  const auto& f = fixture();
  auto cfg = short_run(RegMethod::None, -1.0);
  EXPECT_THROW(train_pet(f.backbone, lora(), {}, f.data, f.data, cfg), std::invalid_argument);
  EXPECT_THROW(train_pet(f.backbone, lora(), {}, {}, f.data, short_run(RegMethod::None, 0.0)), std::invalid_argument);
  auto bad = f.data;
  bad[0].label_word = 99;
  EXPECT_THROW(train_pet(f.backbone, lora(), {}, bad, f.data, short_run(RegMethod::None, 0.0)), DataError);
}

TEST(RunningCost, ReachesEveryLayerWithoutTerminalLoss) {
  const auto& f = fixture();
  const auto& s = f.data[3];
  for (PetKind k : {PetKind::LoRA, PetKind::Adapter}) {
    PetConfig pc;
    pc.kind = k;
    pc.lora_rank = 2;
    pc.adapter_dim = 2;
    Rng rng(8);
    auto pet = init_pet(pc, f.backbone, rng);
    for (auto& t : pet.trainables())
      for (auto& v : t.mutable_data()) v += 0.05 * standard_normal(rng);
    auto res = forward(f.backbone, s.tokens, s.mask_position, &pet);
    for (RegMethod m : {RegMethod::PDF, RegMethod::SDE}) {
      BridgeSpec spec;
      spec.beta = f.endpoints.row(static_cast<std::size_t>(s.label_word));
      auto cost = m == RegMethod::PDF ? scalar_mul(goodness_pdf(f.pdf_map, res.trace, spec), -1.0)
                                      : goodness_sde(f.sde_map, res.trace, spec, 8, rng);
      auto grads = backward(cost);
      for (std::size_t l = 0; l < f.backbone.config.num_layers; ++l) {
        const Tensor& t = k == PetKind::LoRA ? pet.lora_value[l].b : pet.adapter_ffn[l].up;
        const auto* g = grads.find(t);
        ASSERT_NE(g, nullptr);
        double n = 0.0;
        for (double v : g->data()) n += v * v;
        EXPECT_GT(n, 0.0) << pet_name(k) << " " << reg_name(m) << " layer " << l;
      }
    }
  }
}

TEST(FewShot, TwoClassesSixteenShot) {
  TaskSpec ts;
  ts.layout = kLayout;
  ts.num_samples = 200;
  auto data = to_samples(generate_task(ts));
  auto [train, dev] = fewshot_split(data, 16, 1);
  EXPECT_EQ(train.size(), 32u);
  EXPECT_EQ(dev.size(), 32u);
  std::map<int, int> tc, dc;
  for (const auto& s : train) ++tc[s.label_word];
  for (const auto& s : dev) ++dc[s.label_word];
  EXPECT_EQ(tc, (std::map<int, int>{{2, 16}, {8, 16}}));
  EXPECT_EQ(dc, (std::map<int, int>{{2, 16}, {8, 16}}));
}

TEST(FewShot, SplitsAreDisjoint) {
  std::vector<TaskSample> data;
  for (int i = 0; i < 300; ++i) data.push_back(make_sample({i}, i % 3, std::nullopt, -1));
  auto [train, dev] = fewshot_split(data, 40, 7);
  std::set<int> seen;
  for (const auto& s : train) seen.insert(s.tokens[0]);
  for (const auto& s : dev) EXPECT_FALSE(seen.count(s.tokens[0]));
  EXPECT_EQ(seen.size(), 120u);
}

TEST(FewShot, MinimalSingleClass) {
  std::vector<TaskSample> data{make_sample({5}, 2, std::nullopt), make_sample({6}, 2, std::nullopt)};
  auto [train, dev] = fewshot_split(data, 1, 0);
  ASSERT_EQ(train.size(), 1u);
  ASSERT_EQ(dev.size(), 1u);
  EXPECT_NE(train[0].tokens[0], dev[0].tokens[0]);
}

TEST(FewShot, DifferentSeedsGiveDifferentSplits) {
  std::vector<TaskSample> data;
  for (int i = 0; i < 1000; ++i) data.push_back(make_sample({i}, 2 + 6 * (i % 2), std::nullopt, -1));
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto a = fewshot_split(data, 16, 2 * s).first, b = fewshot_split(data, 16, 2 * s + 1).first;
    std::vector<int> ta, tb;
    for (const auto& x : a) ta.push_back(x.tokens[0]);
    for (const auto& x : b) tb.push_back(x.tokens[0]);
    EXPECT_NE(ta, tb);
    EXPECT_EQ(fewshot_split(data, 16, 2 * s).first.front().tokens, a.front().tokens);
  }
}

TEST(FewShot, SmallClassIsNamed) {
  std::vector<TaskSample> data;
  for (int i = 0; i < 10; ++i) data.push_back(make_sample({i}, i < 7 ? 2 : 8, std::nullopt));
  try {
    fewshot_split(data, 2, 0);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("class 8"), std::string::npos) << e.what();
  }
}

TEST(Dataset, MaskIsAppendedOrPlaced) {
  auto a = make_sample({4, 5, 6}, 2, std::nullopt);
  EXPECT_EQ(a.tokens, (std::vector<int>{4, 5, 6, kMaskToken}));
  EXPECT_EQ(a.mask_position, 3u);
  auto b = make_sample({4, 5, 6}, 2, 1);
  EXPECT_EQ(b.tokens, (std::vector<int>{4, kMaskToken, 6}));
  EXPECT_THROW(make_sample({4}, 2, 3), DataError);
}

TEST(Dataset, JsonlRoundTripAndErrors) {
  const auto dir = std::filesystem::temp_directory_path() / "sbreg_test_dataset";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "d.jsonl").string();
  std::vector<TaskSample> data{make_sample({4, 5}, 2, std::nullopt), make_sample({7, 8, 9}, 8, 0)};
  write_jsonl(path, data);
  auto back = read_jsonl(path);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].tokens, data[i].tokens);
    EXPECT_EQ(back[i].label_word, data[i].label_word);
    EXPECT_EQ(back[i].mask_position, data[i].mask_position);
  }
  write_text(path, "{\"tokens\": [1, 2], \"label_word\": 3}\n{\"tokens\": \"x\"}\n");
  try {
    read_jsonl(path);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
  EXPECT_THROW(read_jsonl((dir / "missing.jsonl").string()), DataError);
  write_corpus(path, {{1, 2, 3}, {4}});
  EXPECT_EQ(read_corpus(path), (std::vector<std::vector<int>>{{1, 2, 3}, {4}}));
  std::filesystem::remove_all(dir);
}

TEST(SyntheticTask, RoughlyBalancedAndLabelledByMajority) {
  TaskSpec ts;
  ts.layout = kLayout;
  ts.num_samples = 100;
  auto raw = generate_task(ts);
  int twos = 0;
  for (const auto& r : raw) {
    const int topic = majority_label_topic(kLayout, r.tokens);
    ASSERT_GE(topic, 0);
    EXPECT_EQ(r.label_word, kLayout.label_word(static_cast<std::size_t>(topic)));
    twos += r.label_word == 2;
  }
  EXPECT_NEAR(twos, 50, 10);
  auto again = generate_task(ts);
  EXPECT_EQ(again[17].tokens, raw[17].tokens);
}

TEST(RunDirectory, WritesAllArtifacts) {
  const auto& f = fixture();
  auto train = slice(f.data, 0, 10), dev = slice(f.data, 10, 20);
  auto cfg = short_run(RegMethod::PDF, 0.1);
  cfg.max_steps = 10;
  cfg.eval_every = 5;
  auto r = train_pet(f.backbone, lora(), f.reg(RegMethod::PDF), train, dev, cfg);
  const auto dir = std::filesystem::temp_directory_path() / "sbreg_test_run";
  std::filesystem::remove_all(dir);
  write_run(dir, f.backbone, lora(), cfg, r, dev);
  for (const char* name : {"config.json", "metrics.csv", "pet.bin", "probe.json"}) {
    EXPECT_TRUE(std::filesystem::exists(dir / name)) << name;
  }
  auto config = nlohmann::json::parse(read_text(dir / "config.json"));
  EXPECT_EQ(config.at("train").at("alpha").get<double>(), 0.1);
  EXPECT_EQ(config.at("train").at("method").get<std::string>(), "pdf");
  EXPECT_EQ(config.at("best_dev_metric").get<double>(), r.best_dev_metric);
  auto tc = config.at("train").get<TrainConfig>();
  EXPECT_EQ(tc.max_steps, 10u);
  EXPECT_EQ(read_text(dir / "metrics.csv"), metrics_csv(r.history));
  auto pet = pet_from_snapshot(load_snapshot((dir / "pet.bin").string()), f.backbone);
  EXPECT_EQ(evaluate(f.backbone, &pet, dev, Metric::Accuracy, r.label_words), r.best_dev_metric);
  auto probe = probe_from_json(nlohmann::json::parse(read_text(dir / "probe.json")));
  ASSERT_EQ(probe.traces.size(), dev.size());
  auto fresh = forward(f.backbone, dev[0].tokens, dev[0].mask_position, &r.best).trace;
  EXPECT_EQ(values(probe.traces[0].h_out[2]), values(fresh.h_out[2]));
  std::filesystem::remove_all(dir);
}
