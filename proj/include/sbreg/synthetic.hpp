#pragma once

// Synthetic pretraining corpus and downstream classification task.
//
// Token layout: 0 = PAD, 1 = MASK, then num_topics contiguous topic blocks,
// then noise tokens. Corpus sequences follow a sticky topic chain; within a
// topic the next token usually advances cyclically through the block.
// Downstream samples mix two "label" topics and some noise; the label is the
// topic contributing more tokens and its label word is that topic's first token.

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "sbreg/random.hpp"

namespace sbreg {

inline constexpr int kPadToken = 0;
inline constexpr int kMaskToken = 1;

struct TopicLayout {
  std::size_t vocab_size = 64;
  std::size_t num_topics = 4;
  std::size_t topic_size = 14;

  void validate() const {
    if (num_topics < 2 || topic_size < 2) throw std::invalid_argument("synthetic: need >= 2 topics of >= 2 tokens");
    if (2 + num_topics * topic_size > vocab_size) throw std::invalid_argument("synthetic: topics do not fit the vocabulary");
  }
  int topic_token(std::size_t topic, std::size_t i) const { return static_cast<int>(2 + topic * topic_size + i); }
  std::size_t noise_begin() const { return 2 + num_topics * topic_size; }
  std::size_t noise_count() const { return vocab_size - noise_begin(); }
  int label_word(std::size_t topic) const { return topic_token(topic, 0); }
};

struct CorpusSpec {
  TopicLayout layout;
  std::size_t num_sequences = 4000;
  std::size_t min_len = 8;
  std::size_t max_len = 20;
  double stay_prob = 0.85;
  double cycle_prob = 0.6;
  double noise_prob = 0.08;
  std::uint64_t seed = 0;
};

inline void to_json(nlohmann::json& j, const CorpusSpec& c) {
  j = {{"vocab_size", c.layout.vocab_size}, {"num_topics", c.layout.num_topics}, {"topic_size", c.layout.topic_size},
       {"num_sequences", c.num_sequences},  {"min_len", c.min_len},             {"max_len", c.max_len},
       {"stay_prob", c.stay_prob},          {"cycle_prob", c.cycle_prob},       {"noise_prob", c.noise_prob},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, CorpusSpec& c) {
  c.layout.vocab_size = j.value("vocab_size", c.layout.vocab_size);
  c.layout.num_topics = j.value("num_topics", c.layout.num_topics);
  c.layout.topic_size = j.value("topic_size", c.layout.topic_size);
  c.num_sequences = j.value("num_sequences", c.num_sequences);
  c.min_len = j.value("min_len", c.min_len);
  c.max_len = j.value("max_len", c.max_len);
  c.stay_prob = j.value("stay_prob", c.stay_prob);
  c.cycle_prob = j.value("cycle_prob", c.cycle_prob);
  c.noise_prob = j.value("noise_prob", c.noise_prob);
  c.seed = j.value("seed", c.seed);
}

inline std::vector<std::vector<int>> generate_corpus(const CorpusSpec& spec) {
  const auto& lay = spec.layout;
  lay.validate();
  if (spec.min_len < 2 || spec.max_len < spec.min_len) throw std::invalid_argument("synthetic: bad length range");
  Rng rng(spec.seed);
  std::vector<std::vector<int>> out;
  out.reserve(spec.num_sequences);
  for (std::size_t s = 0; s < spec.num_sequences; ++s) {
    const std::size_t len = spec.min_len + uniform_index(rng, spec.max_len - spec.min_len + 1);
    std::size_t topic = uniform_index(rng, lay.num_topics);
    std::size_t pos = uniform_index(rng, lay.topic_size);
    std::vector<int> seq;
    seq.reserve(len);
    for (std::size_t i = 0; i < len; ++i) {
      if (lay.noise_count() > 0 && uniform01(rng) < spec.noise_prob) {
        seq.push_back(static_cast<int>(lay.noise_begin() + uniform_index(rng, lay.noise_count())));
        continue;
      }
      seq.push_back(lay.topic_token(topic, pos));
      if (uniform01(rng) >= spec.stay_prob) {
        topic = uniform_index(rng, lay.num_topics);
        pos = uniform_index(rng, lay.topic_size);
      } else if (uniform01(rng) < spec.cycle_prob) {
        pos = (pos + 1) % lay.topic_size;
      } else {
        pos = uniform_index(rng, lay.topic_size);
      }
    }
    out.push_back(std::move(seq));
  }
  return out;
}

struct TaskSpec {
  TopicLayout layout;
  std::size_t num_samples = 800;
  std::size_t min_len = 8;
  std::size_t max_len = 14;
  double majority_share = 0.6;
  double minority_share = 0.25;  // the rest is noise
  std::uint64_t seed = 1;
};

inline void to_json(nlohmann::json& j, const TaskSpec& t) {
  j = {{"vocab_size", t.layout.vocab_size}, {"num_topics", t.layout.num_topics},
       {"topic_size", t.layout.topic_size}, {"num_samples", t.num_samples},
       {"min_len", t.min_len},             {"max_len", t.max_len},
       {"majority_share", t.majority_share}, {"minority_share", t.minority_share},
       {"seed", t.seed}};
}

inline void from_json(const nlohmann::json& j, TaskSpec& t) {
  t.layout.vocab_size = j.value("vocab_size", t.layout.vocab_size);
  t.layout.num_topics = j.value("num_topics", t.layout.num_topics);
  t.layout.topic_size = j.value("topic_size", t.layout.topic_size);
  t.num_samples = j.value("num_samples", t.num_samples);
  t.min_len = j.value("min_len", t.min_len);
  t.max_len = j.value("max_len", t.max_len);
  t.majority_share = j.value("majority_share", t.majority_share);
  t.minority_share = j.value("minority_share", t.minority_share);
  t.seed = j.value("seed", t.seed);
}

/// A labelled sequence before the mask is appended.
struct RawTaskSample {
  std::vector<int> tokens;
  int label_word = 0;
};

/// Topic (0 or 1) with strictly more tokens in the sequence, or -1 on a tie.
inline int majority_label_topic(const TopicLayout& lay, const std::vector<int>& tokens) {
  std::size_t count[2] = {0, 0};
  for (int t : tokens)
    for (std::size_t k = 0; k < 2; ++k)
      if (t >= lay.topic_token(k, 0) && t < lay.topic_token(k, 0) + static_cast<int>(lay.topic_size)) ++count[k];
  if (count[0] == count[1]) return -1;
  return count[0] > count[1] ? 0 : 1;
}

/// Binary task: the dominant sampling topic alternates, ties are resampled.
inline std::vector<RawTaskSample> generate_task(const TaskSpec& spec) {
  const auto& lay = spec.layout;
  lay.validate();
  if (spec.majority_share + spec.minority_share > 1.0 || spec.majority_share <= spec.minority_share) {
    throw std::invalid_argument("synthetic: need minority < majority and shares summing to at most 1");
  }
  Rng rng(spec.seed);
  std::vector<RawTaskSample> out;
  out.reserve(spec.num_samples);
  // Noise draws come from the unlabelled topics and the noise block.
  std::vector<int> noise;
  for (std::size_t k = 2; k < lay.num_topics; ++k)
    for (std::size_t i = 0; i < lay.topic_size; ++i) noise.push_back(lay.topic_token(k, i));
  for (std::size_t i = 0; i < lay.noise_count(); ++i) noise.push_back(static_cast<int>(lay.noise_begin() + i));
  while (out.size() < spec.num_samples) {
    const std::size_t major = out.size() % 2;
    const std::size_t len = spec.min_len + uniform_index(rng, spec.max_len - spec.min_len + 1);
    std::vector<int> seq;
    for (std::size_t i = 0; i < len; ++i) {
      const double u = uniform01(rng);
      if (u < spec.majority_share) {
        seq.push_back(lay.topic_token(major, uniform_index(rng, lay.topic_size)));
      } else if (u < spec.majority_share + spec.minority_share || noise.empty()) {
        seq.push_back(lay.topic_token(1 - major, uniform_index(rng, lay.topic_size)));
      } else {
        seq.push_back(noise[uniform_index(rng, noise.size())]);
      }
    }
    const int topic = majority_label_topic(lay, seq);
    if (topic < 0) continue;
    out.push_back({std::move(seq), lay.label_word(static_cast<std::size_t>(topic))});
  }
  return out;
}

}  // namespace sbreg
