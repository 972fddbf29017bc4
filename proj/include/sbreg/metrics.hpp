#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace sbreg {

enum class Metric { Accuracy, F1, Matthews };

inline const char* metric_name(Metric m) {
  switch (m) {
    case Metric::Accuracy: return "accuracy";
    case Metric::F1: return "f1";
    case Metric::Matthews: return "matthews";
  }
  return "unknown";
}

inline Metric parse_metric(const std::string& s) {
  if (s == "accuracy") return Metric::Accuracy;
  if (s == "f1") return Metric::F1;
  if (s == "matthews") return Metric::Matthews;
  throw std::invalid_argument("unknown metric '" + s + "' (expected accuracy|f1|matthews)");
}

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline double f1_score(const Confusion& c) {
  const double denom = 2.0 * c.tp + c.fp + c.fn;
  return denom == 0.0 ? 0.0 : 2.0 * c.tp / denom;
}

/// Returns 0 when any marginal of the confusion matrix is empty.
inline double matthews(const Confusion& c) {
  const double tp = c.tp, fp = c.fp, fn = c.fn, tn = c.tn;
  const double a = tp + fp, b = tp + fn, d = tn + fp, e = tn + fn;
  if (a == 0.0 || b == 0.0 || d == 0.0 || e == 0.0) return 0.0;
  return (tp * tn - fp * fn) / std::sqrt(a * b * d * e);
}

/// Confusion counts with `positive` as the positive label.
inline Confusion confusion(const std::vector<int>& predicted, const std::vector<int>& gold, int positive) {
  if (predicted.size() != gold.size()) throw std::invalid_argument("metrics: prediction/gold length mismatch");
  Confusion c;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const bool p = predicted[i] == positive, g = gold[i] == positive;
    if (p && g) ++c.tp;
    else if (p) ++c.fp;
    else if (g) ++c.fn;
    else ++c.tn;
  }
  return c;
}

/// `label_words` lists the candidate labels; f1 and matthews need exactly two,
/// and the second is the positive class.
inline double score(Metric m, const std::vector<int>& predicted, const std::vector<int>& gold,
                    const std::vector<int>& label_words) {
  if (predicted.size() != gold.size()) throw std::invalid_argument("metrics: prediction/gold length mismatch");
  if (gold.empty()) throw std::invalid_argument("metrics: empty evaluation set");
  if (m == Metric::Accuracy) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) hit += predicted[i] == gold[i];
    return static_cast<double>(hit) / static_cast<double>(gold.size());
  }
  if (label_words.size() != 2) {
    throw std::invalid_argument(std::string("metrics: ") + metric_name(m) + " needs exactly 2 labels, got " +
                                std::to_string(label_words.size()));
  }
  const auto c = confusion(predicted, gold, label_words[1]);
  return m == Metric::F1 ? f1_score(c) : matthews(c);
}

}  // namespace sbreg
