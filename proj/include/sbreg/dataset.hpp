#pragma once

// JSON-lines datasets: one object per line with "tokens" (integer array),
// "label_word" (integer) and optional "mask_position". Without a mask position
// the mask token is appended to the sequence.

#include <cstddef>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sbreg/synthetic.hpp"

namespace sbreg {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TaskSample {
  std::vector<int> tokens;
  int label_word = 0;
  std::size_t mask_position = 0;
};

/// Builds a sample; with no explicit position the mask token is appended.
inline TaskSample make_sample(std::vector<int> tokens, int label_word, std::optional<std::size_t> mask_position,
                              int mask_token = kMaskToken) {
  TaskSample s;
  s.label_word = label_word;
  if (mask_position) {
    if (*mask_position >= tokens.size()) throw DataError("dataset: mask_position outside the sequence");
    tokens[*mask_position] = mask_token;
    s.mask_position = *mask_position;
  } else {
    tokens.push_back(mask_token);
    s.mask_position = tokens.size() - 1;
  }
  s.tokens = std::move(tokens);
  return s;
}

inline std::vector<TaskSample> to_samples(const std::vector<RawTaskSample>& raw, int mask_token = kMaskToken) {
  std::vector<TaskSample> out;
  out.reserve(raw.size());
  for (const auto& r : raw) out.push_back(make_sample(r.tokens, r.label_word, std::nullopt, mask_token));
  return out;
}

inline void validate_samples(const std::vector<TaskSample>& data, std::size_t vocab_size) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = data[i];
    if (s.label_word < 0 || static_cast<std::size_t>(s.label_word) >= vocab_size) {
      throw DataError("dataset: sample " + std::to_string(i) + " has label_word " + std::to_string(s.label_word) +
                      " outside the vocabulary");
    }
    for (int t : s.tokens)
      if (t < 0 || static_cast<std::size_t>(t) >= vocab_size)
        throw DataError("dataset: sample " + std::to_string(i) + " has token " + std::to_string(t) +
                        " outside the vocabulary");
  }
}

/// Reads a JSONL dataset. The file's mask positions are kept as given (the
/// token there is replaced by the mask token).
inline std::vector<TaskSample> read_jsonl(const std::string& path, int mask_token = kMaskToken) {
  std::ifstream f(path);
  if (!f) throw DataError("dataset: cannot open '" + path + "'");
  std::vector<TaskSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      auto tokens = j.at("tokens").get<std::vector<int>>();
      if (tokens.empty()) throw DataError("empty token list");
      std::optional<std::size_t> pos;
      if (j.contains("mask_position") && !j.at("mask_position").is_null()) pos = j.at("mask_position").get<std::size_t>();
      out.push_back(make_sample(std::move(tokens), j.at("label_word").get<int>(), pos, mask_token));
    } catch (const std::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_jsonl(const std::string& path, const std::vector<TaskSample>& data) {
  std::ofstream f(path);
  if (!f) throw DataError("dataset: cannot open '" + path + "' for writing");
  for (const auto& s : data) {
    nlohmann::json j = {{"tokens", s.tokens}, {"label_word", s.label_word}, {"mask_position", s.mask_position}};
    f << j.dump() << '\n';
  }
}

inline void write_raw_jsonl(const std::string& path, const std::vector<RawTaskSample>& data) {
  std::ofstream f(path);
  if (!f) throw DataError("dataset: cannot open '" + path + "' for writing");
  for (const auto& s : data) f << nlohmann::json({{"tokens", s.tokens}, {"label_word", s.label_word}}).dump() << '\n';
}

/// Unlabelled corpus: one JSON integer array per line.
inline void write_corpus(const std::string& path, const std::vector<std::vector<int>>& corpus) {
  std::ofstream f(path);
  if (!f) throw DataError("corpus: cannot open '" + path + "' for writing");
  for (const auto& seq : corpus) f << nlohmann::json(seq).dump() << '\n';
}

inline std::vector<std::vector<int>> read_corpus(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("corpus: cannot open '" + path + "'");
  std::vector<std::vector<int>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line).get<std::vector<int>>());
    } catch (const std::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace sbreg
