#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "va3/aligner.hpp"
#include "va3/qdg.hpp"
#include "va3/tensor.hpp"

namespace va3 {

inline constexpr std::size_t kQuestionTokens = 2;

struct SyntheticConfig {
  std::size_t n_c = 10;
  std::size_t n_f = 2;
  std::size_t n_o = 2;
  std::size_t h_v = 8;
  std::size_t h_q = 8;
  // "yes"/"no" answer binary questions; every other word is an open answer.
  std::vector<std::string> vocab = {"no", "yes", "red", "green", "blue"};
  std::vector<std::string> edge_types = {"and", "equals", "first", "or"};
  std::size_t clusters = 1000;
  std::size_t subs_min = 2;
  std::size_t subs_max = 6;
  std::size_t max_depth = 3;  // question levels, main included
  double decompose_prob = 0.3;
  std::size_t relevant_min = 1;
  std::size_t relevant_max = 2;
  double noise = 1.0;
  double signal = 2.0;
  // Answer-code strength in a parent's clips relative to a leaf's.
  double parent_signal = 0.5;
  std::uint64_t seed = 0;

  void validate() const;  // ConfigError
  bool has_binary() const;
  std::vector<std::string> open_answers() const;
  std::size_t answer_index(const std::string& answer) const;  // IndexError

  bool operator==(const SyntheticConfig&) const = default;
};

nlohmann::ordered_json config_to_json(const SyntheticConfig& config);
// Missing keys keep their defaults; unknown keys are a ConfigError.
SyntheticConfig config_from_json(const nlohmann::json& doc);
// Hex FNV-1a of the canonical config JSON.
std::string config_hash(const SyntheticConfig& config);

// Seed-fixed maps shared by every instance of a config.
struct SignalMaps {
  Tensor relevance;   // B: [h_v, h_q], question vector -> clip signal
  Tensor answers;     // A: [vocab, h_v], unit answer codes
  Tensor categories;  // [count, h_q], one row per (kind, op) category
};
SignalMaps signal_maps(const SyntheticConfig& config);
// Row of `categories` for a node: 0 open leaf, 1 binary leaf, then one row
// per edge type for parents (in config order).
std::size_t category_row(const SyntheticConfig& config, QuestionKind kind,
                         const std::string& op);

struct ProgramStep {
  std::string parent;
  std::string op;
  std::vector<std::string> children;  // sorted by id
  bool operator==(const ProgramStep&) const = default;
};

// Answer of a parent from its children's answers (children in id order).
// AND/OR over yes/no, EQUALS is yes iff all answers agree, FIRST copies the
// first child. UnknownOpError on anything else.
std::string apply_op(const std::string& op, const std::vector<std::string>& answers);
// Recomputes every parent in `program` order from `gold`.
std::map<std::string, std::string> run_program(const std::vector<ProgramStep>& program,
                                               std::map<std::string, std::string> leaves);

struct SyntheticInstance {
  std::size_t index = 0;
  VideoFeatures video;
  Qdg graph;
  std::map<std::string, Tensor> question_features;  // [kQuestionTokens, h_q]
  std::map<std::string, std::string> gold;
  std::map<std::string, std::vector<std::size_t>> planted_relevance;
  std::vector<ProgramStep> program;  // children before parents

  QuestionCluster cluster() const { return make_cluster(graph); }
  bool operator==(const SyntheticInstance&) const = default;
};

SyntheticInstance generate_instance(const SyntheticConfig& config, std::size_t index);

struct SplitRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const SplitRange&) const = default;
};

struct SyntheticDataset {
  SyntheticConfig config;
  SplitRange train_range, validation_range, test_range;
  std::vector<SyntheticInstance> train, validation, test;

  const std::vector<SyntheticInstance>& split(const std::string& name) const;  // ConfigError
  nlohmann::ordered_json manifest() const;
  bool operator==(const SyntheticDataset&) const = default;
};

// 70/15/15 contiguous index ranges.
void split_ranges(std::size_t clusters, SplitRange& train, SplitRange& validation,
                  SplitRange& test);
SyntheticDataset generate_dataset(const SyntheticConfig& config);

// graphs.jsonl, gold.jsonl, instances.jsonl (split, planted sets, program),
// features/<split>.bin + .json, config.json (config plus manifest).
void write_dataset(const std::string& directory, const SyntheticDataset& dataset);
SyntheticDataset read_dataset(const std::string& directory);

}  // namespace va3
