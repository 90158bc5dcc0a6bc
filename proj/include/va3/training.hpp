#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "va3/aggregator.hpp"
#include "va3/aligner.hpp"
#include "va3/metrics.hpp"
#include "va3/params.hpp"
#include "va3/synthetic.hpp"

namespace va3 {

VA3_DEFINE_ERROR(NonFiniteLossError);

struct AblationFlags {
  bool aligner = true;
  bool aggregator = true;
  bool triplet = true;
  bool contrastive = true;
  bool operator==(const AblationFlags&) const = default;
};

struct RunConfig {
  SyntheticConfig data;
  std::size_t h = 16;
  std::size_t layers = 2;  // K
  std::size_t heads = 1;
  double temperature = 1.0;  // tau
  double margin = 1.0;       // triplet m
  double learning_rate = 3e-3;
  std::size_t steps = 2000;
  std::size_t batch_clusters = 4;
  std::size_t eval_every = 250;
  double aligner_weight = 1.0;
  double aggregator_weight = 1.0;
  AblationFlags flags;
  std::uint64_t seed = 0;

  void validate() const;  // ConfigError
  AlignerDims aligner_dims() const;
  AggregatorDims aggregator_dims() const;
  bool operator==(const RunConfig&) const = default;
};

nlohmann::ordered_json run_config_to_json(const RunConfig& config);
// Missing keys keep defaults; unknown keys are a ConfigError.
RunConfig run_config_from_json(const nlohmann::json& doc);
RunConfig read_run_config(const std::string& path);

/// Parameters of one run. Every component is created regardless of flags.
struct Model {
  std::unique_ptr<ParamStore> params;
  AlignerModel aligner;
  AggregatorParams aggregator;

  static Model create(const RunConfig& config);
};

struct BatchLoss {
  ad::Var total;
  ad::Var aligner;      // L_al (answer CE + contrastive), 0 when gated off
  ad::Var contrastive;  // mean contrastive term inside L_al
  ad::Var node_ce;      // aggregator CE, or answer-head CE without the aggregator
  ad::Var triplet;      // 0 when gated off
  std::vector<std::map<std::string, std::string>> predictions;            // per instance
  std::vector<std::map<std::string, std::vector<std::size_t>>> relevant;  // hard indicator sets
};

struct BatchOptions {
  bool train = false;  // Gumbel noise when true, noise-free argmax otherwise
  std::uint64_t stream = 0;
};

// `pool` supplies replacement clips for the contrastive positive view.
BatchLoss forward_batch(const Model& model, const RunConfig& config,
                        std::span<const SyntheticInstance* const> batch,
                        std::span<const VideoFeatures> pool, const BatchOptions& options);

struct RelevanceScore {
  double precision = 0;
  double recall = 0;
  bool operator==(const RelevanceScore&) const = default;
};

RelevanceScore relevance_score(
    std::span<const SyntheticInstance> instances,
    std::span<const std::map<std::string, std::vector<std::size_t>>> selected);

struct Evaluation {
  double loss = 0;
  MetricsReport metrics;
  RelevanceScore relevance;  // zeros without the aligner
  std::map<std::string, std::string> predictions;
  bool operator==(const Evaluation&) const = default;
};

// Side-effect free; clusters are split across `threads` workers and merged
// in input order.
Evaluation evaluate(const Model& model, const RunConfig& config,
                    std::span<const SyntheticInstance> split, std::size_t threads = 1);
// Predictions supplied directly rather than by a model.
MetricsReport evaluate_predictions(std::span<const SyntheticInstance> split,
                                   const std::map<std::string, std::string>& predictions);

struct EpochRecord {
  std::size_t step = 0;
  std::optional<double> train_loss;  // mean batch loss since the previous record
  double validation_loss = 0;
  double main_accuracy = 0;
  double sub_accuracy = 0;
  double c_f1 = 0;
  double nc_f1 = 0;
  double relevance_precision = 0;
  double relevance_recall = 0;
  bool operator==(const EpochRecord&) const = default;
};

struct RunReport {
  RunConfig config;
  std::vector<EpochRecord> epochs;
  std::size_t best_step = 0;
  Evaluation best_validation;
  Evaluation test;  // with the best checkpoint
  std::map<std::string, Tensor> checkpoint;
  double seconds = 0;  // wall clock, kept out of the JSON report

  nlohmann::ordered_json to_json() const;
  std::string epochs_csv() const;
};

RunReport train(const RunConfig& config, std::size_t threads = 1);

// report.json, epochs.csv, checkpoint.{bin,json}, timing.json.
void write_run(const std::string& directory, const RunReport& report);

// Loads a checkpoint saved by write_run into a model built from `config`.
// ShapeError when the stored tensors do not match the config's dims.
Model load_model(const RunConfig& config, const std::string& checkpoint_prefix);

struct AblationRow {
  std::string name;
  AblationFlags flags;
  double main_accuracy = 0;
  double sub_accuracy = 0;
  double c_f1 = 0;
  double nc_f1 = 0;
};

// backbone, +aligner, +aggregator, +aggregator+triplet, full.
std::vector<std::pair<std::string, AblationFlags>> ablation_variants();
// One row per variant: validation metrics of the best checkpoint, averaged
// over runs with seeds base.seed, base.seed + 1, ... (the data seed is kept).
std::vector<AblationRow> ablate(const RunConfig& base, std::size_t threads = 1,
                                std::size_t seeds = 1);
std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace va3
