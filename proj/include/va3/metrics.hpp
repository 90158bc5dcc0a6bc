#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>

#include <json.hpp>

#include "va3/error.hpp"
#include "va3/qdg.hpp"

namespace va3 {

VA3_DEFINE_ERROR(MissingPredictionError);
VA3_DEFINE_ERROR(MissingGoldError);

/// Question id -> predicted answer token.
struct PredictionSet {
  std::map<std::string, std::string> entries;

  const std::string& at(const std::string& id) const;
};

// `{"id": str, "answer": str}` per line; used for predictions and gold files.
std::map<std::string, std::string> parse_answer_jsonl(std::string_view text);
std::string answer_jsonl(const std::map<std::string, std::string>& answers);

bool answers_match(std::string_view predicted, std::string_view gold);

/// The four parent/children correctness buckets.
///
/// First letter is the parent's correctness, second whether all of its
/// direct children are correct: `n_pm` counts wrong parents whose children
/// are all right.
struct ConsistencyCounts {
  std::int64_t n_pp = 0;
  std::int64_t n_pm = 0;
  std::int64_t n_mp = 0;
  std::int64_t n_mm = 0;

  std::int64_t total() const { return n_pp + n_pm + n_mp + n_mm; }
  ConsistencyCounts& operator+=(const ConsistencyCounts& o) {
    n_pp += o.n_pp;
    n_pm += o.n_pm;
    n_mp += o.n_mp;
    n_mm += o.n_mm;
    return *this;
  }
  bool operator==(const ConsistencyCounts&) const = default;
};

struct AccuracyCell {
  double open = 0;
  double binary = 0;
  double all = 0;
  bool operator==(const AccuracyCell&) const = default;
};

struct AccuracyBreakdown {
  AccuracyCell main;
  AccuracyCell sub;
  std::set<std::string> degenerate_flags;
  bool operator==(const AccuracyBreakdown&) const = default;
};

/// Consistency metrics and accuracy breakdown, all as percentages.
///
/// Values are unrounded until `rounded()` / `emit_report`. A metric whose
/// denominator is zero is reported as 0 and its name is added to
/// `degenerate_flags`.
struct MetricsReport {
  double beta = 1.0;
  ConsistencyCounts counts;
  double ca = 0;
  double rwr = 0;
  double delta = 0;
  double cp = 0;
  double cr = 0;
  double ncp = 0;
  double ncr = 0;
  double c_f = 0;
  double nc_f = 0;
  AccuracyCell main_accuracy;
  AccuracyCell sub_accuracy;
  std::set<std::string> degenerate_flags;

  // Field names used in reports, e.g. "c_f1" for beta = 1.
  std::string c_f_name() const;
  std::string nc_f_name() const;

  MetricsReport rounded() const;
  bool operator==(const MetricsReport&) const = default;
};

enum class ReportFormat { kJson, kCsv };

ConsistencyCounts tally_counts(std::span<const Qdg> graphs,
                               const PredictionSet& predictions);

// Fills the consistency fields only; accuracy fields stay zero.
MetricsReport compute_metrics(const ConsistencyCounts& counts, double beta);

AccuracyBreakdown accuracy_breakdown(std::span<const Qdg> graphs,
                                     const PredictionSet& predictions);

// tally + compute + breakdown in one call.
MetricsReport evaluate_predictions(std::span<const Qdg> graphs,
                                   const PredictionSet& predictions,
                                   double beta = 1.0);

nlohmann::ordered_json report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& doc);
std::string emit_report(const MetricsReport& report, ReportFormat format);

}  // namespace va3
