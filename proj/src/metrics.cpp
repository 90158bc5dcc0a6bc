#include "va3/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <unordered_set>

#include "va3/text.hpp"

namespace va3 {

const std::string& PredictionSet::at(const std::string& id) const {
  auto it = entries.find(id);
  if (it == entries.end()) {
    throw MissingPredictionError("no prediction for question '" + id + "'");
  }
  return it->second;
}

std::map<std::string, std::string> parse_answer_jsonl(std::string_view text) {
  std::map<std::string, std::string> answers;
  std::size_t line_no = 0;
  for (const auto& line : split_lines(text)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string at = " on line " + std::to_string(line_no);
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw SchemaError("malformed JSON" + at + ": " + e.what());
    }
    if (!doc.is_object() || !doc.contains("id") || !doc["id"].is_string() ||
        !doc.contains("answer") || !doc["answer"].is_string()) {
      throw SchemaError("expected {\"id\": str, \"answer\": str}" + at);
    }
    auto [it, inserted] =
        answers.emplace(doc["id"].get<std::string>(), doc["answer"].get<std::string>());
    if (!inserted) throw DuplicateIdError("duplicate id '" + it->first + "'" + at);
  }
  return answers;
}

std::string answer_jsonl(const std::map<std::string, std::string>& answers) {
  std::string out;
  for (const auto& [id, answer] : answers) {
    nlohmann::ordered_json line;
    line["id"] = id;
    line["answer"] = answer;
    out += line.dump();
    out += '\n';
  }
  return out;
}

bool answers_match(std::string_view predicted, std::string_view gold) {
  return normalize_answer(predicted) == normalize_answer(gold);
}

namespace {

void check_unique_ids(std::span<const Qdg> graphs) {
  std::unordered_set<std::string> seen;
  for (const auto& g : graphs) {
    for (const auto& node : g.nodes()) {
      if (!seen.insert(node.id).second) {
        throw DuplicateIdError("question id '" + node.id +
                               "' appears in more than one graph (graph '" +
                               g.graph_id() + "')");
      }
    }
  }
}

bool is_correct(const QuestionNode& node, const PredictionSet& predictions) {
  if (!node.gold_answer) {
    throw MissingGoldError("no gold answer for question '" + node.id + "'");
  }
  return answers_match(predictions.at(node.id), *node.gold_answer);
}

// Percentage ratio; flags `name` when the denominator is zero.
double ratio(double num, double den, const char* name,
             std::set<std::string>& flags) {
  if (den == 0.0) {
    flags.insert(name);
    return 0.0;
  }
  return 100.0 * num / den;
}

std::string beta_suffix(double beta) {
  char buffer[32];
  std::snprintf(buffer, sizeof buffer, "%g", beta);
  return buffer;
}

}  // namespace

ConsistencyCounts tally_counts(std::span<const Qdg> graphs,
                               const PredictionSet& predictions) {
  check_unique_ids(graphs);
  ConsistencyCounts counts;
  for (const auto& g : graphs) {
    const auto& nodes = g.nodes();
    std::vector<char> correct(nodes.size());
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      correct[i] = is_correct(nodes[i], predictions);
    }
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      const auto& kids = g.children(i);
      if (kids.empty()) continue;
      bool all_children = true;
      for (std::size_t c : kids) all_children = all_children && correct[c];
      if (correct[i]) {
        ++(all_children ? counts.n_pp : counts.n_mp);
      } else {
        ++(all_children ? counts.n_pm : counts.n_mm);
      }
    }
  }
  return counts;
}

MetricsReport compute_metrics(const ConsistencyCounts& counts, double beta) {
  if (!(beta > 0.0) || !std::isfinite(beta)) {
    throw ConfigError("beta must be a positive finite number");
  }
  MetricsReport r;
  r.beta = beta;
  r.counts = counts;
  auto& flags = r.degenerate_flags;
  const double pp = static_cast<double>(counts.n_pp);
  const double pm = static_cast<double>(counts.n_pm);
  const double mp = static_cast<double>(counts.n_mp);
  const double mm = static_cast<double>(counts.n_mm);

  r.ca = ratio(pp, pp + pm, "ca", flags);
  r.rwr = ratio(mp, mp + mm, "rwr", flags);
  r.delta = r.rwr - r.ca;
  if (flags.contains("ca") || flags.contains("rwr")) flags.insert("delta");

  r.cp = ratio(pp, pp + pm, "cp", flags);
  r.cr = ratio(pp, pp + mp, "cr", flags);
  r.ncp = ratio(mm, mp + mm, "ncp", flags);
  r.ncr = ratio(mm, mm + pm, "ncr", flags);

  const double b2 = beta * beta;
  auto f_score = [&](double p, double rec, const std::string& name) {
    const double den = b2 * p + rec;
    if (den == 0.0) {
      flags.insert(name);
      return 0.0;
    }
    return (1.0 + b2) * p * rec / den;
  };
  r.c_f = f_score(r.cp, r.cr, r.c_f_name());
  r.nc_f = f_score(r.ncp, r.ncr, r.nc_f_name());
  return r;
}

AccuracyBreakdown accuracy_breakdown(std::span<const Qdg> graphs,
                                     const PredictionSet& predictions) {
  check_unique_ids(graphs);
  // [main/sub][open/binary] -> (correct, total)
  std::int64_t correct[2][2] = {};
  std::int64_t total[2][2] = {};
  for (const auto& g : graphs) {
    for (const auto& node : g.nodes()) {
      const int level = node.role == QuestionRole::kMain ? 0 : 1;
      const int kind = node.kind == QuestionKind::kOpen ? 0 : 1;
      total[level][kind] += 1;
      correct[level][kind] += is_correct(node, predictions) ? 1 : 0;
    }
  }
  AccuracyBreakdown out;
  auto cell = [&](int level, const std::string& prefix) {
    AccuracyCell c;
    auto& flags = out.degenerate_flags;
    c.open = ratio(static_cast<double>(correct[level][0]),
                   static_cast<double>(total[level][0]),
                   (prefix + "_open_accuracy").c_str(), flags);
    c.binary = ratio(static_cast<double>(correct[level][1]),
                     static_cast<double>(total[level][1]),
                     (prefix + "_binary_accuracy").c_str(), flags);
    c.all = ratio(static_cast<double>(correct[level][0] + correct[level][1]),
                  static_cast<double>(total[level][0] + total[level][1]),
                  (prefix + "_accuracy").c_str(), flags);
    return c;
  };
  out.main = cell(0, "main");
  out.sub = cell(1, "sub");
  return out;
}

MetricsReport evaluate_predictions(std::span<const Qdg> graphs,
                                   const PredictionSet& predictions,
                                   double beta) {
  MetricsReport report = compute_metrics(tally_counts(graphs, predictions), beta);
  AccuracyBreakdown acc = accuracy_breakdown(graphs, predictions);
  report.main_accuracy = acc.main;
  report.sub_accuracy = acc.sub;
  report.degenerate_flags.insert(acc.degenerate_flags.begin(),
                                 acc.degenerate_flags.end());
  return report;
}

std::string MetricsReport::c_f_name() const { return "c_f" + beta_suffix(beta); }
std::string MetricsReport::nc_f_name() const { return "nc_f" + beta_suffix(beta); }

MetricsReport MetricsReport::rounded() const {
  MetricsReport r = *this;
  for (double* v : {&r.ca, &r.rwr, &r.delta, &r.cp, &r.cr, &r.ncp, &r.ncr,
                    &r.c_f, &r.nc_f}) {
    *v = round_half_even(*v, 2);
  }
  for (AccuracyCell* c : {&r.main_accuracy, &r.sub_accuracy}) {
    c->open = round_half_even(c->open, 2);
    c->binary = round_half_even(c->binary, 2);
    c->all = round_half_even(c->all, 2);
  }
  return r;
}

namespace {

// Report rows in emission order: (name, value). Shared by JSON and CSV.
std::vector<std::pair<std::string, double>> metric_rows(const MetricsReport& r) {
  return {{"ca", r.ca},
          {"rwr", r.rwr},
          {"delta", r.delta},
          {"cp", r.cp},
          {"cr", r.cr},
          {"ncp", r.ncp},
          {"ncr", r.ncr},
          {r.c_f_name(), r.c_f},
          {r.nc_f_name(), r.nc_f}};
}

}  // namespace

nlohmann::ordered_json report_to_json(const MetricsReport& report) {
  const MetricsReport r = report.rounded();
  nlohmann::ordered_json doc;
  doc["beta"] = r.beta;
  doc["counts"] = {{"n_pp", r.counts.n_pp},
                   {"n_pm", r.counts.n_pm},
                   {"n_mp", r.counts.n_mp},
                   {"n_mm", r.counts.n_mm}};
  for (const auto& [name, value] : metric_rows(r)) doc[name] = value;
  auto cell = [](const AccuracyCell& c) {
    nlohmann::ordered_json j;
    j["open"] = c.open;
    j["binary"] = c.binary;
    j["all"] = c.all;
    return j;
  };
  doc["accuracy"]["main"] = cell(r.main_accuracy);
  doc["accuracy"]["sub"] = cell(r.sub_accuracy);
  doc["degenerate_flags"] = r.degenerate_flags;
  return doc;
}

MetricsReport report_from_json(const nlohmann::json& doc) {
  try {
    MetricsReport r;
    r.beta = doc.at("beta").get<double>();
    const auto& counts = doc.at("counts");
    r.counts.n_pp = counts.at("n_pp").get<std::int64_t>();
    r.counts.n_pm = counts.at("n_pm").get<std::int64_t>();
    r.counts.n_mp = counts.at("n_mp").get<std::int64_t>();
    r.counts.n_mm = counts.at("n_mm").get<std::int64_t>();
    r.ca = doc.at("ca").get<double>();
    r.rwr = doc.at("rwr").get<double>();
    r.delta = doc.at("delta").get<double>();
    r.cp = doc.at("cp").get<double>();
    r.cr = doc.at("cr").get<double>();
    r.ncp = doc.at("ncp").get<double>();
    r.ncr = doc.at("ncr").get<double>();
    r.c_f = doc.at(r.c_f_name()).get<double>();
    r.nc_f = doc.at(r.nc_f_name()).get<double>();
    auto cell = [](const nlohmann::json& j) {
      return AccuracyCell{j.at("open").get<double>(), j.at("binary").get<double>(),
                          j.at("all").get<double>()};
    };
    r.main_accuracy = cell(doc.at("accuracy").at("main"));
    r.sub_accuracy = cell(doc.at("accuracy").at("sub"));
    r.degenerate_flags = doc.at("degenerate_flags").get<std::set<std::string>>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed metrics report: ") + e.what());
  }
}

std::string emit_report(const MetricsReport& report, ReportFormat format) {
  if (format == ReportFormat::kJson) return report_to_json(report).dump(2) + "\n";

  const MetricsReport r = report.rounded();
  std::ostringstream out;
  out << "metric,value\n";
  for (const auto& [name, value] : metric_rows(r)) {
    out << name << ',' << format_fixed2(value) << '\n';
  }
  const std::pair<const char*, const AccuracyCell*> cells[] = {
      {"main", &r.main_accuracy}, {"sub", &r.sub_accuracy}};
  for (const auto& [prefix, c] : cells) {
    out << prefix << "_open_accuracy," << format_fixed2(c->open) << '\n';
    out << prefix << "_binary_accuracy," << format_fixed2(c->binary) << '\n';
    out << prefix << "_accuracy," << format_fixed2(c->all) << '\n';
  }
  out << "n_pp," << r.counts.n_pp << '\n'
      << "n_pm," << r.counts.n_pm << '\n'
      << "n_mp," << r.counts.n_mp << '\n'
      << "n_mm," << r.counts.n_mm << '\n';
  return out.str();
}

}  // namespace va3
