#include "va3/cli.hpp"

#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "va3/decomposition.hpp"
#include "va3/gradcheck.hpp"
#include "va3/metrics.hpp"
#include "va3/qdg.hpp"
#include "va3/synthetic.hpp"
#include "va3/text.hpp"
#include "va3/training.hpp"

namespace va3::cli {

namespace {

using nlohmann::ordered_json;

// A library error tagged with the graph it concerns.
struct GraphError {
  std::string kind;
  std::string message;
  std::string graph_id;
  std::size_t line = 0;
};

ordered_json error_json(const std::string& kind, const std::string& message,
                        const std::optional<std::string>& graph_id = std::nullopt,
                        std::size_t line = 0) {
  ordered_json j;
  j["error"] = kind;
  j["message"] = message;
  j["graph_id"] = graph_id ? ordered_json(*graph_id) : ordered_json(nullptr);
  if (line > 0) j["line"] = line;
  return j;
}

// Parses graphs one line at a time so that failures name their graph.
std::vector<Qdg> load_graphs(const std::string& path) {
  const std::string text = read_file(path);
  std::vector<Qdg> graphs;
  std::size_t line_no = 0;
  for (const std::string& raw : split_lines(text)) {
    ++line_no;
    const std::string_view line = trim(raw);
    if (line.empty()) continue;
    std::string graph_id;
    try {
      const nlohmann::json doc = nlohmann::json::parse(line);
      if (doc.is_object() && doc.contains("graph_id") && doc["graph_id"].is_string()) {
        graph_id = doc["graph_id"].get<std::string>();
      }
      graphs.push_back(qdg_from_json(doc));
    } catch (const nlohmann::json::exception& e) {
      throw GraphError{"SchemaError", std::string("malformed JSON: ") + e.what(), graph_id,
                       line_no};
    } catch (const Error& e) {
      throw GraphError{e.kind(), e.what(), graph_id, line_no};
    }
  }
  return graphs;
}

void write_output(const std::string& path, const std::string& contents, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << contents;
  } else {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    write_file(path, contents);
  }
}

ordered_json metrics_summary(const MetricsReport& m) {
  const MetricsReport r = m.rounded();
  return {{"main_accuracy", r.main_accuracy.all},
          {"sub_accuracy", r.sub_accuracy.all},
          {"c_f1", r.c_f},
          {"nc_f1", r.nc_f}};
}

struct Options {
  std::size_t threads = 1;

  std::string validate_path;

  std::string graphs, gold, pred, eval_out;
  double beta = 1.0;

  std::string config, run_out;
  std::size_t seeds = 1;

  std::string module = "all";
  std::size_t instances = 3;
  std::string grad_out;

  std::string bank, questions, stub, decompose_out, failures;
  std::size_t k = 3;

  std::string synthetic_config, generate_out;
};

int cmd_validate(const Options& o, std::ostream& out) {
  const std::vector<Qdg> graphs = load_graphs(o.validate_path);
  std::size_t nodes = 0, edges = 0;
  for (const Qdg& g : graphs) {
    nodes += g.nodes().size();
    edges += g.edges().size();
  }
  ordered_json j{{"valid", true}, {"graphs", graphs.size()}, {"nodes", nodes}, {"edges", edges}};
  out << j.dump() << "\n";
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  std::vector<Qdg> graphs = load_graphs(o.graphs);
  const auto gold = parse_answer_jsonl(read_file(o.gold));
  for (Qdg& g : graphs) g = g.with_gold(gold);
  const PredictionSet predictions{parse_answer_jsonl(read_file(o.pred))};
  const MetricsReport report = evaluate_predictions(graphs, predictions, o.beta);
  const bool csv = o.eval_out.size() >= 4 && o.eval_out.substr(o.eval_out.size() - 4) == ".csv";
  write_output(o.eval_out, emit_report(report, csv ? ReportFormat::kCsv : ReportFormat::kJson),
               out);
  if (o.eval_out != "-") {
    ordered_json j = metrics_summary(report);
    j["out"] = o.eval_out;
    out << j.dump() << "\n";
  }
  return kExitOk;
}

int cmd_train(const Options& o, std::ostream& out) {
  const RunConfig config = read_run_config(o.config);
  const RunReport report = train(config, o.threads);
  write_run(o.run_out, report);
  ordered_json j;
  j["out"] = o.run_out;
  j["best_step"] = report.best_step;
  j["validation"] = metrics_summary(report.best_validation.metrics);
  j["test"] = metrics_summary(report.test.metrics);
  out << j.dump() << "\n";
  return kExitOk;
}

int cmd_ablate(const Options& o, std::ostream& out) {
  const RunConfig config = read_run_config(o.config);
  const auto rows = ablate(config, o.threads, o.seeds);
  write_output(o.run_out, ablation_csv(rows), out);
  if (o.run_out != "-") out << ordered_json{{"out", o.run_out}, {"rows", rows.size()}}.dump() << "\n";
  return kExitOk;
}

int cmd_gradcheck(const Options& o, std::ostream& out) {
  const auto checks = run_grad_suite(o.module, o.instances);
  ordered_json j;
  j["module"] = o.module;
  j["instances"] = o.instances;
  j["tolerance"] = kGradRelativeTolerance;
  j["roundoff_allowance"] = kGradRoundoffAllowance;
  j["ops"] = ordered_json::array();
  std::size_t failed = 0;
  for (const OpGradCheck& c : checks) {
    ordered_json op;
    op["module"] = c.module;
    op["op"] = c.op;
    op["coordinates"] = c.coordinates;
    op["max_relative_error"] = c.max_relative_error;
    op["passed"] = c.passed();
    op["beyond_roundoff"] = c.beyond_roundoff;
    op["worst"] = c.worst;
    j["ops"].push_back(std::move(op));
    if (!c.passed()) ++failed;
  }
  j["passed"] = failed == 0;
  if (failed > 0) {
    j["error"] = "GradCheckError";
    j["message"] = std::to_string(failed) + " of " + std::to_string(checks.size()) +
                   " ops exceed max relative error " + std::to_string(kGradRelativeTolerance);
  }
  if (!o.grad_out.empty()) write_output(o.grad_out, j.dump(2) + "\n", out);
  out << j.dump() << "\n";
  return failed == 0 ? kExitOk : kExitDataError;
}

int cmd_decompose(const Options& o, std::ostream& out, std::ostream& err) {
  const ExampleBank bank = ExampleBank::from_file(o.bank);
  const auto questions = parse_questions(read_file(o.questions));
  std::unique_ptr<CompletionClient> client;
  if (!o.stub.empty()) {
    client = std::make_unique<StubClient>(StubClient::from_file(o.stub));
  } else {
    client = std::make_unique<HttpClient>(HttpClient::from_environment());
  }
  const ExtendResult result = extend_dataset(questions, bank, o.k, *client, o.threads);
  write_output(o.decompose_out, result.graphs_jsonl(), out);
  const std::string report = result.failure_report().dump(2) + "\n";
  if (!o.failures.empty()) {
    write_output(o.failures, report, out);
  } else {
    err << report;
  }
  return kExitOk;
}

int cmd_generate(const Options& o, std::ostream& out) {
  SyntheticConfig config;
  if (!o.synthetic_config.empty()) {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(read_file(o.synthetic_config));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("malformed config '" + o.synthetic_config + "': " + e.what());
    }
    config = doc.is_object() && doc.contains("data") ? run_config_from_json(doc).data
                                                      : config_from_json(doc);
  }
  const SyntheticDataset dataset = generate_dataset(config);
  write_dataset(o.generate_out, dataset);
  ordered_json j{{"out", o.generate_out}, {"manifest", dataset.manifest()}};
  out << j.dump() << "\n";
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Compositional consistency metrics, video aligner and answer aggregator toolkit",
               args.empty() ? "va3" : args[0]};
  app.require_subcommand(1);
  Options o;
  app.add_option("--threads", o.threads, "Worker threads for evaluation and decomposition")
      ->default_val(1)
      ->check(CLI::PositiveNumber);

  auto* validate = app.add_subcommand("validate", "Validate a QDG-JSONL graph file");
  validate->add_option("graphs", o.validate_path, "graphs.jsonl")->required()->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "Score predictions against gold answers");
  eval->add_option("--graphs", o.graphs, "QDG-JSONL graphs")->required()->check(CLI::ExistingFile);
  eval->add_option("--gold", o.gold, "Gold answers, {id, answer} JSONL")->required()->check(CLI::ExistingFile);
  eval->add_option("--pred", o.pred, "Predicted answers, {id, answer} JSONL")->required()->check(CLI::ExistingFile);
  eval->add_option("--beta", o.beta, "F-beta weight")->default_val(1.0)->check(CLI::PositiveNumber);
  eval->add_option("--out", o.eval_out, "Report path (.json or .csv, - for stdout)")->required();

  auto* train_cmd = app.add_subcommand("train", "Train on synthetic data and write a run directory");
  train_cmd->add_option("--config", o.config, "Run config JSON")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", o.run_out, "Run directory")->required();

  auto* ablate_cmd = app.add_subcommand("ablate", "Train every ablation variant and write a CSV table");
  ablate_cmd->add_option("--config", o.config, "Run config JSON")->required()->check(CLI::ExistingFile);
  ablate_cmd->add_option("--out", o.run_out, "Table path (- for stdout)")->required();
  ablate_cmd->add_option("--seeds", o.seeds, "Runs per variant, averaged")->default_val(1)->check(CLI::PositiveNumber);

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  grad->add_option("--module", o.module, "all, autodiff, aligner or aggregator")
      ->default_val("all")
      ->check(CLI::IsMember({"all", "autodiff", "aligner", "aggregator"}));
  grad->add_option("--instances", o.instances, "Random instances per op")->default_val(3)->check(CLI::PositiveNumber);
  grad->add_option("--out", o.grad_out, "Also write the JSON report here");

  auto* decompose = app.add_subcommand(
      "decompose",
      "Decompose questions into QDGs. Without --stub the completion endpoint comes from "
      "VA3_COMPLETION_URL, VA3_COMPLETION_KEY and VA3_COMPLETION_MODEL");
  decompose->add_option("--bank", o.bank, "Example bank JSON")->required()->check(CLI::ExistingFile);
  decompose->add_option("--questions", o.questions, "One question per line, optionally video<TAB>question")
      ->required()
      ->check(CLI::ExistingFile);
  decompose->add_option("--k", o.k, "Exemplars per prompt")->default_val(3)->check(CLI::PositiveNumber);
  decompose->add_option("--stub", o.stub, "Stub completion fixture JSON")->check(CLI::ExistingFile);
  decompose->add_option("--out", o.decompose_out, "Graph JSONL path (default stdout)");
  decompose->add_option("--failures", o.failures, "Failure report path (default stderr)");

  auto* generate = app.add_subcommand("generate", "Write a synthetic dataset directory");
  generate->add_option("--config", o.synthetic_config, "Synthetic or run config JSON (defaults if omitted)")
      ->check(CLI::ExistingFile);
  generate->add_option("--out", o.generate_out, "Dataset directory")->required();

  std::vector<std::string> rest(args.empty() ? args.begin() : args.begin() + 1, args.end());
  std::reverse(rest.begin(), rest.end());
  try {
    app.parse(rest);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << app.get_name() << ": " << e.what() << "\n";
    err << "Run with --help for usage.\n";
    return kExitUsage;
  }

  try {
    if (validate->parsed()) return cmd_validate(o, out);
    if (eval->parsed()) return cmd_eval(o, out);
    if (train_cmd->parsed()) return cmd_train(o, out);
    if (ablate_cmd->parsed()) return cmd_ablate(o, out);
    if (grad->parsed()) return cmd_gradcheck(o, out);
    if (decompose->parsed()) return cmd_decompose(o, out, err);
    if (generate->parsed()) return cmd_generate(o, out);
  } catch (const GraphError& e) {
    out << error_json(e.kind, e.message, e.graph_id.empty() ? std::nullopt
                                                            : std::optional(e.graph_id),
                      e.line)
               .dump()
        << "\n";
    return kExitDataError;
  } catch (const Error& e) {
    out << error_json(e.kind(), e.what()).dump() << "\n";
    return kExitDataError;
  } catch (const std::exception& e) {
    out << error_json("InternalError", e.what()).dump() << "\n";
    return kExitDataError;
  }
  err << "no command given\n";
  return kExitUsage;
}

}  // namespace va3::cli
