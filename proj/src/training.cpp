#include "va3/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>
#include <thread>

#include "va3/nn.hpp"
#include "va3/text.hpp"

namespace va3 {

using ad::Var;

namespace {

constexpr std::uint64_t kOrderStream = 0x0d3e0001ULL;
constexpr std::uint64_t kEvalStream = 0x0d3e0002ULL;

enum class Purpose : std::uint64_t { kNoise = 1, kReplacement = 2, kTriplet = 3 };

Rng purpose_rng(std::uint64_t seed, std::uint64_t stream, Purpose purpose) {
  return Rng(seed, mix_seed(stream, static_cast<std::uint64_t>(purpose)));
}

Var mean_of(const std::vector<Var>& terms) {
  if (terms.empty()) return Var::scalar(0.0);
  std::vector<Var> rows;
  rows.reserve(terms.size());
  for (const Var& t : terms) rows.push_back(ad::reshape(t, {1}));
  return ad::reshape(ad::mean(ad::concat(rows, 0)), {});
}

std::size_t argmax_row(const Tensor& t, std::size_t row) {
  const std::size_t width = t.rank() == 1 ? t.size() : t.dim(1);
  const std::size_t base = t.rank() == 1 ? 0 : row * width;
  std::size_t best = 0;
  for (std::size_t k = 1; k < width; ++k) {
    if (t[base + k] > t[base + best]) best = k;
  }
  return best;
}

std::vector<Qdg> graphs_of(std::span<const SyntheticInstance> split) {
  std::vector<Qdg> graphs;
  graphs.reserve(split.size());
  for (const SyntheticInstance& inst : split) graphs.push_back(inst.graph);
  return graphs;
}

std::vector<VideoFeatures> videos_of(std::span<const SyntheticInstance* const> batch) {
  std::vector<VideoFeatures> out;
  out.reserve(batch.size());
  for (const SyntheticInstance* inst : batch) out.push_back(inst->video);
  return out;
}

}  // namespace

void RunConfig::validate() const {
  data.validate();
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("run config: " + what);
  };
  require(h >= 1 && layers >= 1 && heads >= 1, "h, layers and heads must be >= 1");
  require(data.h_v % heads == 0, "h_v must be divisible by heads");
  require(temperature > 0.0, "temperature must be positive");
  require(margin > 0.0, "margin must be positive");
  require(learning_rate > 0.0, "learning_rate must be positive");
  require(batch_clusters >= 1, "batch_clusters must be >= 1");
  require(eval_every >= 1, "eval_every must be >= 1");
  require(aligner_weight >= 0.0 && aggregator_weight >= 0.0, "loss weights must be >= 0");
  require(data.clusters >= 3, "data.clusters must leave every split non-empty");
}

AlignerDims RunConfig::aligner_dims() const {
  return {data.h_v, data.h_q, h, data.vocab.size(), heads};
}

AggregatorDims RunConfig::aggregator_dims() const {
  return {h, layers, data.vocab.size(), margin};
}

nlohmann::ordered_json run_config_to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["data"] = config_to_json(c.data);
  j["h"] = c.h;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["temperature"] = c.temperature;
  j["margin"] = c.margin;
  j["learning_rate"] = c.learning_rate;
  j["steps"] = c.steps;
  j["batch_clusters"] = c.batch_clusters;
  j["eval_every"] = c.eval_every;
  j["aligner_weight"] = c.aligner_weight;
  j["aggregator_weight"] = c.aggregator_weight;
  j["flags"] = {{"aligner", c.flags.aligner},
                {"aggregator", c.flags.aggregator},
                {"triplet", c.flags.triplet},
                {"contrastive", c.flags.contrastive}};
  j["seed"] = c.seed;
  return j;
}

RunConfig run_config_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig c;
  const nlohmann::ordered_json defaults = run_config_to_json(c);
  for (const auto& [key, value] : doc.items()) {
    if (!defaults.contains(key)) throw ConfigError("unknown run config key '" + key + "'");
  }
  if (doc.contains("data")) c.data = config_from_json(doc.at("data"));
  try {
    auto get = [&](const char* key, auto& field) {
      if (doc.contains(key)) doc.at(key).get_to(field);
    };
    get("h", c.h);
    get("layers", c.layers);
    get("heads", c.heads);
    get("temperature", c.temperature);
    get("margin", c.margin);
    get("learning_rate", c.learning_rate);
    get("steps", c.steps);
    get("batch_clusters", c.batch_clusters);
    get("eval_every", c.eval_every);
    get("aligner_weight", c.aligner_weight);
    get("aggregator_weight", c.aggregator_weight);
    get("seed", c.seed);
    if (doc.contains("flags")) {
      const auto& f = doc.at("flags");
      for (const auto& [key, value] : f.items()) {
        if (!defaults["flags"].contains(key)) throw ConfigError("unknown flag '" + key + "'");
      }
      if (f.contains("aligner")) f.at("aligner").get_to(c.flags.aligner);
      if (f.contains("aggregator")) f.at("aggregator").get_to(c.flags.aggregator);
      if (f.contains("triplet")) f.at("triplet").get_to(c.flags.triplet);
      if (f.contains("contrastive")) f.at("contrastive").get_to(c.flags.contrastive);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig read_run_config(const std::string& path) {
  try {
    return run_config_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("malformed run config '" + path + "': " + e.what());
  }
}

Model Model::create(const RunConfig& config) {
  config.validate();
  auto params = std::make_unique<ParamStore>(config.seed);
  AlignerModel aligner = AlignerModel::create(*params, config.aligner_dims());
  AggregatorParams aggregator =
      AggregatorParams::create(*params, "aggregator", config.aggregator_dims());
  return {std::move(params), std::move(aligner), std::move(aggregator)};
}

BatchLoss forward_batch(const Model& model, const RunConfig& config,
                        std::span<const SyntheticInstance* const> batch,
                        std::span<const VideoFeatures> pool, const BatchOptions& options) {
  const SyntheticConfig& data = config.data;
  const AblationFlags& flags = config.flags;
  Rng noise_rng = purpose_rng(config.seed, options.stream, Purpose::kNoise);
  Rng replacement_rng = purpose_rng(config.seed, options.stream, Purpose::kReplacement);
  Rng triplet_rng = purpose_rng(config.seed, options.stream, Purpose::kTriplet);
  const AlignerOptions aligner_options{config.temperature, true, flags.contrastive};

  BatchLoss out;
  out.predictions.resize(batch.size());
  out.relevant.resize(batch.size());
  std::vector<std::map<std::string, Var>> features(batch.size());
  std::vector<Var> aligner_terms, contrastive_terms, head_terms;
  std::vector<std::optional<std::size_t>> gold_rows;

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const SyntheticInstance& inst = *batch[i];
    const std::size_t n_c = inst.video.clips();
    for (const QuestionNode& node : inst.graph.nodes()) {
      const Tensor& question = inst.question_features.at(node.id);
      const std::size_t gold = data.answer_index(inst.gold.at(node.id));
      gold_rows.emplace_back(gold);
      AlignerStep step;
      if (flags.aligner) {
        const Tensor noise = options.train ? nn::sample_gumbel(Shape{n_c, 2}, noise_rng)
                                           : Tensor(Shape{n_c, 2});
        const Tensor replacements =
            replacement_motion(sample_replacements(n_c, pool, replacement_rng), pool);
        step = aligner_answer_and_loss(model.aligner, inst.video, question, gold, replacements,
                                       aligner_options, noise);
        out.relevant[i][node.id] = step.indicator.relevant;
        aligner_terms.push_back(step.loss);
        contrastive_terms.push_back(step.contrastive);
      } else {
        step = backbone_answer(model.aligner, inst.video, question, gold);
      }
      head_terms.push_back(step.answer_loss);
      features[i][node.id] = step.joint;
      out.predictions[i][node.id] = data.vocab[argmax_row(step.distribution.value(), 0)];
    }
  }

  out.aligner = flags.aligner ? mean_of(aligner_terms) : Var::scalar(0.0);
  out.contrastive = mean_of(contrastive_terms);
  out.triplet = Var::scalar(0.0);
  if (flags.aggregator) {
    std::vector<const Qdg*> graphs;
    for (const SyntheticInstance* inst : batch) graphs.push_back(&inst->graph);
    const GraphBatch graph_batch = GraphBatch::build(graphs);
    const AggregatorOutput agg =
        aggregate(graph_batch, stack_features(graph_batch, features), model.aggregator);
    if (flags.triplet) {
      out.triplet = edge_triplet_loss(
          edge_representations(graph_batch, agg.answer_features, model.aggregator),
          graph_batch.edge_type, config.margin, triplet_rng);
    }
    std::vector<std::size_t> targets;
    for (const auto& g : gold_rows) targets.push_back(*g);
    out.node_ce = ad::softmax_cross_entropy(agg.answer_features, targets);
    const Var aggregation = ad::add(out.node_ce, out.triplet);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      for (const QuestionNode& node : batch[i]->graph.nodes()) {
        const std::size_t row = graph_batch.row(i, node.id);
        out.predictions[i][node.id] = data.vocab[argmax_row(agg.answer_features.value(), row)];
      }
    }
    out.total = ad::scale(aggregation, config.aggregator_weight);
    if (flags.aligner) {
      out.total = ad::add(ad::scale(out.aligner, config.aligner_weight), out.total);
    }
  } else {
    out.node_ce = mean_of(head_terms);
    out.total = flags.aligner ? ad::scale(out.aligner, config.aligner_weight) : out.node_ce;
  }
  return out;
}

RelevanceScore relevance_score(
    std::span<const SyntheticInstance> instances,
    std::span<const std::map<std::string, std::vector<std::size_t>>> selected) {
  if (instances.size() != selected.size()) {
    throw ShapeError("relevance sets for " + std::to_string(selected.size()) + " of " +
                     std::to_string(instances.size()) + " instances");
  }
  double hits = 0, chosen = 0, planted = 0;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    for (const auto& [id, clips] : selected[i]) {
      const auto& truth = instances[i].planted_relevance.at(id);
      chosen += static_cast<double>(clips.size());
      planted += static_cast<double>(truth.size());
      for (std::size_t c : clips) {
        if (std::find(truth.begin(), truth.end(), c) != truth.end()) hits += 1;
      }
    }
  }
  return {chosen > 0 ? hits / chosen : 0.0, planted > 0 ? hits / planted : 0.0};
}

MetricsReport evaluate_predictions(std::span<const SyntheticInstance> split,
                                   const std::map<std::string, std::string>& predictions) {
  const std::vector<Qdg> graphs = graphs_of(split);
  return evaluate_predictions(std::span<const Qdg>(graphs), PredictionSet{predictions}, 1.0);
}

Evaluation evaluate(const Model& model, const RunConfig& config,
                    std::span<const SyntheticInstance> split, std::size_t threads) {
  if (split.empty()) throw ConfigError("cannot evaluate an empty split");
  std::vector<VideoFeatures> pool;
  pool.reserve(split.size());
  for (const SyntheticInstance& inst : split) pool.push_back(inst.video);

  std::vector<double> losses(split.size());
  std::vector<std::map<std::string, std::string>> predictions(split.size());
  std::vector<std::map<std::string, std::vector<std::size_t>>> relevant(split.size());
  // Only the first failure is rethrown, from the calling thread.
  std::vector<std::exception_ptr> errors(split.size());
  auto work = [&](std::size_t begin, std::size_t stride) {
    ad::NoGradGuard no_grad;
    for (std::size_t i = begin; i < split.size(); i += stride) {
      try {
        const SyntheticInstance* one[] = {&split[i]};
        BatchLoss r = forward_batch(model, config, one, pool,
                                    {false, mix_seed(kEvalStream, split[i].index)});
        losses[i] = r.total.item();
        predictions[i] = std::move(r.predictions[0]);
        relevant[i] = std::move(r.relevant[0]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, split.size());
  if (workers == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool_threads;
    for (std::size_t t = 0; t < workers; ++t) pool_threads.emplace_back(work, t, workers);
    for (auto& t : pool_threads) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  Evaluation ev;
  double total = 0;
  for (double l : losses) total += l;
  ev.loss = total / static_cast<double>(split.size());
  for (auto& p : predictions) ev.predictions.merge(p);
  ev.metrics = evaluate_predictions(split, ev.predictions);
  if (config.flags.aligner) ev.relevance = relevance_score(split, relevant);
  return ev;
}

namespace {

EpochRecord record_for(std::size_t step, std::optional<double> train_loss, const Evaluation& ev) {
  EpochRecord r;
  r.step = step;
  r.train_loss = train_loss;
  r.validation_loss = ev.loss;
  r.main_accuracy = ev.metrics.main_accuracy.all;
  r.sub_accuracy = ev.metrics.sub_accuracy.all;
  r.c_f1 = ev.metrics.c_f;
  r.nc_f1 = ev.metrics.nc_f;
  r.relevance_precision = ev.relevance.precision;
  r.relevance_recall = ev.relevance.recall;
  return r;
}

std::string loss_diagnostic(std::size_t step, const BatchLoss& loss,
                            std::span<const SyntheticInstance* const> batch) {
  std::ostringstream out;
  out << "non-finite loss at step " << step << ": total=" << loss.total.item()
      << " aligner=" << loss.aligner.item() << " contrastive=" << loss.contrastive.item()
      << " node_ce=" << loss.node_ce.item() << " triplet=" << loss.triplet.item()
      << "; clusters:";
  for (const SyntheticInstance* inst : batch) out << ' ' << inst->graph.graph_id();
  return out.str();
}

}  // namespace

RunReport train(const RunConfig& config, std::size_t threads) {
  const auto started = std::chrono::steady_clock::now();
  config.validate();
  const SyntheticDataset dataset = generate_dataset(config.data);
  Model model = Model::create(config);
  Adam adam(AdamConfig{config.learning_rate});

  RunReport report;
  report.config = config;
  report.best_validation = evaluate(model, config, dataset.validation, threads);
  report.epochs.push_back(record_for(0, std::nullopt, report.best_validation));
  report.checkpoint = model.params->snapshot();

  std::vector<std::size_t> order(dataset.train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng order_rng(config.seed, kOrderStream);
  const std::size_t batch_size = std::min(config.batch_clusters, order.size());
  std::size_t cursor = order.size();
  double loss_sum = 0;
  std::size_t loss_count = 0;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    if (cursor + batch_size > order.size()) {
      order_rng.shuffle(order);
      cursor = 0;
    }
    std::vector<const SyntheticInstance*> batch;
    for (std::size_t b = 0; b < batch_size; ++b) batch.push_back(&dataset.train[order[cursor++]]);
    const std::vector<VideoFeatures> pool = videos_of(batch);

    model.params->zero_grad();
    const BatchLoss loss = forward_batch(model, config, batch, pool, {true, step});
    const double value = loss.total.item();
    if (!std::isfinite(value)) throw NonFiniteLossError(loss_diagnostic(step, loss, batch));
    ad::backward(loss.total);
    adam.step(*model.params);
    loss_sum += value;
    ++loss_count;

    if (step % config.eval_every == 0 || step == config.steps) {
      const Evaluation ev = evaluate(model, config, dataset.validation, threads);
      report.epochs.push_back(record_for(step, loss_sum / static_cast<double>(loss_count), ev));
      loss_sum = 0;
      loss_count = 0;
      if (ev.metrics.c_f > report.best_validation.metrics.c_f) {
        report.best_validation = ev;
        report.best_step = step;
        report.checkpoint = model.params->snapshot();
      }
    }
  }

  model.params->load(report.checkpoint);
  report.test = evaluate(model, config, dataset.test, threads);
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

namespace {

nlohmann::ordered_json evaluation_json(const Evaluation& ev) {
  nlohmann::ordered_json j;
  j["loss"] = ev.loss;
  j["metrics"] = report_to_json(ev.metrics);
  j["relevance"] = {{"precision", ev.relevance.precision}, {"recall", ev.relevance.recall}};
  return j;
}

}  // namespace

nlohmann::ordered_json RunReport::to_json() const {
  nlohmann::ordered_json j;
  j["config"] = run_config_to_json(config);
  j["config_hash"] = config_hash(config.data);
  j["epochs"] = nlohmann::ordered_json::array();
  for (const EpochRecord& e : epochs) {
    nlohmann::ordered_json row;
    row["step"] = e.step;
    row["train_loss"] = e.train_loss ? nlohmann::ordered_json(*e.train_loss) : nullptr;
    row["validation_loss"] = e.validation_loss;
    row["main_accuracy"] = e.main_accuracy;
    row["sub_accuracy"] = e.sub_accuracy;
    row["c_f1"] = e.c_f1;
    row["nc_f1"] = e.nc_f1;
    row["relevance_precision"] = e.relevance_precision;
    row["relevance_recall"] = e.relevance_recall;
    j["epochs"].push_back(std::move(row));
  }
  j["best_step"] = best_step;
  j["validation"] = evaluation_json(best_validation);
  j["test"] = evaluation_json(test);
  return j;
}

std::string RunReport::epochs_csv() const {
  std::ostringstream out;
  out << "step,train_loss,validation_loss,main_accuracy,sub_accuracy,c_f1,nc_f1,"
         "relevance_precision,relevance_recall\n";
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  for (const EpochRecord& e : epochs) {
    out << e.step << ',' << (e.train_loss ? num(*e.train_loss) : "") << ','
        << num(e.validation_loss) << ',' << num(e.main_accuracy) << ',' << num(e.sub_accuracy)
        << ',' << num(e.c_f1) << ',' << num(e.nc_f1) << ',' << num(e.relevance_precision) << ','
        << num(e.relevance_recall) << '\n';
  }
  return out.str();
}

void write_run(const std::string& directory, const RunReport& report) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(directory, ec);
  if (ec) throw IoError("cannot create '" + directory + "': " + ec.message());
  const fs::path dir(directory);
  write_file((dir / "report.json").string(), report.to_json().dump(2) + "\n");
  write_file((dir / "epochs.csv").string(), report.epochs_csv());
  write_file((dir / "test_predictions.jsonl").string(), answer_jsonl(report.test.predictions));
  save_tensors((dir / "checkpoint").string(), report.checkpoint, report.config.seed);
  nlohmann::ordered_json timing;
  timing["seconds"] = report.seconds;
  write_file((dir / "timing.json").string(), timing.dump(2) + "\n");
}

Model load_model(const RunConfig& config, const std::string& checkpoint_prefix) {
  Model model = Model::create(config);
  const std::map<std::string, Tensor> stored = load_tensors(checkpoint_prefix);
  for (const auto& [name, var] : model.params->params()) {
    const auto it = stored.find(name);
    if (it == stored.end()) throw ShapeError("checkpoint lacks parameter '" + name + "'");
    if (it->second.shape() != var.shape()) {
      throw ShapeError("checkpoint parameter '" + name + "' has shape " +
                       shape_to_string(it->second.shape()) + ", config expects " +
                       shape_to_string(var.shape()));
    }
  }
  if (stored.size() != model.params->params().size()) {
    throw ShapeError("checkpoint has " + std::to_string(stored.size()) + " tensors, config has " +
                     std::to_string(model.params->params().size()));
  }
  model.params->load(stored);
  return model;
}

std::vector<std::pair<std::string, AblationFlags>> ablation_variants() {
  return {{"backbone", {false, false, false, false}},
          {"+aligner", {true, false, false, true}},
          {"+aggregator", {false, true, false, false}},
          {"+aggregator+triplet", {false, true, true, false}},
          {"full", {true, true, true, true}}};
}

std::vector<AblationRow> ablate(const RunConfig& base, std::size_t threads, std::size_t seeds) {
  if (seeds == 0) throw ConfigError("ablation needs at least one seed");
  std::vector<AblationRow> rows;
  for (const auto& [name, flags] : ablation_variants()) {
    AblationRow row{name, flags};
    for (std::size_t s = 0; s < seeds; ++s) {
      RunConfig config = base;
      config.flags = flags;
      config.seed = base.seed + s;
      const RunReport report = train(config, threads);
      const MetricsReport& m = report.best_validation.metrics;
      row.main_accuracy += m.main_accuracy.all;
      row.sub_accuracy += m.sub_accuracy.all;
      row.c_f1 += m.c_f;
      row.nc_f1 += m.nc_f;
    }
    const double n = static_cast<double>(seeds);
    row.main_accuracy /= n;
    row.sub_accuracy /= n;
    row.c_f1 /= n;
    row.nc_f1 /= n;
    rows.push_back(row);
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream out;
  out << "variant,aligner,aggregator,triplet,contrastive,main_accuracy,sub_accuracy,c_f1,nc_f1\n";
  for (const AblationRow& r : rows) {
    out << r.name << ',' << r.flags.aligner << ',' << r.flags.aggregator << ','
        << r.flags.triplet << ',' << r.flags.contrastive << ','
        << format_fixed2(round_half_even(r.main_accuracy, 2)) << ','
        << format_fixed2(round_half_even(r.sub_accuracy, 2)) << ','
        << format_fixed2(round_half_even(r.c_f1, 2)) << ','
        << format_fixed2(round_half_even(r.nc_f1, 2)) << '\n';
  }
  return out.str();
}

}  // namespace va3
