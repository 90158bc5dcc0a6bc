#include "va3/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <set>
#include <sstream>

#include "va3/metrics.hpp"
#include "va3/params.hpp"
#include "va3/random.hpp"
#include "va3/text.hpp"

namespace va3 {

namespace {

constexpr std::uint64_t kMapStream = 0x5167a115ULL;

bool is_binary_op(const std::string& op) { return op == "and" || op == "or" || op == "equals"; }

std::string padded(std::size_t value, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%0*zu", width, value);
  return buf;
}

void normalize(std::vector<double>& v) {
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (norm > 0.0) {
    for (double& x : v) x /= norm;
  }
}

}  // namespace

bool SyntheticConfig::has_binary() const {
  return std::find(vocab.begin(), vocab.end(), "yes") != vocab.end() &&
         std::find(vocab.begin(), vocab.end(), "no") != vocab.end();
}

std::vector<std::string> SyntheticConfig::open_answers() const {
  std::vector<std::string> out;
  for (const auto& w : vocab) {
    if (w != "yes" && w != "no") out.push_back(w);
  }
  return out;
}

std::size_t SyntheticConfig::answer_index(const std::string& answer) const {
  const auto it = std::find(vocab.begin(), vocab.end(), answer);
  if (it == vocab.end()) throw IndexError("answer '" + answer + "' not in vocabulary");
  return static_cast<std::size_t>(it - vocab.begin());
}

void SyntheticConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("synthetic config: " + what);
  };
  require(n_c >= 1 && n_f >= 1 && n_o >= 1 && h_v >= 1 && h_q >= 1, "all dims must be >= 1");
  require(h_q >= 2, "h_q must be >= 2 (one coordinate is the token-type flag)");
  require(clusters >= 1, "clusters must be >= 1");
  require(subs_min >= 1 && subs_min <= subs_max, "subs range must satisfy 1 <= min <= max");
  require(max_depth >= 2, "max_depth must be >= 2");
  require(relevant_min >= 1 && relevant_min <= relevant_max && relevant_max <= n_c,
          "relevant-clips range must lie within [1, n_c]");
  require(decompose_prob >= 0.0 && decompose_prob <= 1.0, "decompose_prob must be in [0, 1]");
  require(noise >= 0.0 && signal >= 0.0 && parent_signal >= 0.0, "scales must be >= 0");
  require(!vocab.empty(), "vocab must be non-empty");
  require(std::set<std::string>(vocab.begin(), vocab.end()).size() == vocab.size(),
          "vocab has duplicates");
  require(!edge_types.empty(), "edge_types must be non-empty");
  const bool open = !open_answers().empty();
  for (const auto& op : edge_types) {
    if (op == "and" || op == "or") {
      require(has_binary(), "op '" + op + "' needs yes and no in the vocab");
    } else if (op == "equals") {
      require(has_binary() && open, "op 'equals' needs yes, no and an open answer");
    } else if (op == "first") {
      require(open, "op 'first' needs an open answer");
    } else {
      require(false, "unknown op '" + op + "'");
    }
  }
}

nlohmann::ordered_json config_to_json(const SyntheticConfig& c) {
  nlohmann::ordered_json j;
  j["n_c"] = c.n_c;
  j["n_f"] = c.n_f;
  j["n_o"] = c.n_o;
  j["h_v"] = c.h_v;
  j["h_q"] = c.h_q;
  j["vocab"] = c.vocab;
  j["edge_types"] = c.edge_types;
  j["clusters"] = c.clusters;
  j["subs_min"] = c.subs_min;
  j["subs_max"] = c.subs_max;
  j["max_depth"] = c.max_depth;
  j["decompose_prob"] = c.decompose_prob;
  j["relevant_min"] = c.relevant_min;
  j["relevant_max"] = c.relevant_max;
  j["noise"] = c.noise;
  j["signal"] = c.signal;
  j["parent_signal"] = c.parent_signal;
  j["seed"] = c.seed;
  return j;
}

SyntheticConfig config_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("synthetic config must be a JSON object");
  SyntheticConfig c;
  const nlohmann::ordered_json defaults = config_to_json(c);
  for (const auto& [key, value] : doc.items()) {
    if (!defaults.contains(key)) throw ConfigError("unknown synthetic config key '" + key + "'");
  }
  try {
    auto get = [&](const char* key, auto& field) {
      if (doc.contains(key)) doc.at(key).get_to(field);
    };
    get("n_c", c.n_c);
    get("n_f", c.n_f);
    get("n_o", c.n_o);
    get("h_v", c.h_v);
    get("h_q", c.h_q);
    get("vocab", c.vocab);
    get("edge_types", c.edge_types);
    get("clusters", c.clusters);
    get("subs_min", c.subs_min);
    get("subs_max", c.subs_max);
    get("max_depth", c.max_depth);
    get("decompose_prob", c.decompose_prob);
    get("relevant_min", c.relevant_min);
    get("relevant_max", c.relevant_max);
    get("noise", c.noise);
    get("signal", c.signal);
    get("parent_signal", c.parent_signal);
    get("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synthetic config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string config_hash(const SyntheticConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(config_to_json(config).dump())));
  return buf;
}

SignalMaps signal_maps(const SyntheticConfig& config) {
  Rng rng(config.seed, kMapStream);
  SignalMaps maps{Tensor(Shape{config.h_v, config.h_q}),
                  Tensor(Shape{config.vocab.size(), config.h_v}),
                  Tensor(Shape{2 + config.edge_types.size(), config.h_q})};
  const double s = 1.0 / std::sqrt(static_cast<double>(config.h_q));
  for (double& x : maps.relevance.data()) x = s * rng.normal();
  for (Tensor* t : {&maps.answers, &maps.categories}) {
    // Category rows leave the token-type coordinate at zero.
    const std::size_t width = t == &maps.categories ? t->dim(1) - 1 : t->dim(1);
    for (std::size_t r = 0; r < t->dim(0); ++r) {
      std::vector<double> row(t->dim(1), 0.0);
      for (std::size_t c = 0; c < width; ++c) row[c] = rng.normal();
      normalize(row);
      for (std::size_t c = 0; c < row.size(); ++c) t->at(r, c) = row[c];
    }
  }
  return maps;
}

std::size_t category_row(const SyntheticConfig& config, QuestionKind kind,
                         const std::string& op) {
  if (op.empty()) return kind == QuestionKind::kOpen ? 0 : 1;
  const auto it = std::find(config.edge_types.begin(), config.edge_types.end(), op);
  if (it == config.edge_types.end()) throw UnknownOpError("op '" + op + "' not in config");
  return 2 + static_cast<std::size_t>(it - config.edge_types.begin());
}

std::string apply_op(const std::string& op, const std::vector<std::string>& answers) {
  if (answers.empty()) throw ConfigError("op '" + op + "' needs at least one child answer");
  if (op == "and") {
    return std::all_of(answers.begin(), answers.end(), [](const auto& a) { return a == "yes"; })
               ? "yes"
               : "no";
  }
  if (op == "or") {
    return std::any_of(answers.begin(), answers.end(), [](const auto& a) { return a == "yes"; })
               ? "yes"
               : "no";
  }
  if (op == "equals") {
    return std::all_of(answers.begin(), answers.end(),
                       [&](const auto& a) { return a == answers.front(); })
               ? "yes"
               : "no";
  }
  if (op == "first") return answers.front();
  throw UnknownOpError("unknown program op '" + op + "'");
}

std::map<std::string, std::string> run_program(const std::vector<ProgramStep>& program,
                                               std::map<std::string, std::string> answers) {
  for (const ProgramStep& step : program) {
    std::vector<std::string> children;
    for (const auto& c : step.children) {
      const auto it = answers.find(c);
      if (it == answers.end()) throw MissingGoldError("program child '" + c + "' has no answer");
      children.push_back(it->second);
    }
    answers[step.parent] = apply_op(step.op, children);
  }
  return answers;
}

namespace {

struct DraftNode {
  std::string id;
  std::size_t depth = 1;
  QuestionKind kind = QuestionKind::kOpen;
  std::string op;  // empty for leaves
  std::vector<std::size_t> children;
};

class TreeBuilder {
 public:
  TreeBuilder(const SyntheticConfig& config, std::string prefix, Rng& rng)
      : config_(config), prefix_(std::move(prefix)), rng_(rng) {}

  std::vector<DraftNode> build() {
    grow(1, std::nullopt);
    return std::move(nodes_);
  }

 private:
  std::size_t grow(std::size_t depth, std::optional<QuestionKind> required) {
    const std::size_t self = nodes_.size();
    nodes_.push_back({prefix_ + ".q" + padded(self, 2), depth, QuestionKind::kOpen, "", {}});
    const bool decompose =
        depth == 1 || (depth < config_.max_depth && rng_.bernoulli(config_.decompose_prob));
    std::vector<std::string> ops;
    for (const auto& op : config_.edge_types) {
      const QuestionKind kind = is_binary_op(op) ? QuestionKind::kBinary : QuestionKind::kOpen;
      if (!required || *required == kind) ops.push_back(op);
    }
    if (decompose && !ops.empty()) {
      const std::string op = ops[rng_.below(ops.size())];
      nodes_[self].op = op;
      nodes_[self].kind = is_binary_op(op) ? QuestionKind::kBinary : QuestionKind::kOpen;
      const std::size_t count = rng_.between(config_.subs_min, config_.subs_max);
      for (std::size_t i = 0; i < count; ++i) {
        std::optional<QuestionKind> child_kind;
        if (op == "and" || op == "or") child_kind = QuestionKind::kBinary;
        if (op == "equals" || (op == "first" && i == 0)) child_kind = QuestionKind::kOpen;
        const std::size_t child = grow(depth + 1, child_kind);
        nodes_[self].children.push_back(child);
      }
    } else {
      nodes_[self].kind = required ? *required : leaf_kind();
    }
    return self;
  }

  QuestionKind leaf_kind() {
    const bool binary = config_.has_binary();
    const bool open = !config_.open_answers().empty();
    if (binary && open) return rng_.bernoulli(0.5) ? QuestionKind::kBinary : QuestionKind::kOpen;
    return binary ? QuestionKind::kBinary : QuestionKind::kOpen;
  }

  const SyntheticConfig& config_;
  std::string prefix_;
  Rng& rng_;
  std::vector<DraftNode> nodes_;
};

std::string question_text(const DraftNode& node, std::size_t k) {
  const std::string n = std::to_string(k);
  if (node.op.empty()) {
    return node.kind == QuestionKind::kBinary ? "does event " + n + " happen in the video?"
                                              : "what color is object " + n + "?";
  }
  if (node.op == "and") return "do all of the events in question " + n + " happen?";
  if (node.op == "or") return "does any of the events in question " + n + " happen?";
  if (node.op == "equals") return "do the objects in question " + n + " share a color?";
  return "what color is the first object in question " + n + "?";
}

}  // namespace

SyntheticInstance generate_instance(const SyntheticConfig& config, std::size_t index) {
  config.validate();
  Rng rng(config.seed, index);
  const std::string prefix = "c" + padded(index, 5);
  const std::vector<DraftNode> drafts = TreeBuilder(config, prefix, rng).build();
  const std::vector<std::string> open = config.open_answers();

  // Leaf answers, then the program bottom-up.
  std::map<std::string, std::string> gold;
  for (const DraftNode& d : drafts) {
    if (!d.op.empty()) continue;
    gold[d.id] = d.kind == QuestionKind::kBinary ? (rng.bernoulli(0.5) ? "yes" : "no")
                                                 : open[rng.below(open.size())];
  }
  std::vector<ProgramStep> program;
  for (std::size_t i = drafts.size(); i-- > 0;) {
    const DraftNode& d = drafts[i];
    if (d.op.empty()) continue;
    ProgramStep step{d.id, d.op, {}};
    for (std::size_t c : d.children) step.children.push_back(drafts[c].id);
    program.push_back(std::move(step));
  }
  // Reverse creation order puts every child step before its parent.
  gold = run_program(program, std::move(gold));

  std::vector<QuestionNode> nodes;
  std::vector<QdgEdge> edges;
  for (std::size_t k = 0; k < drafts.size(); ++k) {
    const DraftNode& d = drafts[k];
    const QuestionRole role = k == 0              ? QuestionRole::kMain
                              : d.children.empty() ? QuestionRole::kLeaf
                                                   : QuestionRole::kIntermediate;
    nodes.push_back({d.id, question_text(d, k), d.kind, role, gold.at(d.id)});
    for (std::size_t c : d.children) edges.push_back({d.id, drafts[c].id, d.op});
  }
  Qdg graph =
      Qdg::build(prefix, "v" + padded(index, 5), config.edge_types, std::move(nodes), edges);

  const SignalMaps maps = signal_maps(config);
  std::map<std::string, Tensor> questions;
  std::map<std::string, std::vector<double>> relevance_signal;
  for (const DraftNode& d : drafts) {
    // The last coordinate flags the question-vector token.
    std::vector<double> u(config.h_q, 0.0);
    for (std::size_t i = 0; i + 1 < config.h_q; ++i) u[i] = rng.normal();
    normalize(u);
    Tensor tokens(Shape{kQuestionTokens, config.h_q});
    const std::size_t cat = category_row(config, d.kind, d.op);
    for (std::size_t i = 0; i < config.h_q; ++i) {
      tokens.at(0, i) = u[i];
      tokens.at(1, i) = maps.categories.at(cat, i);
    }
    tokens.at(0, config.h_q - 1) = 1.0;
    questions.emplace(d.id, std::move(tokens));
    std::vector<double> r(config.h_v, 0.0);
    for (std::size_t o = 0; o < config.h_v; ++o) {
      for (std::size_t i = 0; i < config.h_q; ++i) r[o] += maps.relevance.at(o, i) * u[i];
    }
    normalize(r);
    relevance_signal.emplace(d.id, std::move(r));
  }

  // Planted clip sets, disjoint while unused clips remain.
  std::map<std::string, std::vector<std::size_t>> planted;
  std::vector<std::size_t> unused(config.n_c);
  for (std::size_t c = 0; c < config.n_c; ++c) unused[c] = c;
  rng.shuffle(unused);
  for (const DraftNode& d : drafts) {
    const std::size_t size = rng.between(config.relevant_min, config.relevant_max);
    std::vector<std::size_t> clips;
    while (clips.size() < size) {
      if (unused.empty()) {
        for (std::size_t c = 0; c < config.n_c; ++c) {
          if (std::find(clips.begin(), clips.end(), c) == clips.end()) unused.push_back(c);
        }
        rng.shuffle(unused);
      }
      clips.push_back(unused.back());
      unused.pop_back();
    }
    std::sort(clips.begin(), clips.end());
    planted.emplace(d.id, std::move(clips));
  }

  VideoFeatures video{Tensor(Shape{config.n_c, config.n_f, config.n_o, config.h_v}),
                      Tensor(Shape{config.n_c, config.n_f, config.h_v}),
                      Tensor(Shape{config.n_c, config.h_v})};
  for (Tensor* t : {&video.objects, &video.appearance, &video.motion}) {
    for (double& x : t->data()) x = config.noise * rng.normal();
  }
  for (const DraftNode& d : drafts) {
    const double answer_weight = d.op.empty() ? 1.0 : config.parent_signal;
    const std::size_t a = config.answer_index(gold.at(d.id));
    std::vector<double> s(config.h_v);
    for (std::size_t i = 0; i < config.h_v; ++i) {
      s[i] = config.signal * (relevance_signal.at(d.id)[i] + answer_weight * maps.answers.at(a, i));
    }
    for (std::size_t c : planted.at(d.id)) {
      for (std::size_t i = 0; i < config.h_v; ++i) {
        video.motion.at(c, i) += s[i];
        for (std::size_t f = 0; f < config.n_f; ++f) {
          video.appearance[(c * config.n_f + f) * config.h_v + i] += s[i];
          for (std::size_t o = 0; o < config.n_o; ++o) {
            video.objects[((c * config.n_f + f) * config.n_o + o) * config.h_v + i] += s[i];
          }
        }
      }
    }
  }

  return SyntheticInstance{index,
                           std::move(video),
                           std::move(graph),
                           std::move(questions),
                           std::move(gold),
                           std::move(planted),
                           std::move(program)};
}

void split_ranges(std::size_t clusters, SplitRange& train, SplitRange& validation,
                  SplitRange& test) {
  const std::size_t n_train = clusters * 70 / 100;
  const std::size_t n_val = (clusters - n_train) / 2;
  train = {0, n_train};
  validation = {n_train, n_train + n_val};
  test = {n_train + n_val, clusters};
}

const std::vector<SyntheticInstance>& SyntheticDataset::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "validation") return validation;
  if (name == "test") return test;
  throw ConfigError("unknown split '" + name + "'");
}

nlohmann::ordered_json SyntheticDataset::manifest() const {
  nlohmann::ordered_json m;
  m["seed"] = config.seed;
  m["config_hash"] = config_hash(config);
  m["splits"]["train"] = {train_range.begin, train_range.end};
  m["splits"]["validation"] = {validation_range.begin, validation_range.end};
  m["splits"]["test"] = {test_range.begin, test_range.end};
  return m;
}

SyntheticDataset generate_dataset(const SyntheticConfig& config) {
  config.validate();
  SyntheticDataset d{config, {}, {}, {}, {}, {}, {}};
  split_ranges(config.clusters, d.train_range, d.validation_range, d.test_range);
  auto fill = [&](const SplitRange& r, std::vector<SyntheticInstance>& out) {
    out.reserve(r.size());
    for (std::size_t i = r.begin; i < r.end; ++i) out.push_back(generate_instance(config, i));
  };
  fill(d.train_range, d.train);
  fill(d.validation_range, d.validation);
  fill(d.test_range, d.test);
  return d;
}

namespace {

constexpr const char* kSplits[] = {"train", "validation", "test"};

}  // namespace

void write_dataset(const std::string& directory, const SyntheticDataset& dataset) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(directory) / "features", ec);
  if (ec) throw IoError("cannot create '" + directory + "': " + ec.message());

  nlohmann::ordered_json config;
  config["config"] = config_to_json(dataset.config);
  config["manifest"] = dataset.manifest();
  write_file((fs::path(directory) / "config.json").string(), config.dump(2) + "\n");

  std::string graphs, instances;
  std::map<std::string, std::string> gold;
  for (const char* name : kSplits) {
    std::map<std::string, Tensor> tensors;
    for (const SyntheticInstance& inst : dataset.split(name)) {
      graphs += serialize_qdg(inst.graph) + "\n";
      for (const auto& [id, answer] : inst.gold) gold[id] = answer;
      nlohmann::ordered_json meta;
      meta["index"] = inst.index;
      meta["split"] = name;
      meta["graph_id"] = inst.graph.graph_id();
      meta["planted"] = nlohmann::ordered_json::object();
      for (const auto& [id, clips] : inst.planted_relevance) meta["planted"][id] = clips;
      meta["program"] = nlohmann::ordered_json::array();
      for (const ProgramStep& s : inst.program) {
        meta["program"].push_back({{"parent", s.parent}, {"op", s.op}, {"children", s.children}});
      }
      instances += meta.dump() + "\n";
      const std::string& g = inst.graph.graph_id();
      tensors[g + ".objects"] = inst.video.objects;
      tensors[g + ".appearance"] = inst.video.appearance;
      tensors[g + ".motion"] = inst.video.motion;
      for (const auto& [id, q] : inst.question_features) tensors[id + ".question"] = q;
    }
    save_tensors((fs::path(directory) / "features" / name).string(), tensors, dataset.config.seed);
  }
  write_file((fs::path(directory) / "graphs.jsonl").string(), graphs);
  write_file((fs::path(directory) / "gold.jsonl").string(), answer_jsonl(gold));
  write_file((fs::path(directory) / "instances.jsonl").string(), instances);
}

SyntheticDataset read_dataset(const std::string& directory) {
  namespace fs = std::filesystem;
  const fs::path dir(directory);
  nlohmann::json config_doc;
  try {
    config_doc = nlohmann::json::parse(read_file((dir / "config.json").string()));
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError("malformed config.json: " + std::string(e.what()));
  }
  if (!config_doc.contains("config")) throw SchemaError("config.json lacks 'config'");
  SyntheticDataset d{config_from_json(config_doc.at("config")), {}, {}, {}, {}, {}, {}};
  split_ranges(d.config.clusters, d.train_range, d.validation_range, d.test_range);

  const std::vector<Qdg> graphs = read_qdg_jsonl((dir / "graphs.jsonl").string());
  const std::vector<std::string> lines = split_lines(read_file((dir / "instances.jsonl").string()));
  if (lines.size() != graphs.size()) {
    throw SchemaError("instances.jsonl has " + std::to_string(lines.size()) + " rows for " +
                      std::to_string(graphs.size()) + " graphs");
  }
  std::map<std::string, std::map<std::string, Tensor>> features;
  for (const char* name : kSplits) {
    features[name] = load_tensors((dir / "features" / name).string());
  }
  auto tensor = [&](const std::string& split, const std::string& key) {
    const auto& m = features.at(split);
    const auto it = m.find(key);
    if (it == m.end()) throw SchemaError("features/" + split + " lacks tensor '" + key + "'");
    return it->second;
  };
  for (std::size_t row = 0; row < lines.size(); ++row) {
    nlohmann::json meta;
    try {
      meta = nlohmann::json::parse(lines[row]);
    } catch (const nlohmann::json::parse_error& e) {
      throw SchemaError("instances.jsonl line " + std::to_string(row + 1) + ": " + e.what());
    }
    const Qdg& graph = graphs[row];
    const std::string split = meta.at("split").get<std::string>();
    const std::string& g = graph.graph_id();
    SyntheticInstance inst{meta.at("index").get<std::size_t>(),
                           {tensor(split, g + ".objects"), tensor(split, g + ".appearance"),
                            tensor(split, g + ".motion")},
                           graph,
                           {},
                           {},
                           {},
                           {}};
    for (const QuestionNode& n : graph.nodes()) {
      inst.question_features.emplace(n.id, tensor(split, n.id + ".question"));
      if (!n.gold_answer) throw MissingGoldError("node '" + n.id + "' has no gold answer");
      inst.gold[n.id] = *n.gold_answer;
    }
    for (const auto& [id, clips] : meta.at("planted").items()) {
      inst.planted_relevance[id] = clips.get<std::vector<std::size_t>>();
    }
    for (const auto& s : meta.at("program")) {
      inst.program.push_back({s.at("parent").get<std::string>(), s.at("op").get<std::string>(),
                              s.at("children").get<std::vector<std::string>>()});
    }
    std::vector<SyntheticInstance>& out = split == "train"        ? d.train
                                          : split == "validation" ? d.validation
                                                                  : d.test;
    out.push_back(std::move(inst));
  }
  return d;
}

}  // namespace va3
