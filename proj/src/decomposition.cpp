#include "va3/decomposition.hpp"

#include <httplib.h>

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <set>
#include <sstream>
#include <thread>

#include "va3/text.hpp"

namespace va3 {

namespace {

std::size_t count_occurrences(const std::string& text, const std::string& needle) {
  std::size_t count = 0;
  for (std::size_t pos = text.find(needle); pos != std::string::npos;
       pos = text.find(needle, pos + needle.size())) {
    ++count;
  }
  return count;
}

std::string graph_id_for(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "q%05zu", index);
  return buf;
}

nlohmann::json parse_json_file(const std::string& path, const char* what) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(std::string("malformed ") + what + " '" + path + "': " + e.what());
  }
}

}  // namespace

StubClient::StubClient(std::vector<Rule> rules, ClientConfig config)
    : CompletionClient(std::move(config)), rules_(std::move(rules)) {
  for (const Rule& r : rules_) {
    if (r.completions.empty()) throw SchemaError("stub rule has no completions");
  }
}

StubClient StubClient::from_json(const nlohmann::json& fixture, ClientConfig config) {
  if (!fixture.is_object() || !fixture.contains("rules") || !fixture.at("rules").is_array()) {
    throw SchemaError("stub fixture needs a 'rules' array");
  }
  std::vector<Rule> rules;
  try {
    for (const auto& r : fixture.at("rules")) {
      rules.push_back({r.at("match").get<std::vector<std::string>>(),
                       r.at("completions").get<std::vector<std::string>>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("bad stub rule: ") + e.what());
  }
  return StubClient(std::move(rules), std::move(config));
}

StubClient StubClient::from_file(const std::string& path, ClientConfig config) {
  return from_json(parse_json_file(path, "stub fixture"), std::move(config));
}

std::string StubClient::complete(const std::string& prompt) const {
  for (const Rule& rule : rules_) {
    bool all = true;
    for (const std::string& m : rule.match) all = all && prompt.find(m) != std::string::npos;
    if (!all) continue;
    const std::size_t retry = count_occurrences(prompt, kRetryNote);
    return rule.completions[std::min(retry, rule.completions.size() - 1)];
  }
  throw TransportError("stub fixture has no rule for the prompt");
}

HttpClient::HttpClient(ClientConfig config) : CompletionClient(std::move(config)) {
  const std::string& url = this->config().base_url;
  const std::string scheme = "http://";
  if (url.rfind("https://", 0) == 0) throw ConfigError("https completion endpoints are not supported");
  if (url.rfind(scheme, 0) != 0) throw ConfigError("completion URL must start with http://: " + url);
  const std::size_t slash = url.find('/', scheme.size());
  origin_ = url.substr(0, slash);
  path_ = slash == std::string::npos ? "/" : url.substr(slash);
  if (origin_.size() == scheme.size()) throw ConfigError("completion URL has no host: " + url);
}

HttpClient HttpClient::from_environment(ClientConfig defaults) {
  const char* url = std::getenv("VA3_COMPLETION_URL");
  if (!url || !*url) throw ConfigError("VA3_COMPLETION_URL is not set");
  defaults.base_url = url;
  if (const char* key = std::getenv("VA3_COMPLETION_KEY")) defaults.api_key = key;
  if (const char* model = std::getenv("VA3_COMPLETION_MODEL"); model && *model) {
    defaults.model = model;
  }
  return HttpClient(std::move(defaults));
}

std::string HttpClient::complete(const std::string& prompt) const {
  httplib::Client http(origin_);
  const auto seconds = static_cast<time_t>(config().timeout_seconds);
  const auto micros =
      static_cast<time_t>((config().timeout_seconds - static_cast<double>(seconds)) * 1e6);
  http.set_connection_timeout(seconds, micros);
  http.set_read_timeout(seconds, micros);
  httplib::Headers headers;
  if (!config().api_key.empty()) headers.emplace("Authorization", "Bearer " + config().api_key);
  const nlohmann::json body = {
      {"model", config().model}, {"prompt", prompt}, {"max_tokens", config().max_tokens}};
  const auto res = http.Post(path_, headers, body.dump(), "application/json");
  if (!res) throw TransportError("request to " + origin_ + " failed: " + httplib::to_string(res.error()));
  if (res->status != 200) {
    throw TransportError("completion endpoint returned HTTP " + std::to_string(res->status));
  }
  try {
    return nlohmann::json::parse(res->body).at("text").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw TransportError(std::string("completion response lacks a 'text' string: ") + e.what());
  }
}

ExampleBank ExampleBank::from_json(const nlohmann::json& doc) {
  if (!doc.is_object() || !doc.contains("groups") || !doc.at("groups").is_object()) {
    throw SchemaError("example bank needs a 'groups' object");
  }
  ExampleBank bank;
  for (const auto& [label, items] : doc.at("groups").items()) {
    if (!items.is_array()) throw SchemaError("bank group '" + label + "' must be an array");
    auto& group = bank.groups[label];
    for (const auto& item : items) {
      if (!item.is_object() || !item.contains("question") || !item.at("question").is_string() ||
          !item.contains("graph")) {
        throw SchemaError("bank group '" + label + "' has an entry without question and graph");
      }
      group.push_back({item.at("question").get<std::string>(), qdg_from_json(item.at("graph"))});
    }
  }
  bank.validate();
  return bank;
}

ExampleBank ExampleBank::from_file(const std::string& path) {
  return from_json(parse_json_file(path, "example bank"));
}

void ExampleBank::validate() const {
  if (groups.empty()) throw SchemaError("example bank has no groups");
  for (const auto& [label, group] : groups) {
    if (group.empty()) throw SchemaError("bank group '" + label + "' is empty");
  }
}

std::vector<const Exemplar*> ExampleBank::candidates() const {
  std::vector<const Exemplar*> out;
  for (const auto& [label, group] : groups) {
    for (const Exemplar& e : group) out.push_back(&e);
  }
  return out;
}

std::string selection_prompt(const std::string& question, const ExampleBank& bank,
                             std::size_t k) {
  std::ostringstream out;
  out << "Pick the " << k << " candidate questions most similar in structure to the target "
      << "question.\nReply with exactly " << k
      << " distinct candidate numbers separated by commas, nothing else.\n\nCandidates:\n";
  const auto candidates = bank.candidates();
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    out << i + 1 << ". " << candidates[i]->question << "\n";
  }
  out << "\nTarget question: " << question << "\nSelection:";
  return out.str();
}

std::string decomposition_prompt(const std::string& question,
                                 const std::vector<const Exemplar*>& exemplars) {
  std::ostringstream out;
  out << "Decompose the target question into a question decomposition graph.\n"
      << "Reply with one JSON object {\"edge_types\": [...], \"nodes\": [...], \"edges\": [...]}.\n"
      << "Each node is {\"id\", \"text\", \"kind\": \"binary\"|\"open\", "
      << "\"role\": \"main\"|\"intermediate\"|\"leaf\", \"answer\": null}.\n"
      << "Each edge is {\"parent\", \"child\", \"op\"} and points from a question to a "
      << "sub-question it is composed from.\n"
      << "The graph must be acyclic with the target question as its only main node.\n";
  for (const Exemplar* e : exemplars) {
    out << "\nQuestion: " << e->question << "\nDecomposition: " << serialize_qdg(e->graph)
        << "\n";
  }
  out << "\nTarget question: " << question << "\nDecomposition:";
  return out.str();
}

std::vector<std::size_t> parse_selection(const std::string& completion, std::size_t k,
                                         std::size_t candidates) {
  std::string text(trim(completion));
  if (text.size() >= 2 && text.front() == '[' && text.back() == ']') {
    text = text.substr(1, text.size() - 2);
  }
  for (char& c : text) {
    if (c == ',') c = ' ';
  }
  std::istringstream tokens(text);
  std::vector<std::size_t> out;
  std::set<std::size_t> seen;
  std::string token;
  while (tokens >> token) {
    if (token.find_first_not_of("0123456789") != std::string::npos || token.size() > 9) {
      throw SelectionParseError("selection token '" + token + "' is not a candidate number");
    }
    const std::size_t index = std::stoul(token);
    if (index < 1 || index > candidates) {
      throw IndexOutOfRangeError("candidate " + token + " outside [1, " +
                                 std::to_string(candidates) + "]");
    }
    if (!seen.insert(index).second) {
      throw IndexOutOfRangeError("candidate " + token + " selected twice");
    }
    out.push_back(index);
  }
  if (out.size() != k) {
    throw SelectionParseError("expected " + std::to_string(k) + " candidate numbers, got " +
                              std::to_string(out.size()));
  }
  return out;
}

namespace {

std::string call(const CompletionClient& client, const std::string& prompt, std::size_t attempt) {
  try {
    return client.complete(prompt);
  } catch (const TransportError& e) {
    throw TransportError(std::string(e.what()) + " (attempt " + std::to_string(attempt) + ")");
  }
}

}  // namespace

std::vector<const Exemplar*> select_examples(const std::string& question,
                                             const ExampleBank& bank, std::size_t k,
                                             const CompletionClient& client) {
  bank.validate();
  const auto candidates = bank.candidates();
  if (k == 0 || k > candidates.size()) {
    throw ConfigError("k = " + std::to_string(k) + " but the bank has " +
                      std::to_string(candidates.size()) + " exemplars");
  }
  const std::size_t limit = std::max<std::size_t>(1, client.config().retry_limit);
  std::string prompt = selection_prompt(question, bank, k);
  for (std::size_t attempt = 1;; ++attempt) {
    const std::string completion = call(client, prompt, attempt);
    try {
      std::vector<const Exemplar*> out;
      for (std::size_t index : parse_selection(completion, k, candidates.size())) {
        out.push_back(candidates[index - 1]);
      }
      return out;
    } catch (const Error& e) {
      if (attempt >= limit) {
        const std::string message = std::string(e.what()) + " after " + std::to_string(attempt) +
                                    " attempts";
        if (e.kind() == "IndexOutOfRangeError") throw IndexOutOfRangeError(message);
        throw SelectionParseError(message);
      }
      prompt += kRetryNote + std::string(e.what()) + "\nSelection:";
    }
  }
}

Qdg parse_decomposition(const std::string& completion, const std::string& question,
                        const std::string& graph_id, const std::string& video_id) {
  const std::size_t open = completion.find('{');
  const std::size_t close = completion.rfind('}');
  if (open == std::string::npos || close == std::string::npos || close < open) {
    throw DecompositionParseError("completion contains no JSON object");
  }
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(completion.substr(open, close - open + 1));
  } catch (const nlohmann::json::parse_error& e) {
    throw DecompositionParseError(std::string("malformed JSON: ") + e.what());
  }
  if (!doc.is_object()) throw DecompositionParseError("decomposition must be a JSON object");
  doc["graph_id"] = graph_id;
  doc["video_id"] = video_id;
  if (!doc.contains("edge_types") && doc.contains("edges") && doc.at("edges").is_array()) {
    std::set<std::string> ops;
    for (const auto& e : doc.at("edges")) {
      if (e.is_object() && e.contains("op") && e.at("op").is_string()) {
        ops.insert(e.at("op").get<std::string>());
      }
    }
    doc["edge_types"] = ops;
  }
  try {
    Qdg graph = qdg_from_json(doc);
    if (normalize_answer(graph.main().text) != normalize_answer(question)) {
      throw DecompositionParseError("main node text '" + graph.main().text +
                                    "' differs from the target question");
    }
    return graph;
  } catch (const DecompositionParseError&) {
    throw;
  } catch (const Error& e) {
    throw DecompositionParseError(e.kind() + ": " + e.what());
  }
}

DecompositionResult decompose_question(const std::string& question,
                                       const std::vector<const Exemplar*>& exemplars,
                                       const CompletionClient& client,
                                       const std::string& graph_id,
                                       const std::string& video_id) {
  if (exemplars.empty()) throw ConfigError("decomposition needs at least one exemplar");
  const std::size_t limit = std::max<std::size_t>(1, client.config().retry_limit);
  std::string prompt = decomposition_prompt(question, exemplars);
  for (std::size_t attempt = 1;; ++attempt) {
    std::string completion = call(client, prompt, attempt);
    try {
      Qdg graph = parse_decomposition(completion, question, graph_id, video_id);
      std::vector<std::string> subs;
      for (const std::string& id : topological_order(graph)) {
        if (id != graph.main().id) subs.push_back(graph.node(id).text);
      }
      return {question, std::move(subs), std::move(graph), std::move(completion), attempt};
    } catch (const DecompositionParseError& e) {
      if (attempt >= limit) {
        throw DecompositionParseError(std::string(e.what()) + " after " +
                                      std::to_string(attempt) + " attempts");
      }
      prompt += kRetryNote + std::string(e.what()) + "\nDecomposition:";
    }
  }
}

std::vector<QuestionInput> parse_questions(const std::string& text) {
  std::vector<QuestionInput> out;
  for (const std::string& line : split_lines(text)) {
    const std::string_view trimmed = trim(line);
    if (trimmed.empty()) continue;
    const std::size_t tab = trimmed.find('\t');
    if (tab == std::string_view::npos) {
      out.push_back({std::string(trimmed)});
    } else {
      out.push_back({std::string(trim(trimmed.substr(tab + 1))),
                     std::string(trim(trimmed.substr(0, tab)))});
    }
  }
  return out;
}

std::string ExtendResult::graphs_jsonl() const {
  std::string out;
  for (const Qdg& g : graphs) out += serialize_qdg(g) + "\n";
  return out;
}

nlohmann::ordered_json ExtendResult::failure_report() const {
  nlohmann::ordered_json report;
  report["decomposed"] = graphs.size();
  report["failed"] = failures.size();
  report["failures"] = nlohmann::ordered_json::array();
  for (const DecompositionFailure& f : failures) {
    report["failures"].push_back(
        {{"index", f.index}, {"question", f.question}, {"error", f.error_kind}, {"message", f.message}});
  }
  return report;
}

ExtendResult extend_dataset(const std::vector<QuestionInput>& questions, const ExampleBank& bank,
                            std::size_t k, const CompletionClient& client,
                            std::size_t concurrency) {
  bank.validate();
  struct Slot {
    std::optional<Qdg> graph;
    std::optional<DecompositionFailure> failure;
  };
  std::vector<Slot> slots(questions.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < questions.size(); i = next++) {
      const QuestionInput& q = questions[i];
      try {
        const auto exemplars = select_examples(q.text, bank, k, client);
        slots[i].graph = decompose_question(q.text, exemplars, client, graph_id_for(i), q.video_id).graph;
      } catch (const Error& e) {
        slots[i].failure = DecompositionFailure{i, q.text, e.kind(), e.what()};
      } catch (const std::exception& e) {
        slots[i].failure = DecompositionFailure{i, q.text, "Error", e.what()};
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(concurrency, 1, std::max<std::size_t>(1, questions.size()));
  if (threads == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  ExtendResult result;
  for (Slot& s : slots) {
    if (s.graph) result.graphs.push_back(std::move(*s.graph));
    if (s.failure) result.failures.push_back(std::move(*s.failure));
  }
  return result;
}

}  // namespace va3
