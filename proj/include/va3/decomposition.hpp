#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "va3/error.hpp"
#include "va3/qdg.hpp"

namespace va3 {

VA3_DEFINE_ERROR(SelectionParseError);
VA3_DEFINE_ERROR(IndexOutOfRangeError);
VA3_DEFINE_ERROR(DecompositionParseError);
VA3_DEFINE_ERROR(TransportError);

struct ClientConfig {
  std::string base_url;  // e.g. http://127.0.0.1:8080/complete
  std::string model = "default";
  std::string api_key;
  double timeout_seconds = 30.0;
  std::size_t retry_limit = 3;  // attempts per selection or decomposition
  std::size_t max_tokens = 1024;
};

// Prompt text in, completion text out. Implementations must be safe to call
// from several threads at once.
class CompletionClient {
 public:
  explicit CompletionClient(ClientConfig config) : config_(std::move(config)) {}
  virtual ~CompletionClient() = default;

  virtual std::string complete(const std::string& prompt) const = 0;
  const ClientConfig& config() const { return config_; }

 private:
  ClientConfig config_;
};

/// Fixture-driven client for tests and offline runs.
///
/// The fixture is `{"rules": [{"match": [...], "completions": [...]}]}`. The
/// first rule whose `match` strings all occur in the prompt answers it.
/// `completions[n]` answers the n-th retry of a prompt (retries are counted
/// from the failure notes appended to it), the last entry repeating. A
/// prompt no rule matches raises TransportError.
class StubClient : public CompletionClient {
 public:
  struct Rule {
    std::vector<std::string> match;
    std::vector<std::string> completions;
  };

  explicit StubClient(std::vector<Rule> rules, ClientConfig config = {});
  static StubClient from_json(const nlohmann::json& fixture, ClientConfig config = {});
  static StubClient from_file(const std::string& path, ClientConfig config = {});

  std::string complete(const std::string& prompt) const override;

 private:
  std::vector<Rule> rules_;
};

// POSTs {model, prompt, max_tokens} as JSON and reads {text}. Plain http only.
class HttpClient : public CompletionClient {
 public:
  explicit HttpClient(ClientConfig config);
  // base_url from VA3_COMPLETION_URL, api_key from VA3_COMPLETION_KEY,
  // model from VA3_COMPLETION_MODEL when set. ConfigError without a URL.
  static HttpClient from_environment(ClientConfig defaults = {});

  std::string complete(const std::string& prompt) const override;

 private:
  std::string origin_;  // scheme://host:port
  std::string path_;
};

struct Exemplar {
  std::string question;
  Qdg graph;
};

struct ExampleBank {
  std::map<std::string, std::vector<Exemplar>> groups;  // main-question type -> exemplars

  // SchemaError on empty groups or invalid graphs.
  static ExampleBank from_json(const nlohmann::json& doc);
  static ExampleBank from_file(const std::string& path);
  void validate() const;
  // Groups in label order, exemplars in file order; index 0 is candidate 1.
  std::vector<const Exemplar*> candidates() const;
};

// Appended to a prompt before each retry.
inline constexpr const char* kRetryNote = "\nPrevious answer rejected: ";

std::string selection_prompt(const std::string& question, const ExampleBank& bank,
                             std::size_t k);
std::string decomposition_prompt(const std::string& question,
                                 const std::vector<const Exemplar*>& exemplars);

// Parses "i, j, ..." into k distinct 1-based indices within [1, candidates].
// SelectionParseError on malformed text or a wrong count; IndexOutOfRangeError
// on an index outside the range or a repeated index.
std::vector<std::size_t> parse_selection(const std::string& completion, std::size_t k,
                                         std::size_t candidates);

std::vector<const Exemplar*> select_examples(const std::string& question,
                                             const ExampleBank& bank, std::size_t k,
                                             const CompletionClient& client);

struct DecompositionResult {
  std::string question;
  std::vector<std::string> sub_questions;  // children before parents
  Qdg graph;
  std::string raw_completion;
  std::size_t attempts = 0;
};

// Parses the JSON object in a completion into a graph with the given ids.
// The main node's text must match `question` up to case and surrounding
// space. DecompositionParseError (with the underlying error kind) otherwise.
Qdg parse_decomposition(const std::string& completion, const std::string& question,
                        const std::string& graph_id, const std::string& video_id);

DecompositionResult decompose_question(const std::string& question,
                                       const std::vector<const Exemplar*>& exemplars,
                                       const CompletionClient& client,
                                       const std::string& graph_id = "q00000",
                                       const std::string& video_id = "unknown");

struct QuestionInput {
  std::string text;
  std::string video_id = "unknown";
};

// One question per non-empty line, optionally "video_id<TAB>question".
std::vector<QuestionInput> parse_questions(const std::string& text);

struct DecompositionFailure {
  std::size_t index = 0;
  std::string question;
  std::string error_kind;
  std::string message;
  bool operator==(const DecompositionFailure&) const = default;
};

struct ExtendResult {
  std::vector<Qdg> graphs;  // input order; graph ids "q<index>"
  std::vector<DecompositionFailure> failures;

  std::string graphs_jsonl() const;
  nlohmann::ordered_json failure_report() const;
};

// Questions run independently on up to `concurrency` threads; output order
// is input order.
ExtendResult extend_dataset(const std::vector<QuestionInput>& questions, const ExampleBank& bank,
                            std::size_t k, const CompletionClient& client,
                            std::size_t concurrency = 1);

}  // namespace va3
