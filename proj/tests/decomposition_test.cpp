#include "va3/decomposition.hpp"

#include <gtest/gtest.h>
#include <httplib.h>

#include <atomic>
#include <thread>

#include "va3/text.hpp"

namespace va3 {
namespace {

const std::string kData = VA3_DATA_DIR "/decompose";

// Replays a fixed completion and counts calls.
class CountingClient : public CompletionClient {
 public:
  CountingClient(std::vector<std::string> replies, ClientConfig config = {})
      : CompletionClient(std::move(config)), replies_(std::move(replies)) {}

  std::string complete(const std::string& prompt) const override {
    prompts.push_back(prompt);
    return replies_[std::min(prompts.size() - 1, replies_.size() - 1)];
  }

  mutable std::vector<std::string> prompts;

 private:
  std::vector<std::string> replies_;
};

class FailingClient : public CompletionClient {
 public:
  FailingClient() : CompletionClient({}) {}
  std::string complete(const std::string&) const override { throw TransportError("refused"); }
};

ExampleBank demo_bank() { return ExampleBank::from_file(kData + "/bank.json"); }

std::string three_node(const std::string& main) {
  nlohmann::json doc = {
      {"nodes",
       {{{"id", "m"}, {"text", main}, {"kind", "binary"}, {"role", "main"}, {"answer", nullptr}},
        {{"id", "a"}, {"text", "sub a"}, {"kind", "binary"}, {"role", "leaf"}, {"answer", nullptr}},
        {{"id", "b"}, {"text", "sub b"}, {"kind", "binary"}, {"role", "leaf"}, {"answer", nullptr}}}},
      {"edges", {{{"parent", "m"}, {"child", "a"}, {"op", "and"}}, {{"parent", "m"}, {"child", "b"}, {"op", "and"}}}}};
  return doc.dump();
}

std::string cyclic(const std::string& main) {
  nlohmann::json doc = nlohmann::json::parse(three_node(main));
  doc["edges"].push_back({{"parent", "a"}, {"child", "b"}, {"op", "and"}});
  doc["edges"].push_back({{"parent", "b"}, {"child", "a"}, {"op", "and"}});
  return doc.dump();
}

TEST(ExampleBankTest, LoadsDemoBank) {
  const ExampleBank bank = demo_bank();
  EXPECT_EQ(bank.groups.size(), 3u);
  EXPECT_EQ(bank.candidates().size(), 4u);
  EXPECT_EQ(bank.candidates().front()->question, bank.groups.begin()->second.front().question);
}

TEST(ExampleBankTest, RejectsEmptyGroupsAndBadGraphs) {
  EXPECT_THROW(ExampleBank::from_json(nlohmann::json::parse(R"({"groups": {}})")), SchemaError);
  EXPECT_THROW(ExampleBank::from_json(nlohmann::json::parse(R"({"groups": {"a": []}})")),
               SchemaError);
  EXPECT_THROW(ExampleBank::from_json(nlohmann::json::parse(
                   R"({"groups": {"a": [{"question": "q", "graph": {"graph_id": "g"}}]}})")),
               SchemaError);
}

TEST(ParseSelectionTest, AcceptsCommaLists) {
  EXPECT_EQ(parse_selection("1, 3", 2, 4), (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(parse_selection(" [4,2] ", 2, 4), (std::vector<std::size_t>{4, 2}));
  EXPECT_THROW(parse_selection("1, 1", 2, 4), IndexOutOfRangeError);
  EXPECT_THROW(parse_selection("0, 1", 2, 4), IndexOutOfRangeError);
  EXPECT_THROW(parse_selection("5", 1, 4), IndexOutOfRangeError);
  EXPECT_THROW(parse_selection("1", 2, 4), SelectionParseError);
  EXPECT_THROW(parse_selection("one, two", 2, 4), SelectionParseError);
}

TEST(SelectExamplesTest, ReturnsExemplarsInCompletionOrder) {
  const ExampleBank bank = demo_bank();
  const CountingClient client({"3, 1"});
  const auto picked = select_examples("Is it red?", bank, 2, client);
  ASSERT_EQ(picked.size(), 2u);
  EXPECT_EQ(picked[0], bank.candidates()[2]);
  EXPECT_EQ(picked[1], bank.candidates()[0]);
  EXPECT_EQ(client.prompts.size(), 1u);
}

TEST(SelectExamplesTest, DuplicatesAreRetriedThenSurfaced) {
  const CountingClient client({"1, 1"});
  EXPECT_THROW(select_examples("Is it red?", demo_bank(), 2, client), IndexOutOfRangeError);
  ASSERT_EQ(client.prompts.size(), 3u);
  EXPECT_NE(client.prompts[1].find(kRetryNote), std::string::npos);
}

TEST(SelectExamplesTest, RecoversOnRetry) {
  const CountingClient client({"nope", "2, 4"});
  const ExampleBank bank = demo_bank();
  const auto picked = select_examples("Is it red?", bank, 2, client);
  EXPECT_EQ(picked[1], bank.candidates()[3]);
  EXPECT_EQ(client.prompts.size(), 2u);
}

TEST(SelectExamplesTest, KBeyondBankIsRejected) {
  const CountingClient client({"1"});
  EXPECT_THROW(select_examples("q", demo_bank(), 5, client), ConfigError);
  EXPECT_THROW(select_examples("q", demo_bank(), 0, client), ConfigError);
}

TEST(SelectionPromptTest, ListsTargetAndEveryCandidateOnce) {
  const ExampleBank bank = demo_bank();
  const std::string target = "Did the cat jump onto the table?";
  const std::string prompt = selection_prompt(target, bank, 2);
  EXPECT_NE(prompt.find("Target question: " + target), std::string::npos);
  for (std::size_t i = 0; i < bank.candidates().size(); ++i) {
    const std::string line = std::to_string(i + 1) + ". " + bank.candidates()[i]->question + "\n";
    const std::size_t first = prompt.find(line);
    ASSERT_NE(first, std::string::npos) << line;
    EXPECT_EQ(prompt.find(bank.candidates()[i]->question, first + line.size()), std::string::npos);
  }
  EXPECT_EQ(prompt, selection_prompt(target, demo_bank(), 2));
}

TEST(DecomposeQuestionTest, ValidCompletionTakesOneAttempt) {
  const ExampleBank bank = demo_bank();
  const CountingClient client({three_node("Is it red and big?")});
  const auto r = decompose_question("Is it red and big?", bank.candidates(), client, "g1", "v1");
  EXPECT_EQ(r.attempts, 1u);
  EXPECT_EQ(r.graph.nodes().size(), 3u);
  EXPECT_EQ(r.graph.graph_id(), "g1");
  EXPECT_EQ(r.graph.video_id(), "v1");
  EXPECT_EQ(r.graph.edge_types(), (std::vector<std::string>{"and"}));
  EXPECT_EQ(r.sub_questions, (std::vector<std::string>{"sub a", "sub b"}));
  EXPECT_EQ(r.raw_completion, three_node("Is it red and big?"));
}

TEST(DecomposeQuestionTest, CyclicThenValidRetriesOnce) {
  const ExampleBank bank = demo_bank();
  const CountingClient client({cyclic("Is it red and big?"), three_node("Is it red and big?")});
  const auto r = decompose_question("Is it red and big?", bank.candidates(), client);
  EXPECT_EQ(r.attempts, 2u);
  ASSERT_EQ(client.prompts.size(), 2u);
  EXPECT_NE(client.prompts[1].find("CycleError"), std::string::npos);
  EXPECT_EQ(client.prompts[1].rfind(client.prompts[0], 0), 0u);
}

TEST(DecomposeQuestionTest, PersistentFailureRaisesAfterLimit) {
  const CountingClient client({"not json"});
  EXPECT_THROW(decompose_question("q", demo_bank().candidates(), client), DecompositionParseError);
  EXPECT_EQ(client.prompts.size(), 3u);
}

TEST(DecomposeQuestionTest, MainTextMustMatchQuestion) {
  EXPECT_THROW(parse_decomposition(three_node("Other question"), "Is it red?", "g", "v"),
               DecompositionParseError);
  EXPECT_NO_THROW(parse_decomposition("Sure:\n" + three_node(" is it RED? "), "Is it red?", "g", "v"));
}

TEST(DecomposeQuestionTest, TransportErrorsCarryAttempt) {
  const FailingClient client;
  try {
    decompose_question("q", demo_bank().candidates(), client);
    FAIL();
  } catch (const TransportError& e) {
    EXPECT_NE(std::string(e.what()).find("attempt 1"), std::string::npos);
  }
}

TEST(DecomposeQuestionTest, PromptIsDeterministic) {
  const ExampleBank a = demo_bank(), b = demo_bank();
  EXPECT_EQ(decomposition_prompt("Is it red?", a.candidates()),
            decomposition_prompt("Is it red?", b.candidates()));
  const std::string prompt = decomposition_prompt("Is it red?", a.candidates());
  EXPECT_NE(prompt.find(serialize_qdg(a.candidates()[0]->graph)), std::string::npos);
  EXPECT_TRUE(prompt.ends_with("\nTarget question: Is it red?\nDecomposition:"));
}

TEST(StubClientTest, RetryIndexFollowsPromptNotes) {
  const StubClient stub({{{"alpha"}, {"first", "second"}}});
  EXPECT_EQ(stub.complete("alpha"), "first");
  EXPECT_EQ(stub.complete(std::string("alpha") + kRetryNote + "x"), "second");
  EXPECT_EQ(stub.complete(std::string("alpha") + kRetryNote + kRetryNote), "second");
  EXPECT_THROW(stub.complete("beta"), TransportError);
}

TEST(ExtendDatasetTest, DemoFixtureYieldsTwoGraphsAndOneFailure) {
  const ExampleBank bank = demo_bank();
  const StubClient stub = StubClient::from_file(kData + "/stub.json");
  const auto questions = parse_questions(read_file(kData + "/questions.txt"));
  ASSERT_EQ(questions.size(), 3u);
  const ExtendResult r = extend_dataset(questions, bank, 2, stub);
  ASSERT_EQ(r.graphs.size(), 2u);
  ASSERT_EQ(r.failures.size(), 1u);
  EXPECT_EQ(r.failures[0].index, 2u);
  EXPECT_EQ(r.failures[0].error_kind, "IndexOutOfRangeError");
  EXPECT_EQ(r.graphs[0].graph_id(), "q00000");
  EXPECT_EQ(r.graphs[1].graph_id(), "q00001");
  EXPECT_EQ(r.graphs[1].video_id(), "video01");

  const std::vector<Qdg> reparsed = parse_qdg_jsonl(r.graphs_jsonl());
  EXPECT_EQ(reparsed, r.graphs);
  const ExtendResult again = extend_dataset(questions, bank, 2, stub);
  EXPECT_EQ(again.graphs_jsonl(), r.graphs_jsonl());
  EXPECT_EQ(again.failure_report().dump(), r.failure_report().dump());
}

TEST(ExtendDatasetTest, ConcurrencyKeepsInputOrder) {
  const ExampleBank bank = demo_bank();
  const StubClient stub = StubClient::from_file(kData + "/stub.json");
  const auto base = parse_questions(read_file(kData + "/questions.txt"));
  std::vector<QuestionInput> questions;
  for (int i = 0; i < 4; ++i) questions.insert(questions.end(), base.begin(), base.end());
  const ExtendResult serial = extend_dataset(questions, bank, 2, stub, 1);
  const ExtendResult parallel = extend_dataset(questions, bank, 2, stub, 4);
  EXPECT_EQ(parallel.graphs_jsonl(), serial.graphs_jsonl());
  EXPECT_EQ(parallel.failures, serial.failures);
  EXPECT_EQ(serial.graphs.size(), 8u);
}

TEST(HttpClientTest, PostsModelPromptAndTokens) {
  httplib::Server server;
  std::string seen_body, seen_auth;
  server.Post("/complete", [&](const httplib::Request& req, httplib::Response& res) {
    seen_body = req.body;
    seen_auth = req.get_header_value("Authorization");
    res.set_content(R"({"text": "1, 2"})", "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::thread runner([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  ClientConfig config;
  config.base_url = "http://127.0.0.1:" + std::to_string(port) + "/complete";
  config.model = "demo-model";
  config.api_key = "secret";
  config.max_tokens = 64;
  const HttpClient client(config);
  EXPECT_EQ(client.complete("hello"), "1, 2");
  server.stop();
  runner.join();

  const auto body = nlohmann::json::parse(seen_body);
  EXPECT_EQ(body.at("model"), "demo-model");
  EXPECT_EQ(body.at("prompt"), "hello");
  EXPECT_EQ(body.at("max_tokens"), 64);
  EXPECT_EQ(seen_auth, "Bearer secret");
}

TEST(HttpClientTest, ErrorsAreTransportErrors) {
  httplib::Server server;
  server.Post("/bad", [](const httplib::Request&, httplib::Response& res) { res.status = 500; });
  server.Post("/shape", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"choices": []})", "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread runner([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  const std::string origin = "http://127.0.0.1:" + std::to_string(port);
  ClientConfig config;
  config.base_url = origin + "/bad";
  EXPECT_THROW(HttpClient(config).complete("x"), TransportError);
  config.base_url = origin + "/shape";
  EXPECT_THROW(HttpClient(config).complete("x"), TransportError);
  server.stop();
  runner.join();
}

TEST(HttpClientTest, RejectsUnsupportedUrls) {
  ClientConfig config;
  config.base_url = "https://example.com/v1";
  EXPECT_THROW(HttpClient{config}, ConfigError);
  config.base_url = "example.com";
  EXPECT_THROW(HttpClient{config}, ConfigError);
}

}  // namespace
}  // namespace va3
