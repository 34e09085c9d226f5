#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>

#include "doctest.h"
#include "docqa/gateway.hpp"
#include "docqa/image.hpp"
#include "httplib.h"

using namespace docqa;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

ChatRequest text_request(std::string system, std::string user) {
  ChatRequest r;
  r.system_prompt = std::move(system);
  r.user_parts.emplace_back(TextPart{std::move(user)});
  return r;
}

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected docqa::Error");
  return ErrorKind::Config;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("docqa_gateway_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Local chat-completions stand-in. The handler decides per call number.
class FakeServer {
 public:
  using Handler = std::function<void(int call, const httplib::Request&, httplib::Response&)>;

  explicit FakeServer(Handler handler) : handler_(std::move(handler)) {
    auto route = [this](const httplib::Request& req, httplib::Response& res) {
      const int n = ++calls_;
      last_body_ = req.body;
      last_auth_ = req.get_header_value("Authorization");
      handler_(n, req, res);
    };
    server_.Post("/v1/chat/completions", route);
    server_.Post("/v1/embeddings", route);
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeServer() {
    server_.stop();
    thread_.join();
  }

  BackendConfig config() const {
    BackendConfig c;
    c.kind = BackendKind::Http;
    c.endpoint_url = "http://127.0.0.1:" + std::to_string(port_) + "/v1/";
    c.model_name = "fake-vlm";
    c.retry_backoff_ms = 10;
    return c;
  }
  int calls() const { return calls_; }
  std::string last_body() const { return last_body_; }
  std::string last_auth() const { return last_auth_; }

 private:
  Handler handler_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> calls_{0};
  std::string last_body_;
  std::string last_auth_;
};

std::string completion(const std::string& text, const std::string& finish = "stop") {
  return json{{"model", "fake-vlm"},
              {"choices", {{{"message", {{"role", "assistant"}, {"content", text}}},
                            {"finish_reason", finish}}}}}
      .dump();
}

}  // namespace

TEST_CASE("ChatRequest validation") {
  ChatRequest empty;
  CHECK(kind_of([&] { empty.validate(); }) == ErrorKind::InvalidInput);
  auto r = text_request("s", "u");
  r.temperature = std::nan("");
  CHECK(kind_of([&] { r.validate(); }) == ErrorKind::InvalidInput);
  r.temperature = 0;
  CHECK_NOTHROW(r.validate());
}

TEST_CASE("BackendConfig: http requires endpoint and model") {
  BackendConfig c;
  c.kind = BackendKind::Http;
  CHECK(kind_of([&] { c.validate(); }) == ErrorKind::Config);
  c.endpoint_url = "http://localhost:1";
  c.model_name = "m";
  CHECK_NOTHROW(c.validate());
  c.api_key_env = "SOME_KEY";
  CHECK(c.describe().dump().find("SOME_KEY") == std::string::npos);
}

TEST_CASE("request_fingerprint depends on system, user text and image ids only") {
  auto a = text_request("sys", "hello");
  auto b = a;
  CHECK(request_fingerprint(a) == request_fingerprint(b));
  b.temperature = 0.7;
  b.max_tokens = 10;
  CHECK(request_fingerprint(a) == request_fingerprint(b));

  b.user_parts.emplace_back(ImagePart{"docA_0001", "/nowhere/a.png"});
  CHECK(request_fingerprint(a) != request_fingerprint(b));
  auto c = b;
  std::get<ImagePart>(c.user_parts[1]).path = "/elsewhere/a.png";
  CHECK(request_fingerprint(b) == request_fingerprint(c));

  CHECK(request_fingerprint(text_request("sys", "hello")) !=
        request_fingerprint(text_request("sys2", "hello")));
  // Field boundaries are length-prefixed.
  CHECK(request_fingerprint(text_request("ab", "c")) != request_fingerprint(text_request("a", "bc")));
}

TEST_CASE("mock chat: scripted reply returned verbatim with zero latency") {
  const auto req = text_request("sys", "question");
  MockScenario s;
  s.scenario_id = "t";
  s.chat[request_fingerprint(req)] = MockReply{R"({"think":"x","answer":3})", false, {}};
  MockBackend mock(s);
  const auto r = mock.chat(req);
  CHECK(r.text == R"({"think":"x","answer":3})");
  CHECK(r.latency_ms == 0);
  CHECK(r.model_id == "mock:t");
  CHECK_FALSE(r.refused);

  CHECK(kind_of([&] { mock.chat(text_request("sys", "other")); }) == ErrorKind::FixtureMissing);
}

TEST_CASE("mock chat: scripted errors and empty replies") {
  const auto req = text_request("", "boom");
  MockScenario s;
  s.chat[request_fingerprint(req)] = MockReply{"", false, ErrorKind::BackendUnavailable};
  const auto quiet = text_request("", "quiet");
  s.chat[request_fingerprint(quiet)] = MockReply{"", false, {}};
  MockBackend mock(s);
  CHECK(kind_of([&] { mock.chat(req); }) == ErrorKind::BackendUnavailable);
  CHECK(mock.chat(quiet).refused);
}

TEST_CASE("mock embed: fixture table, determinism, missing identity") {
  std::vector<std::vector<double>> rows(4, std::vector<double>(8, 0.0));
  for (std::size_t i = 0; i < 4; ++i) rows[i][i] = 1.0;
  MockScenario s;
  s.scenario_id = "emb";
  s.embeddings["pageA"] = rows;

  const auto dir = scratch("embed");
  s.save(dir);
  MockBackend mock(MockScenario::load(dir, "emb"));

  const auto e = mock.embed(EmbedPayload::image("pageA", "/unused.png"));
  CHECK(e.token_count() == 4);
  CHECK(e.dim() == 8);
  CHECK(e.to_rows() == rows);
  CHECK(e == mock.embed(EmbedPayload::image("pageA", "/unused.png")));
  CHECK(kind_of([&] { mock.embed(EmbedPayload::query("pageB")); }) == ErrorKind::FixtureMissing);
}

TEST_CASE("hash embeddings: deterministic, unit rows, identity-sensitive") {
  const auto a = hash_embedding("q1", 5, 12);
  CHECK(a == hash_embedding("q1", 5, 12));
  CHECK_FALSE(a == hash_embedding("q2", 5, 12));
  CHECK(a.rows_unit_norm());
  for (std::size_t i = 0; i < 5; ++i) {
    double n = 0;
    for (double v : a.row(i)) n += v * v;
    CHECK(n == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("make_backend: missing scenario file is fixture-missing") {
  BackendConfig c;
  c.fixtures_dir = scratch("missing");
  c.scenario = "nope";
  CHECK(kind_of([&] { make_backend(c); }) == ErrorKind::FixtureMissing);
  c.scenario.clear();
  auto b = make_backend(c);
  CHECK(b->embed(EmbedPayload::query("x")).dim() == 128);
}

TEST_CASE("scenario JSON round-trip") {
  MockScenario s;
  s.scenario_id = "rt";
  s.chat["aa"] = MockReply{"plain", false, {}};
  s.chat["bb"] = MockReply{"cut", true, {}};
  s.chat["cc"] = MockReply{"", false, ErrorKind::Request};
  s.embeddings["p"] = {{1.0, 0.0}};
  s.hash_embeddings = true;
  s.hash_dim = 16;
  s.hash_tokens = 4;
  const auto back = MockScenario::from_json(json::parse(s.to_json().dump()));
  CHECK(back.to_json() == s.to_json());
  CHECK(back.chat.at("bb").truncated);
  CHECK(*back.chat.at("cc").error == ErrorKind::Request);

  CHECK(kind_of([] { MockScenario::from_json(json{{"chat", {{"x", {{"error", "weird"}}}}}}); }) ==
        ErrorKind::Format);
}

TEST_CASE("transcript records calls and replays through the mock") {
  const auto r1 = text_request("s", "one");
  auto r2 = text_request("s", "two");
  r2.user_parts.emplace_back(ImagePart{"img9", "/x.png"});
  MockScenario s;
  s.scenario_id = "orig";
  s.chat[request_fingerprint(r1)] = MockReply{"A", false, {}};
  s.chat[request_fingerprint(r2)] = MockReply{"B", false, {}};
  s.hash_embeddings = true;
  s.hash_dim = 6;
  s.hash_tokens = 3;

  Transcript t;
  Gateway g(std::make_shared<MockBackend>(s), "answer", &t);
  g.chat(r1);
  g.chat(r2);
  const auto q = g.embed(EmbedPayload::query("what"));
  CHECK(kind_of([&] { g.chat(text_request("s", "three")); }) == ErrorKind::FixtureMissing);

  const auto entries = t.entries();
  REQUIRE(entries.size() == 4);
  CHECK(entries[0]["seq"] == 0);
  CHECK(entries[1]["image_ids"] == json::array({"img9"}));
  CHECK(entries[2]["kind"] == "embed");
  CHECK(entries[3]["error"] == "fixture-missing");

  Transcript clean;
  for (auto e : entries)
    if (!e.contains("error")) clean.append(e);
  MockBackend replay(clean.to_scenario("replay"));
  CHECK(replay.chat(r1).text == "A");
  CHECK(replay.chat(r2).text == "B");
  CHECK(replay.embed(EmbedPayload::query("what")) == q);
}

TEST_CASE("transcript: conflicting replies for one fingerprint") {
  Transcript t;
  t.append({{"kind", "chat"}, {"fingerprint", "f"}, {"response", "x"}});
  t.append({{"kind", "chat"}, {"fingerprint", "f"}, {"response", "y"}});
  CHECK(kind_of([&] { t.to_scenario("c"); }) == ErrorKind::Conflict);
}

TEST_CASE("transcript JSONL is byte-identical for identical call sequences") {
  const auto dir = scratch("jsonl");
  auto run = [&](const fs::path& out) {
    MockScenario s;
    const auto req = text_request("s", "u");
    s.chat[request_fingerprint(req)] = MockReply{"r", false, {}};
    s.hash_embeddings = true;
    Transcript t;
    Gateway g(std::make_shared<MockBackend>(s), "x", &t);
    g.chat(req);
    g.embed(EmbedPayload::query("q"));
    t.write_jsonl(out);
    std::ifstream in(out);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(run(dir / "a.jsonl") == run(dir / "b.jsonl"));
}

TEST_CASE("transcript appends are serialized across threads") {
  Transcript t;
  std::vector<std::thread> threads;
  for (int k = 0; k < 4; ++k)
    threads.emplace_back([&] {
      for (int i = 0; i < 250; ++i) t.append({{"kind", "note"}});
    });
  for (auto& th : threads) th.join();
  const auto e = t.entries();
  REQUIRE(e.size() == 1000);
  for (std::size_t i = 0; i < e.size(); ++i) CHECK(e[i]["seq"] == i);
}

TEST_CASE("base64") {
  CHECK(base64_encode("") == "");
  CHECK(base64_encode("f") == "Zg==");
  CHECK(base64_encode("fo") == "Zm8=");
  CHECK(base64_encode("foo") == "Zm9v");
  CHECK(base64_encode("foobar") == "Zm9vYmFy");
}

TEST_CASE("http: chat body carries messages, inline images and json format") {
  const auto dir = scratch("body");
  write_png(dir / "p.png", make_test_image(4, 4, 1));
  BackendConfig c;
  c.kind = BackendKind::Http;
  c.endpoint_url = "http://127.0.0.1:1/v1";
  c.model_name = "m";
  HttpBackend http(c);
  ChatRequest req = text_request("system here", "look");
  req.user_parts.insert(req.user_parts.begin(), ImagePart{"p", dir / "p.png"});
  req.response_format = ResponseFormat::Json;
  req.seed = 7;
  const auto body = http.chat_body(req);
  CHECK(body["model"] == "m");
  CHECK(body["temperature"] == 0.0);
  CHECK(body["seed"] == 7);
  CHECK(body["response_format"]["type"] == "json_object");
  CHECK(body["messages"][0]["role"] == "system");
  const auto& content = body["messages"][1]["content"];
  CHECK(content[0]["type"] == "image_url");
  CHECK(content[0]["image_url"]["url"].get<std::string>().rfind("data:image/png;base64,iVBOR", 0) == 0);
  CHECK(content[1]["text"] == "look");
}

TEST_CASE("http: 500 twice then 200 succeeds after two retries") {
  FakeServer server([](int call, const httplib::Request&, httplib::Response& res) {
    if (call <= 2) {
      res.status = 500;
      res.set_content("overloaded", "text/plain");
    } else {
      res.set_content(completion("fine"), "application/json");
    }
  });
  std::vector<long> sleeps;
  HttpBackend http(server.config(),
                   [&](std::chrono::milliseconds ms) { sleeps.push_back(ms.count()); });
  const auto r = http.chat(text_request("", "hi"));
  CHECK(r.text == "fine");
  CHECK(server.calls() == 3);
  CHECK(sleeps == std::vector<long>{10, 20});
}

TEST_CASE("http: exhausted retries give backend-unavailable; count never exceeds budget") {
  FakeServer server([](int, const httplib::Request&, httplib::Response& res) { res.status = 503; });
  auto cfg = server.config();
  cfg.max_retries = 3;
  cfg.retry_backoff_ms = 5;
  std::vector<long> sleeps;
  HttpBackend http(cfg, [&](std::chrono::milliseconds ms) { sleeps.push_back(ms.count()); });
  CHECK(kind_of([&] { http.chat(text_request("", "hi")); }) == ErrorKind::BackendUnavailable);
  CHECK(server.calls() == 4);
  CHECK(sleeps == std::vector<long>{5, 10, 20});
}

TEST_CASE("http: timing out three times gives backend-unavailable") {
  FakeServer server([](int, const httplib::Request&, httplib::Response& res) {
    std::this_thread::sleep_for(std::chrono::milliseconds(400));
    res.set_content(completion("late"), "application/json");
  });
  auto cfg = server.config();
  cfg.timeout_ms = 100;
  HttpBackend http(cfg, [](std::chrono::milliseconds) {});
  CHECK(kind_of([&] { http.chat(text_request("", "hi")); }) == ErrorKind::BackendUnavailable);
}

TEST_CASE("http: 4xx is a request error with a body excerpt, no retry") {
  FakeServer server([](int, const httplib::Request&, httplib::Response& res) {
    res.status = 400;
    res.set_content("bad image payload", "text/plain");
  });
  HttpBackend http(server.config(), [](std::chrono::milliseconds) {});
  try {
    http.chat(text_request("", "hi"));
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Request);
    CHECK(std::string(e.what()).find("bad image payload") != std::string::npos);
  }
  CHECK(server.calls() == 1);
}

TEST_CASE("http: truncation flag, api key header, missing key") {
  FakeServer server([](int, const httplib::Request&, httplib::Response& res) {
    res.set_content(completion("partial", "length"), "application/json");
  });
  auto cfg = server.config();
  cfg.api_key_env = "DOCQA_TEST_KEY_PRESENT";
  ::setenv("DOCQA_TEST_KEY_PRESENT", "sekrit", 1);
  HttpBackend http(cfg);
  const auto r = http.chat(text_request("", "hi"));
  CHECK(r.truncated);
  CHECK(server.last_auth() == "Bearer sekrit");

  cfg.api_key_env = "DOCQA_TEST_KEY_ABSENT";
  ::unsetenv("DOCQA_TEST_KEY_ABSENT");
  HttpBackend nokey(cfg);
  CHECK(kind_of([&] { nokey.chat(text_request("", "hi")); }) == ErrorKind::Environment);
}

TEST_CASE("http: multi-vector embeddings") {
  FakeServer server([](int, const httplib::Request&, httplib::Response& res) {
    res.set_content(json{{"data", {{{"embedding", {{1.0, 0.0}, {0.0, 1.0}, {0.6, 0.8}}}}}}}.dump(),
                    "application/json");
  });
  HttpBackend http(server.config());
  const auto e = http.embed(EmbedPayload::query("where"));
  CHECK(e.token_count() == 3);
  CHECK(e.dim() == 2);
  CHECK(e.rows_unit_norm());
  const auto sent = json::parse(server.last_body());
  CHECK(sent["input"] == "where");
  CHECK(sent["input_type"] == "query");
}
