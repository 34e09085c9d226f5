#pragma once

// Model gateway: one interface for every model call the pipeline makes
// (chat/vision completions and multi-vector embeddings), with a scripted mock
// backend and an OpenAI-compatible HTTP backend.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "docqa/error.hpp"
#include "docqa/retrieval.hpp"
#include "json.hpp"

namespace docqa {

struct TextPart {
  std::string text;
};

struct ImagePart {
  std::string id;  // stable identity, e.g. "docA_0003" or a crop id
  std::filesystem::path path;
};

using UserPart = std::variant<TextPart, ImagePart>;

enum class ResponseFormat { Free, Json };

struct ChatRequest {
  std::string system_prompt;
  std::vector<UserPart> user_parts;
  ResponseFormat response_format = ResponseFormat::Free;
  double temperature = 0.0;
  std::optional<std::int64_t> seed;
  int max_tokens = 2048;

  void validate() const;
  std::string user_text() const;  // text parts joined by '\n'
  std::vector<std::string> image_ids() const;
};

struct ChatResponse {
  std::string text;
  std::string model_id;
  std::int64_t latency_ms = 0;
  bool truncated = false;
  bool refused = false;  // empty text
};

enum class BackendKind { Mock, Http };

struct BackendConfig {
  BackendKind kind = BackendKind::Mock;
  std::string endpoint_url;
  std::string model_name;
  std::string api_key_env;
  std::int64_t timeout_ms = 120000;
  int max_retries = 2;
  std::int64_t retry_backoff_ms = 1000;
  // Mock only. An empty scenario means hash-derived embeddings and no chat
  // fixtures.
  std::filesystem::path fixtures_dir;
  std::string scenario;

  void validate() const;
  /// Stable description without secrets, for config fingerprints.
  nlohmann::json describe() const;
};

struct EmbedPayload {
  enum class Kind { Text, Image };
  Kind kind = Kind::Text;
  std::string text;  // query text, or the image id
  std::filesystem::path image_path;

  static EmbedPayload query(std::string text) { return {Kind::Text, std::move(text), {}}; }
  static EmbedPayload image(std::string id, std::filesystem::path path) {
    return {Kind::Image, std::move(id), std::move(path)};
  }
  /// Mock lookup key: the image id, or the query text itself.
  const std::string& identity() const { return text; }
};

/// Stable hash of (system prompt, concatenated user text, image ids).
std::string request_fingerprint(const ChatRequest& request);

class Backend {
 public:
  virtual ~Backend() = default;
  virtual ChatResponse chat(const ChatRequest& request) = 0;
  virtual MultiVectorEmbedding embed(const EmbedPayload& payload) = 0;
  virtual std::string model_id() const = 0;
};

struct MockReply {
  std::string text;
  bool truncated = false;
  std::optional<ErrorKind> error;  // scripted failure instead of a reply
};

/// Fixture script for the mock backend; one JSON file per scenario.
///
///   {
///     "scenario_id": "planted",
///     "chat": { "<fingerprint>": "reply text" | {"text": ..., "truncated": bool}
///                                            | {"error": "backend-unavailable"} },
///     "embeddings": { "<identity>": [[row], [row], ...] },
///     "hash_embeddings": {"dim": 16, "tokens": 8}      // optional fallback
///   }
struct MockScenario {
  std::string scenario_id;
  std::map<std::string, MockReply> chat;
  std::map<std::string, std::vector<std::vector<double>>> embeddings;
  bool hash_embeddings = false;
  std::size_t hash_dim = 128;
  std::size_t hash_tokens = 16;

  static MockScenario from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
  static MockScenario load(const std::filesystem::path& fixtures_dir,
                           const std::string& scenario_id);
  void save(const std::filesystem::path& fixtures_dir) const;
};

/// Deterministic L2-normalized rows seeded from the payload identity.
MultiVectorEmbedding hash_embedding(const std::string& identity, std::size_t tokens,
                                    std::size_t dim);

class MockBackend final : public Backend {
 public:
  explicit MockBackend(MockScenario scenario) : scenario_(std::move(scenario)) {}

  ChatResponse chat(const ChatRequest& request) override;
  MultiVectorEmbedding embed(const EmbedPayload& payload) override;
  std::string model_id() const override { return "mock:" + scenario_.scenario_id; }

 private:
  MockScenario scenario_;
};

class HttpBackend final : public Backend {
 public:
  using Sleeper = std::function<void(std::chrono::milliseconds)>;

  explicit HttpBackend(BackendConfig config, Sleeper sleeper = {});

  ChatResponse chat(const ChatRequest& request) override;
  MultiVectorEmbedding embed(const EmbedPayload& payload) override;
  std::string model_id() const override { return config_.model_name; }

  /// Builds the chat-completions request body.
  nlohmann::json chat_body(const ChatRequest& request) const;

 private:
  std::string post_with_retries(const std::string& path, const std::string& body);

  BackendConfig config_;
  Sleeper sleeper_;
  std::string scheme_host_port_;
  std::string base_path_;
};

std::shared_ptr<Backend> make_backend(const BackendConfig& config);

/// Append-only log of every model call. Appends are serialized.
class Transcript {
 public:
  void append(nlohmann::json entry);
  void extend(const Transcript& other);
  std::vector<nlohmann::json> entries() const;
  void write_jsonl(const std::filesystem::path& path) const;

  /// Mock scenario that replays exactly the recorded replies.
  MockScenario to_scenario(const std::string& scenario_id) const;

 private:
  mutable std::mutex mutex_;
  std::vector<nlohmann::json> entries_;
};

/// Backend plus transcript sink; cheap to copy.
class Gateway {
 public:
  Gateway() = default;
  Gateway(std::shared_ptr<Backend> backend, std::string stage,
          Transcript* transcript = nullptr)
      : backend_(std::move(backend)), stage_(std::move(stage)), transcript_(transcript) {}

  ChatResponse chat(const ChatRequest& request) const;
  MultiVectorEmbedding embed(const EmbedPayload& payload) const;

  Gateway with_transcript(Transcript* transcript) const {
    return Gateway(backend_, stage_, transcript);
  }
  const std::string& stage() const { return stage_; }
  std::string model_id() const { return backend_ ? backend_->model_id() : ""; }
  explicit operator bool() const { return static_cast<bool>(backend_); }

 private:
  std::shared_ptr<Backend> backend_;
  std::string stage_;
  Transcript* transcript_ = nullptr;
};

ChatResponse chat(const BackendConfig& config, const ChatRequest& request);
MultiVectorEmbedding embed_multivector(const BackendConfig& config,
                                       const EmbedPayload& payload);

std::string base64_encode(const std::string& bytes);

}  // namespace docqa
