#include "docqa/gateway.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include "docqa/hash.hpp"
#include "docqa/log.hpp"

namespace docqa {

using nlohmann::json;

void ChatRequest::validate() const {
  if (user_parts.empty()) {
    throw Error(ErrorKind::InvalidInput, "chat request has no user parts");
  }
  if (!std::isfinite(temperature) || temperature < 0) {
    throw Error(ErrorKind::InvalidInput, "chat request temperature must be finite and >= 0");
  }
  if (max_tokens <= 0) {
    throw Error(ErrorKind::InvalidInput, "chat request max_tokens must be positive");
  }
}

std::string ChatRequest::user_text() const {
  std::string out;
  bool first = true;
  for (const auto& part : user_parts) {
    if (const auto* t = std::get_if<TextPart>(&part)) {
      if (!first) out += '\n';
      out += t->text;
      first = false;
    }
  }
  return out;
}

std::vector<std::string> ChatRequest::image_ids() const {
  std::vector<std::string> ids;
  for (const auto& part : user_parts)
    if (const auto* i = std::get_if<ImagePart>(&part)) ids.push_back(i->id);
  return ids;
}

void BackendConfig::validate() const {
  if (kind == BackendKind::Http) {
    if (endpoint_url.empty() || model_name.empty()) {
      throw Error(ErrorKind::Config, "http backend requires endpoint_url and model_name");
    }
  }
  if (timeout_ms <= 0) throw Error(ErrorKind::Config, "timeout_ms must be positive");
  if (max_retries < 0) throw Error(ErrorKind::Config, "max_retries must be >= 0");
  if (retry_backoff_ms < 0) throw Error(ErrorKind::Config, "retry_backoff_ms must be >= 0");
}

json BackendConfig::describe() const {
  json j;
  j["kind"] = kind == BackendKind::Http ? "http" : "mock";
  if (kind == BackendKind::Http) {
    j["endpoint_url"] = endpoint_url;
    j["model_name"] = model_name;
    j["timeout_ms"] = timeout_ms;
    j["max_retries"] = max_retries;
    j["retry_backoff_ms"] = retry_backoff_ms;
  } else {
    j["scenario"] = scenario;
  }
  return j;
}

std::string request_fingerprint(const ChatRequest& request) {
  StableHasher h;
  h.field(request.system_prompt);
  h.field(request.user_text());
  const auto ids = request.image_ids();
  h.update_u64(ids.size());
  for (const auto& id : ids) h.field(id);
  return to_hex(h.digest());
}

// ---------------------------------------------------------------------------
// Mock backend

MockScenario MockScenario::from_json(const json& j) {
  MockScenario s;
  s.scenario_id = j.value("scenario_id", std::string{});
  if (j.contains("chat")) {
    for (const auto& [fp, v] : j.at("chat").items()) {
      MockReply reply;
      if (v.is_string()) {
        reply.text = v.get<std::string>();
      } else if (v.is_object()) {
        reply.text = v.value("text", std::string{});
        reply.truncated = v.value("truncated", false);
        if (v.contains("error")) {
          ErrorKind kind;
          const auto name = v.at("error").get<std::string>();
          if (!error_kind_from_string(name, kind)) {
            throw Error(ErrorKind::Format, "mock scenario: unknown error kind '" + name + "'");
          }
          reply.error = kind;
        }
      } else {
        throw Error(ErrorKind::Format, "mock scenario: chat entry " + fp +
                                           " must be a string or object");
      }
      s.chat.emplace(fp, std::move(reply));
    }
  }
  if (j.contains("embeddings")) {
    for (const auto& [id, rows] : j.at("embeddings").items())
      s.embeddings.emplace(id, rows.get<std::vector<std::vector<double>>>());
  }
  if (j.contains("hash_embeddings")) {
    const auto& h = j.at("hash_embeddings");
    s.hash_embeddings = true;
    s.hash_dim = h.value("dim", std::size_t{128});
    s.hash_tokens = h.value("tokens", std::size_t{16});
    if (s.hash_dim == 0 || s.hash_tokens == 0) {
      throw Error(ErrorKind::Format, "mock scenario: hash_embeddings dim/tokens must be positive");
    }
  }
  return s;
}

json MockScenario::to_json() const {
  json j;
  j["scenario_id"] = scenario_id;
  json c = json::object();
  for (const auto& [fp, r] : chat) {
    if (r.error) {
      c[fp] = {{"error", std::string(to_string(*r.error))}};
    } else if (r.truncated) {
      c[fp] = {{"text", r.text}, {"truncated", true}};
    } else {
      c[fp] = r.text;
    }
  }
  j["chat"] = std::move(c);
  j["embeddings"] = embeddings;
  if (hash_embeddings) j["hash_embeddings"] = {{"dim", hash_dim}, {"tokens", hash_tokens}};
  return j;
}

MockScenario MockScenario::load(const std::filesystem::path& fixtures_dir,
                                const std::string& scenario_id) {
  const auto path = fixtures_dir / (scenario_id + ".json");
  std::ifstream in(path);
  if (!in) {
    throw Error(ErrorKind::FixtureMissing, "mock scenario file not found: " + path.string());
  }
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Format, "mock scenario " + path.string() + ": " + e.what());
  }
  auto s = from_json(j);
  if (s.scenario_id.empty()) s.scenario_id = scenario_id;
  return s;
}

void MockScenario::save(const std::filesystem::path& fixtures_dir) const {
  std::filesystem::create_directories(fixtures_dir);
  std::ofstream out(fixtures_dir / (scenario_id + ".json"));
  out << to_json().dump(2) << '\n';
  if (!out) throw Error(ErrorKind::InvalidInput, "cannot write mock scenario");
}

MultiVectorEmbedding hash_embedding(const std::string& identity, std::size_t tokens,
                                    std::size_t dim) {
  std::mt19937_64 rng(stable_hash({"embed", identity}));
  std::vector<double> data(tokens * dim);
  for (std::size_t t = 0; t < tokens; ++t) {
    double norm2 = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      // 53 random bits mapped to [-1, 1).
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
      const double v = 2.0 * u - 1.0;
      data[t * dim + d] = v;
      norm2 += v * v;
    }
    if (norm2 == 0.0) {
      data[t * dim] = 1.0;
      norm2 = 1.0;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (std::size_t d = 0; d < dim; ++d) data[t * dim + d] *= inv;
  }
  return MultiVectorEmbedding(tokens, dim, std::move(data), true);
}

ChatResponse MockBackend::chat(const ChatRequest& request) {
  request.validate();
  const auto fp = request_fingerprint(request);
  auto it = scenario_.chat.find(fp);
  if (it == scenario_.chat.end()) {
    std::string excerpt = request.user_text().substr(0, 120);
    throw Error(ErrorKind::FixtureMissing,
                "scenario '" + scenario_.scenario_id + "' has no reply for fingerprint " +
                    fp + " (user text begins: \"" + excerpt + "\")");
  }
  const MockReply& reply = it->second;
  if (reply.error) {
    throw Error(*reply.error, "scripted failure for fingerprint " + fp);
  }
  ChatResponse r;
  r.text = reply.text;
  r.model_id = model_id();
  r.latency_ms = 0;
  r.truncated = reply.truncated;
  r.refused = reply.text.empty();
  return r;
}

MultiVectorEmbedding MockBackend::embed(const EmbedPayload& payload) {
  const auto& id = payload.identity();
  if (auto it = scenario_.embeddings.find(id); it != scenario_.embeddings.end()) {
    auto e = MultiVectorEmbedding::from_rows(it->second);
    return MultiVectorEmbedding(e.token_count(), e.dim(),
                                std::vector<double>(e.data().begin(), e.data().end()),
                                e.rows_unit_norm());
  }
  if (scenario_.hash_embeddings) {
    return hash_embedding(id, scenario_.hash_tokens, scenario_.hash_dim);
  }
  throw Error(ErrorKind::FixtureMissing,
              "scenario '" + scenario_.scenario_id + "' has no embedding for '" + id + "'");
}

std::shared_ptr<Backend> make_backend(const BackendConfig& config) {
  config.validate();
  if (config.kind == BackendKind::Http) return std::make_shared<HttpBackend>(config);
  if (config.scenario.empty()) {
    MockScenario s;
    s.scenario_id = "builtin";
    s.hash_embeddings = true;
    return std::make_shared<MockBackend>(std::move(s));
  }
  return std::make_shared<MockBackend>(MockScenario::load(config.fixtures_dir, config.scenario));
}

// ---------------------------------------------------------------------------
// Transcript

void Transcript::append(json entry) {
  std::lock_guard lock(mutex_);
  entry["seq"] = entries_.size();
  entries_.push_back(std::move(entry));
}

void Transcript::extend(const Transcript& other) {
  for (auto e : other.entries()) {
    e.erase("seq");
    append(std::move(e));
  }
}

std::vector<json> Transcript::entries() const {
  std::lock_guard lock(mutex_);
  return entries_;
}

void Transcript::write_jsonl(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  for (const auto& e : entries()) out << e.dump() << '\n';
  if (!out) throw Error(ErrorKind::InvalidInput, "cannot write transcript " + path.string());
}

MockScenario Transcript::to_scenario(const std::string& scenario_id) const {
  MockScenario s;
  s.scenario_id = scenario_id;
  for (const auto& e : entries()) {
    const auto kind = e.at("kind").get<std::string>();
    if (kind == "chat") {
      const auto fp = e.at("fingerprint").get<std::string>();
      MockReply reply;
      if (e.contains("error")) {
        ErrorKind k = ErrorKind::BackendUnavailable;
        error_kind_from_string(e.at("error").get<std::string>(), k);
        reply.error = k;
      } else {
        reply.text = e.at("response").get<std::string>();
        reply.truncated = e.value("truncated", false);
      }
      auto [it, inserted] = s.chat.emplace(fp, reply);
      if (!inserted && (it->second.text != reply.text || it->second.error != reply.error)) {
        throw Error(ErrorKind::Conflict,
                    "transcript has two different replies for fingerprint " + fp);
      }
    } else if (kind == "embed" && e.contains("rows")) {
      s.embeddings[e.at("identity").get<std::string>()] =
          e.at("rows").get<std::vector<std::vector<double>>>();
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Gateway

ChatResponse Gateway::chat(const ChatRequest& request) const {
  if (!backend_) throw Error(ErrorKind::Config, "gateway for stage '" + stage_ + "' has no backend");
  json entry;
  if (transcript_) {
    entry["kind"] = "chat";
    entry["stage"] = stage_;
    entry["fingerprint"] = request_fingerprint(request);
    entry["system_prompt"] = request.system_prompt;
    entry["user_text"] = request.user_text();
    entry["image_ids"] = request.image_ids();
    entry["response_format"] = request.response_format == ResponseFormat::Json ? "json" : "free";
  }
  try {
    auto response = backend_->chat(request);
    if (transcript_) {
      entry["model_id"] = response.model_id;
      entry["response"] = response.text;
      if (response.truncated) entry["truncated"] = true;
      transcript_->append(std::move(entry));
    }
    if (response.refused) log::warn("stage ", stage_, ": model returned an empty reply");
    return response;
  } catch (const Error& e) {
    if (transcript_) {
      entry["error"] = std::string(to_string(e.kind()));
      entry["message"] = e.detail();
      transcript_->append(std::move(entry));
    }
    throw;
  }
}

MultiVectorEmbedding Gateway::embed(const EmbedPayload& payload) const {
  if (!backend_) throw Error(ErrorKind::Config, "gateway for stage '" + stage_ + "' has no backend");
  json entry;
  if (transcript_) {
    entry["kind"] = "embed";
    entry["stage"] = stage_;
    entry["identity"] = payload.identity();
  }
  try {
    auto e = backend_->embed(payload);
    if (transcript_) {
      entry["token_count"] = e.token_count();
      entry["dim"] = e.dim();
      entry["rows"] = e.to_rows();
      transcript_->append(std::move(entry));
    }
    return e;
  } catch (const Error& err) {
    if (transcript_) {
      entry["error"] = std::string(to_string(err.kind()));
      entry["message"] = err.detail();
      transcript_->append(std::move(entry));
    }
    throw;
  }
}

ChatResponse chat(const BackendConfig& config, const ChatRequest& request) {
  return make_backend(config)->chat(request);
}

MultiVectorEmbedding embed_multivector(const BackendConfig& config,
                                       const EmbedPayload& payload) {
  return make_backend(config)->embed(payload);
}

std::string base64_encode(const std::string& bytes) {
  static constexpr char kAlphabet[] =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t n = (static_cast<unsigned char>(bytes[i]) << 16) |
                            (static_cast<unsigned char>(bytes[i + 1]) << 8) |
                            static_cast<unsigned char>(bytes[i + 2]);
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += kAlphabet[(n >> 6) & 63];
    out += kAlphabet[n & 63];
  }
  if (i + 1 == bytes.size()) {
    const std::uint32_t n = static_cast<unsigned char>(bytes[i]) << 16;
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += "==";
  } else if (i + 2 == bytes.size()) {
    const std::uint32_t n = (static_cast<unsigned char>(bytes[i]) << 16) |
                            (static_cast<unsigned char>(bytes[i + 1]) << 8);
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += kAlphabet[(n >> 6) & 63];
    out += '=';
  }
  return out;
}

}  // namespace docqa
