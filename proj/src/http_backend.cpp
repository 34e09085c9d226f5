#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <regex>
#include <thread>

#include "docqa/gateway.hpp"
#include "docqa/log.hpp"
#include "httplib.h"

namespace docqa {

using nlohmann::json;

namespace {

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Ingest, "cannot read image " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string mime_for(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  return "image/png";
}

std::string data_uri(const std::filesystem::path& path) {
  return "data:" + mime_for(path) + ";base64," + base64_encode(read_file_bytes(path));
}

std::string excerpt(const std::string& body) {
  constexpr std::size_t kMax = 300;
  return body.size() <= kMax ? body : body.substr(0, kMax) + "...";
}

}  // namespace

HttpBackend::HttpBackend(BackendConfig config, Sleeper sleeper)
    : config_(std::move(config)), sleeper_(std::move(sleeper)) {
  config_.validate();
  if (!sleeper_) {
    sleeper_ = [](std::chrono::milliseconds ms) { std::this_thread::sleep_for(ms); };
  }
  static const std::regex kUrl(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(config_.endpoint_url, m, kUrl)) {
    throw Error(ErrorKind::Config, "endpoint_url is not an http(s) URL: " + config_.endpoint_url);
  }
  scheme_host_port_ = m[1].str();
  base_path_ = m[2].matched ? m[2].str() : "";
  while (!base_path_.empty() && base_path_.back() == '/') base_path_.pop_back();
}

json HttpBackend::chat_body(const ChatRequest& request) const {
  json content = json::array();
  for (const auto& part : request.user_parts) {
    if (const auto* t = std::get_if<TextPart>(&part)) {
      content.push_back({{"type", "text"}, {"text", t->text}});
    } else {
      const auto& img = std::get<ImagePart>(part);
      content.push_back({{"type", "image_url"}, {"image_url", {{"url", data_uri(img.path)}}}});
    }
  }
  json messages = json::array();
  if (!request.system_prompt.empty())
    messages.push_back({{"role", "system"}, {"content", request.system_prompt}});
  messages.push_back({{"role", "user"}, {"content", std::move(content)}});

  json body = {{"model", config_.model_name},
               {"messages", std::move(messages)},
               {"temperature", request.temperature},
               {"max_tokens", request.max_tokens}};
  if (request.seed) body["seed"] = *request.seed;
  if (request.response_format == ResponseFormat::Json)
    body["response_format"] = {{"type", "json_object"}};
  return body;
}

std::string HttpBackend::post_with_retries(const std::string& path, const std::string& body) {
  httplib::Client client(scheme_host_port_);
  const auto timeout = std::chrono::milliseconds(config_.timeout_ms);
  client.set_connection_timeout(timeout);
  client.set_read_timeout(timeout);
  client.set_write_timeout(timeout);

  httplib::Headers headers;
  if (!config_.api_key_env.empty()) {
    const char* key = std::getenv(config_.api_key_env.c_str());
    if (!key || !*key) {
      throw Error(ErrorKind::Environment,
                  "environment variable " + config_.api_key_env + " (API key) is not set");
    }
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }

  std::string last_failure;
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) {
      const auto backoff = config_.retry_backoff_ms << (attempt - 1);
      log::info("retrying ", path, " in ", backoff, " ms (attempt ", attempt + 1, ")");
      sleeper_(std::chrono::milliseconds(backoff));
    }
    auto res = client.Post(path, headers, body, "application/json");
    if (!res) {
      last_failure = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500) {
      last_failure = "HTTP " + std::to_string(res->status) + ": " + excerpt(res->body);
      continue;
    }
    if (res->status >= 300) {
      throw Error(ErrorKind::Request,
                  "HTTP " + std::to_string(res->status) + " from " + path + ": " + excerpt(res->body));
    }
    return res->body;
  }
  throw Error(ErrorKind::BackendUnavailable,
              std::to_string(config_.max_retries + 1) + " attempts to " + path +
                  " failed; last: " + last_failure);
}

ChatResponse HttpBackend::chat(const ChatRequest& request) {
  request.validate();
  const auto started = std::chrono::steady_clock::now();
  const auto raw = post_with_retries(base_path_ + "/chat/completions", chat_body(request).dump());
  ChatResponse r;
  r.latency_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                     std::chrono::steady_clock::now() - started)
                     .count();
  try {
    const auto j = json::parse(raw);
    const auto& choice = j.at("choices").at(0);
    const auto& content = choice.at("message").at("content");
    if (content.is_string()) {
      r.text = content.get<std::string>();
    } else if (content.is_array()) {
      for (const auto& part : content)
        if (part.value("type", "") == "text") r.text += part.value("text", "");
    }
    r.truncated = choice.value("finish_reason", std::string{}) == "length";
    r.model_id = j.value("model", config_.model_name);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Request, "malformed chat-completions response: " + std::string(e.what()) +
                                        " body: " + excerpt(raw));
  }
  r.refused = r.text.empty();
  return r;
}

MultiVectorEmbedding HttpBackend::embed(const EmbedPayload& payload) {
  json body = {{"model", config_.model_name}};
  if (payload.kind == EmbedPayload::Kind::Image) {
    body["input"] = data_uri(payload.image_path);
    body["input_type"] = "image";
  } else {
    body["input"] = payload.text;
    body["input_type"] = "query";
  }
  const auto raw = post_with_retries(base_path_ + "/embeddings", body.dump());
  try {
    const auto j = json::parse(raw);
    const auto& e = j.at("data").at(0).at("embedding");
    std::vector<std::vector<double>> rows;
    if (!e.empty() && e.at(0).is_array()) {
      rows = e.get<std::vector<std::vector<double>>>();
    } else {
      rows.push_back(e.get<std::vector<double>>());
    }
    auto emb = MultiVectorEmbedding::from_rows(rows);
    return MultiVectorEmbedding(emb.token_count(), emb.dim(),
                                std::vector<double>(emb.data().begin(), emb.data().end()),
                                emb.rows_unit_norm());
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Request,
                "malformed embeddings response: " + std::string(e.what()) + " body: " + excerpt(raw));
  }
}

}  // namespace docqa
