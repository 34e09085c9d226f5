#include <cstdlib>
#include <fstream>
#include <iterator>
#include <regex>

#include "docqa/eval.hpp"
#include "yaml-cpp/yaml.h"

namespace docqa {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string interpolate(const std::string& value, int line_no) {
  static const std::regex kVar(R"(\$\{([A-Za-z_][A-Za-z0-9_]*)\})");
  std::string out;
  auto begin = std::sregex_iterator(value.begin(), value.end(), kVar);
  std::size_t last = 0;
  for (auto it = begin; it != std::sregex_iterator(); ++it) {
    const auto& m = *it;
    out += value.substr(last, static_cast<std::size_t>(m.position()) - last);
    const char* env = std::getenv(m[1].str().c_str());
    if (!env) {
      throw Error(ErrorKind::Config, "line " + std::to_string(line_no) + ": environment variable " +
                                         m[1].str() + " is not set");
    }
    out += env;
    last = static_cast<std::size_t>(m.position() + m.length());
  }
  return out + value.substr(last);
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "yes" || v == "on" || v == "1") return true;
  if (v == "false" || v == "no" || v == "off" || v == "0") return false;
  throw Error(ErrorKind::Config, key + ": expected a boolean, got '" + v + "'");
}

std::uint64_t parse_uint(const std::string& v, const std::string& key) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos || v.size() > 19) {
    throw Error(ErrorKind::Config, key + ": expected a non-negative integer, got '" + v + "'");
  }
  return std::stoull(v);
}

fs::path resolve(const fs::path& base, const std::string& v) {
  if (v.empty()) return {};
  fs::path p(v);
  return p.is_absolute() || base.empty() ? p : base / p;
}

void set_backend_key(BackendConfig& b, const std::string& key, const std::string& v,
                     const fs::path& base, const std::string& where) {
  if (key == "kind") {
    if (v == "mock") {
      b.kind = BackendKind::Mock;
    } else if (v == "http") {
      b.kind = BackendKind::Http;
    } else {
      throw Error(ErrorKind::Config, where + ".kind must be mock or http");
    }
  } else if (key == "endpoint_url") {
    b.endpoint_url = v;
  } else if (key == "model_name") {
    b.model_name = v;
  } else if (key == "api_key_env") {
    b.api_key_env = v;
  } else if (key == "timeout_ms") {
    b.timeout_ms = static_cast<std::int64_t>(parse_uint(v, where + ".timeout_ms"));
  } else if (key == "max_retries") {
    b.max_retries = static_cast<int>(parse_uint(v, where + ".max_retries"));
  } else if (key == "retry_backoff_ms") {
    b.retry_backoff_ms = static_cast<std::int64_t>(parse_uint(v, where + ".retry_backoff_ms"));
  } else if (key == "fixtures_dir") {
    b.fixtures_dir = resolve(base, v);
  } else if (key == "scenario") {
    b.scenario = v;
  } else if (key == "api_key") {
    throw Error(ErrorKind::Config, where + ": API keys are not read from config files; "
                                           "set api_key_env to the name of an environment variable");
  } else {
    throw Error(ErrorKind::Config, where + ": unknown key '" + key + "'");
  }
}

std::string where_of(const YAML::Node& node) {
  return "line " + std::to_string(node.Mark().line + 1);
}

std::string scalar(const YAML::Node& node, const std::string& key) {
  if (!node.IsScalar()) throw Error(ErrorKind::Config, where_of(node) + ": " + key + " must be a scalar");
  return interpolate(node.Scalar(), node.Mark().line + 1);
}

const YAML::Node& require_map(const YAML::Node& node, const std::string& what) {
  if (!node.IsMap()) throw Error(ErrorKind::Config, where_of(node) + ": " + what + " must be a mapping");
  return node;
}

void read_backend(BackendConfig& b, const YAML::Node& node, const fs::path& base,
                  const std::string& what) {
  for (const auto& kv : require_map(node, what)) {
    const auto key = kv.first.as<std::string>();
    set_backend_key(b, key, scalar(kv.second, key), base, where_of(kv.first) + " " + what);
  }
}

void read_pipeline(PipelineConfig& c, const YAML::Node& node, const fs::path& base) {
  for (const auto& kv : require_map(node, "pipeline")) {
    const auto key = kv.first.as<std::string>();
    const auto k = where_of(kv.first) + ": pipeline." + key;
    if (key == "fusion_models") {
      if (!kv.second.IsSequence()) throw Error(ErrorKind::Config, k + " must be a list");
      c.fusion_models.clear();
      for (const auto& item : kv.second) c.fusion_models.push_back(scalar(item, key));
      continue;
    }
    const auto value = scalar(kv.second, key);
    if (key == "k") c.k = parse_uint(value, k);
    else if (key == "seed") c.seed = parse_uint(value, k);
    else if (key == "parallelism") c.parallelism = parse_uint(value, k);
    else if (key == "use_filter") c.use_filter = parse_bool(value, k);
    else if (key == "use_decomposition") c.use_decomposition = parse_bool(value, k);
    else if (key == "bilingual_first_stage") c.bilingual_first_stage = parse_bool(value, k);
    else if (key == "use_region_refine") c.use_region_refine = parse_bool(value, k);
    else if (key == "use_voting") c.use_voting = parse_bool(value, k);
    else if (key == "work_dir") c.work_dir = resolve(base, value);
    else if (key == "templates_dir") c.templates_dir = resolve(base, value);
    else if (key == "manual_regions") c.manual_regions = resolve(base, value);
    else if (key == "rasterizer") c.rasterizer = value;
    else throw Error(ErrorKind::Config, where_of(kv.first) + ": unknown key '" + key + "' in pipeline");
  }
}

}  // namespace

void PipelineConfig::validate() const {
  if (k < 1) throw Error(ErrorKind::Config, "k must be >= 1");
  if (parallelism < 1) throw Error(ErrorKind::Config, "parallelism must be >= 1");
  default_backend.validate();
  for (const auto& [_, b] : stage_backends) b.validate();
  for (const auto& id : fusion_models) {
    if (!model_backends.count(id)) {
      throw Error(ErrorKind::Config, "fusion model '" + id + "' has no entry under models");
    }
  }
  if (fusion_models.size() == 1) {
    throw Error(ErrorKind::Config, "fusion_models needs at least two models");
  }
  for (const auto& [_, b] : model_backends) b.validate();
}

const BackendConfig& PipelineConfig::backend_for(const std::string& stage) const {
  const auto it = stage_backends.find(stage);
  return it == stage_backends.end() ? default_backend : it->second;
}

json PipelineConfig::describe() const {
  json backends;
  for (const char* s : kStages) backends[s] = backend_for(s).describe();
  json models = json::object();
  for (const auto& id : fusion_models) models[id] = model_backends.at(id).describe();
  return {{"use_filter", use_filter},
          {"use_decomposition", use_decomposition},
          {"bilingual_first_stage", bilingual_first_stage},
          {"use_region_refine", use_region_refine},
          {"use_voting", use_voting},
          {"fusion_models", fusion_models},
          {"k", k},
          {"seed", seed},
          {"backends", std::move(backends)},
          {"models", std::move(models)}};
}

PipelineConfig parse_pipeline_config(const std::string& text, const fs::path& base_dir) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw Error(ErrorKind::Config, "line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  PipelineConfig c;
  if (root.IsNull()) {
    c.validate();
    return c;
  }
  for (const auto& kv : require_map(root, "the config")) {
    const auto section = kv.first.as<std::string>();
    const auto& node = kv.second;
    if (section == "pipeline") {
      read_pipeline(c, node, base_dir);
    } else if (section == "backend") {
      read_backend(c.default_backend, node, base_dir, "backend");
    } else if (section == "stages") {
      // Stage entries are complete backend configs; nothing is inherited.
      for (const auto& st : require_map(node, "stages")) {
        const auto stage = st.first.as<std::string>();
        if (std::find(std::begin(kStages), std::end(kStages), stage) == std::end(kStages)) {
          throw Error(ErrorKind::Config, where_of(st.first) + ": unknown stage '" + stage + "'");
        }
        read_backend(c.stage_backends[stage], st.second, base_dir, "stages." + stage);
      }
    } else if (section == "models") {
      for (const auto& m : require_map(node, "models")) {
        const auto id = m.first.as<std::string>();
        read_backend(c.model_backends[id], m.second, base_dir, "models." + id);
      }
    } else {
      throw Error(ErrorKind::Config, where_of(kv.first) + ": unknown section '" + section + "'");
    }
  }
  c.validate();
  return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Config, "config file not found: " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_pipeline_config(text, fs::absolute(path).parent_path());
  } catch (const Error& e) {
    throw Error(e.kind(), path.string() + ": " + e.detail());
  }
}

}  // namespace docqa
