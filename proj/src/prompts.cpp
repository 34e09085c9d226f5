#include "docqa/prompts.hpp"

#include <fstream>
#include <iterator>

#include "docqa/error.hpp"
#include "docqa/hash.hpp"

namespace docqa {

std::string to_string(PromptStage stage) {
  switch (stage) {
    case PromptStage::First: return "first";
    case PromptStage::Second: return "second";
    case PromptStage::Filter: return "filter";
    case PromptStage::Region: return "region";
  }
  return "?";
}

std::string to_string(LanguageMode mode) {
  switch (mode) {
    case LanguageMode::English: return "english";
    case LanguageMode::Japanese: return "japanese";
    case LanguageMode::Bilingual: return "bilingual";
  }
  return "?";
}

const std::vector<std::string>& PromptTemplate::required_placeholders(PromptStage stage) {
  static const std::vector<std::string> first{"question"};
  static const std::vector<std::string> second{"question", "options", "references", "sub_qas"};
  static const std::vector<std::string> filter{"question", "page_count"};
  static const std::vector<std::string> region{"question"};
  switch (stage) {
    case PromptStage::First: return first;
    case PromptStage::Second: return second;
    case PromptStage::Filter: return filter;
    case PromptStage::Region: return region;
  }
  return first;
}

void PromptTemplate::validate() const {
  for (const auto& name : required_placeholders(stage)) {
    if (body.find("{" + name + "}") == std::string::npos) {
      throw Error(ErrorKind::Config, to_string(stage) + "-stage template (" + to_string(language) +
                                         ") is missing placeholder {" + name + "}");
    }
  }
}

std::string PromptTemplate::render_body(const std::map<std::string, std::string>& values) const {
  std::string out;
  out.reserve(body.size() + 256);
  std::size_t i = 0;
  while (i < body.size()) {
    if (body[i] == '{') {
      const auto close = body.find('}', i + 1);
      if (close != std::string::npos) {
        const auto name = body.substr(i + 1, close - i - 1);
        auto it = values.find(name);
        if (it != values.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out += body[i++];
  }
  return out;
}

PromptTemplate PromptTemplate::parse(PromptStage stage, LanguageMode language,
                                     const std::string& text) {
  PromptTemplate t;
  t.stage = stage;
  t.language = language;
  const std::string sep = "\n---\n";
  const auto pos = text.find(sep);
  if (pos == std::string::npos) {
    t.body = text;
  } else {
    t.system = text.substr(0, pos);
    t.body = text.substr(pos + sep.size());
  }
  while (!t.body.empty() && t.body.back() == '\n') t.body.pop_back();
  return t;
}

namespace {

PromptTemplate load_one(const std::filesystem::path& dir, const char* file, PromptStage stage,
                        LanguageMode language) {
  const auto path = dir / file;
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Config, "prompt template not found: " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto t = PromptTemplate::parse(stage, language, text);
  t.validate();
  return t;
}

}  // namespace

TemplateSet TemplateSet::load(const std::filesystem::path& dir) {
  TemplateSet s;
  s.first_en_ = load_one(dir, "first_en.txt", PromptStage::First, LanguageMode::English);
  s.first_ja_ = load_one(dir, "first_ja.txt", PromptStage::First, LanguageMode::Japanese);
  s.second_ja_ = load_one(dir, "second_ja.txt", PromptStage::Second, LanguageMode::Japanese);
  s.filter_ = load_one(dir, "filter.txt", PromptStage::Filter, LanguageMode::English);
  s.region_ = load_one(dir, "region.txt", PromptStage::Region, LanguageMode::English);
  return s;
}

std::filesystem::path TemplateSet::default_dir() {
  if (const char* env = std::getenv("DOCQA_TEMPLATE_DIR"); env && *env) return env;
  return DOCQA_TEMPLATE_DIR;
}

PromptTemplate TemplateSet::first_stage(LanguageMode mode) const {
  switch (mode) {
    case LanguageMode::English: return first_en_;
    case LanguageMode::Japanese: return first_ja_;
    case LanguageMode::Bilingual: break;
  }
  PromptTemplate t;
  t.stage = PromptStage::First;
  t.language = LanguageMode::Bilingual;
  t.system = first_en_.system + "\n\n" + first_ja_.system;
  t.body = first_en_.body + "\n\n" + first_ja_.body;
  return t;
}

std::string TemplateSet::content_hash() const {
  StableHasher h;
  for (const auto* t : {&first_en_, &first_ja_, &second_ja_, &filter_, &region_})
    h.field(t->system).field(t->body);
  return to_hex(h.digest());
}

}  // namespace docqa
