#include "docqa/qa_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <regex>
#include <set>

#include "docqa/json_extract.hpp"
#include "docqa/log.hpp"

namespace docqa {

using nlohmann::json;

json to_json(const CandidatePage& page) {
  return {{"doc_id", page.doc_id},   {"page_no", page.page_no},
          {"rank", page.rank},       {"score", page.score},
          {"image_id", page.image_id}, {"cropped", page.cropped}};
}

// ---------------------------------------------------------------------------
// Filter

std::vector<std::size_t> parse_filter_reply(const std::string& reply, std::size_t page_count) {
  const auto cleaned = strip_code_fences(fold_fullwidth(reply));
  auto parsed = json::parse(cleaned, nullptr, false);
  std::optional<json> arr;
  if (!parsed.is_discarded() && parsed.is_array()) {
    arr = std::move(parsed);
  } else {
    arr = extract_first_json(cleaned, '[');
  }
  std::set<std::size_t> ranks;
  if (!arr) return {};
  for (const auto& v : *arr) {
    long n = 0;
    if (v.is_number_integer()) {
      n = v.get<long>();
    } else if (v.is_number_float()) {
      const double d = v.get<double>();
      if (!std::isfinite(d) || std::floor(d) != d || std::abs(d) > 1e6) continue;
      n = static_cast<long>(d);
    } else if (v.is_string()) {
      const auto s = trim(v.get<std::string>());
      if (s.empty() || !std::all_of(s.begin(), s.end(), ::isdigit) || s.size() > 3) continue;
      n = std::stol(s);
    } else {
      continue;
    }
    if (n >= 1 && static_cast<std::size_t>(n) <= page_count) ranks.insert(static_cast<std::size_t>(n));
  }
  return {ranks.begin(), ranks.end()};
}

FilterResult filter_pages(const Gateway& gateway, const TemplateSet& templates,
                          const std::string& question, std::span<const CandidatePage> pages) {
  if (pages.empty() || pages.size() > kMaxFilterPages) {
    throw Error(ErrorKind::InvalidInput, "filter_pages expects 1..3 pages, got " +
                                             std::to_string(pages.size()));
  }
  const auto& tmpl = templates.filter();
  ChatRequest req;
  req.system_prompt = tmpl.system;
  for (const auto& p : pages) req.user_parts.emplace_back(p.image_part());
  req.user_parts.emplace_back(TextPart{tmpl.render_body(
      {{"question", question}, {"page_count", std::to_string(pages.size())}})});
  req.response_format = ResponseFormat::Json;
  req.max_tokens = 256;

  const auto response = gateway.chat(req);
  FilterResult result;
  result.raw_reply = response.text;
  for (std::size_t rank : parse_filter_reply(response.text, pages.size()))
    result.pages.push_back(pages[rank - 1]);
  if (result.pages.empty()) {
    result.fallback = true;
    result.pages.push_back(pages.front());
    log::info("filter named no valid page; keeping rank-1 page ", pages.front().image_id);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Decomposition

json to_json(const DecompositionTrace& trace) {
  json subs = json::array();
  for (const auto& s : trace.sub_qas) subs.push_back({{"question", s.question}, {"answer", s.answer}});
  json refs = json::array();
  for (const auto& r : trace.references) refs.push_back(r.text);
  return {{"sub_qas", std::move(subs)},
          {"references", std::move(refs)},
          {"raw_model_text", trace.raw_model_text},
          {"dropped_sub_qas", trace.dropped_sub_qas},
          {"dropped_references", trace.dropped_references}};
}

namespace {

std::string text_field(const json& obj, std::initializer_list<const char*> keys) {
  for (const char* k : keys) {
    if (!obj.contains(k)) continue;
    const auto& v = obj.at(k);
    if (v.is_string()) return trim(v.get<std::string>());
    if (v.is_number()) return v.dump();
  }
  return {};
}

const json* array_field(const json& obj, std::initializer_list<const char*> keys) {
  for (const char* k : keys)
    if (obj.contains(k) && obj.at(k).is_array()) return &obj.at(k);
  return nullptr;
}

}  // namespace

DecompositionTrace parse_decomposition(const std::string& raw) {
  DecompositionTrace trace;
  trace.raw_model_text = raw;
  const auto cleaned = strip_code_fences(raw);
  auto parsed = json::parse(cleaned, nullptr, false);
  std::optional<json> obj;
  if (!parsed.is_discarded() && parsed.is_object()) {
    obj = std::move(parsed);
  } else {
    obj = extract_first_json(cleaned, '{');
  }
  if (!obj) throw Error(ErrorKind::DecompositionFailed, "first-stage reply contains no JSON object");

  std::size_t usable = 0;
  if (const json* subs = array_field(*obj, {"sub_questions", "sub_qas", "subquestions"})) {
    for (const auto& item : *subs) {
      if (!item.is_object()) continue;
      SubQA qa{text_field(item, {"question", "q", "sub_question"}),
               text_field(item, {"answer", "a"})};
      if (qa.question.empty() || qa.answer.empty()) continue;
      ++usable;
      if (trace.sub_qas.size() < kMaxSubQas) trace.sub_qas.push_back(std::move(qa));
    }
  }
  trace.dropped_sub_qas = usable - trace.sub_qas.size();

  std::size_t refs = 0;
  if (const json* arr = array_field(*obj, {"references", "reference"})) {
    for (const auto& item : *arr) {
      std::string text = item.is_string() ? trim(item.get<std::string>())
                         : item.is_object() ? text_field(item, {"text", "reference"})
                                            : std::string{};
      if (text.empty()) continue;
      ++refs;
      if (trace.references.size() < kMaxReferences) trace.references.push_back({std::move(text)});
    }
  }
  trace.dropped_references = refs - trace.references.size();

  if (trace.sub_qas.empty()) {
    throw Error(ErrorKind::DecompositionFailed, "first-stage reply has no usable sub-question");
  }
  if (trace.dropped_sub_qas > 0)
    log::info("decomposition: kept ", kMaxSubQas, " sub-questions, dropped ", trace.dropped_sub_qas);
  if (trace.dropped_references > 0)
    log::info("decomposition: kept ", kMaxReferences, " references, dropped ",
              trace.dropped_references);
  return trace;
}

DecompositionTrace decompose_first_step(const Gateway& gateway, const TemplateSet& templates,
                                        std::span<const CandidatePage> pages,
                                        const std::string& question, LanguageMode mode) {
  if (pages.empty() || pages.size() > kMaxFilterPages) {
    throw Error(ErrorKind::InvalidInput, "decompose_first_step expects 1..3 pages");
  }
  const auto tmpl = templates.first_stage(mode);
  ChatRequest req;
  req.system_prompt = tmpl.system;
  for (const auto& p : pages) req.user_parts.emplace_back(p.image_part());
  req.user_parts.emplace_back(TextPart{tmpl.render_body({{"question", question}})});
  req.response_format = ResponseFormat::Json;
  return parse_decomposition(gateway.chat(req).text);
}

// ---------------------------------------------------------------------------
// Structured answer

std::string to_string(ParseStatus status) {
  switch (status) {
    case ParseStatus::Clean: return "clean";
    case ParseStatus::Repaired: return "repaired";
    case ParseStatus::Failed: return "failed";
  }
  return "?";
}

json to_json(const StructuredAnswer& answer) {
  json j = {{"think", answer.think},
            {"raw_text", answer.raw_text},
            {"parse_status", to_string(answer.parse_status)}};
  j["answer_index"] = answer.answer_index ? json(*answer.answer_index) : json(nullptr);
  return j;
}

namespace {

struct Coerced {
  std::optional<long> index;
  bool exact = false;  // a plain integer, no interpretation needed
};

Coerced coerce_answer(const json& v, std::span<const std::string> options) {
  if (v.is_number_integer()) return {v.get<long>(), true};
  if (v.is_number_float()) {
    const double d = v.get<double>();
    if (std::isfinite(d) && std::floor(d) == d && std::abs(d) < 1e6)
      return {static_cast<long>(d), true};
    return {};
  }
  if (!v.is_string()) return {};
  const std::string original = trim(v.get<std::string>());
  const std::string s = fold_fullwidth(original);
  if (!s.empty() && s.size() <= 6 && std::all_of(s.begin(), s.end(), ::isdigit))
    return {std::stol(s), s == original};

  static const std::regex kDecoratedNumber(R"(^\(?\s*(\d{1,3})\s*[\).]?$)");
  static const std::regex kLetter(R"(^\(?\s*([A-Za-z])\s*[\).]?$)");
  std::smatch m;
  if (std::regex_match(s, m, kDecoratedNumber)) return {std::stol(m[1].str()), false};
  if (std::regex_match(s, m, kLetter)) {
    const char c = static_cast<char>(std::toupper(static_cast<unsigned char>(m[1].str()[0])));
    return {static_cast<long>(c - 'A' + 1), false};
  }
  if (!options.empty()) {
    std::optional<long> match;
    for (std::size_t i = 0; i < options.size(); ++i) {
      if (trim(options[i]) == original) {
        if (match) return {};  // ambiguous
        match = static_cast<long>(i + 1);
      }
    }
    if (match) return {match, false};
  }
  return {};
}

StructuredAnswer interpret(const json& obj, bool strict, std::size_t n_options,
                           std::span<const std::string> options, StructuredAnswer out) {
  if (!obj.is_object() || !obj.contains("answer")) return out;
  const Coerced c = coerce_answer(obj.at("answer"), options);
  if (!c.index || *c.index < 1 || static_cast<std::size_t>(*c.index) > n_options) return out;
  bool clean = strict && c.exact;
  if (obj.contains("think") && obj.at("think").is_string())
    out.think = obj.at("think").get<std::string>();
  if (trim(out.think).empty()) clean = false;
  out.answer_index = static_cast<int>(*c.index);
  out.parse_status = clean ? ParseStatus::Clean : ParseStatus::Repaired;
  return out;
}

}  // namespace

StructuredAnswer parse_structured_answer(const std::string& raw, std::size_t n_options,
                                         std::span<const std::string> options) {
  StructuredAnswer failed;
  failed.raw_text = raw;
  failed.parse_status = ParseStatus::Failed;
  if (n_options < 2) return failed;

  const auto strict = json::parse(trim(raw), nullptr, false);
  if (!strict.is_discarded() && strict.is_object()) {
    auto out = interpret(strict, true, n_options, options, failed);
    if (out.parse_status != ParseStatus::Failed) return out;
    // A well-formed object with an unusable answer is not retried.
    return failed;
  }

  const auto cleaned = strip_code_fences(raw);
  auto candidate = json::parse(cleaned, nullptr, false);
  std::optional<json> obj;
  if (!candidate.is_discarded() && candidate.is_object()) {
    obj = std::move(candidate);
  } else {
    obj = extract_first_json(cleaned, '{');
  }
  if (!obj) return failed;
  return interpret(*obj, false, n_options, options, failed);
}

std::string render_options(std::span<const std::string> options) {
  std::string out;
  for (std::size_t i = 0; i < options.size(); ++i) {
    if (i) out += '\n';
    out += std::to_string(i + 1) + ". " + options[i];
  }
  return out;
}

namespace {

std::string render_references(const DecompositionTrace* trace) {
  if (!trace || trace->references.empty()) return "（なし）";
  std::string out;
  for (const auto& r : trace->references) {
    if (!out.empty()) out += '\n';
    out += "- " + r.text;
  }
  return out;
}

std::string render_sub_qas(const DecompositionTrace* trace) {
  if (!trace || trace->sub_qas.empty()) return "（なし）";
  std::string out;
  for (std::size_t i = 0; i < trace->sub_qas.size(); ++i) {
    if (i) out += '\n';
    const auto n = std::to_string(i + 1);
    out += "Q" + n + ": " + trace->sub_qas[i].question + "\nA" + n + ": " + trace->sub_qas[i].answer;
  }
  return out;
}

}  // namespace

ChatRequest build_answer_request(const TemplateSet& templates,
                                 std::span<const CandidatePage> pages,
                                 const std::string& question,
                                 std::span<const std::string> options,
                                 const DecompositionTrace* trace) {
  if (options.size() != kOptionCount) {
    throw Error(ErrorKind::InvalidInput, "answer_second_step expects exactly 10 options, got " +
                                             std::to_string(options.size()));
  }
  if (pages.empty()) throw Error(ErrorKind::InvalidInput, "answer_second_step needs a page");
  const auto& tmpl = templates.second_stage();
  ChatRequest req;
  req.system_prompt = tmpl.system;
  for (const auto& p : pages) req.user_parts.emplace_back(p.image_part());
  req.user_parts.emplace_back(TextPart{tmpl.render_body({{"question", question},
                                                         {"options", render_options(options)},
                                                         {"references", render_references(trace)},
                                                         {"sub_qas", render_sub_qas(trace)}})});
  req.response_format = ResponseFormat::Json;
  return req;
}

StructuredAnswer answer_second_step(const Gateway& gateway, const TemplateSet& templates,
                                    std::span<const CandidatePage> pages,
                                    const std::string& question,
                                    std::span<const std::string> options,
                                    const DecompositionTrace* trace) {
  const auto req = build_answer_request(templates, pages, question, options, trace);
  const auto response = gateway.chat(req);
  auto answer = parse_structured_answer(response.text, options.size(), options);
  if (answer.parse_status == ParseStatus::Failed)
    log::info("second stage: unparseable answer treated as abstention");
  return answer;
}

}  // namespace docqa
