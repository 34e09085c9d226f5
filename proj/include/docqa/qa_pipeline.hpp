#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "docqa/gateway.hpp"
#include "docqa/prompts.hpp"
#include "docqa/retrieval.hpp"
#include "json.hpp"

namespace docqa {

inline constexpr std::size_t kMaxFilterPages = 3;
inline constexpr std::size_t kMaxSubQas = 8;
inline constexpr std::size_t kMaxReferences = 8;
inline constexpr std::size_t kOptionCount = 10;

/// A retrieved page together with the image that represents it downstream.
/// After region refinement the image may be a crop of the original page.
struct CandidatePage {
  std::string doc_id;
  std::uint32_t page_no = 0;
  std::uint32_t rank = 0;
  double score = 0.0;
  std::string image_id;
  std::filesystem::path image_path;
  bool cropped = false;

  ImagePart image_part() const { return {image_id, image_path}; }
  friend bool operator==(const CandidatePage&, const CandidatePage&) = default;
};

nlohmann::json to_json(const CandidatePage& page);

struct FilterResult {
  std::vector<CandidatePage> pages;  // 1..3, in rank order
  bool fallback = false;
  std::string raw_reply;
};

/// Page ranks (1-based positions in the presented list) named by a filter
/// reply, deduplicated, ascending. Entries outside 1..page_count are dropped.
std::vector<std::size_t> parse_filter_reply(const std::string& reply, std::size_t page_count);

FilterResult filter_pages(const Gateway& gateway, const TemplateSet& templates,
                          const std::string& question, std::span<const CandidatePage> pages);

struct SubQA {
  std::string question;
  std::string answer;
  friend bool operator==(const SubQA&, const SubQA&) = default;
};

struct ReferenceNote {
  std::string text;
  friend bool operator==(const ReferenceNote&, const ReferenceNote&) = default;
};

struct DecompositionTrace {
  std::vector<SubQA> sub_qas;             // 1..8
  std::vector<ReferenceNote> references;  // 0..8
  std::string raw_model_text;
  std::size_t dropped_sub_qas = 0;
  std::size_t dropped_references = 0;
};

nlohmann::json to_json(const DecompositionTrace& trace);

/// Parses a first-stage reply; throws Error(DecompositionFailed) when no
/// usable sub-question is present.
DecompositionTrace parse_decomposition(const std::string& raw);

DecompositionTrace decompose_first_step(const Gateway& gateway, const TemplateSet& templates,
                                        std::span<const CandidatePage> pages,
                                        const std::string& question,
                                        LanguageMode mode = LanguageMode::Bilingual);

enum class ParseStatus { Clean, Repaired, Failed };
std::string to_string(ParseStatus status);

struct StructuredAnswer {
  std::string think;
  std::optional<int> answer_index;  // 1-based, present iff status != Failed
  std::string raw_text;
  ParseStatus parse_status = ParseStatus::Failed;
};

nlohmann::json to_json(const StructuredAnswer& answer);

/// Strict parse first, then a repair pass. When `options` is non-empty the
/// answer may also be given as the exact option text.
StructuredAnswer parse_structured_answer(const std::string& raw, std::size_t n_options,
                                         std::span<const std::string> options = {});

/// "1. first\n2. second\n..."
std::string render_options(std::span<const std::string> options);

/// Builds the second-stage request. Exposed so prompt assembly can be checked
/// byte for byte.
ChatRequest build_answer_request(const TemplateSet& templates,
                                 std::span<const CandidatePage> pages,
                                 const std::string& question,
                                 std::span<const std::string> options,
                                 const DecompositionTrace* trace);

StructuredAnswer answer_second_step(const Gateway& gateway, const TemplateSet& templates,
                                    std::span<const CandidatePage> pages,
                                    const std::string& question,
                                    std::span<const std::string> options,
                                    const DecompositionTrace* trace);

}  // namespace docqa
