#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace docqa {

enum class PromptStage { First, Second, Filter, Region };
enum class LanguageMode { English, Japanese, Bilingual };

std::string to_string(PromptStage stage);
std::string to_string(LanguageMode mode);

/// A prompt with a system part and a user body. Placeholders are written
/// {name}; only the names a stage declares are substituted.
struct PromptTemplate {
  PromptStage stage = PromptStage::First;
  LanguageMode language = LanguageMode::English;
  std::string system;
  std::string body;

  static const std::vector<std::string>& required_placeholders(PromptStage stage);

  /// Throws Error(Config) if a required placeholder is missing.
  void validate() const;

  std::string render_body(const std::map<std::string, std::string>& values) const;

  /// Parses "system text\n---\nbody text"; without a separator the whole file
  /// is the body.
  static PromptTemplate parse(PromptStage stage, LanguageMode language, const std::string& text);
};

/// The template directory:
///   first_en.txt   first stage, English block
///   first_ja.txt   first stage, Japanese block
///   second_ja.txt  second stage (answer), Japanese
///   filter.txt     page relevance filter
///   region.txt     answer-region localization
class TemplateSet {
 public:
  static TemplateSet load(const std::filesystem::path& dir);
  static std::filesystem::path default_dir();

  /// English-only, Japanese-only or both blocks (English first) in one prompt.
  PromptTemplate first_stage(LanguageMode mode) const;
  const PromptTemplate& second_stage() const { return second_ja_; }
  const PromptTemplate& filter() const { return filter_; }
  const PromptTemplate& region() const { return region_; }

  /// Stable hash over every template's text.
  std::string content_hash() const;

 private:
  PromptTemplate first_en_, first_ja_, second_ja_, filter_, region_;
};

}  // namespace docqa
