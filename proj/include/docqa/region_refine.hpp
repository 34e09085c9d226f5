#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "docqa/gateway.hpp"
#include "docqa/image.hpp"
#include "docqa/prompts.hpp"
#include "docqa/qa_pipeline.hpp"

namespace docqa {

inline constexpr double kMinRegionExtent = 0.05;
inline constexpr std::uint32_t kMinCropPixels = 32;
inline constexpr double kConfidenceGate = 0.5;

enum class RegionSource { Model, Manual };
std::string to_string(RegionSource source);

struct AnswerRegion {
  std::array<double, 4> bbox{};  // x1, y1, x2, y2, normalized, top-left origin
  double confidence = 0.0;
  RegionSource source = RegionSource::Model;

  /// Clamps into [0,1]; throws Error(LocalizationFailed) on non-finite input
  /// or an extent below kMinRegionExtent.
  static AnswerRegion make(std::array<double, 4> bbox, double confidence, RegionSource source);
};

nlohmann::json to_json(const AnswerRegion& region);

/// Reads {"bbox": [x1,y1,x2,y2], "confidence": a} (also "coords"/"alpha").
/// Throws Error(LocalizationFailed) if nothing usable is present.
AnswerRegion parse_region_reply(const std::string& reply);

AnswerRegion locate_answer_region(const Gateway& gateway, const TemplateSet& templates,
                                  const ImagePart& image, const std::string& question);

/// Pixel box at round(coord * dimension).
PixelBox region_pixels(const AnswerRegion& region, std::uint32_t width, std::uint32_t height);

/// Throws Error(LocalizationFailed) when either side is under kMinCropPixels.
Image crop_region(const Image& image, const AnswerRegion& region);

/// "{image_id}@x0,y0,x1,y1"
std::string crop_image_id(const std::string& image_id, const PixelBox& box);

struct ManualRegion {
  std::string doc_id;
  std::uint32_t page_no = 0;
  std::array<double, 4> bbox{};
};

/// question_id -> regions. File format:
///   {"q1": [{"doc_id": "d", "page_no": 3, "bbox": [0.1, 0.2, 0.6, 0.9]}]}
using ManualRegions = std::map<std::string, std::vector<ManualRegion>>;
ManualRegions load_manual_regions(const std::filesystem::path& path);

struct RefineDecision {
  std::uint32_t rank = 0;
  std::string outcome;  // replaced | kept | skipped
  std::string reason;
  std::optional<AnswerRegion> region;
  double original_score = 0.0;
  std::optional<double> crop_score;
};

nlohmann::json to_json(const RefineDecision& decision);

struct RefineResult {
  std::vector<CandidatePage> pages;  // same length and order as the input
  std::vector<RefineDecision> decisions;
};

struct RefineContext {
  Gateway locator;   // region prompt
  Gateway embedder;  // crop embeddings
  const TemplateSet* templates = nullptr;
  std::filesystem::path crops_dir;
};

/// Per hit: locate (or take the manual box), crop, embed and replace the hit
/// only if the crop scores strictly higher and the confidence passes the gate.
/// `manual`, when given, replaces model localization for the whole set; hits
/// it does not mention are left alone. Hits that are already crops are not
/// cropped again.
RefineResult refine_retrieval_set(const RefineContext& ctx, const MultiVectorEmbedding& query,
                                  std::span<const CandidatePage> hits,
                                  const std::string& question,
                                  const std::vector<ManualRegion>* manual = nullptr);

}  // namespace docqa
