#include "docqa/region_refine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "docqa/json_extract.hpp"
#include "docqa/log.hpp"

namespace docqa {

using nlohmann::json;
namespace fs = std::filesystem;

std::string to_string(RegionSource source) {
  return source == RegionSource::Manual ? "manual" : "model";
}

AnswerRegion AnswerRegion::make(std::array<double, 4> bbox, double confidence,
                                RegionSource source) {
  for (double v : bbox) {
    if (!std::isfinite(v)) throw Error(ErrorKind::LocalizationFailed, "non-finite bbox coordinate");
  }
  if (!std::isfinite(confidence)) {
    throw Error(ErrorKind::LocalizationFailed, "non-finite confidence");
  }
  for (double& v : bbox) v = std::clamp(v, 0.0, 1.0);
  const double w = bbox[2] - bbox[0];
  const double h = bbox[3] - bbox[1];
  if (w < kMinRegionExtent || h < kMinRegionExtent) {
    throw Error(ErrorKind::LocalizationFailed,
                "degenerate region (normalized " + std::to_string(w) + " x " + std::to_string(h) + ")");
  }
  AnswerRegion r;
  r.bbox = bbox;
  r.confidence = std::clamp(confidence, 0.0, 1.0);
  r.source = source;
  return r;
}

json to_json(const AnswerRegion& region) {
  return {{"bbox", region.bbox},
          {"confidence", region.confidence},
          {"source", to_string(region.source)}};
}

AnswerRegion parse_region_reply(const std::string& reply) {
  const auto cleaned = strip_code_fences(reply);
  auto parsed = json::parse(cleaned, nullptr, false);
  std::optional<json> obj;
  if (!parsed.is_discarded() && parsed.is_object()) {
    obj = std::move(parsed);
  } else {
    obj = extract_first_json(cleaned, '{');
  }
  if (!obj) throw Error(ErrorKind::LocalizationFailed, "region reply has no JSON object");

  const json* box = nullptr;
  for (const char* k : {"bbox", "coords", "coordinates", "box"})
    if (obj->contains(k) && obj->at(k).is_array()) {
      box = &obj->at(k);
      break;
    }
  if (!box || box->size() != 4) {
    throw Error(ErrorKind::LocalizationFailed, "region reply lacks a 4-element bbox");
  }
  std::array<double, 4> coords{};
  for (std::size_t i = 0; i < 4; ++i) {
    if (!(*box)[i].is_number()) throw Error(ErrorKind::LocalizationFailed, "non-numeric bbox entry");
    coords[i] = (*box)[i].get<double>();
  }
  double confidence = 0.0;
  bool have_confidence = false;
  for (const char* k : {"confidence", "alpha"}) {
    if (obj->contains(k) && obj->at(k).is_number()) {
      confidence = obj->at(k).get<double>();
      have_confidence = true;
      break;
    }
  }
  if (!have_confidence) throw Error(ErrorKind::LocalizationFailed, "region reply lacks confidence");
  return AnswerRegion::make(coords, confidence, RegionSource::Model);
}

AnswerRegion locate_answer_region(const Gateway& gateway, const TemplateSet& templates,
                                  const ImagePart& image, const std::string& question) {
  const auto& tmpl = templates.region();
  ChatRequest req;
  req.system_prompt = tmpl.system;
  req.user_parts.emplace_back(image);
  req.user_parts.emplace_back(TextPart{tmpl.render_body({{"question", question}})});
  req.response_format = ResponseFormat::Json;
  return parse_region_reply(gateway.chat(req).text);
}

PixelBox region_pixels(const AnswerRegion& region, std::uint32_t width, std::uint32_t height) {
  auto at = [](double coord, std::uint32_t dim) {
    return static_cast<std::uint32_t>(std::lround(coord * static_cast<double>(dim)));
  };
  return {at(region.bbox[0], width), at(region.bbox[1], height), at(region.bbox[2], width),
          at(region.bbox[3], height)};
}

Image crop_region(const Image& image, const AnswerRegion& region) {
  const auto box = region_pixels(region, image.width, image.height);
  if (box.x1 <= box.x0 || box.y1 <= box.y0 || box.width() < kMinCropPixels ||
      box.height() < kMinCropPixels) {
    throw Error(ErrorKind::LocalizationFailed,
                "crop would be " + std::to_string(box.x1 > box.x0 ? box.width() : 0) + "x" +
                    std::to_string(box.y1 > box.y0 ? box.height() : 0) + " px, below " +
                    std::to_string(kMinCropPixels) + " px per side");
  }
  return crop(image, box);
}

std::string crop_image_id(const std::string& image_id, const PixelBox& box) {
  return image_id + "@" + std::to_string(box.x0) + "," + std::to_string(box.y0) + "," +
         std::to_string(box.x1) + "," + std::to_string(box.y1);
}

ManualRegions load_manual_regions(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::NotFound, "manual regions file not found: " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Format, "manual regions " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw Error(ErrorKind::Format, "manual regions: top level must be an object");
  ManualRegions out;
  for (const auto& [qid, list] : j.items()) {
    if (!list.is_array()) throw Error(ErrorKind::Format, "manual regions for " + qid + ": not a list");
    for (const auto& item : list) {
      try {
        ManualRegion m;
        m.doc_id = item.at("doc_id").get<std::string>();
        m.page_no = item.at("page_no").get<std::uint32_t>();
        m.bbox = item.at("bbox").get<std::array<double, 4>>();
        out[qid].push_back(std::move(m));
      } catch (const json::exception& e) {
        throw Error(ErrorKind::Format, "manual regions for " + qid + ": " + e.what());
      }
    }
  }
  return out;
}

json to_json(const RefineDecision& d) {
  json j = {{"rank", d.rank},
            {"outcome", d.outcome},
            {"reason", d.reason},
            {"original_score", d.original_score}};
  j["region"] = d.region ? to_json(*d.region) : json(nullptr);
  j["crop_score"] = d.crop_score ? json(*d.crop_score) : json(nullptr);
  return j;
}

namespace {

const ManualRegion* find_manual(const std::vector<ManualRegion>& list, const CandidatePage& hit) {
  for (const auto& m : list)
    if (m.doc_id == hit.doc_id && m.page_no == hit.page_no) return &m;
  return nullptr;
}

}  // namespace

RefineResult refine_retrieval_set(const RefineContext& ctx, const MultiVectorEmbedding& query,
                                  std::span<const CandidatePage> hits,
                                  const std::string& question,
                                  const std::vector<ManualRegion>* manual) {
  if (hits.empty() || hits.size() > kMaxFilterPages) {
    throw Error(ErrorKind::InvalidInput, "refine_retrieval_set expects 1..3 hits");
  }
  if (!manual && !ctx.templates) {
    throw Error(ErrorKind::Config, "refine_retrieval_set: no templates for model localization");
  }
  RefineResult result;
  for (const auto& hit : hits) {
    RefineDecision d;
    d.rank = hit.rank;
    d.original_score = hit.score;
    auto keep = [&](std::string outcome, std::string reason) {
      d.outcome = std::move(outcome);
      d.reason = std::move(reason);
      result.pages.push_back(hit);
      result.decisions.push_back(d);
    };

    if (hit.cropped) {
      keep("skipped", "already a crop");
      continue;
    }

    // Localization.
    if (manual) {
      const ManualRegion* m = find_manual(*manual, hit);
      if (!m) {
        keep("skipped", "no manual region for this page");
        continue;
      }
      try {
        d.region = AnswerRegion::make(m->bbox, 1.0, RegionSource::Manual);
      } catch (const Error& e) {
        keep("skipped", e.detail());
        continue;
      }
    } else {
      try {
        d.region = locate_answer_region(ctx.locator, *ctx.templates, hit.image_part(), question);
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::FixtureMissing) throw;
        log::info("region: localization skipped for ", hit.image_id, ": ", e.what());
        keep("skipped", e.what());
        continue;
      }
    }
    if (d.region->confidence < kConfidenceGate) {
      keep("skipped", "confidence below gate");
      continue;
    }

    // Crop and score.
    const Image page = read_png(hit.image_path);
    Image cropped;
    try {
      cropped = crop_region(page, *d.region);
    } catch (const Error& e) {
      keep("skipped", e.detail());
      continue;
    }
    const auto box = region_pixels(*d.region, page.width, page.height);
    const auto id = crop_image_id(hit.image_id, box);
    fs::create_directories(ctx.crops_dir);
    const auto path = ctx.crops_dir / (id + ".png");
    write_png(path, cropped);

    double crop_score = 0.0;
    try {
      crop_score = late_interaction_score(query, ctx.embedder.embed(EmbedPayload::image(id, path)));
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::FixtureMissing) throw;
      log::warn("region: crop embedding failed for ", id, ": ", e.what());
      keep("kept", std::string("crop embedding failed: ") + e.what());
      continue;
    }
    d.crop_score = crop_score;
    if (!(crop_score > hit.score)) {
      keep("kept", "crop does not score higher");
      continue;
    }
    CandidatePage replaced = hit;
    replaced.image_id = id;
    replaced.image_path = path;
    replaced.score = crop_score;
    replaced.cropped = true;
    d.outcome = "replaced";
    d.reason = "crop scores higher";
    result.pages.push_back(std::move(replaced));
    result.decisions.push_back(std::move(d));
  }
  return result;
}

}  // namespace docqa
