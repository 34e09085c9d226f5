#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "docqa/region_refine.hpp"
#include "support/fn_backend.hpp"

using namespace docqa;
using testing_support::FnBackend;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("docqa_region_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected docqa::Error");
  return ErrorKind::Config;
}

const TemplateSet& templates() {
  static const TemplateSet t = TemplateSet::load(TemplateSet::default_dir());
  return t;
}

MultiVectorEmbedding unit_row(double cos) {
  return MultiVectorEmbedding::from_rows({{cos, std::sqrt(1.0 - cos * cos)}});
}

// One hit whose page scores `original` against the query [1, 0]; the crop
// embedding scores `crop`.
struct Setup {
  fs::path dir;
  std::vector<CandidatePage> hits;
  RefineContext ctx;
  MultiVectorEmbedding query = MultiVectorEmbedding::from_rows({{1.0, 0.0}});
};

Setup make_setup(const std::string& name, double original, double crop, std::string reply) {
  Setup s;
  s.dir = scratch(name);
  const auto page = s.dir / "doc_0001.png";
  write_png(page, make_test_image(200, 100, 3));
  s.hits.push_back({"doc", 1, 1, original, "doc_0001", page, false});
  auto backend = std::make_shared<FnBackend>(
      [reply](const ChatRequest&) { return reply; },
      [crop](const EmbedPayload&) { return unit_row(crop); });
  s.ctx = RefineContext{Gateway(backend, "region"), Gateway(backend, "embed"), &templates(),
                        s.dir / "crops"};
  return s;
}

}  // namespace

TEST_CASE("region reply parsing") {
  auto r = parse_region_reply(R"({"analysis":["bars"],"bbox":[0.1,0.2,0.6,0.9],"confidence":0.8})");
  CHECK(r.bbox == std::array<double, 4>{0.1, 0.2, 0.6, 0.9});
  CHECK(r.confidence == 0.8);
  CHECK(r.source == RegionSource::Model);

  CHECK(kind_of([] { parse_region_reply(R"({"bbox":[0.3,0.3,0.3,0.8],"confidence":0.9})"); }) ==
        ErrorKind::LocalizationFailed);

  r = parse_region_reply(R"({"bbox":[-0.1,0.0,1.2,0.5],"confidence":0.9})");
  CHECK(r.bbox == std::array<double, 4>{0.0, 0.0, 1.0, 0.5});

  r = parse_region_reply("```json\n{\"coords\":[0,0,1,1],\"alpha\":1.7}\n```");
  CHECK(r.confidence == 1.0);

  CHECK(kind_of([] { parse_region_reply("top left corner"); }) == ErrorKind::LocalizationFailed);
  CHECK(kind_of([] { parse_region_reply(R"({"bbox":[0,0,1],"confidence":1})"); }) ==
        ErrorKind::LocalizationFailed);
  CHECK(kind_of([] { parse_region_reply(R"({"bbox":[0,0,1,1]})"); }) ==
        ErrorKind::LocalizationFailed);
  CHECK(kind_of([] { parse_region_reply(R"({"bbox":[0.6,0.2,0.1,0.9],"confidence":1})"); }) ==
        ErrorKind::LocalizationFailed);
}

TEST_CASE("crop arithmetic") {
  const auto img = make_test_image(1000, 800, 1);
  const auto region = AnswerRegion::make({0.1, 0.2, 0.6, 0.9}, 1.0, RegionSource::Manual);
  CHECK(region_pixels(region, 1000, 800) == PixelBox{100, 160, 600, 720});
  const auto c = crop_region(img, region);
  CHECK(c.width == 500);
  CHECK(c.height == 560);
  // Top-left pixel of the crop is pixel (100, 160) of the original.
  CHECK(c.rgba[0] == img.rgba[(160 * 1000 + 100) * 4]);

  const auto whole = crop_region(img, AnswerRegion::make({0, 0, 1, 1}, 1.0, RegionSource::Model));
  CHECK(whole == img);

  const auto thin = make_test_image(100, 500, 2);
  CHECK(kind_of([&] {
          crop_region(thin, AnswerRegion::make({0.0, 0.0, 0.1, 1.0}, 1.0, RegionSource::Model));
        }) == ErrorKind::LocalizationFailed);
  CHECK(crop_image_id("doc_0003", PixelBox{1, 2, 3, 4}) == "doc_0003@1,2,3,4");
}

TEST_CASE("refine: strictly better crop replaces the hit") {
  auto s = make_setup("better", 0.7, 0.9, R"({"bbox":[0.1,0.2,0.6,0.9],"confidence":0.8})");
  const auto r = refine_retrieval_set(s.ctx, s.query, s.hits, "q");
  REQUIRE(r.pages.size() == 1);
  CHECK(r.pages[0].cropped);
  CHECK(r.pages[0].score == doctest::Approx(0.9));
  CHECK(r.pages[0].image_id == "doc_0001@20,20,120,90");
  CHECK(r.pages[0].rank == 1);
  CHECK(read_png(r.pages[0].image_path).width == 100);
  CHECK(r.decisions[0].outcome == "replaced");
}

TEST_CASE("refine: worse or equal crop keeps the original") {
  auto s = make_setup("worse", 0.7, 0.5, R"({"bbox":[0.1,0.2,0.6,0.9],"confidence":0.8})");
  auto r = refine_retrieval_set(s.ctx, s.query, s.hits, "q");
  CHECK(r.pages[0] == s.hits[0]);
  CHECK(r.decisions[0].outcome == "kept");
  CHECK(*r.decisions[0].crop_score == doctest::Approx(0.5));

  s.hits[0].score = unit_row(0.5).row(0)[0];
  r = refine_retrieval_set(s.ctx, s.query, s.hits, "q");
  CHECK(r.pages[0] == s.hits[0]);
}

TEST_CASE("refine: low confidence skips regardless of scores") {
  auto s = make_setup("alpha", 0.1, 0.99, R"({"bbox":[0.1,0.2,0.6,0.9],"confidence":0.3})");
  const auto r = refine_retrieval_set(s.ctx, s.query, s.hits, "q");
  CHECK(r.pages[0] == s.hits[0]);
  CHECK(r.decisions[0].outcome == "skipped");
  CHECK_FALSE(r.decisions[0].crop_score);
}

TEST_CASE("refine: localization failure and crop embedding failure keep the hit") {
  auto s = make_setup("fail", 0.1, 0.99, "no idea");
  auto r = refine_retrieval_set(s.ctx, s.query, s.hits, "q");
  CHECK(r.pages[0] == s.hits[0]);

  auto flaky = std::make_shared<FnBackend>(
      [](const ChatRequest&) { return std::string(R"({"bbox":[0,0,1,1],"confidence":1})"); },
      [](const EmbedPayload&) -> MultiVectorEmbedding {
        throw Error(ErrorKind::BackendUnavailable, "down");
      });
  s.ctx.locator = Gateway(flaky, "region");
  s.ctx.embedder = Gateway(flaky, "embed");
  r = refine_retrieval_set(s.ctx, s.query, s.hits, "q");
  CHECK(r.pages[0] == s.hits[0]);
  CHECK(r.decisions[0].outcome == "kept");
}

TEST_CASE("refine: manual regions bypass the locator and carry full confidence") {
  auto s = make_setup("manual", 0.7, 0.9, "never used");
  auto counting = std::make_shared<FnBackend>(
      [](const ChatRequest&) -> std::string { FAIL("locator must not be called"); return ""; },
      [](const EmbedPayload&) { return unit_row(0.9); });
  s.ctx.locator = Gateway(counting, "region");
  s.ctx.embedder = Gateway(counting, "embed");
  s.hits.push_back(s.hits[0]);
  s.hits[1].page_no = 2;
  s.hits[1].rank = 2;

  const std::vector<ManualRegion> manual{{"doc", 1, {0.0, 0.0, 0.5, 0.5}}};
  const auto r = refine_retrieval_set(s.ctx, s.query, s.hits, "q", &manual);
  REQUIRE(r.pages.size() == 2);
  CHECK(r.pages[0].cropped);
  CHECK(r.decisions[0].region->source == RegionSource::Manual);
  CHECK(r.decisions[0].region->confidence == 1.0);
  CHECK(r.pages[1] == s.hits[1]);
}

TEST_CASE("refine: already-refined set is left unchanged") {
  auto s = make_setup("idem", 0.7, 0.9, R"({"bbox":[0.1,0.2,0.6,0.9],"confidence":0.8})");
  const auto once = refine_retrieval_set(s.ctx, s.query, s.hits, "q");
  const auto twice = refine_retrieval_set(s.ctx, s.query, once.pages, "q");
  CHECK(twice.pages == once.pages);
}

TEST_CASE("manual regions file") {
  const auto dir = scratch("manual_file");
  std::ofstream(dir / "m.json")
      << R"({"q1": [{"doc_id": "d", "page_no": 3, "bbox": [0.1, 0.2, 0.6, 0.9]}]})";
  const auto m = load_manual_regions(dir / "m.json");
  REQUIRE(m.at("q1").size() == 1);
  CHECK(m.at("q1")[0].page_no == 3);
  std::ofstream(dir / "bad.json") << R"({"q1": [{"doc_id": "d"}]})";
  CHECK(kind_of([&] { load_manual_regions(dir / "bad.json"); }) == ErrorKind::Format);
  CHECK(kind_of([&] { load_manual_regions(dir / "none.json"); }) == ErrorKind::NotFound);
}

TEST_CASE("refine: seeded scenarios never lower the total score") {
  const auto dir = scratch("mono");
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 1 + rng() % 3;
    std::vector<CandidatePage> hits;
    for (std::size_t i = 0; i < n; ++i) {
      const auto path = dir / ("p" + std::to_string(trial) + "_" + std::to_string(i) + ".png");
      write_png(path, make_test_image(80 + rng() % 200, 80 + rng() % 200, trial));
      hits.push_back({"d", static_cast<std::uint32_t>(i + 1), static_cast<std::uint32_t>(i + 1),
                      u(rng), path.stem().string(), path, false});
    }
    const double crop_cos = u(rng);
    const double x0 = u(rng) * 0.5, y0 = u(rng) * 0.5;
    const double alpha = u(rng);
    const auto reply = nlohmann::json{{"bbox", {x0, y0, x0 + 0.5, y0 + 0.5}}, {"confidence", alpha}}.dump();
    auto backend = std::make_shared<FnBackend>([reply](const ChatRequest&) { return reply; },
                                               [crop_cos](const EmbedPayload&) { return unit_row(crop_cos); });
    RefineContext ctx{Gateway(backend, "r"), Gateway(backend, "e"), &templates(), dir / "crops"};
    const auto r = refine_retrieval_set(ctx, MultiVectorEmbedding::from_rows({{1.0, 0.0}}), hits, "q");
    REQUIRE(r.pages.size() == n);
    double before = 0, after = 0;
    for (std::size_t i = 0; i < n; ++i) {
      before += hits[i].score;
      after += r.pages[i].score;
      const bool expect = alpha >= 0.5 && unit_row(crop_cos).row(0)[0] > hits[i].score;
      CHECK(r.pages[i].cropped == expect);
    }
    CHECK(after >= before);
  }
}
