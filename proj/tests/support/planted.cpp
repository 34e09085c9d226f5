#include "support/planted.hpp"

#include <fstream>
#include <map>
#include <regex>
#include <sstream>

#include "docqa/image.hpp"
#include "docqa/ingest.hpp"
#include "support/fn_backend.hpp"

namespace testing_support {

namespace fs = std::filesystem;
using namespace docqa;
using nlohmann::json;

namespace {

const std::vector<std::string> kDocs = {"docA", "docB", "docC", "docD", "docE"};
constexpr std::uint32_t kPagesPerDoc = 4;

std::vector<QuestionItem> make_dataset() {
  std::vector<QuestionItem> out;
  for (int i = 1; i <= 20; ++i) {
    QuestionItem q;
    char id[8];
    std::snprintf(id, sizeof(id), "q%02d", i);
    q.question_id = id;
    q.doc_id = kDocs[static_cast<std::size_t>(i - 1) % kDocs.size()];
    q.question = "設問" + std::to_string(i) + ": グラフで最も大きい値を示す項目はどれか";
    for (int o = 1; o <= 10; ++o)
      q.options.push_back("項目" + std::to_string(i) + "-" + std::to_string(o));
    q.gold = (i * 7) % 10 + 1;  // golds 8,5,2,9,6,3,10,7,4,1,...
    out.push_back(std::move(q));
  }
  return out;
}

// "N. text" lines of the rendered option list.
std::map<std::string, int> shown_options(const std::string& user_text) {
  static const std::regex kLine(R"(^(\d+)\. (.+)$)");
  std::map<std::string, int> out;
  std::istringstream in(user_text);
  std::string line;
  while (std::getline(in, line)) {
    std::smatch m;
    if (std::regex_match(line, m, kLine)) out[m[2].str()] = std::stoi(m[1].str());
  }
  return out;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

void record_scenario(const PipelineConfig& cfg, const std::vector<QuestionItem>& dataset,
                     const PageIndex& index, std::shared_ptr<Backend> backend,
                     const std::string& scenario_id, const fs::path& fixtures_dir) {
  const auto templates = TemplateSet::load(TemplateSet::default_dir());
  const auto report =
      run_benchmark(cfg, dataset, index, StageBackends::uniform(std::move(backend)), templates);
  if (report.n_errored != 0) throw std::runtime_error("recording run had errored questions");

  Transcript t;
  std::ifstream in(cfg.work_dir / "transcript.jsonl");
  std::string line;
  while (std::getline(in, line)) t.append(json::parse(line));
  auto scenario = t.to_scenario(scenario_id);
  scenario.embeddings.clear();  // hash embeddings regenerate them
  scenario.hash_embeddings = true;
  scenario.hash_dim = kHashDim;
  scenario.hash_tokens = kHashTokens;
  scenario.save(fixtures_dir);
}

}  // namespace

std::shared_ptr<Backend> scripted_backend(const std::vector<QuestionItem>& dataset,
                                          int fixed_option) {
  const auto templates = TemplateSet::load(TemplateSet::default_dir());
  std::map<std::string, std::string> gold_text;
  for (const auto& q : dataset)
    if (q.gold) gold_text[q.question] = q.options[static_cast<std::size_t>(*q.gold - 1)];

  auto reply = [templates, gold_text, fixed_option](const ChatRequest& req) -> std::string {
    const auto& sys = req.system_prompt;
    if (sys == templates.filter().system) return "[1, 2]";
    if (sys == templates.region().system)
      return R"({"analysis":["bars: needed"],"bbox":[0.05,0.1,0.9,0.8],"confidence":0.9})";
    if (sys == templates.second_stage().system) {
      if (fixed_option) return R"({"think":"固定の回答","answer":)" + std::to_string(fixed_option) + "}";
      const auto text = req.user_text();
      const auto shown = shown_options(text);
      for (const auto& [question, gold] : gold_text) {
        if (text.find(question) == std::string::npos) continue;
        return json{{"think", "グラフから読み取った"}, {"answer", shown.at(gold)}}.dump();
      }
      return R"({"think":"不明","answer":null})";
    }
    return R"({"sub_questions":[{"question":"どの軸を読むか","answer":"縦軸"}],"references":["単位: %"]})";
  };
  return std::make_shared<FnBackend>(reply, kHashDim, kHashTokens);
}

PlantedFixture build_planted_fixture(const fs::path& root) {
  PlantedFixture f;
  f.root = root;
  fs::remove_all(root);
  f.pages_dir = root / "pages";
  f.fixtures_dir = root / "fixtures";
  fs::create_directories(f.pages_dir);
  fs::create_directories(f.fixtures_dir);

  // Pages and index.
  MockScenario hash_only;
  hash_only.scenario_id = "hash";
  hash_only.hash_embeddings = true;
  hash_only.hash_dim = kHashDim;
  hash_only.hash_tokens = kHashTokens;
  Gateway embedder(std::make_shared<MockBackend>(hash_only), "embed");
  std::vector<PageRecord> records;
  std::uint32_t seed = 1;
  for (const auto& doc : kDocs) {
    for (std::uint32_t p = 1; p <= kPagesPerDoc; ++p)
      write_png(f.pages_dir / page_file_name(doc, p), make_test_image(160, 120, seed++));
    const auto embedded = embed_pages(embedder, load_page_set(f.pages_dir, doc));
    for (auto& r : to_page_records(embedded)) records.push_back(std::move(r));
  }
  f.index_path = root / "pages.lidx";
  const auto index = build_index(std::move(records));
  save_index(index, f.index_path);

  // Dataset.
  f.dataset = make_dataset();
  f.dataset_path = root / "dataset.jsonl";
  {
    std::ofstream out(f.dataset_path);
    for (const auto& q : f.dataset) out << to_json(q).dump() << "\n";
  }

  // Scenarios, recorded through the real pipeline.
  PipelineConfig planted;
  planted.use_region_refine = true;
  planted.seed = 7;
  planted.work_dir = root / "record-planted";
  record_scenario(planted, f.dataset, index, scripted_backend(f.dataset), "planted", f.fixtures_dir);

  PipelineConfig fixed;
  fixed.use_voting = false;
  fixed.seed = 7;
  fixed.work_dir = root / "record-fixed";
  record_scenario(fixed, f.dataset, index, scripted_backend(f.dataset, kFixedOption), "fixed",
                  f.fixtures_dir);

  f.planted_config = root / "planted.yaml";
  write_text(f.planted_config,
             "# planted-answer run: every stage on\n"
             "pipeline:\n"
             "  k: 3\n"
             "  seed: 7\n"
             "  use_region_refine: true\n"
             "  work_dir: work-planted\n"
             "backend:\n"
             "  kind: mock\n"
             "  fixtures_dir: fixtures\n"
             "  scenario: planted\n");
  f.fixed_config = root / "fixed.yaml";
  write_text(f.fixed_config,
             "pipeline:\n"
             "  seed: 7\n"
             "  use_voting: false\n"
             "  work_dir: work-fixed\n"
             "backend:\n"
             "  kind: mock\n"
             "  fixtures_dir: fixtures\n"
             "  scenario: fixed\n");
  return f;
}

}  // namespace testing_support
