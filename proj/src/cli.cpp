#include "docqa/cli.hpp"

#include <fstream>
#include <optional>

#include "CLI11.hpp"
#include "docqa/eval.hpp"
#include "docqa/ingest.hpp"
#include "docqa/log.hpp"

namespace docqa::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* sub, Common& c, const std::string& config_names = "--config") {
  sub->add_option(config_names, c.config, "Pipeline config file")->envname("DOCQA_CONFIG");
  sub->add_option("--seed", c.seed, "Overrides the config seed");
}

PipelineConfig load_config(const Common& c) {
  PipelineConfig cfg = c.config.empty() ? PipelineConfig{} : load_pipeline_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

TemplateSet load_templates(const PipelineConfig& cfg) {
  return TemplateSet::load(cfg.templates_dir.empty() ? TemplateSet::default_dir()
                                                     : cfg.templates_dir);
}

struct IngestArgs {
  Common common;
  std::string pdf, out_dir, rasterizer;
  int dpi = kDefaultDpi;
};

struct IndexArgs {
  Common common;
  std::string pages, out;
};

struct RetrieveArgs {
  Common common;
  std::string index, query, doc;
  std::size_t k = kDefaultTopK;
};

struct AskArgs {
  Common common;
  std::string index, question_file, work_dir, transcript;
};

struct EvalArgs {
  Common common;
  std::string index, dataset, report, work_dir;
  std::optional<std::size_t> parallelism;
};

void run_ingest(const IngestArgs& a, std::ostream& out) {
  const auto cfg = load_config(a.common);
  RasterizerConfig raster;
  if (!a.rasterizer.empty()) {
    raster.command_template = a.rasterizer;
  } else if (!cfg.rasterizer.empty()) {
    raster.command_template = cfg.rasterizer;
  }
  const auto set = rasterize_document(a.pdf, a.out_dir, a.dpi, raster);
  out << page_set_to_json(set).dump() << "\n";
}

void run_index(const IndexArgs& a, std::ostream& out) {
  const auto cfg = load_config(a.common);
  const auto docs = discover_doc_ids(a.pages);
  if (docs.empty()) throw Error(ErrorKind::InvalidInput, "no page images found in " + a.pages);
  const Gateway embedder(make_backend(cfg.backend_for("embed")), "embed");
  std::vector<PageRecord> records;
  for (const auto& doc : docs) {
    log::info("embedding ", doc);
    for (auto& r : to_page_records(embed_pages(embedder, load_page_set(a.pages, doc))))
      records.push_back(std::move(r));
  }
  const auto index = build_index(std::move(records));
  save_index(index, a.out);
  out << json{{"index", a.out}, {"documents", docs}, {"pages", index.size()}, {"dim", index.dim()}}.dump()
      << "\n";
}

void run_retrieve(const RetrieveArgs& a, std::ostream& out) {
  const auto cfg = load_config(a.common);
  const auto index = load_index(a.index);
  const Gateway embedder(make_backend(cfg.backend_for("embed")), "embed");
  const auto query = embedder.embed(EmbedPayload::query(a.query));
  std::optional<std::string> doc;
  if (!a.doc.empty()) {
    if (!index.contains_doc(a.doc)) throw Error(ErrorKind::NotFound, "document '" + a.doc + "' is not in the index");
    doc = a.doc;
  }
  for (const auto& h : retrieve_topk(index, query, a.k, doc)) {
    out << json{{"rank", h.rank},
                {"doc_id", h.doc_id},
                {"page_no", h.page_no},
                {"score", h.score},
                {"image_ref", index.find(h.doc_id, h.page_no)->image_ref}}
               .dump()
        << "\n";
  }
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::NotFound, "cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::Load, path.string() + ": " + e.what());
  }
}

void run_ask(const AskArgs& a, std::ostream& out) {
  const auto item = question_from_json(read_json_file(a.question_file), a.question_file);
  auto cfg = load_config(a.common);
  if (!a.work_dir.empty()) cfg.work_dir = a.work_dir;
  const auto index = load_index(a.index);
  const auto templates = load_templates(cfg);
  PipelineContext ctx{&cfg, &index, &templates, StageBackends::from_config(cfg), {}};
  if (!cfg.manual_regions.empty()) ctx.manual_regions = load_manual_regions(cfg.manual_regions);

  const auto run = run_question(ctx, item);
  if (!a.transcript.empty()) run.transcript->write_jsonl(a.transcript);
  // The row error already carries the originating module's error text.
  if (!run.row.error.empty()) throw std::runtime_error(run.row.error);
  out << run.audit.dump() << "\n";
}

void run_eval(const EvalArgs& a, std::ostream& out) {
  auto cfg = load_config(a.common);
  if (!a.work_dir.empty()) cfg.work_dir = a.work_dir;
  if (a.parallelism) cfg.parallelism = *a.parallelism;
  cfg.validate();
  const auto dataset = load_dataset(a.dataset);
  const auto index = load_index(a.index);
  const auto report = run_benchmark(cfg, dataset, index);
  write_report(report, a.report);
  out << json{{"public_score", report.public_score},
              {"n_questions", report.n_questions},
              {"n_correct", report.n_correct},
              {"n_errored", report.n_errored},
              {"n_resumed", report.n_resumed},
              {"report", a.report}}
             .dump()
      << "\n";
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Document question answering over page images", "docqa"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  IngestArgs ingest;
  auto* s_ingest = app.add_subcommand("ingest", "Rasterize a PDF into page images");
  s_ingest->add_option("--pdf", ingest.pdf, "PDF file")->required();
  s_ingest->add_option("--out", ingest.out_dir, "Output directory")->required();
  s_ingest->add_option("--dpi", ingest.dpi, "Render resolution")->check(CLI::Range(36, 1200));
  s_ingest->add_option("--rasterizer", ingest.rasterizer,
                       "Command template with {input} {dpi} {output}");
  add_common(s_ingest, ingest.common);

  IndexArgs index;
  auto* s_index = app.add_subcommand("index", "Embed page images into an index file");
  s_index->add_option("--pages", index.pages, "Directory of page images")->required();
  s_index->add_option("--out", index.out, "Index file to write")->required();
  add_common(s_index, index.common, "--config,--backend");

  RetrieveArgs retrieve;
  auto* s_retrieve = app.add_subcommand("retrieve", "Print the top-k pages for a query");
  s_retrieve->add_option("--index", retrieve.index, "Index file")->required();
  s_retrieve->add_option("--query", retrieve.query, "Query text")->required();
  s_retrieve->add_option("--k", retrieve.k, "Number of hits")->check(CLI::PositiveNumber);
  s_retrieve->add_option("--doc", retrieve.doc, "Restrict to one document");
  add_common(s_retrieve, retrieve.common);

  AskArgs ask;
  auto* s_ask = app.add_subcommand("ask", "Answer one question");
  s_ask->add_option("--index", ask.index, "Index file")->required();
  s_ask->add_option("--question-file", ask.question_file, "Question JSON")->required();
  s_ask->add_option("--work-dir", ask.work_dir, "Overrides the config work_dir");
  s_ask->add_option("--transcript", ask.transcript, "Write model calls as JSON lines");
  add_common(s_ask, ask.common);

  EvalArgs eval;
  auto* s_eval = app.add_subcommand("eval", "Run a benchmark and write a report");
  s_eval->add_option("--index", eval.index, "Index file")->required();
  s_eval->add_option("--dataset", eval.dataset, "Questions, JSON lines")->required();
  s_eval->add_option("--report", eval.report, "Report path (.json; a .csv is written beside it)")
      ->required();
  s_eval->add_option("--work-dir", eval.work_dir, "Overrides the config work_dir");
  s_eval->add_option("--parallelism", eval.parallelism, "Concurrent questions")
      ->check(CLI::PositiveNumber);
  add_common(s_eval, eval.common);
  s_eval->get_option("--config")->required();

  std::vector<std::string> argv_storage{"docqa"};
  argv_storage.insert(argv_storage.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& s : argv_storage) argv.push_back(s.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (s_ingest->parsed()) run_ingest(ingest, out);
    else if (s_index->parsed()) run_index(index, out);
    else if (s_retrieve->parsed()) run_retrieve(retrieve, out);
    else if (s_ask->parsed()) run_ask(ask, out);
    else if (s_eval->parsed()) run_eval(eval, out);
  } catch (const std::exception& e) {
    err << "docqa: " << e.what() << "\n";
    return kExitDomain;
  }
  return kExitOk;
}

}  // namespace docqa::cli
