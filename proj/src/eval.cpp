#include "docqa/eval.hpp"

#include <algorithm>
#include <cctype>
#include <atomic>
#include <fstream>
#include <iterator>
#include <mutex>
#include <set>
#include <thread>

#include "docqa/hash.hpp"
#include "docqa/json_extract.hpp"
#include "docqa/log.hpp"

namespace docqa {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Dataset

QuestionItem question_from_json(const json& j, const std::string& where) {
  auto fail = [&](const std::string& msg) -> Error { return Error(ErrorKind::Load, where + ": " + msg); };
  if (!j.is_object()) throw fail("expected a JSON object");
  auto text = [&](const char* key) {
    if (!j.contains(key) || !j.at(key).is_string()) throw fail(std::string("missing string field '") + key + "'");
    auto v = j.at(key).get<std::string>();
    if (trim(v).empty()) throw fail(std::string("field '") + key + "' is empty");
    return v;
  };
  QuestionItem item;
  item.question_id = text("question_id");
  item.doc_id = text("doc_id");
  item.question = text("question");
  if (!j.contains("options") || !j.at("options").is_array()) throw fail("missing 'options' array");
  const auto& opts = j.at("options");
  if (opts.size() != kOptionCount) {
    throw fail("expected 10 options, got " + std::to_string(opts.size()));
  }
  for (const auto& o : opts) {
    if (!o.is_string() || trim(o.get<std::string>()).empty()) throw fail("options must be non-empty strings");
    item.options.push_back(o.get<std::string>());
  }
  if (j.contains("gold") && !j.at("gold").is_null()) {
    const auto& g = j.at("gold");
    if (!g.is_number_integer() || g.get<long>() < 1 || g.get<long>() > 10) {
      throw fail("gold must be an integer in 1..10");
    }
    item.gold = g.get<int>();
  }
  return item;
}

json to_json(const QuestionItem& item) {
  json j = {{"question_id", item.question_id},
            {"doc_id", item.doc_id},
            {"question", item.question},
            {"options", item.options}};
  if (item.gold) j["gold"] = *item.gold;
  return j;
}

std::vector<QuestionItem> load_dataset(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Load, "dataset not found: " + path.string());
  std::vector<QuestionItem> items;
  std::map<std::string, int> seen;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::string where = path.filename().string() + " line " + std::to_string(line_no);
    const auto j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw Error(ErrorKind::Load, where + ": malformed JSON");
    auto item = question_from_json(j, where);
    const auto [it, fresh] = seen.emplace(item.question_id, line_no);
    if (!fresh) {
      throw Error(ErrorKind::Load, where + ": duplicate question_id '" + item.question_id +
                                       "' (first on line " + std::to_string(it->second) + ")");
    }
    items.push_back(std::move(item));
  }
  return items;
}

// ---------------------------------------------------------------------------
// Backends

StageBackends StageBackends::from_config(const PipelineConfig& config) {
  // Identical configs share one backend instance.
  std::map<std::string, std::shared_ptr<Backend>> cache;
  auto get = [&](const BackendConfig& b) {
    const auto key = b.describe().dump() + "|" + b.fixtures_dir.string() + "|" + b.api_key_env;
    auto& slot = cache[key];
    if (!slot) slot = make_backend(b);
    return slot;
  };
  StageBackends s;
  s.embed = get(config.backend_for("embed"));
  s.filter = get(config.backend_for("filter"));
  s.decompose = get(config.backend_for("decompose"));
  s.answer = get(config.backend_for("answer"));
  s.region = get(config.backend_for("region"));
  for (const auto& id : config.fusion_models) s.models[id] = get(config.model_backends.at(id));
  return s;
}

StageBackends StageBackends::uniform(std::shared_ptr<Backend> backend,
                                     const std::vector<std::string>& fusion_models) {
  StageBackends s{backend, backend, backend, backend, backend, {}};
  for (const auto& id : fusion_models) s.models[id] = backend;
  return s;
}

// ---------------------------------------------------------------------------
// Rows

json to_json(const QuestionRow& row) {
  return {{"question_id", row.question_id},
          {"predicted", row.predicted ? json(*row.predicted) : json(nullptr)},
          {"gold", row.gold ? json(*row.gold) : json(nullptr)},
          {"correct", row.correct},
          {"decided_by", row.decided_by},
          {"rounds_used", row.rounds_used},
          {"pages_used", row.pages_used},
          {"error", row.error}};
}

QuestionRow question_row_from_json(const json& j) {
  QuestionRow r;
  r.question_id = j.at("question_id").get<std::string>();
  if (!j.at("predicted").is_null()) r.predicted = j.at("predicted").get<int>();
  if (!j.at("gold").is_null()) r.gold = j.at("gold").get<int>();
  r.correct = j.at("correct").get<bool>();
  r.decided_by = j.at("decided_by").get<std::string>();
  r.rounds_used = j.at("rounds_used").get<int>();
  r.pages_used = j.at("pages_used").get<std::vector<std::string>>();
  r.error = j.at("error").get<std::string>();
  return r;
}

// ---------------------------------------------------------------------------
// One question

namespace {

// Question ids become file names; anything outside [A-Za-z0-9._-] is %-escaped.
std::string file_stem_for(const std::string& id) {
  static constexpr char kHex[] = "0123456789ABCDEF";
  std::string out;
  for (unsigned char c : id) {
    if (std::isalnum(c) || c == '.' || c == '_' || c == '-') {
      out += static_cast<char>(c);
    } else {
      out += '%';
      out += kHex[c >> 4];
      out += kHex[c & 15];
    }
  }
  if (out.empty() || out[0] == '.') out = "%" + out;
  return out;
}

struct AnswerOutcome {
  std::optional<int> answer;
  std::string decided_by;
  int rounds_used = 1;
  json audit;
};

AnswerOutcome answer_with(const PipelineContext& ctx, const Gateway& gateway,
                          const QuestionItem& item, const std::vector<CandidatePage>& pages,
                          const DecompositionTrace* trace) {
  const auto& cfg = *ctx.config;
  AnswerOutcome out;
  json answers = json::array();
  if (!cfg.use_voting) {
    // Without voting the options keep their dataset order.
    const auto a =
        answer_second_step(gateway, *ctx.templates, pages, item.question, item.options, trace);
    answers.push_back(to_json(a));
    out.answer = a.answer_index;
    out.decided_by = "single";
    out.audit = {{"answers", std::move(answers)}};
    return out;
  }
  const auto vote = run_vote_protocol(
      item.options, item.question_id, cfg.seed,
      [&](const ShuffledOptions& shown, int trial_no) -> std::optional<int> {
        const auto a =
            answer_second_step(gateway, *ctx.templates, pages, item.question, shown.options, trace);
        auto j = to_json(a);
        j["trial_no"] = trial_no;
        answers.push_back(std::move(j));
        return a.answer_index;
      });
  out.answer = vote.final_answer;
  out.decided_by = to_string(vote.decided_by);
  out.rounds_used = vote.rounds_used;
  out.audit = {{"answers", std::move(answers)}, {"vote", to_json(vote)}};
  return out;
}

}  // namespace

QuestionRun run_question(const PipelineContext& ctx, const QuestionItem& item) {
  const auto& cfg = *ctx.config;
  QuestionRun run;
  run.transcript = std::make_shared<Transcript>();
  Transcript* t = run.transcript.get();
  auto& row = run.row;
  row.question_id = item.question_id;
  row.gold = item.gold;
  json audit = {{"question_id", item.question_id}, {"doc_id", item.doc_id}};

  try {
    run.stages.push_back("retrieve");
    if (!ctx.index->contains_doc(item.doc_id)) {
      throw Error(ErrorKind::NotFound, "document '" + item.doc_id + "' is not in the index");
    }
    const Gateway embedder(ctx.backends.embed, "embed", t);
    const auto query = embedder.embed(EmbedPayload::query(item.question));
    const auto hits = retrieve_topk(*ctx.index, query, cfg.k, item.doc_id);
    json retrieved = json::array();
    std::vector<CandidatePage> pages;
    for (const auto& h : hits) {
      retrieved.push_back({{"doc_id", h.doc_id}, {"page_no", h.page_no}, {"score", h.score}, {"rank", h.rank}});
      if (pages.size() == kMaxFilterPages) continue;
      const auto* rec = ctx.index->find(h.doc_id, h.page_no);
      const fs::path path(rec->image_ref);
      pages.push_back({h.doc_id, h.page_no, h.rank, h.score, path.stem().string(), path, false});
    }
    audit["retrieved"] = std::move(retrieved);

    if (cfg.use_filter) {
      run.stages.push_back("filter");
      const auto f = filter_pages(Gateway(ctx.backends.filter, "filter", t), *ctx.templates,
                                  item.question, pages);
      pages = f.pages;
      json kept = json::array();
      for (const auto& p : pages) kept.push_back(p.rank);
      audit["filter"] = {{"kept_ranks", std::move(kept)}, {"fallback", f.fallback}, {"raw_reply", f.raw_reply}};
    }

    if (cfg.use_region_refine) {
      run.stages.push_back("region_refine");
      RefineContext rc{Gateway(ctx.backends.region, "region", t), embedder, ctx.templates,
                       cfg.work_dir / "crops" / file_stem_for(item.question_id)};
      const std::vector<ManualRegion>* manual = nullptr;
      if (!cfg.manual_regions.empty()) {
        const auto it = ctx.manual_regions.find(item.question_id);
        static const std::vector<ManualRegion> kNone;
        manual = it == ctx.manual_regions.end() ? &kNone : &it->second;
      }
      const auto r = refine_retrieval_set(rc, query, pages, item.question, manual);
      pages = r.pages;
      json decisions = json::array();
      for (const auto& d : r.decisions) decisions.push_back(to_json(d));
      audit["region_refine"] = std::move(decisions);
    }

    std::optional<DecompositionTrace> trace;
    if (cfg.use_decomposition) {
      run.stages.push_back("decompose");
      try {
        trace = decompose_first_step(Gateway(ctx.backends.decompose, "decompose", t),
                                     *ctx.templates, pages, item.question,
                                     cfg.bilingual_first_stage ? LanguageMode::Bilingual
                                                               : LanguageMode::English);
        audit["decomposition"] = to_json(*trace);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::DecompositionFailed) throw;
        log::info(item.question_id, ": ", e.what(), "; answering without sub-questions");
        audit["decomposition"] = {{"failed", true}, {"message", e.detail()}};
      }
    }
    const DecompositionTrace* trace_ptr = trace ? &*trace : nullptr;

    run.stages.push_back("answer");
    if (cfg.use_voting) run.stages.push_back("vote");
    if (cfg.fusion_models.empty()) {
      auto out = answer_with(ctx, Gateway(ctx.backends.answer, "answer", t), item, pages, trace_ptr);
      row.predicted = out.answer;
      row.decided_by = out.decided_by;
      row.rounds_used = out.rounds_used;
      audit["answer"] = std::move(out.audit);
    } else {
      run.stages.push_back("fusion");
      std::map<std::string, int> votes;
      json per_model = json::object();
      int rounds = 0;
      for (const auto& id : cfg.fusion_models) {
        auto out = answer_with(ctx, Gateway(ctx.backends.models.at(id), "answer:" + id, t), item,
                               pages, trace_ptr);
        if (out.answer) votes[id] = *out.answer;
        rounds = std::max(rounds, out.rounds_used);
        out.audit["decided_by"] = out.decided_by;
        per_model[id] = std::move(out.audit);
      }
      if (votes.size() >= 2) {
        row.predicted = fuse_models(votes, cfg.fusion_models);
      } else if (votes.size() == 1) {
        row.predicted = votes.begin()->second;
      }
      row.decided_by = "fusion";
      row.rounds_used = rounds;
      audit["answer"] = {{"models", std::move(per_model)}};
    }
    for (const auto& p : pages) row.pages_used.push_back(p.image_id);
  } catch (const Error& e) {
    row.predicted.reset();
    row.decided_by.clear();
    row.rounds_used = 0;
    row.pages_used.clear();
    row.error = e.what();
    log::error(item.question_id, ": ", e.what());
  } catch (const std::exception& e) {
    row.predicted.reset();
    row.decided_by.clear();
    row.rounds_used = 0;
    row.pages_used.clear();
    row.error = std::string("internal: ") + e.what();
    log::error(item.question_id, ": ", row.error);
  }
  row.correct = row.gold && row.predicted && *row.gold == *row.predicted;
  audit["stages"] = run.stages;
  audit["row"] = to_json(row);
  run.audit = std::move(audit);
  return run;
}

// ---------------------------------------------------------------------------
// Report

json BenchmarkReport::to_json() const {
  json rows = json::array();
  for (const auto& r : per_question) rows.push_back(docqa::to_json(r));
  return {{"public_score", public_score},
          {"n_questions", n_questions},
          {"n_scored", n_scored},
          {"n_correct", n_correct},
          {"n_errored", n_errored},
          {"config_fingerprint", config_fingerprint},
          {"per_question", std::move(rows)}};
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string opt_int(const std::optional<int>& v) { return v ? std::to_string(*v) : ""; }

void write_atomic(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << content;
    if (!out) throw Error(ErrorKind::InvalidInput, "cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::string BenchmarkReport::to_csv() const {
  std::string out = "question_id,predicted,gold,correct,decided_by,rounds_used,pages_used,error\n";
  for (const auto& r : per_question) {
    std::string pages;
    for (const auto& p : r.pages_used) pages += (pages.empty() ? "" : ";") + p;
    out += csv_field(r.question_id) + "," + opt_int(r.predicted) + "," + opt_int(r.gold) + "," +
           (r.correct ? "1" : "0") + "," + csv_field(r.decided_by) + "," +
           std::to_string(r.rounds_used) + "," + csv_field(pages) + "," + csv_field(r.error) + "\n";
  }
  return out;
}

void write_report(const BenchmarkReport& report, const fs::path& json_path) {
  if (json_path.has_parent_path()) fs::create_directories(json_path.parent_path());
  write_atomic(json_path, report.to_json().dump(2) + "\n");
  auto csv = json_path;
  csv.replace_extension(".csv");
  write_atomic(csv, report.to_csv());
}

double score_predictions(const std::map<std::string, int>& predictions,
                         const std::map<std::string, int>& golds) {
  if (golds.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& [id, gold] : golds) {
    const auto it = predictions.find(id);
    if (it != predictions.end() && it->second == gold) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(golds.size());
}

std::string config_fingerprint(const PipelineConfig& config, const TemplateSet& templates,
                               const PageIndex& index) {
  StableHasher h;
  h.field(config.describe().dump());
  h.field(templates.content_hash());
  h.field(config.manual_regions.empty() ? "" : read_all(config.manual_regions));
  const auto bytes = serialize_index(index);
  h.field(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  return to_hex(h.digest());
}

// ---------------------------------------------------------------------------
// Benchmark

BenchmarkReport run_benchmark(const PipelineConfig& config,
                              const std::vector<QuestionItem>& dataset, const PageIndex& index,
                              const StageBackends& backends, const TemplateSet& templates) {
  config.validate();
  if (dataset.empty()) throw Error(ErrorKind::InvalidInput, "dataset is empty");
  std::vector<const QuestionItem*> items;
  std::set<std::string> ids;
  for (const auto& q : dataset) {
    if (!ids.insert(q.question_id).second) {
      throw Error(ErrorKind::InvalidInput, "duplicate question_id '" + q.question_id + "'");
    }
    items.push_back(&q);
  }
  std::sort(items.begin(), items.end(),
            [](const QuestionItem* a, const QuestionItem* b) { return a->question_id < b->question_id; });

  PipelineContext ctx{&config, &index, &templates, backends, {}};
  if (!config.manual_regions.empty()) ctx.manual_regions = load_manual_regions(config.manual_regions);

  const auto fingerprint = config_fingerprint(config, templates, index);
  const fs::path audit_dir = config.work_dir / "audit";
  const fs::path transcript_dir = config.work_dir / "transcripts";
  fs::create_directories(audit_dir);
  fs::create_directories(transcript_dir);

  std::vector<QuestionRow> rows(items.size());
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> resumed{0};

  auto work = [&] {
    for (std::size_t i = next++; i < items.size(); i = next++) {
      const QuestionItem& item = *items[i];
      const auto stem = file_stem_for(item.question_id);
      const auto audit_path = audit_dir / (stem + ".json");
      const auto transcript_path = transcript_dir / (stem + ".jsonl");
      const auto item_hash = to_hex(stable_hash({to_json(item).dump()}));

      if (fs::exists(audit_path) && fs::exists(transcript_path)) {
        const auto j = json::parse(read_all(audit_path), nullptr, false);
        if (!j.is_discarded() && j.value("config_fingerprint", "") == fingerprint &&
            j.value("item_hash", "") == item_hash && j.value("status", "") == "done") {
          rows[i] = question_row_from_json(j.at("row"));
          ++resumed;
          continue;
        }
      }
      auto run = run_question(ctx, item);
      run.audit["config_fingerprint"] = fingerprint;
      run.audit["item_hash"] = item_hash;
      run.audit["status"] = run.row.error.empty() ? "done" : "errored";
      std::string lines;
      for (const auto& e : run.transcript->entries()) lines += e.dump() + "\n";
      write_atomic(transcript_path, lines);
      write_atomic(audit_path, run.audit.dump(2) + "\n");
      rows[i] = std::move(run.row);
    }
  };

  const std::size_t workers = std::min(config.parallelism, items.size());
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }

  std::string merged;
  for (const auto* item : items)
    merged += read_all(transcript_dir / (file_stem_for(item->question_id) + ".jsonl"));
  write_atomic(config.work_dir / "transcript.jsonl", merged);

  BenchmarkReport report;
  report.config_fingerprint = fingerprint;
  report.n_questions = rows.size();
  report.n_resumed = resumed;
  std::map<std::string, int> predictions, golds;
  for (const auto& r : rows) {
    if (!r.error.empty()) ++report.n_errored;
    if (r.gold) golds[r.question_id] = *r.gold;
    if (r.predicted) predictions[r.question_id] = *r.predicted;
    if (r.correct) ++report.n_correct;
  }
  report.n_scored = golds.size();
  report.public_score = score_predictions(predictions, golds);
  report.per_question = std::move(rows);
  return report;
}

BenchmarkReport run_benchmark(const PipelineConfig& config,
                              const std::vector<QuestionItem>& dataset, const PageIndex& index) {
  const auto templates = TemplateSet::load(
      config.templates_dir.empty() ? TemplateSet::default_dir() : config.templates_dir);
  return run_benchmark(config, dataset, index, StageBackends::from_config(config), templates);
}

}  // namespace docqa
