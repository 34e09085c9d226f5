#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "docqa/cli.hpp"
#include "docqa/image.hpp"
#include "docqa/ingest.hpp"
#include "support/planted.hpp"

using namespace docqa;
using nlohmann::json;
namespace fs = std::filesystem;
namespace ts = testing_support;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("docqa_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

const ts::PlantedFixture& fixture() {
  static const ts::PlantedFixture f = ts::build_planted_fixture(scratch("planted"));
  return f;
}

std::vector<json> json_lines(const std::string& s) {
  std::vector<json> out;
  std::istringstream in(s);
  std::string line;
  while (std::getline(in, line)) out.push_back(json::parse(line));
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Five pages of one document, indexed with the default (hash) embedder.
fs::path five_page_index(const fs::path& dir) {
  const auto pages = dir / "pages";
  fs::create_directories(pages);
  for (std::uint32_t p = 1; p <= 5; ++p)
    write_png(pages / page_file_name("report", p), make_test_image(48, 32, 100 + p));
  const auto idx = dir / "i.lidx";
  const auto r = run({"index", "--pages", pages.string(), "--out", idx.string()});
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  CHECK(j["pages"] == 5);
  return idx;
}

}  // namespace

TEST_CASE("usage errors exit 2 and leave stdout empty") {
  for (const auto& args : std::vector<std::vector<std::string>>{
           {},
           {"frobnicate"},
           {"retrieve", "--index", "x", "--query", "q", "--bogus"},
           {"retrieve", "--index", "x"},
           {"retrieve", "--index", "x", "--query", "q", "--k", "0"},
           {"retrieve", "--index", "x", "--query", "q", "--k", "three"},
           {"eval", "--index", "i", "--dataset", "d", "--report", "r"},
           {"ingest", "--pdf", "a.pdf", "--out", "o", "--dpi", "5"},
       }) {
    const auto r = run(args);
    CHECK(r.code == 2);
    CHECK(r.out.empty());
    CHECK_FALSE(r.err.empty());
  }
}

TEST_CASE("version") {
  const auto r = run({"--version"});
  CHECK(r.code == 0);
  CHECK(r.out.find(cli::kVersion) != std::string::npos);
}

TEST_CASE("retrieve prints ranked hits as JSON lines") {
  const auto dir = scratch("retrieve");
  const auto idx = five_page_index(dir);
  const auto r = run({"retrieve", "--index", idx.string(), "--query", "売上の推移", "--k", "3"});
  REQUIRE(r.code == 0);
  const auto lines = json_lines(r.out);
  REQUIRE(lines.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(lines[i]["rank"] == i + 1);
  CHECK(lines[0]["score"].get<double>() >= lines[1]["score"].get<double>());
  CHECK(lines[1]["score"].get<double>() >= lines[2]["score"].get<double>());

  const auto again = run({"retrieve", "--index", idx.string(), "--query", "売上の推移", "--seed", "5"});
  CHECK(again.out == r.out);

  const auto missing = run({"retrieve", "--index", (dir / "nope.lidx").string(), "--query", "q"});
  CHECK(missing.code == 1);
  CHECK(missing.out.empty());
  CHECK(missing.err.find("docqa:") != std::string::npos);

  const auto other_doc = run({"retrieve", "--index", idx.string(), "--query", "q", "--doc", "zzz"});
  CHECK(other_doc.code == 1);
  CHECK(other_doc.err.find("not-found") != std::string::npos);
}

TEST_CASE("index on an empty directory is a domain error") {
  const auto dir = scratch("empty_pages");
  const auto r = run({"index", "--pages", dir.string(), "--out", (dir / "x.lidx").string()});
  CHECK(r.code == 1);
  CHECK(r.out.empty());
}

TEST_CASE("ingest runs the configured rasterizer") {
  const auto dir = scratch("ingest");
  const auto tmpl = dir / "t.png";
  write_png(tmpl, make_test_image(30, 20, 4));
  const auto script = dir / "raster.sh";
  std::ofstream(script) << "#!/bin/sh\n"
                           "n=$(head -n1 \"$1\")\n"
                           "i=1\n"
                           "while [ $i -le $n ]; do cp \""
                        << tmpl.string()
                        << "\" \"$2-$i.png\"; i=$((i+1)); done\n";
  fs::permissions(script, fs::perms::owner_all);
  std::ofstream(dir / "memo.pdf") << "2\n";

  const auto r = run({"ingest", "--pdf", (dir / "memo.pdf").string(), "--out", (dir / "pages").string(),
                      "--rasterizer", script.string() + " {input} {output}"});
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  CHECK(j["doc_id"] == "memo");
  CHECK(j["pages"].size() == 2);
  CHECK(fs::exists(dir / "pages" / page_file_name("memo", 2)));

  const auto bad = run({"ingest", "--pdf", (dir / "absent.pdf").string(), "--out", (dir / "p2").string(),
                        "--rasterizer", script.string() + " {input} {output}"});
  CHECK(bad.code == 1);
  CHECK(bad.out.empty());
}

TEST_CASE("ask with a missing question file exits 1 with empty stdout") {
  const auto& f = fixture();
  const auto r = run({"ask", "--index", f.index_path.string(), "--question-file",
                      (f.root / "missing.json").string(), "--config", f.planted_config.string()});
  CHECK(r.code == 1);
  CHECK(r.out.empty());
  CHECK_FALSE(r.err.empty());
}

TEST_CASE("ask answers one planted question") {
  const auto& f = fixture();
  const auto dir = scratch("ask");
  const auto q = dir / "q.json";
  std::ofstream(q) << to_json(f.dataset[4]).dump();
  const auto r = run({"ask", "--index", f.index_path.string(), "--question-file", q.string(),
                      "--config", f.planted_config.string(), "--work-dir", (dir / "w").string(),
                      "--transcript", (dir / "t.jsonl").string()});
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  CHECK(j["row"]["correct"] == true);
  CHECK(j["row"]["predicted"] == *f.dataset[4].gold);
  CHECK(j["answer"].contains("vote"));
  CHECK(j["answer"]["answers"].size() >= 3);
  CHECK(fs::file_size(dir / "t.jsonl") > 0);

  // A question the scenario never recorded cannot be answered.
  auto unknown = f.dataset[4];
  unknown.question = "記録にない質問";
  std::ofstream(q, std::ios::trunc) << to_json(unknown).dump();
  const auto miss = run({"ask", "--index", f.index_path.string(), "--question-file", q.string(),
                         "--config", f.planted_config.string(), "--work-dir", (dir / "w").string()});
  CHECK(miss.code == 1);
  CHECK(miss.out.empty());
  CHECK(miss.err.find("fixture-missing") != std::string::npos);
}

TEST_CASE("eval on the planted fixture scores 1.00 and is byte-reproducible") {
  const auto& f = fixture();
  const auto dir = scratch("eval");
  std::vector<std::string> reports;
  for (const char* name : {"a", "b"}) {
    const auto report = dir / name / "report.json";
    const auto r = run({"eval", "--index", f.index_path.string(), "--dataset", f.dataset_path.string(),
                        "--config", f.planted_config.string(), "--report", report.string(),
                        "--work-dir", (dir / name / "work").string(), "--seed", "7"});
    REQUIRE(r.code == 0);
    const auto j = json::parse(r.out);
    CHECK(j["public_score"] == 1.0);
    CHECK(j["n_questions"] == 20);
    CHECK(json::parse(slurp(report))["public_score"] == 1.0);
    CHECK(fs::exists(dir / name / "report.csv"));
    reports.push_back(slurp(report));
  }
  CHECK(reports[0] == reports[1]);
}

TEST_CASE("config path can come from the environment") {
  const auto& f = fixture();
  const auto dir = scratch("env");
  ::setenv("DOCQA_CONFIG", f.fixed_config.string().c_str(), 1);
  const auto r = run({"eval", "--index", f.index_path.string(), "--dataset", f.dataset_path.string(),
                      "--report", (dir / "r.json").string(), "--work-dir", (dir / "w").string()});
  ::unsetenv("DOCQA_CONFIG");
  REQUIRE(r.code == 0);
  std::size_t matches = 0;
  for (const auto& q : f.dataset) matches += *q.gold == ts::kFixedOption;
  CHECK(json::parse(r.out)["public_score"] == static_cast<double>(matches) / 20.0);
}

TEST_CASE("config errors are domain errors") {
  const auto dir = scratch("badcfg");
  std::ofstream(dir / "c.yaml") << "backend:\n  api_key: secret\n";
  const auto r = run({"retrieve", "--index", "x", "--query", "q", "--config", (dir / "c.yaml").string()});
  CHECK(r.code == 1);
  CHECK(r.out.empty());
  CHECK(r.err.find("config-error") != std::string::npos);
  CHECK(r.err.find("secret") == std::string::npos);
}
