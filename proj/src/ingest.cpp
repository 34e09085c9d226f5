#include "docqa/ingest.hpp"

#include <fcntl.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstring>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <map>
#include <regex>
#include <sstream>

#include "docqa/image.hpp"
#include "docqa/log.hpp"

extern char** environ;

namespace docqa {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::regex& page_file_regex() {
  static const std::regex re(R"(^(.+)_(\d{4,})\.png$)");
  return re;
}

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  return {std::istream_iterator<std::string>(in), std::istream_iterator<std::string>()};
}

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  for (std::size_t pos = 0; (pos = s.find(from, pos)) != std::string::npos; pos += to.size())
    s.replace(pos, from.size(), to);
  return s;
}

bool executable_exists(const std::string& program) {
  if (program.find('/') != std::string::npos) return ::access(program.c_str(), X_OK) == 0;
  const char* path = std::getenv("PATH");
  if (!path) return false;
  std::stringstream ss(path);
  std::string dir;
  while (std::getline(ss, dir, ':')) {
    if (dir.empty()) continue;
    if (::access((fs::path(dir) / program).c_str(), X_OK) == 0) return true;
  }
  return false;
}

struct CommandResult {
  int exit_code = 0;
  std::string stderr_text;
};

CommandResult run_command(const std::vector<std::string>& argv, const fs::path& stderr_file) {
  std::vector<char*> cargv;
  for (const auto& a : argv) cargv.push_back(const_cast<char*>(a.c_str()));
  cargv.push_back(nullptr);

  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_addopen(&actions, STDOUT_FILENO, "/dev/null", O_WRONLY, 0);
  posix_spawn_file_actions_addopen(&actions, STDERR_FILENO, stderr_file.c_str(),
                                   O_WRONLY | O_CREAT | O_TRUNC, 0644);
  pid_t pid = 0;
  const int rc = posix_spawnp(&pid, cargv[0], &actions, nullptr, cargv.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  if (rc != 0) {
    throw Error(ErrorKind::Environment,
                "cannot start rasterizer '" + argv[0] + "': " + std::strerror(rc));
  }
  int status = 0;
  while (::waitpid(pid, &status, 0) < 0) {
    if (errno != EINTR) throw Error(ErrorKind::Environment, "waitpid failed for rasterizer");
  }
  CommandResult result;
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : 128 + WTERMSIG(status);
  std::ifstream err(stderr_file);
  result.stderr_text.assign(std::istreambuf_iterator<char>(err), std::istreambuf_iterator<char>());
  return result;
}

// Trailing integer of a file stem ("page-07" -> 7), or -1.
long trailing_number(const std::string& stem) {
  std::size_t end = stem.size();
  std::size_t begin = end;
  while (begin > 0 && std::isdigit(static_cast<unsigned char>(stem[begin - 1]))) --begin;
  if (begin == end) return -1;
  return std::stol(stem.substr(begin, end - begin));
}

PageImage describe_page(const std::string& doc_id, std::uint32_t page_no, const fs::path& path) {
  const Image img = read_png(path);
  return PageImage{doc_id, page_no, path, img.width, img.height, "PNG"};
}

}  // namespace

std::string PageImage::image_id() const { return path.stem().string(); }

std::string page_file_name(const std::string& doc_id, std::uint32_t page_no) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04u", page_no);
  return doc_id + "_" + buf + ".png";
}

PageSet rasterize_document(const fs::path& pdf_path, const fs::path& out_dir, int dpi,
                           const RasterizerConfig& rasterizer) {
  if (dpi <= 0) throw Error(ErrorKind::InvalidInput, "dpi must be positive");
  if (!fs::is_regular_file(pdf_path)) {
    throw Error(ErrorKind::NotFound, "PDF not readable: " + pdf_path.string());
  }
  const auto tokens = split_ws(rasterizer.command_template);
  if (tokens.empty()) throw Error(ErrorKind::Config, "empty rasterizer command template");
  if (!executable_exists(tokens.front())) {
    throw Error(ErrorKind::Environment,
                "rasterizer '" + tokens.front() +
                    "' not found; install poppler-utils (pdftoppm) or set the rasterizer "
                    "command template (config key 'rasterizer' or DOCQA_RASTERIZER)");
  }

  const std::string doc_id = pdf_path.stem().string();
  fs::create_directories(out_dir);
  const fs::path staging = out_dir / (".staging-" + doc_id);
  fs::remove_all(staging);
  fs::create_directories(staging);

  std::vector<std::string> argv;
  for (const auto& t : tokens) {
    std::string a = replace_all(t, "{input}", pdf_path.string());
    a = replace_all(a, "{dpi}", std::to_string(dpi));
    a = replace_all(a, "{output}", (staging / "page").string());
    argv.push_back(std::move(a));
  }
  const auto result = run_command(argv, out_dir / (".stderr-" + doc_id));
  fs::remove(out_dir / (".stderr-" + doc_id));
  if (result.exit_code != 0) {
    fs::remove_all(staging);
    throw Error(ErrorKind::Ingest, "rasterizer exited with " + std::to_string(result.exit_code) +
                                       " for " + pdf_path.string() + ": " + result.stderr_text);
  }

  std::vector<std::pair<long, fs::path>> produced;
  for (const auto& entry : fs::directory_iterator(staging)) {
    if (entry.path().extension() != ".png") continue;
    produced.emplace_back(trailing_number(entry.path().stem().string()), entry.path());
  }
  std::sort(produced.begin(), produced.end());
  if (produced.empty()) {
    fs::remove_all(staging);
    throw Error(ErrorKind::Ingest, "rasterizer produced no pages for " + pdf_path.string());
  }

  // Validate every staged page before touching existing output.
  try {
    for (const auto& [n, p] : produced) read_png(p);
  } catch (const Error&) {
    fs::remove_all(staging);
    throw;
  }

  for (const auto& entry : fs::directory_iterator(out_dir)) {
    std::smatch m;
    const auto name = entry.path().filename().string();
    if (std::regex_match(name, m, page_file_regex()) && m[1] == doc_id) fs::remove(entry.path());
  }

  PageSet set{doc_id, {}};
  std::uint32_t page_no = 0;
  for (const auto& [n, p] : produced) {
    ++page_no;
    const fs::path dest = out_dir / page_file_name(doc_id, page_no);
    fs::rename(p, dest);
    set.pages.push_back(describe_page(doc_id, page_no, dest));
  }
  fs::remove_all(staging);
  write_manifest(set, dpi, out_dir);
  return set;
}

PageSet load_page_set(const fs::path& dir, const std::string& doc_id) {
  if (!fs::is_directory(dir)) throw Error(ErrorKind::NotFound, "not a directory: " + dir.string());
  std::map<std::uint32_t, fs::path> found;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch m;
    const auto name = entry.path().filename().string();
    if (!std::regex_match(name, m, page_file_regex()) || m[1] != doc_id) continue;
    const auto page_no = static_cast<std::uint32_t>(std::stoul(m[2].str()));
    if (page_no == 0) continue;
    found.emplace(page_no, entry.path());
  }
  if (found.empty()) {
    throw Error(ErrorKind::NotFound, "no page images for '" + doc_id + "' in " + dir.string());
  }
  PageSet set{doc_id, {}};
  std::vector<std::string> bad;
  for (const auto& [page_no, path] : found) {
    try {
      set.pages.push_back(describe_page(doc_id, page_no, path));
    } catch (const Error& e) {
      bad.push_back(path.filename().string() + " (" + e.detail() + ")");
    }
  }
  if (!bad.empty()) {
    std::string msg = "undecodable page files for '" + doc_id + "':";
    for (const auto& b : bad) msg += " " + b;
    throw Error(ErrorKind::Ingest, msg);
  }
  return set;
}

std::vector<std::string> discover_doc_ids(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorKind::NotFound, "not a directory: " + dir.string());
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(dir)) {
    std::smatch m;
    const auto name = entry.path().filename().string();
    if (std::regex_match(name, m, page_file_regex())) ids.push_back(m[1].str());
  }
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

json page_set_to_json(const PageSet& set) {
  json pages = json::array();
  for (const auto& p : set.pages) {
    pages.push_back({{"page_no", p.page_no},
                     {"file", p.path.filename().string()},
                     {"width_px", p.width_px},
                     {"height_px", p.height_px},
                     {"format", p.format}});
  }
  return {{"doc_id", set.doc_id}, {"pages", std::move(pages)}};
}

void write_manifest(const PageSet& set, int dpi, const fs::path& out_dir) {
  json j = page_set_to_json(set);
  j["dpi"] = dpi;
  std::ofstream out(out_dir / (set.doc_id + ".manifest.json"), std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw Error(ErrorKind::Ingest, "cannot write manifest for " + set.doc_id);
}

std::vector<EmbeddedPage> embed_pages(const Gateway& gateway, const PageSet& pages) {
  if (pages.pages.empty()) throw Error(ErrorKind::InvalidInput, "embed_pages: empty page set");
  std::vector<EmbeddedPage> out;
  std::vector<std::uint32_t> failed;
  std::string failures;
  std::size_t dim = 0;
  for (const auto& page : pages.pages) {
    try {
      auto e = gateway.embed(EmbedPayload::image(page.image_id(), page.path));
      if (dim == 0) dim = e.dim();
      if (e.dim() != dim) {
        throw Error(ErrorKind::InvalidInput,
                    "embed_pages: page " + pages.doc_id + ":" + std::to_string(page.page_no) +
                        " came back with dim " + std::to_string(e.dim()) + ", expected " +
                        std::to_string(dim));
      }
      out.push_back({page, std::move(e)});
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::InvalidInput) throw;
      failed.push_back(page.page_no);
      failures += " " + std::to_string(page.page_no) + " (" + e.what() + ")";
      log::warn("embedding failed for ", pages.doc_id, ":", page.page_no, ": ", e.what());
    }
  }
  if (!failed.empty()) {
    throw EmbedPagesError("embed_pages: " + std::to_string(failed.size()) + " of " +
                              std::to_string(pages.pages.size()) + " pages of '" + pages.doc_id +
                              "' failed:" + failures,
                          std::move(failed));
  }
  return out;
}

std::vector<PageRecord> to_page_records(const std::vector<EmbeddedPage>& embedded) {
  std::vector<PageRecord> records;
  for (const auto& e : embedded)
    records.push_back({e.page.doc_id, e.page.page_no, e.page.path.string(), e.embedding});
  return records;
}

}  // namespace docqa
