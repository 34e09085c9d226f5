#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "docqa/error.hpp"
#include "docqa/gateway.hpp"
#include "docqa/retrieval.hpp"
#include "json.hpp"

namespace docqa {

struct PageImage {
  std::string doc_id;
  std::uint32_t page_no = 0;  // 1-based
  std::filesystem::path path;
  std::uint32_t width_px = 0;
  std::uint32_t height_px = 0;
  std::string format = "PNG";

  /// File stem, used as the image identity towards model backends.
  std::string image_id() const;

  friend bool operator==(const PageImage&, const PageImage&) = default;
};

struct PageSet {
  std::string doc_id;
  std::vector<PageImage> pages;  // strictly increasing page_no

  friend bool operator==(const PageSet&, const PageSet&) = default;
};

inline constexpr int kDefaultDpi = 144;

struct RasterizerConfig {
  /// argv template; {input}, {dpi} and {output} are substituted per token.
  /// {output} is a file prefix inside a staging directory; the command must
  /// write one PNG per page whose name ends in the page number.
  std::string command_template = "pdftoppm -r {dpi} -png {input} {output}";
};

/// "{doc_id}_{page_no:04}.png"
std::string page_file_name(const std::string& doc_id, std::uint32_t page_no);

PageSet rasterize_document(const std::filesystem::path& pdf_path,
                           const std::filesystem::path& out_dir, int dpi = kDefaultDpi,
                           const RasterizerConfig& rasterizer = {});

PageSet load_page_set(const std::filesystem::path& dir, const std::string& doc_id);

/// doc_ids with at least one page file in dir, sorted.
std::vector<std::string> discover_doc_ids(const std::filesystem::path& dir);

nlohmann::json page_set_to_json(const PageSet& set);
void write_manifest(const PageSet& set, int dpi, const std::filesystem::path& out_dir);

struct EmbeddedPage {
  PageImage page;
  MultiVectorEmbedding embedding;
};

/// Raised by embed_pages when some pages could not be embedded.
class EmbedPagesError : public Error {
 public:
  EmbedPagesError(const std::string& message, std::vector<std::uint32_t> failed)
      : Error(ErrorKind::BackendUnavailable, message), failed_pages_(std::move(failed)) {}
  const std::vector<std::uint32_t>& failed_pages() const { return failed_pages_; }

 private:
  std::vector<std::uint32_t> failed_pages_;
};

std::vector<EmbeddedPage> embed_pages(const Gateway& gateway, const PageSet& pages);

/// Page records ready for build_index.
std::vector<PageRecord> to_page_records(const std::vector<EmbeddedPage>& embedded);

}  // namespace docqa
