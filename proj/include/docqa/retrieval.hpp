#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace docqa {

/// Token-level embedding matrix (token_count x dim), row-major, for one query
/// or one page image.
class MultiVectorEmbedding {
 public:
  MultiVectorEmbedding() = default;
  MultiVectorEmbedding(std::size_t token_count, std::size_t dim,
                       std::vector<double> data, bool normalized = false);

  static MultiVectorEmbedding from_rows(
      const std::vector<std::vector<double>>& rows, bool normalized = false);

  std::size_t token_count() const noexcept { return token_count_; }
  std::size_t dim() const noexcept { return dim_; }
  bool normalized() const noexcept { return normalized_; }
  bool empty() const noexcept { return token_count_ == 0; }

  std::span<const double> row(std::size_t i) const {
    return {data_.data() + i * dim_, dim_};
  }
  std::span<const double> data() const noexcept { return data_; }

  /// Copy with every row scaled to unit L2 norm. Zero rows are rejected.
  MultiVectorEmbedding l2_normalized() const;

  /// True when every row has L2 norm within 1e-6 of 1.
  bool rows_unit_norm() const;

  std::vector<std::vector<double>> to_rows() const;

  friend bool operator==(const MultiVectorEmbedding&,
                         const MultiVectorEmbedding&) = default;

 private:
  std::size_t token_count_ = 0;
  std::size_t dim_ = 0;
  std::vector<double> data_;
  bool normalized_ = false;
};

struct TrainingBatch {
  std::vector<MultiVectorEmbedding> queries;
  std::vector<MultiVectorEmbedding> documents;  // documents[k] is positive for queries[k]

  std::size_t size() const noexcept { return queries.size(); }
};

struct PageRecord {
  std::string doc_id;
  std::uint32_t page_no = 0;
  std::string image_ref;
  MultiVectorEmbedding embedding;

  friend bool operator==(const PageRecord&, const PageRecord&) = default;
};

/// Searchable page collection. Immutable once built; entries are kept
/// sorted by (doc_id, page_no).
class PageIndex {
 public:
  PageIndex() = default;

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return entries_.size(); }
  const std::vector<PageRecord>& entries() const noexcept { return entries_; }

  bool contains_doc(const std::string& doc_id) const;
  const PageRecord* find(const std::string& doc_id, std::uint32_t page_no) const;

  friend bool operator==(const PageIndex&, const PageIndex&) = default;

 private:
  friend PageIndex build_index(std::vector<PageRecord> records);
  friend PageIndex deserialize_index(std::span<const std::uint8_t> bytes);

  std::size_t dim_ = 0;
  std::vector<PageRecord> entries_;
};

struct RetrievalHit {
  std::string doc_id;
  std::uint32_t page_no = 0;
  double score = 0.0;
  std::uint32_t rank = 0;

  friend bool operator==(const RetrievalHit&, const RetrievalHit&) = default;
};

struct LossResult {
  double loss = 0.0;
  std::vector<std::vector<double>> score_matrix;  // [k][l] = LI(q_k, d_l)
};

struct BatchGradient {
  std::vector<std::vector<double>> queries;    // same layout as each query's data()
  std::vector<std::vector<double>> documents;  // same layout as each document's data()
};

/// Sum over query tokens of the max inner product against document tokens.
double late_interaction_score(const MultiVectorEmbedding& query,
                              const MultiVectorEmbedding& doc);

/// log(1 + exp(x)), returning x directly above 30.
double softplus(double x);

LossResult softplus_contrastive_loss(const TrainingBatch& batch);

/// Analytic gradient of softplus_contrastive_loss. Subgradient choices: the
/// first argmax document token per query token, the first maximal negative
/// per query.
BatchGradient contrastive_loss_gradient(const TrainingBatch& batch);

PageIndex build_index(std::vector<PageRecord> records);

inline constexpr std::size_t kDefaultTopK = 3;

/// Highest-scoring min(k, |candidates|) pages. When doc_id is given only that
/// document's pages are candidates.
std::vector<RetrievalHit> retrieve_topk(
    const PageIndex& index, const MultiVectorEmbedding& query,
    std::size_t k = kDefaultTopK,
    const std::optional<std::string>& doc_id = std::nullopt);

void save_index(const PageIndex& index, const std::filesystem::path& path);
PageIndex load_index(const std::filesystem::path& path);

std::vector<std::uint8_t> serialize_index(const PageIndex& index);
PageIndex deserialize_index(std::span<const std::uint8_t> bytes);

}  // namespace docqa
