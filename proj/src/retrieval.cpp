#include "docqa/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <tuple>
#include <utility>

#include "docqa/error.hpp"

namespace docqa {

namespace {

constexpr double kUnitNormTolerance = 1e-6;
constexpr double kSoftplusLinearThreshold = 30.0;

double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void require_same_dim(const MultiVectorEmbedding& a,
                      const MultiVectorEmbedding& b, const char* what) {
  if (a.dim() != b.dim()) {
    throw Error(ErrorKind::InvalidInput,
                std::string(what) + ": dimension mismatch (" +
                    std::to_string(a.dim()) + " vs " + std::to_string(b.dim()) +
                    ")");
  }
  if (a.empty() || b.empty()) {
    throw Error(ErrorKind::InvalidInput,
                std::string(what) + ": empty embedding");
  }
}

// Index of the first maximal document token for every query token.
std::vector<std::size_t> argmax_tokens(const MultiVectorEmbedding& query,
                                       const MultiVectorEmbedding& doc) {
  std::vector<std::size_t> best(query.token_count(), 0);
  for (std::size_t i = 0; i < query.token_count(); ++i) {
    double best_value = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < doc.token_count(); ++j) {
      const double v = dot(query.row(i), doc.row(j));
      if (v > best_value) {
        best_value = v;
        best[i] = j;
      }
    }
  }
  return best;
}

void validate_batch(const TrainingBatch& batch) {
  if (batch.queries.size() != batch.documents.size()) {
    throw Error(ErrorKind::InvalidInput,
                "training batch: queries and documents differ in length");
  }
  if (batch.size() < 2) {
    throw Error(ErrorKind::InvalidInput,
                "training batch: batch size must be at least 2 (no in-batch "
                "negatives otherwise)");
  }
  const std::size_t dim = batch.queries.front().dim();
  for (std::size_t k = 0; k < batch.size(); ++k) {
    if (batch.queries[k].dim() != dim || batch.documents[k].dim() != dim) {
      throw Error(ErrorKind::InvalidInput,
                  "training batch: embeddings do not share a dimension");
    }
    if (batch.queries[k].empty() || batch.documents[k].empty()) {
      throw Error(ErrorKind::InvalidInput, "training batch: empty embedding");
    }
  }
}

std::vector<std::vector<double>> score_matrix(const TrainingBatch& batch) {
  const std::size_t b = batch.size();
  std::vector<std::vector<double>> scores(b, std::vector<double>(b));
  for (std::size_t k = 0; k < b; ++k)
    for (std::size_t l = 0; l < b; ++l)
      scores[k][l] = late_interaction_score(batch.queries[k], batch.documents[l]);
  return scores;
}

std::size_t hardest_negative(const std::vector<double>& row, std::size_t k) {
  std::size_t best = k == 0 ? 1 : 0;
  for (std::size_t l = 0; l < row.size(); ++l) {
    if (l == k) continue;
    if (row[l] > row[best]) best = l;
  }
  return best;
}

}  // namespace

MultiVectorEmbedding::MultiVectorEmbedding(std::size_t token_count,
                                           std::size_t dim,
                                           std::vector<double> data,
                                           bool normalized)
    : token_count_(token_count),
      dim_(dim),
      data_(std::move(data)),
      normalized_(normalized) {
  if (token_count_ == 0 || dim_ == 0) {
    throw Error(ErrorKind::InvalidInput,
                "embedding: token_count and dim must be positive");
  }
  if (data_.size() != token_count_ * dim_) {
    throw Error(ErrorKind::InvalidInput,
                "embedding: data size " + std::to_string(data_.size()) +
                    " does not match " + std::to_string(token_count_) + "x" +
                    std::to_string(dim_));
  }
  for (double v : data_) {
    if (!std::isfinite(v)) {
      throw Error(ErrorKind::InvalidInput, "embedding: non-finite entry");
    }
  }
  if (normalized_ && !rows_unit_norm()) {
    throw Error(ErrorKind::InvalidInput,
                "embedding: flagged normalized but a row norm deviates from 1");
  }
}

MultiVectorEmbedding MultiVectorEmbedding::from_rows(
    const std::vector<std::vector<double>>& rows, bool normalized) {
  if (rows.empty() || rows.front().empty()) {
    throw Error(ErrorKind::InvalidInput, "embedding: no rows");
  }
  const std::size_t dim = rows.front().size();
  std::vector<double> data;
  data.reserve(rows.size() * dim);
  for (const auto& r : rows) {
    if (r.size() != dim) {
      throw Error(ErrorKind::InvalidInput, "embedding: ragged rows");
    }
    data.insert(data.end(), r.begin(), r.end());
  }
  return MultiVectorEmbedding(rows.size(), dim, std::move(data), normalized);
}

bool MultiVectorEmbedding::rows_unit_norm() const {
  for (std::size_t i = 0; i < token_count_; ++i) {
    const double n = std::sqrt(dot(row(i), row(i)));
    if (std::abs(n - 1.0) > kUnitNormTolerance) return false;
  }
  return true;
}

MultiVectorEmbedding MultiVectorEmbedding::l2_normalized() const {
  std::vector<double> out(data_);
  for (std::size_t i = 0; i < token_count_; ++i) {
    const double n = std::sqrt(dot(row(i), row(i)));
    if (n == 0.0) {
      throw Error(ErrorKind::InvalidInput, "embedding: cannot normalize a zero row");
    }
    for (std::size_t d = 0; d < dim_; ++d) out[i * dim_ + d] /= n;
  }
  return MultiVectorEmbedding(token_count_, dim_, std::move(out), true);
}

std::vector<std::vector<double>> MultiVectorEmbedding::to_rows() const {
  std::vector<std::vector<double>> rows(token_count_);
  for (std::size_t i = 0; i < token_count_; ++i)
    rows[i].assign(row(i).begin(), row(i).end());
  return rows;
}

double late_interaction_score(const MultiVectorEmbedding& query,
                              const MultiVectorEmbedding& doc) {
  require_same_dim(query, doc, "late_interaction_score");
  double total = 0.0;
  for (std::size_t i = 0; i < query.token_count(); ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < doc.token_count(); ++j)
      best = std::max(best, dot(query.row(i), doc.row(j)));
    total += best;
  }
  return total;
}

double softplus(double x) {
  if (x > kSoftplusLinearThreshold) return x;
  return std::log1p(std::exp(x));
}

LossResult softplus_contrastive_loss(const TrainingBatch& batch) {
  validate_batch(batch);
  LossResult result;
  result.score_matrix = score_matrix(batch);
  const std::size_t b = batch.size();
  double sum = 0.0;
  for (std::size_t k = 0; k < b; ++k) {
    const auto& row = result.score_matrix[k];
    const std::size_t neg = hardest_negative(row, k);
    sum += softplus(row[neg] - row[k]);
  }
  result.loss = sum / static_cast<double>(b);
  return result;
}

BatchGradient contrastive_loss_gradient(const TrainingBatch& batch) {
  validate_batch(batch);
  const std::size_t b = batch.size();
  const std::size_t dim = batch.queries.front().dim();
  const auto scores = score_matrix(batch);

  BatchGradient grad;
  grad.queries.resize(b);
  grad.documents.resize(b);
  for (std::size_t k = 0; k < b; ++k) {
    grad.queries[k].assign(batch.queries[k].data().size(), 0.0);
    grad.documents[k].assign(batch.documents[k].data().size(), 0.0);
  }

  // dLI(q,d)/dq_i = d_{j*(i)} and dLI(q,d)/dd_{j*(i)} += q_i.
  auto accumulate = [&](std::size_t qk, std::size_t dl, double weight) {
    const auto& q = batch.queries[qk];
    const auto& d = batch.documents[dl];
    const auto best = argmax_tokens(q, d);
    for (std::size_t i = 0; i < q.token_count(); ++i) {
      const auto qi = q.row(i);
      const auto dj = d.row(best[i]);
      for (std::size_t c = 0; c < dim; ++c) {
        grad.queries[qk][i * dim + c] += weight * dj[c];
        grad.documents[dl][best[i] * dim + c] += weight * qi[c];
      }
    }
  };

  for (std::size_t k = 0; k < b; ++k) {
    const std::size_t neg = hardest_negative(scores[k], k);
    const double margin = scores[k][neg] - scores[k][k];
    const double w = sigmoid(margin) / static_cast<double>(b);
    accumulate(k, neg, w);
    accumulate(k, k, -w);
  }
  return grad;
}

bool PageIndex::contains_doc(const std::string& doc_id) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const PageRecord& r) { return r.doc_id == doc_id; });
}

const PageRecord* PageIndex::find(const std::string& doc_id,
                                  std::uint32_t page_no) const {
  auto it = std::lower_bound(
      entries_.begin(), entries_.end(), std::tie(doc_id, page_no),
      [](const PageRecord& r, const auto& key) {
        return std::tie(r.doc_id, r.page_no) < key;
      });
  if (it != entries_.end() && it->doc_id == doc_id && it->page_no == page_no)
    return &*it;
  return nullptr;
}

PageIndex build_index(std::vector<PageRecord> records) {
  if (records.empty()) {
    throw Error(ErrorKind::InvalidInput, "build_index: no records");
  }
  const std::size_t dim = records.front().embedding.dim();
  if (dim == 0 || dim > 0xffff) {
    throw Error(ErrorKind::InvalidInput,
                "build_index: dim must be in 1..65535");
  }
  for (auto& r : records) {
    if (r.embedding.dim() != dim) {
      throw Error(ErrorKind::InvalidInput,
                  "build_index: page " + r.doc_id + ":" +
                      std::to_string(r.page_no) + " has dim " +
                      std::to_string(r.embedding.dim()) + ", expected " +
                      std::to_string(dim));
    }
    if (r.page_no == 0) {
      throw Error(ErrorKind::InvalidInput,
                  "build_index: page numbers are 1-based (" + r.doc_id + ")");
    }
    // Storage is f32; round now so that a saved index loads back identical.
    std::vector<double> rounded(r.embedding.data().begin(),
                                r.embedding.data().end());
    for (double& v : rounded) v = static_cast<double>(static_cast<float>(v));
    MultiVectorEmbedding tmp(r.embedding.token_count(), dim, rounded);
    const bool unit = tmp.rows_unit_norm();
    r.embedding = MultiVectorEmbedding(tmp.token_count(), dim,
                                       std::move(rounded), unit);
  }
  std::sort(records.begin(), records.end(),
            [](const PageRecord& a, const PageRecord& b) {
              return std::tie(a.doc_id, a.page_no) < std::tie(b.doc_id, b.page_no);
            });
  for (std::size_t i = 1; i < records.size(); ++i) {
    if (records[i].doc_id == records[i - 1].doc_id &&
        records[i].page_no == records[i - 1].page_no) {
      throw Error(ErrorKind::Conflict,
                  "build_index: duplicate page " + records[i].doc_id + ":" +
                      std::to_string(records[i].page_no));
    }
  }
  PageIndex index;
  index.dim_ = dim;
  index.entries_ = std::move(records);
  return index;
}

std::vector<RetrievalHit> retrieve_topk(const PageIndex& index,
                                        const MultiVectorEmbedding& query,
                                        std::size_t k,
                                        const std::optional<std::string>& doc_id) {
  if (k == 0) throw Error(ErrorKind::InvalidInput, "retrieve_topk: k must be >= 1");
  if (query.dim() != index.dim()) {
    throw Error(ErrorKind::InvalidInput,
                "retrieve_topk: query dim " + std::to_string(query.dim()) +
                    " does not match index dim " + std::to_string(index.dim()));
  }
  std::vector<RetrievalHit> hits;
  for (const auto& e : index.entries()) {
    if (doc_id && e.doc_id != *doc_id) continue;
    hits.push_back({e.doc_id, e.page_no,
                    late_interaction_score(query, e.embedding), 0});
  }
  const std::size_t n = std::min(k, hits.size());
  auto better = [](const RetrievalHit& a, const RetrievalHit& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::tie(a.doc_id, a.page_no) < std::tie(b.doc_id, b.page_no);
  };
  std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(n),
                    hits.end(), better);
  hits.resize(n);
  for (std::size_t i = 0; i < n; ++i) hits[i].rank = static_cast<std::uint32_t>(i + 1);
  return hits;
}

}  // namespace docqa
