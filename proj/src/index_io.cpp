// Binary page-index format ("LIDX"), all integers little-endian:
//
//   magic      4 bytes  "LIDX"
//   version    u16
//   dim        u16
//   count      u32
//   count x {
//     doc_id      u16 length + UTF-8 bytes
//     page_no     u32
//     image_ref   u16 length + UTF-8 bytes
//     token_count u32
//     token_count * dim f32 values
//   }

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <tuple>

#include "docqa/error.hpp"
#include "docqa/retrieval.hpp"

namespace docqa {

namespace {

constexpr char kMagic[4] = {'L', 'I', 'D', 'X'};
constexpr std::uint16_t kVersion = 1;

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u16(std::uint16_t v) {
    out_.push_back(static_cast<std::uint8_t>(v));
    out_.push_back(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  void str16(const std::string& s, const char* what) {
    if (s.size() > 0xffff) {
      throw Error(ErrorKind::InvalidInput,
                  std::string("save_index: ") + what + " longer than 65535 bytes");
    }
    u16(static_cast<std::uint16_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == in_.size(); }

  void need(std::size_t n, const char* what) {
    if (in_.size() - pos_ < n) {
      throw Error(ErrorKind::Format,
                  "truncated index file at offset " + std::to_string(pos_) +
                      ": expected " + std::to_string(n) + " bytes for " + what +
                      ", " + std::to_string(in_.size() - pos_) + " remain");
    }
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    const auto v = static_cast<std::uint16_t>(in_[pos_] | (in_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::string str16(const char* what) {
    const std::uint16_t len = u16(what);
    need(len, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), len);
    pos_ += len;
    return s;
  }
  void expect_magic() {
    need(4, "magic");
    if (std::memcmp(in_.data(), kMagic, 4) != 0) {
      throw Error(ErrorKind::Format, "bad magic at offset 0: not a LIDX index file");
    }
    pos_ += 4;
  }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_index(const PageIndex& index) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u16(kVersion);
  w.u16(static_cast<std::uint16_t>(index.dim()));
  w.u32(static_cast<std::uint32_t>(index.size()));
  for (const auto& e : index.entries()) {
    w.str16(e.doc_id, "doc_id");
    w.u32(e.page_no);
    w.str16(e.image_ref, "image_ref");
    w.u32(static_cast<std::uint32_t>(e.embedding.token_count()));
    for (double v : e.embedding.data()) w.f32(static_cast<float>(v));
  }
  return w.take();
}

PageIndex deserialize_index(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  r.expect_magic();
  const std::size_t version_offset = r.offset();
  const std::uint16_t version = r.u16("version");
  if (version != kVersion) {
    throw Error(ErrorKind::Format,
                "unsupported index version " + std::to_string(version) +
                    " at offset " + std::to_string(version_offset));
  }
  const std::uint16_t dim = r.u16("dim");
  if (dim == 0) throw Error(ErrorKind::Format, "zero dim at offset 6");
  const std::uint32_t count = r.u32("entry count");

  std::vector<PageRecord> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    PageRecord rec;
    rec.doc_id = r.str16("doc_id");
    rec.page_no = r.u32("page_no");
    rec.image_ref = r.str16("image_ref");
    const std::size_t tokens_offset = r.offset();
    const std::uint32_t tokens = r.u32("token_count");
    if (tokens == 0) {
      throw Error(ErrorKind::Format,
                  "zero token_count at offset " + std::to_string(tokens_offset));
    }
    r.need(static_cast<std::size_t>(tokens) * dim * 4, "embedding values");
    std::vector<double> data(static_cast<std::size_t>(tokens) * dim);
    for (double& v : data) v = static_cast<double>(r.f32("embedding value"));
    try {
      MultiVectorEmbedding tmp(tokens, dim, data);
      const bool unit = tmp.rows_unit_norm();
      rec.embedding = MultiVectorEmbedding(tokens, dim, std::move(data), unit);
    } catch (const Error& e) {
      throw Error(ErrorKind::Format, "entry " + std::to_string(i) + " at offset " +
                                         std::to_string(tokens_offset) + ": " +
                                         e.detail());
    }
    entries.push_back(std::move(rec));
  }
  if (!r.at_end()) {
    throw Error(ErrorKind::Format,
                "trailing bytes after last entry at offset " + std::to_string(r.offset()));
  }
  for (std::size_t i = 1; i < entries.size(); ++i) {
    const auto& a = entries[i - 1];
    const auto& b = entries[i];
    if (std::tie(a.doc_id, a.page_no) >= std::tie(b.doc_id, b.page_no)) {
      throw Error(ErrorKind::Format, "entries out of order or duplicated at entry " +
                                         std::to_string(i));
    }
  }
  PageIndex index;
  index.dim_ = dim;
  index.entries_ = std::move(entries);
  return index;
}

void save_index(const PageIndex& index, const std::filesystem::path& path) {
  const auto bytes = serialize_index(index);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::InvalidInput, "cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::InvalidInput, "write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

PageIndex load_index(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::NotFound, "cannot open index " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return deserialize_index(bytes);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Format)
      throw Error(ErrorKind::Format, path.string() + ": " + e.detail());
    throw;
  }
}

}  // namespace docqa
