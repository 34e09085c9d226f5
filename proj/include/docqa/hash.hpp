#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <string_view>

namespace docqa {

// FNV-1a, 64-bit. Used wherever a hash must be stable across platforms and
// releases (mock fingerprints, shuffle seeds, config fingerprints).
class StableHasher {
 public:
  StableHasher& update(std::string_view bytes) {
    for (unsigned char c : bytes) {
      state_ ^= c;
      state_ *= kPrime;
    }
    return *this;
  }

  // Length-prefixed so that ("ab","c") and ("a","bc") hash differently.
  StableHasher& field(std::string_view bytes) {
    update_u64(bytes.size());
    return update(bytes);
  }

  StableHasher& update_u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      state_ ^= static_cast<unsigned char>(v >> (8 * i));
      state_ *= kPrime;
    }
    return *this;
  }

  std::uint64_t digest() const { return state_; }

 private:
  static constexpr std::uint64_t kOffset = 0xcbf29ce484222325ULL;
  static constexpr std::uint64_t kPrime = 0x100000001b3ULL;
  std::uint64_t state_ = kOffset;
};

inline std::uint64_t stable_hash(std::initializer_list<std::string_view> fields) {
  StableHasher h;
  for (auto f : fields) h.field(f);
  return h.digest();
}

inline std::string to_hex(std::uint64_t v) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kDigits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace docqa
