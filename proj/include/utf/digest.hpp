#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

namespace utf {

// FNV-1a 64-bit content digest. Provenance checksum, not a security primitive.
class Fnv1a64 {
  public:
    Fnv1a64& bytes(const void* data, std::size_t len) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < len; ++i) {
            state_ ^= p[i];
            state_ *= 0x100000001B3ULL;
        }
        return *this;
    }

    Fnv1a64& u64(std::uint64_t v) {
        unsigned char buf[8];
        for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
        return bytes(buf, 8);
    }

    Fnv1a64& i64(std::int64_t v) { return u64(static_cast<std::uint64_t>(v)); }

    Fnv1a64& f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        return u64(bits);
    }

    Fnv1a64& str(const std::string& s) {
        u64(s.size());
        return bytes(s.data(), s.size());
    }

    template <typename T>
    Fnv1a64& span_of(std::span<const T> s) {
        u64(s.size());
        return bytes(s.data(), s.size() * sizeof(T));
    }

    std::uint64_t value() const { return state_; }

  private:
    std::uint64_t state_ = 0xCBF29CE484222325ULL;
};

inline std::string to_hex(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return out;
}

// Throws std::invalid_argument on malformed input.
inline std::uint64_t from_hex(const std::string& s) {
    if (s.empty() || s.size() > 16) throw std::invalid_argument("bad hex digest: " + s);
    std::uint64_t v = 0;
    for (char c : s) {
        v <<= 4;
        if (c >= '0' && c <= '9') v |= static_cast<std::uint64_t>(c - '0');
        else if (c >= 'a' && c <= 'f') v |= static_cast<std::uint64_t>(c - 'a' + 10);
        else if (c >= 'A' && c <= 'F') v |= static_cast<std::uint64_t>(c - 'A' + 10);
        else throw std::invalid_argument("bad hex digest: " + s);
    }
    return v;
}

}  // namespace utf
