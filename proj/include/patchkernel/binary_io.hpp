#pragma once

// Little-endian primitive serialization shared by every on-disk format.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "patchkernel/error.hpp"

namespace patchkernel::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

template <class T>
    requires std::is_trivially_copyable_v<T>
void write(std::ostream& out, const T& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
    if (!out) throw IoError("write failed");
}

template <class T>
    requires std::is_trivially_copyable_v<T>
void write_span(std::ostream& out, std::span<const T> values) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size_bytes()));
    if (!out) throw IoError("write failed");
}

template <class T>
    requires std::is_trivially_copyable_v<T>
T read(std::istream& in, const char* what = "value") {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (in.gcount() != static_cast<std::streamsize>(sizeof(T)))
        throw FormatError(std::string("truncated file while reading ") + what);
    return value;
}

template <class T>
    requires std::is_trivially_copyable_v<T>
void read_span(std::istream& in, std::span<T> values, const char* what = "array") {
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size_bytes()));
    if (in.gcount() != static_cast<std::streamsize>(values.size_bytes()))
        throw FormatError(std::string("truncated file while reading ") + what);
}

using Magic = std::array<char, 4>;

inline void write_magic(std::ostream& out, const Magic& magic) {
    out.write(magic.data(), 4);
    if (!out) throw IoError("write failed");
}

inline void expect_magic(std::istream& in, const Magic& magic, const char* what) {
    Magic got{};
    in.read(got.data(), 4);
    if (in.gcount() != 4 || got != magic)
        throw FormatError(std::string("not a ") + what + " file (bad magic)");
}

inline void expect_version(std::uint32_t got, std::uint32_t want, const char* what) {
    if (got != want)
        throw FormatError(std::string(what) + " version mismatch: file has " +
                          std::to_string(got) + ", expected " + std::to_string(want));
}

// Refuses trailing bytes so that truncation and concatenation are both caught.
inline void expect_eof(std::istream& in, const char* what) {
    if (in.peek() != std::char_traits<char>::eof())
        throw FormatError(std::string("trailing bytes after ") + what);
}

// FNV-1a, used to fingerprint artifacts that reference each other.
inline std::uint64_t fnv1a(std::span<const std::byte> bytes,
                           std::uint64_t hash = 1469598103934665603ull) {
    for (std::byte b : bytes) {
        hash ^= static_cast<std::uint64_t>(b);
        hash *= 1099511628211ull;
    }
    return hash;
}

template <class T>
std::uint64_t fnv1a_of(std::span<const T> values, std::uint64_t hash = 1469598103934665603ull) {
    return fnv1a(std::as_bytes(values), hash);
}

}  // namespace patchkernel::io
