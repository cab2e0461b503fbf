#pragma once

// Little-endian binary IO helpers for the checkpoint and dataset containers.
// Explicit byte packing rather than memcpy of structs, so the formats are
// identical regardless of host padding or endianness.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "errors.hpp"

namespace fdm {

inline void write_u8(std::ostream& os, std::uint8_t v) {
    os.put(static_cast<char>(v));
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 8);
}

inline void write_f64(std::ostream& os, double v) {
    write_u64(os, std::bit_cast<std::uint64_t>(v));
}

inline void write_f64_array(std::ostream& os, const double* v, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) write_f64(os, v[i]);
}

inline void write_bytes(std::ostream& os, const std::string& s) {
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint8_t read_u8(std::istream& is, const char* what) {
    int c = is.get();
    if (c == EOF) throw DataError(std::string("truncated file while reading ") + what);
    return static_cast<std::uint8_t>(c);
}

inline std::uint32_t read_u32(std::istream& is, const char* what) {
    char b[4];
    if (!is.read(b, 4)) throw DataError(std::string("truncated file while reading ") + what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
}

inline std::uint64_t read_u64(std::istream& is, const char* what) {
    char b[8];
    if (!is.read(b, 8)) throw DataError(std::string("truncated file while reading ") + what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(b[i])) << (8 * i);
    return v;
}

inline double read_f64(std::istream& is, const char* what) {
    return std::bit_cast<double>(read_u64(is, what));
}

inline void read_f64_array(std::istream& is, double* v, std::size_t n, const char* what) {
    for (std::size_t i = 0; i < n; ++i) v[i] = read_f64(is, what);
}

inline std::string read_bytes(std::istream& is, std::size_t n, const char* what) {
    std::string s(n, '\0');
    if (n > 0 && !is.read(s.data(), static_cast<std::streamsize>(n)))
        throw DataError(std::string("truncated file while reading ") + what);
    return s;
}

inline void expect_magic(std::istream& is, const char* magic, const char* kind) {
    char got[4];
    if (!is.read(got, 4) || std::memcmp(got, magic, 4) != 0)
        throw DataError(std::string("bad magic: not a ") + kind + " file");
}

inline std::ofstream open_out(const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    return os;
}

inline std::ifstream open_in(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "' for reading");
    return is;
}

} // namespace fdm
