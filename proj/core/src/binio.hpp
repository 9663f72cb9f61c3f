#pragma once

// Internal little-endian stream helpers shared by the binary file formats.

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "hyperpelt/error.hpp"

namespace hyperpelt::binio {

inline void put_u16(std::ostream& os, std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    put_u32(os, static_cast<std::uint32_t>(v & 0xffffffffULL));
    put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline void put_u8(std::ostream& os, std::uint8_t v) {
    os.write(reinterpret_cast<const char*>(&v), 1);
}

inline void put_f32(std::ostream& os, float v) {
    put_u32(os, std::bit_cast<std::uint32_t>(v));
}

inline std::uint8_t get_u8(std::istream& is, const char* field) {
    unsigned char b;
    if (!is.read(reinterpret_cast<char*>(&b), 1)) {
        throw format_error(std::string("truncated while reading ") + field);
    }
    return b;
}

inline std::uint16_t get_u16(std::istream& is, const char* field) {
    unsigned char b[2];
    if (!is.read(reinterpret_cast<char*>(b), 2)) {
        throw format_error(std::string("truncated while reading ") + field);
    }
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline std::uint32_t get_u32(std::istream& is, const char* field) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) {
        throw format_error(std::string("truncated while reading ") + field);
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t get_u64(std::istream& is, const char* field) {
    const std::uint64_t lo = get_u32(is, field);
    const std::uint64_t hi = get_u32(is, field);
    return lo | (hi << 32);
}

inline float get_f32(std::istream& is, const char* field) {
    return std::bit_cast<float>(get_u32(is, field));
}

inline std::string get_bytes(std::istream& is, std::size_t n, const char* field) {
    std::string s(n, '\0');
    if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) {
        throw format_error(std::string("truncated while reading ") + field);
    }
    return s;
}

} // namespace hyperpelt::binio
