#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "errors.hpp"

namespace memgauge {

using Bytes = std::vector<std::uint8_t>;

/// 0/1 flags; used instead of std::vector<bool> so the data can be viewed as a span.
using BoolVector = std::vector<std::uint8_t>;

// Little-endian encoder for the on-disk formats.
class ByteWriter {
public:
    void put_u8(std::uint8_t v) { bytes_.push_back(v); }

    void put_u32(std::uint32_t v) {
        for (int shift = 0; shift < 32; shift += 8)
            bytes_.push_back(static_cast<std::uint8_t>(v >> shift));
    }

    void put_u64(std::uint64_t v) {
        for (int shift = 0; shift < 64; shift += 8)
            bytes_.push_back(static_cast<std::uint8_t>(v >> shift));
    }

    void put_f32(float v) { put_u32(std::bit_cast<std::uint32_t>(v)); }
    void put_f64(double v) { put_u64(std::bit_cast<std::uint64_t>(v)); }

    void put_bytes(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }
    void put_bytes(std::span<const std::uint8_t> s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

    const Bytes& bytes() const& { return bytes_; }
    Bytes bytes() && { return std::move(bytes_); }

private:
    Bytes bytes_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

    std::uint8_t get_u8() {
        need(1);
        return data_[pos_++];
    }

    std::uint32_t get_u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * i);
        return v;
    }

    std::uint64_t get_u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(data_[pos_++]) << (8 * i);
        return v;
    }

    float get_f32() { return std::bit_cast<float>(get_u32()); }
    double get_f64() { return std::bit_cast<double>(get_u64()); }

    std::span<const std::uint8_t> get_bytes(std::size_t n) {
        need(n);
        auto out = data_.subspan(pos_, n);
        pos_ += n;
        return out;
    }

    void expect_magic(std::string_view magic) {
        auto got = get_bytes(magic.size());
        if (std::memcmp(got.data(), magic.data(), magic.size()) != 0)
            throw MalformedFileError("bad magic, expected \"" + std::string(magic) + "\"");
    }

    std::size_t remaining() const noexcept { return data_.size() - pos_; }

    void expect_end() const {
        if (remaining() != 0)
            throw MalformedFileError(std::to_string(remaining()) + " trailing bytes");
    }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n)
            throw MalformedFileError("unexpected end of data");
    }

    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

/// Packs flags LSB-first, eight per byte.
inline Bytes pack_bits(std::span<const std::uint8_t> flags) {
    Bytes out((flags.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < flags.size(); ++i)
        if (flags[i])
            out[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    return out;
}

inline BoolVector unpack_bits(std::span<const std::uint8_t> packed, std::size_t n) {
    if (packed.size() < (n + 7) / 8)
        throw MalformedFileError("bit-packed vector is truncated");
    BoolVector out(n);
    for (std::size_t i = 0; i < n; ++i)
        out[i] = (packed[i / 8] >> (i % 8)) & 1u;
    return out;
}

inline Bytes read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + path.string());
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    Bytes out(size);
    if (size > 0 && !in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(size)))
        throw IoError("cannot read " + path.string());
    return out;
}

/// Writes through a temporary sibling and renames, so readers never see a partial file.
inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw IoError("cannot create " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out)
            throw IoError("cannot write " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline void write_text(const std::filesystem::path& path, std::string_view text) {
    write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string read_text(const std::filesystem::path& path) {
    auto bytes = read_file(path);
    return std::string(bytes.begin(), bytes.end());
}

} // namespace memgauge
