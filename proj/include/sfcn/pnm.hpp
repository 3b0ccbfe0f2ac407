#pragma once

// Binary PGM (P5) and PPM (P6) with maxval 255.

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "sfcn/error.hpp"

namespace sfcn {

struct PnmImage {
    std::size_t channels = 1;  // 1 for P5, 3 for P6
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;  // interleaved, row-major
};

namespace detail {

class PnmCursor {
public:
    PnmCursor(std::span<const std::uint8_t> bytes, std::size_t pos) : bytes_(bytes), pos_(pos) {}

    std::size_t offset() const { return pos_; }

    void skip_space_and_comments() {
        while (pos_ < bytes_.size()) {
            if (std::isspace(bytes_[pos_])) {
                ++pos_;
            } else if (bytes_[pos_] == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
            } else {
                break;
            }
        }
    }

    std::size_t read_uint(const char* field) {
        skip_space_and_comments();
        const std::size_t start = pos_;
        std::size_t v = 0;
        while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
            v = v * 10 + (bytes_[pos_] - '0');
            if (v > (1u << 24)) throw FormatError(std::string("pnm: ") + field + " too large", start);
            ++pos_;
        }
        if (pos_ == start) throw FormatError(std::string("pnm: expected ") + field, start);
        return v;
    }

    void expect_single_space() {
        if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_]))
            throw FormatError("pnm: expected whitespace after maxval", pos_);
        ++pos_;
    }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_;
};

}  // namespace detail

inline PnmImage decode_pnm(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 2) throw FormatError("pnm: file too short for magic number", bytes.size());
    if (bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
        throw FormatError("pnm: unsupported magic (expected P5 or P6)", 0);
    PnmImage img;
    img.channels = bytes[1] == '5' ? 1 : 3;
    detail::PnmCursor cur(bytes, 2);
    img.width = cur.read_uint("width");
    img.height = cur.read_uint("height");
    cur.skip_space_and_comments();
    const std::size_t maxval_at = cur.offset();
    const std::size_t maxval = cur.read_uint("maxval");
    if (img.width == 0 || img.height == 0) throw FormatError("pnm: zero image extent", maxval_at);
    if (maxval != 255)
        throw FormatError("pnm: unsupported maxval " + std::to_string(maxval) + " (only 255)", maxval_at);
    cur.expect_single_space();
    const std::size_t start = cur.offset();
    const std::size_t need = img.width * img.height * img.channels;
    if (bytes.size() - start < need)
        throw FormatError("pnm: truncated payload, expected " + std::to_string(need) + " bytes, found " +
                              std::to_string(bytes.size() - start),
                          bytes.size());
    img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                      bytes.begin() + static_cast<std::ptrdiff_t>(start + need));
    return img;
}

inline std::vector<std::uint8_t> encode_pnm(const PnmImage& img) {
    if (img.channels != 1 && img.channels != 3) throw Error("pnm: only 1 or 3 channels can be encoded");
    if (img.pixels.size() != img.width * img.height * img.channels) throw Error("pnm: pixel buffer size mismatch");
    const std::string header = std::string(img.channels == 1 ? "P5" : "P6") + "\n" + std::to_string(img.width) +
                               " " + std::to_string(img.height) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.insert(out.end(), img.pixels.begin(), img.pixels.end());
    return out;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

inline PnmImage read_pnm(const std::filesystem::path& path) {
    try {
        return decode_pnm(read_file(path));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.detail(), e.offset());
    }
}

inline void write_pnm(const std::filesystem::path& path, const PnmImage& img) { write_file(path, encode_pnm(img)); }

}  // namespace sfcn
