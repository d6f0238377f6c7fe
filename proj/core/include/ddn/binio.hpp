#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ddn/errors.hpp"

namespace ddn {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts unsupported");

/// Little-endian binary writer over a stream.
class BinWriter {
public:
    explicit BinWriter(const std::string& path)
        : path_(path), out_(path, std::ios::binary) {
        if (!out_) throw io_error("cannot open for writing: " + path);
    }

    void bytes(const void* p, std::size_t n) {
        out_.write(static_cast<const char*>(p), std::streamsize(n));
        if (!out_) throw io_error("write failed: " + path_);
    }

    void magic(const char tag[4]) { bytes(tag, 4); }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u16(std::uint16_t v) { bytes(&v, 2); }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void u64(std::uint64_t v) { bytes(&v, 8); }
    void f32(float v) { bytes(&v, 4); }
    void f32_array(const float* p, std::size_t n) { bytes(p, n * 4); }

    void close() {
        out_.close();
        if (!out_) throw io_error("close failed: " + path_);
    }

private:
    std::string path_;
    std::ofstream out_;
};

/// Little-endian binary reader with byte-offset error reporting.
class BinReader {
public:
    explicit BinReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw io_error("cannot open for reading: " + path);
    }

    std::size_t offset() const { return offset_; }

    void bytes(void* p, std::size_t n) {
        in_.read(static_cast<char*>(p), std::streamsize(n));
        if (std::size_t(in_.gcount()) != n)
            throw format_error(path_ + ": truncated at byte offset " + std::to_string(offset_));
        offset_ += n;
    }

    void expect_magic(const char tag[4]) {
        char got[4];
        const std::size_t at = offset_;
        bytes(got, 4);
        if (std::memcmp(got, tag, 4) != 0)
            throw format_error(path_ + ": bad magic at byte offset " + std::to_string(at) +
                               " (expected \"" + std::string(tag, 4) + "\")");
    }

    std::uint8_t u8() { std::uint8_t v; bytes(&v, 1); return v; }
    std::uint16_t u16() { std::uint16_t v; bytes(&v, 2); return v; }
    std::uint32_t u32() { std::uint32_t v; bytes(&v, 4); return v; }
    std::uint64_t u64() { std::uint64_t v; bytes(&v, 8); return v; }
    float f32() { float v; bytes(&v, 4); return v; }
    void f32_array(float* p, std::size_t n) { bytes(p, n * 4); }

    void expect_eof() {
        char c;
        in_.read(&c, 1);
        if (in_.gcount() != 0)
            throw format_error(path_ + ": trailing bytes at offset " + std::to_string(offset_));
    }

    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::ifstream in_;
    std::size_t offset_ = 0;
};

} // namespace ddn
