#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "geofuse/error.hpp"

namespace geofuse {

// Little-endian buffer writer. The host is little-endian x86-64; values are
// memcpy'd directly.
class ByteWriter {
public:
    void u8(uint8_t v) { raw(&v, 1); }
    void u16(uint16_t v) { raw(&v, 2); }
    void u32(uint32_t v) { raw(&v, 4); }
    void u64(uint64_t v) { raw(&v, 8); }
    void f32(float v) { raw(&v, 4); }
    void f64(double v) { raw(&v, 8); }
    void bytes(const void* p, size_t n) { raw(p, n); }

    const std::vector<uint8_t>& buffer() const { return buf_; }
    std::vector<uint8_t> take() { return std::move(buf_); }
    size_t size() const { return buf_.size(); }

private:
    void raw(const void* p, size_t n) {
        const auto* b = static_cast<const uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    std::vector<uint8_t> buf_;
};

// Bounds-checked reader; throws FormatError carrying the byte offset.
class ByteReader {
public:
    ByteReader(const uint8_t* data, size_t size, uint64_t base_offset = 0)
        : data_(data), size_(size), base_(base_offset) {}

    uint8_t u8() { return get<uint8_t>(); }
    uint16_t u16() { return get<uint16_t>(); }
    uint32_t u32() { return get<uint32_t>(); }
    uint64_t u64() { return get<uint64_t>(); }
    float f32() { return get<float>(); }
    double f64() { return get<double>(); }

    void bytes(void* out, size_t n) {
        need(n);
        std::memcpy(out, data_ + pos_, n);
        pos_ += n;
    }

    std::string str(size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }

    size_t remaining() const { return size_ - pos_; }
    uint64_t offset() const { return base_ + pos_; }

    void expect_magic(const char magic[4], const std::string& what) {
        char m[4];
        bytes(m, 4);
        if (std::memcmp(m, magic, 4) != 0) {
            throw FormatError("bad " + what + " magic", offset() - 4);
        }
    }

    void fail(const std::string& msg) const { throw FormatError(msg, offset()); }

private:
    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_ + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    void need(size_t n) const {
        if (pos_ + n > size_) throw FormatError("truncated data", base_ + size_);
    }

    const uint8_t* data_;
    size_t size_;
    size_t pos_ = 0;
    uint64_t base_;
};

std::vector<uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<uint8_t>& data);

}  // namespace geofuse
