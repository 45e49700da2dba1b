#pragma once

// Little-endian binary encoding, SHA-256 digests and the checkpoint container
// shared by every trained model.

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "refgen/error.hpp"
#include "refgen/tensor.hpp"

namespace refgen {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

using Bytes = std::vector<std::uint8_t>;

class ByteWriter {
   public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v) { raw(&v, sizeof v); }
    void u32(std::uint32_t v) { raw(&v, sizeof v); }
    void f32(float v) { raw(&v, sizeof v); }
    void f32s(std::span<const float> v) { raw(v.data(), v.size_bytes()); }
    void bytes(std::span<const std::uint8_t> v) { buf_.insert(buf_.end(), v.begin(), v.end()); }
    void text(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

    Bytes& buffer() { return buf_; }
    Bytes take() { return std::move(buf_); }

   private:
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    Bytes buf_;
};

// Bounds-checked reader; running off the end is an integrity failure.
class ByteReader {
   public:
    ByteReader(std::span<const std::uint8_t> data, std::string what) : data_(data), what_(std::move(what)) {}

    std::uint8_t u8() { return take<std::uint8_t>(); }
    std::uint16_t u16() { return take<std::uint16_t>(); }
    std::uint32_t u32() { return take<std::uint32_t>(); }
    float f32() { return take<float>(); }

    void f32s(std::span<float> out) {
        need(out.size_bytes());
        std::memcpy(out.data(), data_.data() + pos_, out.size_bytes());
        pos_ += out.size_bytes();
    }

    std::span<const std::uint8_t> bytes(std::size_t n) {
        need(n);
        auto s = data_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

    std::string text(std::size_t n) {
        auto s = bytes(n);
        return {s.begin(), s.end()};
    }

    void expect_magic(std::string_view magic) {
        if (remaining() < magic.size() || text(magic.size()) != magic)
            throw IntegrityError(what_ + ": bad magic, expected \"" + std::string(magic) + "\"");
    }

    void expect_end() const {
        if (pos_ != data_.size())
            throw IntegrityError(what_ + ": " + std::to_string(data_.size() - pos_) + " trailing bytes");
    }

    std::size_t position() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }

   private:
    template <class T>
    T take() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) throw IntegrityError(what_ + ": truncated");
    }

    std::span<const std::uint8_t> data_;
    std::string what_;
    std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Files

inline Bytes read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open " + path.string());
    return Bytes(std::istreambuf_iterator<char>(in), {});
}

// Writes to a sibling temp file and renames, so readers never see a partial file.
inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> data) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ValidationError("cannot write " + path.string());
        out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
        if (!out) throw ValidationError("write failed for " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

inline void write_text(const std::filesystem::path& path, std::string_view text) {
    write_file(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

// ---------------------------------------------------------------------------
// SHA-256

using Digest = std::array<std::uint8_t, 32>;

inline Digest sha256(std::span<const std::uint8_t> data) {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    Digest d{};
    unsigned int len = 0;
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx.get(), data.data(), data.size()) != 1 ||
        EVP_DigestFinal_ex(ctx.get(), d.data(), &len) != 1 || len != d.size())
        throw std::runtime_error("SHA-256 computation failed");
    return d;
}

inline Digest sha256(std::string_view s) {
    return sha256(std::span{reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
}

inline std::string hex(std::span<const std::uint8_t> d) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    out.reserve(d.size() * 2);
    for (auto b : d) {
        out.push_back(digits[b >> 4]);
        out.push_back(digits[b & 15]);
    }
    return out;
}

inline std::string sha256_hex(std::span<const std::uint8_t> data) { return hex(sha256(data)); }
inline std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

// ---------------------------------------------------------------------------
// Checkpoint container:
//   magic[4] | u16 version | u32 n + n bytes JSON hyperparameters
//   | u32 tensor count | per tensor {u16 name len, name, u8 rank, u32 dims..., f32 data}
//   | 32-byte SHA-256 of everything before it

struct Checkpoint {
    std::string magic;
    std::uint16_t version = 1;
    nlohmann::json hyper = nlohmann::json::object();
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor& tensor(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return t;
        throw IntegrityError(magic + " checkpoint: missing tensor '" + name + "'");
    }

    // Tensor `name`, which must have exactly `shape`.
    const Tensor& tensor(const std::string& name, const Shape& shape) const {
        const Tensor& t = tensor(name);
        if (t.shape() != shape)
            throw IntegrityError(magic + " checkpoint: tensor '" + name + "' has shape " + shape_str(t.shape()) +
                                 ", expected " + shape_str(shape));
        return t;
    }
};

inline Bytes encode_checkpoint(const Checkpoint& ck) {
    require(ck.magic.size() == 4, "checkpoint magic must be 4 bytes");
    ByteWriter w;
    w.text(ck.magic);
    w.u16(ck.version);
    const std::string hyper = ck.hyper.dump();
    w.u32(static_cast<std::uint32_t>(hyper.size()));
    w.text(hyper);
    w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& [name, t] : ck.tensors) {
        require(name.size() < 65536, "tensor name too long");
        w.u16(static_cast<std::uint16_t>(name.size()));
        w.text(name);
        w.u8(static_cast<std::uint8_t>(t.rank()));
        for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
        w.f32s(t.values());
    }
    const Digest d = sha256(w.buffer());
    w.bytes(d);
    return w.take();
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> data, std::string_view magic,
                                    std::uint16_t version) {
    const std::string what = std::string(magic) + " checkpoint";
    if (data.size() < 4 + 2 + 32) throw IntegrityError(what + ": truncated");
    const auto body = data.first(data.size() - 32);
    const Digest d = sha256(body);
    if (!std::equal(d.begin(), d.end(), data.end() - 32)) throw IntegrityError(what + ": checksum mismatch");

    ByteReader r(body, what);
    r.expect_magic(magic);
    Checkpoint ck;
    ck.magic = std::string(magic);
    ck.version = r.u16();
    if (ck.version != version)
        throw IntegrityError(what + ": version " + std::to_string(ck.version) + ", expected " +
                             std::to_string(version));
    const std::uint32_t hyper_len = r.u32();
    try {
        ck.hyper = nlohmann::json::parse(r.text(hyper_len));
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(what + ": bad hyperparameter block: " + e.what());
    }
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.text(r.u16());
        const std::uint8_t rank = r.u8();
        if (rank == 0) throw IntegrityError(what + ": tensor '" + name + "' has rank 0");
        Shape shape(rank);
        for (auto& s : shape) {
            s = r.u32();
            if (s == 0) throw IntegrityError(what + ": tensor '" + name + "' has a zero dimension");
        }
        if (shape_numel(shape) * sizeof(float) > r.remaining()) throw IntegrityError(what + ": truncated");
        Tensor t(std::move(shape));
        r.f32s(t.values());
        ck.tensors.emplace_back(std::move(name), std::move(t));
    }
    r.expect_end();
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, std::string_view magic, std::uint16_t version) {
    return decode_checkpoint(read_file(path), magic, version);
}

}  // namespace refgen
