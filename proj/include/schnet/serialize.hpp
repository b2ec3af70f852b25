#pragma once

// SCHT on-disk formats.
//
// Single tensor ("SCHT"): magic bytes `SCHT`, u8 version=1, u8 dtype
// (0=f32, 1=f64), u32 little-endian rank, rank x u32 little-endian dims,
// row-major little-endian payload.
//
// Archive ("SCHA"): magic `SCHA`, u8 version=1, u32 entry count, then per
// entry: u32 name length, name bytes, u8 kind (0 = SCHT tensor blob,
// 1 = raw bytes), u64 payload size, payload. Entries are written in name
// order so equal contents give equal files.

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "schnet/errors.hpp"
#include "schnet/tensor.hpp"

static_assert(std::endian::native == std::endian::little,
              "SCHT serialization assumes a little-endian host");

namespace schnet {

struct RawTensor {
    Precision dtype = Precision::f32;
    Shape shape;
    std::vector<std::uint8_t> bytes;

    std::size_t numel() const { return shape_numel(shape); }

    template <typename T>
    static RawTensor from(const Tensor<T>& t) {
        RawTensor r;
        r.dtype = std::is_same_v<T, float> ? Precision::f32 : Precision::f64;
        r.shape = t.shape();
        r.bytes.resize(t.numel() * sizeof(T));
        std::memcpy(r.bytes.data(), t.data(), r.bytes.size());
        return r;
    }

    // Exact when dtypes match; widening f32 -> f64 is exact too.
    template <typename T>
    Tensor<T> to() const {
        std::vector<T> data(numel());
        if (dtype == Precision::f32) {
            const float* p = reinterpret_cast<const float*>(bytes.data());
            for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<T>(p[i]);
        } else {
            const double* p = reinterpret_cast<const double*>(bytes.data());
            for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<T>(p[i]);
        }
        return Tensor<T>::from_vector(shape, std::move(data));
    }
};

namespace detail {

struct ByteCursor {
    const std::uint8_t* data;
    std::size_t size;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > size)
            throw FormatError(std::string("unexpected end of data reading ") + what, pos);
    }

    template <typename U>
    U read(const char* what) {
        need(sizeof(U), what);
        U v;
        std::memcpy(&v, data + pos, sizeof(U));
        pos += sizeof(U);
        return v;
    }

    std::vector<std::uint8_t> read_bytes(std::size_t n, const char* what) {
        need(n, what);
        std::vector<std::uint8_t> out(data + pos, data + pos + n);
        pos += n;
        return out;
    }
};

template <typename U>
void append(std::vector<std::uint8_t>& out, U v) {
    const std::size_t at = out.size();
    out.resize(at + sizeof(U));
    std::memcpy(out.data() + at, &v, sizeof(U));
}

}  // namespace detail

inline std::size_t dtype_size(Precision p) {
    return p == Precision::f32 ? 4 : 8;
}

inline void encode_scht(std::vector<std::uint8_t>& out, const RawTensor& t) {
    out.push_back('S');
    out.push_back('C');
    out.push_back('H');
    out.push_back('T');
    out.push_back(1);
    out.push_back(static_cast<std::uint8_t>(t.dtype));
    detail::append<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) detail::append<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    out.insert(out.end(), t.bytes.begin(), t.bytes.end());
}

inline std::vector<std::uint8_t> encode_scht(const RawTensor& t) {
    std::vector<std::uint8_t> out;
    encode_scht(out, t);
    return out;
}

inline RawTensor decode_scht(const std::uint8_t* data, std::size_t size) {
    detail::ByteCursor cur{data, size};
    auto magic = cur.read_bytes(4, "magic");
    if (std::memcmp(magic.data(), "SCHT", 4) != 0)
        throw FormatError("bad SCHT magic", 0);
    const std::uint8_t version = cur.read<std::uint8_t>("version");
    if (version != 1)
        throw FormatError("unsupported SCHT version " + std::to_string(version), cur.pos - 1);
    const std::uint8_t dtype = cur.read<std::uint8_t>("dtype");
    if (dtype > 1) throw FormatError("bad SCHT dtype " + std::to_string(dtype), cur.pos - 1);
    const std::uint32_t rank = cur.read<std::uint32_t>("rank");
    if (rank > 8) throw FormatError("implausible SCHT rank " + std::to_string(rank), cur.pos - 4);
    RawTensor t;
    t.dtype = static_cast<Precision>(dtype);
    t.shape.resize(rank);
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        std::uint32_t d = cur.read<std::uint32_t>("dim");
        if (d == 0) throw FormatError("zero SCHT dim", cur.pos - 4);
        t.shape[i] = d;
        n *= d;
        if (n > (std::size_t{1} << 30))
            throw FormatError("implausible SCHT element count", cur.pos - 4);
    }
    t.bytes = cur.read_bytes(n * dtype_size(t.dtype), "payload");
    if (cur.pos != size) throw FormatError("trailing bytes after SCHT payload", cur.pos);
    return t;
}

struct ArchiveEntry {
    enum class Kind : std::uint8_t { tensor = 0, bytes = 1 };
    Kind kind = Kind::tensor;
    RawTensor tensor;
    std::vector<std::uint8_t> raw;
};

// Named-entry container backing checkpoints and encoder weight dumps.
class Archive {
  public:
    void put_tensor(const std::string& name, RawTensor t) {
        ArchiveEntry e;
        e.kind = ArchiveEntry::Kind::tensor;
        e.tensor = std::move(t);
        entries_[name] = std::move(e);
    }

    template <typename T>
    void put_tensor(const std::string& name, const Tensor<T>& t) {
        put_tensor(name, RawTensor::from(t));
    }

    void put_bytes(const std::string& name, std::vector<std::uint8_t> b) {
        ArchiveEntry e;
        e.kind = ArchiveEntry::Kind::bytes;
        e.raw = std::move(b);
        entries_[name] = std::move(e);
    }

    void put_text(const std::string& name, const std::string& text) {
        put_bytes(name, std::vector<std::uint8_t>(text.begin(), text.end()));
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    const RawTensor& tensor(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end() || it->second.kind != ArchiveEntry::Kind::tensor)
            throw IoError("archive: missing tensor entry '" + name + "'");
        return it->second.tensor;
    }

    std::string text(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end() || it->second.kind != ArchiveEntry::Kind::bytes)
            throw IoError("archive: missing bytes entry '" + name + "'");
        return std::string(it->second.raw.begin(), it->second.raw.end());
    }

    const std::map<std::string, ArchiveEntry>& entries() const { return entries_; }

    std::vector<std::uint8_t> encode() const {
        std::vector<std::uint8_t> out{'S', 'C', 'H', 'A', 1};
        detail::append<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
        for (const auto& [name, e] : entries_) {
            detail::append<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
            out.insert(out.end(), name.begin(), name.end());
            out.push_back(static_cast<std::uint8_t>(e.kind));
            std::vector<std::uint8_t> payload =
                e.kind == ArchiveEntry::Kind::tensor ? encode_scht(e.tensor) : e.raw;
            detail::append<std::uint64_t>(out, static_cast<std::uint64_t>(payload.size()));
            out.insert(out.end(), payload.begin(), payload.end());
        }
        return out;
    }

    static Archive decode(const std::uint8_t* data, std::size_t size) {
        detail::ByteCursor cur{data, size};
        auto magic = cur.read_bytes(4, "archive magic");
        if (std::memcmp(magic.data(), "SCHA", 4) != 0)
            throw FormatError("bad archive magic", 0);
        const std::uint8_t version = cur.read<std::uint8_t>("archive version");
        if (version != 1)
            throw FormatError("unsupported archive version " + std::to_string(version),
                              cur.pos - 1);
        const std::uint32_t count = cur.read<std::uint32_t>("entry count");
        Archive ar;
        for (std::uint32_t i = 0; i < count; ++i) {
            const std::uint32_t name_len = cur.read<std::uint32_t>("name length");
            if (name_len > 4096) throw FormatError("implausible entry name length", cur.pos - 4);
            auto name_bytes = cur.read_bytes(name_len, "entry name");
            std::string name(name_bytes.begin(), name_bytes.end());
            const std::uint8_t kind = cur.read<std::uint8_t>("entry kind");
            if (kind > 1) throw FormatError("bad entry kind", cur.pos - 1);
            const std::uint64_t payload_size = cur.read<std::uint64_t>("payload size");
            auto payload = cur.read_bytes(payload_size, "entry payload");
            if (kind == 0)
                ar.put_tensor(name, decode_scht(payload.data(), payload.size()));
            else
                ar.put_bytes(name, std::move(payload));
        }
        if (cur.pos != size) throw FormatError("trailing bytes after archive", cur.pos);
        return ar;
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot open '" + path + "' for writing");
        auto bytes = encode();
        f.write(reinterpret_cast<const char*>(bytes.data()),
                static_cast<std::streamsize>(bytes.size()));
        if (!f) throw IoError("short write to '" + path + "'");
    }

    static Archive load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot open '" + path + "' for reading");
        std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                        std::istreambuf_iterator<char>());
        return decode(bytes.data(), bytes.size());
    }

  private:
    std::map<std::string, ArchiveEntry> entries_;
};

inline std::string sha256_hex(const std::uint8_t* data, std::size_t size) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data, size, md, &len, EVP_sha256(), nullptr) != 1)
        throw IoError("sha256 digest failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xf]);
    }
    return out;
}

inline std::string sha256_hex(const std::vector<std::uint8_t>& bytes) {
    return sha256_hex(bytes.data(), bytes.size());
}

// Order-insensitive organization, order-sensitive bytes: callers pass a
// name-sorted map so the digest is reproducible.
template <typename T>
std::string hash_named_tensors(const std::map<std::string, Tensor<T>>& tensors) {
    std::vector<std::uint8_t> buf;
    for (const auto& [name, t] : tensors) {
        buf.insert(buf.end(), name.begin(), name.end());
        buf.push_back(0);
        // Hash the f32 image of the values so f32 and f64 builds of the same
        // seed agree.
        encode_scht(buf, RawTensor::from(t.template cast<float>()));
    }
    return sha256_hex(buf);
}

}  // namespace schnet
