#pragma once

// PYRT named-tensor container.
//
//   magic "PYRT" | version u16 | entry count u32
//   per entry: name length u16 | UTF-8 name | dtype u8 (0 f32, 1 f64, 2 i64)
//              | ndim u8 | dims u32 x ndim | little-endian payload
// All integers are little-endian. Entries keep insertion order so writing
// the same archive twice yields identical bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <variant>
#include <vector>

#include "pyreid/errors.hpp"
#include "pyreid/tensor.hpp"

namespace pyreid {

inline constexpr std::uint16_t kContainerVersion = 1;

enum class DType : std::uint8_t { f32 = 0, f64 = 1, i64 = 2 };

using AnyTensor = std::variant<Tensor<float>, Tensor<double>, Tensor<std::int64_t>>;

class TensorArchive {
public:
    struct Entry {
        std::string name;
        AnyTensor tensor;
    };

    template <typename T>
    void put(std::string name, Tensor<T> t) {
        for (auto& e : entries_) {
            if (e.name == name) {
                e.tensor = std::move(t);
                return;
            }
        }
        entries_.push_back({std::move(name), AnyTensor(std::move(t))});
    }

    bool contains(std::string_view name) const { return find(name) != nullptr; }

    template <typename T>
    const Tensor<T>& get(std::string_view name) const {
        const Entry* e = find(name);
        if (!e) throw FormatError("archive: missing entry '" + std::string(name) + "'");
        const auto* t = std::get_if<Tensor<T>>(&e->tensor);
        if (!t) throw FormatError("archive: entry '" + std::string(name) + "' has unexpected dtype");
        return *t;
    }

    const std::vector<Entry>& entries() const noexcept { return entries_; }
    std::size_t size() const noexcept { return entries_.size(); }

    std::vector<std::uint8_t> to_bytes() const;
    static TensorArchive from_bytes(const std::vector<std::uint8_t>& bytes);

    void save(const std::filesystem::path& path) const {
        const auto bytes = to_bytes();
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        if (!os) throw FormatError("archive: cannot open '" + path.string() + "' for writing");
        os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!os) throw FormatError("archive: write failed for '" + path.string() + "'");
    }

    static TensorArchive load(const std::filesystem::path& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw FormatError("archive: cannot open '" + path.string() + "'");
        std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        return from_bytes(bytes);
    }

private:
    const Entry* find(std::string_view name) const {
        for (const auto& e : entries_)
            if (e.name == name) return &e;
        return nullptr;
    }

    std::vector<Entry> entries_;
};

namespace detail {

class ByteWriter {
public:
    template <typename U>
    void put_le(U v) {
        using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                     std::conditional_t<sizeof(U) == 4, std::uint32_t,
                     std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint8_t>>>;
        const auto bits = std::bit_cast<Bits>(v);
        for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
    void put_bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out.insert(out.end(), b, b + n);
    }
    std::vector<std::uint8_t> out;
};

class ByteReader {
public:
    explicit ByteReader(const std::vector<std::uint8_t>& b) : bytes(b) {}

    template <typename U>
    U get_le() {
        using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t,
                     std::conditional_t<sizeof(U) == 4, std::uint32_t,
                     std::conditional_t<sizeof(U) == 2, std::uint16_t, std::uint8_t>>>;
        need(sizeof(U));
        Bits bits = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) bits |= static_cast<Bits>(Bits{bytes[pos + i]} << (8 * i));
        pos += sizeof(U);
        return std::bit_cast<U>(bits);
    }
    std::string get_string(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(&bytes[pos]), n);
        pos += n;
        return s;
    }
    void need(std::size_t n) const {
        if (pos + n > bytes.size()) {
            throw FormatError("archive: truncated at byte " + std::to_string(pos) + " (need " + std::to_string(n) +
                              " more)");
        }
    }
    const std::vector<std::uint8_t>& bytes;
    std::size_t pos = 0;
};

template <typename T>
void write_payload(ByteWriter& w, const Tensor<T>& t) {
    for (auto v : t.data()) w.put_le(v);
}

template <typename T>
Tensor<T> read_payload(ByteReader& r, Shape shape) {
    const std::size_t n = shape_size(shape);
    r.need(n * sizeof(T));
    std::vector<T> data(n);
    for (auto& v : data) v = r.get_le<T>();
    return Tensor<T>(std::move(shape), std::move(data));
}

} // namespace detail

inline std::vector<std::uint8_t> TensorArchive::to_bytes() const {
    detail::ByteWriter w;
    w.put_bytes("PYRT", 4);
    w.put_le(kContainerVersion);
    w.put_le(static_cast<std::uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
        if (e.name.size() > 0xFFFF) throw FormatError("archive: entry name too long: " + e.name.substr(0, 32));
        w.put_le(static_cast<std::uint16_t>(e.name.size()));
        w.put_bytes(e.name.data(), e.name.size());
        std::visit(
            [&](const auto& t) {
                using T = typename std::decay_t<decltype(t)>::value_type;
                const DType code = std::is_same_v<T, float>    ? DType::f32
                                   : std::is_same_v<T, double> ? DType::f64
                                                               : DType::i64;
                w.put_le(static_cast<std::uint8_t>(code));
                if (t.rank() > 0xFF) throw FormatError("archive: rank too large for '" + e.name + "'");
                w.put_le(static_cast<std::uint8_t>(t.rank()));
                for (auto d : t.shape()) {
                    if (d > 0xFFFFFFFFULL) throw FormatError("archive: extent too large for '" + e.name + "'");
                    w.put_le(static_cast<std::uint32_t>(d));
                }
                detail::write_payload(w, t);
            },
            e.tensor);
    }
    return std::move(w.out);
}

inline TensorArchive TensorArchive::from_bytes(const std::vector<std::uint8_t>& bytes) {
    detail::ByteReader r(bytes);
    if (r.get_string(4) != "PYRT") throw FormatError("archive: bad magic (not a PYRT container)");
    const auto version = r.get_le<std::uint16_t>();
    if (version != kContainerVersion) {
        throw FormatError("archive: unsupported version " + std::to_string(version) + " (expected " +
                          std::to_string(kContainerVersion) + ")");
    }
    const auto count = r.get_le<std::uint32_t>();
    TensorArchive ar;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto nlen = r.get_le<std::uint16_t>();
        std::string name = r.get_string(nlen);
        const auto code = r.get_le<std::uint8_t>();
        const auto ndim = r.get_le<std::uint8_t>();
        Shape shape(ndim);
        for (auto& d : shape) {
            d = r.get_le<std::uint32_t>();
            if (d == 0) throw FormatError("archive: zero extent in entry '" + name + "'");
        }
        switch (static_cast<DType>(code)) {
        case DType::f32: ar.entries_.push_back({std::move(name), detail::read_payload<float>(r, std::move(shape))}); break;
        case DType::f64: ar.entries_.push_back({std::move(name), detail::read_payload<double>(r, std::move(shape))}); break;
        case DType::i64:
            ar.entries_.push_back({std::move(name), detail::read_payload<std::int64_t>(r, std::move(shape))});
            break;
        default: throw FormatError("archive: unknown dtype code " + std::to_string(code) + " in entry '" + name + "'");
        }
    }
    if (r.pos != bytes.size()) throw FormatError("archive: trailing bytes after last entry");
    return ar;
}

} // namespace pyreid
