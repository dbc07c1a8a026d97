#pragma once

// Checkpoint container.
//
//   magic   "HDUCKPT1"                      8 bytes
//   u64     header length, then header text (key=value lines, sorted by key)
//   u64     entry count
//   entry:  u32 name length, name bytes,
//           u8 dtype (1 = float32, 2 = float64),
//           u32 rank, u64 extent per axis,
//           raw values, little-endian IEEE-754
//
// All integers are little-endian. Writing the same Checkpoint twice yields
// identical bytes, and load(save(c)) == c bit for bit.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "hdu/arch/params.hpp"
#include "hdu/io/error.hpp"
#include "hdu/tensor.hpp"

namespace hdu::io {

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::variant<std::vector<float>, std::vector<double>> values;

    bool operator==(const CheckpointEntry& o) const {
        if (name != o.name || shape != o.shape || values.index() != o.values.index()) return false;
        // compare bit patterns so NaN payloads and signed zeros count
        return std::visit(
            [&](const auto& a) {
                const auto& b = std::get<std::decay_t<decltype(a)>>(o.values);
                return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(a[0])) == 0;
            },
            values);
    }
};

struct Checkpoint {
    std::map<std::string, std::string> header;
    std::vector<CheckpointEntry> entries;

    bool operator==(const Checkpoint&) const = default;

    const CheckpointEntry* find(const std::string& name) const {
        for (auto& e : entries)
            if (e.name == name) return &e;
        return nullptr;
    }

    std::string header_value(const std::string& key, const std::string& fallback = "") const {
        auto it = header.find(key);
        return it == header.end() ? fallback : it->second;
    }
};

namespace detail {

inline constexpr char kMagic[8] = {'H', 'D', 'U', 'C', 'K', 'P', 'T', '1'};

template <class U>
void put_le(std::string& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

template <class F>
void put_float(std::string& out, F v) {
    using U = std::conditional_t<sizeof(F) == 4, std::uint32_t, std::uint64_t>;
    put_le<U>(out, std::bit_cast<U>(v));
}

class Reader {
public:
    explicit Reader(std::string data) : data_(std::move(data)) {}

    template <class U>
    U get() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= U(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
        pos_ += sizeof(U);
        return v;
    }
    template <class F>
    F get_float() {
        using U = std::conditional_t<sizeof(F) == 4, std::uint32_t, std::uint64_t>;
        return std::bit_cast<F>(get<U>());
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool at_end() const { return pos_ == data_.size(); }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n)
            throw FormatError("checkpoint truncated: need " + std::to_string(n) + " bytes at offset " +
                              std::to_string(pos_) + ", " + std::to_string(data_.size() - pos_) + " remain");
    }
    std::string data_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode(const Checkpoint& ckpt) {
    std::string out(detail::kMagic, sizeof(detail::kMagic));
    std::string header;
    for (auto& [k, v] : ckpt.header) {
        if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
            throw std::invalid_argument("checkpoint header key/value contains a separator: " + k);
        header += k + "=" + v + "\n";
    }
    detail::put_le<std::uint64_t>(out, header.size());
    out += header;
    detail::put_le<std::uint64_t>(out, ckpt.entries.size());
    for (auto& e : ckpt.entries) {
        detail::put_le<std::uint32_t>(out, std::uint32_t(e.name.size()));
        out += e.name;
        out.push_back(char(e.values.index() == 0 ? 1 : 2));
        detail::put_le<std::uint32_t>(out, std::uint32_t(e.shape.size()));
        for (auto d : e.shape) detail::put_le<std::uint64_t>(out, d);
        std::visit(
            [&](const auto& vals) {
                if (vals.size() != numel(e.shape))
                    throw std::invalid_argument("checkpoint entry " + e.name + " has inconsistent size");
                for (auto v : vals) detail::put_float(out, v);
            },
            e.values);
    }
    return out;
}

inline Checkpoint decode(std::string bytes) {
    detail::Reader r(std::move(bytes));
    if (r.bytes(sizeof(detail::kMagic)) != std::string(detail::kMagic, sizeof(detail::kMagic)))
        throw FormatError("not a checkpoint (bad magic)");
    Checkpoint c;
    const std::string header = r.bytes(r.get<std::uint64_t>());
    std::size_t start = 0;
    while (start < header.size()) {
        const std::size_t nl = header.find('\n', start);
        if (nl == std::string::npos) throw FormatError("checkpoint header line not terminated");
        const std::string line = header.substr(start, nl - start);
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) throw FormatError("checkpoint header line without '=': " + line);
        c.header[line.substr(0, eq)] = line.substr(eq + 1);
        start = nl + 1;
    }
    const auto count = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        e.name = r.bytes(r.get<std::uint32_t>());
        const auto dtype = r.get<std::uint8_t>();
        const auto rank = r.get<std::uint32_t>();
        for (std::uint32_t a = 0; a < rank; ++a) e.shape.push_back(r.get<std::uint64_t>());
        const std::size_t n = numel(e.shape);
        if (dtype == 1) {
            std::vector<float> v(n);
            for (auto& x : v) x = r.get_float<float>();
            e.values = std::move(v);
        } else if (dtype == 2) {
            std::vector<double> v(n);
            for (auto& x : v) x = r.get_float<double>();
            e.values = std::move(v);
        } else {
            throw FormatError("checkpoint entry " + e.name + ": unknown dtype code " + std::to_string(dtype));
        }
        c.entries.push_back(std::move(e));
    }
    if (!r.at_end()) throw FormatError("checkpoint has trailing bytes");
    return c;
}

inline void save(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const std::string bytes = encode(ckpt);
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write " + tmp.string());
        os.write(bytes.data(), std::streamsize(bytes.size()));
        if (!os) throw std::runtime_error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return decode(std::move(bytes));
}

/// Appends every tensor (parameters and buffers) of `params`, prefixing names with `prefix`.
template <class T>
void append_parameters(Checkpoint& ckpt, const arch::ParameterSet<T>& params, const std::string& prefix = "") {
    for (auto& [name, e] : params.entries())
        ckpt.entries.push_back({prefix + name, e.tensor.shape(), std::vector<T>(e.tensor.data().begin(), e.tensor.data().end())});
}

/// Entries under `prefix`, keyed by their name with the prefix removed, converted to T.
template <class T>
std::map<std::string, std::pair<Shape, std::vector<T>>> entries_as(const Checkpoint& ckpt,
                                                                     const std::string& prefix = "") {
    std::map<std::string, std::pair<Shape, std::vector<T>>> out;
    for (auto& e : ckpt.entries) {
        if (e.name.rfind(prefix, 0) != 0) continue;
        std::vector<T> v;
        std::visit([&](const auto& vals) { v.assign(vals.begin(), vals.end()); }, e.values);
        out[e.name.substr(prefix.size())] = {e.shape, std::move(v)};
    }
    return out;
}

/// Loads parameter values into `params`; every model tensor must be present.
template <class T>
void restore_parameters(arch::ParameterSet<T>& params, const Checkpoint& ckpt, const std::string& prefix = "") {
    auto imported = params.import_values(entries_as<T>(ckpt, prefix));
    if (imported.size() != params.entries().size()) {
        for (auto& [name, e] : params.entries())
            if (!ckpt.find(prefix + name)) throw FormatError("checkpoint lacks tensor " + prefix + name);
    }
}

}  // namespace hdu::io
