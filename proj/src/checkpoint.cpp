// Copyright (c) 2026, The sqft-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include "sqft/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include <fmt/format.h>

#include "sqft/error.hpp"

namespace sqft {

static_assert(std::endian::native == std::endian::little,
              "SQCK payloads are copied verbatim; big-endian hosts need byte swapping");

std::size_t dtype_size(DType t) noexcept {
    switch (t) {
        case DType::f32: return 4;
        case DType::f64: return 8;
        case DType::u8: return 1;
        case DType::i32: return 4;
        case DType::mask: return 1;
    }
    return 0;
}

std::string_view to_string(DType t) noexcept {
    switch (t) {
        case DType::f32: return "f32";
        case DType::f64: return "f64";
        case DType::u8: return "u8";
        case DType::i32: return "i32";
        case DType::mask: return "mask";
    }
    return "?";
}

std::uint64_t Tensor::element_count() const noexcept {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

namespace {

template <typename T>
std::vector<std::uint8_t> to_bytes(const std::vector<T>& values) {
    std::vector<std::uint8_t> out(values.size() * sizeof(T));
    if (!out.empty()) std::memcpy(out.data(), values.data(), out.size());
    return out;
}

template <typename T>
std::vector<T> from_bytes(const std::vector<std::uint8_t>& bytes) {
    std::vector<T> out(bytes.size() / sizeof(T));
    if (!out.empty()) std::memcpy(out.data(), bytes.data(), out.size() * sizeof(T));
    return out;
}

void require_dtype(const Tensor& t, DType want) {
    if (t.dtype != want) {
        throw ConfigError(fmt::format("tensor '{}' has dtype {}, expected {}", t.name,
                                      to_string(t.dtype), to_string(want)));
    }
}

}  // namespace

Tensor Tensor::from_matrix(std::string name, const Matrix& m, DType dtype) {
    Tensor t{std::move(name), dtype, {m.rows(), m.cols()}, {}};
    if (dtype == DType::f64) {
        t.payload = to_bytes(std::vector<double>(m.data().begin(), m.data().end()));
    } else if (dtype == DType::f32) {
        std::vector<float> v(m.size());
        for (std::size_t i = 0; i < m.size(); ++i) v[i] = static_cast<float>(m.data()[i]);
        t.payload = to_bytes(v);
    } else {
        throw ConfigError("matrices are stored as f32 or f64");
    }
    return t;
}

Tensor Tensor::from_u8(std::string name, std::vector<std::uint64_t> dims,
                       const std::vector<std::uint8_t>& values) {
    return Tensor{std::move(name), DType::u8, std::move(dims), values};
}

Tensor Tensor::from_i32(std::string name, std::vector<std::uint64_t> dims,
                        const std::vector<std::int32_t>& values) {
    return Tensor{std::move(name), DType::i32, std::move(dims), to_bytes(values)};
}

Tensor Tensor::from_f32(std::string name, std::vector<std::uint64_t> dims,
                        const std::vector<double>& values) {
    std::vector<float> v(values.begin(), values.end());
    return Tensor{std::move(name), DType::f32, std::move(dims), to_bytes(v)};
}

Tensor Tensor::from_mask(std::string name, const SparsityMask& mask) {
    return Tensor{std::move(name), DType::mask, {mask.rows(), mask.cols()}, mask.bits()};
}

std::vector<double> Tensor::to_f64_values() const {
    if (dtype == DType::f64) return from_bytes<double>(payload);
    require_dtype(*this, DType::f32);
    const auto f = from_bytes<float>(payload);
    return std::vector<double>(f.begin(), f.end());
}

Matrix Tensor::to_matrix() const {
    if (dims.size() != 2) {
        throw ConfigError(fmt::format("tensor '{}' has rank {}, expected 2", name, dims.size()));
    }
    return Matrix(dims[0], dims[1], to_f64_values());
}

std::vector<std::uint8_t> Tensor::to_u8() const {
    require_dtype(*this, DType::u8);
    return payload;
}

std::vector<std::int32_t> Tensor::to_i32() const {
    require_dtype(*this, DType::i32);
    return from_bytes<std::int32_t>(payload);
}

SparsityMask Tensor::to_mask() const {
    require_dtype(*this, DType::mask);
    if (dims.size() != 2) {
        throw ConfigError(fmt::format("mask '{}' has rank {}, expected 2", name, dims.size()));
    }
    return SparsityMask(dims[0], dims[1], payload);
}

const Tensor* CheckpointContainer::find(std::string_view name) const noexcept {
    for (const auto& t : tensors) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

const Tensor& CheckpointContainer::get(std::string_view name) const {
    if (const Tensor* t = find(name)) return *t;
    throw ConfigError(fmt::format("checkpoint has no tensor '{}'", name));
}

std::optional<std::string> CheckpointContainer::meta(std::string_view key) const {
    for (const auto& [k, v] : metadata) {
        if (k == key) return v;
    }
    return std::nullopt;
}

void CheckpointContainer::set_meta(std::string key, std::string value) {
    if (key.empty() || key.find_first_of("=\n") != std::string::npos ||
        value.find('\n') != std::string::npos) {
        throw ConfigError(fmt::format("invalid metadata entry '{}'", key));
    }
    for (auto& [k, v] : metadata) {
        if (k == key) {
            v = std::move(value);
            return;
        }
    }
    metadata.emplace_back(std::move(key), std::move(value));
}

namespace {

class Writer {
public:
    template <typename T>
    void put(T v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        out_.insert(out_.end(), p, p + sizeof(T));
    }
    void put_bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
    void put_string(std::string_view s) {
        put_bytes({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
    }
    std::vector<std::uint8_t> take() { return std::move(out_); }

private:
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    void set_context(std::string tensor) { tensor_ = std::move(tensor); }
    std::uint64_t offset() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

    [[noreturn]] void fail(const std::string& what) const {
        const std::string where = tensor_.empty() ? "" : fmt::format(" in tensor '{}'", tensor_);
        throw FormatError(fmt::format("checkpoint format error at offset {}{}: {}", pos_, where, what),
                          pos_, tensor_);
    }

    template <typename T>
    T get(std::string_view field) {
        need(sizeof(T), field);
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::span<const std::uint8_t> get_bytes(std::uint64_t n, std::string_view field) {
        need(n, field);
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

private:
    void need(std::uint64_t n, std::string_view field) {
        if (n > remaining()) {
            fail(fmt::format("truncated {} (need {} bytes, {} left)", field, n, remaining()));
        }
    }

    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
    std::string tensor_;
};

constexpr char kMagic[4] = {'S', 'Q', 'C', 'K'};

}  // namespace

std::vector<std::uint8_t> serialize(const CheckpointContainer& c) {
    Writer w;
    w.put_string(std::string_view(kMagic, 4));
    w.put<std::uint32_t>(CheckpointContainer::kVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(c.tensors.size()));
    std::set<std::string_view> names;
    for (const auto& t : c.tensors) {
        if (t.name.size() > 0xFFFF) throw ConfigError("tensor name too long");
        if (!names.insert(t.name).second) {
            throw ConfigError(fmt::format("duplicate tensor name '{}'", t.name));
        }
        if (t.dims.size() > 0xFF) throw ConfigError("tensor rank too large");
        if (t.payload.size() != t.element_count() * dtype_size(t.dtype)) {
            throw ConfigError(fmt::format("tensor '{}' payload does not match its dims", t.name));
        }
        w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
        w.put_string(t.name);
        w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dtype));
        w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dims.size()));
        for (auto d : t.dims) w.put<std::uint64_t>(d);
        w.put_bytes(t.payload);
    }
    std::string meta;
    for (const auto& [k, v] : c.metadata) {
        meta += k;
        meta += '=';
        meta += v;
        meta += '\n';
    }
    if (meta.size() > 0xFFFF) throw ConfigError("metadata block exceeds 65535 bytes");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(meta.size()));
    w.put_string(meta);
    return w.take();
}

CheckpointContainer deserialize(std::span<const std::uint8_t> bytes) {
    Reader r(bytes);
    auto magic = r.get_bytes(4, "magic");
    if (std::memcmp(magic.data(), kMagic, 4) != 0) {
        throw FormatError("checkpoint format error at offset 0: bad magic (expected SQCK)", 0);
    }
    const auto version = r.get<std::uint32_t>("version");
    if (version != CheckpointContainer::kVersion) {
        throw FormatError(fmt::format("checkpoint format error at offset 4: unsupported version {}",
                                      version),
                          4);
    }
    const auto count = r.get<std::uint32_t>("tensor count");
    CheckpointContainer c;
    std::set<std::string> names;
    for (std::uint32_t i = 0; i < count; ++i) {
        r.set_context(fmt::format("#{}", i));
        Tensor t;
        const auto name_len = r.get<std::uint16_t>("name length");
        auto name = r.get_bytes(name_len, "name");
        t.name.assign(name.begin(), name.end());
        r.set_context(t.name);
        if (!names.insert(t.name).second) r.fail("duplicate tensor name");
        const auto dtype = r.get<std::uint8_t>("dtype");
        if (dtype > static_cast<std::uint8_t>(DType::mask)) {
            r.fail(fmt::format("unknown dtype code {}", dtype));
        }
        t.dtype = static_cast<DType>(dtype);
        const auto rank = r.get<std::uint8_t>("rank");
        std::uint64_t elems = 1;
        for (std::uint8_t d = 0; d < rank; ++d) {
            t.dims.push_back(r.get<std::uint64_t>("dims"));
            if (t.dims.back() != 0 && elems > (~std::uint64_t{0} / 16) / t.dims.back()) {
                r.fail("dims overflow");
            }
            elems *= t.dims.back();
        }
        auto payload = r.get_bytes(elems * dtype_size(t.dtype), "payload");
        t.payload.assign(payload.begin(), payload.end());
        if (t.dtype == DType::mask) {
            for (auto b : t.payload) {
                if (b > 1) r.fail("mask payload holds a value other than 0 or 1");
            }
        }
        c.tensors.push_back(std::move(t));
    }
    r.set_context({});
    const auto meta_len = r.get<std::uint16_t>("metadata length");
    auto meta = r.get_bytes(meta_len, "metadata");
    std::string_view text(reinterpret_cast<const char*>(meta.data()), meta.size());
    while (!text.empty()) {
        const auto nl = text.find('\n');
        if (nl == std::string_view::npos) r.fail("metadata line without newline");
        std::string_view line = text.substr(0, nl);
        text.remove_prefix(nl + 1);
        const auto eq = line.find('=');
        if (eq == std::string_view::npos || eq == 0) r.fail("metadata line without key=value");
        c.metadata.emplace_back(std::string(line.substr(0, eq)), std::string(line.substr(eq + 1)));
    }
    if (r.remaining() != 0) r.fail("trailing bytes after metadata");
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const CheckpointContainer& c) {
    const auto bytes = serialize(c);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(fmt::format("cannot open {} for writing", path.string()));
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(fmt::format("failed writing {}", path.string()));
}

CheckpointContainer load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(fmt::format("cannot open {}", path.string()));
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

void put_quantized(CheckpointContainer& c, const std::string& prefix, const QuantizedTensor& q) {
    const QuantParams& p = q.params;
    c.tensors.push_back(Tensor::from_u8(prefix + ".codes", {p.rows, p.cols}, q.codes));
    c.tensors.push_back(Tensor::from_f32(prefix + ".scales", {p.rows, p.groups_per_row()}, p.scales));
    c.tensors.push_back(Tensor::from_i32(prefix + ".zeros", {p.rows, p.groups_per_row()}, p.zeros));
    c.set_meta("bits", std::to_string(p.bits));
    c.set_meta("range_mode", std::string(to_string(p.range_mode)));
}

QuantizedTensor get_quantized(const CheckpointContainer& c, const std::string& prefix) {
    const Tensor& codes = c.get(prefix + ".codes");
    const Tensor& scales = c.get(prefix + ".scales");
    const Tensor& zeros = c.get(prefix + ".zeros");
    if (codes.dims.size() != 2) throw ConfigError("quantized codes must be rank 2");
    QuantParams p;
    p.bits = std::stoi(c.meta("bits").value_or("4"));
    p.range_mode = parse_range_mode(c.meta("range_mode").value_or("paper"));
    p.q_max = q_max_for(p.bits, p.range_mode);
    p.rows = codes.dims[0];
    p.cols = codes.dims[1];
    if (scales.dims.size() != 2 || scales.dims[1] == 0) {
        throw ConfigError("quantization scales must be rank 2");
    }
    p.group_size = p.cols / scales.dims[1];
    p.scales = scales.to_f64_values();
    p.zeros = zeros.to_i32();
    p.validate();
    QuantizedTensor q{codes.to_u8(), std::move(p)};
    for (auto code : q.codes) {
        if (code > q.params.q_max) {
            throw DataError(fmt::format("code {} in '{}' exceeds q_max {}", code, prefix,
                                        q.params.q_max));
        }
    }
    return q;
}

}  // namespace sqft
