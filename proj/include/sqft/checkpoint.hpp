// Copyright (c) 2026, The sqft-forge Authors
// SPDX-License-Identifier: Apache-2.0
//
// SQCK container, little-endian throughout:
//
//   "SQCK"  u32 version (=1)  u32 tensor_count
//   per tensor:
//     u16 name_len, name (UTF-8)
//     u8 dtype (0=f32 1=f64 2=u8 3=i32 4=u8 mask)
//     u8 rank, rank x u64 dims
//     row-major payload
//   u16 metadata_len, metadata (UTF-8 "key=value\n" lines)
//
// An empty container is 14 bytes.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sqft/quant.hpp"
#include "sqft/sparsity.hpp"
#include "sqft/tensor.hpp"

namespace sqft {

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2, i32 = 3, mask = 4 };

std::size_t dtype_size(DType t) noexcept;
std::string_view to_string(DType t) noexcept;

/// A named tensor holding its little-endian payload bytes verbatim.
struct Tensor {
    std::string name;
    DType dtype = DType::f32;
    std::vector<std::uint64_t> dims;
    std::vector<std::uint8_t> payload;

    std::uint64_t element_count() const noexcept;

    static Tensor from_matrix(std::string name, const Matrix& m, DType dtype = DType::f32);
    static Tensor from_u8(std::string name, std::vector<std::uint64_t> dims,
                          const std::vector<std::uint8_t>& values);
    static Tensor from_i32(std::string name, std::vector<std::uint64_t> dims,
                           const std::vector<std::int32_t>& values);
    static Tensor from_f32(std::string name, std::vector<std::uint64_t> dims,
                           const std::vector<double>& values);
    static Tensor from_mask(std::string name, const SparsityMask& mask);

    /// f32/f64 rank-2 tensors only.
    Matrix to_matrix() const;
    std::vector<double> to_f64_values() const;
    std::vector<std::uint8_t> to_u8() const;
    std::vector<std::int32_t> to_i32() const;
    SparsityMask to_mask() const;

    bool operator==(const Tensor&) const = default;
};

using Metadata = std::vector<std::pair<std::string, std::string>>;

struct CheckpointContainer {
    static constexpr std::uint32_t kVersion = 1;

    std::vector<Tensor> tensors;
    Metadata metadata;

    const Tensor* find(std::string_view name) const noexcept;
    const Tensor& get(std::string_view name) const;
    std::optional<std::string> meta(std::string_view key) const;
    void set_meta(std::string key, std::string value);

    bool operator==(const CheckpointContainer&) const = default;
};

std::vector<std::uint8_t> serialize(const CheckpointContainer& c);
/// Throws FormatError with the byte offset (and tensor name when inside one).
CheckpointContainer deserialize(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const CheckpointContainer& c);
CheckpointContainer load_checkpoint(const std::filesystem::path& path);

/// Quantized tensors are stored as `<prefix>.codes` (u8), `<prefix>.scales`
/// (f32) and `<prefix>.zeros` (i32). Bits and range mode go in the
/// metadata; the group size follows from the shape of the scales.
void put_quantized(CheckpointContainer& c, const std::string& prefix, const QuantizedTensor& q);
QuantizedTensor get_quantized(const CheckpointContainer& c, const std::string& prefix);

}  // namespace sqft
