#pragma once

// Shared little-endian checkpoint format used for every model and activation
// dump:
//
//   "XMPT"                     4-byte magic
//   u32 version                currently 1
//   u32 n, n bytes             config, UTF-8 JSON
//   u32 count                  number of tensors
//   count x {
//     u32 n, n bytes           tensor name
//     u32 rank                 1 or 2
//     rank x u64               dims
//     prod(dims) x f32         values, row-major
//   }
//   32 bytes                   SHA-256 of every preceding byte

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "xmp/dense.hpp"
#include "xmp/error.hpp"

namespace xmp {

inline constexpr std::uint32_t kTensorFormatVersion = 1;

struct TensorFile {
    nlohmann::json config = nlohmann::json::object();
    std::vector<std::pair<std::string, MatF>> tensors;

    const MatF& at(const std::string& name) const;
    bool contains(const std::string& name) const;
};

std::vector<std::uint8_t> serialize(const TensorFile& file);
TensorFile deserialize(const std::vector<std::uint8_t>& bytes);

void save_tensor_file(const std::filesystem::path& path, const TensorFile& file);
TensorFile load_tensor_file(const std::filesystem::path& path);

std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_hex(const std::vector<std::uint8_t>& bytes);
std::string sha256_file(const std::filesystem::path& path);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

/// Content hash of a parameter set: SHA-256 over names, shapes and the float32
/// values. Stable across save/load.
template <typename Scalar>
std::string content_hash(const TensorList<Scalar>& tensors)
{
    TensorFile f;
    f.config = nullptr;
    for (auto& [name, t] : tensors)
        f.tensors.emplace_back(name, t->template cast<float>());
    return sha256_hex(serialize(f));
}

template <typename Scalar>
TensorFile to_tensor_file(const TensorList<Scalar>& tensors, nlohmann::json config)
{
    TensorFile f;
    f.config = std::move(config);
    for (auto& [name, t] : tensors)
        f.tensors.emplace_back(name, t->template cast<float>());
    return f;
}

/// Fills `tensors` from a file; names and shapes must match exactly.
template <typename Scalar>
void from_tensor_file(const TensorFile& f, const TensorList<Scalar>& tensors)
{
    if (f.tensors.size() != tensors.size())
        throw FormatError("tensor count mismatch: file has " + std::to_string(f.tensors.size()) +
                          ", model expects " + std::to_string(tensors.size()));
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const auto& [name, value] = f.tensors[i];
        auto& [want, dst] = tensors[i];
        if (name != want)
            throw FormatError("tensor name mismatch: '" + name + "' vs '" + want + "'");
        if (value.rows() != dst->rows() || value.cols() != dst->cols())
            throw FormatError("tensor shape mismatch for '" + name + "'");
        *dst = value.template cast<Scalar>();
    }
}

}  // namespace xmp
