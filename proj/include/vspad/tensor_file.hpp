#pragma once

// Container format shared by activation traces, SAE checkpoints, toy-VLM
// checkpoints and stats exports.
//
// Layout (all integers little-endian):
//   magic    "VSPAD\0\0\1"                       8 bytes
//   version  u32
//   count    u32
//   entries  count x { u16 name_len, name bytes, u8 dtype (0 = f32le),
//                      u8 rank, rank x u64 dims, u64 payload offset }
//   payload  entry data packed back to back, offsets relative to payload start
//   manifest u64 length, UTF-8 JSON

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "vspad/matrix.hpp"

namespace vspad::io {

inline constexpr std::array<char, 8> kMagic = {'V', 'S', 'P', 'A', 'D', '\0', '\0', '\1'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 0;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Tensor {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<float> data;

  std::uint64_t numel() const;
  std::size_t rank() const { return shape.size(); }
};

std::uint64_t shape_numel(std::span<const std::uint64_t> shape);

struct TensorFile {
  std::vector<Tensor> entries;
  nlohmann::json manifest = nlohmann::json::object();

  const Tensor* find(std::string_view name) const;
  const Tensor& at(std::string_view name) const;
  Tensor& add(std::string name, std::vector<std::uint64_t> shape, std::vector<float> data);
  Tensor& add(std::string name, const Matrix& m);
  Tensor& add(std::string name, const Vector& v);

  /// Manifest "kind" discriminator, empty when absent.
  std::string kind() const;
};

/// Encodes to the on-disk byte layout. Throws FormatError on duplicate
/// names or data/shape mismatch.
std::string serialize(const TensorFile& file);

/// Strict decoder over an in-memory byte image.
TensorFile parse(std::string_view bytes);

void save_tensor_file(const TensorFile& file, const std::filesystem::path& path);
TensorFile load_tensor_file(const std::filesystem::path& path);

Matrix to_matrix(const Tensor& t);
Vector to_vector(const Tensor& t);

}  // namespace vspad::io
