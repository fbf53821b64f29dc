#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bwnh {

enum class DType : std::uint8_t { F32 = 0, I8 = 1 };

// Dense row-major tensor. I8 tensors hold binary codes and may only contain
// -1 and +1; the constructors enforce it.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::vector<std::uint32_t> dims, std::vector<float> values);
  Tensor(std::vector<std::uint32_t> dims, std::vector<std::int8_t> codes);

  static Tensor zeros(std::vector<std::uint32_t> dims);

  DType dtype() const { return dtype_; }
  const std::vector<std::uint32_t>& dims() const { return dims_; }
  std::size_t size() const;

  std::span<const float> f32() const;
  std::span<float> f32();
  std::span<const std::int8_t> i8() const;

  // Bitwise equality: dtype, dims and payload bytes.
  bool bit_equal(const Tensor& other) const;

 private:
  DType dtype_ = DType::F32;
  std::vector<std::uint32_t> dims_;
  std::vector<float> f32_;
  std::vector<std::int8_t> i8_;
};

enum class TensorErrorKind {
  Io,
  Truncated,
  BadMagic,
  VersionMismatch,
  UnknownDtype,
  InvalidDims,
  LengthMismatch,
  InvalidBinaryCode,
};

class TensorFormatError : public std::runtime_error {
 public:
  TensorFormatError(TensorErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  TensorErrorKind kind() const { return kind_; }

 private:
  TensorErrorKind kind_;
};

inline constexpr std::uint8_t kTensorMagic[4] = {0x42, 0x57, 0x4E, 0x48};  // "BWNH"
inline constexpr std::uint8_t kTensorVersion = 1;

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(std::span<const std::uint8_t> bytes);

void write_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor read_tensor(const std::filesystem::path& path);

}  // namespace bwnh
