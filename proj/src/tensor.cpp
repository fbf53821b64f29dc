#include "bwnh/tensor.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>

namespace bwnh {

namespace {

std::size_t product(const std::vector<std::uint32_t>& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                         std::multiplies<std::size_t>());
}

void check_dims(const std::vector<std::uint32_t>& dims) {
  if (dims.empty() || dims.size() > 255) {
    throw TensorFormatError(TensorErrorKind::InvalidDims,
                            "tensor rank must be in [1, 255]");
  }
  for (auto d : dims) {
    if (d == 0) {
      throw TensorFormatError(TensorErrorKind::InvalidDims,
                              "tensor dims must be positive");
    }
  }
}

void check_codes(std::span<const std::int8_t> codes) {
  for (auto c : codes) {
    if (c != 1 && c != -1) {
      throw TensorFormatError(TensorErrorKind::InvalidBinaryCode,
                              "invalid binary code " + std::to_string(c));
    }
  }
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

Tensor::Tensor(std::vector<std::uint32_t> dims, std::vector<float> values)
    : dtype_(DType::F32), dims_(std::move(dims)), f32_(std::move(values)) {
  check_dims(dims_);
  if (f32_.size() != product(dims_)) {
    throw TensorFormatError(TensorErrorKind::LengthMismatch,
                            "payload length does not match dims");
  }
}

Tensor::Tensor(std::vector<std::uint32_t> dims, std::vector<std::int8_t> codes)
    : dtype_(DType::I8), dims_(std::move(dims)), i8_(std::move(codes)) {
  check_dims(dims_);
  if (i8_.size() != product(dims_)) {
    throw TensorFormatError(TensorErrorKind::LengthMismatch,
                            "payload length does not match dims");
  }
  check_codes(i8_);
}

Tensor Tensor::zeros(std::vector<std::uint32_t> dims) {
  const auto n = product(dims);
  return Tensor(std::move(dims), std::vector<float>(n, 0.0f));
}

std::size_t Tensor::size() const { return dims_.empty() ? 0 : product(dims_); }

std::span<const float> Tensor::f32() const {
  if (dtype_ != DType::F32) throw std::logic_error("tensor is not F32");
  return f32_;
}

std::span<float> Tensor::f32() {
  if (dtype_ != DType::F32) throw std::logic_error("tensor is not F32");
  return f32_;
}

std::span<const std::int8_t> Tensor::i8() const {
  if (dtype_ != DType::I8) throw std::logic_error("tensor is not I8");
  return i8_;
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (dtype_ != other.dtype_ || dims_ != other.dims_) return false;
  if (dtype_ == DType::I8) return i8_ == other.i8_;
  return f32_.size() == other.f32_.size() &&
         (f32_.empty() ||
          std::memcmp(f32_.data(), other.f32_.data(), f32_.size() * sizeof(float)) == 0);
}

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  check_dims(t.dims());
  std::vector<std::uint8_t> out(std::begin(kTensorMagic), std::end(kTensorMagic));
  out.push_back(kTensorVersion);
  out.push_back(static_cast<std::uint8_t>(t.dtype()));
  out.push_back(static_cast<std::uint8_t>(t.dims().size()));
  out.push_back(0);
  for (auto d : t.dims()) put_u32(out, d);
  if (t.dtype() == DType::F32) {
    out.reserve(out.size() + 4 * t.size());
    for (float v : t.f32()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  } else {
    for (auto c : t.i8()) out.push_back(static_cast<std::uint8_t>(c));
  }
  return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t kHeader = 8;
  if (bytes.size() < kHeader) {
    throw TensorFormatError(TensorErrorKind::Truncated, "tensor header truncated");
  }
  if (std::memcmp(bytes.data(), kTensorMagic, 4) != 0) {
    throw TensorFormatError(TensorErrorKind::BadMagic, "bad magic bytes");
  }
  if (bytes[4] != kTensorVersion) {
    throw TensorFormatError(TensorErrorKind::VersionMismatch,
                            "unsupported tensor version " + std::to_string(bytes[4]));
  }
  const std::uint8_t dtype = bytes[5];
  if (dtype > 1) {
    throw TensorFormatError(TensorErrorKind::UnknownDtype,
                            "unknown dtype " + std::to_string(dtype));
  }
  const std::size_t ndim = bytes[6];
  if (bytes.size() < kHeader + 4 * ndim) {
    throw TensorFormatError(TensorErrorKind::Truncated, "tensor dims truncated");
  }
  std::vector<std::uint32_t> dims(ndim);
  for (std::size_t i = 0; i < ndim; ++i) dims[i] = get_u32(bytes.data() + kHeader + 4 * i);
  check_dims(dims);

  const std::size_t count = product(dims);
  const std::size_t elem = dtype == 0 ? 4 : 1;
  const auto payload = bytes.subspan(kHeader + 4 * ndim);
  if (payload.size() != count * elem) {
    throw TensorFormatError(TensorErrorKind::LengthMismatch,
                            "payload has " + std::to_string(payload.size()) +
                                " bytes, dims require " + std::to_string(count * elem));
  }
  if (dtype == 0) {
    std::vector<float> values(count);
    for (std::size_t i = 0; i < count; ++i) {
      values[i] = std::bit_cast<float>(get_u32(payload.data() + 4 * i));
    }
    return Tensor(std::move(dims), std::move(values));
  }
  std::vector<std::int8_t> codes(count);
  for (std::size_t i = 0; i < count; ++i) codes[i] = static_cast<std::int8_t>(payload[i]);
  return Tensor(std::move(dims), std::move(codes));
}

void write_tensor(const Tensor& t, const std::filesystem::path& path) {
  const auto bytes = encode_tensor(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw TensorFormatError(TensorErrorKind::Io, "cannot open " + path.string() + " for writing");
  }
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw TensorFormatError(TensorErrorKind::Io, "write failed: " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TensorFormatError(TensorErrorKind::Io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_tensor(bytes);
}

}  // namespace bwnh
