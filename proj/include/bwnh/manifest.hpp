#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace bwnh {

enum class LayerKind { Conv, FullyConnected, BatchNorm, ReLU, MaxPool, Softmax };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& s);

inline bool has_weights(LayerKind kind) {
  return kind == LayerKind::Conv || kind == LayerKind::FullyConnected;
}

struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  std::string name;

  // Conv and MaxPool geometry.
  std::uint32_t in_channels = 0;
  std::uint32_t out_channels = 0;
  std::uint32_t kernel_h = 0;
  std::uint32_t kernel_w = 0;
  std::uint32_t stride = 1;
  std::uint32_t pad = 0;

  // FullyConnected.
  std::uint32_t in_features = 0;
  std::uint32_t out_features = 0;

  // BatchNorm: params_ref holds a (4, channels) tensor of gamma, beta, running
  // mean and running variance.
  std::uint32_t channels = 0;
  double eps = 1e-5;

  std::optional<std::string> weight_ref;
  std::optional<std::string> binary_ref;
  std::optional<std::string> scale_ref;
  std::optional<std::string> params_ref;
  bool binarized = false;

  bool operator==(const LayerSpec&) const = default;
};

// Activation shape (channels, height, width); fully-connected outputs are
// (features, 1, 1).
struct Shape {
  std::uint32_t channels = 0;
  std::uint32_t height = 1;
  std::uint32_t width = 1;

  std::size_t size() const { return std::size_t{channels} * height * width; }
  bool operator==(const Shape&) const = default;
};

struct ModelManifest {
  std::string name;
  std::vector<std::uint32_t> input_shape;  // (C, H, W)
  std::string tensor_dir;
  std::vector<LayerSpec> layers;

  bool operator==(const ModelManifest&) const = default;
};

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Shape input_shape_of(const ModelManifest& m);

// Output shape of every layer; throws ManifestError when adjacent layers are
// incompatible.
std::vector<Shape> infer_shapes(const ModelManifest& m);

// Field-level invariants plus shape compatibility.
void validate_manifest(const ModelManifest& m);

std::string manifest_to_json(const ModelManifest& m);
ModelManifest manifest_from_json(const std::string& text);

ModelManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const ModelManifest& m, const std::filesystem::path& path);

// Builds a manifest from a VGG-style architecture string such as
// "(2x8C3)-MP2-(2x16C3)-MP2-(2x32C3)-10FC-Softmax". Every Conv and FC is
// followed by BatchNorm; every Conv-BatchNorm pair by ReLU. Convolutions use
// stride 1 and same padding. Tensor refs are named after the layers.
ModelManifest parse_architecture(const std::string& arch, const std::string& name,
                                 std::vector<std::uint32_t> input_shape);

}  // namespace bwnh
