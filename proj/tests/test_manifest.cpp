#include <fstream>

#include <doctest.h>

#include "bwnh/manifest.hpp"
#include "bwnh/model.hpp"
#include "bwnh/net.hpp"
#include "helpers.hpp"

using namespace bwnh;

namespace {

const char* kVggMini = "(2x8C3)-MP2-(2x16C3)-MP2-(2x32C3)-10FC-Softmax";

// Manifest text as an external exporter would emit it for a 1-conv model.
const char* kExported = R"({
  "name": "toy",
  "input_shape": [1, 4, 4],
  "tensor_dir": "toy_tensors",
  "layers": [
    {"kind": "Conv", "name": "conv1", "in_channels": 1, "out_channels": 2,
     "kernel_h": 3, "kernel_w": 3, "stride": 1, "pad": 1,
     "weight_ref": "conv1.weight.tensor"},
    {"kind": "ReLU", "name": "relu1"},
    {"kind": "MaxPool", "name": "pool1", "kernel_h": 2, "kernel_w": 2, "stride": 2},
    {"kind": "FullyConnected", "name": "fc1", "in_features": 8, "out_features": 3,
     "weight_ref": "fc1.weight.tensor"},
    {"kind": "Softmax", "name": "prob"}
  ]
})";

}  // namespace

TEST_CASE("empty layer list is a valid manifest and forwards as identity") {
  ModelManifest m;
  m.name = "empty";
  m.input_shape = {1, 2, 2};
  m.tensor_dir = "t";
  CHECK_NOTHROW(validate_manifest(m));
  Model model{m, {}};
  const Tensor x({1, 1, 2, 2}, std::vector<float>{1, -2, 3, 0.5f});
  const auto r = forward(model, x, ExecutionMode::Float);
  CHECK(r.outputs.empty());
  // Logits come back flattened per sample.
  CHECK(r.logits.dims == std::vector<std::size_t>{1, 4});
  const auto v = x.f32();
  CHECK(r.logits.values == std::vector<double>(v.begin(), v.end()));
}

TEST_CASE("Conv without weight_ref is rejected") {
  auto m = manifest_from_json(kExported);
  m.layers[0].weight_ref.reset();
  CHECK_THROWS_AS(validate_manifest(m), ManifestError);
  CHECK_THROWS_AS(manifest_from_json(manifest_to_json(m)), ManifestError);
}

TEST_CASE("binarized flag requires both code and scale refs") {
  auto m = manifest_from_json(kExported);
  m.layers[0].binarized = true;
  m.layers[0].binary_ref = "conv1.codes.tensor";
  CHECK_THROWS_AS(validate_manifest(m), ManifestError);
  m.layers[0].scale_ref = "conv1.scale.tensor";
  CHECK_NOTHROW(validate_manifest(m));
  m.layers[0].binarized = false;
  CHECK_THROWS_AS(validate_manifest(m), ManifestError);
}

TEST_CASE("non-weight layers must not carry weight_ref") {
  auto m = manifest_from_json(kExported);
  m.layers[1].weight_ref = "oops.tensor";
  CHECK_THROWS_AS(validate_manifest(m), ManifestError);
}

TEST_CASE("shape incompatibility is reported") {
  auto m = manifest_from_json(kExported);
  m.layers[3].in_features = 9;
  CHECK_THROWS_AS(validate_manifest(m), ManifestError);
}

TEST_CASE("exporter-style manifest text parses into the schema") {
  const auto m = manifest_from_json(kExported);
  CHECK(m.name == "toy");
  CHECK(m.input_shape == std::vector<std::uint32_t>{1, 4, 4});
  REQUIRE(m.layers.size() == 5);
  CHECK(m.layers[0].kind == LayerKind::Conv);
  CHECK(m.layers[0].weight_ref == "conv1.weight.tensor");
  CHECK(m.layers[3].kind == LayerKind::FullyConnected);
  const auto shapes = infer_shapes(m);
  CHECK(shapes[2].size() == 8);
  CHECK(shapes[3].size() == 3);
}

TEST_CASE("manifest JSON round trip is stable") {
  const auto m = parse_architecture(kVggMini, "vgg", {1, 16, 16});
  const auto text = manifest_to_json(m);
  const auto back = manifest_from_json(text);
  CHECK(back.layers == m.layers);
  CHECK(manifest_to_json(back) == text);

  testing::TempDir dir;
  write_manifest(m, dir / "m.json");
  CHECK(read_manifest(dir / "m.json").layers == m.layers);
}

TEST_CASE("VGG-style architecture string expands into ten or more layers") {
  const auto m = parse_architecture(kVggMini, "vgg", {1, 16, 16});
  CHECK(m.layers.size() >= 10);
  std::size_t convs = 0;
  for (const auto& l : m.layers) convs += l.kind == LayerKind::Conv;
  CHECK(convs == 6);
  const auto shapes = infer_shapes(m);
  CHECK(shapes.back().size() == 10);
  CHECK(m.layers.back().kind == LayerKind::Softmax);

  const auto unicode = parse_architecture("(2\xC3\x97" "8C3)-MP2-10FC-Softmax", "u", {1, 8, 8});
  CHECK(unicode.layers.size() == parse_architecture("(2x8C3)-MP2-10FC-Softmax", "u", {1, 8, 8}).layers.size());
  CHECK_THROWS(parse_architecture("(2x8Q3)", "bad", {1, 8, 8}));
}

TEST_CASE("model save and load round-trips tensors; dangling refs fail") {
  testing::TempDir dir;
  const auto m = parse_architecture("(1x4C3)-MP2-10FC-Softmax", "small", {1, 8, 8});
  const Model model = initialize_model(m, 3);
  save_model(model, dir / "small.manifest");
  const Model back = load_model(dir / "small.manifest");
  for (const auto& [ref, t] : model.tensors) CHECK(back.tensor(ref).bit_equal(t));

  std::filesystem::remove(dir.path() / model.manifest.tensor_dir / "conv1.weight.tensor");
  CHECK_THROWS(load_model(dir / "small.manifest"));
}

TEST_CASE("weight matrices use one column per output channel") {
  // Conv weight (out=2, in=1, 1, 2): filter 0 = (1, 2), filter 1 = (3, 4).
  const Tensor w({2, 1, 1, 2}, std::vector<float>{1, 2, 3, 4});
  const Eigen::MatrixXd m = weight_matrix(w);
  REQUIRE(m.rows() == 2);
  REQUIRE(m.cols() == 2);
  CHECK(m(0, 0) == 1);
  CHECK(m(1, 0) == 2);
  CHECK(m(0, 1) == 3);
  CHECK(m(1, 1) == 4);
  CHECK(weight_tensor(m, {2, 1, 1, 2}).bit_equal(w));
}
