#include "bwnh/model.hpp"

#include <cmath>

namespace bwnh {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> referenced(const LayerSpec& l) {
  std::vector<std::string> refs;
  for (const auto* r : {&l.weight_ref, &l.binary_ref, &l.scale_ref, &l.params_ref}) {
    if (*r) refs.push_back(**r);
  }
  return refs;
}

fs::path resolve_dir(const fs::path& manifest_path, const std::string& tensor_dir) {
  const fs::path dir(tensor_dir);
  if (dir.is_absolute()) return dir;
  return manifest_path.parent_path() / dir;
}

}  // namespace

const Tensor& Model::tensor(const std::string& ref) const {
  auto it = tensors.find(ref);
  if (it == tensors.end()) throw ManifestError("dangling tensor reference '" + ref + "'");
  return it->second;
}

Model load_model(const fs::path& manifest_path) {
  Model model;
  model.manifest = read_manifest(manifest_path);
  const auto dir = resolve_dir(manifest_path, model.manifest.tensor_dir);
  for (const auto& l : model.manifest.layers) {
    for (const auto& ref : referenced(l)) {
      if (model.tensors.count(ref)) continue;
      const auto p = dir / ref;
      if (!fs::exists(p)) {
        throw ManifestError("dangling tensor reference '" + ref + "' (" + p.string() + ")");
      }
      model.tensors.emplace(ref, read_tensor(p));
    }
  }
  return model;
}

void save_model(const Model& model, const fs::path& manifest_path) {
  validate_manifest(model.manifest);
  const auto dir = resolve_dir(manifest_path, model.manifest.tensor_dir);
  fs::create_directories(dir);
  for (const auto& l : model.manifest.layers) {
    for (const auto& ref : referenced(l)) write_tensor(model.tensor(ref), dir / ref);
  }
  write_manifest(model.manifest, manifest_path);
}

Eigen::MatrixXd weight_matrix(const Tensor& weight) {
  const auto& d = weight.dims();
  const std::size_t n = d.at(0);
  const std::size_t s = weight.size() / n;
  const auto v = weight.f32();
  Eigen::MatrixXd w(s, n);
  for (std::size_t o = 0; o < n; ++o) {
    for (std::size_t r = 0; r < s; ++r) w(r, o) = v[o * s + r];
  }
  return w;
}

Eigen::MatrixXd weight_matrix(const Model& model, std::size_t layer) {
  const auto& l = model.manifest.layers.at(layer);
  if (!has_weights(l.kind) || !l.weight_ref) {
    throw ManifestError("layer " + l.name + " has no weights");
  }
  return weight_matrix(model.tensor(*l.weight_ref));
}

Eigen::MatrixXd code_matrix(const Model& model, std::size_t layer) {
  const auto& l = model.manifest.layers.at(layer);
  if (!l.binarized) throw ManifestError("layer " + l.name + " is not binarized");
  const auto& t = model.tensor(*l.binary_ref);
  const std::size_t n = t.dims().at(0);
  const std::size_t s = t.size() / n;
  const auto c = t.i8();
  Eigen::MatrixXd b(s, n);
  for (std::size_t o = 0; o < n; ++o) {
    for (std::size_t r = 0; r < s; ++r) b(r, o) = c[o * s + r];
  }
  return b;
}

Eigen::VectorXd scale_vector(const Model& model, std::size_t layer) {
  const auto& l = model.manifest.layers.at(layer);
  if (!l.binarized) throw ManifestError("layer " + l.name + " is not binarized");
  const auto v = model.tensor(*l.scale_ref).f32();
  Eigen::VectorXd a(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) a(i) = v[i];
  return a;
}

Tensor weight_tensor(const Eigen::MatrixXd& w, const std::vector<std::uint32_t>& dims) {
  const auto s = static_cast<std::size_t>(w.rows());
  const auto n = static_cast<std::size_t>(w.cols());
  std::vector<float> v(s * n);
  for (std::size_t o = 0; o < n; ++o) {
    for (std::size_t r = 0; r < s; ++r) v[o * s + r] = static_cast<float>(w(r, o));
  }
  return Tensor(dims, std::move(v));
}

Tensor code_tensor(const Eigen::MatrixXd& b, const std::vector<std::uint32_t>& dims) {
  const auto s = static_cast<std::size_t>(b.rows());
  const auto n = static_cast<std::size_t>(b.cols());
  std::vector<std::int8_t> c(s * n);
  for (std::size_t o = 0; o < n; ++o) {
    for (std::size_t r = 0; r < s; ++r) c[o * s + r] = b(r, o) < 0 ? -1 : 1;
  }
  return Tensor(dims, std::move(c));
}

void attach_binary(Model& model, std::size_t layer, const Eigen::MatrixXd& codes,
                   const Eigen::VectorXd& alpha) {
  auto& l = model.manifest.layers.at(layer);
  const auto& dims = model.tensor(*l.weight_ref).dims();
  if (static_cast<std::size_t>(codes.cols()) != dims[0] ||
      static_cast<std::size_t>(alpha.size()) != dims[0]) {
    throw ManifestError("codes/scale do not match layer " + l.name);
  }
  const std::string codes_ref = l.name + ".codes.tensor";
  const std::string scale_ref = l.name + ".scale.tensor";
  model.tensors.insert_or_assign(codes_ref, code_tensor(codes, dims));
  std::vector<float> a(alpha.size());
  for (Eigen::Index i = 0; i < alpha.size(); ++i) a[i] = static_cast<float>(alpha(i));
  const std::vector<std::uint32_t> scale_dims{static_cast<std::uint32_t>(a.size())};
  model.tensors.insert_or_assign(scale_ref, Tensor(scale_dims, std::move(a)));
  l.binary_ref = codes_ref;
  l.scale_ref = scale_ref;
  l.binarized = true;
}

Model densify(const Model& model) {
  Model out = model;
  for (std::size_t i = 0; i < out.manifest.layers.size(); ++i) {
    auto& l = out.manifest.layers[i];
    if (!l.binarized) continue;
    const auto b = code_matrix(model, i);
    const auto a = scale_vector(model, i);
    const auto& dims = model.tensor(*l.weight_ref).dims();
    const std::string ref = l.name + ".dense.tensor";
    out.tensors.insert_or_assign(ref, weight_tensor(b * a.asDiagonal(), dims));
    l.weight_ref = ref;
    l.binary_ref.reset();
    l.scale_ref.reset();
    l.binarized = false;
  }
  return out;
}

Model merge_scale_into_batchnorm(const Model& model) {
  Model out = model;
  auto& layers = out.manifest.layers;
  for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
    if (!layers[i].binarized || layers[i + 1].kind != LayerKind::BatchNorm) continue;
    const auto alpha = scale_vector(model, i);
    for (Eigen::Index c = 0; c < alpha.size(); ++c) {
      if (alpha(c) == 0.0 || !std::isfinite(alpha(c))) {
        throw ManifestError("cannot merge zero or non-finite scale of " + layers[i].name);
      }
    }
    auto& bn = layers[i + 1];
    Tensor params = model.tensor(*bn.params_ref);
    auto p = params.f32();
    const std::size_t ch = bn.channels;
    for (std::size_t c = 0; c < ch; ++c) {
      p[c] = static_cast<float>(p[c] * alpha(c));                   // gamma
      p[2 * ch + c] = static_cast<float>(p[2 * ch + c] / alpha(c));  // running mean
    }
    const std::string bn_ref = bn.name + ".merged.params.tensor";
    out.tensors.insert_or_assign(bn_ref, std::move(params));
    bn.params_ref = bn_ref;

    const std::string scale_ref = layers[i].name + ".unit_scale.tensor";
    out.tensors.insert_or_assign(
        scale_ref, Tensor({static_cast<std::uint32_t>(alpha.size())},
                          std::vector<float>(alpha.size(), 1.0f)));
    layers[i].scale_ref = scale_ref;
  }
  return out;
}

}  // namespace bwnh
