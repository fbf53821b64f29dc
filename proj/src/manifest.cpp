#include "bwnh/manifest.hpp"

#include <fstream>
#include <regex>
#include <sstream>

#include <json.hpp>

namespace bwnh {

using nlohmann::json;

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "Conv";
    case LayerKind::FullyConnected: return "FullyConnected";
    case LayerKind::BatchNorm: return "BatchNorm";
    case LayerKind::ReLU: return "ReLU";
    case LayerKind::MaxPool: return "MaxPool";
    case LayerKind::Softmax: return "Softmax";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& s) {
  for (auto k : {LayerKind::Conv, LayerKind::FullyConnected, LayerKind::BatchNorm,
                 LayerKind::ReLU, LayerKind::MaxPool, LayerKind::Softmax}) {
    if (to_string(k) == s) return k;
  }
  throw ManifestError("unknown layer kind '" + s + "'");
}

Shape input_shape_of(const ModelManifest& m) {
  if (m.input_shape.size() != 3) {
    throw ManifestError("input_shape must have 3 entries (C, H, W)");
  }
  for (auto d : m.input_shape) {
    if (d == 0) throw ManifestError("input_shape entries must be positive");
  }
  return {m.input_shape[0], m.input_shape[1], m.input_shape[2]};
}

std::vector<Shape> infer_shapes(const ModelManifest& m) {
  std::vector<Shape> shapes;
  Shape cur = input_shape_of(m);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + l.name + "): ";
    switch (l.kind) {
      case LayerKind::Conv: {
        if (l.in_channels != cur.channels) {
          throw ManifestError(where + "in_channels " + std::to_string(l.in_channels) +
                              " does not match incoming " + std::to_string(cur.channels));
        }
        if (l.out_channels == 0 || l.kernel_h == 0 || l.kernel_w == 0 || l.stride == 0) {
          throw ManifestError(where + "conv geometry must be positive");
        }
        const auto ph = cur.height + 2 * l.pad;
        const auto pw = cur.width + 2 * l.pad;
        if (ph < l.kernel_h || pw < l.kernel_w) {
          throw ManifestError(where + "kernel larger than padded input");
        }
        cur = {l.out_channels, (ph - l.kernel_h) / l.stride + 1,
               (pw - l.kernel_w) / l.stride + 1};
        break;
      }
      case LayerKind::FullyConnected:
        if (l.in_features != cur.size()) {
          throw ManifestError(where + "in_features " + std::to_string(l.in_features) +
                              " does not match incoming size " + std::to_string(cur.size()));
        }
        if (l.out_features == 0) throw ManifestError(where + "out_features must be positive");
        cur = {l.out_features, 1, 1};
        break;
      case LayerKind::BatchNorm:
        if (l.channels != cur.channels) {
          throw ManifestError(where + "channels " + std::to_string(l.channels) +
                              " does not match incoming " + std::to_string(cur.channels));
        }
        break;
      case LayerKind::MaxPool: {
        if (l.kernel_h == 0 || l.kernel_w == 0 || l.stride == 0) {
          throw ManifestError(where + "pool geometry must be positive");
        }
        if (cur.height < l.kernel_h || cur.width < l.kernel_w) {
          throw ManifestError(where + "pool window larger than input");
        }
        cur = {cur.channels, (cur.height - l.kernel_h) / l.stride + 1,
               (cur.width - l.kernel_w) / l.stride + 1};
        break;
      }
      case LayerKind::ReLU:
      case LayerKind::Softmax:
        break;
    }
    shapes.push_back(cur);
  }
  return shapes;
}

void validate_manifest(const ModelManifest& m) {
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const auto& l = m.layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + l.name + "): ";
    if (has_weights(l.kind)) {
      if (!l.weight_ref) throw ManifestError(where + "missing weight_ref");
    } else {
      if (l.weight_ref || l.binary_ref || l.scale_ref || l.binarized) {
        throw ManifestError(where + to_string(l.kind) + " layers carry no weights");
      }
    }
    const bool both = l.binary_ref.has_value() && l.scale_ref.has_value();
    if (l.binarized != both) {
      throw ManifestError(where + "binarized requires exactly binary_ref and scale_ref");
    }
    if (!l.binarized && (l.binary_ref || l.scale_ref)) {
      throw ManifestError(where + "binary_ref/scale_ref present on a real-valued layer");
    }
    if (l.kind == LayerKind::BatchNorm && !l.params_ref) {
      throw ManifestError(where + "missing params_ref");
    }
  }
  infer_shapes(m);
}

namespace {

json layer_to_json(const LayerSpec& l) {
  json j;
  j["kind"] = to_string(l.kind);
  j["name"] = l.name;
  switch (l.kind) {
    case LayerKind::Conv:
      j["in_channels"] = l.in_channels;
      j["out_channels"] = l.out_channels;
      j["kernel_h"] = l.kernel_h;
      j["kernel_w"] = l.kernel_w;
      j["stride"] = l.stride;
      j["pad"] = l.pad;
      break;
    case LayerKind::FullyConnected:
      j["in_features"] = l.in_features;
      j["out_features"] = l.out_features;
      break;
    case LayerKind::BatchNorm:
      j["channels"] = l.channels;
      j["eps"] = l.eps;
      break;
    case LayerKind::MaxPool:
      j["kernel_h"] = l.kernel_h;
      j["kernel_w"] = l.kernel_w;
      j["stride"] = l.stride;
      break;
    case LayerKind::ReLU:
    case LayerKind::Softmax:
      break;
  }
  if (l.weight_ref) j["weight_ref"] = *l.weight_ref;
  if (l.binary_ref) j["binary_ref"] = *l.binary_ref;
  if (l.scale_ref) j["scale_ref"] = *l.scale_ref;
  if (l.params_ref) j["params_ref"] = *l.params_ref;
  if (has_weights(l.kind)) j["binarized"] = l.binarized;
  return j;
}

template <typename T>
T required(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw ManifestError(where + "missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ManifestError(where + "bad field '" + key + "': " + e.what());
  }
}

std::optional<std::string> optional_ref(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<std::string>();
}

LayerSpec layer_from_json(const json& j, std::size_t index) {
  const std::string where = "layer " + std::to_string(index) + ": ";
  LayerSpec l;
  l.kind = layer_kind_from_string(required<std::string>(j, "kind", where));
  l.name = j.value("name", to_string(l.kind) + std::to_string(index));
  switch (l.kind) {
    case LayerKind::Conv:
      l.in_channels = required<std::uint32_t>(j, "in_channels", where);
      l.out_channels = required<std::uint32_t>(j, "out_channels", where);
      l.kernel_h = required<std::uint32_t>(j, "kernel_h", where);
      l.kernel_w = required<std::uint32_t>(j, "kernel_w", where);
      l.stride = j.value("stride", 1u);
      l.pad = j.value("pad", 0u);
      break;
    case LayerKind::FullyConnected:
      l.in_features = required<std::uint32_t>(j, "in_features", where);
      l.out_features = required<std::uint32_t>(j, "out_features", where);
      break;
    case LayerKind::BatchNorm:
      l.channels = required<std::uint32_t>(j, "channels", where);
      l.eps = j.value("eps", 1e-5);
      break;
    case LayerKind::MaxPool:
      l.kernel_h = required<std::uint32_t>(j, "kernel_h", where);
      l.kernel_w = required<std::uint32_t>(j, "kernel_w", where);
      l.stride = j.value("stride", l.kernel_h);
      break;
    case LayerKind::ReLU:
    case LayerKind::Softmax:
      break;
  }
  l.weight_ref = optional_ref(j, "weight_ref");
  l.binary_ref = optional_ref(j, "binary_ref");
  l.scale_ref = optional_ref(j, "scale_ref");
  l.params_ref = optional_ref(j, "params_ref");
  l.binarized = j.value("binarized", false);
  return l;
}

}  // namespace

std::string manifest_to_json(const ModelManifest& m) {
  json j;
  j["name"] = m.name;
  j["input_shape"] = m.input_shape;
  j["tensor_dir"] = m.tensor_dir;
  j["layers"] = json::array();
  for (const auto& l : m.layers) j["layers"].push_back(layer_to_json(l));
  return j.dump(2) + "\n";
}

ModelManifest manifest_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ManifestError(std::string("manifest is not valid JSON: ") + e.what());
  }
  ModelManifest m;
  m.name = required<std::string>(j, "name", "manifest: ");
  m.input_shape = required<std::vector<std::uint32_t>>(j, "input_shape", "manifest: ");
  m.tensor_dir = j.value("tensor_dir", std::string("."));
  if (!j.contains("layers") || !j["layers"].is_array()) {
    throw ManifestError("manifest: missing field 'layers'");
  }
  for (std::size_t i = 0; i < j["layers"].size(); ++i) {
    m.layers.push_back(layer_from_json(j["layers"][i], i));
  }
  validate_manifest(m);
  return m;
}

ModelManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot open manifest " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return manifest_from_json(ss.str());
}

void write_manifest(const ModelManifest& m, const std::filesystem::path& path) {
  validate_manifest(m);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ManifestError("cannot write manifest " + path.string());
  out << manifest_to_json(m);
}

ModelManifest parse_architecture(const std::string& arch, const std::string& name,
                                 std::vector<std::uint32_t> input_shape) {
  ModelManifest m;
  m.name = name;
  m.input_shape = std::move(input_shape);
  m.tensor_dir = ".";
  Shape cur = input_shape_of(m);

  int conv_count = 0, fc_count = 0, bn_count = 0, relu_count = 0, pool_count = 0;
  auto add_bn = [&](std::uint32_t channels) {
    LayerSpec bn;
    bn.kind = LayerKind::BatchNorm;
    bn.name = "bn" + std::to_string(++bn_count);
    bn.channels = channels;
    bn.params_ref = bn.name + ".params.tensor";
    m.layers.push_back(bn);
  };
  auto add_relu = [&] {
    LayerSpec r;
    r.kind = LayerKind::ReLU;
    r.name = "relu" + std::to_string(++relu_count);
    m.layers.push_back(r);
  };

  // Accept both "x" and the multiplication sign.
  std::string normalized;
  for (std::size_t i = 0; i < arch.size(); ++i) {
    if (arch.compare(i, 2, "\xC3\x97") == 0) {
      normalized += 'x';
      ++i;
    } else if (arch[i] != ' ') {
      normalized += arch[i];
    }
  }

  static const std::regex conv_re(R"(^\(?(?:(\d+)x)?(\d+)C(\d+)\)?$)");
  static const std::regex pool_re(R"(^MP(\d+)$)");
  static const std::regex fc_re(R"(^(\d+)FC$)");

  std::stringstream ss(normalized);
  std::string tok;
  while (std::getline(ss, tok, '-')) {
    std::smatch mt;
    if (std::regex_match(tok, mt, conv_re)) {
      const int repeat = mt[1].matched ? std::stoi(mt[1]) : 1;
      const auto width = static_cast<std::uint32_t>(std::stoul(mt[2]));
      const auto k = static_cast<std::uint32_t>(std::stoul(mt[3]));
      for (int r = 0; r < repeat; ++r) {
        LayerSpec c;
        c.kind = LayerKind::Conv;
        c.name = "conv" + std::to_string(++conv_count);
        c.in_channels = cur.channels;
        c.out_channels = width;
        c.kernel_h = c.kernel_w = k;
        c.stride = 1;
        c.pad = k / 2;
        c.weight_ref = c.name + ".weight.tensor";
        m.layers.push_back(c);
        cur.channels = width;
        add_bn(width);
        add_relu();
      }
    } else if (std::regex_match(tok, mt, pool_re)) {
      LayerSpec p;
      p.kind = LayerKind::MaxPool;
      p.name = "pool" + std::to_string(++pool_count);
      p.kernel_h = p.kernel_w = p.stride = static_cast<std::uint32_t>(std::stoul(mt[1]));
      m.layers.push_back(p);
      cur.height /= p.stride;
      cur.width /= p.stride;
    } else if (std::regex_match(tok, mt, fc_re)) {
      LayerSpec f;
      f.kind = LayerKind::FullyConnected;
      f.name = "fc" + std::to_string(++fc_count);
      f.in_features = static_cast<std::uint32_t>(cur.size());
      f.out_features = static_cast<std::uint32_t>(std::stoul(mt[1]));
      f.weight_ref = f.name + ".weight.tensor";
      m.layers.push_back(f);
      cur = {f.out_features, 1, 1};
      add_bn(f.out_features);
    } else if (tok == "Softmax") {
      LayerSpec s;
      s.kind = LayerKind::Softmax;
      s.name = "softmax";
      m.layers.push_back(s);
    } else {
      throw ManifestError("cannot parse architecture token '" + tok + "'");
    }
  }
  validate_manifest(m);
  return m;
}

}  // namespace bwnh
