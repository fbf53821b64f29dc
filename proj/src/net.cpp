#include "bwnh/net.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "bwnh/im2col.hpp"

namespace bwnh {

FeatureMap to_feature_map(const Tensor& t) {
  FeatureMap f;
  f.dims.assign(t.dims().begin(), t.dims().end());
  const auto v = t.f32();
  f.values.assign(v.begin(), v.end());
  return f;
}

Tensor to_tensor(const FeatureMap& f) {
  std::vector<std::uint32_t> dims(f.dims.begin(), f.dims.end());
  std::vector<float> v(f.values.size());
  std::transform(f.values.begin(), f.values.end(), v.begin(),
                 [](double x) { return static_cast<float>(x); });
  return Tensor(std::move(dims), std::move(v));
}

namespace {

ConvGeometry geometry(const LayerState& l) {
  return {static_cast<int>(l.in_shape.channels), static_cast<int>(l.in_shape.height),
          static_cast<int>(l.in_shape.width),    static_cast<int>(l.spec.kernel_h),
          static_cast<int>(l.spec.kernel_w),     static_cast<int>(l.spec.stride),
          static_cast<int>(l.spec.pad)};
}

std::vector<std::size_t> out_dims(std::size_t n, const LayerState& l) {
  if (l.spec.kind == LayerKind::FullyConnected) return {n, l.out_shape.channels};
  if (l.in_shape.height == 1 && l.in_shape.width == 1 && l.spec.kind != LayerKind::Conv &&
      l.spec.kind != LayerKind::MaxPool) {
    return {n, l.out_shape.channels};
  }
  return {n, l.out_shape.channels, l.out_shape.height, l.out_shape.width};
}

// Binary execution: each output is a signed sum of inputs, scaled once per
// channel.
Eigen::MatrixXd binary_multiply(const LayerState& l, const Eigen::MatrixXd& cols) {
  const Eigen::Index n_out = l.codes.rows(), s = l.codes.cols(), m = cols.cols();
  Eigen::MatrixXd out(n_out, m);
  for (Eigen::Index c = 0; c < n_out; ++c) {
    for (Eigen::Index k = 0; k < m; ++k) {
      const double* x = cols.data() + k * s;
      double acc = 0.0;
      for (Eigen::Index j = 0; j < s; ++j) {
        if (l.codes(c, j) > 0) {
          acc += x[j];
        } else {
          acc -= x[j];
        }
      }
      out(c, k) = l.alpha(c) * acc;
    }
  }
  return out;
}

}  // namespace

Network::Network(const Model& model, ExecutionMode mode, bool dense_binary) {
  const auto& m = model.manifest;
  validate_manifest(m);
  const auto shapes = infer_shapes(m);
  Shape in = input_shape_of(m);
  logits_layer_ = m.layers.size();
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    LayerState l;
    l.spec = m.layers[i];
    l.in_shape = in;
    l.out_shape = shapes[i];
    in = shapes[i];
    switch (l.spec.kind) {
      case LayerKind::Conv:
      case LayerKind::FullyConnected:
        l.weight = weight_matrix(model, i).transpose();
        if (mode == ExecutionMode::Binary && !l.spec.binarized) {
          throw ModeError("Binary mode requires layer " + l.spec.name + " to be binarized");
        }
        l.binary_exec = mode != ExecutionMode::Float && l.spec.binarized;
        if (l.binary_exec) {
          l.codes = code_matrix(model, i).transpose();
          l.alpha = scale_vector(model, i);
          l.weight = l.alpha.asDiagonal() * l.codes;
          if (dense_binary) l.binary_exec = false;
        }
        break;
      case LayerKind::BatchNorm: {
        const auto p = model.tensor(*l.spec.params_ref).f32();
        const std::size_t c = l.spec.channels;
        if (p.size() != 4 * c) throw ManifestError("bad BatchNorm params for " + l.spec.name);
        l.gamma.resize(c);
        l.beta.resize(c);
        l.running_mean.resize(c);
        l.running_var.resize(c);
        for (std::size_t k = 0; k < c; ++k) {
          l.gamma(k) = p[k];
          l.beta(k) = p[c + k];
          l.running_mean(k) = p[2 * c + k];
          l.running_var(k) = p[3 * c + k];
        }
        break;
      }
      case LayerKind::Softmax:
        if (i + 1 != m.layers.size()) throw ManifestError("Softmax must be the last layer");
        logits_layer_ = i;
        break;
      case LayerKind::ReLU:
      case LayerKind::MaxPool:
        break;
    }
    layers_.push_back(std::move(l));
  }
}

FeatureMap Network::forward(const FeatureMap& input, bool train_bn,
                            std::vector<FeatureMap>* outputs) {
  const std::size_t n = input.batch();
  if (n == 0) throw std::invalid_argument("empty batch");
  last_train_bn_ = train_bn;

  FeatureMap cur = input;
  FeatureMap logits;
  bool have_logits = false;
  if (outputs) outputs->clear();

  for (auto& l : layers_) {
    if (cur.per_sample() != l.in_shape.size()) {
      throw std::invalid_argument("layer " + l.spec.name + " expects " +
                                  std::to_string(l.in_shape.size()) + " values per sample, got " +
                                  std::to_string(cur.per_sample()));
    }
    FeatureMap out;
    out.dims = out_dims(n, l);
    switch (l.spec.kind) {
      case LayerKind::Conv:
      case LayerKind::FullyConnected: {
        std::size_t spatial = 1;
        if (l.spec.kind == LayerKind::Conv) {
          const auto g = geometry(l);
          l.cols = im2col(cur.values.data(), static_cast<int>(n), g);
          spatial = static_cast<std::size_t>(g.out_h()) * g.out_w();
        } else {
          l.cols = Eigen::Map<const Eigen::MatrixXd>(
              cur.values.data(), static_cast<Eigen::Index>(l.in_shape.size()),
              static_cast<Eigen::Index>(n));
        }
        const Eigen::MatrixXd y = l.binary_exec ? binary_multiply(l, l.cols) : l.weight * l.cols;
        const std::size_t channels = y.rows();
        out.values.resize(n * channels * spatial);
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t c = 0; c < channels; ++c) {
            for (std::size_t p = 0; p < spatial; ++p) {
              out.values[(s * channels + c) * spatial + p] =
                  y(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(s * spatial + p));
            }
          }
        }
        break;
      }
      case LayerKind::BatchNorm: {
        const std::size_t channels = l.spec.channels;
        const std::size_t spatial = l.in_shape.height * l.in_shape.width;
        const std::size_t m = n * spatial;
        l.xhat.resize(static_cast<Eigen::Index>(channels), static_cast<Eigen::Index>(m));
        l.inv_std.resize(static_cast<Eigen::Index>(channels));
        out.values.resize(cur.values.size());
        for (std::size_t c = 0; c < channels; ++c) {
          double mean, var;
          if (train_bn) {
            double sum = 0.0;
            for (std::size_t s = 0; s < n; ++s)
              for (std::size_t p = 0; p < spatial; ++p)
                sum += cur.values[(s * channels + c) * spatial + p];
            mean = sum / static_cast<double>(m);
            double sq = 0.0;
            for (std::size_t s = 0; s < n; ++s)
              for (std::size_t p = 0; p < spatial; ++p) {
                const double d = cur.values[(s * channels + c) * spatial + p] - mean;
                sq += d * d;
              }
            var = sq / static_cast<double>(m);
            const double unbiased = m > 1 ? sq / static_cast<double>(m - 1) : var;
            l.running_mean(c) = 0.9 * l.running_mean(c) + 0.1 * mean;
            l.running_var(c) = 0.9 * l.running_var(c) + 0.1 * unbiased;
          } else {
            mean = l.running_mean(c);
            var = l.running_var(c);
          }
          const double inv = 1.0 / std::sqrt(var + l.spec.eps);
          l.inv_std(c) = inv;
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t p = 0; p < spatial; ++p) {
              const std::size_t idx = (s * channels + c) * spatial + p;
              const double xh = (cur.values[idx] - mean) * inv;
              l.xhat(c, s * spatial + p) = xh;
              out.values[idx] = l.gamma(c) * xh + l.beta(c);
            }
        }
        break;
      }
      case LayerKind::ReLU:
        l.input = cur.values;
        out.values.resize(cur.values.size());
        std::transform(cur.values.begin(), cur.values.end(), out.values.begin(),
                       [](double v) { return v > 0.0 ? v : 0.0; });
        break;
      case LayerKind::MaxPool: {
        const std::size_t channels = l.in_shape.channels, h = l.in_shape.height,
                          w = l.in_shape.width, oh = l.out_shape.height, ow = l.out_shape.width;
        out.values.resize(n * channels * oh * ow);
        l.argmax.resize(out.values.size());
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t oy = 0; oy < oh; ++oy)
              for (std::size_t ox = 0; ox < ow; ++ox) {
                double best = -std::numeric_limits<double>::infinity();
                std::size_t arg = 0;
                for (std::size_t ky = 0; ky < l.spec.kernel_h; ++ky)
                  for (std::size_t kx = 0; kx < l.spec.kernel_w; ++kx) {
                    const std::size_t iy = oy * l.spec.stride + ky, ix = ox * l.spec.stride + kx;
                    const std::size_t idx = ((s * channels + c) * h + iy) * w + ix;
                    if (cur.values[idx] > best) {
                      best = cur.values[idx];
                      arg = idx;
                    }
                  }
                const std::size_t o = ((s * channels + c) * oh + oy) * ow + ox;
                out.values[o] = best;
                l.argmax[o] = arg;
              }
        break;
      }
      case LayerKind::Softmax: {
        logits = cur;
        have_logits = true;
        out.values.resize(cur.values.size());
        const std::size_t k = cur.per_sample();
        for (std::size_t s = 0; s < n; ++s) {
          const double* z = cur.values.data() + s * k;
          const double mx = *std::max_element(z, z + k);
          double sum = 0.0;
          for (std::size_t j = 0; j < k; ++j) sum += std::exp(z[j] - mx);
          for (std::size_t j = 0; j < k; ++j) out.values[s * k + j] = std::exp(z[j] - mx) / sum;
        }
        break;
      }
    }
    if (outputs) outputs->push_back(out);
    cur = std::move(out);
  }
  if (!have_logits) {
    logits = std::move(cur);
    if (logits.dims.size() > 2) logits.dims = {n, logits.per_sample()};
  }
  return logits;
}

FeatureMap Network::backward(const FeatureMap& grad_logits) {
  FeatureMap g = grad_logits;
  const std::size_t n = g.batch();
  for (std::size_t i = logits_layer_; i-- > 0;) {
    auto& l = layers_[i];
    FeatureMap gin;
    gin.dims = {n, l.in_shape.channels, l.in_shape.height, l.in_shape.width};
    gin.values.assign(n * l.in_shape.size(), 0.0);
    switch (l.spec.kind) {
      case LayerKind::Conv:
      case LayerKind::FullyConnected: {
        const std::size_t channels = l.out_shape.channels;
        const std::size_t spatial = l.out_shape.height * l.out_shape.width;
        Eigen::MatrixXd G(static_cast<Eigen::Index>(channels),
                          static_cast<Eigen::Index>(n * spatial));
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t c = 0; c < channels; ++c)
            for (std::size_t p = 0; p < spatial; ++p)
              G(c, s * spatial + p) = g.values[(s * channels + c) * spatial + p];
        l.grad_weight = G * l.cols.transpose();
        const Eigen::MatrixXd gcols = l.weight.transpose() * G;
        if (l.spec.kind == LayerKind::Conv) {
          col2im(gcols, static_cast<int>(n), geometry(l), gin.values.data());
        } else {
          Eigen::Map<Eigen::MatrixXd>(gin.values.data(), gcols.rows(), gcols.cols()) = gcols;
        }
        break;
      }
      case LayerKind::BatchNorm: {
        const std::size_t channels = l.spec.channels;
        const std::size_t spatial = l.in_shape.height * l.in_shape.width;
        const double m = static_cast<double>(n * spatial);
        l.grad_gamma = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(channels));
        l.grad_beta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(channels));
        for (std::size_t c = 0; c < channels; ++c) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t p = 0; p < spatial; ++p) {
              const double dy = g.values[(s * channels + c) * spatial + p];
              sum_dy += dy;
              sum_dy_xhat += dy * l.xhat(c, s * spatial + p);
            }
          l.grad_gamma(c) = sum_dy_xhat;
          l.grad_beta(c) = sum_dy;
          const double scale = l.gamma(c) * l.inv_std(c);
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t p = 0; p < spatial; ++p) {
              const std::size_t idx = (s * channels + c) * spatial + p;
              if (last_train_bn_) {
                gin.values[idx] = scale / m *
                                  (m * g.values[idx] - sum_dy -
                                   l.xhat(c, s * spatial + p) * sum_dy_xhat);
              } else {
                gin.values[idx] = scale * g.values[idx];
              }
            }
        }
        break;
      }
      case LayerKind::ReLU:
        for (std::size_t k = 0; k < gin.values.size(); ++k) {
          gin.values[k] = l.input[k] > 0.0 ? g.values[k] : 0.0;
        }
        break;
      case LayerKind::MaxPool:
        for (std::size_t o = 0; o < l.argmax.size(); ++o) gin.values[l.argmax[o]] += g.values[o];
        break;
      case LayerKind::Softmax:
        break;
    }
    g = std::move(gin);
  }
  return g;
}

void Network::store_parameters(Model& model) const {
  for (const auto& l : layers_) {
    if (has_weights(l.spec.kind) && !l.spec.binarized) {
      const auto& dims = model.tensor(*l.spec.weight_ref).dims();
      model.tensors.insert_or_assign(*l.spec.weight_ref,
                                     weight_tensor(l.weight.transpose(), dims));
    } else if (l.spec.kind == LayerKind::BatchNorm) {
      const std::size_t c = l.spec.channels;
      std::vector<float> p(4 * c);
      for (std::size_t k = 0; k < c; ++k) {
        p[k] = static_cast<float>(l.gamma(k));
        p[c + k] = static_cast<float>(l.beta(k));
        p[2 * c + k] = static_cast<float>(l.running_mean(k));
        p[3 * c + k] = static_cast<float>(l.running_var(k));
      }
      model.tensors.insert_or_assign(*l.spec.params_ref,
                                     Tensor({4, static_cast<std::uint32_t>(c)}, std::move(p)));
    }
  }
}

ForwardResult forward(const Model& model, const Tensor& batch, ExecutionMode mode) {
  Network net(model, mode);
  ForwardResult r;
  r.logits = net.forward(to_feature_map(batch), false, &r.outputs);
  return r;
}

double softmax_cross_entropy(const FeatureMap& logits, const std::vector<int>& labels,
                             FeatureMap* grad) {
  const std::size_t n = logits.batch(), k = logits.per_sample();
  if (labels.size() != n) throw std::invalid_argument("label count does not match batch");
  if (grad) {
    grad->dims = logits.dims;
    grad->values.assign(logits.values.size(), 0.0);
  }
  double loss = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    if (labels[s] < 0 || static_cast<std::size_t>(labels[s]) >= k) {
      throw std::invalid_argument("label out of range");
    }
    const double* z = logits.values.data() + s * k;
    const double mx = *std::max_element(z, z + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(z[j] - mx);
    const double log_sum = std::log(sum) + mx;
    loss += log_sum - z[labels[s]];
    if (grad) {
      for (std::size_t j = 0; j < k; ++j) {
        const double p = std::exp(z[j] - log_sum);
        grad->values[s * k + j] =
            (p - (static_cast<int>(j) == labels[s] ? 1.0 : 0.0)) / static_cast<double>(n);
      }
    }
  }
  return loss / static_cast<double>(n);
}

EvalResult evaluate(const Model& model, const Dataset& data, ExecutionMode mode,
                    std::size_t batch_size) {
  if (data.size() == 0) throw std::invalid_argument("cannot evaluate on an empty dataset");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  Network net(model, mode);
  std::size_t correct = 0;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    std::vector<std::size_t> idx(end - start);
    for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = start + k;
    const Dataset part = data.subset(idx);
    const FeatureMap logits = net.forward(to_feature_map(part.images), false);
    loss_sum += softmax_cross_entropy(logits, part.labels) * static_cast<double>(idx.size());
    const std::size_t k = logits.per_sample();
    for (std::size_t s = 0; s < idx.size(); ++s) {
      const double* z = logits.values.data() + s * k;
      const auto pred = static_cast<int>(std::max_element(z, z + k) - z);
      if (pred == part.labels[s]) ++correct;
    }
  }
  return {static_cast<double>(correct) / static_cast<double>(data.size()),
          loss_sum / static_cast<double>(data.size())};
}

namespace {

struct CheckSetup {
  Model model;
  FeatureMap input;
  std::vector<int> labels;
};

CheckSetup grad_check_setup(LayerKind kind, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  ModelManifest m;
  m.name = "grad_check";
  m.tensor_dir = ".";
  LayerSpec l;
  l.kind = kind;
  l.name = "probe";
  std::size_t batch = 3;
  switch (kind) {
    case LayerKind::Conv:
      m.input_shape = {2, 5, 5};
      l.in_channels = 2;
      l.out_channels = 3;
      l.kernel_h = l.kernel_w = 3;
      l.stride = 2;
      l.pad = 1;
      l.weight_ref = "probe.weight.tensor";
      break;
    case LayerKind::FullyConnected:
      m.input_shape = {3, 2, 2};
      l.in_features = 12;
      l.out_features = 5;
      l.weight_ref = "probe.weight.tensor";
      break;
    case LayerKind::BatchNorm:
      m.input_shape = {3, 3, 3};
      l.channels = 3;
      l.params_ref = "probe.params.tensor";
      break;
    case LayerKind::ReLU:
      m.input_shape = {2, 3, 3};
      break;
    case LayerKind::MaxPool:
      m.input_shape = {2, 4, 4};
      l.kernel_h = l.kernel_w = l.stride = 2;
      break;
    case LayerKind::Softmax:
      m.input_shape = {6, 1, 1};
      batch = 4;
      break;
  }
  m.layers.push_back(l);
  Model model = initialize_model(m, rng());
  if (kind == LayerKind::BatchNorm) {
    std::vector<float> p(12);
    for (int c = 0; c < 3; ++c) {
      p[c] = static_cast<float>(1.0 + 0.3 * normal(rng));
      p[3 + c] = static_cast<float>(0.2 * normal(rng));
      p[6 + c] = 0.0f;
      p[9 + c] = 1.0f;
    }
    model.tensors.insert_or_assign("probe.params.tensor", Tensor({4, 3}, std::move(p)));
  }

  CheckSetup setup;
  setup.model = std::move(model);
  setup.input.dims = {batch, m.input_shape[0], m.input_shape[1], m.input_shape[2]};
  const std::size_t count = batch * m.input_shape[0] * m.input_shape[1] * m.input_shape[2];
  setup.input.values.resize(count);
  if (kind == LayerKind::MaxPool) {
    // Distinct, well separated values keep every window's argmax stable
    // under the perturbation.
    std::vector<double> v(count);
    for (std::size_t k = 0; k < count; ++k) v[k] = 0.1 * static_cast<double>(k);
    std::shuffle(v.begin(), v.end(), rng);
    setup.input.values = v;
  } else {
    for (auto& v : setup.input.values) {
      v = normal(rng);
      // Keep ReLU inputs away from the kink.
      if (kind == LayerKind::ReLU && std::abs(v) < 0.1) v = v < 0 ? -0.1 - std::abs(v) : 0.1 + v;
    }
  }
  for (std::size_t s = 0; s < batch; ++s) setup.labels.push_back(static_cast<int>(s % 6));
  return setup;
}

double rel_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

}  // namespace

double grad_check(LayerKind kind, double eps, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto setup = grad_check_setup(kind, rng);
  Network net(setup.model, ExecutionMode::Float);
  const bool train_bn = kind == LayerKind::BatchNorm;

  FeatureMap probe_weights;
  {
    const FeatureMap out = net.forward(setup.input, train_bn);
    probe_weights.dims = out.dims;
    std::normal_distribution<double> normal(0.0, 1.0);
    probe_weights.values.resize(out.values.size());
    for (auto& v : probe_weights.values) v = normal(rng);
  }
  auto loss_of = [&](const FeatureMap& in) {
    const FeatureMap out = net.forward(in, train_bn);
    if (kind == LayerKind::Softmax) return softmax_cross_entropy(out, setup.labels);
    double acc = 0.0;
    for (std::size_t k = 0; k < out.values.size(); ++k) acc += out.values[k] * probe_weights.values[k];
    return acc;
  };

  FeatureMap grad_out;
  const FeatureMap out = net.forward(setup.input, train_bn);
  if (kind == LayerKind::Softmax) {
    softmax_cross_entropy(out, setup.labels, &grad_out);
  } else {
    grad_out = probe_weights;
  }
  const FeatureMap grad_in = net.backward(grad_out);
  auto& layer = net.layers()[0];
  const Eigen::MatrixXd grad_w = layer.grad_weight;
  const Eigen::VectorXd grad_gamma = layer.grad_gamma, grad_beta = layer.grad_beta;

  double worst = 0.0;
  FeatureMap x = setup.input;
  for (std::size_t k = 0; k < x.values.size(); ++k) {
    const double orig = x.values[k];
    x.values[k] = orig + eps;
    const double up = loss_of(x);
    x.values[k] = orig - eps;
    const double down = loss_of(x);
    x.values[k] = orig;
    worst = std::max(worst, rel_error(grad_in.values[k], (up - down) / (2 * eps)));
  }
  auto check_param = [&](double& param, double analytic) {
    const double orig = param;
    param = orig + eps;
    const double up = loss_of(x);
    param = orig - eps;
    const double down = loss_of(x);
    param = orig;
    worst = std::max(worst, rel_error(analytic, (up - down) / (2 * eps)));
  };
  if (has_weights(kind)) {
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c)
        check_param(layer.weight(r, c), grad_w(r, c));
  }
  if (kind == LayerKind::BatchNorm) {
    for (Eigen::Index c = 0; c < layer.gamma.size(); ++c) {
      check_param(layer.gamma(c), grad_gamma(c));
      check_param(layer.beta(c), grad_beta(c));
    }
  }
  return worst;
}

}  // namespace bwnh
