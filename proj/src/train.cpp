#include <cmath>
#include <numeric>
#include <random>

#include "bwnh/binarizer.hpp"
#include "bwnh/net.hpp"

namespace bwnh {

namespace {

// Seeded epoch-wise shuffling over the dataset.
class BatchSampler {
 public:
  BatchSampler(std::size_t size, std::size_t batch, std::uint64_t seed)
      : order_(size), batch_(std::min(batch, size)), rng_(seed) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  std::vector<std::size_t> next() {
    if (pos_ + batch_ > order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      pos_ = 0;
    }
    std::vector<std::size_t> idx(order_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                 order_.begin() + static_cast<std::ptrdiff_t>(pos_ + batch_));
    pos_ += batch_;
    return idx;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t pos_ = 0;
  std::mt19937_64 rng_;
};

double learning_rate(const TrainConfig& cfg, int it) {
  if (cfg.decay_steps <= 0) return cfg.lr;
  return cfg.lr * std::pow(cfg.lr_decay, it / cfg.decay_steps);
}

template <typename M>
void momentum_step(M& param, M& velocity, const M& grad, double lr, double momentum) {
  velocity = momentum * velocity - lr * grad;
  param += velocity;
}

struct Velocity {
  Eigen::MatrixXd weight;
  Eigen::VectorXd alpha, gamma, beta;
};

std::vector<Velocity> zero_velocities(const Network& net) {
  std::vector<Velocity> v(net.layers().size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto& l = net.layers()[i];
    v[i].weight = Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols());
    v[i].alpha = Eigen::VectorXd::Zero(l.alpha.size());
    v[i].gamma = Eigen::VectorXd::Zero(l.gamma.size());
    v[i].beta = Eigen::VectorXd::Zero(l.beta.size());
  }
  return v;
}

}  // namespace

void validate(const TrainConfig& cfg) {
  if (!(cfg.lr >= 0.0) || !std::isfinite(cfg.lr)) throw std::invalid_argument("lr must be >= 0");
  if (!(cfg.lr_decay > 0.0)) throw std::invalid_argument("lr_decay must be positive");
  if (cfg.decay_steps < 0) throw std::invalid_argument("decay_steps must be >= 0");
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) {
    throw std::invalid_argument("momentum must be in [0, 1)");
  }
  if (!(cfg.weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be >= 0");
  if (cfg.batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (cfg.max_iters < 0) throw std::invalid_argument("max_iters must be >= 0");
}

TrainingDiverged::TrainingDiverged(int iteration, std::vector<double> losses)
    : std::runtime_error("training diverged at iteration " + std::to_string(iteration)),
      iteration_(iteration),
      losses_(std::move(losses)) {}

Model initialize_model(const ModelManifest& manifest, std::uint64_t seed) {
  validate_manifest(manifest);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Model model;
  model.manifest = manifest;
  for (const auto& l : manifest.layers) {
    if (l.kind == LayerKind::Conv || l.kind == LayerKind::FullyConnected) {
      std::vector<std::uint32_t> dims;
      std::size_t fan_in;
      if (l.kind == LayerKind::Conv) {
        dims = {l.out_channels, l.in_channels, l.kernel_h, l.kernel_w};
        fan_in = std::size_t{l.in_channels} * l.kernel_h * l.kernel_w;
      } else {
        dims = {l.out_features, l.in_features};
        fan_in = l.in_features;
      }
      const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
      std::vector<float> w(fan_in * dims[0]);
      for (auto& v : w) v = static_cast<float>(stddev * normal(rng));
      model.tensors.insert_or_assign(*l.weight_ref, Tensor(dims, std::move(w)));
    } else if (l.kind == LayerKind::BatchNorm) {
      const std::size_t c = l.channels;
      std::vector<float> p(4 * c, 0.0f);
      std::fill_n(p.begin(), c, 1.0f);
      std::fill_n(p.begin() + static_cast<std::ptrdiff_t>(3 * c), c, 1.0f);
      model.tensors.insert_or_assign(*l.params_ref,
                                     Tensor({4, static_cast<std::uint32_t>(c)}, std::move(p)));
    }
  }
  return model;
}

Model train_baseline(const Model& init, const Dataset& data, const TrainConfig& cfg,
                     TrainReport* report) {
  validate(cfg);
  if (data.size() == 0) throw std::invalid_argument("cannot train on an empty dataset");
  Network net(init, ExecutionMode::Float);
  auto vel = zero_velocities(net);
  BatchSampler sampler(data.size(), cfg.batch_size, cfg.seed);
  std::vector<double> losses;

  for (int it = 0; it < cfg.max_iters; ++it) {
    const Dataset batch = data.subset(sampler.next());
    FeatureMap grad;
    const FeatureMap logits = net.forward(to_feature_map(batch.images), true);
    const double loss = softmax_cross_entropy(logits, batch.labels, &grad);
    losses.push_back(loss);
    if (!std::isfinite(loss)) throw TrainingDiverged(it, losses);
    net.backward(grad);

    const double lr = learning_rate(cfg, it);
    for (std::size_t i = 0; i < net.layers().size(); ++i) {
      auto& l = net.layers()[i];
      if (has_weights(l.spec.kind)) {
        const Eigen::MatrixXd g = l.grad_weight + cfg.weight_decay * l.weight;
        momentum_step(l.weight, vel[i].weight, g, lr, cfg.momentum);
      } else if (l.spec.kind == LayerKind::BatchNorm) {
        momentum_step(l.gamma, vel[i].gamma, l.grad_gamma, lr, cfg.momentum);
        momentum_step(l.beta, vel[i].beta, l.grad_beta, lr, cfg.momentum);
      }
    }
  }
  Model out = init;
  net.store_parameters(out);
  if (report) report->losses = std::move(losses);
  return out;
}

Model finetune(const Model& binarized, const Dataset& data, const FinetuneConfig& cfg,
               TrainReport* report) {
  validate(cfg.train);
  if (data.size() == 0) throw std::invalid_argument("cannot fine-tune on an empty dataset");
  bool any_binary = false;
  for (const auto& l : binarized.manifest.layers) any_binary = any_binary || l.binarized;
  if (!any_binary) throw std::invalid_argument("fine-tuning needs a binarized model");

  Network net(binarized, ExecutionMode::Mixed, /*dense_binary=*/true);
  auto vel = zero_velocities(net);
  std::vector<Eigen::MatrixXd> shadow(net.layers().size()), shadow_vel(net.layers().size());
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    const auto& l = net.layers()[i];
    if (!l.spec.binarized) continue;
    shadow[i] = l.alpha.cwiseAbs().asDiagonal() * l.codes;
    shadow_vel[i] = Eigen::MatrixXd::Zero(l.codes.rows(), l.codes.cols());
  }

  BatchSampler sampler(data.size(), cfg.train.batch_size, cfg.train.seed);
  std::vector<double> losses;
  const bool ste = cfg.mode == FinetuneMode::StraightThrough;

  for (int it = 0; it < cfg.train.max_iters; ++it) {
    const Dataset batch = data.subset(sampler.next());
    FeatureMap grad;
    const FeatureMap logits = net.forward(to_feature_map(batch.images), false);
    const double loss = softmax_cross_entropy(logits, batch.labels, &grad);
    losses.push_back(loss);
    if (!std::isfinite(loss)) throw TrainingDiverged(it, losses);
    net.backward(grad);

    const double lr = learning_rate(cfg.train, it);
    const double mom = cfg.train.momentum;
    for (std::size_t i = 0; i < net.layers().size(); ++i) {
      auto& l = net.layers()[i];
      if (l.spec.kind == LayerKind::BatchNorm) {
        momentum_step(l.gamma, vel[i].gamma, l.grad_gamma, lr, mom);
        momentum_step(l.beta, vel[i].beta, l.grad_beta, lr, mom);
        continue;
      }
      if (!has_weights(l.spec.kind)) continue;
      if (!l.spec.binarized) {
        const Eigen::MatrixXd g = l.grad_weight + cfg.train.weight_decay * l.weight;
        momentum_step(l.weight, vel[i].weight, g, lr, mom);
        continue;
      }

      // Effective weights are diag(alpha) * B.
      const Eigen::VectorXd grad_alpha = l.grad_weight.cwiseProduct(l.codes).rowwise().sum();
      const Eigen::MatrixXd old_codes = l.codes;
      momentum_step(l.alpha, vel[i].alpha, grad_alpha, lr, mom);
      if (ste) {
        const Eigen::MatrixXd grad_shadow = l.alpha.asDiagonal() * l.grad_weight;
        momentum_step(shadow[i], shadow_vel[i], grad_shadow, lr, mom);
        shadow[i] = shadow[i].cwiseMax(-1.0).cwiseMin(1.0);
        l.codes = shadow[i].unaryExpr([](double v) { return v < 0.0 ? -1.0 : 1.0; });
        for (Eigen::Index c = 0; c < l.codes.rows(); ++c) {
          if (l.codes.row(c) == old_codes.row(c)) continue;
          // Refit this channel's scale so the new codes best reproduce the
          // pre-rebinarization responses on the current featuremaps.
          const Eigen::VectorXd target =
              l.cols.transpose() * (l.alpha(c) * old_codes.row(c).transpose());
          l.alpha(c) = update_scale(l.cols, target, l.codes.row(c).transpose(), l.alpha(c)).alpha;
        }
      }
      l.weight = l.alpha.asDiagonal() * l.codes;
    }
  }

  Model out = binarized;
  net.store_parameters(out);
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    const auto& l = net.layers()[i];
    if (l.spec.binarized) attach_binary(out, i, l.codes.transpose(), l.alpha);
  }
  if (report) report->losses = std::move(losses);
  return out;
}

}  // namespace bwnh
