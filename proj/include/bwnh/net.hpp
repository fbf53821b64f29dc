#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "bwnh/dataset.hpp"
#include "bwnh/manifest.hpp"
#include "bwnh/model.hpp"

namespace bwnh {

// Float: every Conv/FC multiplies by its real weights.
// Binary: every Conv/FC must be binarized and runs as +-1 accumulation
//   (additions and subtractions only) followed by a per-channel scale.
// Mixed: binarized layers run as in Binary, the rest as in Float. Used for
//   partially binarized models during layer-wise optimisation.
enum class ExecutionMode { Float, Binary, Mixed };

class ModeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Double-precision activation buffer, row-major with dims (n, C, H, W) or
// (n, features).
struct FeatureMap {
  std::vector<std::size_t> dims;
  std::vector<double> values;

  std::size_t batch() const { return dims.empty() ? 0 : dims[0]; }
  std::size_t per_sample() const { return batch() == 0 ? 0 : values.size() / batch(); }
};

FeatureMap to_feature_map(const Tensor& t);
Tensor to_tensor(const FeatureMap& f);

// Runtime state of one layer. Weight matrices are N x S (one row per output
// channel) so that outputs are weight * im2col(input).
struct LayerState {
  LayerSpec spec;
  Shape in_shape;
  Shape out_shape;

  Eigen::MatrixXd weight;  // dense weights used by the Float route
  Eigen::MatrixXd codes;   // +-1, binarized layers only
  Eigen::VectorXd alpha;
  bool binary_exec = false;

  Eigen::VectorXd gamma, beta, running_mean, running_var;

  // Forward caches.
  Eigen::MatrixXd cols;
  std::vector<double> input;
  std::vector<std::size_t> argmax;
  Eigen::MatrixXd xhat;  // C x (n*spatial)
  Eigen::VectorXd inv_std;

  // Gradients from the last backward pass.
  Eigen::MatrixXd grad_weight;
  Eigen::VectorXd grad_gamma, grad_beta;
};

class Network {
 public:
  // `dense_binary` executes binarized layers through the dense alpha*B route
  // instead of the add/sub loop; the two agree to rounding and the dense one is
  // used for training.
  Network(const Model& model, ExecutionMode mode, bool dense_binary = false);

  // Returns the logits (input of a trailing Softmax, or the last output).
  // With train_bn, BatchNorm uses batch statistics and updates its running
  // estimates. `outputs`, if given, receives every layer's output.
  FeatureMap forward(const FeatureMap& input, bool train_bn,
                     std::vector<FeatureMap>* outputs = nullptr);

  // Back-propagates d(loss)/d(logits) through the last forward pass, filling
  // per-layer gradients; returns d(loss)/d(input).
  FeatureMap backward(const FeatureMap& grad_logits);

  // Writes real weights and BatchNorm parameters back into `model` tensors.
  void store_parameters(Model& model) const;

  std::vector<LayerState>& layers() { return layers_; }
  const std::vector<LayerState>& layers() const { return layers_; }

 private:
  std::vector<LayerState> layers_;
  bool last_train_bn_ = false;
  std::size_t logits_layer_ = 0;  // layers [0, logits_layer_) produce the logits
};

struct ForwardResult {
  std::vector<FeatureMap> outputs;  // output of each layer
  FeatureMap logits;
};

ForwardResult forward(const Model& model, const Tensor& batch, ExecutionMode mode);

// Mean softmax cross-entropy and its gradient w.r.t. logits.
double softmax_cross_entropy(const FeatureMap& logits, const std::vector<int>& labels,
                             FeatureMap* grad = nullptr);

struct EvalResult {
  double top1 = 0.0;
  double loss = 0.0;
};

EvalResult evaluate(const Model& model, const Dataset& data, ExecutionMode mode,
                    std::size_t batch_size = 256);

// He-normal Conv/FC weights, unit BatchNorm; deterministic in seed.
Model initialize_model(const ModelManifest& manifest, std::uint64_t seed);

struct TrainConfig {
  double lr = 0.05;
  double lr_decay = 0.1;
  int decay_steps = 0;  // 0: constant learning rate
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 32;
  int max_iters = 300;
  std::uint64_t seed = 42;
};

void validate(const TrainConfig& cfg);

struct TrainReport {
  std::vector<double> losses;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(int iteration, std::vector<double> losses);
  int iteration() const { return iteration_; }
  const std::vector<double>& losses() const { return losses_; }

 private:
  int iteration_;
  std::vector<double> losses_;
};

Model train_baseline(const Model& init, const Dataset& data, const TrainConfig& cfg,
                     TrainReport* report = nullptr);

enum class FinetuneMode { StraightThrough, FixedCodes };

struct FinetuneConfig {
  TrainConfig train{0.001, 0.1, 0, 0.9, 0.0, 32, 200, 42};
  FinetuneMode mode = FinetuneMode::StraightThrough;
};

// Fine-tunes a binarized model. Each binarized layer keeps a real-valued
// shadow weight (initialised to |alpha| * B) updated with straight-through
// gradients; after every step B = sign(shadow) and the scale of any column
// whose codes changed is refit in closed form on the step's featuremaps.
// Scales, BatchNorm affine parameters and remaining real layers are trained
// directly; BatchNorm statistics stay frozen.
Model finetune(const Model& binarized, const Dataset& data, const FinetuneConfig& cfg,
               TrainReport* report = nullptr);

// Analytic versus central-difference gradients on a random small instance of
// one layer kind (Softmax means softmax cross-entropy). Returns the maximum
// relative error over input and parameter gradients.
double grad_check(LayerKind kind, double eps, std::uint64_t seed = 7);

}  // namespace bwnh
