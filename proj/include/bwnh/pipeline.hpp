#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bwnh/binarizer.hpp"
#include "bwnh/dataset.hpp"
#include "bwnh/model.hpp"

namespace bwnh {

// Source of the target similarities S = X^T W.
enum class TargetFrom { FullPrecision, Binarized };

// Featuremaps the codes are fitted against. Binarized is the error-adaptive
// setting; FullPrecision ignores upstream quantisation error.
enum class ReconstructFrom { Binarized, FullPrecision };

struct BinarizeConfig {
  SolverConfig solver;
  std::size_t batch_size = 256;
  std::size_t col_cap = 8192;
  bool skip_first = false;
  bool skip_last = false;
  // Only the first `max_layers` eligible layers are processed when set.
  std::optional<std::size_t> max_layers;
  // Restricts binarization to Conv layers (FC layers stay real-valued).
  bool conv_only = false;
  TargetFrom target_from = TargetFrom::FullPrecision;
  ReconstructFrom reconstruct_from = ReconstructFrom::Binarized;
  std::uint64_t seed = 42;
};

void validate(const BinarizeConfig& cfg);

struct AlphaStats {
  double min = 0.0;
  double max = 0.0;
  double mean = 0.0;
};

struct LayerReport {
  std::size_t layer_index = 0;
  std::string name;
  std::size_t s_dim = 0, m_dim = 0, n_dim = 0;
  double objective_initial = 0.0;
  double objective_final = 0.0;
  std::size_t iterations_max = 0;
  AlphaStats alpha_stats;
  std::vector<std::size_t> flagged_columns;
};

struct BinarizeRun {
  Model source;
  Model target;
  Dataset data;
  std::vector<LayerReport> layer_reports;
};

// Seeded shuffle of the dataset, truncated to batch_size (clamped to the
// dataset size). Returns images with dims (batch, C, H, W).
Tensor sample_batch(const Dataset& data, std::size_t batch_size, std::uint64_t seed);

// Input featuremap of layer `layer` (a Conv or FC) under the model's current
// weights, executed in Mixed mode, unfolded to S x M (im2col for Conv,
// one column per sample for FC).
Eigen::MatrixXd extract_layer_inputs(const Model& model, const Tensor& batch, std::size_t layer);

// X^T W.
Eigen::MatrixXd compute_target_similarity(const Eigen::MatrixXd& x, const Eigen::MatrixXd& w);

// Indices of the Conv/FC layers the config will binarize, in order.
std::vector<std::size_t> binarization_plan(const ModelManifest& m, const BinarizeConfig& cfg);

// Hashing problem for layer `layer` of run.target: the layer's real weights,
// featuremaps from a seeded calibration batch and the configured targets.
// Requires every planned layer before it to be binarized already.
HashProblem build_layer_problem(const BinarizeRun& run, std::size_t layer,
                                const BinarizeConfig& cfg);

// Solves layer `layer` of run.target. Requires every planned layer before it
// to be binarized already.
BinarySolution solve_layer_adaptive(BinarizeRun& run, std::size_t layer,
                                    const BinarizeConfig& cfg);

using LayerCallback = std::function<void(const BinarizeRun&, std::size_t layer)>;

// Binarizes every planned layer in order. `on_layer` is invoked after each
// layer completes. On failure the partially filled run is attached to the
// thrown BinarizeError.
BinarizeRun binarize_model(const Model& source, const Dataset& data, const BinarizeConfig& cfg,
                           const LayerCallback& on_layer = {});

class BinarizeError : public std::runtime_error {
 public:
  BinarizeError(const std::string& what, std::vector<LayerReport> partial)
      : std::runtime_error(what), partial_(std::move(partial)) {}
  const std::vector<LayerReport>& partial_reports() const { return partial_; }

 private:
  std::vector<LayerReport> partial_;
};

std::string run_report_json(const std::vector<LayerReport>& reports);
void write_run_report(const std::vector<LayerReport>& reports, const std::filesystem::path& path);

}  // namespace bwnh
