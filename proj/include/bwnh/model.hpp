#pragma once

#include <filesystem>
#include <map>
#include <string>

#include <Eigen/Dense>

#include "bwnh/manifest.hpp"
#include "bwnh/tensor.hpp"

namespace bwnh {

// A manifest together with the tensors its layers reference, keyed by file
// name relative to tensor_dir.
struct Model {
  ModelManifest manifest;
  std::map<std::string, Tensor> tensors;

  const Tensor& tensor(const std::string& ref) const;
};

// Reads the manifest and every referenced tensor. tensor_dir is resolved
// relative to the manifest's directory. A dangling reference is an error.
Model load_model(const std::filesystem::path& manifest_path);

// Writes the referenced tensors into tensor_dir (created if needed) and then
// the manifest. Unreferenced tensors in the store are not written.
void save_model(const Model& model, const std::filesystem::path& manifest_path);

// Weight matrix of a Conv/FC layer in hashing layout: S x N with
// S = in_channels*kh*kw (or in_features) and one column per output channel.
Eigen::MatrixXd weight_matrix(const Model& model, std::size_t layer);
Eigen::MatrixXd weight_matrix(const Tensor& weight);

// Code matrix (S x N, entries +-1) and scale vector (N) of a binarized layer.
Eigen::MatrixXd code_matrix(const Model& model, std::size_t layer);
Eigen::VectorXd scale_vector(const Model& model, std::size_t layer);

// Inverse of weight_matrix for a tensor with the given (out, ...) dims.
Tensor weight_tensor(const Eigen::MatrixXd& w, const std::vector<std::uint32_t>& dims);
Tensor code_tensor(const Eigen::MatrixXd& b, const std::vector<std::uint32_t>& dims);

// Stores codes and scales for `layer`, sets binary_ref/scale_ref and marks it
// binarized. `alpha` has one entry per output channel.
void attach_binary(Model& model, std::size_t layer, const Eigen::MatrixXd& codes,
                   const Eigen::VectorXd& alpha);

// Copy in which every binarized layer's weight_ref holds the dense alpha*B
// weights and the layer is marked real-valued again.
Model densify(const Model& model);

// Folds each binarized layer's per-channel scale into the BatchNorm that
// directly follows it (gamma *= alpha, running_mean /= alpha) and resets the
// scale to 1. Layers not followed by BatchNorm are left as they are.
Model merge_scale_into_batchnorm(const Model& model);

}  // namespace bwnh
