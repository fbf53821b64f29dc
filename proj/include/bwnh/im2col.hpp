#pragma once

#include <cstddef>

#include <Eigen/Dense>

namespace bwnh {

struct ConvGeometry {
  int channels = 0;
  int height = 0;
  int width = 0;
  int kernel_h = 0;
  int kernel_w = 0;
  int stride = 1;
  int pad = 0;

  int out_h() const { return (height + 2 * pad - kernel_h) / stride + 1; }
  int out_w() const { return (width + 2 * pad - kernel_w) / stride + 1; }
  // Rows of the unfolded matrix, ordered (channel, ky, kx) to match
  // (out, in, kh, kw) weights.
  int rows() const { return channels * kernel_h * kernel_w; }
};

// Unfolds a (batch, C, H, W) row-major input into a rows() x (batch*out_h*out_w)
// matrix; columns are ordered (sample, oy, ox). Padding reads as zero.
Eigen::MatrixXd im2col(const double* input, int batch, const ConvGeometry& g);

// Adjoint of im2col: scatters column gradients back, accumulating into
// grad_input (batch, C, H, W), which the caller zeroes.
void col2im(const Eigen::MatrixXd& cols, int batch, const ConvGeometry& g, double* grad_input);

}  // namespace bwnh
