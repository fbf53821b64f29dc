#include "bwnh/im2col.hpp"

namespace bwnh {

Eigen::MatrixXd im2col(const double* input, int batch, const ConvGeometry& g) {
  const int oh = g.out_h(), ow = g.out_w();
  const int per_sample = oh * ow;
  Eigen::MatrixXd cols(g.rows(), static_cast<Eigen::Index>(batch) * per_sample);
  for (int n = 0; n < batch; ++n) {
    const double* img = input + static_cast<std::size_t>(n) * g.channels * g.height * g.width;
    for (int c = 0; c < g.channels; ++c) {
      for (int ky = 0; ky < g.kernel_h; ++ky) {
        for (int kx = 0; kx < g.kernel_w; ++kx) {
          const int row = (c * g.kernel_h + ky) * g.kernel_w + kx;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              const bool inside = iy >= 0 && iy < g.height && ix >= 0 && ix < g.width;
              cols(row, n * per_sample + oy * ow + ox) =
                  inside ? img[(c * g.height + iy) * g.width + ix] : 0.0;
            }
          }
        }
      }
    }
  }
  return cols;
}

void col2im(const Eigen::MatrixXd& cols, int batch, const ConvGeometry& g, double* grad_input) {
  const int oh = g.out_h(), ow = g.out_w();
  const int per_sample = oh * ow;
  for (int n = 0; n < batch; ++n) {
    double* img = grad_input + static_cast<std::size_t>(n) * g.channels * g.height * g.width;
    for (int c = 0; c < g.channels; ++c) {
      for (int ky = 0; ky < g.kernel_h; ++ky) {
        for (int kx = 0; kx < g.kernel_w; ++kx) {
          const int row = (c * g.kernel_h + ky) * g.kernel_w + kx;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.height) continue;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix < 0 || ix >= g.width) continue;
              img[(c * g.height + iy) * g.width + ix] += cols(row, n * per_sample + oy * ow + ox);
            }
          }
        }
      }
    }
  }
}

}  // namespace bwnh
