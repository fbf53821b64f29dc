#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "bwnh/tensor.hpp"

namespace bwnh {

// Labeled image set. images has dims (n, C, H, W).
struct Dataset {
  Tensor images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return size() == 0 ? 0 : images.size() / size(); }

  Dataset subset(const std::vector<std::size_t>& indices) const;
};

// Seeded 10-class digit images: a 5x7 glyph upscaled 2x, placed at a random
// offset on a side x side canvas, with stroke-intensity jitter and Gaussian
// pixel noise. Labels cycle 0..9 so every prefix is close to balanced.
Dataset make_synthetic_digits(std::size_t count, std::uint64_t seed, std::uint32_t side = 16);

// On disk: one tensor file per image (img_00000.tensor, dims (C, H, W)) plus
// labels.tensor, an F32 vector of class indices.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace bwnh
