#include "bwnh/dataset.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <random>
#include <stdexcept>
#include <string>

namespace bwnh {

namespace fs = std::filesystem;

namespace {

// 5x7 bitmap font, one row per string, '#' = ink.
constexpr std::array<std::array<const char*, 7>, 10> kGlyphs = {{
    {" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "},
    {"  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "},
    {" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"},
    {"#####", "   # ", "  #  ", "   # ", "    #", "#   #", " ### "},
    {"   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "},
    {"#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "},
    {"  ## ", " #   ", "#    ", "#### ", "#   #", "#   #", " ### "},
    {"#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "},
    {" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "},
    {" ### ", "#   #", "#   #", " ####", "    #", "   # ", " ##  "},
}};

std::string image_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%05zu.tensor", i);
  return buf;
}

}  // namespace

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  const std::size_t per = image_size();
  auto dims = images.dims();
  dims[0] = static_cast<std::uint32_t>(indices.size());
  std::vector<float> values(indices.size() * per);
  std::vector<int> lab(indices.size());
  const auto src = images.f32();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto i = indices[k];
    if (i >= size()) throw std::out_of_range("dataset index out of range");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(i * per), per,
                values.begin() + static_cast<std::ptrdiff_t>(k * per));
    lab[k] = labels[i];
  }
  return {Tensor(std::move(dims), std::move(values)), std::move(lab)};
}

Dataset make_synthetic_digits(std::size_t count, std::uint64_t seed, std::uint32_t side) {
  if (count == 0) throw std::invalid_argument("dataset must be nonempty");
  if (side < 14) throw std::invalid_argument("canvas must be at least 14 pixels");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::uint32_t> dx(0, side - 10), dy(0, side - 14);
  std::uniform_real_distribution<float> ink(0.6f, 1.0f);
  std::normal_distribution<float> noise(0.0f, 0.25f);

  std::vector<float> pixels(count * side * side, 0.0f);
  std::vector<int> labels(count);
  for (std::size_t n = 0; n < count; ++n) {
    const int digit = static_cast<int>(n % 10);
    labels[n] = digit;
    const auto ox = dx(rng), oy = dy(rng);
    const float level = ink(rng);
    float* img = pixels.data() + n * side * side;
    for (std::uint32_t r = 0; r < 7; ++r) {
      for (std::uint32_t c = 0; c < 5; ++c) {
        if (kGlyphs[digit][r][c] != '#') continue;
        for (std::uint32_t a = 0; a < 2; ++a) {
          for (std::uint32_t b = 0; b < 2; ++b) {
            img[(oy + 2 * r + a) * side + ox + 2 * c + b] = level;
          }
        }
      }
    }
    for (std::uint32_t p = 0; p < side * side; ++p) img[p] += noise(rng);
  }
  return {Tensor({static_cast<std::uint32_t>(count), 1, side, side}, std::move(pixels)),
          std::move(labels)};
}

void write_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  const auto& d = ds.images.dims();
  const std::vector<std::uint32_t> img_dims(d.begin() + 1, d.end());
  const std::size_t per = ds.image_size();
  const auto src = ds.images.f32();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    std::vector<float> v(src.begin() + static_cast<std::ptrdiff_t>(i * per),
                         src.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    write_tensor(Tensor(img_dims, std::move(v)), dir / image_name(i));
  }
  const std::vector<std::uint32_t> label_dims{static_cast<std::uint32_t>(ds.size())};
  write_tensor(Tensor(label_dims, std::vector<float>(ds.labels.begin(), ds.labels.end())),
               dir / "labels.tensor");
}

Dataset read_dataset(const fs::path& dir) {
  const auto label_path = dir / "labels.tensor";
  if (!fs::exists(label_path)) {
    throw std::runtime_error("dataset has no labels.tensor: " + dir.string());
  }
  const auto lt = read_tensor(label_path);
  const auto lv = lt.f32();
  if (lv.empty()) throw std::runtime_error("empty dataset: " + dir.string());

  std::vector<int> labels(lv.size());
  std::vector<float> pixels;
  std::vector<std::uint32_t> img_dims;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    if (lv[i] < 0 || lv[i] != std::floor(lv[i])) {
      throw std::runtime_error("labels must be nonnegative integers");
    }
    labels[i] = static_cast<int>(lv[i]);
    const auto img = read_tensor(dir / image_name(i));
    if (i == 0) {
      img_dims = img.dims();
    } else if (img.dims() != img_dims) {
      throw std::runtime_error("image " + std::to_string(i) + " has inconsistent dims");
    }
    const auto v = img.f32();
    pixels.insert(pixels.end(), v.begin(), v.end());
  }
  std::vector<std::uint32_t> dims{static_cast<std::uint32_t>(labels.size())};
  dims.insert(dims.end(), img_dims.begin(), img_dims.end());
  return {Tensor(std::move(dims), std::move(pixels)), std::move(labels)};
}

}  // namespace bwnh
