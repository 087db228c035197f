// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fpcc/tensor.hpp"

namespace fpcc {

enum class Split { train, test };

std::string split_name(Split split);

/// Images [N, C, H, W] (or [N, D]) with values in [0, 1] and labels in [0, K).
/// The constructor checks both invariants and throws ConsistencyError.
class Dataset {
 public:
  Dataset(Tensor images, std::vector<std::size_t> labels, std::size_t classes,
          Split split = Split::train);

  const Tensor& images() const { return images_; }
  const std::vector<std::size_t>& labels() const { return labels_; }
  std::size_t classes() const { return classes_; }
  Split split() const { return split_; }
  std::size_t size() const { return labels_.size(); }
  Shape sample_shape() const;

  /// First `n` samples (all of them when n >= size()).
  Dataset head(std::size_t n) const;

  friend bool operator==(const Dataset&, const Dataset&) = default;

 private:
  Tensor images_;
  std::vector<std::size_t> labels_;
  std::size_t classes_;
  Split split_;
};

/// IDX image file (magic 0x00000803, u8 pixels, N x H x W) plus IDX label
/// file (0x00000801). Pixels are scaled by 1/255 into [N, 1, H, W].
/// `classes` of 0 infers K as max label + 1.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t classes = 0, Split split = Split::train);

/// Inverse of load_idx; pixels are rounded to the nearest byte.
void write_idx(const Dataset& data, const std::filesystem::path& images,
               const std::filesystem::path& labels);

enum class PixelScale { byte, unit };

struct CsvLayout {
  Shape sample_shape;  ///< e.g. {3, 32, 32}; pixels per row = product
  std::size_t classes = 10;
  PixelScale scale = PixelScale::byte;
  bool header = false;  ///< skip the first line
};

/// One sample per line: label, then pixels in row-major sample order.
Dataset load_csv(const std::filesystem::path& path, const CsvLayout& layout,
                 Split split = Split::train);

/// Gaussian clusters around seeded class means in [0.2, 0.8], clamped to
/// [0, 1]. Samples are grouped by class.
Dataset synthetic_blobs(std::size_t classes, std::size_t per_class, const Shape& sample_shape,
                        double spread, std::uint64_t seed);

struct GlyphOptions {
  double contrast_lo = 0.2, contrast_hi = 0.3;  ///< stroke intensity above background
  double background_lo = 0.3, background_hi = 0.5;
  double noise = 0.08;  ///< per-pixel Gaussian std
};

/// Desk dataset: ten low-contrast 28x28 stroke digits under random rotation,
/// scale, shear, shift and thickness. Shuffled, `per_class` of each class.
Dataset glyph_digits(std::size_t per_class, std::uint64_t seed, Split split = Split::train,
                     const GlyphOptions& options = {});

struct Batch {
  Tensor images;
  std::vector<std::size_t> labels;
};

/// Order of one epoch: identity without shuffle, else a permutation drawn
/// from `seed`.
std::vector<std::size_t> batch_order(std::size_t n, std::uint64_t seed, bool shuffle);

/// Splits one epoch into batches of `batch_size`; the last one may be partial.
std::vector<Batch> batches(const Dataset& data, std::size_t batch_size, std::uint64_t seed,
                           bool shuffle);

}  // namespace fpcc
