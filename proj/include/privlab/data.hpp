#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "privlab/tensor.hpp"

namespace privlab {

/// Labeled samples with pixel values in [0, 1]; samples is N x input_dim.
struct Dataset {
  Tensor samples;
  std::vector<int> labels;
  std::string name;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t input_dim() const noexcept { return samples.cols(); }
  /// max label + 1
  std::size_t classes() const;
  /// Samples and labels at the given indices, in order.
  Dataset subset(const std::vector<std::size_t>& indices) const;
  /// Throws ValidationError if counts differ or a pixel leaves [0, 1].
  void validate() const;
};

/// Per-client sample indices into one Dataset.
struct Partition {
  std::vector<std::vector<std::size_t>> assignments;
  double concentration = 1.0;

  /// Disjoint, in range, every client non-empty.
  void validate(std::size_t dataset_size) const;
};

// IDX (MNIST) files: big-endian u32 magic 0x00000803 / 0x00000801, counts, then bytes.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
Dataset read_idx(std::istream& images, std::istream& labels);
/// Pixels are written as round(255 * value); labels must fit in a byte.
void write_idx(const Dataset& ds, std::size_t image_rows, std::size_t image_cols,
               std::ostream& images, std::ostream& labels);

// CSV with header `label,p0,p1,...`, one row per sample.
Dataset read_csv_dataset(std::istream& in, const std::string& name = "csv");
void write_csv_dataset(std::ostream& out, const Dataset& ds);

/// Class templates plus seeded noise on a side x side grid.
Dataset synth_digits(std::uint64_t seed, std::size_t per_class, std::size_t side,
                     std::size_t classes);

/// Dirichlet label-proportion split across `clients`.
Partition partition_dirichlet(const Dataset& ds, std::size_t clients, double concentration,
                              std::uint64_t seed);

}  // namespace privlab
