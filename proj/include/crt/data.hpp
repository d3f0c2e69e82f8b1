#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "crt/tensor.hpp"

namespace crt::data {

/// Labelled inputs scaled to [0, 1]. `inputs` is [N, sample shape...].
struct Dataset {
  Tensor inputs;
  std::vector<std::uint32_t> labels;
  std::size_t num_classes = 0;
  std::string name;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const;
  /// One input with the sample shape (no batch dimension).
  Tensor sample(std::size_t index) const;
  /// Inputs at `indices` stacked into a batch.
  Tensor gather(std::span<const std::size_t> indices) const;

  /// Throws FormatError if a label is out of range, an input lies outside
  /// [0, 1], or the input and label counts disagree.
  void validate() const;
};

/// MNIST-family IDX pair (images magic 0x00000803, labels magic 0x00000801).
/// Images become [N, 1, rows, cols] scaled by 1/255.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::size_t num_classes = 10);

/// CIFAR-10 binary batches: 3073-byte records of one label byte followed by
/// 3072 channel-major pixel bytes. Inputs become [N, 3, 32, 32].
Dataset load_cifar10_binary(std::span<const std::filesystem::path> batch_paths);

/// K Gaussian clusters around the vertices of a scaled simplex embedded in the
/// first K coordinates of [0, 1]^d (remaining coordinates centred at 0.5),
/// clamped into [0, 1]. Sample i has label i % K. Requires 2 <= K <= d.
Dataset synth_blobs(std::size_t num_classes, std::size_t dim, std::size_t per_class, double spread,
                    std::uint64_t seed);

/// Centre of class `k` used by synth_blobs.
std::vector<double> synth_blob_center(std::size_t num_classes, std::size_t dim, std::size_t k);

Dataset subset(const Dataset& data, std::span<const std::size_t> indices);

// Fixture format (little-endian):
//   "CRTDATA1", u32 num_classes, str name (u32 length + bytes),
//   u32 rank, u64 dims[rank] (sample shape), u64 N, u32 labels[N], f64 inputs[N * prod(dims)]
std::string serialize_fixture(const Dataset& data);
Dataset deserialize_fixture(std::string_view bytes);
void write_fixture(const std::filesystem::path& path, const Dataset& data);
Dataset load_fixture(const std::filesystem::path& path);

}  // namespace crt::data
