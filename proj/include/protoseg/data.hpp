// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "protoseg/rng.hpp"
#include "protoseg/tensor.hpp"

namespace protoseg {

/// H x W grid of class ids.
struct SegMask {
  int height = 0;
  int width = 0;
  std::vector<int> labels;

  SegMask() = default;
  SegMask(int h, int w, int fill = 0) : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}

  int& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
  int at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return labels.size(); }
  int max_label() const;
  std::size_t count(int label) const;
  bool operator==(const SegMask&) const = default;
};

/// src = floor(dst * in / out) along each axis.
SegMask resize_nearest(const SegMask& mask, int out_h, int out_w);

/// 8-bit single-channel PNG I/O.
struct GrayImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;
};
void write_png(const std::filesystem::path& path, const GrayImage& image);
GrayImage read_png(const std::filesystem::path& path);

inline constexpr int kDefectClasses = 8;
const std::array<std::string, kDefectClasses + 1>& class_names();

struct DatasetMeta {
  int num_classes = kDefectClasses + 1;
  int image_size = 128;
  int count = 0;
  std::uint64_t seed = 42;
  /// Pixel fraction per class over the whole corpus.
  std::vector<double> class_frequencies;
  std::vector<int> train;
  std::vector<int> val;
  std::vector<int> test;

  void validate() const;
};

enum class Split { kTrain, kVal, kTest, kAll };
Split parse_split(const std::string& name);
std::string to_string(Split split);

/// Writes images/%05d.png, masks/%05d.png and meta.json under `root`.
/// Each image carries one primary defect (classes assigned round-robin),
/// sometimes a secondary one, on a textured background. Deterministic in
/// `seed`. Requires count >= 10 * num_classes.
DatasetMeta generate_synthetic_dataset(const std::filesystem::path& root, int count, int image_size,
                                       std::uint64_t seed);

struct Sample {
  int id = 0;
  /// (1, H, W, 1), intensities mapped to [-1, 1].
  Tensor image;
  SegMask mask;
  /// Pixel count per class id.
  std::vector<int> class_pixels;
};

class Dataset {
 public:
  const DatasetMeta& meta() const { return meta_; }
  const std::filesystem::path& root() const { return root_; }
  const std::vector<Sample>& samples() const { return samples_; }
  const Sample& sample(int id) const { return samples_.at(position_.at(id)); }
  std::size_t size() const { return samples_.size(); }

  /// Ids in `split` with at least `min_pixels` of class c.
  std::vector<int> images_with(int class_id, int min_pixels, Split split) const;
  std::vector<int> split_ids(Split split) const;
  /// class id -> ids of every image containing it.
  const std::map<int, std::vector<int>>& index() const { return index_; }

  friend Dataset load_dataset(const std::filesystem::path& root);

 private:
  DatasetMeta meta_;
  std::filesystem::path root_;
  std::vector<Sample> samples_;
  std::map<int, std::size_t> position_;
  std::map<int, std::vector<int>> index_;
};

/// Reads a dataset directory and validates every mask against meta.json.
Dataset load_dataset(const std::filesystem::path& root);

struct EpisodeSpec {
  int n_ways = 2;
  int k_shots = 5;
  int n_query = 1;
  /// Image-resolution pixels a sample needs for a class to count as present.
  int min_class_pixels = 50;

  void validate(int num_classes) const;
};

struct EpisodeSample {
  int image_id = 0;
  /// Dataset class the sample was drawn for (support only; 0 for queries).
  int source_class = 0;
  Tensor image;
  /// Labels in episode space {0..n}.
  SegMask mask;
};

struct Episode {
  int n_ways = 0;
  int k_shots = 0;
  /// Dataset ids of episode classes 1..n, in order.
  std::vector<int> classes;
  /// Support samples grouped by class: class 1 first, k per class.
  std::vector<EpisodeSample> support;
  std::vector<EpisodeSample> query;

  /// Episode id for a dataset class id (0 when not sampled).
  int episode_label(int dataset_class) const;
  Tensor support_images() const;
  Tensor query_images() const;
  std::vector<SegMask> support_masks() const;
  std::vector<SegMask> query_masks() const;
};

/// Draws n distinct defect classes uniformly, k support images per class and
/// n_query query images that contain at least min_class_pixels of some
/// episode class. Support and query images are disjoint; masks are relabeled
/// to episode space.
Episode sample_episode(const Dataset& dataset, Split split, const EpisodeSpec& spec, Rng& rng);

}  // namespace protoseg
