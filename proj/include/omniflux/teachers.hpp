#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "omniflux/tensor.hpp"

namespace omniflux {

struct TeacherConfig {
  std::size_t pixel_count = 32 * 32;
  std::size_t feature_dim = 32;
  std::size_t clusters = 16;
  double temperature = 10.0;
  std::uint64_t seed = 0x7ea;  // kept apart from the model seed
};

/// Frozen r(v) = tanh(W · pixels). Rows of W are zero-mean, so flat images
/// (including the grey placeholder) map to the zero vector.
class FeatureTeacher {
 public:
  explicit FeatureTeacher(const TeacherConfig& config);

  std::vector<double> feature(std::span<const double> pixels) const;
  // pixels [B, pixel_count] -> [B, feature_dim], never requires grad.
  Tensor features(const Tensor& pixels) const;

  const Tensor& projection() const { return projection_; }  // [feature_dim, pixel_count]

 private:
  Tensor projection_;
};

/// Frozen c~(v) = softmax_k(-|pixels - c_k|^2 / T).
class ClusterTeacher {
 public:
  explicit ClusterTeacher(const TeacherConfig& config);

  std::vector<double> distribution(std::span<const double> pixels) const;
  Tensor distributions(const Tensor& pixels) const;

  const Tensor& centroids() const { return centroids_; }  // [clusters, pixel_count]
  double temperature() const { return temperature_; }

 private:
  Tensor centroids_;
  double temperature_;
};

struct Teachers {
  explicit Teachers(const TeacherConfig& config) : config(config), feature(config), cluster(config) {}

  TeacherConfig config;
  FeatureTeacher feature;
  ClusterTeacher cluster;
};

struct TeacherRecord {
  std::uint64_t record_id = 0;
  std::vector<float> feature;
  std::vector<float> distribution;
};

// Headerless little-endian records: u64 id, f32[feature_dim], f32[clusters].
void write_teacher_cache(const std::filesystem::path& path, std::span<const TeacherRecord> records);
std::vector<TeacherRecord> read_teacher_cache(const std::filesystem::path& path, std::size_t feature_dim,
                                              std::size_t clusters);

}  // namespace omniflux
