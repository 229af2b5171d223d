#include "omniflux/teachers.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "omniflux/binary_io.hpp"
#include "omniflux/errors.hpp"
#include "omniflux/random.hpp"

namespace omniflux {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

void check_pixels(const Tensor& pixels, std::size_t count) {
  if (pixels.rank() != 2 || pixels.dim(1) != count) {
    throw ConfigError("teacher input must be [B, " + std::to_string(count) + "]");
  }
}

}  // namespace

FeatureTeacher::FeatureTeacher(const TeacherConfig& config)
    : projection_(Tensor::zeros({config.feature_dim, config.pixel_count})) {
  Rng rng = derive_rng(config.seed, 1);
  std::normal_distribution<double> normal(0.0, 4.0 / std::sqrt(static_cast<double>(config.pixel_count)));
  auto w = projection_.data();
  const std::size_t n = config.pixel_count;
  for (std::size_t r = 0; r < config.feature_dim; ++r) {
    double mean = 0;
    for (std::size_t c = 0; c < n; ++c) mean += w[r * n + c] = normal(rng);
    mean /= static_cast<double>(n);
    for (std::size_t c = 0; c < n; ++c) w[r * n + c] -= mean;
  }
}

Tensor FeatureTeacher::features(const Tensor& pixels) const {
  check_pixels(pixels, projection_.dim(1));
  const std::size_t b = pixels.dim(0), f = projection_.dim(0), n = projection_.dim(1);
  Tensor out = Tensor::zeros({b, f});
  Map(out.data().data(), b, f) =
      (ConstMap(pixels.data().data(), b, n) * ConstMap(projection_.data().data(), f, n).transpose())
          .array()
          .tanh()
          .matrix();
  return out;
}

std::vector<double> FeatureTeacher::feature(std::span<const double> pixels) const {
  return features(Tensor::from({1, pixels.size()}, {pixels.begin(), pixels.end()})).to_vector();
}

ClusterTeacher::ClusterTeacher(const TeacherConfig& config)
    : centroids_(Tensor::zeros({config.clusters, config.pixel_count})), temperature_(config.temperature) {
  if (!(config.temperature > 0)) throw ConfigError("cluster teacher temperature must be positive");
  Rng rng = derive_rng(config.seed, 2);
  for (double& v : centroids_.data()) v = uniform01(rng);
}

Tensor ClusterTeacher::distributions(const Tensor& pixels) const {
  check_pixels(pixels, centroids_.dim(1));
  const std::size_t b = pixels.dim(0), k = centroids_.dim(0), n = centroids_.dim(1);
  ConstMap x(pixels.data().data(), b, n), c(centroids_.data().data(), k, n);
  RowMat d2 = (-2.0 * x * c.transpose()).rowwise() + c.rowwise().squaredNorm().transpose();
  d2.colwise() += x.rowwise().squaredNorm();

  Tensor out = Tensor::zeros({b, k});
  auto o = out.data();
  for (std::size_t i = 0; i < b; ++i) {
    double best = -d2(i, 0);
    for (std::size_t j = 1; j < k; ++j) best = std::max(best, -d2(i, j));
    double total = 0;
    for (std::size_t j = 0; j < k; ++j) total += o[i * k + j] = std::exp((-d2(i, j) - best) / temperature_);
    for (std::size_t j = 0; j < k; ++j) o[i * k + j] /= total;
  }
  return out;
}

std::vector<double> ClusterTeacher::distribution(std::span<const double> pixels) const {
  return distributions(Tensor::from({1, pixels.size()}, {pixels.begin(), pixels.end()})).to_vector();
}

void write_teacher_cache(const std::filesystem::path& path, std::span<const TeacherRecord> records) {
  ByteWriter w;
  for (const auto& rec : records) {
    if (rec.feature.size() != records.front().feature.size() ||
        rec.distribution.size() != records.front().distribution.size()) {
      throw ContractError("teacher cache records must share dimensions");
    }
    w.u64(rec.record_id);
    for (float v : rec.feature) w.f32(v);
    for (float v : rec.distribution) w.f32(v);
  }
  write_file_atomic(path, w.buffer());
}

std::vector<TeacherRecord> read_teacher_cache(const std::filesystem::path& path, std::size_t feature_dim,
                                              std::size_t clusters) {
  const std::string data = read_file(path);
  ByteReader r(data, path.string());
  const std::size_t record_bytes = 8 + 4 * (feature_dim + clusters);
  if (data.size() % record_bytes != 0) {
    r.bytes(data.size() - data.size() % record_bytes);
    r.fail("trailing partial record");
  }
  std::vector<TeacherRecord> out(data.size() / record_bytes);
  for (auto& rec : out) {
    rec.record_id = r.u64();
    rec.feature.resize(feature_dim);
    rec.distribution.resize(clusters);
    for (float& v : rec.feature) v = r.f32();
    for (float& v : rec.distribution) v = r.f32();
  }
  return out;
}

}  // namespace omniflux
