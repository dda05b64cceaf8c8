#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "pwclo/geom.hpp"
#include "pwclo/layers.hpp"
#include "pwclo/tensor.hpp"

namespace pwclo::pc {

/// Point coordinates (n x 3, meters) with optional per-point features (n x c).
struct PointCloud {
  ad::Tensor coords{ad::Shape{0, 3}};
  std::optional<ad::Tensor> features;

  std::size_t size() const { return coords.dim(0); }
  geom::Vec3 point(std::size_t i) const { return {coords[3 * i], coords[3 * i + 1], coords[3 * i + 2]}; }

  static PointCloud from_points(std::span<const geom::Vec3> points);
  std::vector<geom::Vec3> points() const;
};

/// Row-major (rows x k) reference indices, each row sorted by distance then index.
struct NeighborIndex {
  std::size_t rows = 0;
  std::size_t k = 0;
  std::vector<std::size_t> indices;

  std::size_t at(std::size_t row, std::size_t j) const { return indices[row * k + j]; }
};

/// Greedy max-min subset of `m` rows of an (n x 3) coordinate tensor starting
/// at `start`. Ties go to the lowest index.
std::vector<std::size_t> farthest_point_sample(const ad::Tensor& coords, std::size_t m, std::size_t start = 0);

/// Exact Euclidean k nearest neighbours of every query row among reference rows.
NeighborIndex knn(const ad::Tensor& query, const ad::Tensor& reference, std::size_t k);

/// Uniform subsample without replacement when the cloud has at least `n`
/// points, with replacement otherwise.
PointCloud random_sample(const PointCloud& pc, std::size_t n, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Differentiable operators on tape-resident clouds.

struct CloudVar {
  ad::Var xyz;
  std::optional<ad::Var> features;

  std::size_t size() const { return xyz.dim(0); }
  std::size_t feature_width() const { return features ? features->dim(1) : 0; }
};

CloudVar to_tape(ad::Tape& tape, const PointCloud& pc);

/// Input width a set conv MLP needs for clouds carrying `feature_width` channels.
inline std::size_t set_conv_input_width(std::size_t feature_width) { return 3 + 2 * feature_width; }

struct SetConvResult {
  CloudVar cloud;
  std::vector<std::size_t> centers;
};

/// Set conv: FPS-sample `m` centers (or use `centers` when given), gather `k`
/// neighbours, encode (x_k - x_i) + f_k + f_i with `mlp`, max-pool over k.
SetConvResult set_conv(ad::Tape& tape, const ad::ParameterStore& store, const CloudVar& in, std::size_t m,
                       std::size_t k, const Mlp& mlp, std::optional<std::span<const std::size_t>> centers = {},
                       std::size_t fps_start = 0);

/// Set upconv: features from a sparse cloud to every point of a dense one.
/// `gather_mlp` takes 3 + sparse width; `fuse_mlp` takes its output plus the dense width.
ad::Var set_upconv(ad::Tape& tape, const ad::ParameterStore& store, const CloudVar& dense, const CloudVar& sparse,
                   std::size_t k, const Mlp& gather_mlp, const Mlp& fuse_mlp);

/// Neighbour-grouped inputs shared by the point operators: rows are
/// (query, neighbour) pairs in query-major order.
struct Grouping {
  ad::Var relative;  ///< neighbour - query, (rows*k x 3)
  NeighborIndex neighbors;
};

Grouping group_relative(ad::Var query_xyz, ad::Var reference_xyz, std::size_t k);

}  // namespace pwclo::pc
