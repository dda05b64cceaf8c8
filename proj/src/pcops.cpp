#include "pwclo/pcops.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

namespace pwclo::pc {

PointCloud PointCloud::from_points(std::span<const geom::Vec3> points) {
  PointCloud pc;
  pc.coords = ad::Tensor(ad::Shape{points.size(), 3});
  for (std::size_t i = 0; i < points.size(); ++i)
    for (std::size_t j = 0; j < 3; ++j) pc.coords[3 * i + j] = points[i][j];
  return pc;
}

std::vector<geom::Vec3> PointCloud::points() const {
  std::vector<geom::Vec3> out(size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = point(i);
  return out;
}

namespace {

void require_xyz(const ad::Tensor& t, const char* what) {
  if (t.rank() != 2 || t.dim(1) != 3) {
    throw ad::ShapeError(std::string(what) + " must be (n, 3), got " + ad::shape_str(t.shape()));
  }
}

double sq_dist(const double* a, const double* b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

}  // namespace

std::vector<std::size_t> farthest_point_sample(const ad::Tensor& coords, std::size_t m, std::size_t start) {
  require_xyz(coords, "FPS coordinates");
  const std::size_t n = coords.dim(0);
  if (m < 1 || m > n) {
    throw std::invalid_argument("FPS count " + std::to_string(m) + " not in [1, " + std::to_string(n) + "]");
  }
  if (start >= n) throw std::out_of_range("FPS start index out of range");
  const double* p = coords.data().data();
  std::vector<double> min_d(n, std::numeric_limits<double>::infinity());
  std::vector<std::size_t> chosen;
  chosen.reserve(m);
  std::size_t current = start;
  for (std::size_t s = 0; s < m; ++s) {
    chosen.push_back(current);
    min_d[current] = -1.0;
    std::size_t best = n;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (min_d[i] < 0.0) continue;
      min_d[i] = std::min(min_d[i], sq_dist(p + 3 * i, p + 3 * current));
      if (min_d[i] > best_d) {
        best_d = min_d[i];
        best = i;
      }
    }
    current = best;
  }
  return chosen;
}

NeighborIndex knn(const ad::Tensor& query, const ad::Tensor& reference, std::size_t k) {
  require_xyz(query, "knn query");
  require_xyz(reference, "knn reference");
  const std::size_t nq = query.dim(0), nr = reference.dim(0);
  if (k < 1 || k > nr) {
    throw std::invalid_argument("knn k=" + std::to_string(k) + " exceeds reference size " + std::to_string(nr));
  }
  NeighborIndex out{nq, k, std::vector<std::size_t>(nq * k)};
  const double* q = query.data().data();
  const double* r = reference.data().data();
  std::vector<std::pair<double, std::size_t>> cand(nr);
  for (std::size_t i = 0; i < nq; ++i) {
    for (std::size_t j = 0; j < nr; ++j) cand[j] = {sq_dist(q + 3 * i, r + 3 * j), j};
    if (k < nr) {
      std::nth_element(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k - 1), cand.end());
    }
    std::sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k));
    for (std::size_t j = 0; j < k; ++j) out.indices[i * k + j] = cand[j].second;
  }
  return out;
}

PointCloud random_sample(const PointCloud& pc, std::size_t n, std::uint64_t seed) {
  const std::size_t size = pc.size();
  if (size == 0) throw std::invalid_argument("cannot sample from an empty point cloud");
  if (n < 1) throw std::invalid_argument("sample count must be positive");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> pick(n);
  if (size >= n) {
    std::vector<std::size_t> perm(size);
    std::iota(perm.begin(), perm.end(), 0);
    // partial Fisher-Yates; explicit modulo keeps streams portable
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng() % (size - i));
      std::swap(perm[i], perm[j]);
    }
    std::copy(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n), pick.begin());
  } else {
    for (auto& p : pick) p = static_cast<std::size_t>(rng() % size);
  }
  PointCloud out;
  out.coords = ad::Tensor(ad::Shape{n, 3});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < 3; ++j) out.coords[3 * i + j] = pc.coords[3 * pick[i] + j];
  if (pc.features) {
    const std::size_t c = pc.features->dim(1);
    ad::Tensor f(ad::Shape{n, c});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) f[c * i + j] = (*pc.features)[c * pick[i] + j];
    out.features = std::move(f);
  }
  return out;
}

// ---------------------------------------------------------------------------

CloudVar to_tape(ad::Tape& tape, const PointCloud& pc) {
  CloudVar c{tape.constant(pc.coords), std::nullopt};
  if (pc.features) c.features = tape.constant(*pc.features);
  return c;
}

Grouping group_relative(ad::Var query_xyz, ad::Var reference_xyz, std::size_t k) {
  Grouping g{ad::Var{}, knn(query_xyz.value(), reference_xyz.value(), k)};
  g.relative = ad::sub(ad::gather_rows(reference_xyz, g.neighbors.indices), ad::repeat_rows(query_xyz, k));
  return g;
}

SetConvResult set_conv(ad::Tape& tape, const ad::ParameterStore& store, const CloudVar& in, std::size_t m,
                       std::size_t k, const Mlp& mlp, std::optional<std::span<const std::size_t>> centers,
                       std::size_t fps_start) {
  const std::size_t width = in.feature_width();
  if (mlp.in_width() != set_conv_input_width(width)) {
    throw ad::ShapeError(mlp.prefix() + ": set conv MLP expects width " + std::to_string(mlp.in_width()) +
                         " but input builds " + std::to_string(set_conv_input_width(width)));
  }
  SetConvResult result;
  if (centers) {
    result.centers.assign(centers->begin(), centers->end());
    m = result.centers.size();
  } else {
    result.centers = farthest_point_sample(in.xyz.value(), m, fps_start);
  }
  ad::Var center_xyz = ad::gather_rows(in.xyz, result.centers);
  Grouping g = group_relative(center_xyz, in.xyz, k);
  std::vector<ad::Var> parts{g.relative};
  if (in.features) {
    parts.push_back(ad::gather_rows(*in.features, g.neighbors.indices));
    parts.push_back(ad::repeat_rows(ad::gather_rows(*in.features, result.centers), k));
  }
  ad::Var grouped = parts.size() == 1 ? parts[0] : ad::concat(parts, 1);
  ad::Var encoded = mlp.apply(tape, store, grouped);
  ad::Var pooled = ad::max(ad::reshape(encoded, ad::Shape{m, k, mlp.out_width()}), 1);
  result.cloud = CloudVar{center_xyz, pooled};
  return result;
}

ad::Var set_upconv(ad::Tape& tape, const ad::ParameterStore& store, const CloudVar& dense, const CloudVar& sparse,
                   std::size_t k, const Mlp& gather_mlp, const Mlp& fuse_mlp) {
  if (!sparse.features) throw std::invalid_argument("set upconv needs sparse features");
  if (gather_mlp.in_width() != 3 + sparse.feature_width()) {
    throw ad::ShapeError(gather_mlp.prefix() + ": expects width " + std::to_string(gather_mlp.in_width()) +
                         ", input builds " + std::to_string(3 + sparse.feature_width()));
  }
  if (fuse_mlp.in_width() != gather_mlp.out_width() + dense.feature_width()) {
    throw ad::ShapeError(fuse_mlp.prefix() + ": expects width " + std::to_string(fuse_mlp.in_width()) +
                         ", input builds " + std::to_string(gather_mlp.out_width() + dense.feature_width()));
  }
  const std::size_t n = dense.size();
  Grouping g = group_relative(dense.xyz, sparse.xyz, k);
  ad::Var grouped = ad::concat({g.relative, ad::gather_rows(*sparse.features, g.neighbors.indices)}, 1);
  ad::Var encoded = gather_mlp.apply(tape, store, grouped);
  ad::Var pooled = ad::max(ad::reshape(encoded, ad::Shape{n, k, gather_mlp.out_width()}), 1);
  ad::Var fused = dense.features ? ad::concat({pooled, *dense.features}, 1) : pooled;
  return fuse_mlp.apply(tape, store, fused);
}

}  // namespace pwclo::pc
