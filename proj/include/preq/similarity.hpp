#pragma once

// Exact minimum-neighbor distances over embedding rows, and repetition removal.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "preq/error.hpp"
#include "preq/parallel.hpp"

namespace preq {

enum class DistanceMetric { cosine, euclidean };

template <typename Scalar>
using EmbeddingVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using EmbeddingMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Nearest-neighbor summary of one row.
template <typename Scalar>
struct NeighborReport {
  std::size_t index = 0;
  Scalar min_distance = 0;
  std::size_t nearest = 0;
  /// Distance to the nearest row that is not an exact duplicate (+inf when none).
  Scalar min_distinct_distance = std::numeric_limits<Scalar>::infinity();
  /// Smallest row index of this row's exact-duplicate group (== index for unique rows).
  std::size_t group = 0;
};

/// Distances at or below this are exact duplicates and snap to 0. It bounds the rounding
/// error of a dot product of identical unit vectors of dimension `dim`.
template <typename Scalar>
Scalar duplicate_tolerance(Eigen::Index dim) {
  return Scalar(4) * static_cast<Scalar>(std::max<Eigen::Index>(dim, 1)) * std::numeric_limits<Scalar>::epsilon();
}

/// Distance between two vectors under `metric`. Cosine distance is 1 - cos(a, b).
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar distance(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b,
                                   DistanceMetric metric) {
  using Scalar = typename DerivedA::Scalar;
  if (metric == DistanceMetric::euclidean) return (a - b).norm();
  const Scalar d = Scalar(1) - a.dot(b) / (a.norm() * b.norm());
  return std::max(d, Scalar(0));
}

/// Rows scaled to unit L2 norm. Throws ContractViolation on a zero or non-finite row.
template <typename Derived>
EmbeddingMatrix<typename Derived::Scalar> normalized_rows(const Eigen::MatrixBase<Derived>& rows) {
  using Scalar = typename Derived::Scalar;
  EmbeddingMatrix<Scalar> out = rows;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const Scalar n = out.row(i).norm();
    if (!(n > Scalar(0)) || !std::isfinite(n)) {
      throw ContractViolation("embedding row " + std::to_string(i) + " has zero or non-finite norm");
    }
    out.row(i) /= n;
  }
  return out;
}

/// Stacks vectors into a matrix. Throws ContractViolation on a dimension mismatch.
template <typename Scalar>
EmbeddingMatrix<Scalar> stack_rows(std::span<const std::vector<Scalar>> vectors) {
  if (vectors.empty()) return {};
  const std::size_t dim = vectors.front().size();
  EmbeddingMatrix<Scalar> out(static_cast<Eigen::Index>(vectors.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    if (vectors[i].size() != dim) {
      throw ContractViolation("embedding " + std::to_string(i) + " has dimension " +
                              std::to_string(vectors[i].size()) + ", expected " + std::to_string(dim));
    }
    for (std::size_t k = 0; k < dim; ++k) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = vectors[i][k];
  }
  return out;
}

namespace detail {

inline std::size_t uf_find(std::vector<std::size_t>& parent, std::size_t x) {
  while (parent[x] != x) {
    parent[x] = parent[parent[x]];
    x = parent[x];
  }
  return x;
}

inline void uf_union(std::vector<std::size_t>& parent, std::size_t a, std::size_t b) {
  a = uf_find(parent, a);
  b = uf_find(parent, b);
  if (a == b) return;
  if (a < b) std::swap(a, b);
  parent[a] = b;  // the smaller index stays root
}

}  // namespace detail

/// For every row, the exact minimum distance to any other row.
///
/// Rows are processed in blocks of `block_rows` (cosine: one GEMM per block against all
/// rows), in parallel over `threads` workers; results do not depend on the thread count.
template <typename Derived>
std::vector<NeighborReport<typename Derived::Scalar>> min_neighbor_distances(
    const Eigen::MatrixBase<Derived>& rows, DistanceMetric metric = DistanceMetric::cosine,
    Eigen::Index block_rows = 256, int threads = 1) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index n = rows.rows();
  if (n < 2) throw ContractViolation("min_neighbor_distances needs at least two vectors");
  if (!rows.allFinite()) throw ContractViolation("embeddings contain non-finite values");
  if (block_rows < 1) block_rows = 1;

  EmbeddingMatrix<Scalar> x;
  if (metric == DistanceMetric::cosine) {
    x = normalized_rows(rows);
  } else {
    x = rows;
  }
  const Scalar tol = duplicate_tolerance<Scalar>(x.cols());
  const auto un = static_cast<std::size_t>(n);

  std::vector<NeighborReport<Scalar>> out(un);
  std::vector<std::pair<std::size_t, std::size_t>> dup_pairs;
  std::mutex dup_mu;
  const std::size_t blocks = static_cast<std::size_t>((n + block_rows - 1) / block_rows);

  parallel_for(blocks, threads, [&](std::size_t b) {
    const Eigen::Index r0 = static_cast<Eigen::Index>(b) * block_rows;
    const Eigen::Index len = std::min(block_rows, n - r0);
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dist(len, n);
    if (metric == DistanceMetric::cosine) {
      dist.noalias() = x.middleRows(r0, len) * x.transpose();
      dist = (Scalar(1) - dist.array()).max(Scalar(0)).matrix();
    } else {
      for (Eigen::Index i = 0; i < len; ++i) {
        dist.row(i) = (x.rowwise() - x.row(r0 + i)).rowwise().norm().transpose();
      }
    }
    std::vector<std::pair<std::size_t, std::size_t>> local_dups;
    for (Eigen::Index i = 0; i < len; ++i) {
      const Eigen::Index row = r0 + i;
      NeighborReport<Scalar> rep;
      rep.index = static_cast<std::size_t>(row);
      rep.group = rep.index;
      rep.min_distance = std::numeric_limits<Scalar>::infinity();
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == row) continue;
        Scalar d = dist(i, j);
        if (d <= tol) {
          d = Scalar(0);
          if (j > row) local_dups.emplace_back(rep.index, static_cast<std::size_t>(j));
        } else if (d < rep.min_distinct_distance) {
          rep.min_distinct_distance = d;
        }
        if (d < rep.min_distance) {
          rep.min_distance = d;
          rep.nearest = static_cast<std::size_t>(j);
        }
      }
      out[rep.index] = rep;
    }
    if (!local_dups.empty()) {
      std::lock_guard lock(dup_mu);
      dup_pairs.insert(dup_pairs.end(), local_dups.begin(), local_dups.end());
    }
  });

  std::vector<std::size_t> parent(un);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  for (const auto& [a, b] : dup_pairs) detail::uf_union(parent, a, b);
  for (std::size_t i = 0; i < un; ++i) out[i].group = detail::uf_find(parent, i);
  return out;
}

/// Indices kept by repetition removal, ascending.
///
/// A unique row is kept when its min_distance exceeds `threshold`. Of each exact-duplicate
/// group exactly one member (`representative[group]`, default: the group's smallest index)
/// survives, provided its distance to the nearest non-duplicate exceeds `threshold`.
template <typename Scalar>
std::vector<std::size_t> dedup_indices(std::span<const NeighborReport<Scalar>> reports, Scalar threshold,
                                       std::span<const std::size_t> representative = {}) {
  std::vector<std::size_t> group_size(reports.size(), 0);
  for (const auto& r : reports) {
    if (r.group >= reports.size()) throw ContractViolation("neighbor report group out of range");
    ++group_size[r.group];
  }
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    if (r.index != i) throw ContractViolation("neighbor reports must be ordered by index");
    if (group_size[r.group] <= 1) {
      if (r.min_distance > threshold) kept.push_back(i);
      continue;
    }
    const std::size_t rep = representative.empty() ? r.group : representative[r.group];
    if (rep == i && r.min_distinct_distance > threshold) kept.push_back(i);
  }
  return kept;
}

/// Neighbor report addressed by instance id.
struct IdNeighborReport {
  std::string instance_id;
  double min_distance = 0;
  std::string nearest_id;
  double min_distinct_distance = std::numeric_limits<double>::infinity();
  std::string representative_id;  // lowest id of the exact-duplicate group
};

/// Id-level reports for `ids[i]` <-> `rows.row(i)`.
template <typename Derived>
std::vector<IdNeighborReport> neighbor_reports(std::span<const std::string> ids,
                                               const Eigen::MatrixBase<Derived>& rows,
                                               DistanceMetric metric = DistanceMetric::cosine, int threads = 1) {
  if (ids.size() != static_cast<std::size_t>(rows.rows())) {
    throw ContractViolation("neighbor_reports: id and row counts differ");
  }
  const auto reps = min_neighbor_distances(rows, metric, 256, threads);
  std::vector<std::size_t> lowest(ids.size());
  std::iota(lowest.begin(), lowest.end(), std::size_t{0});
  for (const auto& r : reps) {
    if (ids[r.index] < ids[lowest[r.group]]) lowest[r.group] = r.index;
  }
  std::vector<IdNeighborReport> out;
  out.reserve(reps.size());
  for (const auto& r : reps) {
    out.push_back({ids[r.index], static_cast<double>(r.min_distance), ids[r.nearest],
                   static_cast<double>(r.min_distinct_distance), ids[lowest[r.group]]});
  }
  return out;
}

/// Ids kept by repetition removal, in input order. Duplicates are grouped by
/// representative_id; the member whose id equals it survives.
inline std::vector<std::string> dedup(std::span<const IdNeighborReport> reports, double threshold) {
  std::vector<std::string> kept;
  std::map<std::string_view, std::size_t> counts;
  for (const auto& r : reports) ++counts[r.representative_id];
  for (const auto& r : reports) {
    if (counts[r.representative_id] <= 1) {
      if (r.min_distance > threshold) kept.push_back(r.instance_id);
    } else if (r.instance_id == r.representative_id && r.min_distinct_distance > threshold) {
      kept.push_back(r.instance_id);
    }
  }
  return kept;
}

}  // namespace preq
