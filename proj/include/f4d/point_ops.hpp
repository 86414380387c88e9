#pragma once

#include "f4d/mesh.hpp"

#include <cstddef>
#include <vector>

namespace f4d {

/// Greedy farthest point sampling. The first selected index is seed_index.
std::vector<std::size_t> fps(const PointSet& points, std::size_t n, std::size_t seed_index = 0);

struct KMeansResult {
    PointSet centroids;
    std::vector<std::size_t> assignment;
    /// Within-cluster sum of squares after each Lloyd iteration.
    std::vector<double> objective;
};

/// Lloyd iterations seeded at points[init[i]]. Empty clusters are re-seeded
/// to the point farthest from its assigned centroid.
KMeansResult kmeans(const PointSet& points, const std::vector<std::size_t>& init, int iters);

/// Exact K nearest neighbours of every query in base, ordered by distance
/// with ties broken by lower index. Uses a uniform grid over base.
std::vector<std::vector<std::size_t>> knn(const PointSet& queries, const PointSet& base,
                                          std::size_t k);

/// Uniform bucket grid over a fixed point set, reusable across queries.
class KnnGrid {
public:
    explicit KnnGrid(const PointSet& base);

    /// Appends the k nearest indices of q (distance, then index order).
    void query(const Vec3& q, std::size_t k, std::vector<std::size_t>& out) const;
    std::size_t size() const { return base_.size(); }

private:
    std::size_t cell_index(int i, int j, int k) const;

    PointSet base_;
    Vec3 origin_ = Vec3::Zero();
    double cell_ = 1.0;
    std::array<int, 3> dims_ = {1, 1, 1};
    std::vector<std::size_t> cell_start_;
    std::vector<std::size_t> items_;
};

} // namespace f4d
