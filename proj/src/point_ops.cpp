#include "f4d/point_ops.hpp"

#include "f4d/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>

namespace f4d {

std::vector<std::size_t> fps(const PointSet& points, std::size_t n, std::size_t seed_index) {
    if (n < 1 || n > points.size()) {
        throw GeometryError("fps: n = " + std::to_string(n) + " out of range for " +
                            std::to_string(points.size()) + " points");
    }
    if (seed_index >= points.size()) {
        throw GeometryError("fps: seed index out of range");
    }
    std::vector<double> min_d(points.size(), std::numeric_limits<double>::infinity());
    std::vector<std::size_t> picked;
    picked.reserve(n);
    std::size_t cur = seed_index;
    for (std::size_t s = 0; s < n; ++s) {
        picked.push_back(cur);
        min_d[cur] = -1.0;
        std::size_t next = 0;
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < points.size(); ++i) {
            if (min_d[i] < 0.0) continue;
            min_d[i] = std::min(min_d[i], (points[i] - points[cur]).squaredNorm());
            if (min_d[i] > best) {
                best = min_d[i];
                next = i;
            }
        }
        cur = next;
    }
    return picked;
}

KMeansResult kmeans(const PointSet& points, const std::vector<std::size_t>& init, int iters) {
    if (init.empty()) {
        throw GeometryError("kmeans: empty initialisation");
    }
    KMeansResult res;
    for (auto i : init) {
        if (i >= points.size()) throw GeometryError("kmeans: init index out of range");
        res.centroids.push_back(points[i]);
    }
    const std::size_t k = init.size();
    res.assignment.assign(points.size(), 0);
    std::vector<std::size_t> nearest;
    for (int it = 0; it < iters; ++it) {
        const KnnGrid grid(res.centroids);
        std::vector<std::size_t> members(k, 0);
        for (std::size_t i = 0; i < points.size(); ++i) {
            nearest.clear();
            grid.query(points[i], 1, nearest);
            res.assignment[i] = nearest[0];
            ++members[nearest[0]];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (members[c] != 0) continue;
            std::size_t far = points.size();
            double far_d = -1.0;
            for (std::size_t i = 0; i < points.size(); ++i) {
                const auto a = res.assignment[i];
                if (members[a] < 2) continue;
                const double d = (points[i] - res.centroids[a]).squaredNorm();
                if (d > far_d) {
                    far_d = d;
                    far = i;
                }
            }
            if (far == points.size()) break; // fewer distinct points than clusters
            --members[res.assignment[far]];
            res.assignment[far] = c;
            members[c] = 1;
        }
        std::vector<Vec3> sums(k, Vec3::Zero());
        for (std::size_t i = 0; i < points.size(); ++i) {
            sums[res.assignment[i]] += points[i];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (members[c] > 0) res.centroids[c] = sums[c] / static_cast<double>(members[c]);
        }
        double wcss = 0.0;
        for (std::size_t i = 0; i < points.size(); ++i) {
            wcss += (points[i] - res.centroids[res.assignment[i]]).squaredNorm();
        }
        res.objective.push_back(wcss);
    }
    return res;
}

KnnGrid::KnnGrid(const PointSet& base) : base_(base) {
    if (base_.empty()) {
        throw GeometryError("knn: empty base point set");
    }
    const Aabb box = bounds(base_);
    const Vec3 ext = box.extent();
    const double side = std::cbrt(static_cast<double>(base_.size()) / 2.0);
    cell_ = std::max(ext.maxCoeff() / std::max(1.0, std::ceil(side)), 1e-12);
    for (int k = 0; k < 3; ++k) {
        dims_[k] = std::clamp(static_cast<int>(std::floor(ext[k] / cell_)) + 1, 1, 256);
    }
    origin_ = box.min;
    const std::size_t ncell = static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2];
    std::vector<std::size_t> cell_of(base_.size());
    cell_start_.assign(ncell + 1, 0);
    for (std::size_t i = 0; i < base_.size(); ++i) {
        int c[3];
        for (int k = 0; k < 3; ++k) {
            c[k] = std::clamp(static_cast<int>(std::floor((base_[i][k] - origin_[k]) / cell_)), 0,
                              dims_[k] - 1);
        }
        cell_of[i] = cell_index(c[0], c[1], c[2]);
        ++cell_start_[cell_of[i] + 1];
    }
    for (std::size_t c = 0; c < ncell; ++c) cell_start_[c + 1] += cell_start_[c];
    items_.resize(base_.size());
    std::vector<std::size_t> fill(cell_start_.begin(), cell_start_.end() - 1);
    for (std::size_t i = 0; i < base_.size(); ++i) items_[fill[cell_of[i]]++] = i;
}

std::size_t KnnGrid::cell_index(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims_[0]) * (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims_[1]) * k);
}

void KnnGrid::query(const Vec3& q, std::size_t k, std::vector<std::size_t>& out) const {
    if (k > base_.size()) {
        throw GeometryError("knn: K = " + std::to_string(k) + " exceeds base size " +
                            std::to_string(base_.size()));
    }
    if (k == 0) return;
    int c0[3];
    for (int a = 0; a < 3; ++a) {
        c0[a] = std::clamp(static_cast<int>(std::floor((q[a] - origin_[a]) / cell_)), 0, dims_[a] - 1);
    }
    const int max_r = std::max({dims_[0], dims_[1], dims_[2]});
    std::vector<std::pair<double, std::size_t>> cand;
    for (int r = 0; r <= max_r; ++r) {
        const int lo[3] = {std::max(c0[0] - r, 0), std::max(c0[1] - r, 0), std::max(c0[2] - r, 0)};
        const int hi[3] = {std::min(c0[0] + r, dims_[0] - 1), std::min(c0[1] + r, dims_[1] - 1),
                           std::min(c0[2] + r, dims_[2] - 1)};
        for (int z = lo[2]; z <= hi[2]; ++z) {
            for (int y = lo[1]; y <= hi[1]; ++y) {
                for (int x = lo[0]; x <= hi[0]; ++x) {
                    const int cheb = std::max({std::abs(x - c0[0]), std::abs(y - c0[1]), std::abs(z - c0[2])});
                    if (cheb != r) continue;
                    const auto c = cell_index(x, y, z);
                    for (auto s = cell_start_[c]; s < cell_start_[c + 1]; ++s) {
                        const auto idx = items_[s];
                        cand.emplace_back((base_[idx] - q).squaredNorm(), idx);
                    }
                }
            }
        }
        if (cand.size() >= k) {
            std::nth_element(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k - 1), cand.end());
            const double bound = r * cell_;
            if (cand[k - 1].first < bound * bound) break;
        }
    }
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
    for (std::size_t i = 0; i < k; ++i) out.push_back(cand[i].second);
}

std::vector<std::vector<std::size_t>> knn(const PointSet& queries, const PointSet& base,
                                          std::size_t k) {
    if (k > base.size()) {
        throw GeometryError("knn: K = " + std::to_string(k) + " exceeds base size " +
                            std::to_string(base.size()));
    }
    const KnnGrid grid(base);
    std::vector<std::vector<std::size_t>> out(queries.size());
    for (std::size_t i = 0; i < queries.size(); ++i) {
        out[i].reserve(k);
        grid.query(queries[i], k, out[i]);
    }
    return out;
}

} // namespace f4d
