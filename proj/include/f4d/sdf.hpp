#pragma once

#include "f4d/mesh.hpp"

#include <array>
#include <cstddef>
#include <limits>
#include <memory>
#include <vector>

namespace f4d {

/// Exact point-to-mesh distance and inside/outside classification over a
/// bounding-volume hierarchy of the triangles.
class MeshDistance {
public:
    explicit MeshDistance(const TriMesh& mesh);
    ~MeshDistance();
    MeshDistance(MeshDistance&&) noexcept;
    MeshDistance& operator=(MeshDistance&&) noexcept;

    /// Distance to the nearest triangle. Returns +inf when nothing lies
    /// closer than max_dist.
    double unsigned_distance(const Vec3& p,
                             double max_dist = std::numeric_limits<double>::infinity()) const;

    /// Majority vote of ray-crossing parity over seven fixed directions.
    bool inside(const Vec3& p) const;

    /// Negative inside.
    double signed_distance(const Vec3& p) const;

    /// Crossing count of the ray p + t·dir, t > 0.
    int crossings(const Vec3& p, const Vec3& dir) const;

    const Aabb& box() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// Distance from p to triangle (a, b, c).
double point_triangle_distance(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

struct SdfGrid {
    Vec3 origin = Vec3::Zero();
    double voxel_size = 1.0;
    std::array<int, 3> dims = {1, 1, 1};
    std::vector<double> values;

    std::size_t size() const {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }
    std::size_t index(int i, int j, int k) const {
        return static_cast<std::size_t>(i) +
               static_cast<std::size_t>(dims[0]) * (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims[1]) * k);
    }
    Vec3 center(int i, int j, int k) const {
        return origin + voxel_size * Vec3(i + 0.5, j + 0.5, k + 0.5);
    }
    Vec3 center(std::size_t flat) const;
    /// Throws GeometryError on bad dims or value count.
    void validate() const;
};

/// Voxel lattice covering the mesh: ceil(extent / s) cells per axis plus
/// ceil(padding / s) cells on each side, centered on the bounding box.
SdfGrid grid_layout(const Aabb& box, double voxel_size, double padding);

SdfGrid sdf_from_mesh(const TriMesh& mesh, double voxel_size, double padding);

/// Centers with φ ≤ 0. Throws GeometryError("empty interior") when none.
PointSet interior_centers(const SdfGrid& sdf);

/// Centers with |φ| ≤ tau. Throws GeometryError when tau ≤ 0 or the set is empty.
PointSet shell_centers(const SdfGrid& sdf, double tau);

/// |shell_centers| for voxel size s and threshold tau without building the
/// full grid; only voxels near some triangle are measured.
std::size_t count_shell_centers(const TriMesh& mesh, const MeshDistance& dist, double voxel_size,
                                double tau);

/// Padding used by the shell pipeline for a given voxel size and threshold.
inline double shell_padding(double voxel_size, double tau) { return tau + voxel_size; }

/// Binary search (in log space) for the voxel size whose shell count is
/// within ±10% of target_count, with tau = tau_factor·s. Throws
/// NumericError when no bracket is found or the mesh encloses no volume.
double voxel_size_search(const TriMesh& mesh, std::size_t target_count, double tau_factor = 0.5);

} // namespace f4d
