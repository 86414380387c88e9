#pragma once

#include "f4d/quat.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <vector>

namespace f4d {

using PointSet = std::vector<Vec3>;
using Face = std::array<std::uint32_t, 3>;

struct Aabb {
    Vec3 min = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 max = Vec3::Constant(-std::numeric_limits<double>::infinity());

    void extend(const Vec3& p) {
        min = min.cwiseMin(p);
        max = max.cwiseMax(p);
    }
    void extend(const Aabb& b) {
        min = min.cwiseMin(b.min);
        max = max.cwiseMax(b.max);
    }
    Vec3 center() const { return 0.5 * (min + max); }
    Vec3 extent() const { return max - min; }
    double diagonal() const { return extent().norm(); }
    bool empty() const { return !(min.x() <= max.x()); }
};

Aabb bounds(const PointSet& points);

struct TriMesh {
    std::vector<Vec3> vertices;
    std::vector<Face> faces;

    /// Throws GeometryError on empty meshes and out-of-range indices.
    void validate() const;
    Aabb bounds() const;
    /// Signed enclosed volume (divergence theorem); positive for outward winding.
    double signed_volume() const;
};

TriMesh make_box(const Vec3& lo, const Vec3& hi);
TriMesh make_icosphere(double radius, int subdivisions);
/// A single square of side 2 in the z = 0 plane; encloses no volume.
TriMesh make_flat_quad();

/// OBJ (v/f records) or binary little-endian PLY, chosen by extension.
TriMesh read_mesh(const std::filesystem::path& path);
TriMesh read_obj(const std::filesystem::path& path);
TriMesh read_ply(const std::filesystem::path& path);

/// Binary little-endian PLY, float32 vertices and uint32 face lists.
void write_ply_mesh(const std::filesystem::path& path, const TriMesh& mesh);
/// Binary little-endian PLY with float32 coordinates only.
void write_ply_points(const std::filesystem::path& path, const PointSet& points);

} // namespace f4d
