#include "f4d/sdf.hpp"

#include "f4d/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace f4d {

namespace {

// Closest point on triangle, Ericson "Real-Time Collision Detection" 5.1.5.
Vec3 closest_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
    const Vec3 ab = b - a;
    const Vec3 ac = c - a;
    const Vec3 ap = p - a;
    const double d1 = ab.dot(ap);
    const double d2 = ac.dot(ap);
    if (d1 <= 0.0 && d2 <= 0.0) return a;
    const Vec3 bp = p - b;
    const double d3 = ab.dot(bp);
    const double d4 = ac.dot(bp);
    if (d3 >= 0.0 && d4 <= d3) return b;
    const double vc = d1 * d4 - d3 * d2;
    if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
        return a + (d1 / (d1 - d3)) * ab;
    }
    const Vec3 cp = p - c;
    const double d5 = ab.dot(cp);
    const double d6 = ac.dot(cp);
    if (d6 >= 0.0 && d5 <= d6) return c;
    const double vb = d5 * d2 - d1 * d6;
    if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
        return a + (d2 / (d2 - d6)) * ac;
    }
    const double va = d3 * d6 - d5 * d4;
    if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
        return b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b);
    }
    const double denom = 1.0 / (va + vb + vc);
    return a + ab * (vb * denom) + ac * (vc * denom);
}

double box_distance_sq(const Aabb& box, const Vec3& p) {
    const Vec3 d = (box.min - p).cwiseMax(p - box.max).cwiseMax(0.0);
    return d.squaredNorm();
}

bool ray_hits_box(const Aabb& box, const Vec3& o, const Vec3& inv_dir) {
    double tmin = 0.0;
    double tmax = std::numeric_limits<double>::infinity();
    for (int k = 0; k < 3; ++k) {
        double t1 = (box.min[k] - o[k]) * inv_dir[k];
        double t2 = (box.max[k] - o[k]) * inv_dir[k];
        if (t1 > t2) std::swap(t1, t2);
        tmin = std::max(tmin, t1);
        tmax = std::min(tmax, t2);
    }
    return tmin <= tmax;
}

// Möller–Trumbore, counting hits with t > 0.
bool ray_hits_triangle(const Vec3& o, const Vec3& d, const Vec3& a, const Vec3& b, const Vec3& c) {
    const Vec3 e1 = b - a;
    const Vec3 e2 = c - a;
    const Vec3 h = d.cross(e2);
    const double det = e1.dot(h);
    if (std::abs(det) < 1e-300) return false;
    const double inv = 1.0 / det;
    const Vec3 s = o - a;
    const double u = s.dot(h) * inv;
    if (u < 0.0 || u > 1.0) return false;
    const Vec3 q = s.cross(e1);
    const double v = d.dot(q) * inv;
    if (v < 0.0 || u + v > 1.0) return false;
    return e2.dot(q) * inv > 0.0;
}

const std::array<Vec3, 7>& vote_directions() {
    static const std::array<Vec3, 7> dirs = [] {
        std::array<Vec3, 7> d = {Vec3(1.0, 0.1234, 0.3456),   Vec3(-0.2718, 1.0, 0.1618),
                                 Vec3(0.3141, -0.5772, 1.0),  Vec3(-1.0, -0.4142, 0.2236),
                                 Vec3(0.1732, -1.0, -0.6931), Vec3(-0.4472, 0.2679, -1.0),
                                 Vec3(0.7071, 0.6180, -0.3010)};
        for (auto& v : d) v.normalize();
        return d;
    }();
    return dirs;
}

} // namespace

double point_triangle_distance(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
    return (p - closest_on_triangle(p, a, b, c)).norm();
}

struct MeshDistance::Impl {
    struct Node {
        Aabb box;
        int left = -1;  // child index, or first triangle for leaves
        int right = -1; // child index, or -1 for leaves
        int count = 0;  // triangles in leaf
    };

    std::vector<std::array<Vec3, 3>> tris;
    std::vector<Node> nodes;

    int build(std::vector<int>& order, int lo, int hi, const std::vector<Vec3>& centroids) {
        Node node;
        Aabb cbox;
        for (int i = lo; i < hi; ++i) {
            for (const auto& v : tris[order[i]]) node.box.extend(v);
            cbox.extend(centroids[order[i]]);
        }
        const int id = static_cast<int>(nodes.size());
        nodes.push_back(node);
        if (hi - lo <= 4) {
            nodes[id].left = lo;
            nodes[id].count = hi - lo;
            return id;
        }
        int axis = 0;
        const Vec3 ext = cbox.extent();
        if (ext[1] > ext[axis]) axis = 1;
        if (ext[2] > ext[axis]) axis = 2;
        const int mid = (lo + hi) / 2;
        std::nth_element(order.begin() + lo, order.begin() + mid, order.begin() + hi,
                         [&](int a, int b) { return centroids[a][axis] < centroids[b][axis]; });
        const int l = build(order, lo, mid, centroids);
        const int r = build(order, mid, hi, centroids);
        nodes[id].left = l;
        nodes[id].right = r;
        return id;
    }
};

MeshDistance::MeshDistance(const TriMesh& mesh) : impl_(std::make_unique<Impl>()) {
    mesh.validate();
    const auto n = mesh.faces.size();
    std::vector<std::array<Vec3, 3>> tris(n);
    std::vector<Vec3> centroids(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& f = mesh.faces[i];
        tris[i] = {mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]};
        centroids[i] = (tris[i][0] + tris[i][1] + tris[i][2]) / 3.0;
    }
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    impl_->tris = tris;
    impl_->nodes.reserve(2 * n);
    impl_->build(order, 0, static_cast<int>(n), centroids);
    // Leaves index into the reordered triangle list.
    for (std::size_t i = 0; i < n; ++i) {
        impl_->tris[i] = tris[order[i]];
    }
}

MeshDistance::~MeshDistance() = default;
MeshDistance::MeshDistance(MeshDistance&&) noexcept = default;
MeshDistance& MeshDistance::operator=(MeshDistance&&) noexcept = default;

const Aabb& MeshDistance::box() const { return impl_->nodes.front().box; }

double MeshDistance::unsigned_distance(const Vec3& p, double max_dist) const {
    const auto& nodes = impl_->nodes;
    double best_sq = max_dist * max_dist;
    bool found = false;
    int stack[128];
    int top = 0;
    stack[top++] = 0;
    while (top > 0) {
        const auto& node = nodes[stack[--top]];
        if (box_distance_sq(node.box, p) > best_sq) continue;
        if (node.right < 0) {
            for (int i = node.left; i < node.left + node.count; ++i) {
                const auto& t = impl_->tris[i];
                const double d = (p - closest_on_triangle(p, t[0], t[1], t[2])).squaredNorm();
                if (d <= best_sq) {
                    best_sq = d;
                    found = true;
                }
            }
            continue;
        }
        const double dl = box_distance_sq(nodes[node.left].box, p);
        const double dr = box_distance_sq(nodes[node.right].box, p);
        // Visit the nearer child first.
        if (dl < dr) {
            stack[top++] = node.right;
            stack[top++] = node.left;
        } else {
            stack[top++] = node.left;
            stack[top++] = node.right;
        }
    }
    return found ? std::sqrt(best_sq) : std::numeric_limits<double>::infinity();
}

int MeshDistance::crossings(const Vec3& p, const Vec3& dir) const {
    const auto& nodes = impl_->nodes;
    const Vec3 inv(1.0 / dir.x(), 1.0 / dir.y(), 1.0 / dir.z());
    int hits = 0;
    int stack[128];
    int top = 0;
    stack[top++] = 0;
    while (top > 0) {
        const auto& node = nodes[stack[--top]];
        if (!ray_hits_box(node.box, p, inv)) continue;
        if (node.right < 0) {
            for (int i = node.left; i < node.left + node.count; ++i) {
                const auto& t = impl_->tris[i];
                if (ray_hits_triangle(p, dir, t[0], t[1], t[2])) ++hits;
            }
            continue;
        }
        stack[top++] = node.left;
        stack[top++] = node.right;
    }
    return hits;
}

bool MeshDistance::inside(const Vec3& p) const {
    const auto& b = box();
    if ((p.array() < b.min.array()).any() || (p.array() > b.max.array()).any()) {
        return false;
    }
    int in = 0;
    int out = 0;
    for (const auto& d : vote_directions()) {
        (crossings(p, d) % 2 == 1 ? in : out)++;
        if (in >= 4 || out >= 4) break;
    }
    return in > out;
}

double MeshDistance::signed_distance(const Vec3& p) const {
    const double d = unsigned_distance(p);
    return inside(p) ? -d : d;
}

Vec3 SdfGrid::center(std::size_t flat) const {
    const auto nx = static_cast<std::size_t>(dims[0]);
    const auto ny = static_cast<std::size_t>(dims[1]);
    const int i = static_cast<int>(flat % nx);
    const int j = static_cast<int>((flat / nx) % ny);
    const int k = static_cast<int>(flat / (nx * ny));
    return center(i, j, k);
}

void SdfGrid::validate() const {
    if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1) {
        throw GeometryError("SDF grid dims must be >= 1");
    }
    if (!(voxel_size > 0.0)) {
        throw GeometryError("SDF grid voxel size must be positive");
    }
    if (values.size() != size()) {
        throw GeometryError("SDF grid value count does not match dims");
    }
}

SdfGrid grid_layout(const Aabb& box, double voxel_size, double padding) {
    if (!(voxel_size > 0.0) || !std::isfinite(voxel_size)) {
        throw GeometryError("voxel size must be positive, got " + std::to_string(voxel_size));
    }
    if (!(padding >= 0.0)) {
        throw GeometryError("padding must be non-negative");
    }
    SdfGrid g;
    g.voxel_size = voxel_size;
    const Vec3 ext = box.extent();
    const int pad = static_cast<int>(std::ceil(padding / voxel_size));
    for (int k = 0; k < 3; ++k) {
        const double cells = std::ceil(ext[k] / voxel_size);
        if (cells + 2.0 * pad > 4096.0) {
            throw GeometryError("voxel size too small for mesh extent");
        }
        g.dims[k] = std::max(1, static_cast<int>(cells)) + 2 * pad;
    }
    g.origin = box.center() - 0.5 * voxel_size * Vec3(g.dims[0], g.dims[1], g.dims[2]);
    return g;
}

SdfGrid sdf_from_mesh(const TriMesh& mesh, double voxel_size, double padding) {
    mesh.validate();
    SdfGrid g = grid_layout(mesh.bounds(), voxel_size, padding);
    const MeshDistance dist(mesh);
    g.values.resize(g.size());
    for (std::size_t i = 0; i < g.values.size(); ++i) {
        g.values[i] = dist.signed_distance(g.center(i));
    }
    return g;
}

PointSet interior_centers(const SdfGrid& sdf) {
    sdf.validate();
    PointSet out;
    for (std::size_t i = 0; i < sdf.values.size(); ++i) {
        if (sdf.values[i] <= 0.0) out.push_back(sdf.center(i));
    }
    if (out.empty()) {
        throw GeometryError("empty interior: no voxel center has phi <= 0");
    }
    return out;
}

PointSet shell_centers(const SdfGrid& sdf, double tau) {
    sdf.validate();
    if (!(tau > 0.0)) {
        throw GeometryError("empty shell: threshold must be positive");
    }
    PointSet out;
    for (std::size_t i = 0; i < sdf.values.size(); ++i) {
        if (std::abs(sdf.values[i]) <= tau) out.push_back(sdf.center(i));
    }
    if (out.empty()) {
        throw GeometryError("empty shell: no voxel center within threshold");
    }
    return out;
}

std::size_t count_shell_centers(const TriMesh& mesh, const MeshDistance& dist, double voxel_size,
                                double tau) {
    const SdfGrid g = grid_layout(mesh.bounds(), voxel_size, shell_padding(voxel_size, tau));
    std::vector<unsigned char> candidate(g.size(), 0);
    auto cell = [&](double v, int axis) {
        return static_cast<int>(std::floor((v - g.origin[axis]) / voxel_size - 0.5));
    };
    for (const auto& f : mesh.faces) {
        Aabb tb;
        for (auto vi : f) tb.extend(mesh.vertices[vi]);
        int lo[3], hi[3];
        for (int k = 0; k < 3; ++k) {
            lo[k] = std::clamp(cell(tb.min[k] - tau, k), 0, g.dims[k] - 1);
            hi[k] = std::clamp(cell(tb.max[k] + tau, k) + 1, 0, g.dims[k] - 1);
        }
        for (int k = lo[2]; k <= hi[2]; ++k)
            for (int j = lo[1]; j <= hi[1]; ++j)
                for (int i = lo[0]; i <= hi[0]; ++i) candidate[g.index(i, j, k)] = 1;
    }
    std::size_t count = 0;
    for (std::size_t i = 0; i < candidate.size(); ++i) {
        if (candidate[i] && dist.unsigned_distance(g.center(i), tau) <= tau) ++count;
    }
    return count;
}

double voxel_size_search(const TriMesh& mesh, std::size_t target_count, double tau_factor) {
    mesh.validate();
    if (target_count < 1) {
        throw GeometryError("voxel_size_search: target count must be positive");
    }
    if (!(tau_factor > 0.0)) {
        throw GeometryError("voxel_size_search: tau factor must be positive");
    }
    const double diag = mesh.bounds().diagonal();
    if (!(std::abs(mesh.signed_volume()) > 1e-9 * diag * diag * diag)) {
        throw NumericError("voxel_size_search: cannot bracket, mesh encloses zero volume");
    }
    const MeshDistance dist(mesh);
    const double lo_ok = 0.9 * static_cast<double>(target_count);
    const double hi_ok = 1.1 * static_cast<double>(target_count);
    auto count = [&](double s) {
        try {
            return static_cast<double>(count_shell_centers(mesh, dist, s, tau_factor * s));
        } catch (const GeometryError& e) {
            throw NumericError(std::string("voxel_size_search: cannot bracket: ") + e.what());
        }
    };
    auto within = [&](double c) { return c >= lo_ok && c <= hi_ok; };

    double hi = diag;
    double c_hi = count(hi);
    if (within(c_hi)) return hi;
    for (int i = 0; c_hi > hi_ok; ++i) {
        if (i == 64) throw NumericError("voxel_size_search: failed to bracket from above");
        hi *= 2.0;
        c_hi = count(hi);
        if (within(c_hi)) return hi;
    }
    double lo = hi;
    double c_lo = c_hi;
    for (int i = 0; c_lo < lo_ok; ++i) {
        if (i == 64) throw NumericError("voxel_size_search: failed to bracket after 64 halvings");
        lo *= 0.5;
        c_lo = count(lo);
        if (within(c_lo)) return lo;
    }
    for (int i = 0; i < 100; ++i) {
        const double mid = std::sqrt(lo * hi);
        const double c = count(mid);
        if (within(c)) return mid;
        if (c > hi_ok) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    throw NumericError("voxel_size_search: shell count never within 10% of target");
}

} // namespace f4d
