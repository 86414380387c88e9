#pragma once

#include "f4d/mesh.hpp"

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

namespace f4d {

/// Track layout used throughout: tracks[(t-1)·n + s] for frames t = 1..T.

/// Σ_t Σ_s ||x_s^t − x_s^{t+1}||². When grad is non-null, weight·∂L/∂x is
/// added into it (same layout as tracks).
double temporal_flow_loss(std::span<const Vec3> tracks, std::size_t n, std::vector<Vec3>* grad = nullptr,
                          double weight = 1.0);

/// Flow vectors x^t − x^{t+1} of frame t (1 ≤ t < T).
std::vector<Vec3> flow_frame(std::span<const Vec3> tracks, std::size_t n, int t);

/// k nearest other points of every point, flat [i·k + j].
struct NeighborGraph {
    std::size_t k = 0;
    std::vector<std::size_t> idx;

    std::size_t size() const { return k == 0 ? 0 : idx.size() / k; }
    std::span<const std::size_t> of(std::size_t i) const { return {idx.data() + i * k, k}; }
};

/// Canonical-space graph; k is capped at |points| − 1.
NeighborGraph build_neighbor_graph(const PointSet& points, std::size_t k = 10);

struct RotationEstimate {
    Mat3 R = Mat3::Identity();
    /// Cross-covariance was zero or non-finite; R is the identity.
    bool degenerate = false;
};

/// Rotation minimizing Σ ||c_i − R d_i||² with det R = +1 (Kabsch).
RotationEstimate estimate_rotation(std::span<const Vec3> canonical, std::span<const Vec3> deformed);

/// Same solution from the cross-covariance M = Σ c_i d_iᵀ.
RotationEstimate rotation_from_covariance(const Mat3& M);

struct ArapValue {
    double value = 0.0;
    std::size_t degenerate = 0;
};

/// Σ_t Σ_x Σ_{y∈N(x)} ||(x − y) − R̂_x^t (x^t − y^t)||² with R̂ re-estimated
/// and held constant for the gradient. Gradient handling as in
/// temporal_flow_loss.
ArapValue arap_loss(const PointSet& canonical, const NeighborGraph& graph, std::span<const Vec3> tracks,
                    std::vector<Vec3>* grad = nullptr, double weight = 1.0);

/// Same objective with the supplied rotations (per frame, per point: [(t-1)·n + s]).
double arap_loss_fixed(const PointSet& canonical, const NeighborGraph& graph, std::span<const Vec3> tracks,
                       std::span<const Mat3> rotations, std::vector<Vec3>* grad = nullptr);

/// Rotations estimated by arap_loss, in the layout arap_loss_fixed expects.
std::vector<Mat3> arap_rotations(const PointSet& canonical, const NeighborGraph& graph,
                                 std::span<const Vec3> tracks);

/// Orthographic camera. Pixel (i, j) has its center at
/// center + (i + 0.5 − W/2)·pixel·right + (j + 0.5 − H/2)·pixel·up.
struct OrthoCamera {
    Vec3 center = Vec3::Zero();
    Vec3 right = Vec3::UnitX();
    Vec3 up = Vec3::UnitY();
    double pixel = 1.0;
    int width = 1;
    int height = 1;
    /// Gaussian footprint standard deviation in pixels; truncated at 3σ.
    double footprint = 1.0;
};

struct FlowImage {
    int width = 0;
    int height = 0;
    /// Row-major, 3 channels per pixel.
    std::vector<double> data;
    /// Summed footprint weight per pixel (coverage).
    std::vector<double> weight;

    Vec3 at(int i, int j) const {
        const auto o = 3 * (static_cast<std::size_t>(j) * width + i);
        return {data[o], data[o + 1], data[o + 2]};
    }
};

/// Footprint-weighted average of projected sample flows; empty pixels are 0.
FlowImage rasterize_flow(std::span<const Vec3> positions, std::span<const Vec3> flows, const OrthoCamera& cam);

/// u32 width, u32 height, u32 channels (3), then float32 row-major pixels.
void write_flow_raster(std::ostream& out, const FlowImage& img);
FlowImage read_flow_raster(std::istream& in);

} // namespace f4d
