#pragma once

#include "f4d/fenwick_seq.hpp"
#include "f4d/mesh.hpp"

#include <cstddef>
#include <memory>
#include <span>
#include <utility>
#include <vector>

namespace f4d {

/// Spatial blob with fixed mean p and covariance Σ = R·diag(s²)·Rᵀ, where
/// s = exp(log_scale) and R = normalize(cov_rot). Carries its deformation
/// sequence.
struct ControlPoint {
    Vec3 p = Vec3::Zero();
    Vec3 log_scale = Vec3::Zero();
    RawQuat cov_rot = RawQuat::identity();
    FenwickSeq seq;

    Vec3 scale() const { return log_scale.array().exp(); }
    Mat3 covariance() const;
};

struct ControlLayer {
    std::vector<ControlPoint> points;
    int K = 4;

    std::size_t size() const { return points.size(); }
    int frame_count() const { return points.empty() ? 0 : points.front().seq.frame_count(); }
    PointSet means() const;
    /// Throws GeometryError unless |points| >= K >= 1 and all sequences share T.
    void validate() const;
};

/// FPS-seeded k-means centroids of the interior set; isotropic scale equal to
/// the mean distance to the three nearest other control points (bbox
/// diagonal / 4 when fewer than four control points exist); zero deformations.
ControlLayer init_layer(const PointSet& interior, std::size_t count, int K, int frame_count,
                        int kmeans_iters = 10);

struct BlendWeights {
    std::vector<double> weights;
    /// Every Gaussian weight underflowed; inverse-distance weights were used.
    bool fallback = false;
};

/// Normalized Gaussian weights exp(-½ (x-p)ᵀ Σ⁻¹ (x-p)) over the neighbours.
BlendWeights blend_weights(const Vec3& x, const ControlLayer& layer,
                           std::span<const std::size_t> neighbor_idx);

/// K nearest control points of x by mean position.
std::vector<std::size_t> layer_neighbors(const Vec3& x, const ControlLayer& layer);

/// Linear blend skinning of a canonical point at frame t.
Vec3 deform_point(const Vec3& x, const ControlLayer& layer, int t);

/// normalize(Σ β_k r_k^t) ⊗ q, with weights evaluated at canonical x.
UnitQuat deform_quat(const UnitQuat& q, const Vec3& x, const ControlLayer& layer, int t);

/// Coarse and fine control layers. The fine layer contributes a residual
/// displacement (computed in canonical space) and a residual rotation only
/// while fine_enabled is set.
struct DeformModel {
    ControlLayer coarse;
    ControlLayer fine;
    bool fine_enabled = false;

    int frame_count() const { return coarse.frame_count(); }
};

struct DeformedSample {
    Vec3 position;
    UnitQuat orientation;
};

DeformedSample deform_full(const Vec3& x, const UnitQuat& q, const DeformModel& model, int t);

/// Vertices mapped through deform_full positions; faces unchanged.
TriMesh deform_mesh(const TriMesh& mesh, const DeformModel& model, int t);

struct LayerGrad {
    /// nodes[k][j-1] is the gradient of node j of control point k.
    std::vector<std::vector<RigidDelta>> nodes;
    std::vector<Vec3> log_scale;
    std::vector<Vec4> cov_rot;

    static LayerGrad zeros_like(const ControlLayer& layer);
    void add(const LayerGrad& o);
};

struct ModelGrad {
    LayerGrad coarse;
    LayerGrad fine;

    static ModelGrad zeros_like(const DeformModel& model);
    void add(const ModelGrad& o);
};

/// Reverse-mode gradient of deform_full with respect to all Fenwick nodes
/// (node 1 excluded) and covariance parameters, given upstream gradients on
/// the output position and orientation coefficients.
ModelGrad deform_vjp(const Vec3& x, const UnitQuat& q, const DeformModel& model, int t,
                     const Vec3& grad_position, const Vec4& grad_orientation);

/// Forward and adjoint of the deformation for a fixed canonical sample set
/// over all frames. Neighbour indices are cached at construction (control
/// means are fixed); weights are recomputed on every forward pass.
class TrackSkinner {
public:
    TrackSkinner(const DeformModel& model, PointSet samples);

    std::size_t sample_count() const { return samples_.size(); }
    const PointSet& samples() const { return samples_; }

    /// tracks[(t-1)·N + s] for t = 1..T.
    void forward(const DeformModel& model, std::vector<Vec3>& tracks);

    /// Accumulates J_θᵀ grad_tracks into grad. Must follow forward() on the
    /// same model.
    void backward(const DeformModel& model, std::span<const Vec3> grad_tracks, ModelGrad& grad);

    /// Number of samples that fell back to inverse-distance weights.
    std::size_t fallback_count() const;

private:
    struct LayerCache;

    PointSet samples_;
    std::vector<std::size_t> coarse_nbr_;
    std::vector<std::size_t> fine_nbr_;
    int coarse_k_ = 0;
    int fine_k_ = 0;
    std::shared_ptr<LayerCache> coarse_cache_;
    std::shared_ptr<LayerCache> fine_cache_;
};

} // namespace f4d
