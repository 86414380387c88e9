#pragma once

#include "f4d/quat.hpp"

#include <algorithm>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

namespace f4d {

/// Per-node rigid contribution. The neutral node is all zeros; rotation
/// coefficients are summed raw and the identity is added once at query time.
struct RigidDelta {
    RawQuat r;
    Vec3 T = Vec3::Zero();

    static RigidDelta zero() { return {}; }
    bool is_zero() const { return r.is_zero() && T.isZero(0.0); }

    RigidDelta& operator+=(const RigidDelta& o) {
        r += o.r;
        T += o.T;
        return *this;
    }
    RigidDelta& operator-=(const RigidDelta& o) {
        r -= o.r;
        T -= o.T;
        return *this;
    }
    friend RigidDelta operator+(RigidDelta a, const RigidDelta& b) { return a += b; }
    friend RigidDelta operator-(RigidDelta a, const RigidDelta& b) { return a -= b; }
    friend bool operator==(const RigidDelta& a, const RigidDelta& b) { return a.r == b.r && a.T == b.T; }
};

inline constexpr int lowbit(int j) { return j & -j; }

/// Fenwick prefix decomposition of frame t (1-based): t, t - lowbit(t), ...
/// Node j covers frames (j - lowbit(j), j].
std::vector<int> bit_indices(int t, int frame_count);

/// Deformation of one control point at one frame.
struct FrameTransform {
    UnitQuat rotation;
    Vec3 translation = Vec3::Zero();
};

/// Range-cumulative deformation sequence over frames 1..T.
class FenwickSeq {
public:
    FenwickSeq() = default;
    explicit FenwickSeq(int frame_count);

    int frame_count() const { return static_cast<int>(nodes_.size()); }

    /// 1-based node access.
    const RigidDelta& node(int j) const;
    RigidDelta& node(int j);
    std::span<const RigidDelta> nodes() const { return nodes_; }

    /// Raw sum of the nodes in bit_indices(t), without the identity base.
    RigidDelta raw_prefix(int t) const;

    /// (norm(identity + Σ r), Σ T) over bit_indices(t).
    FrameTransform query(int t) const;

    /// Builds nodes whose raw prefix sums reproduce prefix[t-1] for every t.
    /// prefix[0] (frame 1) must be zero.
    static FenwickSeq from_prefix(std::span<const RigidDelta> prefix);

    /// Frames after t0 take the deformation of frame t0. Nodes j <= t0 are
    /// left untouched, so frames <= t0 are bit-identical.
    FenwickSeq clamp_after(int t0) const;

    friend bool operator==(const FenwickSeq& a, const FenwickSeq& b) {
        return a.nodes_ == b.nodes_;
    }

private:
    void check_frame(int t) const;

    std::vector<RigidDelta> nodes_;
};

/// Gradient accumulator mirroring a FenwickSeq's nodes.
class FenwickGrad {
public:
    explicit FenwickGrad(int frame_count, bool freeze_first = true);

    /// Adjoint of query's raw sums: adds g to every node in bit_indices(t).
    /// Node 1 is skipped while the first frame is frozen.
    void scatter(int t, const RigidDelta& g);

    const RigidDelta& node(int j) const { return grads_.at(static_cast<std::size_t>(j - 1)); }
    std::span<const RigidDelta> nodes() const { return grads_; }

private:
    std::vector<RigidDelta> grads_;
    bool freeze_first_;
};

/// Serialization: "FWSQ", version, T, node stride (7), then T records of
/// r.w r.x r.y r.z T.x T.y T.z as little-endian float32.
void write_fenwick(std::ostream& out, const FenwickSeq& seq);
FenwickSeq read_fenwick(std::istream& in);

} // namespace f4d
