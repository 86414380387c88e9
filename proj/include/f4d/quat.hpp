#pragma once

#include <Eigen/Dense>

#include <span>

namespace f4d {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec4 = Eigen::Vector4d;

/// Quaternion coefficients that are not necessarily unit length.
/// Used for Fenwick node deltas and for blended sums.
struct RawQuat {
    double w = 0.0;
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;

    static RawQuat zero() { return {}; }
    static RawQuat identity() { return {1.0, 0.0, 0.0, 0.0}; }
    static RawQuat from_vec(const Vec4& v) { return {v[0], v[1], v[2], v[3]}; }

    Vec4 vec() const { return {w, x, y, z}; }
    double norm() const;
    bool is_zero() const { return w == 0.0 && x == 0.0 && y == 0.0 && z == 0.0; }

    RawQuat& operator+=(const RawQuat& o);
    RawQuat& operator-=(const RawQuat& o);
    RawQuat& operator*=(double s);
    friend RawQuat operator+(RawQuat a, const RawQuat& b) { return a += b; }
    friend RawQuat operator-(RawQuat a, const RawQuat& b) { return a -= b; }
    friend RawQuat operator*(RawQuat a, double s) { return a *= s; }
    friend RawQuat operator*(double s, RawQuat a) { return a *= s; }
    friend bool operator==(const RawQuat&, const RawQuat&) = default;
};

/// Unit quaternion kept in the w >= 0 hemisphere.
class UnitQuat {
public:
    UnitQuat() = default;

    static UnitQuat identity() { return {}; }
    static UnitQuat from_axis_angle(const Vec3& axis, double angle);
    static UnitQuat from_matrix(const Mat3& r);

    double w() const { return w_; }
    double x() const { return x_; }
    double y() const { return y_; }
    double z() const { return z_; }
    Vec4 vec() const { return {w_, x_, y_, z_}; }
    RawQuat raw() const { return {w_, x_, y_, z_}; }

    UnitQuat conjugate() const;
    Mat3 to_matrix() const;
    Vec3 rotate(const Vec3& v) const;
    double angle() const;

private:
    friend UnitQuat quat_normalize(const RawQuat& r);
    UnitQuat(double w, double x, double y, double z) : w_(w), x_(x), y_(y), z_(z) {}

    double w_ = 1.0;
    double x_ = 0.0;
    double y_ = 0.0;
    double z_ = 0.0;
};

/// Smallest norm accepted by quat_normalize.
inline constexpr double kMinQuatNorm = 1e-12;

/// Normalizes and canonicalizes to w >= 0. Throws NumericError below kMinQuatNorm.
UnitQuat quat_normalize(const RawQuat& r);

/// Hamilton product a ⊗ b (apply b first, then a).
UnitQuat quat_compose(const UnitQuat& a, const UnitQuat& b);
RawQuat hamilton(const RawQuat& a, const RawQuat& b);
RawQuat conjugate(const RawQuat& q);

/// Coefficient-wise weighted sum. Throws NumericError when the sum has
/// (near) zero norm, which signals antipodal cancellation.
RawQuat quat_blend(std::span<const double> weights, std::span<const RawQuat> quats);

/// Rotates v by a quaternion assumed unit: v + 2w(q×v) + 2q×(q×v).
Vec3 rotate_by(const Vec4& q, const Vec3& v);

/// Transposed Jacobian of rotate_by with respect to q, applied to g:
/// returns (∂ rotate_by(q, v) / ∂q)ᵀ g.
Vec4 rotate_by_vjp_quat(const Vec4& q, const Vec3& v, const Vec3& g);

/// Jacobian-transpose of n(s) = s/|s| (scaled by sign) applied to g.
Vec4 normalize_vjp(const Vec4& unit, double raw_norm, double sign, const Vec4& g);

} // namespace f4d
