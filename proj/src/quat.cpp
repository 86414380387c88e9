#include "f4d/quat.hpp"

#include "f4d/error.hpp"

#include <cmath>
#include <string>

namespace f4d {

double RawQuat::norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

RawQuat& RawQuat::operator+=(const RawQuat& o) {
    w += o.w;
    x += o.x;
    y += o.y;
    z += o.z;
    return *this;
}

RawQuat& RawQuat::operator-=(const RawQuat& o) {
    w -= o.w;
    x -= o.x;
    y -= o.y;
    z -= o.z;
    return *this;
}

RawQuat& RawQuat::operator*=(double s) {
    w *= s;
    x *= s;
    y *= s;
    z *= s;
    return *this;
}

UnitQuat quat_normalize(const RawQuat& r) {
    const double n = r.norm();
    if (!(n >= kMinQuatNorm) || !std::isfinite(n)) {
        throw NumericError("quaternion norm " + std::to_string(n) + " too small to normalize");
    }
    const double s = (r.w < 0.0 ? -1.0 : 1.0) / n;
    return UnitQuat(r.w * s, r.x * s, r.y * s, r.z * s);
}

UnitQuat UnitQuat::from_axis_angle(const Vec3& axis, double angle) {
    const double n = axis.norm();
    if (!(n > 0.0)) {
        throw NumericError("rotation axis has zero length");
    }
    const Vec3 a = axis / n;
    const double s = std::sin(0.5 * angle);
    return quat_normalize({std::cos(0.5 * angle), a.x() * s, a.y() * s, a.z() * s});
}

UnitQuat UnitQuat::from_matrix(const Mat3& r) {
    // Shepperd's method on the largest diagonal term.
    const double tr = r.trace();
    RawQuat q;
    if (tr > r(0, 0) && tr > r(1, 1) && tr > r(2, 2)) {
        const double s = std::sqrt(1.0 + tr) * 2.0;
        q = {0.25 * s, (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s, (r(1, 0) - r(0, 1)) / s};
    } else if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
        const double s = std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2)) * 2.0;
        q = {(r(2, 1) - r(1, 2)) / s, 0.25 * s, (r(0, 1) + r(1, 0)) / s, (r(0, 2) + r(2, 0)) / s};
    } else if (r(1, 1) > r(2, 2)) {
        const double s = std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2)) * 2.0;
        q = {(r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, 0.25 * s, (r(1, 2) + r(2, 1)) / s};
    } else {
        const double s = std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1)) * 2.0;
        q = {(r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s, (r(1, 2) + r(2, 1)) / s, 0.25 * s};
    }
    return quat_normalize(q);
}

UnitQuat UnitQuat::conjugate() const {
    // Conjugation keeps w, so the hemisphere is preserved.
    return UnitQuat(w_, -x_, -y_, -z_);
}

Mat3 UnitQuat::to_matrix() const {
    const double w = w_, x = x_, y = y_, z = z_;
    Mat3 m;
    m << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return m;
}

Vec3 UnitQuat::rotate(const Vec3& v) const { return rotate_by(vec(), v); }

double UnitQuat::angle() const { return 2.0 * std::atan2(Vec3(x_, y_, z_).norm(), w_); }

RawQuat hamilton(const RawQuat& a, const RawQuat& b) {
    return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

RawQuat conjugate(const RawQuat& q) { return {q.w, -q.x, -q.y, -q.z}; }

UnitQuat quat_compose(const UnitQuat& a, const UnitQuat& b) {
    return quat_normalize(hamilton(a.raw(), b.raw()));
}

RawQuat quat_blend(std::span<const double> weights, std::span<const RawQuat> quats) {
    if (weights.size() != quats.size()) {
        throw NumericError("quat_blend: weight/quaternion count mismatch");
    }
    RawQuat sum;
    for (std::size_t i = 0; i < quats.size(); ++i) {
        if (!std::isfinite(weights[i])) {
            throw NumericError("quat_blend: non-finite weight");
        }
        sum += weights[i] * quats[i];
    }
    if (sum.norm() < kMinQuatNorm) {
        throw NumericError("quat_blend: blended quaternion has zero norm (antipodal inputs)");
    }
    return sum;
}

Vec3 rotate_by(const Vec4& q, const Vec3& v) {
    const Vec3 u(q[1], q[2], q[3]);
    const Vec3 uv = u.cross(v);
    return v + 2.0 * q[0] * uv + 2.0 * u.cross(uv);
}

Vec4 rotate_by_vjp_quat(const Vec4& q, const Vec3& v, const Vec3& g) {
    const Vec3 u(q[1], q[2], q[3]);
    const Vec3 uv = u.cross(v);
    const Vec3 gu = 2.0 * q[0] * v.cross(g) + 2.0 * (uv.cross(g) + v.cross(g.cross(u)));
    return {2.0 * g.dot(uv), gu.x(), gu.y(), gu.z()};
}

Vec4 normalize_vjp(const Vec4& unit, double raw_norm, double sign, const Vec4& g) {
    return sign * (g - unit * unit.dot(g)) / raw_norm;
}

} // namespace f4d
