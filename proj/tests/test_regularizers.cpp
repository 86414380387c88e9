#include "doctest.h"

#include "f4d/error.hpp"
#include "f4d/quat.hpp"
#include "f4d/regularizers.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <random>
#include <sstream>

using namespace f4d;

namespace {

PointSet random_points(std::size_t n, std::mt19937& rng, double scale = 1.0) {
    std::uniform_real_distribution<double> u(-scale, scale);
    PointSet pts(n);
    for (auto& p : pts) p = Vec3(u(rng), u(rng), u(rng));
    return pts;
}

UnitQuat random_rotation(std::mt19937& rng) {
    std::normal_distribution<double> n;
    return quat_normalize({n(rng), n(rng), n(rng), n(rng)});
}

double kabsch_objective(const Mat3& R, std::span<const Vec3> c, std::span<const Vec3> d) {
    double s = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) s += (c[i] - R * d[i]).squaredNorm();
    return s;
}

// Wobbly tracks: smooth non-rigid motion of the canonical points.
std::vector<Vec3> wobble(const PointSet& pts, int T, std::mt19937& rng) {
    std::normal_distribution<double> n(0.0, 0.05);
    std::vector<Vec3> out;
    for (int t = 1; t <= T; ++t) {
        const UnitQuat R = UnitQuat::from_axis_angle(Vec3(0.2, 0.5, 1).normalized(), 0.1 * (t - 1));
        for (const auto& p : pts) {
            const Vec3 bend(0.1 * (t - 1) * p.y() * p.y(), 0.0, 0.05 * (t - 1) * p.x());
            out.push_back(R.rotate(p) + bend + Vec3(n(rng), n(rng), n(rng)) * (t > 1 ? 1.0 : 0.0));
        }
    }
    return out;
}

} // namespace

TEST_CASE("temporal flow loss") {
    const PointSet pts = {Vec3(0, 0, 0), Vec3(1, 2, 3)};
    std::vector<Vec3> still;
    for (int t = 0; t < 4; ++t) still.insert(still.end(), pts.begin(), pts.end());
    CHECK(temporal_flow_loss(still, 2) == 0.0);

    const std::vector<Vec3> one = {Vec3(0, 0, 0), Vec3(0, 0, 1)};
    CHECK(temporal_flow_loss(one, 1) == 1.0);

    const Vec3 v(0.3, -0.2, 0.5);
    const int T = 7;
    std::vector<Vec3> uniform;
    for (int t = 0; t < T; ++t)
        for (const auto& p : pts) uniform.push_back(p + t * v);
    CHECK(temporal_flow_loss(uniform, 2) == doctest::Approx(2 * (T - 1) * v.squaredNorm()).epsilon(1e-12));
    CHECK_THROWS_AS(temporal_flow_loss(one, 2), NumericError);
    CHECK_THROWS_AS(temporal_flow_loss(std::vector<Vec3>{Vec3::Zero()}, 1), NumericError);

    std::mt19937 rng(1);
    const PointSet base = random_points(30, rng);
    std::vector<Vec3> tracks = wobble(base, 5, rng);
    std::vector<Vec3> grad;
    temporal_flow_loss(tracks, base.size(), &grad);
    const double h = 1e-5;
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t i = rng() % tracks.size();
        const int c = static_cast<int>(rng() % 3);
        auto plus = tracks, minus = tracks;
        plus[i][c] += h;
        minus[i][c] -= h;
        const double fd = (temporal_flow_loss(plus, base.size()) - temporal_flow_loss(minus, base.size())) / (2 * h);
        worst = std::max(worst, std::abs(fd - grad[i][c]) / std::max(std::abs(fd), 1e-6));
    }
    CHECK(worst <= 1e-5);
}

TEST_CASE("estimate_rotation") {
    std::mt19937 rng(2);
    const PointSet c = random_points(10, rng);
    CHECK(estimate_rotation(c, c).R == Mat3::Identity());

    const UnitQuat Q = random_rotation(rng);
    std::vector<Vec3> d;
    for (const auto& v : c) d.push_back(Q.rotate(v));
    const Mat3 R = estimate_rotation(c, d).R;
    CHECK((R - Q.to_matrix().transpose()).norm() < 1e-12);

    // No sampled rotation beats the estimate on a noisy problem.
    std::normal_distribution<double> n(0.0, 0.3);
    for (auto& v : d) v += Vec3(n(rng), n(rng), n(rng));
    const Mat3 Rn = estimate_rotation(c, d).R;
    CHECK(std::abs(Rn.determinant() - 1.0) < 1e-12);
    const double best = kabsch_objective(Rn, c, d);
    for (int i = 0; i < 20000; ++i) CHECK(kabsch_objective(random_rotation(rng).to_matrix(), c, d) >= best - 1e-12);
    // Local perturbations around the estimate do not improve it either.
    for (int i = 0; i < 200; ++i) {
        const Vec3 axis(n(rng), n(rng), n(rng));
        const Mat3 P = UnitQuat::from_axis_angle(axis.normalized(), 1e-4).to_matrix();
        CHECK(kabsch_objective(P * Rn, c, d) >= best - 1e-12);
    }

    // 1-D: a single offset scaled by two.
    const std::vector<Vec3> c1 = {Vec3(0.3, -0.4, 1.2)};
    const std::vector<Vec3> d1 = {2.0 * UnitQuat::from_axis_angle(Vec3::UnitY(), 0.7).rotate(c1[0])};
    const Mat3 R1 = estimate_rotation(c1, d1).R;
    CHECK((R1 * d1[0]).normalized().dot(c1[0].normalized()) == doctest::Approx(1.0).epsilon(1e-12));
    const double len = c1[0].norm();
    CHECK(kabsch_objective(R1, c1, d1) == doctest::Approx((len - 2 * len) * (len - 2 * len)).epsilon(1e-12));

    const std::vector<Vec3> zeros = {Vec3::Zero(), Vec3::Zero()};
    const std::vector<Vec3> other = {Vec3(1, 0, 0), Vec3(0, 1, 0)};
    const auto deg = estimate_rotation(zeros, other);
    CHECK(deg.degenerate);
    CHECK(deg.R == Mat3::Identity());
}

TEST_CASE("fast polar path agrees with SVD Kabsch") {
    std::mt19937 rng(3);
    std::normal_distribution<double> n;
    for (int i = 0; i < 2000; ++i) {
        Mat3 M;
        for (int a = 0; a < 9; ++a) M(a / 3, a % 3) = n(rng);
        if (i % 3 == 0) M.col(2) *= 1e-4; // nearly planar neighbourhoods
        const Eigen::JacobiSVD<Mat3> svd(M, Eigen::ComputeFullU | Eigen::ComputeFullV);
        Mat3 D = Mat3::Identity();
        D(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0 ? -1.0 : 1.0;
        const Mat3 ref = svd.matrixU() * D * svd.matrixV().transpose();
        const Mat3 got = rotation_from_covariance(M).R;
        CHECK((got - ref).norm() < 1e-9);
        CHECK((got.transpose() * got - Mat3::Identity()).norm() < 1e-13);
    }
}

TEST_CASE("arap loss") {
    std::mt19937 rng(4);
    const PointSet shell = random_points(200, rng);
    const NeighborGraph g = build_neighbor_graph(shell, 10);
    CHECK(g.k == 10);
    for (std::size_t i = 0; i < shell.size(); ++i)
        for (auto j : g.of(i)) CHECK(j != i);

    const int T = 4;
    std::vector<Vec3> still;
    for (int t = 0; t < T; ++t) still.insert(still.end(), shell.begin(), shell.end());
    CHECK(arap_loss(shell, g, still).value == 0.0);

    std::vector<Vec3> rigid;
    for (int t = 0; t < T; ++t) {
        const UnitQuat R = random_rotation(rng);
        const Vec3 shift(0.5 * t, -0.2, 1.0);
        for (const auto& p : shell) rigid.push_back(R.rotate(p) + shift);
    }
    CHECK(arap_loss(shell, g, rigid).value <= 1e-9);

    // Two-point shell scaled by two: residual per ordered pair is |c|².
    const PointSet two = {Vec3(0, 0, 0), Vec3(0.6, 0.8, 0)};
    const NeighborGraph g2 = build_neighbor_graph(two, 10);
    CHECK(g2.k == 1);
    std::vector<Vec3> scaled = two;
    for (const auto& p : two) scaled.push_back(2.0 * p);
    CHECK(arap_loss(two, g2, scaled).value == doctest::Approx(2.0).epsilon(1e-12));

    // Invariance under one extra rigid transform per frame.
    const std::vector<Vec3> wob = wobble(shell, T, rng);
    const double base = arap_loss(shell, g, wob).value;
    CHECK(base > 0.0);
    std::vector<Vec3> moved = wob;
    for (int t = 0; t < T; ++t) {
        const UnitQuat R = random_rotation(rng);
        for (std::size_t s = 0; s < shell.size(); ++s) moved[t * shell.size() + s] = R.rotate(wob[t * shell.size() + s]) + Vec3(3, -1, 2);
    }
    CHECK(std::abs(arap_loss(shell, g, moved).value - base) <= 1e-9 * base);
}

TEST_CASE("arap gradient with frozen rotations") {
    std::mt19937 rng(5);
    const PointSet shell = random_points(120, rng);
    const NeighborGraph g = build_neighbor_graph(shell, 10);
    const std::vector<Vec3> tracks = wobble(shell, 4, rng);
    std::vector<Vec3> grad;
    const double value = arap_loss(shell, g, tracks, &grad).value;
    const auto R = arap_rotations(shell, g, tracks);
    CHECK(arap_loss_fixed(shell, g, tracks, R) == doctest::Approx(value).epsilon(1e-13));
    std::vector<Vec3> grad_fixed;
    arap_loss_fixed(shell, g, tracks, R, &grad_fixed);
    for (std::size_t i = 0; i < grad.size(); ++i) CHECK((grad[i] - grad_fixed[i]).norm() <= 1e-12 * (1 + grad[i].norm()));

    const double h = 1e-5;
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t i = shell.size() + rng() % (tracks.size() - shell.size());
        const int c = static_cast<int>(rng() % 3);
        auto plus = tracks, minus = tracks;
        plus[i][c] += h;
        minus[i][c] -= h;
        const double fd = (arap_loss_fixed(shell, g, plus, R) - arap_loss_fixed(shell, g, minus, R)) / (2 * h);
        worst = std::max(worst, std::abs(fd - grad[i][c]) / std::max(std::abs(fd), 1e-6));
    }
    MESSAGE("worst relative error " << worst);
    CHECK(worst <= 1e-4);
}

TEST_CASE("rasterize flow") {
    OrthoCamera cam;
    cam.width = 9;
    cam.height = 7;
    cam.pixel = 0.1;
    cam.footprint = 1.0;
    // Pixel (4, 3) center sits at the camera center for odd sizes.
    const std::vector<Vec3> pos = {Vec3(0, 0, 0.5)};
    const std::vector<Vec3> f = {Vec3(1, -2, 3)};
    const FlowImage img = rasterize_flow(pos, f, cam);
    CHECK((img.at(4, 3) - f[0]).norm() < 1e-15);
    CHECK((img.at(5, 3) - f[0]).norm() < 1e-15);
    CHECK(img.weight[3 * 9 + 4] == doctest::Approx(1.0));
    CHECK(img.weight[3 * 9 + 5] == doctest::Approx(std::exp(-0.5)));
    CHECK(img.weight[3 * 9 + 6] == doctest::Approx(std::exp(-2.0)));
    CHECK(img.at(8, 3) == Vec3::Zero()); // beyond 3σ

    const std::vector<Vec3> zero = {Vec3::Zero()};
    for (double v : rasterize_flow(pos, zero, cam).data) CHECK(v == 0.0);

    const std::vector<Vec3> pos2 = {Vec3(0, 0, 0), Vec3(0, 0, 1)};
    const std::vector<Vec3> f2 = {Vec3(1, 2, 3), Vec3(-1, -2, -3)};
    CHECK(rasterize_flow(pos2, f2, cam).at(4, 3).norm() == 0.0);

    std::mt19937 rng(6);
    const PointSet p = random_points(50, rng, 0.4);
    const PointSet a = random_points(50, rng), b = random_points(50, rng);
    std::vector<Vec3> mix(50);
    for (int i = 0; i < 50; ++i) mix[i] = 2.0 * a[i] - 0.5 * b[i];
    const auto ia = rasterize_flow(p, a, cam), ib = rasterize_flow(p, b, cam), im = rasterize_flow(p, mix, cam);
    for (std::size_t i = 0; i < im.data.size(); ++i) CHECK(std::abs(im.data[i] - (2 * ia.data[i] - 0.5 * ib.data[i])) < 1e-12);

    cam.width = 0;
    CHECK_THROWS_AS(rasterize_flow(pos, f, cam), GeometryError);

    std::stringstream buf;
    write_flow_raster(buf, ia);
    CHECK(buf.str().size() == 12 + 9 * 7 * 3 * 4);
    const FlowImage back = read_flow_raster(buf);
    CHECK(back.width == 9);
    for (std::size_t i = 0; i < back.data.size(); ++i) CHECK(back.data[i] == static_cast<float>(ia.data[i]));
}
