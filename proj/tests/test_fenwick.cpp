#include "doctest.h"

#include "f4d/error.hpp"
#include "f4d/fenwick_seq.hpp"

#include <cmath>
#include <random>
#include <sstream>

using namespace f4d;

namespace {

// Coverage oracle: node j contributes to frame t when its range
// (j - lowbit(j), j] is one of the disjoint blocks tiling [1, t].
RigidDelta coverage_sum(const FenwickSeq& seq, int t) {
    RigidDelta sum;
    int right = t;
    while (right > 0) {
        for (int j = 1; j <= seq.frame_count(); ++j) {
            if (j == right) {
                sum += seq.node(j);
                right = j - lowbit(j);
                break;
            }
        }
    }
    return sum;
}

FenwickSeq random_seq(int T, std::mt19937& rng, double scale = 0.1) {
    std::normal_distribution<double> n(0.0, scale);
    FenwickSeq seq(T);
    for (int j = 2; j <= T; ++j) {
        seq.node(j).r = {n(rng), n(rng), n(rng), n(rng)};
        seq.node(j).T = Vec3(n(rng), n(rng), n(rng));
    }
    return seq;
}

} // namespace

TEST_CASE("bit indices") {
    CHECK(bit_indices(6, 41) == std::vector<int>{6, 4});
    CHECK(bit_indices(7, 41) == std::vector<int>{7, 6, 4});
    CHECK(bit_indices(1, 41) == std::vector<int>{1});
    CHECK_THROWS_AS(bit_indices(0, 41), NumericError);
    CHECK_THROWS_AS(bit_indices(42, 41), NumericError);

    for (int t = 1; t <= 64; ++t) {
        const auto idx = bit_indices(t, 64);
        CHECK(idx.size() <= static_cast<std::size_t>(std::floor(std::log2(t))) + 1);
        std::vector<int> covered(65, 0);
        for (int j : idx)
            for (int f = j - lowbit(j) + 1; f <= j; ++f) ++covered[f];
        for (int f = 1; f <= 64; ++f) CHECK(covered[f] == (f <= t ? 1 : 0));
    }
}

TEST_CASE("query examples") {
    FenwickSeq seq(8);
    for (int t = 1; t <= 8; ++t) {
        const auto q = seq.query(t);
        CHECK(q.rotation.vec() == Vec4(1, 0, 0, 0));
        CHECK(q.translation == Vec3::Zero());
    }
    seq.node(4).T = Vec3(1, 0, 0);
    seq.node(6).T = Vec3(0, 1, 0);
    CHECK(seq.query(6).translation == Vec3(1, 1, 0));
    CHECK(seq.query(5).translation == Vec3(1, 0, 0));

    FenwickSeq r(8);
    r.node(4).r = {0.1, 0, 0, 0};
    CHECK(r.query(4).rotation.vec() == Vec4(1, 0, 0, 0));
    CHECK_THROWS_AS(seq.query(9), NumericError);
}

TEST_CASE("query matches coverage oracle exhaustively") {
    std::mt19937 rng(8);
    for (int T = 1; T <= 64; ++T) {
        const FenwickSeq seq = random_seq(T, rng);
        for (int t = 1; t <= T; ++t) {
            const RigidDelta o = coverage_sum(seq, t);
            const auto q = seq.query(t);
            CHECK(q.translation == o.T);
            const UnitQuat expect = quat_normalize(RawQuat::identity() + o.r);
            CHECK((q.rotation.vec() - expect.vec()).norm() <= 1e-12);
        }
        const auto q1 = seq.query(1);
        CHECK(q1.rotation.vec() == Vec4(1, 0, 0, 0));
        CHECK(q1.translation == Vec3::Zero());
    }
}

TEST_CASE("translation query is linear") {
    std::mt19937 rng(9);
    const FenwickSeq a = random_seq(41, rng), b = random_seq(41, rng);
    FenwickSeq c(41);
    const double alpha = 0.7, beta = -1.3;
    for (int j = 1; j <= 41; ++j) c.node(j).T = alpha * a.node(j).T + beta * b.node(j).T;
    for (int t = 1; t <= 41; ++t) {
        const Vec3 expect = alpha * a.query(t).translation + beta * b.query(t).translation;
        CHECK((c.query(t).translation - expect).norm() < 1e-14);
    }
}

TEST_CASE("scatter is the adjoint of the raw prefix") {
    FenwickGrad g(41);
    RigidDelta d;
    d.T = Vec3(1, 2, 3);
    g.scatter(6, d);
    for (int j = 1; j <= 41; ++j) CHECK(g.node(j).is_zero() == (j != 6 && j != 4));
    g.scatter(7, d);
    CHECK(g.node(6).T == 2.0 * d.T);
    CHECK(g.node(4).T == 2.0 * d.T);
    CHECK(g.node(7).T == d.T);

    FenwickGrad f(41);
    f.scatter(1, d);
    CHECK(f.node(1).is_zero());
    FenwickGrad unfrozen(41, false);
    unfrozen.scatter(1, d);
    CHECK(unfrozen.node(1).T == d.T);

    // ⟨raw_prefix(t), g⟩ is linear in the nodes, so its directional
    // derivative along a node perturbation equals the scattered gradient.
    std::mt19937 rng(10);
    std::normal_distribution<double> n;
    for (int trial = 0; trial < 50; ++trial) {
        const FenwickSeq seq = random_seq(41, rng);
        const int t = 1 + static_cast<int>(rng() % 41);
        RigidDelta up;
        up.r = {n(rng), n(rng), n(rng), n(rng)};
        up.T = Vec3(n(rng), n(rng), n(rng));
        FenwickGrad acc(41);
        acc.scatter(t, up);
        const int j = 2 + static_cast<int>(rng() % 40);
        const double h = 1e-3;
        auto inner = [&](const FenwickSeq& s) {
            const RigidDelta p = s.raw_prefix(t);
            return p.r.vec().dot(up.r.vec()) + p.T.dot(up.T);
        };
        for (int c = 0; c < 7; ++c) {
            FenwickSeq plus = seq, minus = seq;
            auto bump = [&](FenwickSeq& s, double v) {
                if (c < 4) {
                    Vec4 r = s.node(j).r.vec();
                    r[c] += v;
                    s.node(j).r = RawQuat::from_vec(r);
                } else {
                    s.node(j).T[c - 4] += v;
                }
            };
            bump(plus, h);
            bump(minus, -h);
            const double fd = (inner(plus) - inner(minus)) / (2 * h);
            const double an = c < 4 ? acc.node(j).r.vec()[c] : acc.node(j).T[c - 4];
            CHECK(std::abs(fd - an) <= 1e-12 * (1 + std::abs(an)) + 1e-10);
        }
    }
}

TEST_CASE("from_prefix") {
    const int T = 41;
    std::vector<RigidDelta> constant(T);
    for (int t = 2; t <= T; ++t) constant[t - 1].T = Vec3(0.5, 0, 0);
    // prefix[0] must be zero; other frames constant.
    const FenwickSeq c = FenwickSeq::from_prefix(constant);
    for (int t = 1; t <= T; ++t) CHECK(c.raw_prefix(t).T == constant[t - 1].T);

    std::vector<RigidDelta> ramp(T);
    for (int t = 1; t <= T; ++t) ramp[t - 1].T = Vec3(t - 1, 0, 0);
    const FenwickSeq r = FenwickSeq::from_prefix(ramp);
    for (int t = 1; t <= T; ++t) CHECK(r.query(t).translation == Vec3(t - 1, 0, 0));

    const FenwickSeq one = FenwickSeq::from_prefix(std::vector<RigidDelta>(1));
    CHECK(one.frame_count() == 1);
    CHECK(one.node(1).is_zero());

    std::vector<RigidDelta> bad(4);
    bad[0].T = Vec3(1, 0, 0);
    CHECK_THROWS_AS(FenwickSeq::from_prefix(bad), NumericError);

    std::mt19937 rng(12);
    std::normal_distribution<double> n;
    std::vector<RigidDelta> rnd(T);
    for (int t = 2; t <= T; ++t) {
        rnd[t - 1].r = {n(rng), n(rng), n(rng), n(rng)};
        rnd[t - 1].T = Vec3(n(rng), n(rng), n(rng));
    }
    const FenwickSeq s = FenwickSeq::from_prefix(rnd);
    for (int t = 1; t <= T; ++t) {
        CHECK((s.raw_prefix(t).T - rnd[t - 1].T).norm() < 1e-12);
        CHECK((s.raw_prefix(t).r.vec() - rnd[t - 1].r.vec()).norm() < 1e-12);
    }
}

TEST_CASE("clamp_after") {
    std::mt19937 rng(13);
    const FenwickSeq seq = random_seq(41, rng);
    CHECK(seq.clamp_after(41) == seq);

    std::vector<RigidDelta> ramp(41);
    for (int t = 1; t <= 41; ++t) ramp[t - 1].T = Vec3(0.1 * (t - 1), 0, 0);
    const FenwickSeq lin = FenwickSeq::from_prefix(ramp).clamp_after(30);
    CHECK(lin.query(35).translation == lin.query(30).translation);

    const FenwickSeq c = seq.clamp_after(30);
    for (int t = 1; t <= 30; ++t) {
        CHECK(c.query(t).translation == seq.query(t).translation);
        CHECK(c.query(t).rotation.vec() == seq.query(t).rotation.vec());
    }
    for (int t = 31; t <= 41; ++t) {
        CHECK((c.query(t).translation - c.query(30).translation).norm() <= 1e-12);
        CHECK((c.query(t).rotation.vec() - c.query(30).rotation.vec()).norm() <= 1e-12);
    }
    CHECK(c.clamp_after(30) == c);

    const FenwickSeq first = seq.clamp_after(1);
    for (int t = 1; t <= 41; ++t) {
        CHECK(first.query(t).translation.norm() <= 1e-15);
        CHECK(std::abs(first.query(t).rotation.w() - 1.0) <= 1e-15);
    }
}

TEST_CASE("serialization round trip") {
    std::mt19937 rng(14);
    FenwickSeq seq = random_seq(41, rng);
    // float32 storage: round values first so the trip is exact.
    for (int j = 1; j <= 41; ++j) {
        auto& nd = seq.node(j);
        auto f32 = [](double v) { return static_cast<double>(static_cast<float>(v)); };
        nd.T = Vec3(f32(nd.T.x()), f32(nd.T.y()), f32(nd.T.z()));
        nd.r = {f32(nd.r.w), f32(nd.r.x), f32(nd.r.y), f32(nd.r.z)};
    }
    std::stringstream buf;
    write_fenwick(buf, seq);
    CHECK(buf.str().size() == 16 + 41 * 7 * 4);
    CHECK(read_fenwick(buf) == seq);

    std::stringstream trunc(buf.str().substr(0, 40));
    CHECK_THROWS_AS(read_fenwick(trunc), FormatError);
    std::stringstream bad("XXXXxxxxxxxxxxxxxxxx");
    CHECK_THROWS_AS(read_fenwick(bad), FormatError);
}
