#include "doctest.h"

#include "f4d/distill.hpp"
#include "f4d/error.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

using namespace f4d;

namespace {

// Composite Gauss–Legendre (5 points) on n panels: independent quadrature.
double gauss_legendre(const std::function<double(double)>& f, double a, double b, int panels) {
    static const double x[5] = {0.0, -0.5384693101056831, 0.5384693101056831, -0.9061798459386640,
                                0.9061798459386640};
    static const double w[5] = {0.5688888888888889, 0.4786286704993665, 0.4786286704993665, 0.2369268850561891,
                                0.2369268850561891};
    double sum = 0.0;
    const double h = (b - a) / panels;
    for (int p = 0; p < panels; ++p) {
        const double c = a + (p + 0.5) * h;
        for (int k = 0; k < 5; ++k) sum += 0.5 * h * w[k] * f(c + 0.5 * h * x[k]);
    }
    return sum;
}

Latent random_latent(std::size_t n, std::mt19937& rng) {
    std::normal_distribution<double> d;
    Latent v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

} // namespace

TEST_CASE("normalize weight") {
    const WeightPdf u = normalize_weight(NoiseWeight::uniform());
    CHECK(u.mass() == doctest::Approx(1.0).epsilon(1e-14));
    for (double t : {0.1, 0.5, 0.9}) CHECK(u.pdf(t) == doctest::Approx(1.0));

    const WeightPdf lin = normalize_weight(NoiseWeight::from_function([](double t) { return t; }, "linear"));
    for (double t : {0.1, 0.5, 0.9}) CHECK(lin.pdf(t) == doctest::Approx(2 * t).epsilon(1e-12));

    const NoiseWeight ln = NoiseWeight::logit_normal(0.0, 1.0);
    const WeightPdf lp = normalize_weight(ln);
    const double mass = gauss_legendre([&](double t) { return lp.pdf(t); }, 0.0, 1.0, 4000);
    CHECK(std::abs(mass - 1.0) <= 1e-6);
    CHECK(std::abs(lp.mass() - 1.0) <= 1e-6); // the logit-normal density is already normalized

    CHECK_THROWS_AS(normalize_weight(NoiseWeight::from_function([](double) { return 0.0; }, "zero")), NumericError);
    CHECK_THROWS_AS(normalize_weight(NoiseWeight::from_function([](double) { return NAN; }, "nan")), NumericError);
}

TEST_CASE("cdf inverse") {
    const WeightPdf u = normalize_weight(NoiseWeight::uniform());
    CHECK(cdf_inverse(u, 0.75) == doctest::Approx(0.75).epsilon(1e-12));
    const WeightPdf lin = normalize_weight(NoiseWeight::from_function([](double t) { return t; }, "linear"));
    CHECK(std::abs(cdf_inverse(lin, 0.25) - 0.5) < 1e-8);
    const WeightPdf ln = normalize_weight(NoiseWeight::logit_normal(0.0, 1.0));
    CHECK(std::abs(cdf_inverse(ln, 0.5) - 0.5) < 1e-8);
    CHECK_THROWS_AS(cdf_inverse(u, 0.0), NumericError);
    CHECK_THROWS_AS(cdf_inverse(u, 1.0), NumericError);

    // Logit-normal CDF has a closed form through the normal CDF.
    for (double t : {0.01, 0.2, 0.5, 0.77, 0.99}) {
        const double expect = 0.5 * std::erfc(-std::log(t / (1 - t)) / std::numbers::sqrt2);
        CHECK(std::abs(ln.cdf(t) - expect) < 1e-10);
        CHECK(std::abs(ln.cdf(cdf_inverse(ln, expect)) - expect) <= 1e-8);
    }
}

TEST_CASE("tau schedule") {
    const WeightPdf u = normalize_weight(NoiseWeight::uniform());
    const auto three = tau_table(u, 3);
    CHECK(three[0] == doctest::Approx(0.75));
    CHECK(three[1] == doctest::Approx(0.5));
    CHECK(three[2] == doctest::Approx(0.25));

    const auto big = tau_table(u, 2000);
    CHECK(std::abs(big.front() - 2000.0 / 2001.0) < 1e-8);
    CHECK(std::abs(big.back() - 1.0 / 2001.0) < 1e-8);
    CHECK(big.front() == doctest::Approx(0.9995).epsilon(1e-3));
    CHECK(big.back() == doctest::Approx(0.0005).epsilon(1e-3));

    const WeightPdf ln = normalize_weight(NoiseWeight::logit_normal(0.3, 0.8));
    const auto lt = tau_table(ln, 500);
    for (std::size_t i = 1; i < lt.size(); ++i) CHECK(lt[i] <= lt[i - 1]);
    for (double t : lt) CHECK((t > 0.0 && t < 1.0));
    CHECK_THROWS_AS(tau_at(u, 3, 0), NumericError);
    CHECK_THROWS_AS(tau_at(u, 3, 4), NumericError);
}

TEST_CASE("noisy and cfg") {
    const Latent z = {1, 1}, eps = {-1, 1};
    const Latent out = noisy(z, 0.5, eps);
    CHECK(out == Latent{0, 1});
    const Latent zero = {0, 0};
    const Latent e2 = {0.3, -0.7};
    const Latent n0 = noisy(zero, 0.25, e2);
    CHECK(n0[0] == 0.25 * 0.3);
    const Latent tiny = noisy(z, 1e-9, eps);
    CHECK(std::abs(tiny[0] - 1.0) < 1e-8);
    CHECK_THROWS_AS(noisy(z, 0.5, Latent{1}), NumericError);
    CHECK_THROWS_AS(noisy(z, 1.0, eps), NumericError);

    const Latent vc = {2, 2}, vu = {0, 0};
    CHECK(cfg_combine(vc, vu, 1.0) == vc);
    CHECK(cfg_combine(vc, vu, 0.0) == vu);
    CHECK(cfg_combine(vc, vu, 12.0) == Latent{24, 24});
    CHECK_THROWS_AS(cfg_combine(vc, Latent{1}, 1.0), NumericError);
}

TEST_CASE("point-mass oracle") {
    const Latent zs = {1, 0};
    const Latent x = {0.5, 0};
    CHECK(pointmass_velocity(x, 0.5, zs) == Latent{-1, 0});
    CHECK(pointmass_velocity(zs, 0.3, zs) == Latent{0, 0});
    CHECK_THROWS_AS(pointmass_velocity(x, 1e-10, zs), NumericError);

    // Substitution identity: x_τ = noisy(z*, τ, ε) gives velocity ε − z*.
    std::mt19937 rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const Latent target = random_latent(20, rng), eps = random_latent(20, rng);
        const double tau = 0.05 + 0.9 * (trial / 50.0);
        const Latent v = pointmass_velocity(noisy(target, tau, eps), tau, target);
        for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::abs(v[i] - (eps[i] - target[i])) < 1e-12 / tau);
    }

    PointMassOracle oracle(zs);
    const Latent eps = {0.4, -0.2};
    CHECK(rfsds_residual(oracle, zs, 0.4, eps, "").at(0) == doctest::Approx(0.0));
    const Latent z = {3, -1};
    const Latent g = rfsds_residual(oracle, z, 0.25, eps, "prompt");
    CHECK(std::abs(g[0] - (3 - 1) / 0.25) < 1e-12);
    CHECK(std::abs(g[1] - (-1 - 0) / 0.25) < 1e-12);
}

TEST_CASE("gaussian oracle") {
    std::mt19937 rng(2);
    const Latent mean = random_latent(5, rng);
    const Latent x = random_latent(5, rng);
    for (double tau : {0.1, 0.5, 0.9}) {
        const Latent g = gaussian_velocity(x, tau, mean, 1e-4);
        const Latent g2 = gaussian_velocity(x, tau, mean, 2e-4);
        const Latent p = pointmass_velocity(x, tau, mean);
        // The gap to the point mass is O(σ²/τ³): within 1e-6 away from small τ,
        // and quadrupling when σ doubles.
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (tau >= 0.5) CHECK(std::abs(g[i] - p[i]) < 1e-6);
            CHECK((g2[i] - p[i]) / (g[i] - p[i]) == doctest::Approx(4.0).epsilon(1e-3));
        }
        // On the mode path the residual relative to −mean vanishes.
        Latent mode(mean.size());
        for (std::size_t i = 0; i < mean.size(); ++i) mode[i] = (1 - tau) * mean[i];
        const Latent gm = gaussian_velocity(mode, tau, mean, 0.7);
        for (std::size_t i = 0; i < mean.size(); ++i) CHECK(std::abs(gm[i] + mean[i]) < 1e-12);
    }
    CHECK_THROWS_AS(gaussian_velocity(x, 0.5, mean, 0.0), NumericError);

    // Monte-Carlo oracle: regress v = ε − x₀ on x_τ for mean 0, σ = 1. The
    // posterior mean is linear, so the least-squares slope is the coefficient.
    const double tau = 0.3, sigma = 1.0;
    std::normal_distribution<double> n;
    double sxx = 0, sxv = 0;
    const int N = 100000;
    for (int i = 0; i < N; ++i) {
        const double x0 = sigma * n(rng), e = n(rng);
        const double xt = (1 - tau) * x0 + tau * e;
        sxx += xt * xt;
        sxv += xt * (e - x0);
    }
    const double slope = sxv / sxx;
    const Latent one = {1.0}, zero = {0.0};
    const double coeff = gaussian_velocity(one, tau, zero, sigma)[0];
    CHECK(std::abs(slope - coeff) <= 1e-2 * std::abs(coeff));

    // Conditional expectation in a narrow bin for a non-zero mean.
    const double m = 0.8, s = 0.5;
    const double x_query = 0.3;
    double acc = 0;
    int hits = 0;
    for (int i = 0; i < 2000000 && hits < 100000; ++i) {
        const double x0 = m + s * n(rng), e = n(rng);
        const double xt = (1 - tau) * x0 + tau * e;
        if (std::abs(xt - x_query) < 0.01) {
            acc += e - x0;
            ++hits;
        }
    }
    const Latent xq = {x_query}, mq = {m};
    const double expect = gaussian_velocity(xq, tau, mq, s)[0];
    CHECK(hits > 10000);
    CHECK(std::abs(acc / hits - expect) <= 1e-2 * std::abs(expect) + 3.0 * 2.0 / std::sqrt(hits));
}

TEST_CASE("replay oracle") {
    const auto dir = std::filesystem::temp_directory_path() / "f4d_distill_test";
    std::filesystem::create_directories(dir);
    std::mt19937 rng(3);
    const Latent target = random_latent(12, rng);
    PointMassOracle inner(target);

    ReplayRecorder rec(inner, {3, 2, 12});
    std::vector<Latent> recorded;
    std::vector<Latent> eps_draws;
    const Latent z = random_latent(12, rng);
    for (int it = 1; it <= 3; ++it) {
        for (int slot = 0; slot < 2; ++slot) {
            eps_draws.push_back(random_latent(12, rng));
            recorded.push_back(rfsds_residual(rec, z, 0.2 * it, eps_draws.back(), "", {it, slot}));
        }
    }
    rec.write(dir / "r.rfrv");
    CHECK(std::filesystem::file_size(dir / "r.rfrv") == 20 + 3 * 2 * 12 * 4);

    ReplayOracle replay(dir / "r.rfrv");
    CHECK(replay.shape() == ReplayShape{3, 2, 12});
    CHECK_NOTHROW(replay.validate(3, 2, 12));
    CHECK_THROWS_AS(replay.validate(4, 2, 12), ConfigError);
    CHECK_THROWS_AS(replay.validate(3, 2, 13), ConfigError);
    std::size_t k = 0;
    for (int it = 1; it <= 3; ++it)
        for (int slot = 0; slot < 2; ++slot, ++k)
            CHECK(rfsds_residual(replay, z, 0.2 * it, eps_draws[k], "", {it, slot}) == recorded[k]);
    CHECK_THROWS_AS(replay.velocity(z, 0.2, "", {1, 0}), ConfigError);

    write_replay(dir / "one.rfrv", {1, 1, 2}, std::vector<float>{0.5f, -1.0f});
    ReplayOracle single(dir / "one.rfrv");
    const Latent two = {0, 0};
    CHECK(single.velocity(two, 0.5, "", {1, 0}) == Latent{0.5, -1.0});
    CHECK_THROWS_AS(single.velocity(two, 0.5, "", {1, 0}), ConfigError);
    CHECK_THROWS_AS(single.velocity(Latent{0, 0, 0}, 0.5, "", {1, 0}), ConfigError);

    {
        std::ifstream in(dir / "r.rfrv", std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), {});
        std::ofstream out(dir / "trunc.rfrv", std::ios::binary);
        out.write(bytes.data(), 30);
        std::ofstream hdr(dir / "hdr.rfrv", std::ios::binary);
        hdr.write(bytes.data(), 10);
    }
    CHECK_THROWS_AS(ReplayOracle(dir / "trunc.rfrv"), FormatError);
    CHECK_THROWS_AS(ReplayOracle(dir / "hdr.rfrv"), FormatError);
    CHECK_THROWS_AS(ReplayOracle(dir / "absent.rfrv"), ConfigError);
    std::filesystem::remove_all(dir);
}
