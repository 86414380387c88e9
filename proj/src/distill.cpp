#include "f4d/distill.hpp"

#include "f4d/binary_io.hpp"
#include "f4d/error.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

namespace f4d {

namespace {

double simpson(const NoiseWeight& w, double a, double fa, double b, double fb, double m, double fm, double whole,
               double eps, int depth) {
    const double lm = 0.5 * (a + m);
    const double rm = 0.5 * (m + b);
    const double flm = w(lm);
    const double frm = w(rm);
    const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    const double delta = left + right - whole;
    if (depth <= 0 || std::abs(delta) <= 15.0 * eps) return left + right + delta / 15.0;
    return simpson(w, a, fa, m, fm, lm, flm, left, 0.5 * eps, depth - 1) +
           simpson(w, m, fm, b, fb, rm, frm, right, 0.5 * eps, depth - 1);
}

// Adaptive Simpson with a tolerance relative to the first estimate; cells
// are short, so the coarse estimate sets a meaningful scale.
double integrate(const NoiseWeight& w, double a, double b) {
    if (b <= a) return 0.0;
    const double fa = w(a), fb = w(b), m = 0.5 * (a + b), fm = w(m);
    const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    const double eps = std::max(1e-13 * std::abs(whole), 1e-300);
    return simpson(w, a, fa, b, fb, m, fm, whole, eps, 24);
}

void check_tau(double tau, const char* what) {
    if (!(tau > 0.0 && tau < 1.0)) {
        throw NumericError(std::string(what) + ": tau " + std::to_string(tau) + " outside (0, 1)");
    }
}

void check_same(std::size_t a, std::size_t b, const char* what) {
    if (a != b) {
        throw NumericError(std::string(what) + ": shape mismatch (" + std::to_string(a) + " vs " +
                           std::to_string(b) + ")");
    }
}

constexpr char kReplayMagic[] = "RFRV";
constexpr std::uint32_t kReplayVersion = 1;
constexpr std::size_t kReplayHeader = 4 + 4 * 4;

} // namespace

NoiseWeight NoiseWeight::uniform() {
    return {[](double t) { return (t >= 0.0 && t <= 1.0) ? 1.0 : 0.0; }, "uniform"};
}

NoiseWeight NoiseWeight::logit_normal(double location, double scale) {
    if (!(scale > 0.0)) throw ConfigError("logit-normal scale must be positive");
    const double norm = 1.0 / (scale * std::sqrt(2.0 * std::numbers::pi));
    return {[=](double t) {
                if (!(t > 0.0 && t < 1.0)) return 0.0;
                const double z = (std::log(t / (1.0 - t)) - location) / scale;
                return norm * std::exp(-0.5 * z * z) / (t * (1.0 - t));
            },
            "logit_normal(" + std::to_string(location) + ", " + std::to_string(scale) + ")"};
}

NoiseWeight NoiseWeight::from_function(Density w, std::string name) {
    return {std::move(w), std::move(name)};
}

WeightPdf::WeightPdf(NoiseWeight w) : w_(std::move(w)) {
    prefix_.assign(kCells + 1, 0.0);
    for (int c = 0; c < kCells; ++c) {
        const double a = static_cast<double>(c) / kCells;
        const double b = static_cast<double>(c + 1) / kCells;
        const double cell = integrate(w_, a, b);
        if (!(cell >= 0.0) || !std::isfinite(cell)) {
            throw NumericError("noise weight " + w_.name() + " is negative or not finite on [" +
                               std::to_string(a) + ", " + std::to_string(b) + "]");
        }
        prefix_[c + 1] = prefix_[c] + cell;
    }
    mass_ = prefix_.back();
    if (!(mass_ > 0.0) || !std::isfinite(mass_)) {
        throw NumericError("noise weight " + w_.name() + " has no positive finite integral");
    }
}

double WeightPdf::cdf(double tau) const {
    if (tau <= 0.0) return 0.0;
    if (tau >= 1.0) return 1.0;
    const int c = std::min(kCells - 1, static_cast<int>(tau * kCells));
    const double a = static_cast<double>(c) / kCells;
    return (prefix_[c] + integrate(w_, a, tau)) / mass_;
}

double WeightPdf::inverse(double u) const {
    if (!(u > 0.0 && u < 1.0)) {
        throw NumericError("cdf_inverse: u = " + std::to_string(u) + " outside (0, 1)");
    }
    // Bracket by cell, then bisect inside it.
    const double target = u * mass_;
    const auto it = std::upper_bound(prefix_.begin(), prefix_.end(), target);
    int c = static_cast<int>(it - prefix_.begin()) - 1;
    c = std::clamp(c, 0, kCells - 1);
    double lo = static_cast<double>(c) / kCells;
    double hi = static_cast<double>(c + 1) / kCells;
    for (int iter = 0; iter < 200 && hi - lo > 1e-16; ++iter) {
        const double mid = 0.5 * (lo + hi);
        const double h = cdf(mid);
        if (h == u) return mid;
        (h < u ? lo : hi) = mid;
    }
    const double tau = 0.5 * (lo + hi);
    if (std::abs(cdf(tau) - u) > 1e-8) {
        throw NumericError("cdf_inverse did not converge for u = " + std::to_string(u));
    }
    return tau;
}

WeightPdf normalize_weight(const NoiseWeight& w) {
    return WeightPdf(w);
}

double cdf_inverse(const WeightPdf& pdf, double u) {
    return pdf.inverse(u);
}

double tau_at(const WeightPdf& pdf, int iterations, int i) {
    if (iterations < 1 || i < 1 || i > iterations) {
        throw NumericError("tau_at: iteration " + std::to_string(i) + " outside [1, " +
                           std::to_string(iterations) + "]");
    }
    return pdf.inverse(1.0 - static_cast<double>(i) / (iterations + 1));
}

std::vector<double> tau_table(const WeightPdf& pdf, int iterations) {
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(std::max(iterations, 0)));
    for (int i = 1; i <= iterations; ++i) out.push_back(tau_at(pdf, iterations, i));
    return out;
}

Latent noisy(std::span<const double> z, double tau, std::span<const double> eps) {
    check_same(z.size(), eps.size(), "noisy");
    check_tau(tau, "noisy");
    Latent out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = (1.0 - tau) * z[i] + tau * eps[i];
    return out;
}

Latent cfg_combine(std::span<const double> v_cond, std::span<const double> v_uncond, double scale) {
    check_same(v_cond.size(), v_uncond.size(), "cfg_combine");
    Latent out(v_cond.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v_uncond[i] + scale * (v_cond[i] - v_uncond[i]);
    return out;
}

Latent pointmass_velocity(std::span<const double> x, double tau, std::span<const double> z_star) {
    check_same(x.size(), z_star.size(), "pointmass_velocity");
    if (!(tau > 1e-9)) throw NumericError("pointmass_velocity: tau must exceed 1e-9");
    Latent out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - z_star[i]) / tau;
    return out;
}

Latent gaussian_velocity(std::span<const double> x, double tau, std::span<const double> mean, double sigma) {
    check_same(x.size(), mean.size(), "gaussian_velocity");
    if (!(sigma > 0.0)) throw NumericError("gaussian_velocity: sigma must be positive");
    check_tau(tau, "gaussian_velocity");
    // x_τ = a·x₀ + τ·ε with a = 1 − τ; v = ε − x₀.
    // Cov(v, x_τ) = τ − aσ², Var(x_τ) = a²σ² + τ², E[v] = −mean.
    const double a = 1.0 - tau;
    const double s2 = sigma * sigma;
    const double gain = (tau - a * s2) / (a * a * s2 + tau * tau);
    Latent out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = gain * (x[i] - a * mean[i]) - mean[i];
    return out;
}

Latent PointMassOracle::velocity(std::span<const double> z_tau, double tau, const std::string&, OracleKey) {
    return pointmass_velocity(z_tau, tau, target_);
}

GaussianOracle::GaussianOracle(Latent mean, double sigma) : mean_(std::move(mean)), sigma_(sigma) {
    if (!(sigma > 0.0)) throw ConfigError("gaussian oracle sigma must be positive");
}

Latent GaussianOracle::velocity(std::span<const double> z_tau, double tau, const std::string&, OracleKey) {
    return gaussian_velocity(z_tau, tau, mean_, sigma_);
}

Latent rfsds_residual(GuidanceOracle& oracle, std::span<const double> z, double tau, std::span<const double> eps,
                      const std::string& cond, OracleKey key, double cfg_scale) {
    const Latent z_tau = noisy(z, tau, eps);
    Latent v = oracle.velocity(z_tau, tau, cond, key);
    if (oracle.uses_conditioning()) {
        const Latent vu = oracle.velocity(z_tau, tau, "", key);
        v = cfg_combine(v, vu, cfg_scale);
    }
    check_same(v.size(), z.size(), "oracle output");
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = v[i] - eps[i] + z[i];
        if (!std::isfinite(v[i])) throw NumericError("non-finite RFSDS residual");
    }
    return v;
}

// ---------------------------------------------------------------------------

ReplayOracle::ReplayOracle(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path.string());
    bin::expect_magic(in, kReplayMagic);
    const auto version = bin::get_u32(in, "RFRV version");
    if (version != kReplayVersion) throw FormatError("RFRV: unsupported version " + std::to_string(version));
    shape_.iterations = bin::get_u32(in, "RFRV iterations");
    shape_.batch = bin::get_u32(in, "RFRV batch");
    shape_.latent_length = bin::get_u32(in, "RFRV latent length");
    const auto count = static_cast<std::uint64_t>(shape_.iterations) * shape_.batch * shape_.latent_length;
    const auto size = std::filesystem::file_size(path);
    if (size != kReplayHeader + 4 * count) {
        throw FormatError("RFRV: " + path.string() + " holds " + std::to_string(size) + " bytes, header implies " +
                          std::to_string(kReplayHeader + 4 * count));
    }
    records_.resize(count);
    for (auto& v : records_) v = bin::get_f32(in, "RFRV record");
    served_.assign(static_cast<std::size_t>(shape_.iterations) * shape_.batch, 0);
}

void ReplayOracle::validate(int iterations, int batch, std::size_t latent_length) const {
    if (shape_.latent_length != latent_length || shape_.batch < static_cast<std::uint32_t>(std::max(batch, 0)) ||
        shape_.iterations < static_cast<std::uint32_t>(std::max(iterations, 0))) {
        throw ConfigError("replay file shape (" + std::to_string(shape_.iterations) + " iterations, " +
                          std::to_string(shape_.batch) + " slots, length " + std::to_string(shape_.latent_length) +
                          ") does not cover the run (" + std::to_string(iterations) + ", " + std::to_string(batch) +
                          ", " + std::to_string(latent_length) + ")");
    }
}

Latent ReplayOracle::velocity(std::span<const double> z_tau, double, const std::string&, OracleKey key) {
    if (z_tau.size() != shape_.latent_length) {
        throw ConfigError("replay latent length " + std::to_string(shape_.latent_length) + " does not match " +
                          std::to_string(z_tau.size()));
    }
    if (key.iteration < 1 || static_cast<std::uint32_t>(key.iteration) > shape_.iterations || key.slot < 0 ||
        static_cast<std::uint32_t>(key.slot) >= shape_.batch) {
        throw ConfigError("replay has no record for iteration " + std::to_string(key.iteration) + ", slot " +
                          std::to_string(key.slot));
    }
    const auto rec = static_cast<std::size_t>(key.iteration - 1) * shape_.batch + static_cast<std::size_t>(key.slot);
    {
        std::lock_guard lock(mutex_);
        if (served_[rec]) {
            throw ConfigError("replay record for iteration " + std::to_string(key.iteration) + ", slot " +
                              std::to_string(key.slot) + " already served");
        }
        served_[rec] = 1;
    }
    const float* p = &records_[rec * shape_.latent_length];
    return Latent(p, p + shape_.latent_length);
}

ReplayRecorder::ReplayRecorder(GuidanceOracle& inner, ReplayShape shape)
    : inner_(inner), shape_(shape),
      records_(static_cast<std::size_t>(shape.iterations) * shape.batch * shape.latent_length, 0.0f) {}

Latent ReplayRecorder::velocity(std::span<const double> z_tau, double tau, const std::string& cond, OracleKey key) {
    Latent v = inner_.velocity(z_tau, tau, cond, key);
    if (v.size() != shape_.latent_length || key.iteration < 1 ||
        static_cast<std::uint32_t>(key.iteration) > shape_.iterations || key.slot < 0 ||
        static_cast<std::uint32_t>(key.slot) >= shape_.batch) {
        throw ConfigError("recorder shape does not match the query");
    }
    const auto rec = static_cast<std::size_t>(key.iteration - 1) * shape_.batch + static_cast<std::size_t>(key.slot);
    std::lock_guard lock(mutex_);
    for (std::size_t i = 0; i < v.size(); ++i) {
        const float f = static_cast<float>(v[i]);
        records_[rec * shape_.latent_length + i] = f;
        v[i] = f;
    }
    return v;
}

void ReplayRecorder::write(const std::filesystem::path& path) const {
    write_replay(path, shape_, records_);
}

void write_replay(const std::filesystem::path& path, const ReplayShape& shape, std::span<const float> records) {
    if (records.size() != static_cast<std::size_t>(shape.iterations) * shape.batch * shape.latent_length) {
        throw FormatError("RFRV: record count does not match shape");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path.string());
    bin::put_magic(out, kReplayMagic);
    bin::put_u32(out, kReplayVersion);
    bin::put_u32(out, shape.iterations);
    bin::put_u32(out, shape.batch);
    bin::put_u32(out, shape.latent_length);
    for (float v : records) bin::put_f32(out, v);
    if (!out) throw ConfigError("failed writing " + path.string());
}

} // namespace f4d
