#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

namespace f4d {

/// Flat real vector; for point tracks the layout is object, frame, sample, xyz.
using Latent = std::vector<double>;

/// Unnormalized noise-level weight w(τ) on (0, 1).
class NoiseWeight {
public:
    using Density = std::function<double(double)>;

    static NoiseWeight uniform();
    static NoiseWeight logit_normal(double location, double scale);
    static NoiseWeight from_function(Density w, std::string name);

    double operator()(double tau) const { return w_(tau); }
    const std::string& name() const { return name_; }

private:
    NoiseWeight(Density w, std::string name) : w_(std::move(w)), name_(std::move(name)) {}

    Density w_;
    std::string name_;
};

/// Normalized density ŵ = w / ∫w with its CDF h. The integral is tabulated
/// once on fixed cells over [0, 1] with adaptive Simpson quadrature.
class WeightPdf {
public:
    explicit WeightPdf(NoiseWeight w);

    double pdf(double tau) const { return w_(tau) / mass_; }
    double cdf(double tau) const;
    /// Bisection solve of h(τ) = u. Throws NumericError unless 0 < u < 1.
    double inverse(double u) const;
    /// ∫₀¹ w.
    double mass() const { return mass_; }
    const NoiseWeight& weight() const { return w_; }

private:
    static constexpr int kCells = 1024;

    NoiseWeight w_;
    double mass_ = 0.0;
    std::vector<double> prefix_; // raw mass of cells [0, c), kCells + 1 entries
};

/// Throws NumericError when ∫w is zero, negative or not finite.
WeightPdf normalize_weight(const NoiseWeight& w);
double cdf_inverse(const WeightPdf& pdf, double u);

/// τ_i = h⁻¹(1 − i/(I + 1)) for 1 ≤ i ≤ I.
double tau_at(const WeightPdf& pdf, int iterations, int i);
/// τ_1 … τ_I.
std::vector<double> tau_table(const WeightPdf& pdf, int iterations);

/// (1 − τ)z + τε.
Latent noisy(std::span<const double> z, double tau, std::span<const double> eps);

/// v_u + s·(v_c − v_u).
Latent cfg_combine(std::span<const double> v_cond, std::span<const double> v_uncond, double scale);

/// Identifies one oracle query inside a training run.
struct OracleKey {
    int iteration = 0;
    int slot = 0;
};

class GuidanceOracle {
public:
    virtual ~GuidanceOracle() = default;

    /// Predicted velocity v̂(z_τ; τ, cond); data sits at τ = 0, noise at τ = 1.
    virtual Latent velocity(std::span<const double> z_tau, double tau, const std::string& cond,
                            OracleKey key) = 0;

    /// Whether predictions depend on cond. When false the trainer makes one
    /// call per batch item and guidance scaling has no effect.
    virtual bool uses_conditioning() const { return false; }
};

/// (x − z*)/τ. Throws NumericError for τ ≤ 1e-9.
Latent pointmass_velocity(std::span<const double> x, double tau, std::span<const double> z_star);

/// E[ε − x₀ | x_τ] for x₀ ~ N(mean, σ²I), ε ~ N(0, I).
Latent gaussian_velocity(std::span<const double> x, double tau, std::span<const double> mean, double sigma);

class PointMassOracle : public GuidanceOracle {
public:
    explicit PointMassOracle(Latent target) : target_(std::move(target)) {}
    Latent velocity(std::span<const double> z_tau, double tau, const std::string& cond, OracleKey key) override;
    const Latent& target() const { return target_; }

private:
    Latent target_;
};

class GaussianOracle : public GuidanceOracle {
public:
    GaussianOracle(Latent mean, double sigma);
    Latent velocity(std::span<const double> z_tau, double tau, const std::string& cond, OracleKey key) override;

private:
    Latent mean_;
    double sigma_;
};

/// v̂(z_τ) − ε + z with z_τ = noisy(z, τ, ε). When the oracle uses
/// conditioning, v̂ is cfg_combine of the cond and unconditional ("")
/// predictions at cfg_scale.
Latent rfsds_residual(GuidanceOracle& oracle, std::span<const double> z, double tau, std::span<const double> eps,
                      const std::string& cond, OracleKey key = {}, double cfg_scale = 1.0);

/// Replay file dimensions.
struct ReplayShape {
    std::uint32_t iterations = 0;
    std::uint32_t batch = 0;
    std::uint32_t latent_length = 0;

    friend bool operator==(const ReplayShape&, const ReplayShape&) = default;
};

/// Serves pre-recorded velocities keyed by (iteration, slot); iterations are
/// 1-based, slots 0-based. Each record is served once.
class ReplayOracle : public GuidanceOracle {
public:
    explicit ReplayOracle(const std::filesystem::path& path);

    Latent velocity(std::span<const double> z_tau, double tau, const std::string& cond, OracleKey key) override;

    const ReplayShape& shape() const { return shape_; }
    /// Throws ConfigError unless the file covers the requested run.
    void validate(int iterations, int batch, std::size_t latent_length) const;

private:
    ReplayShape shape_;
    std::vector<float> records_;
    std::vector<unsigned char> served_;
    std::mutex mutex_;
};

/// Wraps an oracle and stores its outputs, rounded to float32, for
/// write_replay. The rounded values are also what it returns, so a replay of
/// the file reproduces the recorded run exactly.
class ReplayRecorder : public GuidanceOracle {
public:
    ReplayRecorder(GuidanceOracle& inner, ReplayShape shape);

    Latent velocity(std::span<const double> z_tau, double tau, const std::string& cond, OracleKey key) override;
    bool uses_conditioning() const override { return false; }
    void write(const std::filesystem::path& path) const;

private:
    GuidanceOracle& inner_;
    ReplayShape shape_;
    std::vector<float> records_;
    std::mutex mutex_;
};

void write_replay(const std::filesystem::path& path, const ReplayShape& shape, std::span<const float> records);

} // namespace f4d
