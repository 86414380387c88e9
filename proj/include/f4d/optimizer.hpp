#pragma once

#include "f4d/distill.hpp"
#include "f4d/regularizers.hpp"
#include "f4d/skinning.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace f4d {

/// A decaying hyper-parameter: value at the first and at the last iteration.
struct Range {
    double start = 1.0;
    double end = 1.0;
};

/// exp(lerp(log start, log end, p)) with the endpoints returned exactly.
double log_lerp(const Range& r, double p);
/// start + p·(end − start) with the endpoints returned exactly.
double lin_lerp(const Range& r, double p);
/// Log-linear learning rate at step i of I (0 ≤ i ≤ I).
double lr_at(const Range& r, int i, int I);

/// Noise-level weight family selection.
struct WeightFamily {
    std::string kind = "logit_normal"; // "uniform" | "logit_normal"
    double location = 0.0;
    double scale = 1.0;

    NoiseWeight make() const;
};

struct TrainConfig {
    int iterations = 2000;
    int batch = 4;
    Range lr_fenwick{0.006, 0.00006};
    Range lr_rot{0.003, 0.00003};
    Range cfg{25.0, 12.0};
    Range w_temporal{9.6, 1.6};
    Range w_arap{3000.0, 300.0};
    /// Fine layer trains once i > fine_start·I.
    double fine_start = 0.5;
    int split_iteration = 100;
    int split_frame = 30;
    WeightFamily weight;
    std::uint64_t seed = 0;

    /// Throws ConfigError on non-positive ranges or out-of-range fractions.
    void validate() const;
};

/// Hyper-parameters in force at training iteration i (1-based).
struct ScheduleRow {
    int iteration = 0;
    double tau = 0.0;
    double lr_fenwick = 0.0;
    double lr_rot = 0.0;
    double cfg = 0.0;
    double w_temporal = 0.0;
    double w_arap = 0.0;
    bool fine_active = false;
};

/// Rows for i = 1..I; decays run from the configured start at i = 1 to the
/// end at i = I.
std::vector<ScheduleRow> schedule_table(const TrainConfig& cfg, const WeightPdf& pdf);

struct SceneObject {
    std::string mesh_path;
    std::string prompt;
    TriMesh mesh;
    PointSet shell;
    PointSet interior;
    DeformModel model;
};

struct Scene {
    std::vector<SceneObject> objects;

    int frame_count() const { return objects.empty() ? 0 : objects.front().model.frame_count(); }
    /// Throws GeometryError when objects disagree on T or hold empty sets.
    void validate() const;
};

/// Per-object sample count, frame count and offset into the latent.
struct LatentLayout {
    int frames = 0;
    std::vector<std::size_t> samples;
    std::vector<std::size_t> offsets;
    std::size_t length = 0;
};

LatentLayout latent_layout(const Scene& scene);

/// Shell tracks of every object, flattened object, frame, sample, xyz.
Latent assemble_latent(const Scene& scene);

/// Standard normal draws for one (iteration, slot) pair; independent of the
/// order in which slots are evaluated.
void fill_normal(std::uint64_t seed, int iteration, int slot, std::span<double> out);

/// Adam moments for one flat parameter vector. Step counts are kept per
/// entry so moment resets restart bias correction for the reset entries only.
struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::vector<std::int64_t> steps;

    static constexpr double beta1 = 0.9;
    static constexpr double beta2 = 0.999;
    static constexpr double eps = 1e-8;

    void resize(std::size_t n);
    void update(std::span<double> params, std::span<const double> grad, double lr);
    void reset(std::size_t begin, std::size_t end);
};

struct StepDiagnostics {
    ScheduleRow schedule;
    /// L2 norm of the batch-mean RFSDS residual.
    double rfsds_norm = 0.0;
    double temporal = 0.0;
    double arap = 0.0;
    /// Norm of the total latent gradient.
    double grad_norm = 0.0;
    std::size_t degenerate_rotations = 0;
    std::size_t weight_fallbacks = 0;
};

/// Runs W-RFSDS training on a scene. The scene is modified in place.
class Trainer {
public:
    using Observer = std::function<void(const StepDiagnostics&, const Scene&)>;

    Trainer(Scene& scene, GuidanceOracle& oracle, TrainConfig cfg);
    ~Trainer();

    const std::vector<ScheduleRow>& schedule() const { return schedule_; }

    /// One optimization step at iteration i (1-based).
    StepDiagnostics step(int i);

    /// Clamps every sequence after the split frame and resets the Adam
    /// moments of the rebuilt nodes.
    void apply_split();

    /// Runs all iterations, splitting after the configured iteration.
    std::vector<StepDiagnostics> train(const Observer& observer = {});

private:
    struct ObjectState;

    Scene& scene_;
    GuidanceOracle& oracle_;
    TrainConfig cfg_;
    std::vector<ScheduleRow> schedule_;
    std::vector<std::unique_ptr<ObjectState>> objects_;
    LatentLayout layout_;
};

/// One line per iteration: iter, tau, lr_fenwick, lr_rot, cfg, L_rfsds_norm,
/// L_temp, L_arap (tab separated), after a header line.
void write_metrics(std::ostream& out, const std::vector<StepDiagnostics>& log);

enum class AuditLoss { temporal, arap, rfsds };

struct AuditResult {
    AuditLoss loss = AuditLoss::temporal;
    std::size_t checked = 0;
    double max_rel_error = 0.0;
};

/// Central differences (step 1e-5) against analytic gradients for randomly
/// chosen parameters with non-negligible gradient. ARAP keeps R̂ frozen at
/// the current state; rfsds differentiates ⟨g, z(θ)⟩ with the residual g of
/// a point-mass oracle held fixed.
AuditResult finite_diff_audit(const Scene& scene, AuditLoss loss, std::size_t samples, std::uint64_t seed = 0);

} // namespace f4d
