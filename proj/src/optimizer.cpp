#include "f4d/optimizer.hpp"

#include "f4d/error.hpp"
#include "f4d/parallel.hpp"

#include <boost/random/normal_distribution.hpp>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <random>

namespace f4d {

double log_lerp(const Range& r, double p) {
    if (p <= 0.0) return r.start;
    if (p >= 1.0) return r.end;
    if (r.start == 0.0 && r.end == 0.0) return 0.0;
    return std::exp(std::log(r.start) + p * (std::log(r.end) - std::log(r.start)));
}

double lin_lerp(const Range& r, double p) {
    if (p <= 0.0) return r.start;
    if (p >= 1.0) return r.end;
    return r.start + p * (r.end - r.start);
}

double lr_at(const Range& r, int i, int I) {
    if (I <= 0 || i < 0 || i > I) throw ConfigError("lr_at: step outside [0, I]");
    return log_lerp(r, static_cast<double>(i) / I);
}

NoiseWeight WeightFamily::make() const {
    if (kind == "uniform") return NoiseWeight::uniform();
    if (kind == "logit_normal") return NoiseWeight::logit_normal(location, scale);
    throw ConfigError("unknown weight family '" + kind + "'");
}

void TrainConfig::validate() const {
    auto positive = [](const Range& r, const char* name) {
        if (!(r.start > 0.0) || !(r.end > 0.0) || !std::isfinite(r.start) || !std::isfinite(r.end)) {
            throw ConfigError(std::string(name) + " range must be positive and finite");
        }
    };
    if (iterations < 0) throw ConfigError("iterations must be non-negative");
    if (batch < 1) throw ConfigError("batch must be at least 1");
    positive(lr_fenwick, "lr_fenwick");
    positive(lr_rot, "lr_rot");
    positive(cfg, "cfg");
    // Regularizer weights may be switched off entirely.
    auto weight_range = [&](const Range& r, const char* name) {
        if (r.start == 0.0 && r.end == 0.0) return;
        positive(r, name);
    };
    weight_range(w_temporal, "w_temporal");
    weight_range(w_arap, "w_arap");
    if (!(fine_start >= 0.0 && fine_start <= 1.0)) throw ConfigError("fine_start must lie in [0, 1]");
    if (split_frame < 1) throw ConfigError("split_frame must be at least 1");
    if (weight.kind != "uniform" && weight.kind != "logit_normal") {
        throw ConfigError("unknown weight family '" + weight.kind + "'");
    }
    if (weight.kind == "logit_normal" && !(weight.scale > 0.0)) throw ConfigError("logit-normal scale must be positive");
}

std::vector<ScheduleRow> schedule_table(const TrainConfig& cfg, const WeightPdf& pdf) {
    cfg.validate();
    const int I = cfg.iterations;
    const auto taus = tau_table(pdf, I);
    std::vector<ScheduleRow> rows;
    rows.reserve(static_cast<std::size_t>(I));
    for (int i = 1; i <= I; ++i) {
        const double p = I == 1 ? 0.0 : static_cast<double>(i - 1) / (I - 1);
        ScheduleRow r;
        r.iteration = i;
        r.tau = taus[static_cast<std::size_t>(i - 1)];
        r.lr_fenwick = log_lerp(cfg.lr_fenwick, p);
        r.lr_rot = log_lerp(cfg.lr_rot, p);
        r.cfg = lin_lerp(cfg.cfg, p);
        r.w_temporal = log_lerp(cfg.w_temporal, p);
        r.w_arap = log_lerp(cfg.w_arap, p);
        r.fine_active = i > cfg.fine_start * I;
        rows.push_back(r);
    }
    return rows;
}

void Scene::validate() const {
    if (objects.empty()) throw GeometryError("scene has no objects");
    const int T = frame_count();
    for (const auto& o : objects) {
        if (o.shell.size() < 2) throw GeometryError("object shell needs at least two samples");
        o.model.coarse.validate();
        if (!o.model.fine.points.empty()) o.model.fine.validate();
        if (o.model.frame_count() != T) throw GeometryError("objects disagree on the frame count");
        if (!o.model.fine.points.empty() && o.model.fine.frame_count() != T) {
            throw GeometryError("fine layer frame count differs from the coarse layer");
        }
    }
}

LatentLayout latent_layout(const Scene& scene) {
    LatentLayout l;
    l.frames = scene.frame_count();
    for (const auto& o : scene.objects) {
        l.offsets.push_back(l.length);
        l.samples.push_back(o.shell.size());
        l.length += 3 * o.shell.size() * static_cast<std::size_t>(l.frames);
    }
    return l;
}

Latent assemble_latent(const Scene& scene) {
    Latent z;
    z.reserve(latent_layout(scene).length);
    for (const auto& o : scene.objects) {
        TrackSkinner skin(o.model, o.shell);
        std::vector<Vec3> tracks;
        skin.forward(o.model, tracks);
        for (const auto& p : tracks) z.insert(z.end(), {p.x(), p.y(), p.z()});
    }
    return z;
}

void fill_normal(std::uint64_t seed, int iteration, int slot, std::span<double> out) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(iteration), static_cast<std::uint32_t>(slot)};
    std::mt19937_64 eng(seq);
    boost::random::normal_distribution<double> normal;
    for (auto& v : out) v = normal(eng);
}

// ---------------------------------------------------------------------------

void AdamState::resize(std::size_t n) {
    m.assign(n, 0.0);
    v.assign(n, 0.0);
    steps.assign(n, 0);
}

void AdamState::update(std::span<double> params, std::span<const double> grad, double lr) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        const auto t = static_cast<double>(++steps[i]);
        const double mhat = m[i] / (1.0 - std::pow(beta1, t));
        const double vhat = v[i] / (1.0 - std::pow(beta2, t));
        params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

void AdamState::reset(std::size_t begin, std::size_t end) {
    std::fill(m.begin() + static_cast<std::ptrdiff_t>(begin), m.begin() + static_cast<std::ptrdiff_t>(end), 0.0);
    std::fill(v.begin() + static_cast<std::ptrdiff_t>(begin), v.begin() + static_cast<std::ptrdiff_t>(end), 0.0);
    std::fill(steps.begin() + static_cast<std::ptrdiff_t>(begin), steps.begin() + static_cast<std::ptrdiff_t>(end), 0);
}

namespace {

constexpr std::size_t kNodeWidth = 7;

std::size_t node_slot(const ControlLayer& layer, std::size_t k, int j) {
    return (k * static_cast<std::size_t>(layer.frame_count() - 1) + static_cast<std::size_t>(j - 2)) * kNodeWidth;
}

// Flat parameter views of one layer: nodes 2..T, log scales, cov rotations.
struct LayerParams {
    std::vector<double> nodes;
    std::vector<double> log_scale;
    std::vector<double> cov_rot;
};

LayerParams pack(const ControlLayer& layer) {
    LayerParams p;
    const int T = layer.frame_count();
    for (const auto& cp : layer.points) {
        for (int j = 2; j <= T; ++j) {
            const auto& n = cp.seq.node(j);
            p.nodes.insert(p.nodes.end(), {n.r.w, n.r.x, n.r.y, n.r.z, n.T.x(), n.T.y(), n.T.z()});
        }
        p.log_scale.insert(p.log_scale.end(), {cp.log_scale.x(), cp.log_scale.y(), cp.log_scale.z()});
        p.cov_rot.insert(p.cov_rot.end(), {cp.cov_rot.w, cp.cov_rot.x, cp.cov_rot.y, cp.cov_rot.z});
    }
    return p;
}

void unpack(const LayerParams& p, ControlLayer& layer) {
    const int T = layer.frame_count();
    std::size_t a = 0;
    for (std::size_t k = 0; k < layer.size(); ++k) {
        auto& cp = layer.points[k];
        for (int j = 2; j <= T; ++j, a += kNodeWidth) {
            auto& n = cp.seq.node(j);
            n.r = {p.nodes[a], p.nodes[a + 1], p.nodes[a + 2], p.nodes[a + 3]};
            n.T = Vec3(p.nodes[a + 4], p.nodes[a + 5], p.nodes[a + 6]);
        }
        cp.log_scale = Vec3(p.log_scale[3 * k], p.log_scale[3 * k + 1], p.log_scale[3 * k + 2]);
        cp.cov_rot = {p.cov_rot[4 * k], p.cov_rot[4 * k + 1], p.cov_rot[4 * k + 2], p.cov_rot[4 * k + 3]};
    }
}

LayerParams pack_grad(const LayerGrad& g, int T) {
    LayerParams p;
    for (std::size_t k = 0; k < g.nodes.size(); ++k) {
        for (int j = 2; j <= T; ++j) {
            const auto& n = g.nodes[k][static_cast<std::size_t>(j - 1)];
            p.nodes.insert(p.nodes.end(), {n.r.w, n.r.x, n.r.y, n.r.z, n.T.x(), n.T.y(), n.T.z()});
        }
        p.log_scale.insert(p.log_scale.end(), {g.log_scale[k].x(), g.log_scale[k].y(), g.log_scale[k].z()});
        p.cov_rot.insert(p.cov_rot.end(), {g.cov_rot[k][0], g.cov_rot[k][1], g.cov_rot[k][2], g.cov_rot[k][3]});
    }
    return p;
}

bool all_finite(const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

} // namespace

struct Trainer::ObjectState {
    TrackSkinner skin;
    NeighborGraph graph;
    // [layer][group]: nodes, log_scale, cov_rot
    AdamState adam[2][3];
    std::vector<Vec3> tracks;
    std::vector<Vec3> grad;

    ObjectState(const SceneObject& o) : skin(o.model, o.shell), graph(build_neighbor_graph(o.shell, 10)) {
        for (int l = 0; l < 2; ++l) {
            const ControlLayer& layer = l == 0 ? o.model.coarse : o.model.fine;
            const auto p = pack(layer);
            adam[l][0].resize(p.nodes.size());
            adam[l][1].resize(p.log_scale.size());
            adam[l][2].resize(p.cov_rot.size());
        }
    }
};

Trainer::Trainer(Scene& scene, GuidanceOracle& oracle, TrainConfig cfg)
    : scene_(scene), oracle_(oracle), cfg_(std::move(cfg)) {
    cfg_.validate();
    scene_.validate();
    schedule_ = schedule_table(cfg_, WeightPdf(cfg_.weight.make()));
    for (const auto& o : scene_.objects) objects_.push_back(std::make_unique<ObjectState>(o));
    layout_ = latent_layout(scene_);
}

Trainer::~Trainer() = default;

StepDiagnostics Trainer::step(int i) {
    if (i < 1 || i > cfg_.iterations) throw ConfigError("step: iteration outside [1, I]");
    const ScheduleRow& row = schedule_[static_cast<std::size_t>(i - 1)];
    StepDiagnostics diag;
    diag.schedule = row;

    // Forward: shell tracks of every object form the latent z.
    Latent z(layout_.length);
    for (std::size_t o = 0; o < objects_.size(); ++o) {
        auto& obj = scene_.objects[o];
        auto& st = *objects_[o];
        if (row.fine_active && !obj.model.fine.points.empty()) obj.model.fine_enabled = true;
        st.skin.forward(obj.model, st.tracks);
        diag.weight_fallbacks += st.skin.fallback_count();
        double* dst = z.data() + layout_.offsets[o];
        for (std::size_t s = 0; s < st.tracks.size(); ++s) {
            dst[3 * s] = st.tracks[s].x();
            dst[3 * s + 1] = st.tracks[s].y();
            dst[3 * s + 2] = st.tracks[s].z();
        }
    }

    // RFSDS residuals, one per batch slot, averaged in slot order.
    const auto B = static_cast<std::size_t>(cfg_.batch);
    std::vector<Latent> residuals(B);
    const std::string prompt = scene_.objects.front().prompt;
    parallel_chunks(B, [&](std::size_t, std::size_t b, std::size_t e) {
        for (std::size_t slot = b; slot < e; ++slot) {
            Latent eps(layout_.length);
            fill_normal(cfg_.seed, i, static_cast<int>(slot), eps);
            residuals[slot] = rfsds_residual(oracle_, z, row.tau, eps, prompt, {i, static_cast<int>(slot)}, row.cfg);
        }
    }, 2);
    Latent mean(layout_.length, 0.0);
    for (const auto& r : residuals) {
        for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += r[k];
    }
    double norm2 = 0.0;
    for (auto& v : mean) {
        v /= static_cast<double>(B);
        norm2 += v * v;
    }
    diag.rfsds_norm = std::sqrt(norm2);

    // Regularizers add their weighted gradients to the same track gradient,
    // then one adjoint pass per object maps it to the parameters.
    double grad2 = 0.0;
    std::vector<ModelGrad> grads;
    for (std::size_t o = 0; o < objects_.size(); ++o) {
        auto& obj = scene_.objects[o];
        auto& st = *objects_[o];
        const double* src = mean.data() + layout_.offsets[o];
        st.grad.resize(st.tracks.size());
        for (std::size_t s = 0; s < st.tracks.size(); ++s) st.grad[s] = Vec3(src[3 * s], src[3 * s + 1], src[3 * s + 2]);
        diag.temporal += temporal_flow_loss(st.tracks, obj.shell.size(), &st.grad, row.w_temporal);
        const ArapValue arap = arap_loss(obj.shell, st.graph, st.tracks, &st.grad, row.w_arap);
        diag.arap += arap.value;
        diag.degenerate_rotations += arap.degenerate;
        for (const auto& g : st.grad) grad2 += g.squaredNorm();
        ModelGrad mg = ModelGrad::zeros_like(obj.model);
        st.skin.backward(obj.model, st.grad, mg);
        grads.push_back(std::move(mg));
    }
    diag.grad_norm = std::sqrt(grad2);
    if (!std::isfinite(diag.grad_norm)) {
        throw NumericError("non-finite gradient at iteration " + std::to_string(i) + " (rfsds " +
                           std::to_string(diag.rfsds_norm) + ", temporal " + std::to_string(diag.temporal) +
                           ", arap " + std::to_string(diag.arap) + ")");
    }

    for (std::size_t o = 0; o < objects_.size(); ++o) {
        auto& obj = scene_.objects[o];
        auto& st = *objects_[o];
        for (int l = 0; l < 2; ++l) {
            ControlLayer& layer = l == 0 ? obj.model.coarse : obj.model.fine;
            if (layer.points.empty() || (l == 1 && !row.fine_active)) continue;
            const LayerGrad& lg = l == 0 ? grads[o].coarse : grads[o].fine;
            const LayerParams g = pack_grad(lg, layer.frame_count());
            if (!all_finite(g.nodes) || !all_finite(g.log_scale) || !all_finite(g.cov_rot)) {
                throw NumericError("non-finite parameter gradient at iteration " + std::to_string(i));
            }
            LayerParams p = pack(layer);
            st.adam[l][0].update(p.nodes, g.nodes, row.lr_fenwick);
            st.adam[l][1].update(p.log_scale, g.log_scale, row.lr_fenwick);
            st.adam[l][2].update(p.cov_rot, g.cov_rot, row.lr_rot);
            unpack(p, layer);
        }
    }
    return diag;
}

void Trainer::apply_split() {
    const int t0 = cfg_.split_frame;
    for (std::size_t o = 0; o < objects_.size(); ++o) {
        auto& obj = scene_.objects[o];
        for (int l = 0; l < 2; ++l) {
            ControlLayer& layer = l == 0 ? obj.model.coarse : obj.model.fine;
            const int T = layer.frame_count();
            if (layer.points.empty() || t0 >= T) continue;
            for (std::size_t k = 0; k < layer.size(); ++k) {
                auto& cp = layer.points[k];
                cp.seq = cp.seq.clamp_after(t0);
                const int first = std::max(t0 + 1, 2);
                objects_[o]->adam[l][0].reset(node_slot(layer, k, first), node_slot(layer, k, T) + kNodeWidth);
            }
        }
    }
}

std::vector<StepDiagnostics> Trainer::train(const Observer& observer) {
    std::vector<StepDiagnostics> log;
    log.reserve(static_cast<std::size_t>(cfg_.iterations));
    for (int i = 1; i <= cfg_.iterations; ++i) {
        log.push_back(step(i));
        if (i == cfg_.split_iteration) apply_split();
        if (observer) observer(log.back(), scene_);
    }
    return log;
}

void write_metrics(std::ostream& out, const std::vector<StepDiagnostics>& log) {
    out << "iter\ttau\tlr_fenwick\tlr_rot\tcfg\tL_rfsds_norm\tL_temp\tL_arap\n";
    out << std::setprecision(17);
    for (const auto& d : log) {
        const auto& s = d.schedule;
        out << s.iteration << '\t' << s.tau << '\t' << s.lr_fenwick << '\t' << s.lr_rot << '\t' << s.cfg << '\t'
            << d.rfsds_norm << '\t' << d.temporal << '\t' << d.arap << '\n';
    }
}

// ---------------------------------------------------------------------------

namespace {

struct ParamRef {
    std::size_t object = 0;
    int layer = 0;
    int group = 0; // 0 nodes, 1 log_scale, 2 cov_rot
    std::size_t index = 0;
};

ControlLayer& layer_of(Scene& s, const ParamRef& p) {
    auto& m = s.objects[p.object].model;
    return p.layer == 0 ? m.coarse : m.fine;
}

double& param_ref(Scene& s, const ParamRef& p) {
    ControlLayer& layer = layer_of(s, p);
    if (p.group == 0) {
        const auto per_cp = static_cast<std::size_t>(layer.frame_count() - 1) * kNodeWidth;
        const auto k = p.index / per_cp;
        const auto rem = p.index % per_cp;
        const int j = 2 + static_cast<int>(rem / kNodeWidth);
        const auto c = rem % kNodeWidth;
        auto& n = layer.points[k].seq.node(j);
        switch (c) {
        case 0: return n.r.w;
        case 1: return n.r.x;
        case 2: return n.r.y;
        case 3: return n.r.z;
        default: return n.T[static_cast<Eigen::Index>(c - 4)];
        }
    }
    if (p.group == 1) return layer.points[p.index / 3].log_scale[static_cast<Eigen::Index>(p.index % 3)];
    auto& q = layer.points[p.index / 4].cov_rot;
    switch (p.index % 4) {
    case 0: return q.w;
    case 1: return q.x;
    case 2: return q.y;
    default: return q.z;
    }
}

} // namespace

AuditResult finite_diff_audit(const Scene& input, AuditLoss loss, std::size_t samples, std::uint64_t seed) {
    input.validate();
    Scene scene = input;
    const auto n_obj = scene.objects.size();
    std::vector<std::unique_ptr<TrackSkinner>> skins;
    std::vector<NeighborGraph> graphs;
    std::vector<std::vector<Vec3>> base_tracks(n_obj);
    for (std::size_t o = 0; o < n_obj; ++o) {
        const auto& obj = scene.objects[o];
        skins.push_back(std::make_unique<TrackSkinner>(obj.model, obj.shell));
        skins.back()->forward(obj.model, base_tracks[o]);
        if (loss == AuditLoss::arap) graphs.push_back(build_neighbor_graph(obj.shell, 10));
    }

    // Frozen pieces of the objectives.
    std::vector<std::vector<Mat3>> rotations(n_obj);
    std::vector<std::vector<Vec3>> fixed_g(n_obj);
    if (loss == AuditLoss::arap) {
        for (std::size_t o = 0; o < n_obj; ++o) rotations[o] = arap_rotations(scene.objects[o].shell, graphs[o], base_tracks[o]);
    }
    if (loss == AuditLoss::rfsds) {
        const LatentLayout layout = latent_layout(scene);
        Latent z;
        for (const auto& tr : base_tracks)
            for (const auto& p : tr) z.insert(z.end(), {p.x(), p.y(), p.z()});
        Latent offset(z.size()), eps(z.size());
        fill_normal(seed, 1, 0, offset);
        fill_normal(seed, 1, 1, eps);
        Latent target(z.size());
        for (std::size_t k = 0; k < z.size(); ++k) target[k] = z[k] + 0.05 * offset[k];
        PointMassOracle oracle(target);
        const Latent g = rfsds_residual(oracle, z, 0.5, eps, "", {1, 0});
        for (std::size_t o = 0; o < n_obj; ++o) {
            const double* src = g.data() + layout.offsets[o];
            for (std::size_t s = 0; s < base_tracks[o].size(); ++s)
                fixed_g[o].emplace_back(src[3 * s], src[3 * s + 1], src[3 * s + 2]);
        }
    }

    auto evaluate = [&](const Scene& s, std::vector<ModelGrad>* grads) {
        double total = 0.0;
        for (std::size_t o = 0; o < n_obj; ++o) {
            const auto& obj = s.objects[o];
            std::vector<Vec3> tracks;
            skins[o]->forward(obj.model, tracks);
            std::vector<Vec3> g(tracks.size(), Vec3::Zero());
            switch (loss) {
            case AuditLoss::temporal:
                total += temporal_flow_loss(tracks, obj.shell.size(), grads ? &g : nullptr);
                break;
            case AuditLoss::arap:
                total += arap_loss_fixed(obj.shell, graphs[o], tracks, rotations[o], grads ? &g : nullptr);
                break;
            case AuditLoss::rfsds:
                for (std::size_t k = 0; k < tracks.size(); ++k) total += fixed_g[o][k].dot(tracks[k]);
                g = fixed_g[o];
                break;
            }
            if (grads) {
                ModelGrad mg = ModelGrad::zeros_like(obj.model);
                skins[o]->backward(obj.model, g, mg);
                grads->push_back(std::move(mg));
            }
        }
        return total;
    };

    std::vector<ModelGrad> grads;
    evaluate(scene, &grads);

    // Candidate parameters: every trainable entry of every active layer.
    std::vector<std::pair<ParamRef, double>> candidates;
    double max_abs = 0.0;
    for (std::size_t o = 0; o < n_obj; ++o) {
        const auto& m = scene.objects[o].model;
        for (int l = 0; l < 2; ++l) {
            const ControlLayer& layer = l == 0 ? m.coarse : m.fine;
            if (layer.points.empty() || (l == 1 && !m.fine_enabled)) continue;
            const LayerParams g = pack_grad(l == 0 ? grads[o].coarse : grads[o].fine, layer.frame_count());
            const std::vector<double>* groups[3] = {&g.nodes, &g.log_scale, &g.cov_rot};
            for (int gi = 0; gi < 3; ++gi) {
                for (std::size_t k = 0; k < groups[gi]->size(); ++k) {
                    const double v = (*groups[gi])[k];
                    max_abs = std::max(max_abs, std::abs(v));
                    candidates.push_back({{o, l, gi, k}, v});
                }
            }
        }
    }
    std::erase_if(candidates, [&](const auto& c) { return std::abs(c.second) <= 1e-6 * max_abs; });
    AuditResult res;
    res.loss = loss;
    if (candidates.empty()) return res;

    // f(θ + h) − f(θ − h) is accumulated term by term from the two track
    // sets; differencing the two totals would lose most digits to rounding.
    auto tracks_at = [&](const Scene& s) {
        std::vector<std::vector<Vec3>> out(n_obj);
        for (std::size_t o = 0; o < n_obj; ++o) skins[o]->forward(s.objects[o].model, out[o]);
        return out;
    };
    auto difference = [&](const std::vector<std::vector<Vec3>>& P, const std::vector<std::vector<Vec3>>& M) {
        double total = 0.0;
        for (std::size_t o = 0; o < n_obj; ++o) {
            const auto& p = P[o];
            const auto& m = M[o];
            const std::size_t n = scene.objects[o].shell.size();
            const std::size_t T = p.size() / n;
            switch (loss) {
            case AuditLoss::temporal:
                for (std::size_t t = 0; t + 1 < T; ++t) {
                    for (std::size_t k = 0; k < n; ++k) {
                        const std::size_t a = t * n + k, b = a + n;
                        const Vec3 dp = p[a] - p[b], dm = m[a] - m[b];
                        total += ((p[a] - m[a]) - (p[b] - m[b])).dot(dp + dm);
                    }
                }
                break;
            case AuditLoss::arap: {
                const auto& canon = scene.objects[o].shell;
                for (std::size_t t = 0; t < T; ++t) {
                    for (std::size_t k = 0; k < n; ++k) {
                        const std::size_t a = t * n + k;
                        const Mat3& R = rotations[o][a];
                        for (auto y : graphs[o].of(k)) {
                            const std::size_t b = t * n + y;
                            const Vec3 c = canon[k] - canon[y];
                            const Vec3 rp = c - R * (p[a] - p[b]);
                            const Vec3 rm = c - R * (m[a] - m[b]);
                            total += (-(R * ((p[a] - m[a]) - (p[b] - m[b])))).dot(rp + rm);
                        }
                    }
                }
                break;
            }
            case AuditLoss::rfsds:
                for (std::size_t k = 0; k < p.size(); ++k) total += fixed_g[o][k].dot(p[k] - m[k]);
                break;
            }
        }
        return total;
    };

    std::mt19937_64 rng(seed);
    const double h = 1e-5;
    for (std::size_t n = 0; n < samples; ++n) {
        const auto& [ref, analytic] = candidates[rng() % candidates.size()];
        double& x = param_ref(scene, ref);
        const double x0 = x;
        x = x0 + h;
        const auto plus = tracks_at(scene);
        x = x0 - h;
        const auto minus = tracks_at(scene);
        x = x0;
        const double fd = difference(plus, minus) / (2.0 * h);
        const double rel = std::abs(fd - analytic) / std::max(std::abs(fd), std::abs(analytic));
        res.max_rel_error = std::max(res.max_rel_error, rel);
        ++res.checked;
    }
    return res;
}

} // namespace f4d
