#include "f4d/skinning.hpp"

#include "f4d/error.hpp"
#include "f4d/parallel.hpp"
#include "f4d/point_ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace f4d {

namespace {

/// Control point pose at one frame, with what the adjoint of the
/// normalization needs.
struct CpFrame {
    Vec4 u = Vec4(1, 0, 0, 0);
    Mat3 R = Mat3::Identity();
    Vec3 T = Vec3::Zero();
    double norm = 1.0;
    double sign = 1.0;
};

struct CovFrame {
    Vec4 c = Vec4(1, 0, 0, 0); // unit covariance rotation
    double norm = 1.0;
    double sign = 1.0;
    Vec3 inv_s2 = Vec3::Ones();
};

CpFrame make_frame(const RigidDelta& raw) {
    const RawQuat s = RawQuat::identity() + raw.r;
    const UnitQuat u = quat_normalize(s);
    CpFrame f;
    f.u = u.vec();
    f.R = u.to_matrix();
    f.T = raw.T;
    f.norm = s.norm();
    f.sign = s.w < 0.0 ? -1.0 : 1.0;
    return f;
}

CovFrame make_cov(const ControlPoint& cp) {
    const UnitQuat c = quat_normalize(cp.cov_rot);
    CovFrame f;
    f.c = c.vec();
    f.norm = cp.cov_rot.norm();
    f.sign = cp.cov_rot.w < 0.0 ? -1.0 : 1.0;
    f.inv_s2 = (-2.0 * cp.log_scale).array().exp();
    return f;
}

Vec4 conj4(const Vec4& q) { return {q[0], -q[1], -q[2], -q[3]}; }

Vec4 hamilton4(const Vec4& a, const Vec4& b) {
    const RawQuat p = hamilton(RawQuat::from_vec(a), RawQuat::from_vec(b));
    return p.vec();
}

/// Σ_ij G_ij ∂R(u)_ij / ∂u for the standard unit-quaternion rotation matrix.
Vec4 rotmat_vjp(const Vec4& u, const Mat3& G) {
    const double w = u[0], x = u[1], y = u[2], z = u[3];
    return 2.0 * Vec4(-z * G(0, 1) + y * G(0, 2) + z * G(1, 0) - x * G(1, 2) - y * G(2, 0) + x * G(2, 1),
                      y * G(0, 1) + z * G(0, 2) + y * G(1, 0) - 2 * x * G(1, 1) - w * G(1, 2) + z * G(2, 0) +
                          w * G(2, 1) - 2 * x * G(2, 2),
                      -2 * y * G(0, 0) + x * G(0, 1) + w * G(0, 2) + x * G(1, 0) + z * G(1, 2) - w * G(2, 0) +
                          z * G(2, 1) - 2 * y * G(2, 2),
                      -2 * z * G(0, 0) - w * G(0, 1) + x * G(0, 2) + w * G(1, 0) - 2 * z * G(1, 1) + y * G(1, 2) +
                          x * G(2, 0) + y * G(2, 1));
}

/// Mahalanobis weights for one sample. Returns false on underflow, in which
/// case beta holds inverse-distance weights.
bool weights_forward(const Vec3& x, const ControlLayer& layer, std::span<const CovFrame> cov,
                     std::span<const std::size_t> nbr, double* beta, Vec3* d, double* what,
                     double& total) {
    total = 0.0;
    for (std::size_t i = 0; i < nbr.size(); ++i) {
        const auto k = nbr[i];
        const Vec3 v = x - layer.points[k].p;
        d[i] = rotate_by(conj4(cov[k].c), v);
        const double m = d[i].cwiseProduct(d[i]).dot(cov[k].inv_s2);
        what[i] = std::exp(-0.5 * m);
        total += what[i];
    }
    if (total > std::numeric_limits<double>::min() && std::isfinite(total)) {
        for (std::size_t i = 0; i < nbr.size(); ++i) beta[i] = what[i] / total;
        return true;
    }
    double inv_total = 0.0;
    for (std::size_t i = 0; i < nbr.size(); ++i) {
        beta[i] = 1.0 / std::max((x - layer.points[nbr[i]].p).norm(), 1e-12);
        inv_total += beta[i];
    }
    for (std::size_t i = 0; i < nbr.size(); ++i) beta[i] /= inv_total;
    return false;
}

/// Adjoint of weights_forward into log-scale and covariance-rotation grads.
void weights_backward(const Vec3& x, const ControlLayer& layer, std::span<const CovFrame> cov,
                      std::span<const std::size_t> nbr, const double* beta, const Vec3* d,
                      const double* what, double total, const double* gbeta, Vec3* g_log_scale,
                      Vec4* g_cov_rot) {
    double mean = 0.0;
    for (std::size_t i = 0; i < nbr.size(); ++i) mean += beta[i] * gbeta[i];
    for (std::size_t i = 0; i < nbr.size(); ++i) {
        const auto k = nbr[i];
        const double g_what = (gbeta[i] - mean) / total;
        const double g_m = -0.5 * what[i] * g_what;
        if (g_m == 0.0) continue;
        const Vec3 d2 = d[i].cwiseProduct(d[i]);
        g_log_scale[k] += -2.0 * g_m * d2.cwiseProduct(cov[k].inv_s2);
        const Vec3 g_d = 2.0 * g_m * d[i].cwiseProduct(cov[k].inv_s2);
        const Vec3 v = x - layer.points[k].p;
        const Vec4 g_conj = rotate_by_vjp_quat(conj4(cov[k].c), v, g_d);
        g_cov_rot[k] += normalize_vjp(cov[k].c, cov[k].norm, cov[k].sign, conj4(g_conj));
    }
}

std::vector<CovFrame> layer_cov(const ControlLayer& layer) {
    std::vector<CovFrame> out;
    out.reserve(layer.size());
    for (const auto& cp : layer.points) out.push_back(make_cov(cp));
    return out;
}

std::vector<CpFrame> layer_frames_at(const ControlLayer& layer, int t) {
    std::vector<CpFrame> out;
    out.reserve(layer.size());
    for (const auto& cp : layer.points) out.push_back(make_frame(cp.seq.raw_prefix(t)));
    return out;
}

void scatter_node(std::vector<RigidDelta>& nodes, int t, const RigidDelta& g) {
    for (int j = t; j > 1; j -= lowbit(j)) nodes[static_cast<std::size_t>(j - 1)] += g;
}

/// Per-layer state for one sample at one frame, shared by deform_full and
/// deform_vjp.
struct LayerEval {
    std::vector<std::size_t> nbr;
    std::vector<double> beta;
    std::vector<Vec3> d;
    std::vector<double> what;
    double total = 0.0;
    bool ok = true;
    std::vector<CovFrame> cov;
    std::vector<CpFrame> frames;
    Vec3 disp = Vec3::Zero();
    Vec4 blend = Vec4::Zero();
    UnitQuat rot;
    double blend_norm = 1.0;
    double blend_sign = 1.0;
};

LayerEval eval_layer(const Vec3& x, const ControlLayer& layer, int t) {
    LayerEval e;
    e.nbr = layer_neighbors(x, layer);
    const auto K = e.nbr.size();
    e.beta.resize(K);
    e.d.resize(K);
    e.what.resize(K);
    e.cov = layer_cov(layer);
    e.ok = weights_forward(x, layer, e.cov, e.nbr, e.beta.data(), e.d.data(), e.what.data(), e.total);
    e.frames = layer_frames_at(layer, t);
    for (std::size_t i = 0; i < K; ++i) {
        const auto& f = e.frames[e.nbr[i]];
        const Vec3 v = x - layer.points[e.nbr[i]].p;
        e.disp += e.beta[i] * (f.R * v - v + f.T);
        e.blend += e.beta[i] * f.u;
    }
    const RawQuat b = RawQuat::from_vec(e.blend);
    e.rot = quat_normalize(b);
    e.blend_norm = b.norm();
    e.blend_sign = b.w < 0.0 ? -1.0 : 1.0;
    return e;
}

void backprop_layer(const Vec3& x, const ControlLayer& layer, int t, const LayerEval& e,
                    const Vec3& g_disp, const Vec4& g_blend, LayerGrad& grad) {
    const auto K = e.nbr.size();
    std::vector<double> gbeta(K, 0.0);
    for (std::size_t i = 0; i < K; ++i) {
        const auto k = e.nbr[i];
        const auto& f = e.frames[k];
        const Vec3 v = x - layer.points[k].p;
        gbeta[i] = g_disp.dot(f.R * v - v + f.T) + g_blend.dot(f.u);
        const Vec4 gu = e.beta[i] * (rotate_by_vjp_quat(f.u, v, g_disp) + g_blend);
        RigidDelta g;
        g.r = RawQuat::from_vec(normalize_vjp(f.u, f.norm, f.sign, gu));
        g.T = e.beta[i] * g_disp;
        scatter_node(grad.nodes[k], t, g);
    }
    if (e.ok) {
        weights_backward(x, layer, e.cov, e.nbr, e.beta.data(), e.d.data(), e.what.data(), e.total,
                         gbeta.data(), grad.log_scale.data(), grad.cov_rot.data());
    }
}

} // namespace

Mat3 ControlPoint::covariance() const {
    const Mat3 r = quat_normalize(cov_rot).to_matrix();
    const Vec3 s = scale();
    return r * s.cwiseProduct(s).asDiagonal() * r.transpose();
}

PointSet ControlLayer::means() const {
    PointSet out;
    out.reserve(points.size());
    for (const auto& cp : points) out.push_back(cp.p);
    return out;
}

void ControlLayer::validate() const {
    if (K < 1 || points.size() < static_cast<std::size_t>(K)) {
        throw GeometryError("control layer needs |points| >= K >= 1 (|points| = " +
                            std::to_string(points.size()) + ", K = " + std::to_string(K) + ")");
    }
    const int T = frame_count();
    for (const auto& cp : points) {
        if (cp.seq.frame_count() != T) {
            throw GeometryError("control points disagree on frame count");
        }
    }
}

ControlLayer init_layer(const PointSet& interior, std::size_t count, int K, int frame_count,
                        int kmeans_iters) {
    if (count < 1 || count > interior.size()) {
        throw GeometryError("init_layer: count " + std::to_string(count) + " exceeds interior size " +
                            std::to_string(interior.size()));
    }
    if (K < 1 || static_cast<std::size_t>(K) > count) {
        throw GeometryError("init_layer: K must be in [1, count]");
    }
    const auto seeds = fps(interior, count, 0);
    const auto km = kmeans(interior, seeds, kmeans_iters);
    ControlLayer layer;
    layer.K = K;
    const PointSet& centers = km.centroids;
    std::vector<double> scale(count, interior.empty() ? 1.0 : bounds(interior).diagonal() / 4.0);
    if (count >= 4) {
        const auto nn = knn(centers, centers, 4);
        for (std::size_t i = 0; i < count; ++i) {
            double sum = 0.0;
            int used = 0;
            for (auto j : nn[i]) {
                if (j == i || used == 3) continue;
                sum += (centers[j] - centers[i]).norm();
                ++used;
            }
            scale[i] = sum / used;
        }
    }
    for (std::size_t i = 0; i < count; ++i) {
        ControlPoint cp;
        cp.p = centers[i];
        const double s = std::max(scale[i], 1e-9);
        cp.log_scale = Vec3::Constant(std::log(s));
        cp.seq = FenwickSeq(frame_count);
        layer.points.push_back(std::move(cp));
    }
    return layer;
}

std::vector<std::size_t> layer_neighbors(const Vec3& x, const ControlLayer& layer) {
    layer.validate();
    std::vector<std::pair<double, std::size_t>> d;
    d.reserve(layer.size());
    for (std::size_t k = 0; k < layer.size(); ++k) d.emplace_back((layer.points[k].p - x).squaredNorm(), k);
    const auto K = static_cast<std::size_t>(layer.K);
    std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(K), d.end());
    std::vector<std::size_t> out(K);
    for (std::size_t i = 0; i < K; ++i) out[i] = d[i].second;
    return out;
}

BlendWeights blend_weights(const Vec3& x, const ControlLayer& layer,
                           std::span<const std::size_t> neighbor_idx) {
    for (auto k : neighbor_idx) {
        if (k >= layer.size()) throw GeometryError("blend_weights: neighbour index out of range");
    }
    const auto cov = layer_cov(layer);
    const auto K = neighbor_idx.size();
    BlendWeights out;
    out.weights.resize(K);
    std::vector<Vec3> d(K);
    std::vector<double> what(K);
    double total = 0.0;
    out.fallback = !weights_forward(x, layer, cov, neighbor_idx, out.weights.data(), d.data(),
                                    what.data(), total);
    return out;
}

Vec3 deform_point(const Vec3& x, const ControlLayer& layer, int t) {
    return x + eval_layer(x, layer, t).disp;
}

UnitQuat deform_quat(const UnitQuat& q, const Vec3& x, const ControlLayer& layer, int t) {
    return quat_compose(eval_layer(x, layer, t).rot, q);
}

DeformedSample deform_full(const Vec3& x, const UnitQuat& q, const DeformModel& model, int t) {
    const LayerEval c = eval_layer(x, model.coarse, t);
    DeformedSample out{x + c.disp, quat_compose(c.rot, q)};
    if (model.fine_enabled) {
        const LayerEval f = eval_layer(x, model.fine, t);
        out.position += f.disp;
        out.orientation = quat_compose(f.rot, out.orientation);
    }
    return out;
}

TriMesh deform_mesh(const TriMesh& mesh, const DeformModel& model, int t) {
    TriMesh out = mesh;
    TrackSkinner skin(model, mesh.vertices);
    std::vector<Vec3> tracks;
    skin.forward(model, tracks);
    const auto n = mesh.vertices.size();
    if (t < 1 || t > model.frame_count()) {
        throw NumericError("deform_mesh: frame out of range");
    }
    std::copy_n(tracks.begin() + static_cast<std::ptrdiff_t>((t - 1) * n), n, out.vertices.begin());
    return out;
}

LayerGrad LayerGrad::zeros_like(const ControlLayer& layer) {
    LayerGrad g;
    g.nodes.assign(layer.size(), std::vector<RigidDelta>(static_cast<std::size_t>(layer.frame_count())));
    g.log_scale.assign(layer.size(), Vec3::Zero());
    g.cov_rot.assign(layer.size(), Vec4::Zero());
    return g;
}

void LayerGrad::add(const LayerGrad& o) {
    for (std::size_t k = 0; k < nodes.size(); ++k) {
        for (std::size_t j = 0; j < nodes[k].size(); ++j) nodes[k][j] += o.nodes[k][j];
        log_scale[k] += o.log_scale[k];
        cov_rot[k] += o.cov_rot[k];
    }
}

ModelGrad ModelGrad::zeros_like(const DeformModel& model) {
    return {LayerGrad::zeros_like(model.coarse), LayerGrad::zeros_like(model.fine)};
}

void ModelGrad::add(const ModelGrad& o) {
    coarse.add(o.coarse);
    fine.add(o.fine);
}

ModelGrad deform_vjp(const Vec3& x, const UnitQuat& q, const DeformModel& model, int t,
                     const Vec3& grad_position, const Vec4& grad_orientation) {
    ModelGrad grad = ModelGrad::zeros_like(model);
    const LayerEval c = eval_layer(x, model.coarse, t);
    const RawQuat q1_raw = hamilton(c.rot.raw(), q.raw());
    const double q1_sign = q1_raw.w < 0.0 ? -1.0 : 1.0;
    const Vec4 q1 = quat_normalize(q1_raw).vec();

    Vec4 g_q1 = grad_orientation;
    if (model.fine_enabled) {
        const LayerEval f = eval_layer(x, model.fine, t);
        const RawQuat out_raw = hamilton(f.rot.raw(), RawQuat::from_vec(q1));
        const Vec4 g_raw = (out_raw.w < 0.0 ? -1.0 : 1.0) * grad_orientation;
        const Vec4 g_qf = hamilton4(g_raw, conj4(q1));
        g_q1 = hamilton4(conj4(f.rot.vec()), g_raw);
        const Vec4 g_blend = normalize_vjp(f.rot.vec(), f.blend_norm, f.blend_sign, g_qf);
        backprop_layer(x, model.fine, t, f, grad_position, g_blend, grad.fine);
    }
    const Vec4 g_raw1 = q1_sign * g_q1;
    const Vec4 g_qc = hamilton4(g_raw1, conj4(q.vec()));
    const Vec4 g_blend = normalize_vjp(c.rot.vec(), c.blend_norm, c.blend_sign, g_qc);
    backprop_layer(x, model.coarse, t, c, grad_position, g_blend, grad.coarse);
    return grad;
}

// ---------------------------------------------------------------------------

struct TrackSkinner::LayerCache {
    int K = 0;
    int T = 0;
    std::size_t ncp = 0;
    std::vector<CpFrame> frames; // [(t-1)·ncp + k]
    std::vector<CovFrame> cov;
    std::vector<double> beta;  // [s·K + i]
    std::vector<Vec3> d;
    std::vector<double> what;
    std::vector<double> total; // [s]
    std::vector<unsigned char> ok;

    // Per-chunk adjoint accumulators.
    std::vector<std::vector<Mat3>> g_rot;
    std::vector<std::vector<Vec3>> g_trans;
    std::vector<std::vector<Vec3>> g_log_scale;
    std::vector<std::vector<Vec4>> g_cov_rot;
    std::vector<double> gbeta;

    void prepare(const ControlLayer& layer, const PointSet& samples, std::span<const std::size_t> nbr) {
        K = layer.K;
        T = layer.frame_count();
        ncp = layer.size();
        frames.resize(static_cast<std::size_t>(T) * ncp);
        for (std::size_t k = 0; k < ncp; ++k) {
            const auto& seq = layer.points[k].seq;
            for (int t = 1; t <= T; ++t) {
                frames[static_cast<std::size_t>(t - 1) * ncp + k] = make_frame(seq.raw_prefix(t));
            }
        }
        cov = layer_cov(layer);
        const auto N = samples.size();
        const auto Ku = static_cast<std::size_t>(K);
        beta.resize(N * Ku);
        d.resize(N * Ku);
        what.resize(N * Ku);
        total.resize(N);
        ok.resize(N);
        for (std::size_t s = 0; s < N; ++s) {
            ok[s] = weights_forward(samples[s], layer, cov, nbr.subspan(s * Ku, Ku), &beta[s * Ku],
                                    &d[s * Ku], &what[s * Ku], total[s])
                        ? 1
                        : 0;
        }
    }

    void forward_add(const ControlLayer& layer, const PointSet& samples, std::span<const std::size_t> nbr,
                     std::vector<Vec3>& tracks) const {
        const auto N = samples.size();
        const auto Ku = static_cast<std::size_t>(K);
        for (int t = 1; t <= T; ++t) {
            const CpFrame* fr = &frames[static_cast<std::size_t>(t - 1) * ncp];
            Vec3* out = &tracks[static_cast<std::size_t>(t - 1) * N];
            for (std::size_t s = 0; s < N; ++s) {
                Vec3 disp = Vec3::Zero();
                for (std::size_t i = 0; i < Ku; ++i) {
                    const auto k = nbr[s * Ku + i];
                    const Vec3 v = samples[s] - layer.points[k].p;
                    disp += beta[s * Ku + i] * (fr[k].R * v - v + fr[k].T);
                }
                out[s] += disp;
            }
        }
    }

    void backward(const ControlLayer& layer, const PointSet& samples, std::span<const std::size_t> nbr,
                  std::span<const Vec3> grad_tracks, LayerGrad& grad) {
        const auto N = samples.size();
        const auto Ku = static_cast<std::size_t>(K);
        const auto slots = static_cast<std::size_t>(T) * ncp;
        g_rot.resize(kWorkChunks);
        g_trans.resize(kWorkChunks);
        g_log_scale.resize(kWorkChunks);
        g_cov_rot.resize(kWorkChunks);
        gbeta.assign(N * Ku, 0.0);
        parallel_chunks(N, [&](std::size_t c, std::size_t b, std::size_t e) {
            auto& gr = g_rot[c];
            auto& gt = g_trans[c];
            gr.assign(slots, Mat3::Zero());
            gt.assign(slots, Vec3::Zero());
            for (int t = 1; t <= T; ++t) {
                const auto base = static_cast<std::size_t>(t - 1) * ncp;
                const CpFrame* fr = &frames[base];
                const Vec3* g_in = &grad_tracks[static_cast<std::size_t>(t - 1) * N];
                for (std::size_t s = b; s < e; ++s) {
                    const Vec3& g = g_in[s];
                    for (std::size_t i = 0; i < Ku; ++i) {
                        const auto k = nbr[s * Ku + i];
                        const Vec3 v = samples[s] - layer.points[k].p;
                        const double bt = beta[s * Ku + i];
                        gbeta[s * Ku + i] += g.dot(fr[k].R * v - v + fr[k].T);
                        const Vec3 bg = bt * g;
                        gr[base + k].noalias() += bg * v.transpose();
                        gt[base + k] += bg;
                    }
                }
            }
            auto& gls = g_log_scale[c];
            auto& gcr = g_cov_rot[c];
            gls.assign(ncp, Vec3::Zero());
            gcr.assign(ncp, Vec4::Zero());
            for (std::size_t s = b; s < e; ++s) {
                if (!ok[s]) continue;
                weights_backward(samples[s], layer, cov, nbr.subspan(s * Ku, Ku), &beta[s * Ku], &d[s * Ku],
                                 &what[s * Ku], total[s], &gbeta[s * Ku], gls.data(), gcr.data());
            }
        });
        for (std::size_t c = 1; c < kWorkChunks; ++c) {
            for (std::size_t i = 0; i < slots; ++i) {
                g_rot[0][i] += g_rot[c][i];
                g_trans[0][i] += g_trans[c][i];
            }
            for (std::size_t k = 0; k < ncp; ++k) {
                g_log_scale[0][k] += g_log_scale[c][k];
                g_cov_rot[0][k] += g_cov_rot[c][k];
            }
        }
        for (std::size_t k = 0; k < ncp; ++k) {
            grad.log_scale[k] += g_log_scale[0][k];
            grad.cov_rot[k] += g_cov_rot[0][k];
            for (int t = 1; t <= T; ++t) {
                const auto slot = static_cast<std::size_t>(t - 1) * ncp + k;
                const auto& f = frames[slot];
                RigidDelta g;
                g.r = RawQuat::from_vec(normalize_vjp(f.u, f.norm, f.sign, rotmat_vjp(f.u, g_rot[0][slot])));
                g.T = g_trans[0][slot];
                scatter_node(grad.nodes[k], t, g);
            }
        }
    }
};

TrackSkinner::TrackSkinner(const DeformModel& model, PointSet samples)
    : samples_(std::move(samples)),
      coarse_cache_(std::make_shared<LayerCache>()),
      fine_cache_(std::make_shared<LayerCache>()) {
    model.coarse.validate();
    coarse_k_ = model.coarse.K;
    auto flatten = [](const std::vector<std::vector<std::size_t>>& lists) {
        std::vector<std::size_t> out;
        for (const auto& l : lists) out.insert(out.end(), l.begin(), l.end());
        return out;
    };
    coarse_nbr_ = flatten(knn(samples_, model.coarse.means(), static_cast<std::size_t>(coarse_k_)));
    if (!model.fine.points.empty()) {
        model.fine.validate();
        fine_k_ = model.fine.K;
        fine_nbr_ = flatten(knn(samples_, model.fine.means(), static_cast<std::size_t>(fine_k_)));
    }
}

void TrackSkinner::forward(const DeformModel& model, std::vector<Vec3>& tracks) {
    const auto T = static_cast<std::size_t>(model.frame_count());
    const auto N = samples_.size();
    tracks.resize(T * N);
    for (std::size_t t = 0; t < T; ++t) std::copy(samples_.begin(), samples_.end(), tracks.begin() + static_cast<std::ptrdiff_t>(t * N));
    coarse_cache_->prepare(model.coarse, samples_, coarse_nbr_);
    // Displacements are summed first, then added to the canonical positions,
    // so zero deformations reproduce the samples bit for bit.
    std::vector<Vec3> disp(T * N, Vec3::Zero());
    coarse_cache_->forward_add(model.coarse, samples_, coarse_nbr_, disp);
    if (model.fine_enabled && fine_k_ > 0) {
        fine_cache_->prepare(model.fine, samples_, fine_nbr_);
        fine_cache_->forward_add(model.fine, samples_, fine_nbr_, disp);
    }
    for (std::size_t i = 0; i < tracks.size(); ++i) tracks[i] += disp[i];
}

void TrackSkinner::backward(const DeformModel& model, std::span<const Vec3> grad_tracks, ModelGrad& grad) {
    if (grad_tracks.size() != static_cast<std::size_t>(model.frame_count()) * samples_.size()) {
        throw NumericError("TrackSkinner::backward: gradient size mismatch");
    }
    coarse_cache_->backward(model.coarse, samples_, coarse_nbr_, grad_tracks, grad.coarse);
    if (model.fine_enabled && fine_k_ > 0) {
        fine_cache_->backward(model.fine, samples_, fine_nbr_, grad_tracks, grad.fine);
    }
}

std::size_t TrackSkinner::fallback_count() const {
    return static_cast<std::size_t>(std::count(coarse_cache_->ok.begin(), coarse_cache_->ok.end(), 0));
}

} // namespace f4d
