#include "f4d/regularizers.hpp"

#include "f4d/binary_io.hpp"
#include "f4d/error.hpp"
#include "f4d/parallel.hpp"
#include "f4d/point_ops.hpp"

#include <Eigen/SVD>

#include <cmath>
#include <istream>
#include <ostream>
#include <string>

namespace f4d {

namespace {

std::size_t frame_count_of(std::span<const Vec3> tracks, std::size_t n) {
    if (n == 0 || tracks.size() % n != 0) {
        throw NumericError("track array of " + std::to_string(tracks.size()) +
                           " entries does not match sample count " + std::to_string(n));
    }
    return tracks.size() / n;
}

void check_grad(std::vector<Vec3>* grad, std::size_t size) {
    if (grad && grad->size() != size) grad->assign(size, Vec3::Zero());
}

RotationEstimate kabsch_svd(const Mat3& M) {
    const Eigen::JacobiSVD<Mat3> svd(M, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Mat3& U = svd.matrixU();
    const Mat3& V = svd.matrixV();
    Mat3 D = Mat3::Identity();
    D(2, 2) = (U * V.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
    return {U * D * V.transpose(), false};
}

// Kabsch rotation of one neighbourhood at one frame.
Mat3 local_rotation(const PointSet& canonical, std::span<const std::size_t> nbr, const Vec3* frame,
                    std::size_t s, bool& degenerate) {
    Mat3 M = Mat3::Zero();
    bool same = true;
    for (auto y : nbr) {
        const Vec3 c = canonical[s] - canonical[y];
        const Vec3 d = frame[s] - frame[y];
        same = same && c == d;
        M.noalias() += c * d.transpose();
    }
    if (same) return Mat3::Identity();
    const RotationEstimate est = rotation_from_covariance(M);
    degenerate = est.degenerate;
    return est.R;
}

// Columns of X⁻ᵀ from the cofactors of X.
Mat3 inverse_transpose(const Mat3& X) {
    Mat3 C;
    C.col(0) = X.col(1).cross(X.col(2));
    C.col(1) = X.col(2).cross(X.col(0));
    C.col(2) = X.col(0).cross(X.col(1));
    return C / X.col(0).dot(C.col(0));
}

} // namespace

double temporal_flow_loss(std::span<const Vec3> tracks, std::size_t n, std::vector<Vec3>* grad, double weight) {
    const auto T = frame_count_of(tracks, n);
    if (T < 2) throw NumericError("temporal loss needs at least two frames");
    check_grad(grad, tracks.size());
    double total = 0.0;
    for (std::size_t t = 0; t + 1 < T; ++t) {
        for (std::size_t s = 0; s < n; ++s) {
            const Vec3 f = tracks[t * n + s] - tracks[(t + 1) * n + s];
            total += f.squaredNorm();
            if (grad) {
                (*grad)[t * n + s] += 2.0 * weight * f;
                (*grad)[(t + 1) * n + s] -= 2.0 * weight * f;
            }
        }
    }
    return total;
}

std::vector<Vec3> flow_frame(std::span<const Vec3> tracks, std::size_t n, int t) {
    const auto T = frame_count_of(tracks, n);
    if (t < 1 || static_cast<std::size_t>(t) >= T) throw NumericError("flow frame out of range");
    std::vector<Vec3> out(n);
    const auto base = static_cast<std::size_t>(t - 1) * n;
    for (std::size_t s = 0; s < n; ++s) out[s] = tracks[base + s] - tracks[base + n + s];
    return out;
}

NeighborGraph build_neighbor_graph(const PointSet& points, std::size_t k) {
    if (points.size() < 2) throw GeometryError("neighbour graph needs at least two points");
    k = std::min(k, points.size() - 1);
    const auto lists = knn(points, points, k + 1);
    NeighborGraph g;
    g.k = k;
    g.idx.reserve(points.size() * k);
    for (std::size_t i = 0; i < points.size(); ++i) {
        std::size_t taken = 0;
        for (auto j : lists[i]) {
            if (j == i || taken == k) continue;
            g.idx.push_back(j);
            ++taken;
        }
    }
    return g;
}

RotationEstimate rotation_from_covariance(const Mat3& M) {
    const double scale = M.cwiseAbs().maxCoeff();
    if (!std::isfinite(scale) || scale <= 1e-300) return {Mat3::Identity(), true};
    // Newton iteration for the polar factor with Frobenius scaling until the
    // steps get small. Only used when M is well inside the proper-rotation
    // side; the polar factor then is the Kabsch solution.
    Mat3 X = M / scale;
    if (X.determinant() > 1e-6) {
        bool scaled = true;
        for (int it = 0; it < 40; ++it) {
            const Mat3 Y = inverse_transpose(X);
            const double gamma = scaled ? std::sqrt(std::sqrt(Y.squaredNorm() / X.squaredNorm())) : 1.0;
            const Mat3 next = 0.5 * (gamma * X + Y / gamma);
            const double diff = (next - X).cwiseAbs().maxCoeff();
            X = next;
            if (diff < 1e-2) scaled = false;
            if (diff < 1e-8) {
                // Quadratic convergence: one more step reaches rounding level.
                X = 0.5 * (X + inverse_transpose(X));
                return {X, false};
            }
        }
    }
    return kabsch_svd(M);
}

RotationEstimate estimate_rotation(std::span<const Vec3> canonical, std::span<const Vec3> deformed) {
    if (canonical.size() != deformed.size() || canonical.empty()) {
        throw GeometryError("estimate_rotation needs matching non-empty offset lists");
    }
    Mat3 M = Mat3::Zero();
    bool same = true;
    for (std::size_t i = 0; i < canonical.size(); ++i) {
        same = same && canonical[i] == deformed[i];
        M.noalias() += canonical[i] * deformed[i].transpose();
    }
    if (same) return {Mat3::Identity(), false};
    return rotation_from_covariance(M);
}

std::vector<Mat3> arap_rotations(const PointSet& canonical, const NeighborGraph& graph,
                                 std::span<const Vec3> tracks) {
    const auto n = canonical.size();
    const auto T = frame_count_of(tracks, n);
    std::vector<Mat3> out(T * n);
    parallel_chunks(T, [&](std::size_t, std::size_t b, std::size_t e) {
        for (std::size_t t = b; t < e; ++t) {
            const Vec3* frame = &tracks[t * n];
            for (std::size_t s = 0; s < n; ++s) {
                bool degenerate = false;
                out[t * n + s] = local_rotation(canonical, graph.of(s), frame, s, degenerate);
            }
        }
    }, 2);
    return out;
}

ArapValue arap_loss(const PointSet& canonical, const NeighborGraph& graph, std::span<const Vec3> tracks,
                    std::vector<Vec3>* grad, double weight) {
    const auto n = canonical.size();
    const auto T = frame_count_of(tracks, n);
    if (graph.size() != n) throw GeometryError("neighbour graph does not match the shell");
    check_grad(grad, tracks.size());
    std::vector<double> frame_value(T, 0.0);
    std::vector<std::size_t> frame_degenerate(T, 0);
    parallel_chunks(T, [&](std::size_t, std::size_t b, std::size_t e) {
        for (std::size_t t = b; t < e; ++t) {
            const Vec3* frame = &tracks[t * n];
            Vec3* g = grad ? &(*grad)[t * n] : nullptr;
            double value = 0.0;
            for (std::size_t s = 0; s < n; ++s) {
                const auto nbr = graph.of(s);
                bool degenerate = false;
                const Mat3 R = local_rotation(canonical, nbr, frame, s, degenerate);
                frame_degenerate[t] += degenerate ? 1 : 0;
                for (auto y : nbr) {
                    const Vec3 d = frame[s] - frame[y];
                    const Vec3 r = (canonical[s] - canonical[y]) - R * d;
                    value += r.squaredNorm();
                    if (g) {
                        const Vec3 gr = 2.0 * weight * (R.transpose() * r);
                        g[s] -= gr;
                        g[y] += gr;
                    }
                }
            }
            frame_value[t] = value;
        }
    }, 2);
    ArapValue out;
    for (std::size_t t = 0; t < T; ++t) {
        out.value += frame_value[t];
        out.degenerate += frame_degenerate[t];
    }
    return out;
}

double arap_loss_fixed(const PointSet& canonical, const NeighborGraph& graph, std::span<const Vec3> tracks,
                       std::span<const Mat3> rotations, std::vector<Vec3>* grad) {
    const auto n = canonical.size();
    const auto T = frame_count_of(tracks, n);
    if (rotations.size() != tracks.size()) throw GeometryError("rotation count does not match tracks");
    check_grad(grad, tracks.size());
    double value = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
        const Vec3* frame = &tracks[t * n];
        for (std::size_t s = 0; s < n; ++s) {
            const Mat3& R = rotations[t * n + s];
            for (auto y : graph.of(s)) {
                const Vec3 r = (canonical[s] - canonical[y]) - R * (frame[s] - frame[y]);
                value += r.squaredNorm();
                if (grad) {
                    const Vec3 gr = 2.0 * (R.transpose() * r);
                    (*grad)[t * n + s] -= gr;
                    (*grad)[t * n + y] += gr;
                }
            }
        }
    }
    return value;
}

FlowImage rasterize_flow(std::span<const Vec3> positions, std::span<const Vec3> flows, const OrthoCamera& cam) {
    if (cam.width < 1 || cam.height < 1) throw GeometryError("raster resolution must be at least 1x1");
    if (positions.size() != flows.size()) throw GeometryError("positions and flows differ in length");
    if (!(cam.pixel > 0.0) || !(cam.footprint > 0.0)) throw GeometryError("pixel size and footprint must be positive");
    const auto W = static_cast<std::size_t>(cam.width);
    const auto H = static_cast<std::size_t>(cam.height);
    std::vector<double> acc(W * H * 3, 0.0);
    std::vector<double> wsum(W * H, 0.0);
    const double radius = 3.0 * cam.footprint;
    const double inv_var = 1.0 / (cam.footprint * cam.footprint);
    for (std::size_t s = 0; s < positions.size(); ++s) {
        const Vec3 rel = positions[s] - cam.center;
        // Continuous pixel coordinates; pixel i spans [i, i + 1).
        const double u = rel.dot(cam.right) / cam.pixel + 0.5 * cam.width;
        const double v = rel.dot(cam.up) / cam.pixel + 0.5 * cam.height;
        const int i0 = std::max(0, static_cast<int>(std::floor(u - 0.5 - radius)));
        const int i1 = std::min(cam.width - 1, static_cast<int>(std::ceil(u - 0.5 + radius)));
        const int j0 = std::max(0, static_cast<int>(std::floor(v - 0.5 - radius)));
        const int j1 = std::min(cam.height - 1, static_cast<int>(std::ceil(v - 0.5 + radius)));
        for (int j = j0; j <= j1; ++j) {
            for (int i = i0; i <= i1; ++i) {
                const double du = i + 0.5 - u;
                const double dv = j + 0.5 - v;
                const double d2 = du * du + dv * dv;
                if (d2 > radius * radius) continue;
                const double w = std::exp(-0.5 * d2 * inv_var);
                const auto p = static_cast<std::size_t>(j) * W + static_cast<std::size_t>(i);
                wsum[p] += w;
                for (int c = 0; c < 3; ++c) acc[3 * p + c] += w * flows[s][c];
            }
        }
    }
    FlowImage img;
    img.width = cam.width;
    img.height = cam.height;
    img.data.assign(W * H * 3, 0.0);
    img.weight = wsum;
    for (std::size_t p = 0; p < W * H; ++p) {
        if (wsum[p] > 0.0) {
            for (int c = 0; c < 3; ++c) img.data[3 * p + c] = acc[3 * p + c] / wsum[p];
        }
    }
    return img;
}

void write_flow_raster(std::ostream& out, const FlowImage& img) {
    bin::put_u32(out, static_cast<std::uint32_t>(img.width));
    bin::put_u32(out, static_cast<std::uint32_t>(img.height));
    bin::put_u32(out, 3);
    for (double v : img.data) bin::put_f32(out, static_cast<float>(v));
}

FlowImage read_flow_raster(std::istream& in) {
    FlowImage img;
    img.width = static_cast<int>(bin::get_u32(in, "raster width"));
    img.height = static_cast<int>(bin::get_u32(in, "raster height"));
    const auto channels = bin::get_u32(in, "raster channels");
    if (channels != 3 || img.width < 1 || img.height < 1 || img.width > 1 << 15 || img.height > 1 << 15) {
        throw FormatError("flow raster: invalid header");
    }
    img.data.resize(static_cast<std::size_t>(img.width) * img.height * 3);
    for (auto& v : img.data) v = bin::get_f32(in, "raster pixel");
    return img;
}

} // namespace f4d
