#include "f4d/fenwick_seq.hpp"

#include "f4d/binary_io.hpp"
#include "f4d/error.hpp"

#include <string>

namespace f4d {

namespace {
constexpr std::uint32_t kFenwickVersion = 1;
constexpr std::uint32_t kNodeStride = 7;
} // namespace

std::vector<int> bit_indices(int t, int frame_count) {
    if (t < 1 || t > frame_count) {
        throw NumericError("frame " + std::to_string(t) + " out of range [1, " +
                           std::to_string(frame_count) + "]");
    }
    std::vector<int> out;
    for (int j = t; j > 0; j -= lowbit(j)) out.push_back(j);
    return out;
}

FenwickSeq::FenwickSeq(int frame_count) {
    if (frame_count < 1) {
        throw NumericError("FenwickSeq needs at least one frame");
    }
    nodes_.resize(static_cast<std::size_t>(frame_count));
}

void FenwickSeq::check_frame(int t) const {
    if (t < 1 || t > frame_count()) {
        throw NumericError("frame " + std::to_string(t) + " out of range [1, " +
                           std::to_string(frame_count()) + "]");
    }
}

const RigidDelta& FenwickSeq::node(int j) const {
    check_frame(j);
    return nodes_[static_cast<std::size_t>(j - 1)];
}

RigidDelta& FenwickSeq::node(int j) {
    check_frame(j);
    return nodes_[static_cast<std::size_t>(j - 1)];
}

RigidDelta FenwickSeq::raw_prefix(int t) const {
    if (t == 0) return {};
    check_frame(t);
    RigidDelta sum;
    for (int j = t; j > 0; j -= lowbit(j)) sum += nodes_[static_cast<std::size_t>(j - 1)];
    return sum;
}

FrameTransform FenwickSeq::query(int t) const {
    const RigidDelta sum = raw_prefix(t);
    return {quat_normalize(RawQuat::identity() + sum.r), sum.T};
}

FenwickSeq FenwickSeq::from_prefix(std::span<const RigidDelta> prefix) {
    FenwickSeq seq(static_cast<int>(prefix.size()));
    if (!prefix[0].is_zero()) {
        throw NumericError("from_prefix: frame 1 must carry the zero deformation");
    }
    for (int j = 1; j <= seq.frame_count(); ++j) {
        const int start = j - lowbit(j);
        RigidDelta v = prefix[static_cast<std::size_t>(j - 1)];
        if (start > 0) v -= prefix[static_cast<std::size_t>(start - 1)];
        seq.nodes_[static_cast<std::size_t>(j - 1)] = v;
    }
    return seq;
}

FenwickSeq FenwickSeq::clamp_after(int t0) const {
    check_frame(t0);
    FenwickSeq out = *this;
    const RigidDelta at_t0 = raw_prefix(t0);
    for (int j = t0 + 1; j <= frame_count(); ++j) {
        const int start = j - lowbit(j);
        RigidDelta v = at_t0;
        v -= start >= t0 ? at_t0 : raw_prefix(start);
        out.nodes_[static_cast<std::size_t>(j - 1)] = v;
    }
    return out;
}

FenwickGrad::FenwickGrad(int frame_count, bool freeze_first)
    : grads_(static_cast<std::size_t>(frame_count)), freeze_first_(freeze_first) {}

void FenwickGrad::scatter(int t, const RigidDelta& g) {
    const int n = static_cast<int>(grads_.size());
    if (t < 1 || t > n) {
        throw NumericError("scatter: frame " + std::to_string(t) + " out of range");
    }
    for (int j = t; j > 0; j -= lowbit(j)) {
        if (j == 1 && freeze_first_) continue;
        grads_[static_cast<std::size_t>(j - 1)] += g;
    }
}

void write_fenwick(std::ostream& out, const FenwickSeq& seq) {
    bin::put_magic(out, "FWSQ");
    bin::put_u32(out, kFenwickVersion);
    bin::put_u32(out, static_cast<std::uint32_t>(seq.frame_count()));
    bin::put_u32(out, kNodeStride);
    for (const auto& n : seq.nodes()) {
        for (double v : {n.r.w, n.r.x, n.r.y, n.r.z, n.T.x(), n.T.y(), n.T.z()}) {
            bin::put_f32(out, static_cast<float>(v));
        }
    }
}

FenwickSeq read_fenwick(std::istream& in) {
    bin::expect_magic(in, "FWSQ");
    const auto version = bin::get_u32(in, "FWSQ version");
    if (version != kFenwickVersion) {
        throw FormatError("FWSQ: unsupported version " + std::to_string(version));
    }
    const auto frames = bin::get_u32(in, "FWSQ frame count");
    const auto stride = bin::get_u32(in, "FWSQ stride");
    if (frames < 1 || frames > (1u << 20) || stride != kNodeStride) {
        throw FormatError("FWSQ: invalid header");
    }
    FenwickSeq seq(static_cast<int>(frames));
    for (int j = 1; j <= seq.frame_count(); ++j) {
        auto& n = seq.node(j);
        n.r.w = bin::get_f32(in, "FWSQ node");
        n.r.x = bin::get_f32(in, "FWSQ node");
        n.r.y = bin::get_f32(in, "FWSQ node");
        n.r.z = bin::get_f32(in, "FWSQ node");
        n.T.x() = bin::get_f32(in, "FWSQ node");
        n.T.y() = bin::get_f32(in, "FWSQ node");
        n.T.z() = bin::get_f32(in, "FWSQ node");
    }
    return seq;
}

} // namespace f4d
