#include "motionkit/pose_adapter.hpp"

#include <algorithm>
#include <stdexcept>

namespace motionkit {

AnchorMode parse_anchor_mode(const std::string& s) {
    if (s == "fixed_reference_root" || s == "fixed") return AnchorMode::FixedReferenceRoot;
    if (s == "scaled_template_trajectory" || s == "trajectory") return AnchorMode::ScaledTemplateTrajectory;
    throw std::invalid_argument("unknown anchor mode '" + s + "'");
}

ParentMode parse_parent_mode(const std::string& s) {
    if (s == "within_frame") return ParentMode::WithinFrame;
    if (s == "literal_reference_parent") return ParentMode::LiteralReferenceParent;
    throw std::invalid_argument("unknown parent mode '" + s + "'");
}

std::string to_string(AnchorMode m) {
    return m == AnchorMode::FixedReferenceRoot ? "fixed_reference_root" : "scaled_template_trajectory";
}

std::string to_string(ParentMode m) {
    return m == ParentMode::WithinFrame ? "within_frame" : "literal_reference_parent";
}

ReferenceBoneLengths estimate_reference_lengths(const PoseSequence& tmpl, const PoseFrame& reference,
                                                const SkeletonTopology& topo, double min_length) {
    if (tmpl.frames.empty()) throw std::invalid_argument("template sequence is empty");
    ReferenceBoneLengths out;
    out.reference = bone_lengths(reference, topo);
    out.template_max.assign(topo.bones().size(), 0.0);
    for (const auto& f : tmpl.frames) {
        auto l = bone_lengths(f, topo);
        for (std::size_t b = 0; b < l.size(); ++b) out.template_max[b] = std::max(out.template_max[b], l[b]);
    }
    out.degenerate.resize(out.template_max.size());
    for (std::size_t b = 0; b < out.template_max.size(); ++b) out.degenerate[b] = out.template_max[b] < min_length;
    return out;
}

PoseFrame retarget_frame(const PoseFrame& template_frame, const PoseFrame& reference,
                         const ReferenceBoneLengths& lengths, const SkeletonTopology& topo, const RetargetConfig& cfg,
                         Vec2 anchor) {
    template_frame.validate(topo.joint_count());
    reference.validate(topo.joint_count());
    const std::size_t nb = topo.bones().size();
    if (lengths.template_max.size() != nb || lengths.reference.size() != nb || lengths.degenerate.size() != nb) {
        throw std::invalid_argument("bone lengths were computed for a different topology");
    }
    if (anchor.x < -1.0 || anchor.x > 2.0 || anchor.y < -1.0 || anchor.y > 2.0) {
        throw std::invalid_argument("anchor outside the [-1,2]^2 sanity box");
    }

    PoseFrame out = template_frame;
    out.positions[topo.root()] = anchor;
    for (std::size_t b = 0; b < nb; ++b) {
        const auto [p, c] = topo.bones()[b];
        const Vec2 base = cfg.parent_mode == ParentMode::WithinFrame ? out.positions[p] : reference.positions[p];
        if (lengths.degenerate[b]) {
            out.positions[c] = base;
            continue;
        }
        const Vec2 dir = template_frame.positions[c] - template_frame.positions[p];
        out.positions[c] = base + (lengths.reference[b] / lengths.template_max[b]) * dir;
    }
    return out;
}

PoseSequence retarget_sequence(const PoseSequence& tmpl, const PoseFrame& reference, const SkeletonTopology& topo,
                               const RetargetConfig& cfg) {
    tmpl.validate();
    const auto lengths = estimate_reference_lengths(tmpl, reference, topo, cfg.min_length);
    const Vec2 ref_root = reference.positions[topo.root()];

    double trajectory_scale = 0.0;
    if (cfg.anchor_mode == AnchorMode::ScaledTemplateTrajectory) {
        double tmpl_torso = 0.0;
        for (const auto& f : tmpl.frames) tmpl_torso = std::max(tmpl_torso, torso_length(f.positions, topo));
        trajectory_scale = tmpl_torso < cfg.min_length ? 0.0 : torso_length(reference.positions, topo) / tmpl_torso;
    }

    PoseSequence out;
    out.fps = tmpl.fps;
    out.topology = tmpl.topology;
    out.joints = tmpl.joints;
    out.frames.resize(tmpl.frames.size());
    const Vec2 tmpl_root0 = tmpl.frames.front().positions[topo.root()];
    for (std::size_t k = 0; k < tmpl.frames.size(); ++k) {
        Vec2 anchor = ref_root;
        if (cfg.anchor_mode == AnchorMode::ScaledTemplateTrajectory) {
            anchor = ref_root + trajectory_scale * (tmpl.frames[k].positions[topo.root()] - tmpl_root0);
        }
        out.frames[k] = retarget_frame(tmpl.frames[k], reference, lengths, topo, cfg, anchor);
    }
    return out;
}

}  // namespace motionkit
