#pragma once

#include <string>
#include <vector>

#include "motionkit/motion_core.hpp"

namespace motionkit {

enum class AnchorMode { FixedReferenceRoot, ScaledTemplateTrajectory };
enum class ParentMode { WithinFrame, LiteralReferenceParent };

AnchorMode parse_anchor_mode(const std::string& s);
ParentMode parse_parent_mode(const std::string& s);
std::string to_string(AnchorMode m);
std::string to_string(ParentMode m);

struct RetargetConfig {
    AnchorMode anchor_mode = AnchorMode::ScaledTemplateTrajectory;
    ParentMode parent_mode = ParentMode::WithinFrame;
    double min_length = 1e-6;
};

// Per-bone lengths in topology bone order.
struct ReferenceBoneLengths {
    std::vector<double> template_max;  // max over template frames
    std::vector<double> reference;     // reference frame
    std::vector<bool> degenerate;      // template_max below the length floor
};

ReferenceBoneLengths estimate_reference_lengths(const PoseSequence& tmpl, const PoseFrame& reference,
                                                const SkeletonTopology& topo, double min_length = 1e-6);

// Places the root at anchor, then walks bones depth-first:
//   child = parent_term + reference_len * (tmpl_child - tmpl_parent) / template_max
// parent_term is the already-retargeted parent of this frame (WithinFrame) or
// the reference-frame parent (LiteralReferenceParent). Degenerate bones put
// the child on parent_term.
PoseFrame retarget_frame(const PoseFrame& template_frame, const PoseFrame& reference,
                         const ReferenceBoneLengths& lengths, const SkeletonTopology& topo, const RetargetConfig& cfg,
                         Vec2 anchor);

PoseSequence retarget_sequence(const PoseSequence& tmpl, const PoseFrame& reference, const SkeletonTopology& topo,
                               const RetargetConfig& cfg = {});

}  // namespace motionkit
