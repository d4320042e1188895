#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "motionkit/motion_core.hpp"

namespace motionkit {

constexpr std::size_t kHistogramBins = 32;

// COCO-style uncompressed RLE: alternating run lengths over the row-major
// raster, starting with a run of zeros.
struct MaskRle {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint32_t> counts;

    std::vector<std::uint8_t> decode() const;
    static MaskRle encode(const std::vector<std::uint8_t>& mask, std::size_t height, std::size_t width);
};

double mask_iou(const MaskRle& a, const MaskRle& b);

struct FrameRecord {
    long t = 0;
    std::vector<bool> vis;
    std::optional<double> iqa;
    std::optional<double> hand;
    std::optional<double> teeth;
    std::optional<std::vector<double>> hist;
    std::optional<MaskRle> mask;
    std::optional<std::vector<Vec2>> kp;
};

std::vector<FrameRecord> parse_records(const std::string& text);
std::vector<FrameRecord> load_records(const std::string& path);
std::string format_records(const std::vector<FrameRecord>& records);

enum class IouMode { Floor, Cap };
enum class SpeedUnits { PerFrame, PerSecond };

struct FilterRuleSet {
    double min_frames = 30;
    double min_visibility_fraction = 0.8;
    double max_relative_kp_speed = 0.3;
    double min_iqa_mean = 60;
    double min_iqa_all = 45;
    double min_hand_clarity_mean = 0.50;
    double min_teeth_clarity_mean = 0.40;
    double max_histogram_variance = 0.3;
    double max_joint_speed = 0.3;
    double mask_iou_threshold = 0.7;
    IouMode mask_iou_mode = IouMode::Floor;
    SpeedUnits speed_units = SpeedUnits::PerFrame;
    double fps = 25;
    std::set<std::string> disabled;

    bool enabled(const std::string& rule) const { return !disabled.count(rule); }
    void validate() const;
};

// Rule keys in evaluation order.
const std::vector<std::string>& rule_names();

// "key = value" lines, '#' comments. Values are numbers, or "off" to disable
// a rule; mask_iou_mode takes floor|cap and speed_units per_frame|per_second.
FilterRuleSet parse_rules(const std::string& text);
FilterRuleSet load_rules(const std::string& path);

struct RuleResult {
    std::string rule;
    bool passed = true;
    double value = 0;
    double threshold = 0;
    std::string comparator;  // how value must relate to threshold to pass
};

struct SegmentReport {
    bool accepted = true;
    std::vector<RuleResult> rules;

    std::vector<std::string> failed() const;
    std::string to_json() const;
};

// Evaluates every enabled rule; no short-circuit.
SegmentReport evaluate_segment(const std::vector<FrameRecord>& records, const FilterRuleSet& rules,
                               const SkeletonTopology& topo);

// Max over joints of the root-relative displacement between consecutive
// keypoint frames, divided by the later frame's torso length and the frame gap.
std::vector<double> relative_keypoint_speed(const std::vector<std::vector<Vec2>>& kp, const std::vector<long>& t,
                                            const SkeletonTopology& topo);
// Same without subtracting the root.
std::vector<double> joint_speed(const std::vector<std::vector<Vec2>>& kp, const std::vector<long>& t,
                                const SkeletonTopology& topo);

// Sum over bins of the population variance over time of that bin's mass
// (bin count times the mean per-bin variance). Bounded by 1 - 1/bins.
double histogram_variance(const std::vector<std::vector<double>>& hists);

}  // namespace motionkit
