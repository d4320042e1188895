#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "motionkit/motion_core.hpp"

namespace motionkit {

// Defaults shared by the subcommands. Every field can be set from a --config
// file (top-level keys for global options, [subcommand] sections otherwise);
// a command-line flag always wins over the file.
struct ToolConfig {
    std::string topology;                // empty: built-in body14
    double fps = 25.0;                   // training frame rate
    double visibility_threshold = kDefaultVisibilityThreshold;
    std::size_t diffusion_steps = 100;   // desk-scale T
    std::string schedule = "linear";
    double cfg_scale = 1.5;
    std::size_t tau = 4;                 // bridge frames at 12.5 fps
    std::string pad_mode = "replicate";  // 3 leading guider frames
    std::size_t budget = 480000;         // (f+1)·h·w token budget
    std::string rules;                   // filter rules file, empty: defaults
    std::uint64_t seed = 0;
    int jobs = 1;
};

// Entry point of the motionkit binary. Exit codes: 0 success, 1 module error,
// 2 usage error; filter uses 0 accept, 1 reject, 2 error.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// One deterministic SVG per frame: visible joints as circles, bones between
// visible joints as lines, background points as small squares. Colors are
// fixed per subtree below the root.
std::string skeleton_svg(const PoseFrame& frame, const SkeletonTopology& topo, std::size_t size = 512,
                         double threshold = kDefaultVisibilityThreshold);
std::vector<std::filesystem::path> render_skeleton(const PoseSequence& seq, const SkeletonTopology& topo,
                                                   const std::filesystem::path& dir, std::size_t size = 512,
                                                   double threshold = kDefaultVisibilityThreshold);

}  // namespace motionkit
