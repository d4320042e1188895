#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "motionkit/motion_core.hpp"

namespace testutil {

class TempDir {
   public:
    TempDir() {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() / ("motionkit_test_" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

   private:
    std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

// Chain topology a0 <- a1 <- ... rooted at joint 0.
inline motionkit::SkeletonTopology chain_topology(std::size_t joints) {
    std::vector<std::string> names;
    std::vector<std::optional<std::size_t>> parent;
    for (std::size_t j = 0; j < joints; ++j) {
        names.push_back("j" + std::to_string(j));
        parent.push_back(j == 0 ? std::nullopt : std::optional<std::size_t>(j - 1));
    }
    return motionkit::SkeletonTopology("chain" + std::to_string(joints), names, parent, 0);
}

inline motionkit::PoseFrame random_frame(std::mt19937_64& rng, std::size_t joints, std::size_t bg = 0) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    motionkit::PoseFrame f;
    for (std::size_t j = 0; j < joints; ++j) {
        f.positions.push_back({u(rng), u(rng)});
        f.confidence.push_back(u(rng));
    }
    for (std::size_t b = 0; b < bg; ++b) f.bg_points.push_back({u(rng), u(rng)});
    return f;
}

inline motionkit::PoseSequence random_sequence(std::mt19937_64& rng, const motionkit::SkeletonTopology& topo,
                                               std::size_t frames, std::size_t bg = 0) {
    motionkit::PoseSequence seq;
    seq.topology = topo.name();
    seq.joints = topo.joints();
    seq.fps = {25, 1};
    for (std::size_t k = 0; k < frames; ++k) seq.frames.push_back(random_frame(rng, topo.joint_count(), bg));
    return seq;
}

}  // namespace testutil
