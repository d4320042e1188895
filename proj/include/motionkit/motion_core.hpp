#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace motionkit {

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
    friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
    friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
    friend bool operator==(Vec2 a, Vec2 b) = default;
};

double norm(Vec2 v);
double distance(Vec2 a, Vec2 b);

constexpr std::size_t kMaxBackgroundPoints = 20;
constexpr double kDefaultVisibilityThreshold = 0.3;

class ParseError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Frame rate as an exact ratio num/den.
struct Fps {
    std::int64_t num = 25;
    std::int64_t den = 1;

    double value() const { return static_cast<double>(num) / static_cast<double>(den); }
    // Nearest ratio with denominator <= 10000.
    static Fps from_double(double fps);
    friend bool operator==(const Fps&, const Fps&) = default;
};

struct Bone {
    std::size_t parent = 0;
    std::size_t child = 0;
};

// Joint tree rooted at the neck. Bone order is the depth-first order from the
// root, visiting children in ascending joint index.
class SkeletonTopology {
   public:
    SkeletonTopology() = default;
    SkeletonTopology(std::string name, std::vector<std::string> joints,
                     std::vector<std::optional<std::size_t>> parent, std::size_t root,
                     std::map<std::string, std::vector<std::size_t>> groups = {});

    const std::string& name() const { return name_; }
    std::size_t joint_count() const { return joints_.size(); }
    const std::vector<std::string>& joints() const { return joints_; }
    std::optional<std::size_t> parent(std::size_t joint) const { return parent_.at(joint); }
    std::size_t root() const { return root_; }
    const std::map<std::string, std::vector<std::size_t>>& groups() const { return groups_; }
    const std::vector<Bone>& bones() const { return bones_; }
    std::optional<std::size_t> index_of(const std::string& joint) const;
    // Name of the first group containing the joint, "body" when none does.
    std::string group_of(std::size_t joint) const;

    static SkeletonTopology load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;
    // Neck-rooted body: neck, head, shoulders, elbows, wrists, hips, knees, ankles.
    static SkeletonTopology default_body();

   private:
    std::string name_;
    std::vector<std::string> joints_;
    std::vector<std::optional<std::size_t>> parent_;
    std::size_t root_ = 0;
    std::map<std::string, std::vector<std::size_t>> groups_;
    std::vector<Bone> bones_;
};

// Distance from the root to the centroid of the "torso" group; falls back to
// the farthest joint from the root when the topology has no such group.
double torso_length(const std::vector<Vec2>& positions, const SkeletonTopology& topo);

struct PoseFrame {
    std::vector<Vec2> positions;
    std::vector<double> confidence;
    std::vector<Vec2> bg_points;

    std::size_t joint_count() const { return positions.size(); }
    bool visible(std::size_t joint, double threshold = kDefaultVisibilityThreshold) const {
        return confidence[joint] >= threshold;
    }
    void validate(std::size_t expected_joints) const;
    friend bool operator==(const PoseFrame&, const PoseFrame&) = default;
};

struct PoseSequence {
    std::vector<PoseFrame> frames;
    Fps fps;
    std::string topology;
    std::vector<std::string> joints;

    std::size_t size() const { return frames.size(); }
    std::size_t joint_count() const { return joints.size(); }
    void validate() const;
    friend bool operator==(const PoseSequence&, const PoseSequence&) = default;
};

// JSON Lines: a header object then one object per frame.
PoseSequence load_sequence(const std::filesystem::path& path);
PoseSequence parse_sequence(const std::string& text);
void save_sequence(const PoseSequence& seq, const std::filesystem::path& path);
std::string format_sequence(const PoseSequence& seq);

struct Extent {
    double width = 0.0;
    double height = 0.0;
};

// Letterbox convention: divide by the longer side and center the shorter one,
// so pixel (x, y) maps to ((x + (s - W) / 2) / s, (y + (s - H) / 2) / s) with
// s = max(W, H). Background points use the same mapping as the body.
Vec2 normalize_point(Vec2 pixel, Extent extent);
Vec2 denormalize_point(Vec2 unit, Extent extent);
PoseSequence normalize_to_unit_square(const PoseSequence& seq, Extent extent);
PoseSequence denormalize_from_unit_square(const PoseSequence& seq, Extent extent);

std::vector<double> bone_lengths(const PoseFrame& frame, const SkeletonTopology& topo);

PoseSequence resample_fps(const PoseSequence& seq, Fps target);

}  // namespace motionkit
