#include "motionkit/motion_core.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace motionkit {

using nlohmann::json;

namespace {

constexpr double kSanityBound = 10.0;

void check_coordinate(double v, std::size_t line) {
    if (!std::isfinite(v) || v < -kSanityBound || v > kSanityBound) {
        throw ParseError("coordinate out of range at line " + std::to_string(line));
    }
}

Vec2 lerp(Vec2 a, Vec2 b, double t) { return {a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)}; }

}  // namespace

double norm(Vec2 v) { return std::hypot(v.x, v.y); }
double distance(Vec2 a, Vec2 b) { return norm(a - b); }

Fps Fps::from_double(double fps) {
    if (!(fps > 0.0) || !std::isfinite(fps)) throw std::invalid_argument("fps must be positive");
    Fps best{static_cast<std::int64_t>(std::llround(fps)), 1};
    double best_err = std::abs(best.value() - fps);
    for (std::int64_t den = 1; den <= 10000 && best_err > 1e-12; ++den) {
        auto num = static_cast<std::int64_t>(std::llround(fps * static_cast<double>(den)));
        if (num <= 0) continue;
        Fps cand{num, den};
        double err = std::abs(cand.value() - fps);
        if (err < best_err) {
            best = cand;
            best_err = err;
        }
    }
    auto g = std::gcd(best.num, best.den);
    return {best.num / g, best.den / g};
}

// ---------------------------------------------------------------- topology

SkeletonTopology::SkeletonTopology(std::string name, std::vector<std::string> joints,
                                   std::vector<std::optional<std::size_t>> parent, std::size_t root,
                                   std::map<std::string, std::vector<std::size_t>> groups)
    : name_(std::move(name)),
      joints_(std::move(joints)),
      parent_(std::move(parent)),
      root_(root),
      groups_(std::move(groups)) {
    const std::size_t n = joints_.size();
    if (n == 0) throw std::invalid_argument("topology has no joints");
    if (parent_.size() != n) throw std::invalid_argument("parent list length differs from joint count");
    if (root_ >= n) throw std::invalid_argument("root index out of range");
    if (parent_[root_].has_value()) throw std::invalid_argument("root joint must not have a parent");

    std::vector<std::string> sorted = joints_;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
        throw std::invalid_argument("joint names must be unique");
    }

    std::vector<std::vector<std::size_t>> children(n);
    for (std::size_t j = 0; j < n; ++j) {
        if (j == root_) continue;
        if (!parent_[j]) throw std::invalid_argument("joint '" + joints_[j] + "' has no parent");
        if (*parent_[j] >= n) throw std::invalid_argument("parent index out of range");
        children[*parent_[j]].push_back(j);
    }

    // Every joint must reach the root within n steps.
    for (std::size_t j = 0; j < n; ++j) {
        std::size_t cur = j;
        std::size_t steps = 0;
        while (cur != root_) {
            if (++steps > n) throw std::invalid_argument("parent links contain a cycle");
            cur = *parent_[cur];
        }
    }

    std::vector<std::size_t> stack{root_};
    while (!stack.empty()) {
        std::size_t u = stack.back();
        stack.pop_back();
        if (u != root_) bones_.push_back({*parent_[u], u});
        const auto& ch = children[u];
        for (auto it = ch.rbegin(); it != ch.rend(); ++it) stack.push_back(*it);
    }

    for (const auto& [group, members] : groups_) {
        for (auto m : members) {
            if (m >= n) throw std::invalid_argument("group '" + group + "' references unknown joint");
        }
    }
}

std::optional<std::size_t> SkeletonTopology::index_of(const std::string& joint) const {
    auto it = std::find(joints_.begin(), joints_.end(), joint);
    if (it == joints_.end()) return std::nullopt;
    return static_cast<std::size_t>(it - joints_.begin());
}

std::string SkeletonTopology::group_of(std::size_t joint) const {
    for (const auto& [group, members] : groups_) {
        if (group == "torso") continue;
        if (std::find(members.begin(), members.end(), joint) != members.end()) return group;
    }
    return "body";
}

SkeletonTopology SkeletonTopology::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open topology file " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ParseError("malformed topology file: " + std::string(e.what()));
    }
    try {
        auto joints = j.at("joints").get<std::vector<std::string>>();
        std::vector<std::optional<std::size_t>> parent;
        for (const auto& p : j.at("parent")) {
            if (p.is_null() || (p.is_number_integer() && p.get<long long>() < 0)) {
                parent.emplace_back(std::nullopt);
            } else {
                parent.emplace_back(p.get<std::size_t>());
            }
        }
        auto root = j.at("root").get<std::size_t>();
        std::map<std::string, std::vector<std::size_t>> groups;
        if (j.contains("groups")) groups = j.at("groups").get<std::map<std::string, std::vector<std::size_t>>>();
        std::string name = j.value("name", path.stem().string());
        return SkeletonTopology(name, std::move(joints), std::move(parent), root, std::move(groups));
    } catch (const json::exception& e) {
        throw ParseError("invalid topology file: " + std::string(e.what()));
    }
}

void SkeletonTopology::save(const std::filesystem::path& path) const {
    json parent = json::array();
    for (const auto& p : parent_) parent.push_back(p ? json(*p) : json(nullptr));
    json j{{"name", name_}, {"joints", joints_}, {"parent", parent}, {"root", root_}, {"groups", groups_}};
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write topology file " + path.string());
    out << j.dump(2) << '\n';
}

SkeletonTopology SkeletonTopology::default_body() {
    std::vector<std::string> joints{"neck",       "head",    "r_shoulder", "r_elbow", "r_wrist",
                                    "l_shoulder", "l_elbow", "l_wrist",    "r_hip",   "r_knee",
                                    "r_ankle",    "l_hip",   "l_knee",     "l_ankle"};
    std::vector<std::optional<std::size_t>> parent{std::nullopt, 0, 0, 2, 3, 0, 5, 6, 0, 8, 9, 0, 11, 12};
    std::map<std::string, std::vector<std::size_t>> groups{
        {"body", {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13}},
        {"torso", {8, 11}},
    };
    return SkeletonTopology("body14", std::move(joints), std::move(parent), 0, std::move(groups));
}

double torso_length(const std::vector<Vec2>& positions, const SkeletonTopology& topo) {
    const Vec2 root = positions.at(topo.root());
    auto it = topo.groups().find("torso");
    if (it != topo.groups().end() && !it->second.empty()) {
        Vec2 c{};
        for (auto j : it->second) c = c + positions.at(j);
        c = (1.0 / static_cast<double>(it->second.size())) * c;
        return distance(root, c);
    }
    double best = 0.0;
    for (const auto& p : positions) best = std::max(best, distance(root, p));
    return best;
}

// ---------------------------------------------------------------- frames

void PoseFrame::validate(std::size_t expected_joints) const {
    if (positions.size() != expected_joints || confidence.size() != expected_joints) {
        throw std::invalid_argument("joint count mismatch");
    }
    if (bg_points.size() > kMaxBackgroundPoints) {
        throw std::invalid_argument("more than 20 background points");
    }
    for (double c : confidence) {
        if (!(c >= 0.0 && c <= 1.0)) throw std::invalid_argument("confidence outside [0,1]");
    }
}

void PoseSequence::validate() const {
    if (frames.empty()) throw std::invalid_argument("sequence must contain >=1 frame");
    if (fps.num <= 0 || fps.den <= 0) throw std::invalid_argument("fps must be positive");
    for (const auto& f : frames) f.validate(joints.size());
}

// ---------------------------------------------------------------- JSONL io

PoseSequence parse_sequence(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    PoseSequence seq;
    bool have_header = false;

    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception&) {
            throw ParseError("malformed JSON at line " + std::to_string(line_no));
        }
        try {
            if (!have_header) {
                seq.topology = j.at("topology").get<std::string>();
                seq.fps = Fps::from_double(j.at("fps").get<double>());
                seq.joints = j.at("joints").get<std::vector<std::string>>();
                have_header = true;
                continue;
            }
            PoseFrame frame;
            const auto& kp = j.at("kp");
            if (kp.size() != seq.joints.size()) {
                throw ParseError("joint count mismatch at line " + std::to_string(line_no));
            }
            for (const auto& p : kp) {
                if (p.size() != 3) throw ParseError("keypoint needs [x,y,c] at line " + std::to_string(line_no));
                Vec2 v{p[0].get<double>(), p[1].get<double>()};
                check_coordinate(v.x, line_no);
                check_coordinate(v.y, line_no);
                double c = p[2].get<double>();
                if (!(c >= 0.0 && c <= 1.0)) {
                    throw ParseError("confidence outside [0,1] at line " + std::to_string(line_no));
                }
                frame.positions.push_back(v);
                frame.confidence.push_back(c);
            }
            if (j.contains("bg")) {
                for (const auto& p : j.at("bg")) {
                    if (p.size() != 2) throw ParseError("background point needs [x,y] at line " + std::to_string(line_no));
                    Vec2 v{p[0].get<double>(), p[1].get<double>()};
                    check_coordinate(v.x, line_no);
                    check_coordinate(v.y, line_no);
                    frame.bg_points.push_back(v);
                }
                if (frame.bg_points.size() > kMaxBackgroundPoints) {
                    throw ParseError("more than 20 background points at line " + std::to_string(line_no));
                }
            }
            seq.frames.push_back(std::move(frame));
        } catch (const json::exception& e) {
            throw ParseError("invalid record at line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    if (!have_header || seq.frames.empty()) throw ParseError("sequence must contain >=1 frame");
    return seq;
}

PoseSequence load_sequence(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open sequence file " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_sequence(buf.str());
}

std::string format_sequence(const PoseSequence& seq) {
    seq.validate();
    std::string out;
    json header{{"topology", seq.topology}, {"fps", seq.fps.value()}, {"joints", seq.joints}};
    out += header.dump() + '\n';
    for (std::size_t t = 0; t < seq.frames.size(); ++t) {
        const auto& f = seq.frames[t];
        json kp = json::array();
        for (std::size_t j = 0; j < f.positions.size(); ++j) {
            kp.push_back({f.positions[j].x, f.positions[j].y, f.confidence[j]});
        }
        json bg = json::array();
        for (const auto& p : f.bg_points) bg.push_back({p.x, p.y});
        json line{{"t", t}, {"kp", kp}, {"bg", bg}};
        out += line.dump() + '\n';
    }
    return out;
}

void save_sequence(const PoseSequence& seq, const std::filesystem::path& path) {
    std::string text = format_sequence(seq);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write sequence file " + path.string());
    out << text;
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

// ---------------------------------------------------------------- geometry

namespace {

void check_extent(Extent e) {
    if (!(e.width > 0.0) || !(e.height > 0.0)) throw std::invalid_argument("extent must be positive");
}

template <typename Map>
PoseSequence map_points(const PoseSequence& seq, Map&& fn) {
    PoseSequence out = seq;
    for (auto& f : out.frames) {
        for (auto& p : f.positions) p = fn(p);
        for (auto& p : f.bg_points) p = fn(p);
    }
    return out;
}

}  // namespace

Vec2 normalize_point(Vec2 pixel, Extent extent) {
    check_extent(extent);
    const double s = std::max(extent.width, extent.height);
    return {(pixel.x + 0.5 * (s - extent.width)) / s, (pixel.y + 0.5 * (s - extent.height)) / s};
}

Vec2 denormalize_point(Vec2 unit, Extent extent) {
    check_extent(extent);
    const double s = std::max(extent.width, extent.height);
    return {unit.x * s - 0.5 * (s - extent.width), unit.y * s - 0.5 * (s - extent.height)};
}

PoseSequence normalize_to_unit_square(const PoseSequence& seq, Extent extent) {
    check_extent(extent);
    return map_points(seq, [&](Vec2 p) { return normalize_point(p, extent); });
}

PoseSequence denormalize_from_unit_square(const PoseSequence& seq, Extent extent) {
    check_extent(extent);
    return map_points(seq, [&](Vec2 p) { return denormalize_point(p, extent); });
}

std::vector<double> bone_lengths(const PoseFrame& frame, const SkeletonTopology& topo) {
    frame.validate(topo.joint_count());
    std::vector<double> out;
    out.reserve(topo.bones().size());
    for (const auto& b : topo.bones()) out.push_back(distance(frame.positions[b.child], frame.positions[b.parent]));
    return out;
}

PoseSequence resample_fps(const PoseSequence& seq, Fps target) {
    seq.validate();
    if (target.num <= 0 || target.den <= 0) throw std::invalid_argument("target fps must be positive");
    const std::size_t m = seq.frames.size();

    // Source index of output frame k is k * step with step = src / target as
    // an exact ratio step_num / step_den.
    const std::int64_t step_num = seq.fps.num * target.den;
    const std::int64_t step_den = seq.fps.den * target.num;
    const auto count = static_cast<std::size_t>(
                           (static_cast<std::int64_t>(m - 1) * step_den) / step_num) + 1;

    PoseSequence out;
    out.fps = target;
    out.topology = seq.topology;
    out.joints = seq.joints;
    out.frames.reserve(count);
    for (std::size_t k = 0; k < count; ++k) {
        const std::int64_t pos = static_cast<std::int64_t>(k) * step_num;
        const auto i = static_cast<std::size_t>(pos / step_den);
        const std::int64_t rem = pos % step_den;
        if (rem == 0) {
            out.frames.push_back(seq.frames[i]);
            continue;
        }
        if (m < 2 || i + 1 >= m) throw std::invalid_argument("resampling needs at least 2 frames to interpolate");
        const double t = static_cast<double>(rem) / static_cast<double>(step_den);
        const auto& a = seq.frames[i];
        const auto& b = seq.frames[i + 1];
        PoseFrame f;
        f.positions.resize(a.positions.size());
        f.confidence.resize(a.confidence.size());
        for (std::size_t j = 0; j < a.positions.size(); ++j) {
            f.positions[j] = lerp(a.positions[j], b.positions[j], t);
            f.confidence[j] = std::min(a.confidence[j], b.confidence[j]);
        }
        if (a.bg_points.size() == b.bg_points.size()) {
            f.bg_points.resize(a.bg_points.size());
            for (std::size_t j = 0; j < a.bg_points.size(); ++j) f.bg_points[j] = lerp(a.bg_points[j], b.bg_points[j], t);
        } else {
            f.bg_points = a.bg_points;
        }
        out.frames.push_back(std::move(f));
    }
    return out;
}

}  // namespace motionkit
