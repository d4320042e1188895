#include "motionkit/filter.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

using nlohmann::json;

namespace motionkit {

std::vector<std::uint8_t> MaskRle::decode() const {
    std::vector<std::uint8_t> out;
    out.reserve(height * width);
    std::uint8_t v = 0;
    for (auto c : counts) {
        out.insert(out.end(), c, v);
        v ^= 1;
    }
    if (out.size() != height * width) {
        throw std::invalid_argument("mask RLE covers " + std::to_string(out.size()) + " pixels, expected " +
                                    std::to_string(height * width));
    }
    return out;
}

MaskRle MaskRle::encode(const std::vector<std::uint8_t>& mask, std::size_t height, std::size_t width) {
    if (mask.size() != height * width) throw std::invalid_argument("mask size does not match its dimensions");
    MaskRle r{height, width, {}};
    std::uint8_t cur = 0;
    std::uint32_t run = 0;
    for (auto px : mask) {
        const std::uint8_t b = px ? 1 : 0;
        if (b != cur) {
            r.counts.push_back(run);
            run = 0;
            cur = b;
        }
        ++run;
    }
    r.counts.push_back(run);
    return r;
}

double mask_iou(const MaskRle& a, const MaskRle& b) {
    if (a.height != b.height || a.width != b.width) {
        throw std::invalid_argument("mask dimensions differ: " + std::to_string(a.height) + "x" +
                                    std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" +
                                    std::to_string(b.width));
    }
    const auto da = a.decode(), db = b.decode();
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < da.size(); ++i) {
        inter += da[i] & db[i];
        uni += da[i] | db[i];
    }
    if (uni == 0) return 1.0;  // both empty
    return static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

std::vector<Vec2> parse_kp(const json& j) {
    std::vector<Vec2> kp;
    for (const auto& p : j) {
        if (!p.is_array() || p.size() < 2) throw ParseError("kp entries must be [x, y]");
        kp.push_back({p[0].get<double>(), p[1].get<double>()});
    }
    return kp;
}

FrameRecord parse_record(const json& j) {
    FrameRecord r;
    r.t = j.at("t").get<long>();
    if (j.contains("vis")) {
        for (const auto& v : j["vis"]) r.vis.push_back(v.is_boolean() ? v.get<bool>() : v.get<double>() != 0.0);
    }
    auto score = [&](const char* key, double lo, double hi) -> std::optional<double> {
        if (!j.contains(key) || j[key].is_null()) return std::nullopt;
        const double v = j[key].get<double>();
        if (!(v >= lo && v <= hi)) {
            throw ParseError(std::string(key) + " = " + std::to_string(v) + " outside [" + std::to_string(lo) + ", " +
                             std::to_string(hi) + "]");
        }
        return v;
    };
    r.iqa = score("iqa", 0, 100);
    r.hand = score("hand", 0, 1);
    r.teeth = score("teeth", 0, 1);
    if (j.contains("hist") && !j["hist"].is_null()) r.hist = j["hist"].get<std::vector<double>>();
    if (j.contains("mask_rle") && !j["mask_rle"].is_null()) {
        const auto& m = j["mask_rle"];
        const auto size = m.at("size").get<std::vector<std::size_t>>();
        if (size.size() != 2) throw ParseError("mask_rle size must be [h, w]");
        r.mask = MaskRle{size[0], size[1], m.at("counts").get<std::vector<std::uint32_t>>()};
    }
    if (j.contains("kp") && !j["kp"].is_null()) r.kp = parse_kp(j["kp"]);
    return r;
}

}  // namespace

std::vector<FrameRecord> parse_records(const std::string& text) {
    std::vector<FrameRecord> out;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(parse_record(json::parse(line)));
        } catch (const json::exception& e) {
            throw ParseError("record line " + std::to_string(lineno) + ": " + e.what());
        } catch (const ParseError& e) {
            throw ParseError("record line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

std::vector<FrameRecord> load_records(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_records(ss.str());
}

std::string format_records(const std::vector<FrameRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        json j;
        j["t"] = r.t;
        json vis = json::array();
        for (bool v : r.vis) vis.push_back(v ? 1 : 0);
        j["vis"] = vis;
        if (r.iqa) j["iqa"] = *r.iqa;
        if (r.hand) j["hand"] = *r.hand;
        if (r.teeth) j["teeth"] = *r.teeth;
        if (r.hist) j["hist"] = *r.hist;
        if (r.mask) j["mask_rle"] = {{"size", {r.mask->height, r.mask->width}}, {"counts", r.mask->counts}};
        if (r.kp) {
            json kp = json::array();
            for (const auto& p : *r.kp) kp.push_back({p.x, p.y});
            j["kp"] = kp;
        }
        out += j.dump() + "\n";
    }
    return out;
}

const std::vector<std::string>& rule_names() {
    static const std::vector<std::string> names = {
        "min_frames",         "min_visibility_fraction", "max_relative_kp_speed",  "min_iqa_mean",
        "min_iqa_all",        "min_hand_clarity_mean",   "min_teeth_clarity_mean", "max_histogram_variance",
        "max_joint_speed",    "mask_iou_threshold"};
    return names;
}

void FilterRuleSet::validate() const {
    for (double v : {min_frames, min_visibility_fraction, max_relative_kp_speed, min_iqa_mean, min_iqa_all,
                     min_hand_clarity_mean, min_teeth_clarity_mean, max_histogram_variance, max_joint_speed,
                     mask_iou_threshold, fps}) {
        if (!std::isfinite(v)) throw std::invalid_argument("filter thresholds must be finite");
    }
    if (!(fps > 0)) throw std::invalid_argument("fps must be positive");
    for (const auto& d : disabled) {
        if (std::find(rule_names().begin(), rule_names().end(), d) == rule_names().end()) {
            throw std::invalid_argument("unknown rule '" + d + "'");
        }
    }
}

FilterRuleSet parse_rules(const std::string& text) {
    FilterRuleSet r;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ParseError("rules line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
        if (key == "mask_iou_mode") {
            if (value == "floor") r.mask_iou_mode = IouMode::Floor;
            else if (value == "cap") r.mask_iou_mode = IouMode::Cap;
            else throw ParseError("rules line " + std::to_string(lineno) + ": mask_iou_mode must be floor or cap");
            continue;
        }
        if (key == "speed_units") {
            if (value == "per_frame") r.speed_units = SpeedUnits::PerFrame;
            else if (value == "per_second") r.speed_units = SpeedUnits::PerSecond;
            else throw ParseError("rules line " + std::to_string(lineno) + ": speed_units must be per_frame or per_second");
            continue;
        }
        double* slot = nullptr;
        if (key == "min_frames") slot = &r.min_frames;
        else if (key == "min_visibility_fraction") slot = &r.min_visibility_fraction;
        else if (key == "max_relative_kp_speed") slot = &r.max_relative_kp_speed;
        else if (key == "min_iqa_mean") slot = &r.min_iqa_mean;
        else if (key == "min_iqa_all") slot = &r.min_iqa_all;
        else if (key == "min_hand_clarity_mean") slot = &r.min_hand_clarity_mean;
        else if (key == "min_teeth_clarity_mean") slot = &r.min_teeth_clarity_mean;
        else if (key == "max_histogram_variance") slot = &r.max_histogram_variance;
        else if (key == "max_joint_speed") slot = &r.max_joint_speed;
        else if (key == "mask_iou_threshold") slot = &r.mask_iou_threshold;
        else if (key == "fps") slot = &r.fps;
        else throw ParseError("rules line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        if (value == "off") {
            if (key == "fps") throw ParseError("rules line " + std::to_string(lineno) + ": fps cannot be off");
            r.disabled.insert(key);
            continue;
        }
        try {
            std::size_t used = 0;
            *slot = std::stod(value, &used);
            if (used != value.size()) throw std::invalid_argument(value);
        } catch (const std::exception&) {
            throw ParseError("rules line " + std::to_string(lineno) + ": '" + value + "' is not a number");
        }
    }
    r.validate();
    return r;
}

FilterRuleSet load_rules(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_rules(ss.str());
}

std::vector<std::string> SegmentReport::failed() const {
    std::vector<std::string> out;
    for (const auto& r : rules)
        if (!r.passed) out.push_back(r.rule);
    return out;
}

std::string SegmentReport::to_json() const {
    json j;
    j["decision"] = accepted ? "accept" : "reject";
    json rs = json::array();
    for (const auto& r : rules) {
        rs.push_back({{"rule", r.rule},
                      {"passed", r.passed},
                      {"value", r.value},
                      {"threshold", r.threshold},
                      {"comparator", r.comparator}});
    }
    j["rules"] = rs;
    j["failed"] = failed();
    return j.dump(2);
}

namespace {

std::vector<double> speeds(const std::vector<std::vector<Vec2>>& kp, const std::vector<long>& t,
                           const SkeletonTopology& topo, bool relative) {
    if (kp.size() != t.size()) throw std::invalid_argument("keypoint frames and timestamps differ in length");
    if (kp.size() < 2) throw std::invalid_argument("speed needs at least 2 keypoint frames");
    const std::size_t root = topo.root();
    std::vector<double> out;
    for (std::size_t k = 1; k < kp.size(); ++k) {
        if (kp[k].size() != topo.joint_count() || kp[k - 1].size() != topo.joint_count()) {
            throw std::invalid_argument("keypoint count does not match topology " + topo.name());
        }
        const double torso = torso_length(kp[k], topo);
        if (torso < 1e-6) throw std::invalid_argument("degenerate torso length at t=" + std::to_string(t[k]));
        const double gap = static_cast<double>(t[k] - t[k - 1]);
        double best = 0.0;
        for (std::size_t j = 0; j < topo.joint_count(); ++j) {
            Vec2 d = kp[k][j] - kp[k - 1][j];
            if (relative) d = d - (kp[k][root] - kp[k - 1][root]);
            best = std::max(best, norm(d));
        }
        out.push_back(best / torso / gap);
    }
    return out;
}

}  // namespace

std::vector<double> relative_keypoint_speed(const std::vector<std::vector<Vec2>>& kp, const std::vector<long>& t,
                                            const SkeletonTopology& topo) {
    return speeds(kp, t, topo, true);
}

std::vector<double> joint_speed(const std::vector<std::vector<Vec2>>& kp, const std::vector<long>& t,
                                const SkeletonTopology& topo) {
    return speeds(kp, t, topo, false);
}

double histogram_variance(const std::vector<std::vector<double>>& hists) {
    if (hists.size() < 2) throw std::invalid_argument("histogram variance needs at least 2 histograms");
    const std::size_t bins = hists.front().size();
    for (const auto& h : hists) {
        if (h.size() != bins) throw std::invalid_argument("histograms differ in bin count");
        const double s = std::accumulate(h.begin(), h.end(), 0.0);
        if (std::abs(s - 1.0) > 1e-6) throw std::invalid_argument("histogram is not normalized (sum " + std::to_string(s) + ")");
    }
    const auto n = static_cast<double>(hists.size());
    double total = 0.0;
    for (std::size_t b = 0; b < bins; ++b) {
        double mean = 0.0;
        for (const auto& h : hists) mean += h[b];
        mean /= n;
        double var = 0.0;
        for (const auto& h : hists) var += (h[b] - mean) * (h[b] - mean);
        total += var / n;
    }
    return total;
}

SegmentReport evaluate_segment(const std::vector<FrameRecord>& records, const FilterRuleSet& rules,
                               const SkeletonTopology& topo) {
    if (records.empty()) throw std::invalid_argument("segment has no records");
    for (std::size_t i = 1; i < records.size(); ++i) {
        if (records[i].t <= records[i - 1].t) throw std::invalid_argument("record frame indices must strictly increase");
    }
    rules.validate();

    SegmentReport rep;
    auto add = [&](const std::string& name, double value, double threshold, bool at_least) {
        RuleResult r{name, at_least ? value >= threshold : value <= threshold, value, threshold, at_least ? ">=" : "<="};
        rep.rules.push_back(r);
    };
    auto scores = [&](std::optional<double> FrameRecord::*field, const char* name) {
        std::vector<double> v;
        for (const auto& r : records)
            if (r.*field) v.push_back(*(r.*field));
        if (v.empty()) throw std::invalid_argument(std::string("rule needs '") + name + "' in at least one record");
        return v;
    };
    auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); };

    if (rules.enabled("min_frames")) {
        add("min_frames", static_cast<double>(records.back().t - records.front().t + 1), rules.min_frames, true);
    }
    if (rules.enabled("min_visibility_fraction")) {
        std::size_t ok = 0;
        for (const auto& r : records) {
            if (r.vis.empty()) throw std::invalid_argument("visibility rule needs 'vis' in every record");
            ok += std::all_of(r.vis.begin(), r.vis.end(), [](bool b) { return b; });
        }
        add("min_visibility_fraction", static_cast<double>(ok) / static_cast<double>(records.size()),
            rules.min_visibility_fraction, true);
    }
    const bool want_speed = rules.enabled("max_relative_kp_speed") || rules.enabled("max_joint_speed");
    if (want_speed) {
        std::vector<std::vector<Vec2>> kp;
        std::vector<long> t;
        for (const auto& r : records) {
            if (r.kp) {
                kp.push_back(*r.kp);
                t.push_back(r.t);
            }
        }
        if (kp.size() < 2) throw std::invalid_argument("speed rules need 'kp' in at least 2 records");
        const double unit = rules.speed_units == SpeedUnits::PerSecond ? rules.fps : 1.0;
        if (rules.enabled("max_relative_kp_speed")) {
            const auto s = relative_keypoint_speed(kp, t, topo);
            add("max_relative_kp_speed", *std::max_element(s.begin(), s.end()) * unit, rules.max_relative_kp_speed, false);
        }
        if (rules.enabled("max_joint_speed")) {
            const auto s = joint_speed(kp, t, topo);
            add("max_joint_speed", *std::max_element(s.begin(), s.end()) * unit, rules.max_joint_speed, false);
        }
    }
    if (rules.enabled("min_iqa_mean")) add("min_iqa_mean", mean(scores(&FrameRecord::iqa, "iqa")), rules.min_iqa_mean, true);
    if (rules.enabled("min_iqa_all")) {
        const auto v = scores(&FrameRecord::iqa, "iqa");
        const double lo = *std::min_element(v.begin(), v.end());
        // every frame must strictly exceed the floor
        rep.rules.push_back({"min_iqa_all", lo > rules.min_iqa_all, lo, rules.min_iqa_all, ">"});
    }
    if (rules.enabled("min_hand_clarity_mean")) {
        add("min_hand_clarity_mean", mean(scores(&FrameRecord::hand, "hand")), rules.min_hand_clarity_mean, true);
    }
    if (rules.enabled("min_teeth_clarity_mean")) {
        add("min_teeth_clarity_mean", mean(scores(&FrameRecord::teeth, "teeth")), rules.min_teeth_clarity_mean, true);
    }
    if (rules.enabled("max_histogram_variance")) {
        std::vector<std::vector<double>> h;
        for (const auto& r : records)
            if (r.hist) h.push_back(*r.hist);
        if (h.size() < 2) throw std::invalid_argument("histogram rule needs 'hist' in at least 2 records");
        add("max_histogram_variance", histogram_variance(h), rules.max_histogram_variance, false);
    }
    if (rules.enabled("mask_iou_threshold")) {
        std::vector<const MaskRle*> masks;
        for (const auto& r : records)
            if (r.mask) masks.push_back(&*r.mask);
        if (masks.size() < 2) throw std::invalid_argument("mask IoU rule needs 'mask_rle' in at least 2 records");
        std::vector<double> ious;
        for (std::size_t i = 1; i < masks.size(); ++i) ious.push_back(mask_iou(*masks[i - 1], *masks[i]));
        if (rules.mask_iou_mode == IouMode::Floor) {
            add("mask_iou_threshold", *std::min_element(ious.begin(), ious.end()), rules.mask_iou_threshold, true);
        } else {
            add("mask_iou_threshold", *std::max_element(ious.begin(), ious.end()), rules.mask_iou_threshold, false);
        }
    }

    // report in canonical rule order regardless of evaluation grouping
    std::stable_sort(rep.rules.begin(), rep.rules.end(), [](const RuleResult& a, const RuleResult& b) {
        const auto& n = rule_names();
        return std::find(n.begin(), n.end(), a.rule) < std::find(n.begin(), n.end(), b.rule);
    });
    rep.accepted = std::all_of(rep.rules.begin(), rep.rules.end(), [](const RuleResult& r) { return r.passed; });
    return rep;
}

}  // namespace motionkit
