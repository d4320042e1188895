#include "motionkit/segments.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "motionkit/motion_core.hpp"

using nlohmann::json;

namespace motionkit {

LatentGeometry latent_geometry(std::size_t height, std::size_t width, std::size_t budget) {
    if (height < kSpatialCompression || width < kSpatialCompression || height % kSpatialCompression != 0 ||
        width % kSpatialCompression != 0) {
        throw std::invalid_argument("height and width must be positive multiples of 8, got " + std::to_string(height) +
                                    "x" + std::to_string(width));
    }
    LatentGeometry g;
    g.height = height;
    g.width = width;
    g.latent_h = height / kSpatialCompression;
    g.latent_w = width / kSpatialCompression;
    g.budget = budget;
    const std::size_t cells = g.latent_h * g.latent_w;
    if (budget < cells) {
        throw std::invalid_argument("token budget " + std::to_string(budget) + " is below one latent frame (" +
                                    std::to_string(cells) + " tokens)");
    }
    g.latent_frames = budget / cells;
    return g;
}

std::string to_string(PrefixSource s) {
    return s == PrefixSource::InitialImage ? "initial_image" : "previous_segment";
}

namespace {

std::size_t round_up_4k1(std::size_t n) { return n <= 1 ? 1 : 4 * ((n - 2) / 4 + 1) + 1; }

}  // namespace

SegmentPlan plan_segments(std::size_t frames, std::size_t capacity) {
    if (frames < 1) throw std::invalid_argument("frame count must be >= 1");
    if (capacity % 4 != 1) throw std::invalid_argument("segment capacity must be 4k+1");
    SegmentPlan plan;
    plan.total_frames = frames;
    plan.capacity = capacity;
    if (frames == 1) {
        plan.segments.push_back({0, 0, 0, PrefixSource::InitialImage});
        return plan;
    }
    if (capacity < 5) throw std::invalid_argument("segment capacity 1 cannot advance past the prefix frame");

    std::size_t start = 0;
    while (true) {
        const std::size_t remaining = frames - start;  // real frames including the shared one
        Segment s;
        s.start_frame = start;
        s.prefix_source = start == 0 ? PrefixSource::InitialImage : PrefixSource::PreviousSegment;
        if (remaining <= capacity) {
            s.end_frame = frames - 1;
            s.padded_frames = round_up_4k1(remaining) - remaining;
            plan.segments.push_back(s);
            break;
        }
        s.end_frame = start + capacity - 1;
        plan.segments.push_back(s);
        start = s.end_frame;
    }
    return plan;
}

SegmentPlan plan_segments(std::size_t frames, const LatentGeometry& geometry) {
    return plan_segments(frames, geometry.capacity());
}

std::string plan_to_json(const SegmentPlan& plan, const LatentGeometry* geometry) {
    json j;
    j["frames"] = plan.total_frames;
    j["capacity"] = plan.capacity;
    if (geometry) {
        j["geometry"] = {{"height", geometry->height},
                         {"width", geometry->width},
                         {"latent_h", geometry->latent_h},
                         {"latent_w", geometry->latent_w},
                         {"latent_frames", geometry->latent_frames},
                         {"budget", geometry->budget},
                         {"tokens", geometry->tokens()}};
    }
    json segs = json::array();
    for (const auto& s : plan.segments) {
        segs.push_back({{"start_frame", s.start_frame},
                        {"end_frame", s.end_frame},
                        {"padded_frames", s.padded_frames},
                        {"length", s.length()},
                        {"prefix_source", to_string(s.prefix_source)}});
    }
    j["segments"] = segs;
    return j.dump(2);
}

std::vector<bool> prefix_loss_mask(std::size_t latent_frames) {
    if (latent_frames == 0) throw std::invalid_argument("latent frame count must be >= 1");
    if (latent_frames == 1) std::clog << "warning: prefix loss mask with one latent frame leaves nothing to train\n";
    std::vector<bool> m(latent_frames, true);
    m[0] = false;
    return m;
}

TextBoxTrack parse_text_boxes(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("text boxes: ") + e.what());
    }
    // Either a bare list of frames or {"frames": [...]}; each box is [x0, y0, x1, y1].
    const json& frames = j.is_object() ? j.at("frames") : j;
    if (!frames.is_array()) throw ParseError("text boxes: expected a list of frames");
    TextBoxTrack track;
    for (std::size_t t = 0; t < frames.size(); ++t) {
        std::vector<TextBox> boxes;
        for (const auto& b : frames[t]) {
            if (!b.is_array() || b.size() != 4) {
                throw ParseError("text boxes: frame " + std::to_string(t) + " has a box that is not [x0,y0,x1,y1]");
            }
            boxes.push_back({b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()});
        }
        track.push_back(std::move(boxes));
    }
    return track;
}

TextBoxTrack load_text_boxes(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_text_boxes(ss.str());
}

Tensor text_mask_to_latent(const TextBoxTrack& track, const LatentGeometry& g, std::size_t pixel_frames) {
    if (pixel_frames == 0 || pixel_frames % 4 != 1) {
        throw std::invalid_argument("pixel frame count must be 4f+1, got " + std::to_string(pixel_frames));
    }
    if (!track.empty() && track.size() != pixel_frames) {
        throw std::invalid_argument("text box track has " + std::to_string(track.size()) + " frames, expected " +
                                    std::to_string(pixel_frames));
    }
    const std::size_t lf = latent_frame_of(pixel_frames - 1) + 1;
    Tensor mask({lf, g.latent_h, g.latent_w});
    const auto W = static_cast<double>(g.width), H = static_cast<double>(g.height);
    const double tile = static_cast<double>(kSpatialCompression);
    for (std::size_t p = 0; p < track.size(); ++p) {
        const std::size_t tau = latent_frame_of(p);
        for (const auto& b : track[p]) {
            if (!(0.0 <= b.x0 && b.x0 < b.x1 && b.x1 <= W && 0.0 <= b.y0 && b.y0 < b.y1 && b.y1 <= H)) {
                throw std::invalid_argument("text box out of bounds in frame " + std::to_string(p));
            }
            // tiles i with [8i, 8i+8) intersecting [y0, y1)
            const auto i0 = static_cast<std::size_t>(std::floor(b.y0 / tile));
            const auto i1 = static_cast<std::size_t>(std::ceil(b.y1 / tile));
            const auto j0 = static_cast<std::size_t>(std::floor(b.x0 / tile));
            const auto j1 = static_cast<std::size_t>(std::ceil(b.x1 / tile));
            for (std::size_t i = i0; i < i1; ++i)
                for (std::size_t j = j0; j < j1; ++j) mask[(tau * g.latent_h + i) * g.latent_w + j] = 1.0;
        }
    }
    return mask;
}

Tensor loss_inclusion_mask(const std::vector<bool>& prefix_mask, const Tensor& text_mask) {
    if (text_mask.rank() != 3 || text_mask.dim(0) != prefix_mask.size()) {
        throw ShapeError("text mask " + shape_str(text_mask.shape()) + " does not match " +
                         std::to_string(prefix_mask.size()) + " latent frames");
    }
    Tensor out(text_mask.shape());
    const std::size_t per = text_mask.dim(1) * text_mask.dim(2);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (prefix_mask[i / per] && text_mask[i] == 0.0) ? 1.0 : 0.0;
    return out;
}

}  // namespace motionkit
