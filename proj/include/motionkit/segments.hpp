#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "motionkit/tensor.hpp"

namespace motionkit {

constexpr std::size_t kDefaultTokenBudget = 480000;
constexpr std::size_t kSpatialCompression = 8;
constexpr std::size_t kTemporalCompression = 4;

struct LatentGeometry {
    std::size_t height = 0;  // pixels
    std::size_t width = 0;
    std::size_t latent_h = 0;
    std::size_t latent_w = 0;
    std::size_t latent_frames = 0;  // f+1
    std::size_t budget = kDefaultTokenBudget;

    std::size_t capacity() const { return 4 * (latent_frames - 1) + 1; }
    std::size_t tokens() const { return latent_frames * latent_h * latent_w; }
};

// H and W must be multiples of 8. f+1 = floor(budget / (h*w)).
LatentGeometry latent_geometry(std::size_t height, std::size_t width, std::size_t budget = kDefaultTokenBudget);

// Pixel frame -> latent frame: 0 stays alone, then groups of 4.
constexpr std::size_t latent_frame_of(std::size_t pixel_frame) {
    return pixel_frame == 0 ? 0 : 1 + (pixel_frame - 1) / kTemporalCompression;
}

enum class PrefixSource { InitialImage, PreviousSegment };
std::string to_string(PrefixSource s);

struct Segment {
    std::size_t start_frame = 0;
    std::size_t end_frame = 0;      // last real frame, inclusive
    std::size_t padded_frames = 0;  // discarded after decode, only on the last segment
    PrefixSource prefix_source = PrefixSource::InitialImage;

    std::size_t length() const { return end_frame - start_frame + 1 + padded_frames; }
    friend bool operator==(const Segment&, const Segment&) = default;
};

struct SegmentPlan {
    std::size_t total_frames = 0;
    std::size_t capacity = 0;
    std::vector<Segment> segments;
};

// Segments chain through their last frame. Every segment length is 4k+1 and
// at most capacity. A request that fits in one segment becomes a single
// segment padded up to 4k+1; longer requests take full-capacity segments
// and the tail segment is padded with at most 3 frames.
SegmentPlan plan_segments(std::size_t frames, std::size_t capacity);
SegmentPlan plan_segments(std::size_t frames, const LatentGeometry& geometry);

std::string plan_to_json(const SegmentPlan& plan, const LatentGeometry* geometry = nullptr);

// mask[0] = false (prefix latent excluded from the loss), the rest true.
std::vector<bool> prefix_loss_mask(std::size_t latent_frames);

// Half-open pixel box [x0, x1) x [y0, y1).
struct TextBox {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};
using TextBoxTrack = std::vector<std::vector<TextBox>>;

TextBoxTrack parse_text_boxes(const std::string& json_text);
TextBoxTrack load_text_boxes(const std::string& path);

// Returns a 0/1 tensor (f+1, h, w); 1 marks latent cells overlapped by text.
// An empty track gives the all-zero mask for frames latent frames.
Tensor text_mask_to_latent(const TextBoxTrack& track, const LatentGeometry& geometry, std::size_t pixel_frames);

// 1 where a latent cell contributes to the loss: not the prefix and not text.
Tensor loss_inclusion_mask(const std::vector<bool>& prefix_mask, const Tensor& text_mask);

}  // namespace motionkit
