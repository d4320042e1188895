#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "motionkit/autograd.hpp"
#include "motionkit/motion_core.hpp"
#include "motionkit/tensor.hpp"

namespace motionkit {

constexpr std::size_t kPoseChannels = 8;
constexpr std::size_t kBodyChannels = 7;
constexpr std::size_t kBackgroundChannel = 7;
constexpr std::size_t kPatchSize = 4;
constexpr std::size_t kPadFrames = 3;

// Body joint j is drawn in channel j mod 7; channel 7 holds background points.
constexpr std::size_t round_robin_channel(std::size_t joint_index) { return joint_index % kBodyChannels; }

// Binary pose images, layout (frames, height, width, channels) row-major.
struct PoseImageStack {
    std::size_t frames = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = kPoseChannels;
    std::vector<std::uint8_t> data;

    PoseImageStack() = default;
    PoseImageStack(std::size_t f, std::size_t h, std::size_t w, std::size_t c = kPoseChannels)
        : frames(f), height(h), width(w), channels(c), data(f * h * w * c, 0) {}

    std::size_t index(std::size_t t, std::size_t y, std::size_t x, std::size_t c) const {
        return ((t * height + y) * width + x) * channels + c;
    }
    std::uint8_t at(std::size_t t, std::size_t y, std::size_t x, std::size_t c) const { return data[index(t, y, x, c)]; }
    std::size_t count() const;

    Tensor to_tensor() const;
    // Rejects non-binary values and non-rank-4 tensors.
    static PoseImageStack from_tensor(const Tensor& t);
    friend bool operator==(const PoseImageStack&, const PoseImageStack&) = default;
};

enum class PadMode { Replicate, Zeros };
PadMode parse_pad_mode(const std::string& s);
std::string to_string(PadMode m);

struct RasterOptions {
    double visibility_threshold = kDefaultVisibilityThreshold;
};

// seq must have 4f+1 frames. Joint (x, y) lands on pixel
// (floor(y * 4h), floor(x * 4w)) clamped into the 4h x 4w grid.
PoseImageStack rasterize(const PoseSequence& seq, std::size_t latent_h, std::size_t latent_w,
                         const RasterOptions& opts = {});
PoseImageStack rasterize_serial(const PoseSequence& seq, std::size_t latent_h, std::size_t latent_w,
                                const RasterOptions& opts = {});
PoseImageStack rasterize_parallel(const PoseSequence& seq, std::size_t latent_h, std::size_t latent_w,
                                  const RasterOptions& opts = {});

// 4f+1 frames -> 4(f+1) frames with 3 leading pad frames.
PoseImageStack pad_temporal(const PoseImageStack& stack, PadMode mode = PadMode::Replicate);

// Token grid of shape (frames/4, height/4, width/4, 64 * channels). Inside a
// token the patch is flattened t-major, then y, then x, then channel:
//   offset = ((dt * 4 + dy) * 4 + dx) * channels + c
struct GuiderTokenGrid {
    Tensor tokens;
    std::size_t source_frames = 0;
    std::size_t source_height = 0;
    std::size_t source_width = 0;
};

GuiderTokenGrid patchify(const PoseImageStack& padded);
GuiderTokenGrid patchify_serial(const PoseImageStack& padded);
GuiderTokenGrid patchify_parallel(const PoseImageStack& padded);
PoseImageStack unpatchify(const GuiderTokenGrid& grid);

// Per-token affine map (.., 64d) x (64d, C) [+ bias] -> (.., C).
Var project(Var tokens, Var weights);
Var project(Var tokens, Var weights, Var bias);
Tensor project(const Tensor& tokens, const Tensor& weights);

}  // namespace motionkit
