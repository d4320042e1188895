#include "motionkit/pose_guider.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "motionkit/kernels.hpp"

namespace motionkit {

std::size_t PoseImageStack::count() const {
    return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{1}));
}

Tensor PoseImageStack::to_tensor() const {
    std::vector<double> v(data.begin(), data.end());
    return Tensor({frames, height, width, channels}, std::move(v));
}

PoseImageStack PoseImageStack::from_tensor(const Tensor& t) {
    if (t.rank() != 4) throw ShapeError("pose image stack must be rank 4, got " + shape_str(t.shape()));
    PoseImageStack s(t.dim(0), t.dim(1), t.dim(2), t.dim(3));
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] != 0.0 && t[i] != 1.0) throw std::invalid_argument("pose image stack must be binary");
        s.data[i] = static_cast<std::uint8_t>(t[i]);
    }
    return s;
}

PadMode parse_pad_mode(const std::string& s) {
    if (s == "replicate") return PadMode::Replicate;
    if (s == "zeros") return PadMode::Zeros;
    throw std::invalid_argument("unknown pad mode '" + s + "'");
}

std::string to_string(PadMode m) { return m == PadMode::Replicate ? "replicate" : "zeros"; }

namespace {

void check_raster_input(const PoseSequence& seq, std::size_t h, std::size_t w) {
    if (h == 0 || w == 0) throw std::invalid_argument("latent height and width must be positive");
    if (seq.frames.empty() || seq.frames.size() % 4 != 1) {
        throw std::invalid_argument("rasterize needs 4f+1 frames, got " + std::to_string(seq.frames.size()));
    }
    seq.validate();
}

std::size_t to_pixel(double v, std::size_t extent) {
    if (!(v > 0.0)) return 0;  // also maps NaN to 0
    const double p = std::floor(v * static_cast<double>(extent));
    if (p >= static_cast<double>(extent)) return extent - 1;
    return static_cast<std::size_t>(p);
}

void draw_frame(const PoseFrame& f, std::size_t t, PoseImageStack& out, const RasterOptions& opts) {
    for (std::size_t j = 0; j < f.positions.size(); ++j) {
        if (!f.visible(j, opts.visibility_threshold)) continue;
        const auto y = to_pixel(f.positions[j].y, out.height);
        const auto x = to_pixel(f.positions[j].x, out.width);
        out.data[out.index(t, y, x, round_robin_channel(j))] = 1;
    }
    const std::size_t nbg = std::min(f.bg_points.size(), kMaxBackgroundPoints);
    for (std::size_t b = 0; b < nbg; ++b) {
        const auto y = to_pixel(f.bg_points[b].y, out.height);
        const auto x = to_pixel(f.bg_points[b].x, out.width);
        out.data[out.index(t, y, x, kBackgroundChannel)] = 1;
    }
}

void check_patchify_input(const PoseImageStack& s) {
    if (s.frames == 0 || s.frames % kPatchSize != 0 || s.height % kPatchSize != 0 || s.width % kPatchSize != 0 ||
        s.height == 0 || s.width == 0) {
        throw std::invalid_argument("patchify needs frames, height and width divisible by 4; got (" +
                                    std::to_string(s.frames) + ", " + std::to_string(s.height) + ", " +
                                    std::to_string(s.width) + ")");
    }
}

// Copies the 4x4x4 patch behind token (gt, gy, gx) into its token row.
void patch_to_token(const PoseImageStack& s, std::span<double> tokens, std::size_t gt, std::size_t gy,
                    std::size_t gx) {
    const std::size_t gh = s.height / kPatchSize, gw = s.width / kPatchSize;
    const std::size_t tw = kPatchSize * kPatchSize * kPatchSize * s.channels;
    double* dst = tokens.data() + ((gt * gh + gy) * gw + gx) * tw;
    for (std::size_t dt = 0; dt < kPatchSize; ++dt) {
        for (std::size_t dy = 0; dy < kPatchSize; ++dy) {
            for (std::size_t dx = 0; dx < kPatchSize; ++dx) {
                const std::size_t src = s.index(gt * kPatchSize + dt, gy * kPatchSize + dy, gx * kPatchSize + dx, 0);
                const std::size_t off = ((dt * kPatchSize + dy) * kPatchSize + dx) * s.channels;
                for (std::size_t c = 0; c < s.channels; ++c) dst[off + c] = s.data[src + c];
            }
        }
    }
}

GuiderTokenGrid empty_grid(const PoseImageStack& s) {
    GuiderTokenGrid g;
    g.tokens = Tensor({s.frames / kPatchSize, s.height / kPatchSize, s.width / kPatchSize,
                       kPatchSize * kPatchSize * kPatchSize * s.channels});
    g.source_frames = s.frames;
    g.source_height = s.height;
    g.source_width = s.width;
    return g;
}

}  // namespace

PoseImageStack rasterize_serial(const PoseSequence& seq, std::size_t latent_h, std::size_t latent_w,
                                const RasterOptions& opts) {
    check_raster_input(seq, latent_h, latent_w);
    PoseImageStack out(seq.frames.size(), kPatchSize * latent_h, kPatchSize * latent_w);
    for (std::size_t t = 0; t < seq.frames.size(); ++t) draw_frame(seq.frames[t], t, out, opts);
    return out;
}

PoseImageStack rasterize_parallel(const PoseSequence& seq, std::size_t latent_h, std::size_t latent_w,
                                  const RasterOptions& opts) {
    check_raster_input(seq, latent_h, latent_w);
    PoseImageStack out(seq.frames.size(), kPatchSize * latent_h, kPatchSize * latent_w);
    const auto n = static_cast<std::ptrdiff_t>(seq.frames.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t t = 0; t < n; ++t) {
        draw_frame(seq.frames[static_cast<std::size_t>(t)], static_cast<std::size_t>(t), out, opts);
    }
    return out;
}

PoseImageStack rasterize(const PoseSequence& seq, std::size_t latent_h, std::size_t latent_w,
                         const RasterOptions& opts) {
    if (seq.frames.size() > 1 && kernels::max_threads() > 1 && !kernels::in_parallel()) {
        return rasterize_parallel(seq, latent_h, latent_w, opts);
    }
    return rasterize_serial(seq, latent_h, latent_w, opts);
}

PoseImageStack pad_temporal(const PoseImageStack& stack, PadMode mode) {
    if (stack.frames == 0 || stack.frames % 4 != 1) {
        throw std::invalid_argument("pad_temporal needs 4f+1 frames, got " + std::to_string(stack.frames));
    }
    PoseImageStack out(stack.frames + kPadFrames, stack.height, stack.width, stack.channels);
    const std::size_t frame_size = stack.height * stack.width * stack.channels;
    if (mode == PadMode::Replicate) {
        for (std::size_t t = 0; t < kPadFrames; ++t) {
            std::copy_n(stack.data.begin(), frame_size, out.data.begin() + static_cast<std::ptrdiff_t>(t * frame_size));
        }
    }
    std::copy(stack.data.begin(), stack.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(kPadFrames * frame_size));
    return out;
}

GuiderTokenGrid patchify_serial(const PoseImageStack& padded) {
    check_patchify_input(padded);
    auto g = empty_grid(padded);
    const std::size_t gf = g.tokens.dim(0), gh = g.tokens.dim(1), gw = g.tokens.dim(2);
    for (std::size_t t = 0; t < gf; ++t) {
        for (std::size_t y = 0; y < gh; ++y) {
            for (std::size_t x = 0; x < gw; ++x) patch_to_token(padded, g.tokens.data(), t, y, x);
        }
    }
    return g;
}

GuiderTokenGrid patchify_parallel(const PoseImageStack& padded) {
    check_patchify_input(padded);
    auto g = empty_grid(padded);
    const std::size_t gh = g.tokens.dim(1), gw = g.tokens.dim(2);
    const auto cells = static_cast<std::ptrdiff_t>(g.tokens.dim(0) * gh * gw);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < cells; ++i) {
        const auto u = static_cast<std::size_t>(i);
        patch_to_token(padded, g.tokens.data(), u / (gh * gw), (u / gw) % gh, u % gw);
    }
    return g;
}

GuiderTokenGrid patchify(const PoseImageStack& padded) {
    if (kernels::max_threads() > 1 && !kernels::in_parallel()) return patchify_parallel(padded);
    return patchify_serial(padded);
}

PoseImageStack unpatchify(const GuiderTokenGrid& grid) {
    const Tensor& tk = grid.tokens;
    if (tk.rank() != 4) throw ShapeError("token grid must be rank 4");
    const std::size_t per_patch = kPatchSize * kPatchSize * kPatchSize;
    if (tk.dim(3) % per_patch != 0) throw ShapeError("token width must be a multiple of 64");
    const std::size_t channels = tk.dim(3) / per_patch;
    PoseImageStack out(tk.dim(0) * kPatchSize, tk.dim(1) * kPatchSize, tk.dim(2) * kPatchSize, channels);
    for (std::size_t t = 0; t < out.frames; ++t) {
        for (std::size_t y = 0; y < out.height; ++y) {
            for (std::size_t x = 0; x < out.width; ++x) {
                for (std::size_t c = 0; c < channels; ++c) {
                    const std::size_t token =
                        ((t / kPatchSize) * tk.dim(1) + y / kPatchSize) * tk.dim(2) + x / kPatchSize;
                    const std::size_t off =
                        (((t % kPatchSize) * kPatchSize + y % kPatchSize) * kPatchSize + x % kPatchSize) * channels + c;
                    const double v = tk[token * tk.dim(3) + off];
                    if (v != 0.0 && v != 1.0) throw std::invalid_argument("token grid is not binary");
                    out.data[out.index(t, y, x, c)] = static_cast<std::uint8_t>(v);
                }
            }
        }
    }
    return out;
}

Var project(Var tokens, Var weights) {
    const auto& ts = tokens.shape();
    const auto& ws = weights.shape();
    if (ws.size() != 2 || ts.back() != ws[0]) {
        throw ShapeError("project: weights " + shape_str(ws) + " do not match tokens " + shape_str(ts));
    }
    return ad::matmul(tokens, weights);
}

Var project(Var tokens, Var weights, Var bias) { return ad::add_row(project(tokens, weights), bias); }

Tensor project(const Tensor& tokens, const Tensor& weights) {
    Tape tape;
    return project(tape.constant(tokens), tape.constant(weights)).value();
}

}  // namespace motionkit
