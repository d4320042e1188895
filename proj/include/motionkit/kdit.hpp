#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "motionkit/autograd.hpp"
#include "motionkit/motion_core.hpp"
#include "motionkit/tensor.hpp"

namespace motionkit {

// ---------------------------------------------------------------- schedule

enum class ScheduleKind { Linear, Cosine };
ScheduleKind parse_schedule_kind(const std::string& s);
std::string to_string(ScheduleKind k);

// Tables are indexed by t = 0..T; index 0 is the clean state (alpha_bar = 1,
// beta = 0), steps are 1..T.
struct DiffusionSchedule {
    std::size_t T = 0;
    ScheduleKind kind = ScheduleKind::Linear;
    double beta_start = 1e-4;
    double beta_end = 2e-2;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;

    // beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)
    double posterior_variance(std::size_t t) const;
    void check_step(std::size_t t) const;
};

DiffusionSchedule build_schedule(std::size_t T, ScheduleKind kind = ScheduleKind::Linear, double beta_start = 1e-4,
                                 double beta_end = 2e-2);
// Linear range scaled by 1000/T so short schedules still end near pure noise.
DiffusionSchedule default_schedule(std::size_t T, ScheduleKind kind = ScheduleKind::Linear);

// sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps
Tensor q_sample(const Tensor& z0, std::size_t t, const Tensor& eps, const DiffusionSchedule& s);
// One forward kernel step: sqrt(alpha_t) z + sqrt(beta_t) eps
Tensor q_step(const Tensor& z_prev, std::size_t t, const Tensor& eps, const DiffusionSchedule& s);
// Mean of q(z_{t-1} | z_t, z0).
Tensor posterior_mean(const Tensor& z0, const Tensor& z_t, std::size_t t, const DiffusionSchedule& s);
// (z_t - beta_t / sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_t)
Tensor posterior_mean_from_eps(const Tensor& z_t, const Tensor& eps, std::size_t t, const DiffusionSchedule& s);
// Ancestral step; noise is ignored at t = 1.
Tensor reverse_step(const Tensor& z_t, const Tensor& eps_hat, std::size_t t, const DiffusionSchedule& s,
                    const Tensor& noise);

// ---------------------------------------------------------------- conditions

// Per frame flattened keypoints in [0,1] (x0, y0, x1, y1, ...), or zeros when
// the frame carries no condition.
struct ConditionTrack {
    Tensor values;                  // (frames, 2J)
    std::vector<std::uint8_t> present;

    static ConditionTrack absent(std::size_t frames, std::size_t joints);
    static ConditionTrack from_frames(std::span<const PoseFrame> frames);
    std::size_t frames() const { return present.size(); }
    std::size_t present_count() const;
    // Absent frames must be exactly zero and present frames must not be.
    void validate(std::size_t joints) const;
};

// (1, 2J) row of x/y pairs.
Tensor flatten_frame(const PoseFrame& f);
// Joints under the visibility threshold take their last visible position
// (or the first later one when they start hidden).
PoseSequence carry_forward_hidden(const PoseSequence& seq, double threshold = kDefaultVisibilityThreshold);

// ---------------------------------------------------------------- model

struct KDiTConfig {
    std::size_t joints = 14;
    std::size_t layers = 4;
    std::size_t width = 128;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 4;
    double rope_base = 10000.0;
    double init_scale = 0.02;
    bool condition_trained = false;
    std::string topology = "body14";
    std::vector<std::string> joint_names;
};

class KDiT {
   public:
    KDiT() = default;
    KDiT(KDiTConfig cfg, std::uint64_t seed);

    const KDiTConfig& config() const { return cfg_; }
    KDiTConfig& config() { return cfg_; }
    std::size_t coords() const { return 2 * cfg_.joints; }
    std::map<std::string, Tensor>& params() { return params_; }
    const std::map<std::string, Tensor>& params() const { return params_; }
    std::size_t parameter_count() const;

    using Bindings = std::map<std::string, Var>;
    // Binds every parameter onto the tape (borrowed, so the model must not be
    // modified while the tape lives).
    Bindings bind(Tape& tape) const;

    // Differentiable core in model space (coordinates mapped to [-1, 1]).
    // z_t: (m, 2J); prefix: (1, 2J). Returns eps_hat (m, 2J). positions
    // defaults to 0..m with the prefix at 0.
    Var forward(Tape& tape, const Bindings& p, Var z_t, std::size_t t, Var prefix, const ConditionTrack& cond,
                std::span<const double> positions = {}) const;

    void save(const std::string& dir, const DiffusionSchedule& sched, std::uint64_t seed) const;
    static KDiT load(const std::string& dir, DiffusionSchedule* sched = nullptr);

   private:
    KDiTConfig cfg_;
    std::map<std::string, Tensor> params_;
};

// [0,1] <-> model space
Tensor to_model_space(const Tensor& unit);
Tensor from_model_space(const Tensor& model);

// Noise prediction for frames 1..m given a [0,1] prefix and condition track.
Tensor forward_denoise(const KDiT& model, const Tensor& z_t, std::size_t t, const PoseFrame& prefix,
                       const ConditionTrack& cond, std::span<const double> positions = {});

// eps_u + s (eps_c - eps_u); eps_u uses an all-absent track.
Tensor guided_eps(const KDiT& model, const Tensor& z_t, std::size_t t, const PoseFrame& prefix,
                  const ConditionTrack& cond, double cfg_scale);

struct SampleOptions {
    double cfg_scale = 1.5;
    Fps fps{25, 1};
};

// DDPM ancestral sampling. Frame 0 of the result is j0 itself; generated
// frames are clamped to [0,1] once at the end.
PoseSequence sample(const KDiT& model, const PoseFrame& j0, std::size_t m, const DiffusionSchedule& sched,
                    const std::optional<ConditionTrack>& cond, std::mt19937_64& rng, const SampleOptions& opts = {});

// tau absent frames followed by the aligned frames.
ConditionTrack refine_condition(const PoseSequence& aligned, std::size_t tau, std::size_t joints);
// Samples under refine_condition; returns j0, tau bridge frames, then m
// refined frames.
PoseSequence refine(const KDiT& model, const PoseFrame& j0, const PoseSequence& aligned, std::size_t tau,
                    const DiffusionSchedule& sched, std::mt19937_64& rng, const SampleOptions& opts = {});

// ---------------------------------------------------------------- training

struct TrainStats {
    double loss = 0;
    std::size_t cond_present = 0;
    std::size_t cond_total = 0;
};

struct TrainConfig {
    double lr = 1e-3;
    double dropout_p = 0.5;  // probability that a frame carries its ground-truth condition
    AdamConfig adam;
};

class KDiTTrainer {
   public:
    KDiTTrainer(KDiT& model, DiffusionSchedule sched, TrainConfig cfg, std::uint64_t seed);

    // One optimizer step over the batch. Each sequence holds prefix + m frames.
    TrainStats step(const std::vector<PoseSequence>& batch);
    std::size_t steps_done() const { return adam_.step; }

   private:
    KDiT& model_;
    DiffusionSchedule sched_;
    TrainConfig cfg_;
    AdamState adam_;
    std::mt19937_64 rng_;
};

// Single-item training loss (MSE over frames 1..m), exposed for gradient checks.
Var denoising_loss(Tape& tape, const KDiT& model, const KDiT::Bindings& p, const Tensor& x0_model,
                   const Tensor& prefix_model, const Tensor& eps, std::size_t t, const DiffusionSchedule& sched,
                   const ConditionTrack& cond);

// Random (window + 1)-frame slices of the pool.
std::vector<PoseSequence> sample_windows(const std::vector<PoseSequence>& pool, std::size_t window, std::size_t count,
                                         std::mt19937_64& rng);

struct TrainLoopConfig {
    std::size_t steps = 2000;
    std::size_t batch = 16;
    std::size_t window = 8;  // generated frames per item
    TrainConfig train;
};

// Runs cfg.steps optimizer steps on windows drawn from the pool and returns
// the per-step loss. on_step receives (step, loss) after each step.
std::vector<double> train_kdit(KDiT& model, const DiffusionSchedule& sched, const std::vector<PoseSequence>& pool,
                               const TrainLoopConfig& cfg, std::uint64_t seed,
                               const std::function<void(std::size_t, double)>& on_step = {});

// ---------------------------------------------------------------- synthetic data

// Neutral standing pose for body14, a hanging chain for other topologies.
std::vector<Vec2> rest_pose(const SkeletonTopology& topo);

// Bone angles follow sinusoids around the rest pose with constant bone
// lengths per sequence; the root sways slowly.
PoseSequence synthetic_motion(const SkeletonTopology& topo, std::size_t frames, std::mt19937_64& rng,
                              Fps fps = {25, 1});
std::vector<PoseSequence> synthetic_corpus(const SkeletonTopology& topo, std::size_t sequences, std::size_t frames,
                                           std::mt19937_64& rng, Fps fps = {25, 1});

// ---------------------------------------------------------------- gradcheck

struct GradcheckReport {
    double max_rel_err = 0;
    double max_abs_err = 0;
    std::size_t checked = 0;
    std::string worst_param;
};

// Central differences on the denoising loss for a random input. per_tensor
// limits entries checked per parameter tensor (0 = all).
GradcheckReport gradcheck(const KDiT& model, const DiffusionSchedule& sched, std::size_t m, std::uint64_t seed,
                          std::size_t per_tensor = 0, double eps = 1e-5, double floor = 1e-6);

}  // namespace motionkit
