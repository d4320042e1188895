#include "motionkit/kdit.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "motionkit/kernels.hpp"

using nlohmann::json;

namespace motionkit {

// ---------------------------------------------------------------- schedule

ScheduleKind parse_schedule_kind(const std::string& s) {
    if (s == "linear") return ScheduleKind::Linear;
    if (s == "cosine") return ScheduleKind::Cosine;
    throw std::invalid_argument("unknown schedule kind '" + s + "'");
}

std::string to_string(ScheduleKind k) { return k == ScheduleKind::Linear ? "linear" : "cosine"; }

void DiffusionSchedule::check_step(std::size_t t) const {
    if (t < 1 || t > T) throw std::out_of_range("diffusion step " + std::to_string(t) + " outside 1.." + std::to_string(T));
}

double DiffusionSchedule::posterior_variance(std::size_t t) const {
    check_step(t);
    return beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]);
}

DiffusionSchedule build_schedule(std::size_t T, ScheduleKind kind, double beta_start, double beta_end) {
    if (T < 2) throw std::invalid_argument("diffusion schedule needs T >= 2");
    DiffusionSchedule s;
    s.T = T;
    s.kind = kind;
    s.beta_start = beta_start;
    s.beta_end = beta_end;
    s.beta.assign(T + 1, 0.0);
    s.alpha.assign(T + 1, 1.0);
    s.alpha_bar.assign(T + 1, 1.0);
    if (kind == ScheduleKind::Linear) {
        if (!(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0)) {
            throw std::invalid_argument("linear schedule needs 0 < beta_start < beta_end < 1");
        }
        for (std::size_t t = 1; t <= T; ++t) {
            s.beta[t] = beta_start + (beta_end - beta_start) * static_cast<double>(t - 1) / static_cast<double>(T - 1);
        }
    } else {
        constexpr double off = 0.008;
        auto f = [&](double t) {
            const double c = std::cos((t / static_cast<double>(T) + off) / (1.0 + off) * std::numbers::pi / 2.0);
            return c * c;
        };
        for (std::size_t t = 1; t <= T; ++t) {
            s.beta[t] = std::min(1.0 - f(static_cast<double>(t)) / f(static_cast<double>(t - 1)), 0.999);
        }
    }
    for (std::size_t t = 1; t <= T; ++t) {
        s.alpha[t] = 1.0 - s.beta[t];
        s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
    }
    return s;
}

DiffusionSchedule default_schedule(std::size_t T, ScheduleKind kind) {
    const double scale = 1000.0 / static_cast<double>(T);
    return build_schedule(T, kind, 1e-4 * scale, std::min(0.999, 2e-2 * scale));
}

namespace {

void same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

Tensor axpby(double a, const Tensor& x, double b, const Tensor& y) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + b * y[i];
    return out;
}

}  // namespace

Tensor q_sample(const Tensor& z0, std::size_t t, const Tensor& eps, const DiffusionSchedule& s) {
    s.check_step(t);
    same_shape("q_sample", z0, eps);
    return axpby(std::sqrt(s.alpha_bar[t]), z0, std::sqrt(1.0 - s.alpha_bar[t]), eps);
}

Tensor q_step(const Tensor& z_prev, std::size_t t, const Tensor& eps, const DiffusionSchedule& s) {
    s.check_step(t);
    same_shape("q_step", z_prev, eps);
    return axpby(std::sqrt(s.alpha[t]), z_prev, std::sqrt(s.beta[t]), eps);
}

Tensor posterior_mean(const Tensor& z0, const Tensor& z_t, std::size_t t, const DiffusionSchedule& s) {
    s.check_step(t);
    same_shape("posterior_mean", z0, z_t);
    const double c0 = std::sqrt(s.alpha_bar[t - 1]) * s.beta[t] / (1.0 - s.alpha_bar[t]);
    const double ct = std::sqrt(s.alpha[t]) * (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]);
    return axpby(c0, z0, ct, z_t);
}

Tensor posterior_mean_from_eps(const Tensor& z_t, const Tensor& eps, std::size_t t, const DiffusionSchedule& s) {
    s.check_step(t);
    same_shape("posterior_mean_from_eps", z_t, eps);
    const double inv = 1.0 / std::sqrt(s.alpha[t]);
    return axpby(inv, z_t, -inv * s.beta[t] / std::sqrt(1.0 - s.alpha_bar[t]), eps);
}

Tensor reverse_step(const Tensor& z_t, const Tensor& eps_hat, std::size_t t, const DiffusionSchedule& s,
                    const Tensor& noise) {
    Tensor mean = posterior_mean_from_eps(z_t, eps_hat, t, s);
    if (t == 1) return mean;
    same_shape("reverse_step", z_t, noise);
    const double sigma = std::sqrt(s.posterior_variance(t));
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += sigma * noise[i];
    return mean;
}

// ---------------------------------------------------------------- conditions

Tensor flatten_frame(const PoseFrame& f) {
    Tensor out({1, 2 * f.positions.size()});
    for (std::size_t j = 0; j < f.positions.size(); ++j) {
        out[2 * j] = f.positions[j].x;
        out[2 * j + 1] = f.positions[j].y;
    }
    return out;
}

ConditionTrack ConditionTrack::absent(std::size_t frames, std::size_t joints) {
    return {Tensor({std::max<std::size_t>(frames, 1), 2 * joints}), std::vector<std::uint8_t>(frames, 0)};
}

ConditionTrack ConditionTrack::from_frames(std::span<const PoseFrame> frames) {
    if (frames.empty()) throw std::invalid_argument("condition track needs at least one frame");
    const std::size_t j = frames.front().positions.size();
    ConditionTrack c = absent(frames.size(), j);
    for (std::size_t k = 0; k < frames.size(); ++k) {
        if (frames[k].positions.size() != j) throw ShapeError("condition frames differ in joint count");
        const Tensor row = flatten_frame(frames[k]);
        std::copy(row.data().begin(), row.data().end(), c.values.data().begin() + static_cast<std::ptrdiff_t>(k * 2 * j));
        c.present[k] = 1;
    }
    return c;
}

std::size_t ConditionTrack::present_count() const {
    return static_cast<std::size_t>(std::count(present.begin(), present.end(), std::uint8_t{1}));
}

void ConditionTrack::validate(std::size_t joints) const {
    if (values.rank() != 2 || values.cols() != 2 * joints || (values.rows() != present.size() && !present.empty())) {
        throw ShapeError("condition track " + shape_str(values.shape()) + " does not fit " +
                         std::to_string(present.size()) + " frames of " + std::to_string(joints) + " joints");
    }
    for (std::size_t k = 0; k < present.size(); ++k) {
        bool zero = true;
        for (std::size_t i = 0; i < 2 * joints; ++i) zero = zero && values.at(k, i) == 0.0;
        if (!present[k] && !zero) throw std::invalid_argument("absent condition frame " + std::to_string(k) + " is not zero");
        if (present[k] && zero) throw std::invalid_argument("present condition frame " + std::to_string(k) + " is all zeros");
    }
}

PoseSequence carry_forward_hidden(const PoseSequence& seq, double threshold) {
    PoseSequence out = seq;
    if (seq.frames.empty()) return out;
    const std::size_t nj = seq.frames.front().positions.size();
    for (std::size_t j = 0; j < nj; ++j) {
        std::optional<Vec2> last;
        for (const auto& f : seq.frames) {
            if (f.visible(j, threshold)) {
                last = f.positions[j];
                break;
            }
        }
        if (!last) continue;  // never visible, leave as is
        for (auto& f : out.frames) {
            if (f.visible(j, threshold)) last = f.positions[j];
            else f.positions[j] = *last;
        }
    }
    return out;
}

// ---------------------------------------------------------------- model

Tensor to_model_space(const Tensor& unit) {
    Tensor out(unit.shape());
    for (std::size_t i = 0; i < unit.size(); ++i) out[i] = 2.0 * unit[i] - 1.0;
    return out;
}

Tensor from_model_space(const Tensor& model) {
    Tensor out(model.shape());
    for (std::size_t i = 0; i < model.size(); ++i) out[i] = 0.5 * (model[i] + 1.0);
    return out;
}

namespace {

std::string blk(std::size_t l, const char* name) { return "block" + std::to_string(l) + "." + name; }

Tensor timestep_embedding(std::size_t t, std::size_t dim) {
    Tensor e({1, dim});
    const std::size_t half = dim / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        e[i] = std::cos(static_cast<double>(t) * freq);
        e[half + i] = std::sin(static_cast<double>(t) * freq);
    }
    return e;
}

void check_config(const KDiTConfig& c) {
    if (c.joints == 0 || c.layers == 0 || c.width == 0 || c.heads == 0 || c.mlp_ratio == 0) {
        throw std::invalid_argument("model dimensions must be positive");
    }
    if (c.width % c.heads != 0) throw std::invalid_argument("width must be divisible by the head count");
    if ((c.width / c.heads) % 2 != 0) throw std::invalid_argument("head dimension must be even for rotary encoding");
    if (!c.joint_names.empty() && c.joint_names.size() != c.joints) {
        throw std::invalid_argument("joint_names does not match the joint count");
    }
}

}  // namespace

KDiT::KDiT(KDiTConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    check_config(cfg_);
    std::mt19937_64 rng(seed);
    const std::size_t D = cfg_.width, C = coords(), H = cfg_.mlp_ratio * D;
    auto dense = [&](const std::string& name, std::size_t in, std::size_t out, double std) {
        Tensor w({in, out});
        std::normal_distribution<double> n(0.0, std);
        for (auto& v : w.data()) v = n(rng);
        params_[name] = std::move(w);
    };
    auto fan = [](std::size_t in) { return 1.0 / std::sqrt(static_cast<double>(in)); };
    auto zeros = [&](const std::string& name, Shape s) { params_[name] = Tensor(std::move(s)); };

    dense("embed.w", C, D, fan(C));
    zeros("embed.b", {D});
    dense("prefix", 1, D, cfg_.init_scale);
    dense("cond.w", C, D, fan(C));
    dense("presence", 1, D, cfg_.init_scale);
    dense("time.w1", D, D, fan(D));
    zeros("time.b1", {D});
    dense("time.w2", D, D, fan(D));
    zeros("time.b2", {D});
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        dense(blk(l, "ada.w"), D, 6 * D, cfg_.init_scale);
        zeros(blk(l, "ada.b"), {6 * D});
        dense(blk(l, "qkv.w"), D, 3 * D, fan(D));
        zeros(blk(l, "qkv.b"), {3 * D});
        dense(blk(l, "proj.w"), D, D, fan(D));
        zeros(blk(l, "proj.b"), {D});
        dense(blk(l, "mlp.w1"), D, H, fan(D));
        zeros(blk(l, "mlp.b1"), {H});
        dense(blk(l, "mlp.w2"), H, D, fan(H));
        zeros(blk(l, "mlp.b2"), {D});
    }
    dense("final.ada.w", D, 2 * D, cfg_.init_scale);
    zeros("final.ada.b", {2 * D});
    dense("final.out.w", D, C, cfg_.init_scale);
    zeros("final.out.b", {C});
}

std::size_t KDiT::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
}

KDiT::Bindings KDiT::bind(Tape& tape) const {
    Bindings b;
    for (const auto& [name, t] : params_) b.emplace(name, tape.param(t));
    return b;
}

Var KDiT::forward(Tape& tape, const Bindings& p, Var z_t, std::size_t t, Var prefix, const ConditionTrack& cond,
                  std::span<const double> positions) const {
    const std::size_t D = cfg_.width, C = coords();
    const Shape& zs = z_t.shape();
    if (zs.size() != 2 || zs[1] != C || zs[0] == 0) {
        throw ShapeError("z_t must be (m, " + std::to_string(C) + ") with m >= 1, got " + shape_str(zs));
    }
    const std::size_t m = zs[0], n = m + 1;
    if (prefix.shape() != Shape{1, C}) throw ShapeError("prefix must be (1, " + std::to_string(C) + ")");
    if (cond.frames() != m) {
        throw ShapeError("condition track has " + std::to_string(cond.frames()) + " frames, expected " + std::to_string(m));
    }
    cond.validate(cfg_.joints);
    std::vector<double> pos(n);
    if (positions.empty()) {
        for (std::size_t i = 0; i < n; ++i) pos[i] = static_cast<double>(i);
    } else {
        if (positions.size() != n) throw ShapeError("positions must cover prefix + m frames");
        pos.assign(positions.begin(), positions.end());
    }
    auto P = [&](const std::string& name) -> Var { return p.at(name); };

    // tokens
    Tensor cvals({m, C}), flags({m, 1});
    for (std::size_t k = 0; k < m; ++k) {
        flags[k] = cond.present[k];
        if (!cond.present[k]) continue;
        for (std::size_t i = 0; i < C; ++i) cvals[k * C + i] = 2.0 * cond.values.at(k, i) - 1.0;
    }
    Var x0 = ad::add(ad::linear(prefix, P("embed.w"), P("embed.b")), P("prefix"));
    Var xs = ad::linear(z_t, P("embed.w"), P("embed.b"));
    xs = ad::add(xs, ad::matmul(tape.constant(std::move(cvals)), P("cond.w")));
    xs = ad::add(xs, ad::matmul(tape.constant(std::move(flags)), P("presence")));
    const Var parts[] = {x0, xs};
    Var x = ad::concat_rows(parts);

    // timestep conditioning
    Var c = ad::linear(tape.constant(timestep_embedding(t, D)), P("time.w1"), P("time.b1"));
    c = ad::linear(ad::silu(c), P("time.w2"), P("time.b2"));
    Var sc = ad::silu(c);

    for (std::size_t l = 0; l < cfg_.layers; ++l) {
        Var mod = ad::linear(sc, P(blk(l, "ada.w")), P(blk(l, "ada.b")));
        auto chunk = [&](std::size_t i) { return ad::slice_cols(mod, i * D, (i + 1) * D); };
        Var h = ad::adaptive_layer_norm(x, chunk(0), chunk(1));
        Var qkv = ad::linear(h, P(blk(l, "qkv.w")), P(blk(l, "qkv.b")));
        Var q = ad::rope(ad::slice_cols(qkv, 0, D), pos, cfg_.heads, cfg_.rope_base);
        Var k = ad::rope(ad::slice_cols(qkv, D, 2 * D), pos, cfg_.heads, cfg_.rope_base);
        Var v = ad::slice_cols(qkv, 2 * D, 3 * D);
        Var a = ad::linear(ad::attention(q, k, v, cfg_.heads), P(blk(l, "proj.w")), P(blk(l, "proj.b")));
        x = ad::add(x, ad::mul_row(a, chunk(2)));
        Var h2 = ad::adaptive_layer_norm(x, chunk(3), chunk(4));
        Var f = ad::linear(ad::gelu(ad::linear(h2, P(blk(l, "mlp.w1")), P(blk(l, "mlp.b1")))), P(blk(l, "mlp.w2")),
                           P(blk(l, "mlp.b2")));
        x = ad::add(x, ad::mul_row(f, chunk(5)));
    }
    Var fmod = ad::linear(sc, P("final.ada.w"), P("final.ada.b"));
    Var h = ad::adaptive_layer_norm(x, ad::slice_cols(fmod, 0, D), ad::slice_cols(fmod, D, 2 * D));
    Var out = ad::linear(h, P("final.out.w"), P("final.out.b"));
    return ad::slice_rows(out, 1, n);
}

void KDiT::save(const std::string& dir, const DiffusionSchedule& sched, std::uint64_t seed) const {
    std::filesystem::create_directories(dir);
    json shapes = json::object();
    for (const auto& [name, t] : params_) {
        save_pgt(t, std::filesystem::path(dir) / (name + ".pgt"));
        shapes[name] = t.shape();
    }
    json m;
    m["format"] = "kdit";
    m["config"] = {{"joints", cfg_.joints},       {"layers", cfg_.layers},
                   {"width", cfg_.width},         {"heads", cfg_.heads},
                   {"mlp_ratio", cfg_.mlp_ratio}, {"rope_base", cfg_.rope_base},
                   {"topology", cfg_.topology},   {"joint_names", cfg_.joint_names},
                   {"condition_trained", cfg_.condition_trained}};
    m["schedule"] = {{"kind", to_string(sched.kind)},
                     {"T", sched.T},
                     {"beta_start", sched.beta_start},
                     {"beta_end", sched.beta_end}};
    m["seed"] = seed;
    m["params"] = shapes;
    std::ofstream out(std::filesystem::path(dir) / "manifest.json");
    if (!out) throw std::runtime_error("cannot write checkpoint manifest in " + dir);
    out << m.dump(2) << "\n";
}

KDiT KDiT::load(const std::string& dir, DiffusionSchedule* sched) {
    std::ifstream in(std::filesystem::path(dir) / "manifest.json");
    if (!in) throw std::runtime_error("no checkpoint manifest in " + dir);
    json m;
    try {
        m = json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError(std::string("checkpoint manifest: ") + e.what());
    }
    if (m.value("format", "") != "kdit") throw ParseError("checkpoint manifest is not a kdit model");
    const auto& c = m.at("config");
    KDiT model;
    model.cfg_.joints = c.at("joints");
    model.cfg_.layers = c.at("layers");
    model.cfg_.width = c.at("width");
    model.cfg_.heads = c.at("heads");
    model.cfg_.mlp_ratio = c.at("mlp_ratio");
    model.cfg_.rope_base = c.at("rope_base");
    model.cfg_.topology = c.at("topology");
    model.cfg_.joint_names = c.at("joint_names").get<std::vector<std::string>>();
    model.cfg_.condition_trained = c.at("condition_trained");
    check_config(model.cfg_);
    // shapes must match a freshly built model of the same config
    const KDiT ref(model.cfg_, 0);
    for (const auto& [name, t] : ref.params_) {
        Tensor loaded = load_pgt(std::filesystem::path(dir) / (name + ".pgt"));
        if (loaded.shape() != t.shape()) {
            throw ShapeError("checkpoint tensor " + name + " has shape " + shape_str(loaded.shape()) + ", expected " +
                             shape_str(t.shape()));
        }
        model.params_[name] = std::move(loaded);
    }
    if (sched) {
        const auto& s = m.at("schedule");
        *sched = build_schedule(s.at("T"), parse_schedule_kind(s.at("kind")), s.at("beta_start"), s.at("beta_end"));
    }
    return model;
}

Tensor forward_denoise(const KDiT& model, const Tensor& z_t, std::size_t t, const PoseFrame& prefix,
                       const ConditionTrack& cond, std::span<const double> positions) {
    if (prefix.positions.size() != model.config().joints) {
        throw ShapeError("prefix has " + std::to_string(prefix.positions.size()) + " joints, model expects " +
                         std::to_string(model.config().joints));
    }
    Tape tape;
    auto p = model.bind(tape);
    return model
        .forward(tape, p, tape.constant(z_t), t, tape.constant(to_model_space(flatten_frame(prefix))), cond, positions)
        .value();
}

Tensor guided_eps(const KDiT& model, const Tensor& z_t, std::size_t t, const PoseFrame& prefix,
                  const ConditionTrack& cond, double cfg_scale) {
    const Tensor ec = forward_denoise(model, z_t, t, prefix, cond);
    const Tensor eu = forward_denoise(model, z_t, t, prefix, ConditionTrack::absent(cond.frames(), model.config().joints));
    Tensor out(ec.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = eu[i] + cfg_scale * (ec[i] - eu[i]);
    return out;
}

namespace {

Tensor normal_tensor(Shape s, std::mt19937_64& rng) {
    Tensor t(std::move(s));
    std::normal_distribution<double> n(0.0, 1.0);
    for (auto& v : t.data()) v = n(rng);
    return t;
}

}  // namespace

PoseSequence sample(const KDiT& model, const PoseFrame& j0, std::size_t m, const DiffusionSchedule& sched,
                    const std::optional<ConditionTrack>& cond, std::mt19937_64& rng, const SampleOptions& opts) {
    if (m < 1) throw std::invalid_argument("sample needs m >= 1 frames");
    const auto& cfg = model.config();
    if (j0.positions.size() != cfg.joints) throw ShapeError("prefix joint count does not match the model");
    j0.validate(cfg.joints);
    if (cond) {
        if (cond->frames() != m) throw ShapeError("condition track length must equal m");
        cond->validate(cfg.joints);
        if (opts.cfg_scale != 1.0 && !cfg.condition_trained) {
            throw std::invalid_argument("classifier-free guidance needs a model trained with condition dropout");
        }
    }
    const ConditionTrack none = ConditionTrack::absent(m, cfg.joints);
    Tensor z = normal_tensor({m, model.coords()}, rng);
    for (std::size_t t = sched.T; t >= 1; --t) {
        const Tensor eps = cond ? guided_eps(model, z, t, j0, *cond, opts.cfg_scale) : forward_denoise(model, z, t, j0, none);
        const Tensor noise = t > 1 ? normal_tensor(z.shape(), rng) : Tensor(z.shape());
        z = reverse_step(z, eps, t, sched, noise);
    }
    const Tensor unit = from_model_space(z);

    PoseSequence out;
    out.fps = opts.fps;
    out.topology = cfg.topology;
    out.joints = cfg.joint_names;
    if (out.joints.empty()) {
        for (std::size_t j = 0; j < cfg.joints; ++j) out.joints.push_back("j" + std::to_string(j));
    }
    out.frames.push_back(j0);
    for (std::size_t k = 0; k < m; ++k) {
        PoseFrame f;
        for (std::size_t j = 0; j < cfg.joints; ++j) {
            f.positions.push_back({std::clamp(unit.at(k, 2 * j), 0.0, 1.0), std::clamp(unit.at(k, 2 * j + 1), 0.0, 1.0)});
            f.confidence.push_back(1.0);
        }
        out.frames.push_back(std::move(f));
    }
    return out;
}

ConditionTrack refine_condition(const PoseSequence& aligned, std::size_t tau, std::size_t joints) {
    if (aligned.frames.empty()) throw std::invalid_argument("refine needs at least one aligned frame");
    const std::size_t m = aligned.frames.size();
    ConditionTrack cond = ConditionTrack::absent(tau + m, joints);
    const ConditionTrack given = ConditionTrack::from_frames(aligned.frames);
    if (given.values.cols() != 2 * joints) throw ShapeError("aligned sequence joint count does not match the model");
    std::copy(given.values.data().begin(), given.values.data().end(),
              cond.values.data().begin() + static_cast<std::ptrdiff_t>(tau * 2 * joints));
    std::fill(cond.present.begin() + static_cast<std::ptrdiff_t>(tau), cond.present.end(), 1);
    return cond;
}

PoseSequence refine(const KDiT& model, const PoseFrame& j0, const PoseSequence& aligned, std::size_t tau,
                    const DiffusionSchedule& sched, std::mt19937_64& rng, const SampleOptions& opts) {
    const ConditionTrack cond = refine_condition(aligned, tau, model.config().joints);
    const std::size_t m = aligned.frames.size();
    SampleOptions o = opts;
    o.fps = aligned.fps;
    auto out = sample(model, j0, tau + m, sched, cond, rng, o);
    if (!aligned.topology.empty()) out.topology = aligned.topology;
    if (!aligned.joints.empty()) out.joints = aligned.joints;
    return out;
}

// ---------------------------------------------------------------- training

Var denoising_loss(Tape& tape, const KDiT& model, const KDiT::Bindings& p, const Tensor& x0_model,
                   const Tensor& prefix_model, const Tensor& eps, std::size_t t, const DiffusionSchedule& sched,
                   const ConditionTrack& cond) {
    const Tensor zt = q_sample(x0_model, t, eps, sched);
    Var eps_hat = model.forward(tape, p, tape.constant(zt), t, tape.constant(prefix_model), cond);
    return ad::mse(eps_hat, tape.constant(eps));
}

KDiTTrainer::KDiTTrainer(KDiT& model, DiffusionSchedule sched, TrainConfig cfg, std::uint64_t seed)
    : model_(model), sched_(std::move(sched)), cfg_(cfg), rng_(seed) {
    if (!(cfg_.dropout_p >= 0.0 && cfg_.dropout_p <= 1.0)) throw std::invalid_argument("dropout_p must lie in [0, 1]");
    if (cfg_.dropout_p > 0.0 && cfg_.dropout_p < 1.0) model_.config().condition_trained = true;
}

TrainStats KDiTTrainer::step(const std::vector<PoseSequence>& batch) {
    if (batch.empty()) throw std::invalid_argument("empty training batch");
    const std::size_t J = model_.config().joints, C = 2 * J;

    struct Item {
        Tensor x0, prefix, eps;
        std::size_t t;
        ConditionTrack cond;
    };
    std::vector<Item> items;
    TrainStats stats;
    std::uniform_int_distribution<std::size_t> pick_t(1, sched_.T);
    std::bernoulli_distribution keep(cfg_.dropout_p);
    // all randomness is drawn serially so results do not depend on threads
    for (const auto& seq : batch) {
        if (seq.frames.size() < 2) throw std::invalid_argument("training sequences need a prefix and >= 1 frame");
        const std::size_t m = seq.frames.size() - 1;
        Item it;
        it.prefix = to_model_space(flatten_frame(seq.frames[0]));
        if (it.prefix.cols() != C) throw ShapeError("training sequence joint count does not match the model");
        it.x0 = Tensor({m, C});
        it.cond = ConditionTrack::absent(m, J);
        for (std::size_t k = 0; k < m; ++k) {
            const Tensor row = flatten_frame(seq.frames[k + 1]);
            for (std::size_t i = 0; i < C; ++i) it.x0[k * C + i] = 2.0 * row[i] - 1.0;
        }
        it.t = pick_t(rng_);
        it.eps = normal_tensor({m, C}, rng_);
        for (std::size_t k = 0; k < m; ++k) {
            if (keep(rng_)) {
                const Tensor row = flatten_frame(seq.frames[k + 1]);
                std::copy(row.data().begin(), row.data().end(), it.cond.values.data().begin() + static_cast<std::ptrdiff_t>(k * C));
                it.cond.present[k] = 1;
            }
        }
        stats.cond_present += it.cond.present_count();
        stats.cond_total += m;
        items.push_back(std::move(it));
    }

    const auto& params = model_.params();
    const std::size_t nb = items.size();
    std::vector<std::vector<Tensor>> grads(nb);
    std::vector<double> losses(nb);
    const auto ni = static_cast<std::ptrdiff_t>(nb);
#pragma omp parallel for schedule(static) if (kernels::max_threads() > 1 && nb > 1)
    for (std::ptrdiff_t b = 0; b < ni; ++b) {
        const auto& it = items[static_cast<std::size_t>(b)];
        Tape tape;
        auto p = model_.bind(tape);
        Var loss = denoising_loss(tape, model_, p, it.x0, it.prefix, it.eps, it.t, sched_, it.cond);
        tape.backward(loss);
        losses[static_cast<std::size_t>(b)] = loss.value()[0];
        auto& g = grads[static_cast<std::size_t>(b)];
        for (const auto& [name, _] : params) g.push_back(tape.grad(p.at(name)));
    }

    double total = 0.0;
    for (double l : losses) total += l;
    stats.loss = total / static_cast<double>(nb);
    if (!std::isfinite(stats.loss)) {
        std::ostringstream msg;
        msg << "non-finite training loss at step " << adam_.step + 1 << " (timesteps:";
        for (const auto& it : items) msg << ' ' << it.t;
        msg << ")";
        throw NumericError(msg.str());
    }

    // fixed-order reduction
    std::vector<Tensor> sum = grads[0];
    for (std::size_t b = 1; b < nb; ++b)
        for (std::size_t i = 0; i < sum.size(); ++i)
            for (std::size_t e = 0; e < sum[i].size(); ++e) sum[i][e] += grads[b][i][e];
    for (auto& g : sum)
        for (auto& v : g.data()) v /= static_cast<double>(nb);
    std::vector<Tensor*> ptrs;
    for (auto& [_, t] : model_.params()) ptrs.push_back(&t);
    optimizer_step(ptrs, sum, adam_, cfg_.lr, cfg_.adam);
    return stats;
}

std::vector<PoseSequence> sample_windows(const std::vector<PoseSequence>& pool, std::size_t window, std::size_t count,
                                         std::mt19937_64& rng) {
    if (pool.empty()) throw std::invalid_argument("empty training pool");
    if (window == 0) throw std::invalid_argument("training window must be >= 1 frame");
    for (const auto& s : pool) {
        if (s.frames.size() < window + 1) {
            throw std::invalid_argument("training sequence with " + std::to_string(s.frames.size()) +
                                        " frames is shorter than the window + prefix (" + std::to_string(window + 1) + ")");
        }
    }
    std::vector<PoseSequence> out;
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (std::size_t i = 0; i < count; ++i) {
        const auto& s = pool[pick(rng)];
        std::uniform_int_distribution<std::size_t> start(0, s.frames.size() - window - 1);
        const auto st = static_cast<std::ptrdiff_t>(start(rng));
        PoseSequence w;
        w.fps = s.fps;
        w.topology = s.topology;
        w.joints = s.joints;
        w.frames.assign(s.frames.begin() + st, s.frames.begin() + st + static_cast<std::ptrdiff_t>(window) + 1);
        out.push_back(std::move(w));
    }
    return out;
}

std::vector<double> train_kdit(KDiT& model, const DiffusionSchedule& sched, const std::vector<PoseSequence>& pool,
                               const TrainLoopConfig& cfg, std::uint64_t seed,
                               const std::function<void(std::size_t, double)>& on_step) {
    if (cfg.batch == 0) throw std::invalid_argument("batch size must be positive");
    std::mt19937_64 rng(seed);
    KDiTTrainer trainer(model, sched, cfg.train, rng());
    std::vector<double> losses;
    losses.reserve(cfg.steps);
    for (std::size_t k = 0; k < cfg.steps; ++k) {
        losses.push_back(trainer.step(sample_windows(pool, cfg.window, cfg.batch, rng)).loss);
        if (on_step) on_step(k + 1, losses.back());
    }
    return losses;
}

// ---------------------------------------------------------------- synthetic data

std::vector<Vec2> rest_pose(const SkeletonTopology& topo) {
    if (topo.name() == "body14" && topo.joint_count() == 14) {
        return {{0.5, 0.3},  {0.5, 0.2},  {0.42, 0.32}, {0.38, 0.45}, {0.36, 0.56}, {0.58, 0.32}, {0.62, 0.45},
                {0.64, 0.56}, {0.45, 0.6}, {0.45, 0.75}, {0.45, 0.9},  {0.55, 0.6},  {0.55, 0.75}, {0.55, 0.9}};
    }
    std::vector<Vec2> pose(topo.joint_count());
    pose[topo.root()] = {0.5, 0.25};
    const double step = 0.5 / static_cast<double>(std::max<std::size_t>(topo.joint_count(), 2));
    int side = 1;
    for (const auto& [p, c] : topo.bones()) {
        const double ang = 0.35 * side;
        side = -side;
        pose[c] = pose[p] + Vec2{step * std::sin(ang), step * std::cos(ang)};
    }
    return pose;
}

PoseSequence synthetic_motion(const SkeletonTopology& topo, std::size_t frames, std::mt19937_64& rng, Fps fps) {
    if (frames == 0) throw std::invalid_argument("synthetic motion needs at least one frame");
    const auto rest = rest_pose(topo);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double two_pi = 2.0 * std::numbers::pi;
    const double scale = 0.85 + 0.25 * u(rng);
    const double base_freq = 0.4 + 1.2 * u(rng);
    struct BoneMotion {
        double length, angle0, amp, freq, phase;
    };
    std::vector<BoneMotion> bm;
    for (const auto& [p, c] : topo.bones()) {
        const Vec2 d = rest[c] - rest[p];
        bm.push_back({scale * norm(d), std::atan2(d.y, d.x), 0.05 + 0.4 * u(rng), base_freq * (0.75 + 0.5 * u(rng)),
                      two_pi * u(rng)});
    }
    const double sway_x = 0.03 * u(rng), sway_y = 0.015 * u(rng), sway_phase = two_pi * u(rng);

    PoseSequence seq;
    seq.topology = topo.name();
    seq.joints = topo.joints();
    seq.fps = fps;
    for (std::size_t k = 0; k < frames; ++k) {
        const double time = static_cast<double>(k) / fps.value();
        PoseFrame f;
        f.positions.assign(topo.joint_count(), {});
        f.confidence.assign(topo.joint_count(), 1.0);
        const double w = two_pi * 0.5 * base_freq * time + sway_phase;
        f.positions[topo.root()] = rest[topo.root()] + Vec2{sway_x * std::sin(w), sway_y * std::sin(2.0 * w)};
        for (std::size_t b = 0; b < topo.bones().size(); ++b) {
            const auto [p, c] = topo.bones()[b];
            const auto& mo = bm[b];
            const double a = mo.angle0 + mo.amp * std::sin(two_pi * mo.freq * time + mo.phase);
            f.positions[c] = f.positions[p] + Vec2{mo.length * std::cos(a), mo.length * std::sin(a)};
        }
        seq.frames.push_back(std::move(f));
    }
    return seq;
}

std::vector<PoseSequence> synthetic_corpus(const SkeletonTopology& topo, std::size_t sequences, std::size_t frames,
                                           std::mt19937_64& rng, Fps fps) {
    std::vector<PoseSequence> out;
    for (std::size_t i = 0; i < sequences; ++i) out.push_back(synthetic_motion(topo, frames, rng, fps));
    return out;
}

// ---------------------------------------------------------------- gradcheck

GradcheckReport gradcheck(const KDiT& model, const DiffusionSchedule& sched, std::size_t m, std::uint64_t seed,
                          std::size_t per_tensor, double eps, double floor) {
    if (m < 1) throw std::invalid_argument("gradcheck needs m >= 1");
    std::mt19937_64 rng(seed);
    const std::size_t J = model.config().joints, C = 2 * J;
    std::normal_distribution<double> n(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.05, 0.95);
    Tensor x0({m, C}), prefix({1, C}), noise({m, C});
    for (auto& v : x0.data()) v = 2.0 * u(rng) - 1.0;
    for (auto& v : prefix.data()) v = 2.0 * u(rng) - 1.0;
    for (auto& v : noise.data()) v = n(rng);
    ConditionTrack cond = ConditionTrack::absent(m, J);
    for (std::size_t k = 0; k < m; k += 2) {
        for (std::size_t i = 0; i < C; ++i) cond.values.at(k, i) = u(rng);
        cond.present[k] = 1;
    }
    const std::size_t t = std::max<std::size_t>(1, sched.T / 2);

    KDiT work = model;
    std::map<std::string, Tensor> analytic;
    {
        Tape tape;
        auto p = work.bind(tape);
        tape.backward(denoising_loss(tape, work, p, x0, prefix, noise, t, sched, cond));
        for (const auto& [name, v] : p) analytic[name] = tape.grad(v);
    }
    auto loss_at = [&] {
        Tape tape;
        auto p = work.bind(tape);
        return denoising_loss(tape, work, p, x0, prefix, noise, t, sched, cond).value()[0];
    };

    GradcheckReport rep;
    for (auto& [name, tensor] : work.params()) {
        const std::size_t count = per_tensor == 0 ? tensor.size() : std::min(per_tensor, tensor.size());
        std::vector<std::size_t> idx(tensor.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        if (count < idx.size()) {
            std::shuffle(idx.begin(), idx.end(), rng);
            idx.resize(count);
        }
        for (std::size_t i : idx) {
            const double orig = tensor[i];
            tensor[i] = orig + eps;
            const double fp = loss_at();
            tensor[i] = orig - eps;
            const double fm = loss_at();
            tensor[i] = orig;
            const double num = (fp - fm) / (2.0 * eps);
            const double a = analytic[name][i];
            const double abs_err = std::abs(a - num);
            const double rel = abs_err / std::max({std::abs(a), std::abs(num), floor});
            rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = name + "[" + std::to_string(i) + "]";
            }
            ++rep.checked;
        }
    }
    return rep;
}

}  // namespace motionkit
