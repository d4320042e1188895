#include "motionkit/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "motionkit/filter.hpp"
#include "motionkit/kdit.hpp"
#include "motionkit/kernels.hpp"
#include "motionkit/pose_adapter.hpp"
#include "motionkit/pose_guider.hpp"
#include "motionkit/ranker.hpp"
#include "motionkit/segments.hpp"

using nlohmann::json;

namespace motionkit {

// ---------------------------------------------------------------- svg

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::vector<int> subtree_slots(const SkeletonTopology& topo) {
    std::map<std::size_t, int> slot_of_child;
    for (const auto& [p, c] : topo.bones()) {
        if (p == topo.root() && !slot_of_child.count(c)) {
            slot_of_child[c] = static_cast<int>(slot_of_child.size());
        }
    }
    std::vector<int> slots(topo.joint_count(), -1);
    for (std::size_t j = 0; j < topo.joint_count(); ++j) {
        std::size_t k = j;
        while (k != topo.root()) {
            const auto p = topo.parent(k);
            if (!p) break;
            if (*p == topo.root()) {
                slots[j] = slot_of_child[k];
                break;
            }
            k = *p;
        }
    }
    return slots;
}

std::string color(int slot) {
    if (slot < 0) return "#444444";
    return kPalette[static_cast<std::size_t>(slot) % std::size(kPalette)];
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

}  // namespace

std::string skeleton_svg(const PoseFrame& frame, const SkeletonTopology& topo, std::size_t size, double threshold) {
    frame.validate(topo.joint_count());
    const auto slots = subtree_slots(topo);
    const double s = static_cast<double>(size);
    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size << "\" viewBox=\"0 0 "
      << size << " " << size << "\">\n";
    o << "<rect width=\"" << size << "\" height=\"" << size << "\" fill=\"#ffffff\"/>\n";
    for (const auto& [p, c] : topo.bones()) {
        if (!frame.visible(p, threshold) || !frame.visible(c, threshold)) continue;
        o << "<line x1=\"" << num(frame.positions[p].x * s) << "\" y1=\"" << num(frame.positions[p].y * s) << "\" x2=\""
          << num(frame.positions[c].x * s) << "\" y2=\"" << num(frame.positions[c].y * s) << "\" stroke=\""
          << color(slots[c]) << "\" stroke-width=\"3\"/>\n";
    }
    for (std::size_t j = 0; j < topo.joint_count(); ++j) {
        if (!frame.visible(j, threshold)) continue;
        o << "<circle cx=\"" << num(frame.positions[j].x * s) << "\" cy=\"" << num(frame.positions[j].y * s)
          << "\" r=\"4\" fill=\"" << color(slots[j]) << "\"/>\n";
    }
    for (const auto& b : frame.bg_points) {
        o << "<rect x=\"" << num(b.x * s - 2) << "\" y=\"" << num(b.y * s - 2)
          << "\" width=\"4\" height=\"4\" fill=\"#999999\"/>\n";
    }
    o << "</svg>\n";
    return o.str();
}

std::vector<std::filesystem::path> render_skeleton(const PoseSequence& seq, const SkeletonTopology& topo,
                                                   const std::filesystem::path& dir, std::size_t size,
                                                   double threshold) {
    std::filesystem::create_directories(dir);
    std::vector<std::filesystem::path> out;
    for (std::size_t k = 0; k < seq.frames.size(); ++k) {
        char name[32];
        std::snprintf(name, sizeof name, "frame_%05zu.svg", k);
        const auto path = dir / name;
        std::ofstream f(path, std::ios::binary);
        if (!f) throw std::runtime_error("cannot write " + path.string());
        f << skeleton_svg(seq.frames[k], topo, size, threshold);
        out.push_back(path);
    }
    return out;
}

// ---------------------------------------------------------------- commands

namespace {

struct Ctx {
    ToolConfig cfg;
    std::ostream& out;
    std::ostream& err;
};

SkeletonTopology topology_of(const ToolConfig& cfg) {
    return cfg.topology.empty() ? SkeletonTopology::default_body() : SkeletonTopology::load(cfg.topology);
}

void write_text(const std::string& path, const std::string& text, std::ostream& fallback) {
    if (path.empty() || path == "-") {
        fallback << text;
        return;
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << text;
}

PoseFrame frame_at(const PoseSequence& seq, std::size_t index, const char* what) {
    if (index >= seq.frames.size()) {
        throw std::invalid_argument(std::string(what) + " has " + std::to_string(seq.frames.size()) +
                                    " frames, index " + std::to_string(index) + " requested");
    }
    return seq.frames[index];
}

void check_model_topology(const KDiT& model, const PoseFrame& j0) {
    if (j0.positions.size() != model.config().joints) {
        throw ShapeError("prefix has " + std::to_string(j0.positions.size()) + " joints, checkpoint expects " +
                         std::to_string(model.config().joints));
    }
}

std::vector<std::filesystem::path> jsonl_files(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".jsonl") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw std::invalid_argument("no .jsonl sequences in " + dir.string());
    return files;
}

}  // namespace

namespace {

int run_app(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    Ctx ctx{ToolConfig{}, out, err};
    ToolConfig& cfg = ctx.cfg;

    CLI::App app("motionkit: pose retargeting, keypoint diffusion, guider tokens, segment planning and data filtering",
                 "motionkit");
    app.set_config("--config", "", "TOML/INI file overlaying defaults; flags on the command line take precedence");
    app.fallthrough();
    app.require_subcommand(1);
    app.add_option("--seed", cfg.seed, "Seed for every random draw")->capture_default_str();
    app.add_option("--jobs", cfg.jobs, "OpenMP threads")->capture_default_str()->check(CLI::PositiveNumber);
    app.add_option("--topology", cfg.topology, "Skeleton topology JSON (default: built-in body14)");
    app.add_option("--threshold", cfg.visibility_threshold, "Keypoint visibility threshold")
        ->capture_default_str()
        ->check(CLI::Range(0.0, 1.0));
    app.add_option("--fps", cfg.fps, "Frame rate of generated and synthetic sequences")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);

    std::string output;
    auto add_out = [&](CLI::App* sub, bool required = true) {
        auto* o = sub->add_option("-o,--output", output, "Output path");
        if (required) o->required();
    };
    std::function<int()> action;

    // retarget
    auto* sub = app.add_subcommand("retarget", "Transfer a template motion onto a reference skeleton");
    std::string tmpl_path, ref_path, anchor = "scaled_template_trajectory", parent_mode = "within_frame";
    std::size_t ref_frame = 0;
    sub->add_option("--template", tmpl_path, "Template pose sequence (JSONL)")->required();
    sub->add_option("--reference", ref_path, "Sequence holding the reference pose")->required();
    sub->add_option("--reference-frame", ref_frame, "Frame of --reference used as reference")->capture_default_str();
    sub->add_option("--anchor-mode", anchor, "scaled_template_trajectory | fixed_reference_root")->capture_default_str();
    sub->add_option("--parent-mode", parent_mode, "within_frame | literal_reference_parent")->capture_default_str();
    add_out(sub);
    sub->callback([&] {
        action = [&] {
            const auto topo = topology_of(cfg);
            RetargetConfig rc;
            rc.anchor_mode = parse_anchor_mode(anchor);
            rc.parent_mode = parse_parent_mode(parent_mode);
            const auto ref = load_sequence(ref_path);
            save_sequence(retarget_sequence(load_sequence(tmpl_path), frame_at(ref, ref_frame, "reference"), topo, rc),
                          output);
            return 0;
        };
    });

    // refine / motion-gen share most flags
    std::string ckpt, prefix_path, cond_path;
    std::size_t prefix_frame = 0, frames = 0;
    auto sample_flags = [&](CLI::App* s) {
        s->add_option("--ckpt", ckpt, "Keypoint model checkpoint directory")->required();
        s->add_option("--prefix", prefix_path, "Sequence holding the prefix pose j0")->required();
        s->add_option("--prefix-frame", prefix_frame, "Frame of --prefix used as j0")->capture_default_str();
        s->add_option("--cfg", cfg.cfg_scale, "Classifier-free guidance scale")->capture_default_str();
        s->add_option("--tau", cfg.tau, "Transitional frames between j0 and the conditioned frames")
            ->capture_default_str();
        add_out(s);
    };
    auto sample_action = [&](bool require_cond) {
        return [&, require_cond] {
            DiffusionSchedule sched;
            const KDiT model = KDiT::load(ckpt, &sched);
            const PoseFrame j0 = frame_at(load_sequence(prefix_path), prefix_frame, "prefix");
            check_model_topology(model, j0);
            std::mt19937_64 rng(cfg.seed);
            SampleOptions opts;
            opts.cfg_scale = cfg.cfg_scale;
            opts.fps = Fps::from_double(cfg.fps);
            PoseSequence result;
            if (!cond_path.empty()) {
                result = refine(model, j0, load_sequence(cond_path), cfg.tau, sched, rng, opts);
            } else if (require_cond) {
                throw std::invalid_argument("refine needs --aligned");
            } else {
                if (frames == 0) throw std::invalid_argument("motion-gen needs --frames >= 1 without --cond");
                result = sample(model, j0, frames, sched, std::nullopt, rng, opts);
            }
            save_sequence(result, output);
            return 0;
        };
    };
    sub = app.add_subcommand("refine", "Re-sample an aligned sequence behind tau bridge frames");
    sample_flags(sub);
    sub->add_option("--aligned", cond_path, "Retargeted sequence to refine")->required();
    sub->callback([&] { action = sample_action(true); });

    sub = app.add_subcommand("motion-gen", "Generate keypoint frames from a prefix pose");
    sample_flags(sub);
    sub->add_option("--frames", frames, "Frames to generate after j0 (without --cond)");
    sub->add_option("--cond", cond_path, "Condition sequence; output is j0 + tau + its frames");
    sub->callback([&] { action = sample_action(false); });

    // rasterize
    std::string seq_path;
    std::size_t latent_h = 0, latent_w = 0;
    sub = app.add_subcommand("rasterize", "Render a 4f+1 frame sequence into 8-channel pose images (PGT1)");
    sub->add_option("--seq", seq_path, "Pose sequence (JSONL)")->required();
    sub->add_option("--latent-h", latent_h, "Latent height h; images are 4h tall")->required();
    sub->add_option("--latent-w", latent_w, "Latent width w; images are 4w wide")->required();
    add_out(sub);
    sub->callback([&] {
        action = [&] {
            RasterOptions ro;
            ro.visibility_threshold = cfg.visibility_threshold;
            save_pgt(rasterize(load_sequence(seq_path), latent_h, latent_w, ro).to_tensor(), output);
            return 0;
        };
    });

    // tokenize
    std::string stack_path, weights_path;
    sub = app.add_subcommand("tokenize", "Pad and patchify pose images into (f+1, h, w, 512) guider tokens");
    sub->add_option("--stack", stack_path, "Pose image stack from rasterize (PGT1)")->required();
    sub->add_option("--pad", cfg.pad_mode, "Temporal padding of the 3 leading frames: replicate | zeros")
        ->capture_default_str();
    sub->add_option("--project", weights_path, "Optional (512, C) projection weights (PGT1)");
    add_out(sub);
    sub->callback([&] {
        action = [&] {
            const auto stack = PoseImageStack::from_tensor(load_pgt(stack_path));
            auto grid = patchify(pad_temporal(stack, parse_pad_mode(cfg.pad_mode)));
            save_pgt(weights_path.empty() ? grid.tokens : project(grid.tokens, load_pgt(weights_path)), output);
            return 0;
        };
    });

    // plan-segments
    std::size_t height = 0, width = 0;
    sub = app.add_subcommand("plan-segments", "Split a long video into chained segments (JSON)");
    sub->add_option("--frames", frames, "Total pixel frames")->required();
    sub->add_option("--height", height, "Video height (multiple of 8)")->required();
    sub->add_option("--width", width, "Video width (multiple of 8)")->required();
    sub->add_option("--budget", cfg.budget, "Latent token budget (f+1)·h·w")->capture_default_str();
    add_out(sub, false);
    sub->callback([&] {
        action = [&] {
            const auto geo = latent_geometry(height, width, cfg.budget);
            write_text(output, plan_to_json(plan_segments(frames, geo), &geo) + "\n", ctx.out);
            return 0;
        };
    });

    // textmask
    std::string boxes_path;
    sub = app.add_subcommand("textmask", "Latent text-region mask from per-frame boxes (PGT1)");
    sub->add_option("--boxes", boxes_path, "Per-frame text boxes (JSON)")->required();
    sub->add_option("--height", height, "Video height (multiple of 8)")->required();
    sub->add_option("--width", width, "Video width (multiple of 8)")->required();
    sub->add_option("--frames", frames, "Pixel frames (4f+1)")->required();
    sub->add_option("--budget", cfg.budget, "Latent token budget (f+1)·h·w")->capture_default_str();
    add_out(sub);
    sub->callback([&] {
        action = [&] {
            const auto geo = latent_geometry(height, width, cfg.budget);
            save_pgt(text_mask_to_latent(load_text_boxes(boxes_path), geo, frames), output);
            return 0;
        };
    });

    // filter
    std::string records_path, report_path;
    sub = app.add_subcommand("filter", "Accept or reject a segment (exit 0 accept, 1 reject, 2 error)");
    sub->add_option("--records", records_path, "Per-frame signal records (JSONL)")->required();
    sub->add_option("--rules", cfg.rules, "Rule overrides (key = value, 'off' disables)");
    sub->add_option("--report", report_path, "Write the JSON report here (default: stdout)");
    sub->callback([&] {
        action = [&] {
            try {
                const FilterRuleSet rules = cfg.rules.empty() ? FilterRuleSet{} : load_rules(cfg.rules);
                const auto rep = evaluate_segment(load_records(records_path), rules, topology_of(cfg));
                write_text(report_path, rep.to_json() + "\n", ctx.out);
                return rep.accepted ? 0 : 1;
            } catch (const std::exception& e) {
                ctx.err << "error: " << e.what() << "\n";
                return 2;
            }
        };
    });

    // train-kdit
    std::string data = "synthetic";
    TrainLoopConfig loop;
    KDiTConfig mc;
    std::size_t log_every = 100, synth_sequences = 256, synth_frames = 48;
    sub = app.add_subcommand("train-kdit", "Train the keypoint diffusion model");
    sub->add_option("--data", data, "Directory of [0,1] JSONL sequences, or 'synthetic'")->capture_default_str();
    sub->add_option("--steps", loop.steps, "Optimizer steps")->capture_default_str();
    sub->add_option("--batch", loop.batch, "Windows per step")->capture_default_str();
    sub->add_option("--window", loop.window, "Generated frames m per window")->capture_default_str();
    sub->add_option("--lr", loop.train.lr, "Adam learning rate")->capture_default_str();
    sub->add_option("--dropout", loop.train.dropout_p, "Probability a frame carries its ground-truth condition")
        ->capture_default_str();
    sub->add_option("--layers", mc.layers, "Transformer blocks")->capture_default_str();
    sub->add_option("--width", mc.width, "Model width")->capture_default_str();
    sub->add_option("--heads", mc.heads, "Attention heads")->capture_default_str();
    sub->add_option("--T", cfg.diffusion_steps, "Diffusion steps")->capture_default_str();
    sub->add_option("--schedule", cfg.schedule, "linear | cosine")->capture_default_str();
    sub->add_option("--log-every", log_every, "Report the mean loss every N steps on stderr (0: never)")
        ->capture_default_str();
    sub->add_option("--synthetic-sequences", synth_sequences, "Synthetic corpus size")->capture_default_str();
    sub->add_option("--synthetic-frames", synth_frames, "Frames per synthetic sequence")->capture_default_str();
    add_out(sub);
    sub->callback([&] {
        action = [&] {
            const auto topo = topology_of(cfg);
            std::mt19937_64 rng(cfg.seed);
            std::vector<PoseSequence> pool;
            if (data == "synthetic") {
                pool = synthetic_corpus(topo, synth_sequences, synth_frames, rng, Fps::from_double(cfg.fps));
            } else {
                for (const auto& f : jsonl_files(data)) pool.push_back(load_sequence(f));
            }
            mc.joints = topo.joint_count();
            mc.topology = topo.name();
            mc.joint_names = topo.joints();
            KDiT model(mc, rng());
            const auto sched = default_schedule(cfg.diffusion_steps, parse_schedule_kind(cfg.schedule));
            double window_sum = 0;
            const auto losses = train_kdit(model, sched, pool, loop, rng(), [&](std::size_t step, double loss) {
                window_sum += loss;
                if (log_every && step % log_every == 0) {
                    ctx.err << "step " << step << " loss " << window_sum / static_cast<double>(log_every) << "\n";
                    window_sum = 0;
                }
            });
            model.save(output, sched, cfg.seed);
            json summary{{"steps", losses.size()},
                         {"parameters", model.parameter_count()},
                         {"final_loss", losses.empty() ? 0.0 : losses.back()},
                         {"checkpoint", output}};
            ctx.out << summary.dump() << "\n";
            return 0;
        };
    });

    // train-ranker
    std::string pairs_path;
    RankerConfig rcfg;
    sub = app.add_subcommand("train-ranker", "Train the pairwise clarity ranker");
    sub->add_option("--pairs", pairs_path, "Ranking pairs or ranked sets (JSONL)")->required();
    sub->add_option("--steps", rcfg.steps, "Optimizer steps")->capture_default_str();
    sub->add_option("--hidden", rcfg.hidden, "Hidden units")->capture_default_str();
    sub->add_option("--batch", rcfg.batch, "Pairs per step")->capture_default_str();
    sub->add_option("--lr", rcfg.lr, "Adam learning rate")->capture_default_str();
    sub->add_option("--margin", rcfg.margin, "Ranking margin")->capture_default_str();
    sub->add_option("--holdout", rcfg.holdout, "Held-out fraction of sets")->capture_default_str();
    add_out(sub);
    sub->callback([&] {
        action = [&] {
            rcfg.seed = cfg.seed;
            const auto res = train_ranker(load_rank_pairs(pairs_path), rcfg);
            res.model.save(output);
            json summary{{"train_pairs", res.train_pairs},
                         {"heldout_pairs", res.heldout_pairs},
                         {"train_accuracy", res.train_accuracy},
                         {"heldout_accuracy", res.heldout_accuracy}};
            ctx.out << summary.dump() << "\n";
            return 0;
        };
    });

    // gradcheck
    std::size_t per_tensor = 0, gc_frames = 4;
    double tolerance = 1e-4;
    sub = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients of a checkpoint");
    sub->add_option("--ckpt", ckpt, "Keypoint model checkpoint directory")->required();
    sub->add_option("--frames", gc_frames, "Generated frames m")->capture_default_str();
    sub->add_option("--per-tensor", per_tensor, "Entries checked per tensor (0: all)")->capture_default_str();
    sub->add_option("--tolerance", tolerance, "Maximum relative error")->capture_default_str();
    sub->callback([&] {
        action = [&] {
            DiffusionSchedule sched;
            const KDiT model = KDiT::load(ckpt, &sched);
            const auto rep = gradcheck(model, sched, gc_frames, cfg.seed, per_tensor);
            json j{{"checked", rep.checked},
                   {"max_rel_err", rep.max_rel_err},
                   {"max_abs_err", rep.max_abs_err},
                   {"worst", rep.worst_param},
                   {"pass", rep.max_rel_err < tolerance}};
            ctx.out << j.dump() << "\n";
            return rep.max_rel_err < tolerance ? 0 : 1;
        };
    });

    // render-skeleton
    std::size_t size = 512;
    sub = app.add_subcommand("render-skeleton", "Write one SVG per frame (frame_%05d.svg)");
    sub->add_option("--seq", seq_path, "Pose sequence (JSONL)")->required();
    sub->add_option("--size", size, "Canvas size in pixels")->capture_default_str();
    add_out(sub);
    sub->callback([&] {
        action = [&] {
            const auto files = render_skeleton(load_sequence(seq_path), topology_of(cfg), output, size,
                                               cfg.visibility_threshold);
            ctx.out << files.size() << " frames written to " << output << "\n";
            return 0;
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        // subcommand help arrives as CallForHelp from the subcommand itself
        err << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }
    kernels::set_threads(cfg.jobs);
    try {
        return action ? action() : 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    return run_app(argc, argv, out, err);
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    std::vector<const char*> argv{"motionkit"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run_app(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace motionkit
