#include <random>
#include <sstream>

#include "doctest.h"
#include "filter_fixtures.hpp"
#include "json.hpp"
#include "motionkit/cli.hpp"
#include "motionkit/kdit.hpp"
#include "test_util.hpp"

using namespace motionkit;
using nlohmann::json;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = run(args, out, err);
    return {code, out.str(), err.str()};
}

const std::string kFixtures = MOTIONKIT_FIXTURE_DIR;

}  // namespace

TEST_CASE("plan-segments") {
    auto r = cli({"plan-segments", "--frames", "249", "--height", "720", "--width", "1280"});
    REQUIRE(r.code == 0);
    auto j = json::parse(r.out);
    REQUIRE(j["segments"].size() == 2);
    CHECK(j["segments"][0]["end_frame"] == 128);
    CHECK(j["segments"][1]["start_frame"] == 128);
    CHECK(j["capacity"] == 129);
    CHECK(cli({"plan-segments", "--frames", "249", "--height", "720", "--width", "1280"}).out == r.out);
}

TEST_CASE("usage and module errors") {
    CHECK(cli({}).code == 2);
    CHECK(cli({"bogus"}).code == 2);
    auto r = cli({"plan-segments", "--frames", "10"});
    CHECK(r.code == 2);
    CHECK(r.err.find("Usage") != std::string::npos);
    CHECK(cli({"plan-segments", "--frames", "10", "--height", "7", "--width", "8"}).code == 1);
    CHECK(cli({"plan-segments", "--help"}).code == 0);
    CHECK(cli({"rasterize", "--seq", "/nonexistent.jsonl", "--latent-h", "2", "--latent-w", "2", "-o", "x"}).code == 1);
}

TEST_CASE("filter exit codes and fixture files") {
    testutil::TempDir dir;
    for (const auto& f : testutil::filter_fixtures()) {
        CAPTURE(f.name);
        const std::string path = kFixtures + "/filter/" + f.name + ".jsonl";
        // the files on disk are the serialized in-code fixtures
        CHECK(testutil::read_file(path) == format_records(f.records));
        const auto report = (dir / (f.name + ".json")).string();
        auto r = cli({"filter", "--records", path, "--report", report});
        CHECK(r.code == (f.failing_rule.empty() ? 0 : 1));
        auto j = json::parse(testutil::read_file(report));
        if (!f.failing_rule.empty()) {
            CHECK(j["failed"] == json::array({f.failing_rule}));
        }
    }
    CHECK(cli({"filter", "--records", (dir / "missing.jsonl").string()}).code == 2);
    testutil::write_file(dir / "rules.txt", "min_iqa_mean = 80\n");
    CHECK(cli({"filter", "--records", kFixtures + "/filter/pass.jsonl", "--rules", (dir / "rules.txt").string()}).code == 1);
    testutil::write_file(dir / "bad_rules.txt", "min_iqa_mean = high\n");
    CHECK(cli({"filter", "--records", kFixtures + "/filter/pass.jsonl", "--rules", (dir / "bad_rules.txt").string()}).code == 2);
}

TEST_CASE("config precedence: flag > file > default") {
    testutil::TempDir dir;
    const std::vector<std::string> base{"plan-segments", "--frames", "40", "--height", "720", "--width", "1280"};
    auto capacity = [&](std::vector<std::string> extra) {
        auto args = base;
        args.insert(args.end(), extra.begin(), extra.end());
        auto r = cli(args);
        REQUIRE(r.code == 0);
        return json::parse(r.out)["capacity"].get<int>();
    };
    CHECK(capacity({}) == 129);  // default budget
    // 14400 tokens per latent frame at 720p
    testutil::write_file(dir / "tool.toml", "seed = 9\n[plan-segments]\nbudget = 244800\n");
    const auto cfg = (dir / "tool.toml").string();
    CHECK(capacity({"--config", cfg}) == 65);
    CHECK(capacity({"--config", cfg, "--budget", "129600"}) == 33);
    CHECK(capacity({"--budget", "129600", "--config", cfg}) == 33);
}

TEST_CASE("render-skeleton") {
    testutil::TempDir dir;
    auto topo = SkeletonTopology::default_body();
    std::mt19937_64 rng(4);
    auto seq = testutil::random_sequence(rng, topo, 3, 2);
    save_sequence(seq, dir / "seq.jsonl");
    auto r = cli({"render-skeleton", "--seq", (dir / "seq.jsonl").string(), "-o", (dir / "a").string()});
    REQUIRE(r.code == 0);
    cli({"render-skeleton", "--seq", (dir / "seq.jsonl").string(), "-o", (dir / "b").string()});
    for (std::size_t k = 0; k < 3; ++k) {
        char name[32];
        std::snprintf(name, sizeof name, "frame_%05zu.svg", k);
        const auto svg = testutil::read_file(dir / "a" / name);
        CHECK(svg == testutil::read_file(dir / "b" / name));
        std::size_t circles = 0, visible = 0;
        for (auto p = svg.find("<circle"); p != std::string::npos; p = svg.find("<circle", p + 1)) ++circles;
        for (std::size_t j = 0; j < 14; ++j) visible += seq.frames[k].visible(j);
        CHECK(circles == visible);
    }
    CHECK_FALSE(std::filesystem::exists(dir / "a" / "frame_00003.svg"));

    seq.frames.resize(1);
    CHECK(render_skeleton(seq, topo, dir / "one").size() == 1);
}

TEST_CASE("pipeline: train, retarget, refine, rasterize, tokenize") {
    testutil::TempDir dir;
    auto p = [&](const std::string& n) { return (dir / n).string(); };
    auto topo = SkeletonTopology::default_body();
    std::mt19937_64 rng(5);
    save_sequence(synthetic_motion(topo, 4, rng), p("template.jsonl"));
    save_sequence(synthetic_motion(topo, 1, rng), p("reference.jsonl"));

    auto train = cli({"train-kdit", "--steps", "3", "--batch", "2", "--window", "4", "--width", "16", "--layers", "1",
                      "--heads", "2", "--T", "20", "--synthetic-sequences", "4", "--synthetic-frames", "8", "--seed",
                      "3", "-o", p("ckpt")});
    REQUIRE(train.code == 0);
    CHECK(json::parse(train.out)["steps"] == 3);

    auto gc = cli({"gradcheck", "--ckpt", p("ckpt"), "--per-tensor", "2", "--frames", "2"});
    CHECK(gc.code == 0);
    CHECK(json::parse(gc.out)["pass"] == true);

    auto gen = cli({"motion-gen", "--ckpt", p("ckpt"), "--prefix", p("reference.jsonl"), "--frames", "3", "-o", p("gen.jsonl")});
    REQUIRE(gen.code == 0);
    auto g = load_sequence(p("gen.jsonl"));
    CHECK(g.frames.size() == 4);
    CHECK(g.frames[0] == load_sequence(p("reference.jsonl")).frames[0]);

    auto once = [&](const std::string& tag) {
        REQUIRE(cli({"retarget", "--template", p("template.jsonl"), "--reference", p("reference.jsonl"), "-o",
                     p(tag + "aligned.jsonl")})
                    .code == 0);
        REQUIRE(cli({"refine", "--ckpt", p("ckpt"), "--prefix", p("reference.jsonl"), "--aligned",
                     p(tag + "aligned.jsonl"), "--tau", "4", "--seed", "11", "-o", p(tag + "refined.jsonl")})
                    .code == 0);
        REQUIRE(cli({"rasterize", "--seq", p(tag + "refined.jsonl"), "--latent-h", "4", "--latent-w", "4", "-o",
                     p(tag + "stack.pgt")})
                    .code == 0);
        REQUIRE(cli({"tokenize", "--stack", p(tag + "stack.pgt"), "-o", p(tag + "tokens.pgt")}).code == 0);
    };
    once("a_");
    once("b_");
    for (auto name : {"aligned.jsonl", "refined.jsonl", "stack.pgt", "tokens.pgt"}) {
        CAPTURE(name);
        CHECK(testutil::read_file(p(std::string("a_") + name)) == testutil::read_file(p(std::string("b_") + name)));
    }
    CHECK(load_sequence(p("a_refined.jsonl")).frames.size() == 1 + 4 + 4);
    CHECK(load_pgt(p("a_tokens.pgt")).shape() == Shape{3, 4, 4, 512});

    // a different seed changes the refined motion
    REQUIRE(cli({"refine", "--ckpt", p("ckpt"), "--prefix", p("reference.jsonl"), "--aligned", p("a_aligned.jsonl"),
                 "--seed", "12", "-o", p("c_refined.jsonl")})
                .code == 0);
    CHECK(testutil::read_file(p("c_refined.jsonl")) != testutil::read_file(p("a_refined.jsonl")));
    // 8 frames is not 4f+1
    CHECK(cli({"rasterize", "--seq", p("template.jsonl"), "--latent-h", "4", "--latent-w", "4", "-o", p("x.pgt")}).code == 1);
}

TEST_CASE("textmask and train-ranker") {
    testutil::TempDir dir;
    auto p = [&](const std::string& n) { return (dir / n).string(); };
    json boxes = json::array();
    for (int k = 0; k < 5; ++k) boxes.push_back(json::array({json::array({0, 0, 16, 8})}));
    testutil::write_file(p("boxes.json"), boxes.dump());
    REQUIRE(cli({"textmask", "--boxes", p("boxes.json"), "--height", "32", "--width", "32", "--frames", "5", "-o",
                 p("mask.pgt")})
                .code == 0);
    auto m = load_pgt(p("mask.pgt"));
    CHECK(m.shape() == Shape{2, 4, 4});
    CHECK(m.sum() == 4.0);

    std::mt19937_64 rng(6);
    std::normal_distribution<double> n(0.0, 1.0);
    std::string text;
    for (int set = 0; set < 40; ++set) {
        json j;
        std::vector<int> ranks;
        for (int i = 0; i < 5; ++i) j["features"].push_back({n(rng), n(rng)});
        std::vector<std::pair<double, int>> order;
        for (int i = 0; i < 5; ++i) order.push_back({j["features"][i][0].get<double>(), i});
        std::sort(order.begin(), order.end());
        ranks.assign(5, 0);
        for (int r = 0; r < 5; ++r) ranks[order[r].second] = r + 1;
        j["ranks"] = ranks;
        text += j.dump() + "\n";
    }
    testutil::write_file(p("pairs.jsonl"), text);
    auto r = cli({"train-ranker", "--pairs", p("pairs.jsonl"), "--steps", "200", "-o", p("ranker")});
    REQUIRE(r.code == 0);
    CHECK(json::parse(r.out)["heldout_pairs"] == 24);
    CHECK(std::filesystem::exists(dir / "ranker" / "manifest.json"));
}
