#include <cmath>
#include <random>

#include "doctest.h"
#include "motionkit/motion_core.hpp"
#include "test_util.hpp"

using namespace motionkit;

namespace {

PoseSequence two_frame_sequence() {
    PoseSequence seq;
    seq.topology = "chain3";
    seq.joints = {"j0", "j1", "j2"};
    seq.fps = {25, 1};
    seq.frames.push_back({{{0.5, 0.5}, {0.5, 0.6}, {0.5, 0.72}}, {1.0, 0.9, 0.2}, {}});
    seq.frames.push_back({{{0.1, 0.2}, {0.3, 0.4}, {0.5, 0.6}}, {0.5, 0.5, 0.5}, {{0.25, 0.75}, {0.1, 0.9}}});
    return seq;
}

}  // namespace

TEST_CASE("topology: default body tree and deterministic bone order") {
    auto topo = SkeletonTopology::default_body();
    CHECK(topo.joint_count() == 14);
    CHECK(topo.root() == *topo.index_of("neck"));
    REQUIRE(topo.bones().size() == 13);
    // depth-first from the neck, children by ascending index
    CHECK(topo.bones()[0].child == 1);
    CHECK(topo.bones()[1].child == 2);
    CHECK(topo.bones()[2].child == 3);
    CHECK(topo.bones()[3].child == 4);
    CHECK(topo.bones()[4].child == 5);
    for (const auto& b : topo.bones()) CHECK(topo.parent(b.child) == b.parent);
}

TEST_CASE("topology: every joint reaches the root within joint-count steps") {
    auto topo = SkeletonTopology::default_body();
    for (std::size_t j = 0; j < topo.joint_count(); ++j) {
        std::size_t cur = j, steps = 0;
        while (cur != topo.root()) {
            cur = *topo.parent(cur);
            ++steps;
        }
        CHECK(steps <= topo.joint_count());
    }
}

TEST_CASE("topology: invalid trees are rejected") {
    using P = std::vector<std::optional<std::size_t>>;
    CHECK_THROWS(SkeletonTopology("c", {"a", "b", "c"}, P{std::nullopt, 2, 1}, 0));
    CHECK_THROWS(SkeletonTopology("d", {"a", "a"}, P{std::nullopt, 0}, 0));
    CHECK_THROWS(SkeletonTopology("r", {"a", "b"}, P{1, std::nullopt}, 0));
    CHECK_THROWS(SkeletonTopology("o", {"a", "b"}, P{std::nullopt, 5}, 0));
}

TEST_CASE("topology: file round trip") {
    testutil::TempDir dir;
    auto topo = SkeletonTopology::default_body();
    topo.save(dir / "body.json");
    auto back = SkeletonTopology::load(dir / "body.json");
    CHECK(back.joints() == topo.joints());
    CHECK(back.root() == topo.root());
    CHECK(back.groups() == topo.groups());
    CHECK(back.bones().size() == topo.bones().size());
}

TEST_CASE("load_sequence: round trip of save_sequence") {
    testutil::TempDir dir;
    auto seq = two_frame_sequence();
    save_sequence(seq, dir / "s.jsonl");
    auto back = load_sequence(dir / "s.jsonl");
    CHECK(back.size() == 2);
    CHECK(back == seq);
    CHECK(back.frames[1].bg_points == seq.frames[1].bg_points);
}

TEST_CASE("load_sequence: fuzzed round trip is bit exact") {
    std::mt19937_64 rng(7);
    auto topo = SkeletonTopology::default_body();
    testutil::TempDir dir;
    for (int trial = 0; trial < 25; ++trial) {
        auto seq = testutil::random_sequence(rng, topo, 1 + trial % 6, static_cast<std::size_t>(trial % 21));
        seq.fps = trial % 2 ? Fps{25, 2} : Fps{30000, 1001};
        save_sequence(seq, dir / "f.jsonl");
        CHECK(load_sequence(dir / "f.jsonl") == seq);
    }
}

TEST_CASE("load_sequence: error paths") {
    const std::string header = R"({"topology":"chain3","fps":25,"joints":["a","b","c"]})";
    SUBCASE("joint count mismatch names the line") {
        std::string text = header + "\n" + R"({"t":0,"kp":[[0,0,1],[0,0,1]],"bg":[]})" + "\n";
        CHECK_THROWS_WITH(parse_sequence(text), doctest::Contains("joint count mismatch at line 2"));
    }
    SUBCASE("empty file") { CHECK_THROWS_WITH(parse_sequence(""), doctest::Contains("sequence must contain")); }
    SUBCASE("header only") { CHECK_THROWS_WITH(parse_sequence(header + "\n"), doctest::Contains(">=1 frame")); }
    SUBCASE("malformed line") {
        CHECK_THROWS_WITH(parse_sequence(header + "\n{nope\n"), doctest::Contains("line 2"));
    }
    SUBCASE("coordinate sanity bound") {
        std::string text = header + "\n" + R"({"t":0,"kp":[[0,0,1],[0,11,1],[0,0,1]]})" + "\n";
        CHECK_THROWS_WITH(parse_sequence(text), doctest::Contains("line 2"));
    }
}

TEST_CASE("save_sequence: unwritable path") {
    CHECK_THROWS(save_sequence(two_frame_sequence(), "/nonexistent_dir_xyz/out.jsonl"));
}

TEST_CASE("normalize_to_unit_square: letterbox convention") {
    const Extent e{1280, 720};
    // Shorter axis is centered: offset (1280 - 720) / 2 = 280 pixels.
    auto p = normalize_point({640, 360}, e);
    CHECK(p.x == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(p.y == doctest::Approx(0.5).epsilon(1e-15));
    auto corner = normalize_point({0, 0}, e);
    CHECK(corner.x == 0.0);
    CHECK(corner.y == doctest::Approx(0.21875));
    auto far = normalize_point({1280, 720}, e);
    CHECK(far.x == 1.0);
    CHECK(far.y == doctest::Approx(0.78125));
    CHECK_THROWS(normalize_point({0, 0}, {0, 720}));
}

TEST_CASE("normalize_to_unit_square: inverse within 1e-9") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 1000; ++i) {
        Extent e{1.0 + 4000 * u(rng), 1.0 + 4000 * u(rng)};
        Vec2 p{u(rng) * e.width, u(rng) * e.height};
        auto back = denormalize_point(normalize_point(p, e), e);
        CHECK(std::abs(back.x - p.x) < 1e-9);
        CHECK(std::abs(back.y - p.y) < 1e-9);
    }
    auto seq = two_frame_sequence();
    for (auto& f : seq.frames) {
        for (auto& q : f.positions) q = {q.x * 1920, q.y * 1080};
    }
    auto norm = normalize_to_unit_square(seq, {1920, 1080});
    auto back = denormalize_from_unit_square(norm, {1920, 1080});
    for (std::size_t k = 0; k < seq.size(); ++k) {
        for (std::size_t j = 0; j < 3; ++j) {
            CHECK(std::abs(back.frames[k].positions[j].x - seq.frames[k].positions[j].x) < 1e-9);
        }
    }
}

TEST_CASE("bone_lengths") {
    auto topo = testutil::chain_topology(3);
    SUBCASE("axis aligned") {
        PoseFrame f{{{0.5, 0.5}, {0.5, 0.6}, {0.5, 0.6}}, {1, 1, 1}, {}};
        auto l = bone_lengths(f, topo);
        REQUIRE(l.size() == 2);
        CHECK(l[0] == doctest::Approx(0.1).epsilon(1e-14));
        CHECK(l[1] == 0.0);
    }
    SUBCASE("brute-force euclidean oracle") {
        std::mt19937_64 rng(11);
        for (int i = 0; i < 100; ++i) {
            auto f = testutil::random_frame(rng, 3);
            auto l = bone_lengths(f, topo);
            for (std::size_t b = 0; b < 2; ++b) {
                const double dx = f.positions[b + 1].x - f.positions[b].x;
                const double dy = f.positions[b + 1].y - f.positions[b].y;
                CHECK(l[b] == doctest::Approx(std::sqrt(dx * dx + dy * dy)).epsilon(1e-14));
            }
        }
    }
}

TEST_CASE("bone_lengths: renaming joints leaves lengths unchanged") {
    auto topo = SkeletonTopology::default_body();
    std::vector<std::string> renamed;
    for (const auto& n : topo.joints()) renamed.push_back("x_" + n);
    std::vector<std::optional<std::size_t>> parent;
    for (std::size_t j = 0; j < topo.joint_count(); ++j) parent.push_back(topo.parent(j));
    SkeletonTopology other("renamed", renamed, parent, topo.root(), topo.groups());
    std::mt19937_64 rng(5);
    auto f = testutil::random_frame(rng, topo.joint_count());
    CHECK(bone_lengths(f, topo) == bone_lengths(f, other));
}

TEST_CASE("resample_fps") {
    auto topo = testutil::chain_topology(2);
    SUBCASE("25 -> 12.5 decimates to indices 0,2,4") {
        std::mt19937_64 rng(2);
        auto seq = testutil::random_sequence(rng, topo, 5);
        auto out = resample_fps(seq, Fps{25, 2});
        REQUIRE(out.size() == 3);
        CHECK(out.frames[0] == seq.frames[0]);
        CHECK(out.frames[1] == seq.frames[2]);
        CHECK(out.frames[2] == seq.frames[4]);
        CHECK(out.fps == Fps{25, 2});
    }
    SUBCASE("constant sequence stays constant") {
        PoseSequence seq;
        seq.joints = {"j0", "j1"};
        seq.fps = {25, 1};
        PoseFrame f{{{0.3, 0.4}, {0.6, 0.1}}, {0.9, 0.8}, {}};
        for (int i = 0; i < 7; ++i) seq.frames.push_back(f);
        auto out = resample_fps(seq, Fps{60, 1});
        CHECK(out.size() == (6 * 60) / 25 + 1);
        for (const auto& g : out.frames) CHECK(g == f);
    }
    SUBCASE("linear motion upsampled 2x hits midpoints") {
        PoseSequence seq;
        seq.joints = {"j0", "j1"};
        seq.fps = {10, 1};
        for (int i = 0; i < 6; ++i) {
            const double t = i / 10.0;
            seq.frames.push_back({{{0.1 + 0.5 * t, 0.2 - 0.3 * t}, {0.7 * t, 0.05}}, {1.0, 0.5 + 0.05 * i}, {}});
        }
        auto out = resample_fps(seq, Fps{20, 1});
        REQUIRE(out.size() == 11);
        for (std::size_t k = 0; k < out.size(); ++k) {
            const double t = static_cast<double>(k) / 20.0;
            CHECK(std::abs(out.frames[k].positions[0].x - (0.1 + 0.5 * t)) < 1e-9);
            CHECK(std::abs(out.frames[k].positions[0].y - (0.2 - 0.3 * t)) < 1e-9);
            CHECK(std::abs(out.frames[k].positions[1].x - 0.7 * t) < 1e-9);
        }
        // confidence takes the smaller neighbor
        CHECK(out.frames[1].confidence[1] == doctest::Approx(0.5));
    }
    SUBCASE("single frame") {
        PoseSequence seq;
        seq.joints = {"j0", "j1"};
        seq.fps = {25, 1};
        seq.frames.push_back({{{0, 0}, {1, 1}}, {1, 1}, {}});
        CHECK(resample_fps(seq, Fps{50, 1}).size() == 1);
        CHECK_THROWS(resample_fps(seq, Fps{0, 1}));
    }
}

TEST_CASE("Fps::from_double recovers small ratios") {
    CHECK(Fps::from_double(12.5) == Fps{25, 2});
    CHECK(Fps::from_double(25.0) == Fps{25, 1});
    CHECK(Fps::from_double(30000.0 / 1001.0) == Fps{30000, 1001});
    CHECK_THROWS(Fps::from_double(-1.0));
}

TEST_CASE("PoseFrame: background cap and visibility") {
    PoseFrame f{{{0, 0}}, {0.29}, std::vector<Vec2>(21)};
    CHECK_THROWS(f.validate(1));
    f.bg_points.resize(20);
    CHECK_NOTHROW(f.validate(1));
    CHECK_FALSE(f.visible(0));
    f.confidence[0] = 0.3;
    CHECK(f.visible(0));
}
