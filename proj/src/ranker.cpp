#include "motionkit/ranker.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "motionkit/autograd.hpp"
#include "motionkit/motion_core.hpp"

using nlohmann::json;

namespace motionkit {

std::vector<std::pair<std::size_t, std::size_t>> margin_rank_pairs(const std::vector<int>& ranks) {
    const auto n = static_cast<int>(ranks.size());
    std::vector<std::size_t> by_rank(ranks.size());
    std::vector<bool> seen(ranks.size(), false);
    for (std::size_t i = 0; i < ranks.size(); ++i) {
        const int r = ranks[i];
        if (r < 1 || r > n) throw std::invalid_argument("rank " + std::to_string(r) + " outside 1.." + std::to_string(n));
        if (seen[static_cast<std::size_t>(r - 1)]) throw std::invalid_argument("duplicate rank " + std::to_string(r));
        seen[static_cast<std::size_t>(r - 1)] = true;
        by_rank[static_cast<std::size_t>(r - 1)] = i;
    }
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (int a = 1; a <= n; ++a)
        for (int b = a + 2; b <= n; ++b)
            out.emplace_back(by_rank[static_cast<std::size_t>(a - 1)], by_rank[static_cast<std::size_t>(b - 1)]);
    return out;
}

double margin_ranking_loss(double s1, double s2, double y, double margin) {
    return std::max(0.0, -y * (s1 - s2) + margin);
}

std::vector<RankPair> parse_rank_pairs(const std::string& text) {
    std::vector<RankPair> out;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const json j = json::parse(line);
            if (j.contains("features")) {
                const auto feats = j.at("features").get<std::vector<std::vector<double>>>();
                const auto ranks = j.at("ranks").get<std::vector<int>>();
                if (feats.size() != ranks.size()) throw ParseError("features and ranks differ in length");
                for (auto [lo, hi] : margin_rank_pairs(ranks)) out.push_back({feats[hi], feats[lo], lineno});
            } else {
                auto a = j.at("a").get<std::vector<double>>();
                auto b = j.at("b").get<std::vector<double>>();
                const int y = j.at("y").get<int>();
                if (y != 1 && y != -1) throw ParseError("y must be 1 or -1");
                if (y == 1) out.push_back({std::move(a), std::move(b), lineno});
                else out.push_back({std::move(b), std::move(a), lineno});
            }
        } catch (const json::exception& e) {
            throw ParseError("pairs line " + std::to_string(lineno) + ": " + e.what());
        } catch (const std::invalid_argument& e) {
            throw ParseError("pairs line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

std::vector<RankPair> load_rank_pairs(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_rank_pairs(ss.str());
}

Ranker Ranker::init(std::size_t features, std::size_t hidden, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Ranker m;
    m.w1 = Tensor({features, hidden});
    m.b1 = Tensor({hidden});
    m.w2 = Tensor({hidden, 1});
    m.b2 = Tensor({1});
    std::normal_distribution<double> n1(0.0, 1.0 / std::sqrt(static_cast<double>(features)));
    std::normal_distribution<double> n2(0.0, 1.0 / std::sqrt(static_cast<double>(hidden)));
    for (auto& v : m.w1.data()) v = n1(rng);
    for (auto& v : m.w2.data()) v = n2(rng);
    return m;
}

double Ranker::logit(const std::vector<double>& x) const {
    if (x.size() != features()) throw ShapeError("ranker expects " + std::to_string(features()) + " features");
    const std::size_t h = w1.dim(1);
    double out = b2[0];
    for (std::size_t k = 0; k < h; ++k) {
        double a = b1[k];
        for (std::size_t i = 0; i < x.size(); ++i) a += x[i] * w1[i * h + k];
        out += std::tanh(a) * w2[k];
    }
    return out;
}

double Ranker::score(const std::vector<double>& x) const { return 1.0 / (1.0 + std::exp(-logit(x))); }

void Ranker::save(const std::string& dir) const {
    std::filesystem::create_directories(dir);
    save_pgt(w1, dir + "/w1.pgt");
    save_pgt(b1, dir + "/b1.pgt");
    save_pgt(w2, dir + "/w2.pgt");
    save_pgt(b2, dir + "/b2.pgt");
    std::ofstream(dir + "/manifest.json") << json{{"kind", "clarity_ranker"}, {"features", features()}, {"hidden", w1.dim(1)}}.dump(2) << "\n";
}

Ranker Ranker::load(const std::string& dir) {
    Ranker m;
    m.w1 = load_pgt(dir + "/w1.pgt");
    m.b1 = load_pgt(dir + "/b1.pgt");
    m.w2 = load_pgt(dir + "/w2.pgt");
    m.b2 = load_pgt(dir + "/b2.pgt");
    if (m.w1.rank() != 2 || m.b1.size() != m.w1.dim(1) || m.w2.shape() != Shape{m.w1.dim(1), 1} || m.b2.size() != 1) {
        throw ShapeError("inconsistent ranker checkpoint in " + dir);
    }
    return m;
}

double pairwise_accuracy(const Ranker& model, const std::vector<RankPair>& pairs) {
    if (pairs.empty()) return 0.0;
    std::size_t ok = 0;
    for (const auto& p : pairs) ok += model.logit(p.better) > model.logit(p.worse);
    return static_cast<double>(ok) / static_cast<double>(pairs.size());
}

RankerResult train_ranker(const std::vector<RankPair>& pairs, const RankerConfig& cfg) {
    if (pairs.empty()) throw std::invalid_argument("no ranking pairs to train on");
    const std::size_t d = pairs.front().better.size();
    for (const auto& p : pairs) {
        if (p.better.size() != d || p.worse.size() != d) throw ShapeError("ranking pairs differ in feature dimension");
    }
    if (cfg.batch == 0 || cfg.hidden == 0) throw std::invalid_argument("batch and hidden size must be positive");

    std::mt19937_64 rng(cfg.seed);
    // split by group, 9:1 by default
    std::vector<std::size_t> groups;
    for (const auto& p : pairs) groups.push_back(p.group);
    std::sort(groups.begin(), groups.end());
    groups.erase(std::unique(groups.begin(), groups.end()), groups.end());
    std::shuffle(groups.begin(), groups.end(), rng);
    const auto n_hold = static_cast<std::size_t>(std::floor(cfg.holdout * static_cast<double>(groups.size())));
    const std::set<std::size_t> held(groups.begin(), groups.begin() + static_cast<std::ptrdiff_t>(n_hold));
    std::vector<RankPair> train, test;
    for (const auto& p : pairs) (held.count(p.group) ? test : train).push_back(p);
    if (train.empty()) throw std::invalid_argument("held-out split left no training pairs");

    RankerResult res;
    res.model = Ranker::init(d, cfg.hidden, rng());
    Ranker& m = res.model;
    AdamState adam;
    std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);
    const std::size_t bsz = std::min(cfg.batch, train.size());
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        Tensor xa({bsz, d}), xb({bsz, d});
        for (std::size_t r = 0; r < bsz; ++r) {
            const auto& p = train[pick(rng)];
            std::copy(p.better.begin(), p.better.end(), xa.data().begin() + static_cast<std::ptrdiff_t>(r * d));
            std::copy(p.worse.begin(), p.worse.end(), xb.data().begin() + static_cast<std::ptrdiff_t>(r * d));
        }
        Tape tape;
        Var w1 = tape.param(m.w1), b1 = tape.param(m.b1), w2 = tape.param(m.w2), b2 = tape.param(m.b2);
        auto net = [&](Var x) { return ad::linear(ad::tanh(ad::linear(x, w1, b1)), w2, b2); };
        // y = +1 throughout: better should win by the margin
        Var diff = ad::sub(net(tape.constant(xa)), net(tape.constant(xb)));
        Var loss = ad::mean(ad::relu(ad::add_scalar(ad::scale(diff, -1.0), cfg.margin)));
        tape.backward(loss);
        res.loss_history.push_back(loss.value()[0]);
        std::vector<Tensor*> params{&m.w1, &m.b1, &m.w2, &m.b2};
        std::vector<Tensor> grads{tape.grad(w1), tape.grad(b1), tape.grad(w2), tape.grad(b2)};
        optimizer_step(params, grads, adam, cfg.lr);
    }
    res.train_pairs = train.size();
    res.heldout_pairs = test.size();
    res.train_accuracy = pairwise_accuracy(m, train);
    res.heldout_accuracy = pairwise_accuracy(m, test);
    return res;
}

}  // namespace motionkit
