#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "motionkit/tensor.hpp"

namespace motionkit {

// All (i, j), 0-based item indices, with rank(i) + 2 <= rank(j); ordered by
// rank(i) then rank(j). ranks must be a permutation of 1..n.
std::vector<std::pair<std::size_t, std::size_t>> margin_rank_pairs(const std::vector<int>& ranks);

// max(0, -y (s1 - s2) + margin)
double margin_ranking_loss(double s1, double s2, double y, double margin);

// One comparison: `better` should score above `worse`. group ties pairs that
// came from the same annotated set so the held-out split keeps sets whole.
struct RankPair {
    std::vector<double> better;
    std::vector<double> worse;
    std::size_t group = 0;
};

// Lines of {"a": [...], "b": [...], "y": 1|-1} (y = 1 means a is better) or
// {"features": [[...] x n], "ranks": [...]} expanded through margin_rank_pairs,
// where a higher rank means clearer.
std::vector<RankPair> parse_rank_pairs(const std::string& text);
std::vector<RankPair> load_rank_pairs(const std::string& path);

struct RankerConfig {
    std::size_t hidden = 32;
    double margin = 1.0;
    std::size_t steps = 2000;
    std::size_t batch = 32;
    double lr = 1e-2;
    double holdout = 0.1;
    std::uint64_t seed = 0;
};

// 1 hidden layer MLP, tanh activation. logit() feeds the margin loss;
// score() = sigmoid(logit).
struct Ranker {
    Tensor w1, b1, w2, b2;

    static Ranker init(std::size_t features, std::size_t hidden, std::uint64_t seed);
    std::size_t features() const { return w1.dim(0); }
    double logit(const std::vector<double>& x) const;
    double score(const std::vector<double>& x) const;

    void save(const std::string& dir) const;
    static Ranker load(const std::string& dir);
};

struct RankerResult {
    Ranker model;
    double train_accuracy = 0;
    double heldout_accuracy = 0;
    std::size_t train_pairs = 0;
    std::size_t heldout_pairs = 0;
    std::vector<double> loss_history;
};

double pairwise_accuracy(const Ranker& model, const std::vector<RankPair>& pairs);
RankerResult train_ranker(const std::vector<RankPair>& pairs, const RankerConfig& cfg);

}  // namespace motionkit
