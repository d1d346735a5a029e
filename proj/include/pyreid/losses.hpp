#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "pyreid/autograd.hpp"
#include "pyreid/batching.hpp"

namespace pyreid {

enum class Task { id, tp };

template <typename T>
struct LossValue {
    Task task = Task::id;
    Var<T> value;             // scalar node; a constant zero when degenerate
    double scalar = 0.0;
    std::size_t count = 0;    // images (id) or valid anchors (tp)
    std::size_t skipped = 0;  // anchors lacking a positive or a negative
    bool degenerate = false;
};

inline double euclidean_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ShapeError("euclidean_distance: length mismatch " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

// Row-major [N x N] distances between the rows of a [N x E] matrix.
template <typename T>
std::vector<double> pairwise_distances(const Tensor<T>& x, bool squared = false) {
    if (x.rank() != 2) throw ShapeError("pairwise_distances: expected rank 2, got " + shape_str(x.shape()));
    const std::size_t N = x.dim(0), E = x.dim(1);
    auto X = x.data();
    std::vector<double> d(N * N, 0.0);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = i + 1; j < N; ++j) {
            double s = 0.0;
            for (std::size_t e = 0; e < E; ++e) {
                const double v = static_cast<double>(X[i * E + e]) - X[j * E + e];
                s += v * v;
            }
            d[i * N + j] = d[j * N + i] = squared ? s : std::sqrt(s);
        }
    return d;
}

// Sum over branches of softmax cross-entropy, averaged over the batch.
template <typename T>
LossValue<T> id_loss(const std::vector<Var<T>>& branch_logits, std::span<const std::size_t> labels) {
    if (branch_logits.empty()) throw ShapeError("id_loss: no branch logits");
    std::vector<Var<T>> per_branch;
    per_branch.reserve(branch_logits.size());
    for (const auto& lg : branch_logits) {
        auto ce = softmax_cross_entropy(lg, labels);
        if (ce.shape().empty()) ce = reshape(ce, Shape{1});
        per_branch.push_back(ce);
    }
    auto total = mean(add_n(per_branch));
    LossValue<T> out;
    out.task = Task::id;
    out.value = total;
    out.scalar = static_cast<double>(total.value()[0]);
    out.count = labels.size();
    return out;
}

// Batch-hard triplet loss: every row is an anchor; valid anchors contribute
// max(0, d(a, hardest positive) - d(a, hardest negative) + margin).
template <typename T>
LossValue<T> triplet_loss(const Var<T>& embeddings, std::span<const std::size_t> labels, double margin,
                          bool squared = false) {
    const auto& s = embeddings.shape();
    if (s.size() != 2) throw ShapeError("triplet_loss: expected [N x E] embeddings, got " + shape_str(s));
    if (s[0] != labels.size()) {
        throw ShapeError("triplet_loss: " + std::to_string(labels.size()) + " labels for embeddings " + shape_str(s));
    }
    if (s[0] < 2) throw ShapeError("triplet_loss: batch needs at least 2 rows, got " + std::to_string(s[0]));
    if (!(margin >= 0.0)) throw ConfigError("triplet_loss: margin must be non-negative", "margin");

    const auto dist = pairwise_distances(embeddings.value(), squared);
    const auto mined = batch_hard_mine(dist, labels, false);
    std::vector<std::size_t> anchors, pos, neg;
    for (std::size_t i = 0; i < mined.size(); ++i) {
        if (mined[i].hardest_positive && mined[i].hardest_negative) {
            anchors.push_back(i);
            pos.push_back(*mined[i].hardest_positive);
            neg.push_back(*mined[i].hardest_negative);
        }
    }
    LossValue<T> out;
    out.task = Task::tp;
    out.count = anchors.size();
    out.skipped = labels.size() - anchors.size();
    auto* g = embeddings.graph();
    if (anchors.empty()) {
        out.degenerate = true;
        out.value = g->constant(Tensor<T>::scalar(T{0}));
        return out;
    }
    auto a = gather_rows(embeddings, anchors);
    auto d_ap = row_distances(a, gather_rows(embeddings, pos), squared);
    auto d_an = row_distances(a, gather_rows(embeddings, neg), squared);
    auto terms = hinge(add_scalar(sub(d_ap, d_an), static_cast<T>(margin)));
    out.value = mean(terms);
    out.scalar = static_cast<double>(out.value.value()[0]);
    return out;
}

} // namespace pyreid
