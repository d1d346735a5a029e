#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pyreid/errors.hpp"
#include "pyreid/rng.hpp"

namespace pyreid {

enum class SamplingStrategy { random, id_balanced };

struct MiniBatch {
    std::vector<std::size_t> indices; // positions in the sampled split
    std::vector<std::size_t> labels;
    std::vector<std::size_t> cameras;
    SamplingStrategy strategy = SamplingStrategy::random;
    bool partial = false; // short final batch of a random epoch

    std::size_t size() const noexcept { return indices.size(); }
};

// Labels and cameras of a split; image i is position i.
struct LabeledSplit {
    std::vector<std::size_t> labels;
    std::vector<std::size_t> cameras;

    std::size_t size() const noexcept { return labels.size(); }
};

namespace detail {
inline MiniBatch make_batch(const LabeledSplit& split, std::vector<std::size_t> idx, SamplingStrategy s) {
    MiniBatch b;
    b.strategy = s;
    for (auto i : idx) {
        b.labels.push_back(split.labels[i]);
        b.cameras.push_back(split.cameras.empty() ? 0 : split.cameras[i]);
    }
    b.indices = std::move(idx);
    return b;
}
} // namespace detail

// Uniform sampling: epoch e is a seeded permutation of the split cut into
// consecutive batches; the last one may be short.
class RandomSampler {
public:
    RandomSampler(LabeledSplit split, std::size_t batch_size, std::uint64_t seed)
        : split_(std::move(split)), batch_size_(batch_size), rng_(Rng(seed).split("random-batches")) {
        if (batch_size_ == 0) throw ConfigError("random sampler: batch size must be positive", "batch_size");
        if (split_.size() == 0) throw ConfigError("random sampler: empty split", "dataset");
    }

    std::size_t batches_per_epoch() const { return (split_.size() + batch_size_ - 1) / batch_size_; }

    std::vector<MiniBatch> epoch(std::size_t e) const {
        std::vector<std::size_t> perm(split_.size());
        for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
        auto r = rng_.split("epoch", e);
        r.shuffle(std::span<std::size_t>(perm));
        std::vector<MiniBatch> out;
        for (std::size_t start = 0; start < perm.size(); start += batch_size_) {
            const std::size_t end = std::min(perm.size(), start + batch_size_);
            auto b = detail::make_batch(split_, {perm.begin() + static_cast<std::ptrdiff_t>(start),
                                                 perm.begin() + static_cast<std::ptrdiff_t>(end)},
                                        SamplingStrategy::random);
            b.partial = end - start < batch_size_;
            out.push_back(std::move(b));
        }
        return out;
    }

    // The b-th batch of epoch e.
    MiniBatch batch(std::size_t e, std::size_t b) const { return epoch(e).at(b); }

private:
    LabeledSplit split_;
    std::size_t batch_size_;
    Rng rng_;
};

// ID-balanced sampling: P identities, K images each, drawn i.i.d. per batch.
// Without replacement, identities with fewer than K images are never used.
class PkSampler {
public:
    PkSampler(LabeledSplit split, std::size_t P, std::size_t K, std::uint64_t seed, bool with_replacement = false)
        : split_(std::move(split)), P_(P), K_(K), with_replacement_(with_replacement),
          rng_(Rng(seed).split("pk-batches")) {
        if (P_ == 0 || K_ == 0) throw ConfigError("pk sampler: P and K must be positive", "P");
        std::map<std::size_t, std::vector<std::size_t>> by_id;
        for (std::size_t i = 0; i < split_.size(); ++i) by_id[split_.labels[i]].push_back(i);
        for (auto& [id, imgs] : by_id) {
            if (with_replacement_ || imgs.size() >= K_) {
                eligible_ids_.push_back(id);
                eligible_images_ += imgs.size();
                images_.push_back(std::move(imgs));
            }
        }
        if (eligible_ids_.size() < P_) {
            throw ConfigError("pk sampler: need P=" + std::to_string(P_) + " identities with >= K=" +
                                  std::to_string(K_) + " images, only " + std::to_string(eligible_ids_.size()) +
                                  " of " + std::to_string(by_id.size()) + " qualify",
                              "P");
        }
    }

    const std::vector<std::size_t>& eligible_ids() const noexcept { return eligible_ids_; }

    // Batches per nominal epoch: ceil(eligible images / (P K)).
    std::size_t epoch_length() const { return (eligible_images_ + P_ * K_ - 1) / (P_ * K_); }

    MiniBatch batch(std::size_t draw) const {
        auto r = rng_.split("draw", draw);
        std::vector<std::size_t> ids(eligible_ids_.size());
        for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
        r.shuffle(std::span<std::size_t>(ids));
        std::vector<std::size_t> idx;
        idx.reserve(P_ * K_);
        for (std::size_t p = 0; p < P_; ++p) {
            const auto& imgs = images_[ids[p]];
            if (imgs.size() >= K_) {
                std::vector<std::size_t> pool = imgs;
                r.shuffle(std::span<std::size_t>(pool));
                idx.insert(idx.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(K_));
            } else {
                for (std::size_t k = 0; k < K_; ++k) idx.push_back(imgs[r.below(imgs.size())]);
            }
        }
        return detail::make_batch(split_, std::move(idx), SamplingStrategy::id_balanced);
    }

private:
    LabeledSplit split_;
    std::size_t P_, K_;
    bool with_replacement_;
    Rng rng_;
    std::vector<std::size_t> eligible_ids_;
    std::vector<std::vector<std::size_t>> images_;
    std::size_t eligible_images_ = 0;
};

struct MinedPair {
    std::optional<std::size_t> hardest_positive;
    std::optional<std::size_t> hardest_negative;
};

#ifdef NDEBUG
inline constexpr bool kValidateByDefault = false;
#else
inline constexpr bool kValidateByDefault = true;
#endif

// For every anchor: the farthest same-label sample and the nearest
// different-label sample. Ties go to the smallest index.
inline std::vector<MinedPair> batch_hard_mine(std::span<const double> dist, std::span<const std::size_t> labels,
                                              bool validate = kValidateByDefault) {
    const std::size_t n = labels.size();
    if (dist.size() != n * n) {
        throw ShapeError("batch_hard_mine: distance matrix has " + std::to_string(dist.size()) + " entries for " +
                         std::to_string(n) + " labels");
    }
    if (validate) {
        for (std::size_t i = 0; i < n; ++i) {
            if (dist[i * n + i] != 0.0) throw ShapeError("batch_hard_mine: nonzero diagonal at " + std::to_string(i));
            for (std::size_t j = 0; j < n; ++j) {
                if (dist[i * n + j] < 0.0 || std::isnan(dist[i * n + j])) {
                    throw ShapeError("batch_hard_mine: invalid distance at (" + std::to_string(i) + "," +
                                     std::to_string(j) + ")");
                }
                if (dist[i * n + j] != dist[j * n + i]) {
                    throw ShapeError("batch_hard_mine: matrix not symmetric at (" + std::to_string(i) + "," +
                                     std::to_string(j) + ")");
                }
            }
        }
    }
    std::vector<MinedPair> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double d = dist[i * n + j];
            if (labels[j] == labels[i]) {
                if (j == i) continue;
                auto& p = out[i].hardest_positive;
                if (!p || d > dist[i * n + *p]) p = j;
            } else {
                auto& q = out[i].hardest_negative;
                if (!q || d < dist[i * n + *q]) q = j;
            }
        }
    }
    return out;
}

} // namespace pyreid
