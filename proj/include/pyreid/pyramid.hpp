#pragma once

// Coarse-to-fine pyramid over horizontal parts of a feature map.
//
// The map's height H is cut into n basic parts. Level l (1..n) holds the
// n - l + 1 windows of l consecutive parts at every start position k, so the
// pyramid has n(n+1)/2 branches; level 1 is the plain part split and level n
// is the whole map. Each branch pools its window (max + mean), reduces the
// channels to D, and feeds its own identity classifier.

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pyreid/autograd.hpp"
#include "pyreid/backbone.hpp"
#include "pyreid/rng.hpp"

namespace pyreid {

struct BranchSpec {
    std::size_t level = 0;     // l, 1-based
    std::size_t position = 0;  // k, 1-based
    std::size_t row_begin = 0; // st, 1-based inclusive
    std::size_t row_end = 0;   // ed, 1-based inclusive

    std::size_t rows() const { return row_end - row_begin + 1; }
    bool operator==(const BranchSpec&) const = default;
};

inline std::size_t branch_count(std::size_t n) { return n * (n + 1) / 2; }

// Level-major, position-minor. This order is the serialization contract for
// embeddings, masks and checkpoints.
inline std::vector<BranchSpec> enumerate_branches(std::size_t n, std::size_t height) {
    if (n == 0) throw ConfigError("pyramid: n must be positive", "n");
    if (height == 0 || height % n != 0) {
        throw ConfigError("pyramid: feature height H=" + std::to_string(height) + " is not divisible by n=" +
                              std::to_string(n),
                          "n");
    }
    const std::size_t part = height / n;
    std::vector<BranchSpec> specs;
    specs.reserve(branch_count(n));
    for (std::size_t l = 1; l <= n; ++l)
        for (std::size_t k = 1; k <= n - l + 1; ++k)
            specs.push_back({l, k, (k - 1) * part + 1, (k - 1) * part + l * part});
    return specs;
}

// Per-level on/off flags; character i of the text form is level i + 1.
class BranchMask {
public:
    BranchMask() = default;

    static BranchMask all(std::size_t n) { return BranchMask(std::vector<bool>(n, true)); }

    static BranchMask parse(std::string_view text) {
        std::vector<bool> levels;
        for (char c : text) {
            if (c != '0' && c != '1') {
                throw ConfigError("pyramid mask '" + std::string(text) + "' must contain only '0'/'1'", "mask");
            }
            levels.push_back(c == '1');
        }
        return BranchMask(std::move(levels));
    }

    explicit BranchMask(std::vector<bool> levels) : levels_(std::move(levels)) {
        if (levels_.empty()) throw ConfigError("pyramid mask is empty", "mask");
        bool any = false;
        for (bool b : levels_) any = any || b;
        if (!any) throw ConfigError("pyramid mask '" + to_string() + "' disables every level", "mask");
    }

    std::size_t levels() const noexcept { return levels_.size(); }
    bool enabled(std::size_t level) const { return levels_.at(level - 1); }

    std::size_t enabled_branches() const {
        const std::size_t n = levels_.size();
        std::size_t c = 0;
        for (std::size_t l = 1; l <= n; ++l)
            if (enabled(l)) c += n - l + 1;
        return c;
    }

    std::string to_string() const {
        std::string s;
        for (bool b : levels_) s.push_back(b ? '1' : '0');
        return s;
    }

    bool operator==(const BranchMask&) const = default;

private:
    std::vector<bool> levels_;
};

// Rows st..ed of every channel and column. Accepts [C x H x W] or [N x C x H x W].
template <typename T>
Var<T> slice_branch(const Var<T>& map, const BranchSpec& spec) {
    const auto& s = map.shape();
    if (s.size() < 3) throw ShapeError("slice_branch: expected a feature map, got " + shape_str(s));
    if (spec.row_begin == 0 || spec.row_end < spec.row_begin || spec.row_end > s[s.size() - 2]) {
        throw ShapeError("slice_branch: rows " + std::to_string(spec.row_begin) + ".." +
                         std::to_string(spec.row_end) + " outside map " + shape_str(s));
    }
    return slice_rows(map, spec.row_begin - 1, spec.row_end);
}

template <typename T>
struct BranchParams {
    Parameter<T> reduce;     // [C x D], 1x1 conv applied to the pooled vector
    Parameter<T> bn_weight;  // [D]
    Parameter<T> bn_bias;    // [D]
    BatchNormStats<T> stats;
    Parameter<T> classifier; // [D x num_ids]
    Parameter<T> classifier_bias; // [num_ids], used only when enabled

    BranchParams() = default;
    BranchParams(const std::string& prefix, std::size_t channels, std::size_t dim, std::size_t num_ids, Rng rng)
        : reduce(prefix + ".reduce.weight", fan_in_uniform<T>({channels, dim}, channels, rng)),
          bn_weight(prefix + ".bn.weight", Tensor<T>(Shape{dim}, T{1}), false),
          bn_bias(prefix + ".bn.bias", Tensor<T>(Shape{dim}, T{0}), false),
          stats(dim),
          classifier(prefix + ".classifier.weight", fan_in_uniform<T>({dim, num_ids}, dim, rng)),
          classifier_bias(prefix + ".classifier.bias", Tensor<T>(Shape{num_ids}, T{0})) {}
};

template <typename T>
struct BranchOutput {
    Var<T> feature; // [N x D]
    Var<T> logits;  // [N x num_ids]
};

// feature = ReLU(BN(reduce(GMP(sub) + GAP(sub)))), logits = feature * classifier.
template <typename T>
BranchOutput<T> branch_forward(Graph<T>& g, const Var<T>& sub, BranchParams<T>& p, Mode mode,
                               bool classifier_bias = false, bool train_params = true) {
    Var<T> x = sub;
    if (x.shape().size() == 3) {
        const auto& s = x.shape();
        x = reshape(x, Shape{1, s[0], s[1], s[2]});
    }
    const std::size_t channels = p.reduce.value.shape()[0];
    if (x.shape().size() != 4 || x.shape()[1] != channels) {
        throw ShapeError("branch_forward: sub-map " + shape_str(sub.shape()) + " does not have " +
                         std::to_string(channels) + " channels");
    }
    auto pooled = add(global_max_pool(x), global_avg_pool(x));
    auto reduced = matmul(pooled, g.parameter(p.reduce, train_params));
    auto normed = batch_norm(reduced, g.parameter(p.bn_weight, train_params), g.parameter(p.bn_bias, train_params),
                             &p.stats, mode);
    auto feature = relu(normed);
    auto logits = matmul(feature, g.parameter(p.classifier, train_params));
    if (classifier_bias) logits = add_rowwise(logits, g.parameter(p.classifier_bias, train_params));
    return {feature, logits};
}

template <typename T>
struct BranchFeature {
    BranchSpec spec;
    Var<T> feature; // may be unset for branches on disabled levels
};

// Concatenates the features of enabled levels, in enumeration order, along
// the feature axis.
template <typename T>
Var<T> assemble_embedding(std::span<const BranchFeature<T>> features, const BranchMask& mask) {
    const std::size_t n = mask.levels();
    if (features.size() != branch_count(n)) {
        throw ShapeError("assemble_embedding: " + std::to_string(features.size()) + " branch features for n=" +
                         std::to_string(n) + " (expected " + std::to_string(branch_count(n)) + ")");
    }
    std::vector<Var<T>> parts;
    std::size_t idx = 0;
    for (std::size_t l = 1; l <= n; ++l)
        for (std::size_t k = 1; k <= n - l + 1; ++k, ++idx) {
            const auto& f = features[idx];
            if (f.spec.level != l || f.spec.position != k) {
                throw ShapeError("assemble_embedding: entry " + std::to_string(idx) + " is branch (" +
                                 std::to_string(f.spec.level) + "," + std::to_string(f.spec.position) +
                                 "), expected (" + std::to_string(l) + "," + std::to_string(k) + ")");
            }
            if (!mask.enabled(l)) continue;
            if (!f.feature.valid()) {
                throw ShapeError("assemble_embedding: missing feature for enabled branch (" + std::to_string(l) +
                                 "," + std::to_string(k) + ")");
            }
            parts.push_back(f.feature);
        }
    const std::size_t axis = parts.front().shape().size() - 1;
    return concat(parts, axis);
}

struct PyramidConfig {
    std::size_t n = 6;
    std::size_t dim = 128;
    std::size_t num_ids = 0;
    bool classifier_bias = false;

    bool operator==(const PyramidConfig&) const = default;
};

template <typename T>
struct PyramidOutput {
    Var<T> embedding;                  // [N x D * enabled branches]
    std::vector<BranchSpec> specs;     // enabled branches, enumeration order
    std::vector<Var<T>> logits;        // one per enabled branch
    std::vector<BranchFeature<T>> features; // full pyramid, disabled entries unset
};

template <typename T>
class Pyramid {
public:
    Pyramid() = default;

    Pyramid(PyramidConfig cfg, std::size_t channels, std::size_t height, Rng rng)
        : cfg_(cfg), channels_(channels), height_(height), specs_(enumerate_branches(cfg.n, height)) {
        if (cfg_.dim == 0) throw ConfigError("pyramid: feature dimension must be positive", "feature_dim");
        if (cfg_.num_ids < 2) throw ConfigError("pyramid: need at least two identities", "num_ids");
        branches_.reserve(specs_.size());
        for (const auto& s : specs_) {
            const std::string prefix = "pyramid.l" + std::to_string(s.level) + "k" + std::to_string(s.position);
            branches_.emplace_back(prefix, channels, cfg_.dim, cfg_.num_ids, rng.split(prefix));
        }
    }

    const PyramidConfig& config() const noexcept { return cfg_; }
    const std::vector<BranchSpec>& specs() const noexcept { return specs_; }
    std::vector<BranchParams<T>>& branches() noexcept { return branches_; }
    const std::vector<BranchParams<T>>& branches() const noexcept { return branches_; }

    PyramidOutput<T> forward(Graph<T>& g, const Var<T>& map, const BranchMask& mask, Mode mode,
                             bool train_params = true) {
        if (mask.levels() != cfg_.n) {
            throw ConfigError("pyramid mask '" + mask.to_string() + "' has " + std::to_string(mask.levels()) +
                                  " levels, model has n=" + std::to_string(cfg_.n),
                              "mask");
        }
        const auto& s = map.shape();
        if (s.size() != 4 || s[1] != channels_ || s[2] != height_) {
            throw ShapeError("pyramid: feature map " + shape_str(s) + " does not match C=" +
                             std::to_string(channels_) + ", H=" + std::to_string(height_));
        }
        PyramidOutput<T> out;
        for (std::size_t i = 0; i < specs_.size(); ++i) {
            out.features.push_back({specs_[i], Var<T>{}});
            if (!mask.enabled(specs_[i].level)) continue;
            auto sub = slice_branch(map, specs_[i]);
            auto r = branch_forward(g, sub, branches_[i], mode, cfg_.classifier_bias, train_params);
            out.features.back().feature = r.feature;
            out.specs.push_back(specs_[i]);
            out.logits.push_back(r.logits);
        }
        out.embedding = assemble_embedding<T>(out.features, mask);
        return out;
    }

private:
    PyramidConfig cfg_;
    std::size_t channels_ = 0;
    std::size_t height_ = 0;
    std::vector<BranchSpec> specs_;
    std::vector<BranchParams<T>> branches_;
};

} // namespace pyreid
