#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pyreid/backbone.hpp"
#include "pyreid/pyramid.hpp"

namespace pyreid {

struct ModelConfig {
    BackboneConfig backbone = BackboneConfig::desk();
    PyramidConfig pyramid;
    std::size_t image_height = 48;
    std::size_t image_width = 16;

    // Feature map (C, H, W); throws ConfigError on indivisible geometry.
    Shape feature_shape() const {
        auto s = backbone.output_shape(image_height, image_width);
        if (s[1] % pyramid.n != 0) {
            throw ConfigError("model: feature height H=" + std::to_string(s[1]) + " is not divisible by n=" +
                                  std::to_string(pyramid.n),
                              "n");
        }
        return s;
    }

    // Canonical text form of everything that fixes parameter shapes.
    std::string geometry() const {
        std::string s = "in=" + std::to_string(backbone.in_channels) + ";stages=";
        for (std::size_t i = 0; i < backbone.stages.size(); ++i) {
            if (i) s += ',';
            s += std::to_string(backbone.stages[i].out_channels) + "/" + std::to_string(backbone.stages[i].stride);
        }
        s += ";image=" + std::to_string(image_height) + "x" + std::to_string(image_width);
        s += ";n=" + std::to_string(pyramid.n) + ";D=" + std::to_string(pyramid.dim);
        s += ";ids=" + std::to_string(pyramid.num_ids) + ";bias=" + (pyramid.classifier_bias ? "1" : "0");
        return s;
    }

    bool operator==(const ModelConfig&) const = default;
};

// Named batch-norm running statistics, for checkpointing.
template <typename T>
struct NamedStats {
    std::string name;
    BatchNormStats<T>* stats;
};

template <typename T>
class ReIdModel {
public:
    ReIdModel(ModelConfig cfg, Rng rng) : cfg_(std::move(cfg)) {
        const auto fs = cfg_.feature_shape();
        backbone_ = Backbone<T>(cfg_.backbone, rng.split("backbone"));
        pyramid_ = Pyramid<T>(cfg_.pyramid, fs[0], fs[1], rng.split("pyramid"));
    }

    ReIdModel(const ReIdModel&) = delete;
    ReIdModel& operator=(const ReIdModel&) = delete;
    ReIdModel(ReIdModel&&) = default;
    ReIdModel& operator=(ReIdModel&&) = default;

    const ModelConfig& config() const noexcept { return cfg_; }
    Backbone<T>& backbone() noexcept { return backbone_; }
    Pyramid<T>& pyramid() noexcept { return pyramid_; }

    PyramidOutput<T> forward(Graph<T>& g, const Var<T>& images, const BranchMask& mask, Mode mode,
                             bool train_params = true) {
        auto map = backbone_.forward(g, images, mode, train_params);
        return pyramid_.forward(g, map, mask, mode, train_params);
    }

    // Every parameter, in a fixed order.
    std::vector<Parameter<T>*> all_parameters() {
        std::vector<Parameter<T>*> ps;
        for (auto& b : backbone_.blocks()) {
            ps.push_back(&b.conv);
            ps.push_back(&b.bn_weight);
            ps.push_back(&b.bn_bias);
        }
        for (auto& br : pyramid_.branches()) {
            ps.push_back(&br.reduce);
            ps.push_back(&br.bn_weight);
            ps.push_back(&br.bn_bias);
            ps.push_back(&br.classifier);
            ps.push_back(&br.classifier_bias);
        }
        return ps;
    }

    // Parameters that receive gradients under `mask`.
    std::vector<Parameter<T>*> trainable_parameters(const BranchMask& mask) {
        std::vector<Parameter<T>*> ps;
        for (auto& b : backbone_.blocks()) {
            ps.push_back(&b.conv);
            ps.push_back(&b.bn_weight);
            ps.push_back(&b.bn_bias);
        }
        const auto& specs = pyramid_.specs();
        auto& brs = pyramid_.branches();
        for (std::size_t i = 0; i < specs.size(); ++i) {
            if (!mask.enabled(specs[i].level)) continue;
            ps.push_back(&brs[i].reduce);
            ps.push_back(&brs[i].bn_weight);
            ps.push_back(&brs[i].bn_bias);
            ps.push_back(&brs[i].classifier);
            if (cfg_.pyramid.classifier_bias) ps.push_back(&brs[i].classifier_bias);
        }
        return ps;
    }

    std::vector<NamedStats<T>> batch_norm_stats() {
        std::vector<NamedStats<T>> out;
        for (std::size_t i = 0; i < backbone_.blocks().size(); ++i)
            out.push_back({"backbone.block" + std::to_string(i) + ".bn", &backbone_.blocks()[i].stats});
        const auto& specs = pyramid_.specs();
        for (std::size_t i = 0; i < specs.size(); ++i)
            out.push_back({"pyramid.l" + std::to_string(specs[i].level) + "k" + std::to_string(specs[i].position) +
                               ".bn",
                           &pyramid_.branches()[i].stats});
        return out;
    }

    // Eval-mode embeddings for a stack of images [N x C x H x W] -> [N x E].
    Tensor<T> embed(const Tensor<T>& images, const BranchMask& mask, std::size_t batch = 64) {
        const auto& s = images.shape();
        if (s.size() != 4) throw ShapeError("embed: expected [N x C x H x W] images, got " + shape_str(s));
        const std::size_t N = s[0], per = images.size() / N;
        std::vector<T> out;
        std::size_t E = 0;
        for (std::size_t start = 0; start < N; start += batch) {
            const std::size_t cnt = std::min(batch, N - start);
            std::vector<T> chunk(images.data().begin() + static_cast<std::ptrdiff_t>(start * per),
                                 images.data().begin() + static_cast<std::ptrdiff_t>((start + cnt) * per));
            Graph<T> g;
            auto x = g.constant(Tensor<T>(Shape{cnt, s[1], s[2], s[3]}, std::move(chunk)));
            auto r = forward(g, x, mask, Mode::eval, false);
            E = r.embedding.shape()[1];
            const auto& v = r.embedding.value().data();
            out.insert(out.end(), v.begin(), v.end());
        }
        return Tensor<T>(Shape{N, E}, std::move(out));
    }

private:
    ModelConfig cfg_;
    Backbone<T> backbone_;
    Pyramid<T> pyramid_;
};

} // namespace pyreid
