#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "pyreid/autograd.hpp"
#include "pyreid/rng.hpp"

namespace pyreid {

struct StageSpec {
    std::size_t out_channels = 0;
    std::size_t stride = 1;

    bool operator==(const StageSpec&) const = default;
};

// Stack of conv3x3(pad 1) -> batch-norm -> ReLU blocks. Zero stages is the
// identity backbone: inputs are taken to be precomputed feature maps.
struct BackboneConfig {
    std::size_t in_channels = 3;
    std::vector<StageSpec> stages;

    static BackboneConfig desk() { return {3, {{16, 2}, {32, 2}, {64, 1}}}; }
    static BackboneConfig identity(std::size_t channels) { return {channels, {}}; }

    std::size_t out_channels() const { return stages.empty() ? in_channels : stages.back().out_channels; }

    std::size_t total_stride() const {
        std::size_t s = 1;
        for (const auto& st : stages) s *= st.stride;
        return s;
    }

    void validate() const {
        if (in_channels == 0) throw ConfigError("backbone: in_channels must be positive", "in_channels");
        for (std::size_t i = 0; i < stages.size(); ++i) {
            if (stages[i].stride != 1 && stages[i].stride != 2) {
                throw ConfigError("backbone: stage " + std::to_string(i) + " stride " +
                                      std::to_string(stages[i].stride) + " not in {1, 2}",
                                  "backbone");
            }
            if (stages[i].out_channels == 0) {
                throw ConfigError("backbone: stage " + std::to_string(i) + " has zero channels", "backbone");
            }
        }
    }

    // Feature map extent (C, H, W) for an input of the given size.
    Shape output_shape(std::size_t height, std::size_t width) const {
        validate();
        const std::size_t s = total_stride();
        if (height % s != 0 || width % s != 0) {
            throw ConfigError("backbone: input " + std::to_string(height) + "x" + std::to_string(width) +
                                  " not divisible by total stride " + std::to_string(s),
                              "backbone");
        }
        return {out_channels(), height / s, width / s};
    }

    bool operator==(const BackboneConfig&) const = default;
};

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape), T{0});
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
}

template <typename T>
class Backbone {
public:
    struct Block {
        Parameter<T> conv;
        Parameter<T> bn_weight;
        Parameter<T> bn_bias;
        BatchNormStats<T> stats;
        std::size_t stride;
    };

    Backbone() = default;

    Backbone(BackboneConfig cfg, Rng rng) : cfg_(std::move(cfg)) {
        cfg_.validate();
        std::size_t in = cfg_.in_channels;
        for (std::size_t i = 0; i < cfg_.stages.size(); ++i) {
            const auto& st = cfg_.stages[i];
            const std::string prefix = "backbone.block" + std::to_string(i);
            auto init = rng.split(prefix);
            Block b{
                Parameter<T>(prefix + ".conv.weight", fan_in_uniform<T>({st.out_channels, in, 3, 3}, in * 9, init)),
                Parameter<T>(prefix + ".bn.weight", Tensor<T>(Shape{st.out_channels}, T{1}), false),
                Parameter<T>(prefix + ".bn.bias", Tensor<T>(Shape{st.out_channels}, T{0}), false),
                BatchNormStats<T>(st.out_channels),
                st.stride,
            };
            blocks_.push_back(std::move(b));
            in = st.out_channels;
        }
    }

    const BackboneConfig& config() const noexcept { return cfg_; }
    std::vector<Block>& blocks() noexcept { return blocks_; }
    const std::vector<Block>& blocks() const noexcept { return blocks_; }

    // images [N x C_in x H x W] -> feature maps [N x C x H/s x W/s]
    Var<T> forward(Graph<T>& g, const Var<T>& images, Mode mode, bool train_params = true) {
        const auto& s = images.shape();
        if (s.size() != 4 || s[1] != cfg_.in_channels) {
            throw ShapeError("backbone_forward: expected [N x " + std::to_string(cfg_.in_channels) +
                             " x H x W] input, got " + shape_str(s));
        }
        Var<T> x = images;
        for (auto& b : blocks_) {
            auto w = g.parameter(b.conv, train_params);
            auto gm = g.parameter(b.bn_weight, train_params);
            auto bt = g.parameter(b.bn_bias, train_params);
            x = conv2d(x, w, Conv2dOptions{b.stride, 1});
            x = batch_norm(x, gm, bt, &b.stats, mode);
            x = relu(x);
        }
        return x;
    }

private:
    BackboneConfig cfg_;
    std::vector<Block> blocks_;
};

} // namespace pyreid
