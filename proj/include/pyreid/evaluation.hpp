#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pyreid/data_synth.hpp"
#include "pyreid/model.hpp"

namespace pyreid {

struct SampleMeta {
    std::size_t identity = 0;
    std::size_t camera = 0;
};

struct RankedResult {
    std::size_t query = 0;
    std::vector<std::size_t> gallery; // ascending distance, junk removed
    std::vector<double> distances;
    std::vector<bool> matches;
};

namespace detail {
template <typename T>
double row_distance(const Tensor<T>& a, std::size_t i, const Tensor<T>& b, std::size_t j) {
    const std::size_t E = a.dim(1);
    double s = 0.0;
    for (std::size_t e = 0; e < E; ++e) {
        const double d = static_cast<double>(a[i * E + e]) - static_cast<double>(b[j * E + e]);
        s += d * d;
    }
    return std::sqrt(s);
}
} // namespace detail

// Ranks the gallery for query row `q`. Gallery entries sharing both identity
// and camera with the query are dropped; ties go to the lower gallery index.
template <typename T>
RankedResult rank_gallery(const Tensor<T>& queries, std::size_t q, const SampleMeta& query_meta,
                          const Tensor<T>& gallery, std::span<const SampleMeta> gallery_meta) {
    if (queries.rank() != 2 || gallery.rank() != 2 || queries.dim(1) != gallery.dim(1)) {
        throw ShapeError("rank_gallery: embedding shapes " + shape_str(queries.shape()) + " and " +
                         shape_str(gallery.shape()) + " are incompatible");
    }
    if (gallery.dim(0) != gallery_meta.size()) {
        throw ShapeError("rank_gallery: " + std::to_string(gallery_meta.size()) + " metadata rows for gallery " +
                         shape_str(gallery.shape()));
    }
    RankedResult r;
    r.query = q;
    std::vector<std::pair<double, std::size_t>> order;
    for (std::size_t j = 0; j < gallery_meta.size(); ++j) {
        const auto& m = gallery_meta[j];
        if (m.identity == query_meta.identity && m.camera == query_meta.camera) continue;
        order.emplace_back(detail::row_distance(queries, q, gallery, j), j);
    }
    if (order.empty()) throw ShapeError("rank_gallery: query " + std::to_string(q) + " has an empty filtered gallery");
    std::sort(order.begin(), order.end());
    for (const auto& [d, j] : order) {
        r.gallery.push_back(j);
        r.distances.push_back(d);
        r.matches.push_back(gallery_meta[j].identity == query_meta.identity);
    }
    return r;
}

template <typename T>
std::vector<RankedResult> rank_all(const Tensor<T>& queries, std::span<const SampleMeta> query_meta,
                                   const Tensor<T>& gallery, std::span<const SampleMeta> gallery_meta) {
    if (queries.dim(0) != query_meta.size()) throw ShapeError("rank_all: query metadata count mismatch");
    std::vector<RankedResult> out;
    out.reserve(query_meta.size());
    for (std::size_t q = 0; q < query_meta.size(); ++q)
        out.push_back(rank_gallery(queries, q, query_meta[q], gallery, gallery_meta));
    return out;
}

namespace detail {
inline std::size_t first_match(const RankedResult& r) {
    const auto it = std::find(r.matches.begin(), r.matches.end(), true);
    if (it == r.matches.end()) throw ShapeError("query " + std::to_string(r.query) + " has no true match");
    return static_cast<std::size_t>(it - r.matches.begin());
}
} // namespace detail

// cmc[r - 1] is the fraction of queries whose first true match is at rank <= r.
inline std::vector<double> compute_cmc(std::span<const RankedResult> results, std::size_t max_rank) {
    if (results.empty()) throw ShapeError("compute_cmc: no queries");
    if (max_rank == 0) throw ConfigError("compute_cmc: max_rank must be positive", "max_rank");
    std::vector<std::size_t> hits(max_rank, 0);
    for (const auto& r : results) {
        const auto pos = detail::first_match(r);
        for (std::size_t k = pos; k < max_rank; ++k) ++hits[k];
    }
    std::vector<double> cmc(max_rank);
    for (std::size_t k = 0; k < max_rank; ++k)
        cmc[k] = static_cast<double>(hits[k]) / static_cast<double>(results.size());
    return cmc;
}

inline double average_precision(const RankedResult& r) {
    detail::first_match(r);
    double sum = 0.0;
    std::size_t found = 0;
    for (std::size_t i = 0; i < r.matches.size(); ++i) {
        if (!r.matches[i]) continue;
        ++found;
        sum += static_cast<double>(found) / static_cast<double>(i + 1);
    }
    return sum / static_cast<double>(found);
}

inline double compute_map(std::span<const RankedResult> results) {
    if (results.empty()) throw ShapeError("compute_map: no queries");
    double s = 0.0;
    for (const auto& r : results) s += average_precision(r);
    return s / static_cast<double>(results.size());
}

struct Metrics {
    double mAP = 0.0;
    double rank1 = 0.0, rank5 = 0.0, rank10 = 0.0;
    std::size_t queries = 0;
};

template <typename T>
void l2_normalize_rows(Tensor<T>& x) {
    const std::size_t N = x.dim(0), E = x.dim(1);
    for (std::size_t i = 0; i < N; ++i) {
        double s = 0.0;
        for (std::size_t e = 0; e < E; ++e) s += static_cast<double>(x[i * E + e]) * x[i * E + e];
        const double n = std::sqrt(s);
        if (n > 0.0)
            for (std::size_t e = 0; e < E; ++e) x[i * E + e] = static_cast<T>(x[i * E + e] / n);
    }
}

template <typename T>
Metrics evaluate_embeddings(Tensor<T> queries, std::span<const SampleMeta> query_meta, Tensor<T> gallery,
                            std::span<const SampleMeta> gallery_meta, bool l2_normalize = false) {
    if (l2_normalize) {
        l2_normalize_rows(queries);
        l2_normalize_rows(gallery);
    }
    const auto results = rank_all(queries, query_meta, gallery, gallery_meta);
    const auto cmc = compute_cmc(results, 10);
    Metrics m;
    m.mAP = compute_map(results);
    m.rank1 = cmc[0];
    m.rank5 = cmc[4];
    m.rank10 = cmc[9];
    m.queries = results.size();
    return m;
}

inline std::vector<SampleMeta> split_meta(const ReIdDataset& ds, Split s) {
    std::vector<SampleMeta> out;
    for (auto i : ds.indices(s)) out.push_back({ds.samples[i].identity, ds.samples[i].camera});
    return out;
}

// Embeds query and gallery with eval-mode batch norm and scores retrieval.
template <typename T>
Metrics evaluate_model(ReIdModel<T>& model, const ReIdDataset& ds, const BranchMask& mask, bool l2_normalize = false) {
    const auto& mc = model.config();
    const auto shape = ds.image_shape();
    if (shape.size() != 3 || shape[0] != mc.backbone.in_channels || shape[1] != mc.image_height ||
        shape[2] != mc.image_width) {
        throw ConfigError("evaluate: dataset images " + shape_str(shape) + " do not match model input [" +
                              std::to_string(mc.backbone.in_channels) + "x" + std::to_string(mc.image_height) + "x" +
                              std::to_string(mc.image_width) + "]",
                          "dataset");
    }
    const auto qm = split_meta(ds, Split::query);
    const auto gm = split_meta(ds, Split::gallery);
    auto q = model.embed(ds.stack(ds.indices(Split::query)).template cast<T>(), mask);
    auto g = model.embed(ds.stack(ds.indices(Split::gallery)).template cast<T>(), mask);
    return evaluate_embeddings(std::move(q), qm, std::move(g), gm, l2_normalize);
}

} // namespace pyreid
