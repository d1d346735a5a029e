#include <cmath>

#include "catch_amalgamated.hpp"
#include "support/gradcases.hpp"

using namespace pyreid;
using Catch::Approx;
using gradcases::random_tensor;

namespace {

double id_value(const std::vector<Tensor<double>>& logits, std::vector<std::size_t> labels) {
    Graph<double> g;
    std::vector<Var<double>> vs;
    for (const auto& l : logits) vs.push_back(g.constant(l));
    return id_loss(vs, labels).scalar;
}

LossValue<double> tp(Graph<double>& g, const Tensor<double>& emb, std::vector<std::size_t> labels,
                     double margin = 1.4) {
    return triplet_loss(g.constant(emb), labels, margin);
}

// Exhaustive batch-hard value, written independently of the library.
double brute_triplet(const Tensor<double>& e, const std::vector<std::size_t>& y, double margin) {
    const std::size_t n = e.dim(0), d = e.dim(1);
    auto dist = [&](std::size_t i, std::size_t j) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += (e[i * d + k] - e[j * d + k]) * (e[i * d + k] - e[j * d + k]);
        return std::sqrt(s);
    };
    double total = 0.0;
    std::size_t valid = 0;
    for (std::size_t a = 0; a < n; ++a) {
        double hp = -1.0, hn = INFINITY;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == a) continue;
            if (y[j] == y[a]) hp = std::max(hp, dist(a, j));
            else hn = std::min(hn, dist(a, j));
        }
        if (hp < 0.0 || std::isinf(hn)) continue;
        total += std::max(0.0, hp - hn + margin);
        ++valid;
    }
    return valid ? total / static_cast<double>(valid) : 0.0;
}

} // namespace

TEST_CASE("ID loss examples") {
    CHECK(id_value({Tensor<double>(Shape{1, 4}, 0.0)}, {2}) == Approx(std::log(4.0)).margin(1e-12));
    std::vector<Tensor<double>> many(21, Tensor<double>(Shape{1, 4}, 0.0));
    CHECK(id_value(many, {0}) == Approx(21.0 * std::log(4.0)).margin(1e-9));
    CHECK(21.0 * std::log(4.0) == Approx(29.112).margin(1e-3));
    CHECK(id_value({Tensor<double>(Shape{1, 3}, std::vector<double>{2, 1, 0})}, {0}) ==
          Approx(std::log(1 + std::exp(-1.0) + std::exp(-2.0))).margin(1e-12));
    CHECK(std::log(1 + std::exp(-1.0) + std::exp(-2.0)) == Approx(0.4076).margin(1e-4));
}

TEST_CASE("ID loss averages over images and sums over branches") {
    Rng r(1);
    auto a = random_tensor({3, 4}, r), b = random_tensor({3, 4}, r);
    std::vector<std::size_t> y{0, 1, 3};
    double expect = 0.0;
    for (const auto* t : {&a, &b})
        for (std::size_t n = 0; n < 3; ++n) {
            double z = 0.0;
            for (std::size_t k = 0; k < 4; ++k) z += std::exp((*t)[n * 4 + k]);
            expect += std::log(z) - (*t)[n * 4 + y[n]];
        }
    CHECK(id_value({a, b}, y) == Approx(expect / 3.0).margin(1e-12));
}

TEST_CASE("ID loss errors") {
    CHECK_THROWS_AS(id_value({}, {0}), ShapeError);
    CHECK_THROWS(id_value({Tensor<double>(Shape{1, 4}, 0.0)}, {4}));
}

TEST_CASE("ID loss properties") {
    Rng r(2);
    for (int i = 0; i < 200; ++i) {
        const std::size_t k = gradcases::pick(r, 2, 8);
        auto l = random_tensor({2, k}, r, -10, 10);
        std::vector<std::size_t> y{r.below(k), r.below(k)};
        const double base = id_value({l}, y);
        CHECK(base >= 0.0);
        auto shifted = l;
        const double c = r.uniform(-50, 50);
        for (auto& v : shifted.data()) v += c;
        CHECK(std::abs(id_value({shifted}, y) - base) <= 1e-6);
    }
    double prev = INFINITY;
    for (double t : {0.0, 5.0, 10.0, 20.0, 40.0}) {
        const double v = id_value({Tensor<double>(Shape{1, 3}, std::vector<double>{t, 0, 0})}, {0});
        CHECK(v < prev);
        prev = v;
    }
    CHECK(prev < 1e-15);
}

TEST_CASE("euclidean distance examples and properties") {
    std::vector<double> x{1.5, -2, 3}, a{0, 0}, b{3, 4};
    CHECK(euclidean_distance(x, x) == 0.0);
    CHECK(euclidean_distance(a, b) == 5.0);
    CHECK_THROWS_AS(euclidean_distance(a, x), ShapeError);
    Rng r(3);
    for (int i = 0; i < 1000; ++i) {
        std::vector<double> p(4), q(4), s(4);
        for (auto* v : {&p, &q, &s})
            for (auto& e : *v) e = r.uniform(-5, 5);
        CHECK(euclidean_distance(p, s) <= euclidean_distance(p, q) + euclidean_distance(q, s) + 1e-12);
        CHECK(euclidean_distance(p, q) == euclidean_distance(q, p));
    }
}

TEST_CASE("triplet loss examples") {
    SECTION("identical embeddings give exactly the margin") {
        Graph<double> g;
        auto v = tp(g, Tensor<double>(Shape{6, 3}, 0.7), {0, 0, 1, 1, 2, 3});
        CHECK(v.scalar == Approx(1.4).margin(1e-12));
        CHECK(v.count == 4);
        CHECK(v.skipped == 2);
    }
    SECTION("separated clusters give zero") {
        Graph<double> g;
        auto e = Tensor<double>(Shape{4, 2}, std::vector<double>{0, 0, 0.1, 0, 10, 0, 10.1, 0});
        CHECK(tp(g, e, {0, 0, 1, 1}).scalar == 0.0);
    }
    SECTION("1-D worked example") {
        Graph<double> g;
        auto e = Tensor<double>(Shape{4, 1}, std::vector<double>{0, 1, 1.5, 10});
        auto v = tp(g, e, {0, 0, 1, 1});
        // terms 0.9, 1.9, 9.4 and, for the anchor at 10 (nearest negative at 1, d = 9), 0.9
        CHECK(v.scalar == Approx((0.9 + 1.9 + 9.4 + 0.9) / 4.0).margin(1e-12));
        CHECK(v.scalar == Approx(3.275).margin(1e-12));
        CHECK(v.count == 4);
    }
    SECTION("margin 0 with identical embeddings") {
        Graph<double> g;
        CHECK(tp(g, Tensor<double>(Shape{4, 2}, 1.0), {0, 0, 1, 1}, 0.0).scalar == 0.0);
    }
    SECTION("all anchors degenerate") {
        Graph<double> g;
        auto v = tp(g, Tensor<double>(Shape{3, 2}, 1.0), {0, 1, 2});
        CHECK(v.degenerate);
        CHECK(v.count == 0);
        CHECK(v.scalar == 0.0);
        CHECK(v.value.value()[0] == 0.0);
    }
    SECTION("errors") {
        Graph<double> g;
        CHECK_THROWS_AS(tp(g, Tensor<double>(Shape{1, 2}, 1.0), {0}), ShapeError);
        CHECK_THROWS_AS(tp(g, Tensor<double>(Shape{2, 2}, 1.0), {0, 1, 2}), ShapeError);
    }
}

TEST_CASE("triplet loss matches an exhaustive oracle and is translation invariant") {
    Rng r(4);
    for (int i = 0; i < 300; ++i) {
        const std::size_t n = gradcases::pick(r, 2, 24), d = gradcases::pick(r, 1, 6);
        auto e = random_tensor({n, d}, r, -2, 2);
        std::vector<std::size_t> y(n);
        for (auto& v : y) v = r.below(gradcases::pick(r, 1, 5));
        const double margin = r.uniform(0.0, 2.0);
        Graph<double> g;
        const double v = tp(g, e, y, margin).scalar;
        CHECK(v == Approx(brute_triplet(e, y, margin)).margin(1e-12));
        CHECK(v >= 0.0);
        auto moved = e;
        for (std::size_t k = 0; k < d; ++k) {
            const double c = r.uniform(-100, 100);
            for (std::size_t j = 0; j < n; ++j) moved[j * d + k] += c;
        }
        CHECK(tp(g, moved, y, margin).scalar == Approx(v).margin(1e-9));
    }
}

TEST_CASE("batch-hard mining matches brute force on 1000 random 16x16 cases") {
    Rng r(5);
    for (int t = 0; t < 1000; ++t) {
        const std::size_t n = 16;
        std::vector<double> dist(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) dist[i * n + j] = dist[j * n + i] = r.uniform(0.0, 10.0);
        std::vector<std::size_t> y(n);
        for (auto& v : y) v = r.below(5);
        const auto mined = batch_hard_mine(dist, y, true);
        for (std::size_t a = 0; a < n; ++a) {
            std::optional<std::size_t> p, q;
            double pv = -1.0, qv = INFINITY;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == a) continue;
                if (y[j] == y[a] && dist[a * n + j] > pv) pv = dist[a * n + j], p = j;
                if (y[j] != y[a] && dist[a * n + j] < qv) qv = dist[a * n + j], q = j;
            }
            CHECK(mined[a].hardest_positive == p);
            CHECK(mined[a].hardest_negative == q);
        }
    }
}

TEST_CASE("triplet loss gradient flows only through the mined pairs") {
    Rng r(6);
    for (int i = 0; i < 20; ++i) {
        auto e = random_tensor({8, 3}, r);
        std::vector<std::size_t> y{0, 0, 1, 1, 2, 2, 3, 3};
        const double margin = r.uniform(0.5, 2.0);
        auto rep = finite_difference_check(
            [&](Graph<double>&, const Var<double>& x) { return triplet_loss(x, y, margin).value; }, e);
        CHECK(rep.max_rel_error < 1e-5);
    }
}

TEST_CASE("squared-distance variant") {
    Graph<double> g;
    auto e = Tensor<double>(Shape{4, 1}, std::vector<double>{0, 1, 1.5, 10});
    const std::vector<std::size_t> y{0, 0, 1, 1};
    auto v = triplet_loss(g.constant(e), y, 1.4, true);
    // d^2: anchor 0: 1 - 2.25, anchor 1: 1 - 0.25, anchor 2: 72.25 - 0.25, anchor 3: 72.25 - 81
    const double expect = ((1 - 2.25 + 1.4) + (1 - 0.25 + 1.4) + (72.25 - 0.25 + 1.4) + 0.0) / 4.0;
    CHECK(v.scalar == Approx(expect).margin(1e-12));
}
