#include <algorithm>
#include <map>
#include <numeric>

#include "catch_amalgamated.hpp"
#include "pyreid/pyreid.hpp"

using namespace pyreid;

namespace {

LabeledSplit make_split(const std::vector<std::size_t>& images_per_id) {
    LabeledSplit s;
    for (std::size_t id = 0; id < images_per_id.size(); ++id)
        for (std::size_t i = 0; i < images_per_id[id]; ++i) {
            s.labels.push_back(id);
            s.cameras.push_back(i % 2);
        }
    return s;
}

std::map<std::size_t, std::size_t> label_counts(const MiniBatch& b) {
    std::map<std::size_t, std::size_t> c;
    for (auto l : b.labels) ++c[l];
    return c;
}

} // namespace

TEST_CASE("random batches of 200 images in batches of 64") {
    RandomSampler s(make_split(std::vector<std::size_t>(20, 10)), 64, 1);
    CHECK(s.batches_per_epoch() == 4);
    const auto ep = s.epoch(0);
    std::vector<std::size_t> sizes;
    for (const auto& b : ep) sizes.push_back(b.size());
    CHECK(sizes == std::vector<std::size_t>{64, 64, 64, 8});
    CHECK(ep.back().partial);
    CHECK_FALSE(ep.front().partial);
}

TEST_CASE("random epochs are permutations of the split") {
    RandomSampler s(make_split(std::vector<std::size_t>(13, 7)), 16, 3);
    for (std::size_t e = 0; e < 10; ++e) {
        std::vector<std::size_t> seen;
        for (const auto& b : s.epoch(e)) {
            CHECK(b.strategy == SamplingStrategy::random);
            seen.insert(seen.end(), b.indices.begin(), b.indices.end());
        }
        std::sort(seen.begin(), seen.end());
        std::vector<std::size_t> all(13 * 7);
        std::iota(all.begin(), all.end(), 0);
        CHECK(seen == all);
    }
    CHECK(s.epoch(0)[0].indices != s.epoch(1)[0].indices);
}

TEST_CASE("samplers are deterministic in the seed") {
    const auto split = make_split(std::vector<std::size_t>(20, 10));
    RandomSampler a(split, 64, 9), b(split, 64, 9), c(split, 64, 10);
    CHECK(a.epoch(3)[1].indices == b.epoch(3)[1].indices);
    CHECK(a.batch(3, 1).indices == b.epoch(3)[1].indices);
    CHECK(a.epoch(3)[1].indices != c.epoch(3)[1].indices);
    PkSampler p(split, 4, 4, 9), q(split, 4, 4, 9);
    for (std::size_t d = 0; d < 20; ++d) CHECK(p.batch(d).indices == q.batch(d).indices);
}

TEST_CASE("random sampler errors") {
    CHECK_THROWS_AS(RandomSampler(LabeledSplit{}, 4, 1), ConfigError);
    CHECK_THROWS_AS(RandomSampler(make_split({3}), 0, 1), ConfigError);
}

TEST_CASE("PK batches have P identities with K images each") {
    SECTION("P=8, K=8") {
        PkSampler s(make_split(std::vector<std::size_t>(12, 10)), 8, 8, 1);
        for (std::size_t d = 0; d < 50; ++d) {
            const auto b = s.batch(d);
            CHECK(b.size() == 64);
            CHECK(b.strategy == SamplingStrategy::id_balanced);
            const auto c = label_counts(b);
            CHECK(c.size() == 8);
            for (auto [id, n] : c) CHECK(n == 8);
            // without replacement inside an identity
            auto idx = b.indices;
            std::sort(idx.begin(), idx.end());
            CHECK(std::adjacent_find(idx.begin(), idx.end()) == idx.end());
        }
    }
    SECTION("P=2, K=2 on four identities") {
        PkSampler s(make_split({3, 3, 3, 3}), 2, 2, 5);
        for (std::size_t d = 0; d < 40; ++d) {
            const auto b = s.batch(d);
            CHECK(b.size() == 4);
            const auto c = label_counts(b);
            CHECK(c.size() == 2);
            for (auto [id, n] : c) CHECK(n == 2);
        }
    }
    SECTION("every seed") {
        const auto split = make_split({4, 6, 9, 5, 4, 12});
        for (std::uint64_t seed = 0; seed < 30; ++seed) {
            PkSampler s(split, 3, 4, seed);
            for (std::size_t d = 0; d < 10; ++d) {
                const auto c = label_counts(s.batch(d));
                CHECK(c.size() == 3);
                for (auto [id, n] : c) CHECK(n == 4);
            }
        }
    }
}

TEST_CASE("identities with fewer than K images are never used") {
    // identity 0 has 5 images
    auto split = make_split({5, 10, 10, 10, 10, 10, 10, 10, 10, 10});
    PkSampler s(split, 8, 8, 2);
    CHECK(std::find(s.eligible_ids().begin(), s.eligible_ids().end(), 0) == s.eligible_ids().end());
    const std::size_t per_epoch = s.epoch_length();
    CHECK(per_epoch == (90 + 63) / 64);
    for (std::size_t d = 0; d < 100 * per_epoch; ++d)
        for (auto l : s.batch(d).labels) CHECK(l != 0);
}

TEST_CASE("with replacement small identities become eligible") {
    auto split = make_split({5, 10, 10});
    PkSampler s(split, 3, 8, 4, true);
    CHECK(s.eligible_ids().size() == 3);
    const auto c = label_counts(s.batch(0));
    CHECK(c.at(0) == 8);
}

TEST_CASE("too few eligible identities is an error listing counts") {
    try {
        PkSampler s(make_split({5, 10, 10}), 3, 8, 1);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string m = e.what();
        CHECK(m.find("2 of 3") != std::string::npos);
    }
}

TEST_CASE("batch-hard mining edge cases") {
    SECTION("all labels distinct") {
        std::vector<double> d{0, 1, 2, 1, 0, 3, 2, 3, 0};
        std::vector<std::size_t> y{0, 1, 2};
        for (const auto& m : batch_hard_mine(d, y, true)) {
            CHECK_FALSE(m.hardest_positive);
            CHECK(m.hardest_negative);
        }
    }
    SECTION("ties go to the smaller index") {
        // anchor 0 has negatives 2 and 3 at equal distance, positives 1 and 4 at equal distance
        const std::size_t n = 5;
        std::vector<double> d(n * n, 0.0);
        auto set = [&](std::size_t i, std::size_t j, double v) { d[i * n + j] = d[j * n + i] = v; };
        set(0, 1, 4), set(0, 4, 4), set(0, 2, 1), set(0, 3, 1);
        set(1, 2, 5), set(1, 3, 5), set(1, 4, 5), set(2, 3, 5), set(2, 4, 5), set(3, 4, 5);
        std::vector<std::size_t> y{0, 0, 1, 1, 0};
        const auto m = batch_hard_mine(d, y, true);
        CHECK(*m[0].hardest_negative == 2);
        CHECK(*m[0].hardest_positive == 1);
    }
    SECTION("validation") {
        std::vector<std::size_t> y{0, 1};
        CHECK_THROWS_AS(batch_hard_mine(std::vector<double>{0, 1, 2, 0}, y, true), ShapeError);
        CHECK_THROWS_AS(batch_hard_mine(std::vector<double>{0, -1, -1, 0}, y, true), ShapeError);
        CHECK_THROWS_AS(batch_hard_mine(std::vector<double>{0, 1, 1}, y, true), ShapeError);
    }
}

TEST_CASE("batch-hard mining matches brute force on random batches up to 64") {
    Rng r(7);
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 2 + r.below(63);
        std::vector<double> pts(n * 3);
        for (auto& v : pts) v = r.uniform(-1, 1);
        Tensor<double> x(Shape{n, 3}, pts);
        const auto d = pairwise_distances(x);
        std::vector<std::size_t> y(n);
        for (auto& v : y) v = r.below(1 + n / 3);
        const auto m = batch_hard_mine(d, y, true);
        for (std::size_t a = 0; a < n; ++a) {
            double pmax = -1, nmin = 1e300;
            for (std::size_t j = 0; j < n; ++j) {
                if (j == a) continue;
                if (y[j] == y[a]) pmax = std::max(pmax, d[a * n + j]);
                else nmin = std::min(nmin, d[a * n + j]);
            }
            if (m[a].hardest_positive) CHECK(d[a * n + *m[a].hardest_positive] == pmax);
            else CHECK(pmax < 0);
            if (m[a].hardest_negative) CHECK(d[a * n + *m[a].hardest_negative] == nmin);
            else CHECK(nmin == 1e300);
        }
    }
}

TEST_CASE("batch-hard mining is permutation equivariant") {
    Rng r(8);
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 4 + r.below(20);
        std::vector<double> d(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) d[i * n + j] = d[j * n + i] = r.uniform(0, 5);
        std::vector<std::size_t> y(n);
        for (auto& v : y) v = r.below(4);
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        r.shuffle(std::span<std::size_t>(perm));
        // row i of the permuted problem is row perm[i] of the original
        std::vector<double> dp(n * n);
        std::vector<std::size_t> yp(n);
        for (std::size_t i = 0; i < n; ++i) {
            yp[i] = y[perm[i]];
            for (std::size_t j = 0; j < n; ++j) dp[i * n + j] = d[perm[i] * n + perm[j]];
        }
        const auto m = batch_hard_mine(d, y, true);
        const auto mp = batch_hard_mine(dp, yp, true);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& a = m[perm[i]];
            const auto& b = mp[i];
            CHECK(a.hardest_positive.has_value() == b.hardest_positive.has_value());
            if (b.hardest_positive) CHECK(perm[*b.hardest_positive] == *a.hardest_positive);
            if (b.hardest_negative) CHECK(perm[*b.hardest_negative] == *a.hardest_negative);
        }
    }
}

TEST_CASE("rng streams are reproducible and independent") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next() == b.next());
    Rng base(42);
    auto s1 = base.split("x"), s2 = base.split("x"), s3 = base.split("x", 1), s4 = base.split("y");
    const auto v1 = s1.next();
    CHECK(v1 == s2.next());
    CHECK(v1 != s3.next());
    CHECK(v1 != s4.next());
    Rng u(1);
    for (int i = 0; i < 10000; ++i) {
        const double x = u.uniform();
        CHECK((x >= 0.0 && x < 1.0));
        CHECK(u.below(7) < 7);
    }
}
