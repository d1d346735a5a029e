#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "catch_amalgamated.hpp"
#include "pyreid/pyreid.hpp"

using namespace pyreid;
using Catch::Approx;

namespace {

const ReIdDataset& small_data() {
    static const ReIdDataset ds = [] {
        GenConfig g;
        g.num_ids = 20;
        g.imgs_per_id = 10;
        g.num_cams = 2;
        return generate_dataset(g, {}, 1);
    }();
    return ds;
}

TrainConfig small_cfg(std::uint64_t seed = 7) {
    auto c = TrainConfig::desk();
    c.seed = seed;
    c.epochs = 10;
    c.halving_epochs = {5, 8};
    return c;
}

} // namespace

TEST_CASE("learning rate schedule") {
    const std::vector<std::size_t> h{60, 70, 80, 90};
    CHECK(lr_schedule(0, 0.01, h) == 0.01);
    CHECK(lr_schedule(59, 0.01, h) == 0.01);
    CHECK(lr_schedule(60, 0.01, h) == 0.005);
    CHECK(lr_schedule(65, 0.01, h) == 0.005);
    CHECK(lr_schedule(95, 0.01, h) == Approx(0.000625).margin(1e-15));
    CHECK(lr_schedule(500, 0.01, {}) == 0.01);
}

TEST_CASE("momentum SGD") {
    std::map<std::string, Tensor<double>> vel;
    SECTION("one step") {
        Parameter<double> p("w", Tensor<double>::vector({1.0}));
        p.grad = Tensor<double>::vector({0.5});
        std::vector<Parameter<double>*> ps{&p};
        sgd_step<double>(ps, vel, 0.1, 0.9, 0.0);
        CHECK(p.value[0] == Approx(0.95).margin(1e-15));
    }
    SECTION("zero gradient and no decay leaves weights alone") {
        Parameter<double> p("w", Tensor<double>::vector({1.0, -2.0}));
        std::vector<Parameter<double>*> ps{&p};
        sgd_step<double>(ps, vel, 0.1, 0.9, 0.0);
        CHECK(p.value[0] == 1.0);
        CHECK(p.value[1] == -2.0);
    }
    SECTION("momentum accumulates over two steps") {
        Parameter<double> p("w", Tensor<double>::vector({0.0}));
        std::vector<Parameter<double>*> ps{&p};
        p.grad = Tensor<double>::vector({1.0});
        sgd_step<double>(ps, vel, 0.1, 0.9, 0.0);
        sgd_step<double>(ps, vel, 0.1, 0.9, 0.0);
        CHECK(p.value[0] == Approx(-0.29).margin(1e-15));
    }
    SECTION("weight decay skips batch-norm parameters") {
        Parameter<double> w("w", Tensor<double>::vector({1.0}));
        Parameter<double> gamma("bn.gamma", Tensor<double>::vector({1.0}), false);
        std::vector<Parameter<double>*> ps{&w, &gamma};
        sgd_step<double>(ps, vel, 0.1, 0.0, 0.5);
        CHECK(w.value[0] == Approx(0.95).margin(1e-15));
        CHECK(gamma.value[0] == 1.0);
    }
    SECTION("non-finite gradient names the parameter") {
        Parameter<double> a("fine", Tensor<double>::vector({1.0})), b("conv2.w", Tensor<double>::vector({1.0}));
        b.grad = Tensor<double>::vector({std::nan("")});
        std::vector<Parameter<double>*> ps{&a, &b};
        try {
            sgd_step<double>(ps, vel, 0.1, 0.9, 0.0);
            FAIL("expected DivergenceError");
        } catch (const DivergenceError& e) {
            CHECK(std::string(e.what()).find("conv2.w") != std::string::npos);
        }
        CHECK(a.value[0] == 1.0);
    }
    SECTION("lr must be positive") {
        Parameter<double> p("w", Tensor<double>::vector({1.0}));
        std::vector<Parameter<double>*> ps{&p};
        CHECK_THROWS_AS(sgd_step<double>(ps, vel, 0.0, 0.9, 0.0), ConfigError);
    }
}

TEST_CASE("config files") {
    TrainConfig c;
    std::istringstream in("[train]\n# comment\nn = 4\nmask=1111 ; trailing\nlr=0.02\nhalving_epochs=3, 6\n"
                          "no_triplet_alternating=true\n");
    apply_ini(c, in);
    CHECK(c.n == 4);
    CHECK(c.mask == "1111");
    CHECK(c.lr == 0.02);
    CHECK(c.halving_epochs == std::vector<std::size_t>{3, 6});
    CHECK(c.no_triplet_alternating);
    CHECK_NOTHROW(c.validate());

    TrainConfig back;
    std::istringstream again(c.to_ini());
    apply_ini(back, again);
    CHECK(back.to_ini() == c.to_ini());
    CHECK(back.fingerprint() == c.fingerprint());

    try {
        std::istringstream bad("lr=0.1\nlearning_rate=0.1\n");
        apply_ini(c, bad);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.key() == "learning_rate");
        CHECK(std::string(e.what()).find("learning_rate") != std::string::npos);
    }
    std::istringstream noeq("lr\n");
    CHECK_THROWS_AS(apply_ini(c, noeq), ConfigError);
    CHECK_THROWS_AS(c.set("lr", "fast"), ConfigError);
    CHECK_THROWS_AS(c.set("no_triplet_alternating", "maybe"), ConfigError);
}

TEST_CASE("config validation and profiles") {
    auto c = TrainConfig::desk();
    CHECK_NOTHROW(c.validate());
    c.mask = "1111";
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig::desk();
    c.P = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig::desk();
    c.halving_epochs = {10, 5};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    const auto p = TrainConfig::profile("paper");
    CHECK(p.batch_size == 64);
    CHECK(p.P == 8);
    CHECK(p.K == 8);
    CHECK(p.feature_dim == 128);
    CHECK(p.epochs == 120);
    CHECK(p.halving_epochs == std::vector<std::size_t>{60, 70, 80, 90});
    CHECK(p.margin == 1.4);
    CHECK(p.alpha == 0.25);
    CHECK(p.gamma == 2.0);
    CHECK(p.switch_ratio == 0.16);
    CHECK_THROWS_AS(TrainConfig::profile("huge"), ConfigError);
    auto e = TrainConfig::desk();
    e.epochs = 99;
    e.checkpoint_every = 1;
    CHECK(e.fingerprint() == TrainConfig::desk().fingerprint());
    e.lr = 0.02;
    CHECK(e.fingerprint() != TrainConfig::desk().fingerprint());
}

TEST_CASE("a run is deterministic and restartable") {
    Trainer<float> a(small_cfg(), small_data());
    CHECK(a.iterations_per_epoch() == 7);
    const auto first = a.step();
    CHECK(first.tau == 1);
    CHECK(first.phase == Phase::id_only);
    a.run(10);
    CHECK(a.trace().size() == 70);
    for (std::size_t i = 0; i < a.trace().size(); ++i) CHECK(a.trace()[i].tau == i + 1);

    Trainer<float> b(small_cfg(), small_data());
    b.run(10);
    CHECK(trace_csv(a.trace()) == trace_csv(b.trace()));

    // Interrupted after epoch 5 and resumed from the checkpoint bytes.
    Trainer<float> c(small_cfg(), small_data());
    c.run(5);
    const auto bytes = c.checkpoint().to_bytes();
    CHECK(TensorArchive::from_bytes(bytes).to_bytes() == bytes);
    Trainer<float> d(small_cfg(), small_data());
    d.restore(TensorArchive::from_bytes(bytes));
    CHECK(d.iteration() == 35);
    CHECK(d.checkpoint().to_bytes() == bytes);
    d.run(10);
    CHECK(trace_csv(d.trace()) == trace_csv(a.trace()));
    CHECK(d.checkpoint().to_bytes() == a.checkpoint().to_bytes());

    const auto csv = trace_csv(a.trace());
    std::istringstream in(csv);
    CHECK(trace_csv(parse_trace(in)) == csv);

    Trainer<float> other(small_cfg(8), small_data());
    other.run(1);
    CHECK(trace_csv(other.trace()) != trace_csv(std::vector<TraceRow>(a.trace().begin(), a.trace().begin() + 7)));
}

TEST_CASE("the learning rate in the trace follows the schedule") {
    Trainer<float> t(small_cfg(), small_data());
    t.run(9);
    for (const auto& r : t.trace()) {
        const std::size_t epoch = (r.tau - 1) / 7;
        CHECK(r.lr == Approx(lr_schedule(epoch, 0.01, {5, 8})).margin(1e-15));
    }
}

TEST_CASE("checkpoints from a different geometry or config are refused") {
    Trainer<float> a(small_cfg(), small_data());
    a.run(1);
    const auto ar = a.checkpoint();

    auto c4 = small_cfg();
    c4.n = 4;
    c4.mask = "1111";
    Trainer<float> b(c4, small_data());
    try {
        b.restore(ar);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("geometry") != std::string::npos);
    }

    auto clr = small_cfg();
    clr.lr = 0.05;
    Trainer<float> c(clr, small_data());
    try {
        c.restore(ar);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("lr=") != std::string::npos);
    }

    auto longer = small_cfg();
    longer.epochs = 40;
    Trainer<float> d(longer, small_data());
    CHECK_NOTHROW(d.restore(ar));

    auto bad = ar;
    bad.put("meta/version", Tensor<std::int64_t>::vector({99}));
    CHECK_THROWS(d.restore(bad));
}

TEST_CASE("recorded phase matches the sampling strategy") {
    Trainer<float> t(small_cfg(), small_data());
    bool combined = false;
    for (int i = 0; i < 70; ++i) {
        const auto row = t.step();
        const bool pk = t.last_batch().strategy == SamplingStrategy::id_balanced;
        CHECK(pk == (row.phase != Phase::id_only));
        if (t.last_step_used_triplet_gradient()) CHECK(row.phase == Phase::combined);
        if (row.phase == Phase::combined && (row.fl_id > 0.0 || row.fl_tp > 0.0))
            CHECK(t.last_step_used_triplet_gradient());
        combined = combined || row.phase == Phase::combined;
        if (pk) CHECK(t.last_batch().size() == 16);
    }
    CHECK(combined);
}

TEST_CASE("random batches consumed by IdOnly iterations cover the train split per epoch") {
    Trainer<float> t(small_cfg(), small_data());
    const std::size_t per_epoch = t.random_sampler().batches_per_epoch();
    const std::size_t n = small_data().indices(Split::train).size();
    std::vector<std::size_t> seen;
    std::size_t batches = 0, epochs_checked = 0;
    for (int i = 0; i < 200; ++i) {
        const auto row = t.step();
        if (row.phase != Phase::id_only) continue;
        seen.insert(seen.end(), t.last_batch().indices.begin(), t.last_batch().indices.end());
        if (++batches % per_epoch == 0) {
            std::sort(seen.begin(), seen.end());
            std::vector<std::size_t> all(n);
            std::iota(all.begin(), all.end(), 0);
            CHECK(seen == all);
            seen.clear();
            ++epochs_checked;
        }
    }
    CHECK(epochs_checked >= 1);
}

TEST_CASE("no-triplet alternating mode") {
    auto c = small_cfg();
    c.no_triplet_alternating = true;
    Trainer<float> t(c, small_data());
    for (std::size_t tau = 1; tau <= 28; ++tau) {
        const auto row = t.step();
        CHECK_FALSE(t.last_step_used_triplet_gradient());
        if (tau % 2 == 1) {
            CHECK(row.phase == Phase::id_only);
            CHECK(t.last_batch().strategy == SamplingStrategy::random);
        } else {
            CHECK(row.phase == Phase::id_only_pk);
            CHECK(t.last_batch().strategy == SamplingStrategy::id_balanced);
        }
    }
}

TEST_CASE("frozen triplet statistics when the IdOnly triplet probe is off") {
    auto c = small_cfg();
    c.triplet_in_id_only = false;
    Trainer<float> t(c, small_data());
    for (int i = 0; i < 14; ++i) {
        const auto row = t.step();
        if (row.phase == Phase::id_only) CHECK_FALSE(row.l_tp.has_value());
    }
}

TEST_CASE("masked branches keep their weights") {
    auto c = small_cfg();
    c.mask = "000001";
    Trainer<float> t(c, small_data());
    std::map<std::string, Tensor<float>> before;
    for (auto* p : t.model().all_parameters()) before.emplace(p->name, p->value);
    t.run(1);
    std::size_t changed = 0, kept = 0;
    for (auto* p : t.model().all_parameters()) {
        const bool trainable = std::find(t.trainable().begin(), t.trainable().end(), p) != t.trainable().end();
        const bool same = std::equal(p->value.data().begin(), p->value.data().end(), before.at(p->name).data().begin());
        if (!trainable) {
            CHECK(same);
            ++kept;
        } else if (!same) {
            ++changed;
        }
    }
    CHECK(kept > 0);
    CHECK(changed > 0);
}

TEST_CASE("evaluate a checkpoint") {
    Trainer<float> t(small_cfg(), small_data());
    t.run(2);
    const auto ar = t.checkpoint();
    const auto m1 = evaluate_checkpoint(ar, small_data());
    const auto m2 = evaluate_model(t.model(), small_data(), t.mask());
    CHECK(m1.mAP == m2.mAP);
    CHECK(m1.rank1 == m2.rank1);
    CHECK((m1.mAP > 0.0 && m1.mAP <= 1.0));
}
