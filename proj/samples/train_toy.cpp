// Trains the desk profile on a freshly generated toy set and prints metrics
// every five epochs.
//
//   sample_train [severity] [seed]

#include <cstdio>
#include <cstdlib>

#include "pyreid/pyreid.hpp"

int main(int argc, char** argv) {
    using namespace pyreid;
    const double severity = argc > 1 ? std::atof(argv[1]) : 0.0;
    const std::uint64_t seed = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 1;

    const auto ds = generate_dataset(GenConfig{}, CorruptionConfig{severity}, seed);
    TrainConfig cfg = TrainConfig::desk();
    cfg.seed = seed;
    Trainer<float> trainer(cfg, ds);
    std::printf("%zu train images, %zu iterations per epoch\n", ds.indices(Split::train).size(),
                trainer.iterations_per_epoch());

    trainer.run(cfg.epochs, [&](std::size_t epoch) {
        if (epoch % 5 != 0) return;
        const auto m = evaluate_model(trainer.model(), ds, trainer.mask());
        const auto& last = trainer.trace().back();
        std::printf("epoch %2zu  phase %-8s  L_id %7.3f  mAP %.3f  rank1 %.3f\n", epoch,
                    std::string(phase_name(last.phase)).c_str(), last.l_id.value_or(0.0), m.mAP, m.rank1);
    });
}
