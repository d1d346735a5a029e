#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "curves.hpp"
#include "pyreid/pyreid.hpp"

namespace fs = std::filesystem;
using namespace pyreid;

namespace {

struct Failure {
    int code;
    std::string kind;
    std::string detail;
    std::string key;
};

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '"' || c == '\\') out.push_back('\\');
        out.push_back(c == '\n' ? ' ' : c);
    }
    return out;
}

int report(const Failure& f) {
    std::cerr << "pyreid-error code=" << f.code << " kind=" << f.kind;
    if (!f.key.empty()) std::cerr << " key=" << f.key;
    std::cerr << " detail=\"" << escape(f.detail) << "\"\n";
    return f.code;
}

bool deterministic() {
    const char* v = std::getenv("PYREID_DETERMINISTIC");
    return v != nullptr && std::string(v) == "1";
}

void write_run_meta(const fs::path& out, const std::string& command, const std::vector<std::string>& args) {
    std::ofstream f(out / "run_meta.txt", std::ios::trunc);
    f << "command=" << command << "\nargs=";
    for (std::size_t i = 0; i < args.size(); ++i) f << (i ? " " : "") << args[i];
    f << "\n";
    if (!deterministic()) {
        const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
        char buf[64];
        std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
        f << "started_utc=" << buf << "\n";
    }
}

// Options shared by train and ablate.
struct ConfigFlags {
    std::string config;
    std::string profile = "desk";
    std::optional<std::uint64_t> seed;
    std::optional<std::string> mask;
    std::optional<std::size_t> feature_dim;
    std::optional<std::size_t> epochs;
    bool no_triplet = false;
    std::vector<std::string> sets;

    void attach(CLI::App* cmd, bool with_seed_and_mask) {
        cmd->add_option("--config", config, "INI file of key=value training settings")->check(CLI::ExistingFile);
        cmd->add_option("--profile", profile, "base profile")->check(CLI::IsMember({"desk", "paper"}));
        if (with_seed_and_mask) {
            cmd->add_option("--seed", seed, "run seed");
            cmd->add_option("--pyramid-mask", mask, "enabled pyramid levels, e.g. 111111");
        }
        cmd->add_option("--feature-dim", feature_dim, "per-branch feature dimension D");
        cmd->add_option("--epochs", epochs, "number of epochs");
        cmd->add_flag("--no-triplet", no_triplet, "alternate random/PK batches, optimize the ID loss only");
        cmd->add_option("--set", sets, "override a config key (key=value); repeatable");
    }

    TrainConfig resolve() const {
        TrainConfig cfg = TrainConfig::profile(profile);
        if (!config.empty()) cfg = load_config_file(config, cfg);
        if (seed) cfg.seed = *seed;
        if (mask) cfg.mask = *mask;
        if (feature_dim) cfg.feature_dim = *feature_dim;
        if (epochs) cfg.epochs = *epochs;
        if (no_triplet) cfg.no_triplet_alternating = true;
        for (const auto& s : sets) {
            const auto eq = s.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'", "--set");
            cfg.set(s.substr(0, eq), s.substr(eq + 1));
        }
        cfg.validate();
        return cfg;
    }
};

ReIdDataset require_dataset(const std::string& path) {
    if (path.empty()) throw ConfigError("--dataset is required", "--dataset");
    if (!fs::is_directory(path)) throw ConfigError("--dataset directory '" + path + "' does not exist", "--dataset");
    return load_dataset(path);
}

std::string metrics_csv(const Metrics& m) {
    using detail::fmt_double;
    return "mAP,rank1,rank5,rank10\n" + fmt_double(m.mAP) + "," + fmt_double(m.rank1) + "," + fmt_double(m.rank5) +
           "," + fmt_double(m.rank10) + "\n";
}

void print_metrics(const Metrics& m) {
    std::printf("%-8s %-8s %-8s %-8s\n", "mAP", "rank1", "rank5", "rank10");
    std::printf("%-8.4f %-8.4f %-8.4f %-8.4f\n", m.mAP, m.rank1, m.rank5, m.rank10);
}

std::string epoch_file(std::size_t epoch) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "epoch_%03zu.pyrt", epoch);
    return buf;
}

struct GenArgs {
    std::string out;
    std::uint64_t seed = 0;
    double severity = 0.0;
    GenConfig gen;
};

int cmd_gen_data(const GenArgs& a, const std::vector<std::string>& args) {
    const auto ds = generate_dataset(a.gen, CorruptionConfig{a.severity}, a.seed);
    save_dataset(ds, a.out);
    write_run_meta(a.out, "gen-data", args);
    std::printf("wrote %zu samples (%zu train, %zu query, %zu gallery) to %s\n", ds.samples.size(),
                ds.indices(Split::train).size(), ds.indices(Split::query).size(), ds.indices(Split::gallery).size(),
                a.out.c_str());
    return 0;
}

struct TrainArgs {
    ConfigFlags flags;
    std::string dataset;
    std::string out = "runs/train";
    std::string resume;
};

int cmd_train(const TrainArgs& a, const std::vector<std::string>& args) {
    const TrainConfig cfg = a.flags.resolve();
    const auto ds = require_dataset(a.dataset);
    const fs::path out = a.out;
    fs::create_directories(out / "checkpoints");
    Trainer<float> tr(cfg, ds);
    if (!a.resume.empty()) {
        if (!fs::exists(a.resume)) throw ConfigError("--resume checkpoint '" + a.resume + "' does not exist", "--resume");
        tr.restore(TensorArchive::load(a.resume));
    }
    {
        std::ofstream f(out / "resolved_config.ini", std::ios::trunc);
        f << "# dataset=" << a.dataset << "\n" << cfg.to_ini();
    }
    write_run_meta(out, "train", args);
    try {
        tr.run(cfg.epochs, [&](std::size_t epoch) {
            if (epoch % cfg.checkpoint_every == 0) tr.save_checkpoint(out / "checkpoints" / epoch_file(epoch));
        });
    } catch (const DivergenceError&) {
        write_trace(tr.trace(), (out / "trace.csv").string());
        throw;
    }
    tr.save_checkpoint(out / "checkpoints" / "final.pyrt");
    write_trace(tr.trace(), (out / "trace.csv").string());
    const auto m = evaluate_model(tr.model(), ds, tr.mask());
    std::ofstream(out / "metrics.csv", std::ios::trunc) << metrics_csv(m);
    print_metrics(m);
    return 0;
}

struct EvalArgs {
    std::string checkpoint;
    std::string dataset;
    std::optional<std::string> mask;
    bool l2 = false;
    std::string out;
};

int cmd_eval(const EvalArgs& a) {
    if (!fs::exists(a.checkpoint)) throw ConfigError("--checkpoint '" + a.checkpoint + "' does not exist", "--checkpoint");
    const auto ds = require_dataset(a.dataset);
    const auto ar = TensorArchive::load(a.checkpoint);
    std::optional<BranchMask> mask;
    if (a.mask) {
        try {
            mask = BranchMask::parse(*a.mask);
        } catch (const Error& e) {
            throw ConfigError(e.what(), "--pyramid-mask");
        }
    }
    const auto m = evaluate_checkpoint(ar, ds, mask, a.l2);
    if (!a.out.empty()) {
        fs::create_directories(a.out);
        std::ofstream(fs::path(a.out) / "metrics.csv", std::ios::trunc) << metrics_csv(m);
    }
    print_metrics(m);
    return 0;
}

struct AblateArgs {
    ConfigFlags flags;
    std::string dataset;
    std::vector<std::string> masks;
    std::vector<std::uint64_t> seeds;
    std::string out = "runs/ablate";
};

int cmd_ablate(const AblateArgs& a, const std::vector<std::string>& args) {
    if (a.masks.empty()) throw ConfigError("--masks needs at least one mask", "--masks");
    if (a.seeds.empty()) throw ConfigError("--seeds needs at least one seed", "--seeds");
    const TrainConfig base = a.flags.resolve();
    const auto ds = require_dataset(a.dataset);
    const fs::path out = a.out;
    fs::create_directories(out);
    write_run_meta(out, "ablate", args);
    using detail::fmt_double;
    std::ostringstream csv;
    csv << "mask,seed,mAP,rank1,rank5,rank10,status\n";
    for (const auto& mask : a.masks) {
        Metrics sum;
        std::size_t ok = 0;
        for (auto seed : a.seeds) {
            TrainConfig cfg = base;
            cfg.mask = mask;
            cfg.seed = seed;
            const fs::path run = out / (mask + "_seed" + std::to_string(seed));
            try {
                cfg.validate();
                Trainer<float> tr(cfg, ds);
                tr.run(cfg.epochs);
                fs::create_directories(run);
                write_trace(tr.trace(), (run / "trace.csv").string());
                const auto m = evaluate_model(tr.model(), ds, tr.mask());
                csv << mask << ',' << seed << ',' << fmt_double(m.mAP) << ',' << fmt_double(m.rank1) << ','
                    << fmt_double(m.rank5) << ',' << fmt_double(m.rank10) << ",ok\n";
                sum.mAP += m.mAP;
                sum.rank1 += m.rank1;
                sum.rank5 += m.rank5;
                sum.rank10 += m.rank10;
                ++ok;
                std::printf("%s seed %llu: mAP %.4f rank1 %.4f\n", mask.c_str(), static_cast<unsigned long long>(seed),
                            m.mAP, m.rank1);
            } catch (const std::exception& e) {
                std::string msg = e.what();
                std::replace(msg.begin(), msg.end(), ',', ';');
                std::replace(msg.begin(), msg.end(), '\n', ' ');
                csv << mask << ',' << seed << ",,,,,error: " << msg << "\n";
                std::printf("%s seed %llu: failed: %s\n", mask.c_str(), static_cast<unsigned long long>(seed), e.what());
            }
        }
        if (ok > 0) {
            const double n = static_cast<double>(ok);
            csv << mask << ",mean," << fmt_double(sum.mAP / n) << ',' << fmt_double(sum.rank1 / n) << ','
                << fmt_double(sum.rank5 / n) << ',' << fmt_double(sum.rank10 / n) << ",ok\n";
        } else {
            csv << mask << ",mean,,,,,no successful runs\n";
        }
    }
    std::ofstream(out / "ablation.csv", std::ios::trunc) << csv.str();
    return 0;
}

struct CurvesArgs {
    std::string trace;
    std::string out;
};

int cmd_export_curves(const CurvesArgs& a) {
    if (!fs::exists(a.trace)) throw ConfigError("--trace file '" + a.trace + "' does not exist", "--trace");
    const auto rows = read_trace(a.trace);
    if (rows.empty()) throw FormatError("trace: '" + a.trace + "' has no rows");
    const fs::path out = a.out.empty() ? fs::path(a.trace).parent_path() / "curves" : fs::path(a.out);
    const auto s = curves::export_curves(rows, out);
    std::printf("wrote %zu images and %s (%zu rows)\n", s.images.size(), s.tidy.string().c_str(), s.tidy_rows);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Pyramid person re-identification: data generation, training, evaluation"};
    app.require_subcommand(1);
    const std::vector<std::string> args(argv + 1, argv + argc);

    GenArgs gen;
    auto* c_gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    c_gen->add_option("--out", gen.out, "output directory")->required();
    c_gen->add_option("--seed", gen.seed, "generation seed");
    c_gen->add_option("--severity", gen.severity, "misalignment severity in [0, 1]");
    c_gen->add_option("--num-ids", gen.gen.num_ids, "number of identities");
    c_gen->add_option("--imgs-per-id", gen.gen.imgs_per_id, "images per identity");
    c_gen->add_option("--num-cams", gen.gen.num_cams, "number of cameras");
    c_gen->add_option("--height", gen.gen.height, "image height");
    c_gen->add_option("--width", gen.gen.width, "image width");

    TrainArgs train;
    auto* c_train = app.add_subcommand("train", "train a model");
    train.flags.attach(c_train, true);
    c_train->add_option("--dataset", train.dataset, "dataset directory");
    c_train->add_option("--out", train.out, "run directory");
    c_train->add_option("--resume", train.resume, "checkpoint to resume from");

    EvalArgs ev;
    auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint");
    c_eval->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
    c_eval->add_option("--dataset", ev.dataset, "dataset directory");
    c_eval->add_option("--pyramid-mask", ev.mask, "evaluate with these pyramid levels");
    c_eval->add_flag("--l2-normalize", ev.l2, "L2-normalize embeddings before ranking");
    c_eval->add_option("--out", ev.out, "directory for metrics.csv");

    AblateArgs ab;
    auto* c_ab = app.add_subcommand("ablate", "train and evaluate every (mask, seed) pair");
    ab.flags.attach(c_ab, false);
    c_ab->add_option("--dataset", ab.dataset, "dataset directory");
    c_ab->add_option("--masks", ab.masks, "comma-separated pyramid masks")->delimiter(',')->required();
    c_ab->add_option("--seeds", ab.seeds, "comma-separated seeds")->delimiter(',')->required();
    c_ab->add_option("--out", ab.out, "output directory");

    CurvesArgs cv;
    auto* c_cv = app.add_subcommand("export-curves", "plot a training trace");
    c_cv->add_option("--trace", cv.trace, "trace CSV")->required();
    c_cv->add_option("--out", cv.out, "output directory (default: <trace dir>/curves)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return report({2, "usage", e.what(), ""});
    }

    try {
        if (c_gen->parsed()) return cmd_gen_data(gen, args);
        if (c_train->parsed()) return cmd_train(train, args);
        if (c_eval->parsed()) return cmd_eval(ev);
        if (c_ab->parsed()) return cmd_ablate(ab, args);
        if (c_cv->parsed()) return cmd_export_curves(cv);
    } catch (const ConfigError& e) {
        return report({2, "config", e.what(), e.key()});
    } catch (const DivergenceError& e) {
        return report({3, "divergence", e.what(), ""});
    } catch (const FormatError& e) {
        return report({2, "format", e.what(), ""});
    } catch (const std::exception& e) {
        return report({1, "runtime", e.what(), ""});
    }
    return report({2, "usage", "no command given", ""});
}
