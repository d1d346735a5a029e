#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "catch_amalgamated.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path kTmp = PYREID_TEST_TMP;

struct Result {
    int code;
    std::string out;
    std::string err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

Result run(const std::string& args) {
    fs::create_directories(kTmp);
    const auto out = kTmp / "stdout.txt", err = kTmp / "stderr.txt";
    const std::string cmd = "PYREID_DETERMINISTIC=1 \"" + std::string(PYREID_CLI) + "\" " + args + " >\"" +
                            out.string() + "\" 2>\"" + err.string() + "\"";
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

bool same_file(const fs::path& a, const fs::path& b) { return fs::exists(a) && slurp(a) == slurp(b); }

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

// Small dataset shared by every case: 5 training identities of 8 images.
const fs::path& dataset() {
    static const fs::path dir = [] {
        const auto d = kTmp / "data";
        fs::remove_all(d);
        const auto r = run("gen-data --out " + q(d) + " --seed 3 --num-ids 10 --imgs-per-id 8 --num-cams 2");
        REQUIRE(r.code == 0);
        return d;
    }();
    return dir;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
    std::vector<std::vector<std::string>> rows;
    std::istringstream in(slurp(p));
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> f;
        std::string cur;
        for (char c : line) {
            if (c == ',') {
                f.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        f.push_back(cur);
        rows.push_back(f);
    }
    return rows;
}

std::uint32_t png_width(const fs::path& p) {
    const auto b = slurp(p);
    REQUIRE(b.size() > 24);
    REQUIRE(b.substr(1, 3) == "PNG");
    std::uint32_t w = 0;
    for (int i = 16; i < 20; ++i) w = (w << 8) | static_cast<unsigned char>(b[static_cast<std::size_t>(i)]);
    return w;
}

std::string train_args(const fs::path& out, const std::string& extra = "") {
    return "train --profile desk --seed 7 --epochs 3 --dataset " + q(dataset()) + " --out " + q(out) + " " + extra;
}

} // namespace

TEST_CASE("gen-data writes the dataset files") {
    for (const char* f : {"train.pyrt", "query.pyrt", "gallery.pyrt", "manifest.csv", "dataset.ini", "run_meta.txt"})
        CHECK(fs::exists(dataset() / f));
}

TEST_CASE("train twice with the same seed gives identical traces") {
    const auto a = kTmp / "train_a", b = kTmp / "train_b";
    fs::remove_all(a);
    fs::remove_all(b);
    REQUIRE(run(train_args(a)).code == 0);
    REQUIRE(run(train_args(b)).code == 0);
    for (const char* f : {"trace.csv", "metrics.csv", "resolved_config.ini"}) {
        REQUIRE(fs::exists(a / f));
        CHECK(slurp(a / f) == slurp(b / f));
    }
    CHECK(same_file(a / "checkpoints" / "final.pyrt", b / "checkpoints" / "final.pyrt"));
    // timestamps are suppressed in determinism mode
    CHECK(slurp(a / "run_meta.txt").find("started_utc") == std::string::npos);
    CHECK(slurp(a / "trace.csv").rfind("tau,phase,L_id,L_tp,k_id,k_tp,p_id,p_tp,FL_id,FL_tp,lr\n1,IdOnly,", 0) == 0);

    SECTION("the resolved config reproduces the run") {
        const auto c = kTmp / "train_c";
        fs::remove_all(c);
        REQUIRE(run("train --config " + q(a / "resolved_config.ini") + " --dataset " + q(dataset()) + " --out " + q(c))
                    .code == 0);
        CHECK(slurp(c / "trace.csv") == slurp(a / "trace.csv"));
    }
    SECTION("eval of the final checkpoint matches the training summary") {
        const auto e = kTmp / "eval_a";
        fs::remove_all(e);
        const auto r = run("eval --checkpoint " + q(a / "checkpoints" / "final.pyrt") + " --dataset " + q(dataset()) +
                           " --out " + q(e));
        REQUIRE(r.code == 0);
        CHECK(slurp(e / "metrics.csv") == slurp(a / "metrics.csv"));
        CHECK(run("eval --checkpoint " + q(a / "checkpoints" / "final.pyrt") + " --dataset " + q(dataset()) +
                  " --pyramid-mask 000001")
                  .code == 0);
        CHECK(run("eval --checkpoint " + q(a / "checkpoints" / "final.pyrt") + " --dataset " + q(dataset()) +
                  " --pyramid-mask 0101")
                  .code == 2);
    }
}

TEST_CASE("resuming from an epoch checkpoint reproduces the full trace") {
    const auto full = kTmp / "resume_full", part = kTmp / "resume_part", rest = kTmp / "resume_rest";
    for (const auto& d : {full, part, rest}) fs::remove_all(d);
    REQUIRE(run(train_args(full, "--set checkpoint_every=1")).code == 0);
    REQUIRE(run("train --profile desk --seed 7 --epochs 1 --set checkpoint_every=1 --dataset " + q(dataset()) +
                " --out " + q(part))
                .code == 0);
    REQUIRE(fs::exists(part / "checkpoints" / "epoch_001.pyrt"));
    REQUIRE(run(train_args(rest, "--set checkpoint_every=1 --resume " + q(part / "checkpoints" / "epoch_001.pyrt")))
                .code == 0);
    CHECK(slurp(rest / "trace.csv") == slurp(full / "trace.csv"));
    CHECK(same_file(rest / "checkpoints" / "final.pyrt", full / "checkpoints" / "final.pyrt"));
    CHECK(same_file(rest / "checkpoints" / "epoch_003.pyrt", full / "checkpoints" / "epoch_003.pyrt"));

    const auto other = kTmp / "resume_other";
    fs::remove_all(other);
    const auto r = run("train --profile desk --seed 7 --epochs 3 --pyramid-mask 1111 --set n=4 --dataset " +
                       q(dataset()) + " --out " + q(other) + " --resume " +
                       q(part / "checkpoints" / "epoch_001.pyrt"));
    CHECK(r.code == 2);
    CHECK(r.err.find("geometry") != std::string::npos);
}

TEST_CASE("error exits are one machine-readable line") {
    SECTION("missing dataset") {
        const auto r = run("train --profile desk --dataset " + q(kTmp / "nowhere") + " --out " + q(kTmp / "x"));
        CHECK(r.code == 2);
        CHECK(r.err.rfind("pyreid-error code=2 kind=config key=--dataset", 0) == 0);
        CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);
        const auto r2 = run("train --profile desk --out " + q(kTmp / "x"));
        CHECK(r2.code == 2);
        CHECK(r2.err.find("--dataset") != std::string::npos);
    }
    SECTION("unknown config key") {
        const auto r = run("train --set learning_rate=0.1 --dataset " + q(dataset()) + " --out " + q(kTmp / "x"));
        CHECK(r.code == 2);
        CHECK(r.err.find("key=learning_rate") != std::string::npos);
        const auto ini = kTmp / "bad.ini";
        std::ofstream(ini) << "lr=0.01\nmomentun=0.9\n";
        const auto r2 = run("train --config " + q(ini) + " --dataset " + q(dataset()) + " --out " + q(kTmp / "x"));
        CHECK(r2.code == 2);
        CHECK(r2.err.find("key=momentun") != std::string::npos);
    }
    SECTION("unknown flag and bad profile") {
        CHECK(run("train --frobnicate").code == 2);
        CHECK(run("train --profile huge").code == 2);
        CHECK(run("").code == 2);
    }
    SECTION("divergence exits 3") {
        const auto d = kTmp / "diverge";
        fs::remove_all(d);
        const auto r = run("train --epochs 2 --set lr=1e300 --dataset " + q(dataset()) + " --out " + q(d));
        CHECK(r.code == 3);
        CHECK(r.err.rfind("pyreid-error code=3 kind=divergence", 0) == 0);
        CHECK(fs::exists(d / "trace.csv"));
    }
}

TEST_CASE("ablate emits one row per mask and seed plus means") {
    const auto out = kTmp / "ablate";
    fs::remove_all(out);
    const auto r = run("ablate --profile desk --epochs 1 --masks 111111,000001,100000 --seeds 1,2 --dataset " +
                       q(dataset()) + " --out " + q(out));
    REQUIRE(r.code == 0);
    const auto rows = read_csv(out / "ablation.csv");
    REQUIRE(rows.size() == 1 + 3 * 2 + 3);
    CHECK(rows[0] == std::vector<std::string>{"mask", "seed", "mAP", "rank1", "rank5", "rank10", "status"});
    std::map<std::string, std::vector<std::vector<std::string>>> by_mask;
    for (std::size_t i = 1; i < rows.size(); ++i) by_mask[rows[i][0]].push_back(rows[i]);
    CHECK(by_mask.size() == 3);
    for (const auto& [mask, rs] : by_mask) {
        REQUIRE(rs.size() == 3);
        CHECK(rs[2][1] == "mean");
        for (std::size_t col = 2; col < 6; ++col) {
            const double mean = (std::stod(rs[0][col]) + std::stod(rs[1][col])) / 2.0;
            CHECK(std::stod(rs[2][col]) == Catch::Approx(mean).margin(1e-12));
        }
        CHECK(rs[0][6] == "ok");
    }
    CHECK(fs::exists(out / "000001_seed2" / "trace.csv"));

    const auto bad = kTmp / "ablate_bad";
    fs::remove_all(bad);
    const auto r2 = run("ablate --profile desk --epochs 1 --masks 111111,0011 --seeds 1 --dataset " + q(dataset()) +
                        " --out " + q(bad));
    CHECK(r2.code == 0);
    const auto rows2 = read_csv(bad / "ablation.csv");
    REQUIRE(rows2.size() == 5);
    CHECK(rows2[3][0] == "0011");
    CHECK(rows2[3][6].rfind("error", 0) == 0);
}

TEST_CASE("export-curves writes images and a tidy table") {
    const auto t = kTmp / "curves_trace";
    fs::remove_all(t);
    REQUIRE(run(train_args(t)).code == 0);
    const auto trace = read_csv(t / "trace.csv");
    const std::size_t n = trace.size() - 1;
    const auto r = run("export-curves --trace " + q(t / "trace.csv"));
    REQUIRE(r.code == 0);
    const auto out = t / "curves";
    for (const char* f : {"loss.png", "ema.png", "p.png", "focal_weight.png", "lr.png", "phase_timeline.png"})
        CHECK(fs::exists(out / f));
    CHECK(png_width(out / "phase_timeline.png") == 2 * n);
    const auto tidy = read_csv(out / "tidy.csv");
    CHECK(tidy.size() - 1 == n * 10);
    CHECK(tidy[0] == std::vector<std::string>{"tau", "quantity", "value"});

    const auto empty = kTmp / "empty.csv";
    std::ofstream(empty) << "tau,phase,L_id,L_tp,k_id,k_tp,p_id,p_tp,FL_id,FL_tp,lr\n";
    CHECK(run("export-curves --trace " + q(empty)).code == 2);

    const auto bad = kTmp / "bad.csv";
    std::ofstream(bad) << "tau,phase,L_id,L_tp,k_id,k_tp,p_id,p_tp,FL_id,FL_tp,lr\n"
                          "1,IdOnly,1,,1,,1,1,0,0,0.01\n"
                          "2,Sideways,1,,1,,1,1,0,0,0.01\n";
    const auto rb = run("export-curves --trace " + q(bad));
    CHECK(rb.code == 2);
    CHECK(rb.err.find("row 3") != std::string::npos);
    CHECK(run("export-curves --trace " + q(kTmp / "missing.csv")).code == 2);
}
