#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "spa/adapt.hpp"
#include "spa/augment.hpp"
#include "spa/cli.hpp"
#include "spa/eval.hpp"
#include "support/fixture.hpp"

namespace fs = std::filesystem;
using namespace spa;

namespace {

struct Run {
    int code = 0;
    std::string out;
    std::string err;
};

Run run(std::vector<std::string> args) {
    std::ostringstream out;
    std::ostringstream err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / "spa_cli_test" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is);
    return {std::istreambuf_iterator<char>(is), {}};
}

std::string checkpoint() { return (spa::testing::fixture_dir() / "source.ckpt").string(); }

double summary_value(const fs::path& summary, const std::string& key) {
    std::istringstream is(slurp(summary));
    std::string line;
    while (std::getline(is, line)) {
        if (line.rfind(key + " = ", 0) == 0) return std::stod(line.substr(key.size() + 3));
    }
    FAIL("missing key " << key);
    return 0.0;
}

}  // namespace

TEST_CASE("usage errors exit with 1") {
    CHECK(run({}).code == kExitUsage);
    CHECK(run({"--help"}).code == kExitOk);
    CHECK(run({"frobnicate"}).code == kExitUsage);
    const auto dir = fresh_dir("usage").string();
    const Run bad_key = run({"gen-data", "--out-dir", dir, "--set", "bogus=1"});
    CHECK(bad_key.code == kExitUsage);
    CHECK(bad_key.err.find("bogus") != std::string::npos);
    CHECK(run({"gen-data", "--out-dir", dir, "--set", "alpha"}).code == kExitUsage);
    CHECK(run({"gen-data", "--out-dir", dir, "--config", dir + "/missing.cfg"}).code != kExitOk);
}

TEST_CASE("gen-data") {
    const auto a = fresh_dir("gen_a");
    const auto b = fresh_dir("gen_b");
    const auto c = fresh_dir("gen_c");
    const std::vector<std::string> common = {"gen-data", "--n", "40", "--image-size", "24"};
    auto with = [&](const fs::path& dir, const std::string& seed) {
        auto args = common;
        args.insert(args.end(), {"--out-dir", dir.string(), "--seed", seed});
        return run(args);
    };
    REQUIRE(with(a, "3").code == kExitOk);
    REQUIRE(with(b, "3").code == kExitOk);
    REQUIRE(with(c, "4").code == kExitOk);
    CHECK(load_dataset(a / "dataset.bin").size() == 40);
    CHECK(slurp(a / "dataset.bin") == slurp(b / "dataset.bin"));
    CHECK(slurp(a / "dataset.bin") != slurp(c / "dataset.bin"));
    CHECK(fs::exists(a / "manifest.txt"));
    const std::string cfg = slurp(a / "config.txt");
    CHECK(cfg.find("dataset_size = 40") != std::string::npos);
    CHECK(cfg.find("seed = 3") != std::string::npos);

    const Run tiny = run({"gen-data", "--image-size", "2", "--out-dir", fresh_dir("gen_tiny").string()});
    CHECK(tiny.code == kExitRuntime);
    CHECK(tiny.err.find("image_size") != std::string::npos);
}

TEST_CASE("default dataset holds 3000 parseable records") {
    const auto records = load_dataset(spa::testing::fixture_dir() / "dataset.bin");
    CHECK(records.size() == 3000);
    CHECK(records.front().image.height == 32);
}

TEST_CASE("train-source") {
    const auto dir = fresh_dir("train");
    CHECK(run({"train-source", "--dataset", (dir / "none.bin").string(), "--out-dir", dir.string()}).code == kExitRuntime);

    REQUIRE(run({"gen-data", "--n", "20", "--image-size", "24", "--out-dir", dir.string()}).code == kExitOk);
    REQUIRE(run({"train-source", "--dataset", (dir / "dataset.bin").string(), "--epochs", "0", "--out-dir", dir.string()})
                .code == kExitOk);
    const ModelState trained = load_checkpoint(dir / "source.ckpt");
    ModelConfig mc;
    mc.height = 24;
    mc.width = 24;
    const ModelState init = make_model(mc, derive_seed(0, "init"));
    for (std::size_t i = 0; i < init.params.size(); ++i) {
        for (std::size_t j = 0; j < init.params[i].value.size(); ++j) {
            CHECK(trained.params[i].value[j] == static_cast<double>(static_cast<float>(init.params[i].value[j])));
        }
    }
    CHECK(fs::exists(dir / "train_log.csv"));
}

TEST_CASE("adapt") {
    const auto dir = fresh_dir("adapt_none");
    REQUIRE(run({"adapt", "--checkpoint", checkpoint(), "--method", "none", "--stream-size", "128", "--out-dir",
                 dir.string()})
                .code == kExitOk);
    const ModelState model = load_checkpoint(checkpoint());
    const auto stream = make_stream({CorruptionKind::gaussian_noise, 5}, 0, 128, 32);
    const auto frozen = run_stream(model, stream, AdaptConfig{}, Method::none);
    CHECK(summary_value(dir / "summary.txt", "accuracy") == frozen.accuracy);
    CHECK(slurp(dir / "stream.csv").rfind("batch,loss,selected_frac,acc_running,mae_running\n", 0) == 0);
    CHECK(fs::exists(dir / "config.txt"));

    const auto a = fresh_dir("adapt_a");
    const auto b = fresh_dir("adapt_b");
    for (const auto& d : {a, b}) {
        REQUIRE(run({"adapt", "--checkpoint", checkpoint(), "--method", "spa", "--stream-size", "128", "--no-stop-gradient",
                     "--out-dir", d.string()})
                    .code == kExitOk);
    }
    CHECK(slurp(a / "stream.csv") == slurp(b / "stream.csv"));
    CHECK(slurp(a / "config.txt").find("stop_gradient = false") != std::string::npos);

    const Run bad_method = run({"adapt", "--checkpoint", checkpoint(), "--method", "tent", "--out-dir", dir.string()});
    CHECK(bad_method.code != kExitOk);
    CHECK(bad_method.err.find("tent") != std::string::npos);
    CHECK(run({"adapt", "--checkpoint", checkpoint(), "--set", "image_size=24", "--stream-size", "16", "--out-dir",
               dir.string()})
              .code == kExitRuntime);
    CHECK(run({"adapt", "--checkpoint", (dir / "missing.ckpt").string(), "--out-dir", dir.string()}).code == kExitRuntime);
}

TEST_CASE("rapsd") {
    const auto dir = fresh_dir("rapsd");
    REQUIRE(run({"rapsd", "--images", "64", "--sets", "gaussian_noise:0,gaussian_noise:5", "--out-dir", dir.string()})
                .code == kExitOk);
    std::map<std::string, std::vector<double>> blocks;
    std::istringstream is(slurp(dir / "rapsd.csv"));
    std::string line;
    std::getline(is, line);
    CHECK(line == "set,ring,mean_amplitude");
    while (std::getline(is, line)) {
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 + 1);
        blocks[line.substr(0, c1)].push_back(std::stod(line.substr(c2 + 1)));
    }
    CHECK(blocks.size() == 5);
    for (const auto& [name, values] : blocks) CHECK(values.size() == 17);
    for (std::size_t k = 0; k < 17; ++k) {
        CHECK(std::abs(blocks["gaussian_noise:0"][k] / blocks["clean"][k] - 1.0) <= 1e-9);
    }
    for (std::size_t k = 13; k < 17; ++k) CHECK(blocks["gaussian_noise:5"][k] > blocks["clean"][k]);
    CHECK(run({"rapsd", "--images", "8", "--out-dir", dir.string()}).code == kExitRuntime);
}

TEST_CASE("augment-preview") {
    const auto a = fresh_dir("preview_a");
    const auto b = fresh_dir("preview_b");
    for (const auto& d : {a, b}) REQUIRE(run({"augment-preview", "--seed", "5", "--out-dir", d.string()}).code == kExitOk);
    int images = 0;
    for (const auto& e : fs::directory_iterator(a)) {
        if (e.path().extension() == ".pgm") {
            ++images;
            CHECK(slurp(e.path()) == slurp(b / e.path().filename()));
        }
    }
    CHECK(images == 3);

    const auto id = fresh_dir("preview_id");
    REQUIRE(run({"augment-preview", "--input", (a / "original.pgm").string(), "--m", "0", "--gamma", "0", "--out-dir",
                 id.string()})
                .code == kExitOk);
    const auto orig = read_pgm(id / "original.pgm");
    for (const char* name : {"v_l.pgm", "v_h.pgm"}) {
        const auto view = read_pgm(id / name);
        for (std::size_t i = 0; i < orig.size(); ++i) CHECK(std::abs(view.data[i] - orig.data[i]) <= 1.0 / 255.0 + 1e-12);
    }
    CHECK(run({"augment-preview", "--input", (a / "missing.pgm").string(), "--out-dir", id.string()}).code == kExitRuntime);
    CHECK(run({"augment-preview", "--alpha", "0", "--out-dir", id.string()}).code != kExitOk);
}

TEST_CASE("benchmark") {
    const auto a = fresh_dir("bench_a");
    const auto b = fresh_dir("bench_b");
    const std::vector<std::string> args = {"benchmark", "--checkpoint", checkpoint(), "--methods", "none,spa",
                                           "--corruptions", "gaussian_noise,contrast", "--seeds", "0,1",
                                           "--stream-size", "128"};
    auto with = [&](const fs::path& dir, std::vector<std::string> extra = {}) {
        auto full = args;
        full.insert(full.end(), {"--out-dir", dir.string()});
        full.insert(full.end(), extra.begin(), extra.end());
        return run(full);
    };
    const Run ra = with(a);
    const Run rb = with(b);
    const std::string csv = slurp(a / "benchmark.csv");
    CHECK(csv == slurp(b / "benchmark.csv"));
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 2 * 2);
    const std::string report = slurp(a / "report.txt");
    const bool hard_fail = report.find("FAIL [hard]") != std::string::npos;
    CHECK(ra.code == (hard_fail ? kExitOrdering : kExitOk));
    CHECK(rb.code == ra.code);

    const Run strict = with(fresh_dir("bench_strict"), {"--set", "lift_margin=0.9"});
    CHECK(strict.code == kExitOrdering);
    CHECK(run({"benchmark", "--checkpoint", (a / "missing.ckpt").string(), "--out-dir", a.string()}).code == kExitRuntime);
    CHECK(run({"benchmark", "--checkpoint", checkpoint(), "--methods", "bogus", "--out-dir", a.string()}).code != kExitOk);
}
