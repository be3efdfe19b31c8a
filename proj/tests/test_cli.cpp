// End-to-end checks of the utf binary: artifact flow, exit codes, JSON mode,
// determinism of the demo's reproducible fields.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>

// Eigen (via oracles.hpp) must precede httplib: the resolver headers that
// httplib drags in define a `res` macro that corrupts Eigen's templates.
#include "oracles.hpp"
#include "utf/detector.hpp"
#include "utf/fingerprint.hpp"

#include "doctest.h"
#include "httplib.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const char* kCli = UTF_CLI_PATH;

fs::path work_dir() {
    const fs::path dir = fs::temp_directory_path() / "utf_cli_tests";
    fs::create_directories(dir);
    return dir;
}

int run(const std::string& args, const fs::path& stdout_file = {}) {
    std::string cmd = std::string(kCli) + " " + args;
    if (!stdout_file.empty()) cmd += " > " + stdout_file.string();
    cmd += " 2> /dev/null";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

nlohmann::json read_json(const fs::path& p) {
    std::ifstream in(p);
    REQUIRE(in.is_open());
    nlohmann::json doc;
    in >> doc;
    return doc;
}

// Small demo: enough training to embed and verify, quick enough for CI.
std::string demo_args(const fs::path& out_dir, int seed) {
    return "demo --seed " + std::to_string(seed) + " --out-dir " + out_dir.string() +
           " --pretrain-sequences 200 --pretrain-epochs 2 --trials 40 --json";
}

}  // namespace

TEST_CASE("missing input file exits 2") {
    CHECK(run("detect --matrix /nonexistent.ufpm --unused 1 --report /tmp/r.json") == 2);
    CHECK(run("verify --pair /nonexistent.json --model /nonexistent.ufpc") == 2);
}

TEST_CASE("bad flags exit 2") {
    CHECK(run("detect") == 2);
    CHECK(run("frobnicate") == 2);
}

TEST_CASE("demo pipeline, artifact reuse, exit codes") {
    const fs::path dir = work_dir() / "flow";
    fs::remove_all(dir);
    const fs::path metrics_a = work_dir() / "metrics_a.json";
    REQUIRE(run(demo_args(dir, 1), metrics_a) == 0);

    // demo emitted the full metric report on stdout
    const auto metrics = read_json(metrics_a);
    CHECK(metrics.at("effectiveness_fsr").get<double>() == 100.0);
    CHECK(metrics.at("provenance").at("seed").get<int>() == 1);

    // artifacts exist
    for (const char* name : {"pretrain.txt", "heldout.txt", "downstream_a.txt", "downstream_b.txt",
                             "vanilla.ufpc", "fingerprinted.ufpc",
                             "fingerprinted.ufpc.stats.json", "unembedding.ufpm", "report.json",
                             "distances.ufpm", "pair.json", "metrics.json"})
        CHECK(fs::exists(dir / name));

    SUBCASE("verify matched exits 0, sampled mode too") {
        CHECK(run("verify --pair " + (dir / "pair.json").string() + " --model " +
                  (dir / "fingerprinted.ufpc").string()) == 0);
        CHECK(run("verify --pair " + (dir / "pair.json").string() + " --model " +
                  (dir / "fingerprinted.ufpc").string() + " --mode sampled --sample-seed 3") == 0);
    }

    SUBCASE("verify against the vanilla model exits 3") {
        CHECK(run("verify --pair " + (dir / "pair.json").string() + " --model " +
                  (dir / "vanilla.ufpc").string()) == 3);
    }

    SUBCASE("detect re-runs from the exported matrix") {
        const fs::path report = work_dir() / "re_report.json";
        const int code = run("detect --matrix " + (dir / "unembedding.ufpm").string() +
                                 " --unused 511,510,509 --percentile 0.05 --report " +
                                 report.string() + " --json",
                             work_dir() / "detect_out.json");
        CHECK(code == 0);
        const auto out = read_json(work_dir() / "detect_out.json");
        CHECK(out.at("flagged_count").get<int>() >= 20);
    }

    SUBCASE("fingerprint and embed re-run from persisted artifacts") {
        const fs::path pair2 = work_dir() / "pair2.json";
        CHECK(run("fingerprint --report " + (dir / "report.json").string() +
                  " --seed 99 --pair " + pair2.string()) == 0);
        const fs::path model2 = work_dir() / "fp2.ufpc";
        CHECK(run("embed --model " + (dir / "vanilla.ufpc").string() + " --pair " +
                  pair2.string() + " --out " + model2.string()) == 0);
        CHECK(run("verify --pair " + pair2.string() + " --model " + model2.string()) == 0);
        // the original pair is not embedded in the new model
        CHECK(run("verify --pair " + pair2.string() + " --model " +
                  (dir / "vanilla.ufpc").string()) == 3);
    }

    SUBCASE("evaluate reproduces the metric suite from artifacts") {
        const fs::path out = work_dir() / "eval.json";
        const int code = run(
            "evaluate --vanilla " + (dir / "vanilla.ufpc").string() + " --model " +
            (dir / "fingerprinted.ufpc").string() + " --pair " + (dir / "pair.json").string() +
            " --heldout " + (dir / "heldout.txt").string() + " --downstream-a " +
            (dir / "downstream_a.txt").string() + " --trials 40 --json", out);
        CHECK(code == 0);
        const auto doc = read_json(out);
        CHECK(doc.at("effectiveness_fsr").get<double>() == 100.0);
        CHECK(doc.at("persistence").size() == 1);
    }
}

TEST_CASE("detect subcommand reproduces the library result on a golden matrix") {
    const fs::path dir = work_dir() / "golden";
    fs::create_directories(dir);
    const utf::UnembeddingMatrix m = oracle::random_matrix(300, 24, 4242, 3.0);
    utf::save_matrix(m, dir / "golden.ufpm");

    const fs::path out = dir / "detect_out.json";
    REQUIRE(run("detect --matrix " + (dir / "golden.ufpm").string() +
                    " --unused 299,298 --percentile 0.05 --report " +
                    (dir / "golden_report.json").string() + " --json",
                out) == 0);

    const utf::DetectionReport expected = utf::detect(m, {299, 298}, 0.05);
    const auto stdout_doc = read_json(out);
    CHECK(stdout_doc.at("tau").get<double>() == expected.tau);
    CHECK(stdout_doc.at("flagged_count").get<std::size_t>() == expected.flagged.size());

    const utf::DetectionReport loaded = utf::load_report(dir / "golden_report.json");
    CHECK(loaded.tau == expected.tau);
    CHECK(loaded.flagged == expected.flagged);
    CHECK(loaded.digest() == expected.digest());
}

TEST_CASE("verify against a remote completions endpoint") {
    const fs::path dir = work_dir() / "remote";
    fs::create_directories(dir);

    utf::FingerprintPair pair;
    pair.trigger = {500, 470, 460, 510, 455, 480, 490, 501, 465, 472, 505};
    pair.target = {481, 482, 483, 484, 485};
    utf::save_pair(pair, dir / "pair.json");

    httplib::Server server;
    std::string reply = "481 482 483 484 485 12 9";
    server.Post("/v1/completions", [&](const httplib::Request&, httplib::Response& res) {
        nlohmann::json doc = {{"choices", {{{"text", reply}}}}};
        res.set_content(doc.dump(), "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread listener([&] { server.listen_after_bind(); });
    server.wait_until_ready();
    const std::string endpoint = "http://127.0.0.1:" + std::to_string(port);

    CHECK(run("verify --pair " + (dir / "pair.json").string() + " --endpoint " + endpoint) == 0);
    reply = "nothing to see here";
    CHECK(run("verify --pair " + (dir / "pair.json").string() + " --endpoint " + endpoint) == 3);

    server.stop();
    listener.join();

    // dead endpoint: a transport failure is an error, not a negative
    CHECK(run("verify --pair " + (dir / "pair.json").string() +
              " --endpoint http://127.0.0.1:1 --timeout 2") == 1);
}

TEST_CASE("demo is deterministic apart from wall-clock fields") {
    const fs::path dir_a = work_dir() / "det_a";
    const fs::path dir_b = work_dir() / "det_b";
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
    REQUIRE(run(demo_args(dir_a, 5)) == 0);
    REQUIRE(run(demo_args(dir_b, 5)) == 0);

    auto scrub = [](nlohmann::json doc) {
        doc.erase("efficiency_seconds");
        doc["provenance"].erase("timings");
        return doc.dump();
    };
    const std::string a = scrub(read_json(dir_a / "metrics.json"));
    const std::string b = scrub(read_json(dir_b / "metrics.json"));
    CHECK(a == b);
}
