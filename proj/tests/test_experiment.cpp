#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <json.hpp>

#include "fsa/fsaudio.h"
#include "fsa/synthbench.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string take(char* s) {
    std::string out = s ? s : "";
    fsa_string_free(s);
    return out;
}

// A small workspace with two synthetic corpora, prepared and split once.
struct Workspace {
    fs::path root;

    Workspace() {
        root = fs::temp_directory_path() / "fsa_test_experiment";
        fs::remove_all(root);
        for (auto [id, classes, seed] : {std::tuple{"toy", 30, 11}, std::tuple{"held", 6, 12}}) {
            fsa::SynthSpec s;
            s.dataset_id = id;
            s.n_classes = classes;
            s.clips_per_class.assign(static_cast<std::size_t>(classes), 5);
            s.duration = {fsa::DurationDist::Kind::fixed, 0.5, 0.5};
            s.sample_rate = 8000;
            s.f0_hi_hz = 3000;
            s.seed = static_cast<std::uint64_t>(seed);
            fsa::generate_synthetic_dataset(s, root / "data" / id);
        }
        fsa_config* c = config();
        for (const char* id : {"toy", "held"}) {
            REQUIRE(fsa_prepare(c, id, nullptr) == FSA_OK);
            REQUIRE(fsa_split(c, id, 1, 7, 1, 2, nullptr) == FSA_OK);
        }
        fsa_config_free(c);
    }
    ~Workspace() { fs::remove_all(root); }

    fsa_config* config(const std::string& run = "runs/a") const {
        fsa_config* c = nullptr;
        REQUIRE(fsa_config_new(&c) == FSA_OK);
        const std::pair<const char*, std::string> values[] = {
            {"workspace", root.string()},
            {"run_dir", run},
            {"datasets", "toy"},
            {"heldout_datasets", "held"},
            {"spec.sample_rate", "8000"},
            {"spec.n_mels", "16"},
            {"spec.window_ms", "50"},
            {"spec.hop_ms", "50"},
            {"spec.clip_length_s", "0.5"},
            {"model.conv_channels", "4,4"},
            {"model.rnn_hidden", "8"},
            {"model.head_width", "8"},
            {"train.n_way", "3"},
            {"train.q_queries", "2"},
            {"train.steps", "20"},
            {"train.meta_batch", "2"},
            {"train.val_every", "10"},
            {"train.val_tasks", "20"},
            {"inner.steps", "2"},
            {"conventional.epochs", "2"},
            {"metabaseline.steps", "10"},
            {"eval.n_way", "3"},
            {"eval.q_queries", "3"},
            {"eval.n_tasks", "40"},
        };
        for (const auto& [k, v] : values) REQUIRE(fsa_config_set(c, k, v.c_str()) == FSA_OK);
        return c;
    }
};

Workspace& workspace() {
    static Workspace w;
    return w;
}

}  // namespace

TEST_CASE("configuration errors are reported before any work") {
    fsa_config* c = nullptr;
    REQUIRE(fsa_config_new(&c) == FSA_OK);
    CHECK(fsa_config_set(c, "no.such.key", "1") == FSA_ERR_INVALID_ARGUMENT);
    CHECK(std::string(fsa_last_error()).find("no.such.key") != std::string::npos);
    CHECK(fsa_config_set(c, "train.n_way", "five") == FSA_OK);
    CHECK(fsa_config_validate(c) == FSA_ERR_INVALID_ARGUMENT);
    CHECK(fsa_train(c, nullptr) == FSA_ERR_INVALID_ARGUMENT);
    CHECK(fsa_config_set(c, "train.n_way", "5") == FSA_OK);
    CHECK(fsa_config_set(c, "algorithm", "svm") == FSA_OK);
    CHECK(fsa_config_validate(c) == FSA_ERR_INVALID_ARGUMENT);
    CHECK(fsa_config_set(c, "algorithm", "protonet") == FSA_OK);
    CHECK(fsa_config_set(c, "sweep.shots", "5..1") == FSA_OK);
    CHECK(fsa_config_validate(c) == FSA_ERR_INVALID_ARGUMENT);
    CHECK(fsa_config_set(c, "sweep.shots", "1..3,10") == FSA_OK);
    CHECK(fsa_config_validate(c) == FSA_OK);
    // training without data fails cleanly and leaves no run directory
    const fs::path empty_ws = fs::temp_directory_path() / "fsa_test_empty_ws";
    fs::remove_all(empty_ws);
    CHECK(fsa_config_set(c, "workspace", empty_ws.string().c_str()) == FSA_OK);
    CHECK(fsa_train(c, nullptr) == FSA_ERR_INVALID_ARGUMENT);
    CHECK(fsa_config_set(c, "datasets", "absent") == FSA_OK);
    CHECK(fsa_train(c, nullptr) != FSA_OK);
    CHECK(!fs::exists(empty_ws / "runs"));
    CHECK(fsa_config_new(nullptr) == FSA_ERR_INVALID_ARGUMENT);
    fsa_config_free(c);

    const fs::path file = fs::temp_directory_path() / "fsa_bad.cfg";
    std::ofstream(file) << "seed = 3\nthis line has no equals sign\n";
    CHECK(fsa_config_load(file.string().c_str(), &c) == FSA_ERR_INVALID_ARGUMENT);
    CHECK(fsa_config_load("/nonexistent/x.cfg", &c) == FSA_ERR_NOT_FOUND);
    fs::remove(file);
}

TEST_CASE("cache root precedence: explicit value, then environment, then default") {
    fsa_config* c = nullptr;
    REQUIRE(fsa_config_new(&c) == FSA_OK);
    auto cache_line = [&] {
        const std::string text = take([&] {
            char* t = nullptr;
            REQUIRE(fsa_config_resolved(c, &t) == FSA_OK);
            return t;
        }());
        const auto at = text.find("cache_root = ");
        return text.substr(at + 13, text.find('\n', at) - at - 13);
    };
    unsetenv("FSA_CACHE_ROOT");
    CHECK(cache_line() == "cache");
    setenv("FSA_CACHE_ROOT", "/tmp/from_env", 1);
    CHECK(cache_line() == "/tmp/from_env");
    REQUIRE(fsa_config_set(c, "cache_root", "/tmp/explicit") == FSA_OK);
    CHECK(cache_line() == "/tmp/explicit");
    unsetenv("FSA_CACHE_ROOT");
    fsa_config_free(c);
}

TEST_CASE("split generation is idempotent") {
    auto& ws = workspace();
    const auto before = slurp(ws.root / "splits" / "toy.split");
    fsa_config* c = ws.config();
    char* out = nullptr;
    REQUIRE(fsa_split(c, "toy", 1, 7, 1, 2, &out) == FSA_OK);
    const auto summary = json::parse(take(out));
    CHECK(summary["train"] == 21);
    CHECK(summary["val"] == 3);
    CHECK(summary["test"] == 6);
    CHECK(slurp(ws.root / "splits" / "toy.split") == before);
    // re-preparing writes nothing new
    REQUIRE(fsa_prepare(c, "toy", &out) == FSA_OK);
    CHECK(json::parse(take(out))["files_written"] == 0);
    fsa_config_free(c);
}

TEST_CASE("evaluating a missing checkpoint fails without partial outputs") {
    auto& ws = workspace();
    fsa_config* c = ws.config("runs/never");
    CHECK(fsa_evaluate(c, nullptr, nullptr) == FSA_ERR_NOT_FOUND);
    CHECK(std::string(fsa_last_error()).find("checkpoint") != std::string::npos);
    CHECK(!fs::exists(ws.root / "runs" / "never"));
    CHECK(fsa_sweep(c, nullptr, "shots", nullptr) == FSA_ERR_NOT_FOUND);
    CHECK(!fs::exists(ws.root / "runs" / "never"));
    fsa_config_free(c);
}

TEST_CASE("train, evaluate, and reproduce from the config snapshot") {
    auto& ws = workspace();
    fsa_config* c = ws.config("runs/a");
    char* out = nullptr;
    REQUIRE(fsa_train(c, &out) == FSA_OK);
    const auto trained = json::parse(take(out));
    CHECK(trained["algorithm"] == "protonet");
    CHECK(fs::exists(ws.root / "runs/a/checkpoints/best.ckpt"));
    CHECK(fs::exists(ws.root / "runs/a/config.resolved"));
    REQUIRE(fsa_evaluate(c, nullptr, &out) == FSA_OK);
    const auto reports = json::parse(take(out));
    REQUIRE(reports.size() == 2);
    for (const auto& r : reports) {
        CHECK(r["n_tasks"] == 40);
        CHECK(r["per_task_accuracies"].size() == 40);
    }
    CHECK(reports[0]["dataset_id"] == "toy");
    CHECK(reports[1]["dataset_id"] == "held");
    CHECK(reports[1]["metadata"]["partition"] == "all");
    fsa_config_free(c);

    // A second run driven only by the snapshot (pointed at another directory).
    fsa_config* again = nullptr;
    REQUIRE(fsa_config_load((ws.root / "runs/a/config.resolved").string().c_str(), &again) == FSA_OK);
    REQUIRE(fsa_config_set(again, "run_dir", "runs/b") == FSA_OK);
    REQUIRE(fsa_train(again, nullptr) == FSA_OK);
    REQUIRE(fsa_evaluate(again, nullptr, nullptr) == FSA_OK);
    for (const char* f : {"reports/toy.json", "reports/held.json", "train_log.jsonl", "checkpoints/best.ckpt"})
        CHECK_MESSAGE(slurp(ws.root / "runs/a" / f) == slurp(ws.root / "runs/b" / f), f);
    fsa_config_free(again);
}

TEST_CASE("unset eval_datasets means the training datasets, explicit empty means none") {
    auto& ws = workspace();
    fsa_config* c = ws.config("runs/e");
    char* text = nullptr;
    REQUIRE(fsa_config_resolved(c, &text) == FSA_OK);
    CHECK(take(text).find("\neval_datasets = toy\n") != std::string::npos);
    REQUIRE(fsa_config_set(c, "eval_datasets", "") == FSA_OK);
    char* out = nullptr;
    const auto ckpt = (ws.root / "runs/a/checkpoints/best.ckpt").string();
    REQUIRE(fsa_evaluate(c, ckpt.c_str(), &out) == FSA_OK);
    const auto reports = json::parse(take(out));
    REQUIRE(reports.size() == 1);
    CHECK(reports[0]["dataset_id"] == "held");
    fsa_config_free(c);
}

TEST_CASE("sweeps and the report") {
    auto& ws = workspace();
    fsa_config* c = ws.config("runs/a");
    REQUIRE(fs::exists(ws.root / "runs/a/checkpoints/best.ckpt"));
    REQUIRE(fsa_config_set(c, "sweep.shots", "1..2") == FSA_OK);
    REQUIRE(fsa_config_set(c, "sweep.ways", "3,4,7") == FSA_OK);
    char* out = nullptr;
    REQUIRE(fsa_sweep(c, nullptr, "shots", &out) == FSA_OK);
    CHECK(json::parse(take(out)).size() == 4);
    REQUIRE(fsa_sweep(c, nullptr, "ways", &out) == FSA_OK);
    const auto ways = json::parse(take(out));
    REQUIRE(ways.size() == 6);
    CHECK(ways[2]["available"] == false);  // 6 test classes cannot fill 7 ways
    CHECK(fs::exists(ws.root / "runs/a/plots/shots_toy.tsv"));
    CHECK(fsa_sweep(c, nullptr, "depth", nullptr) == FSA_ERR_INVALID_ARGUMENT);

    const std::string run = (ws.root / "runs/a").string();
    const char* dirs[] = {run.c_str()};
    const std::string report_dir = (ws.root / "report").string();
    REQUIRE(fsa_report(dirs, 1, report_dir.c_str(), &out) == FSA_OK);
    const auto files = json::parse(take(out));
    CHECK(files["plots"].size() == 2);
    const auto text = slurp(files["text"].get<std::string>());
    CHECK(text.find("avg rank") != std::string::npos);
    CHECK(text.find("held") != std::string::npos);
    CHECK(fsa_report(dirs, 0, report_dir.c_str(), nullptr) == FSA_ERR_INVALID_ARGUMENT);
    fsa_config_free(c);
}

TEST_CASE("every learner trains and evaluates through the C interface") {
    auto& ws = workspace();
    for (const char* algo : {"random", "fo_maml", "fo_meta_curvature", "simpleshot", "meta_baseline"}) {
        CAPTURE(algo);
        const std::string run = std::string("runs/") + algo;
        fsa_config* c = ws.config(run);
        REQUIRE(fsa_config_set(c, "algorithm", algo) == FSA_OK);
        char* out = nullptr;
        REQUIRE(fsa_train(c, &out) == FSA_OK);
        CHECK(json::parse(take(out))["algorithm"] == algo);
        REQUIRE(fsa_evaluate(c, nullptr, &out) == FSA_OK);
        const auto reports = json::parse(take(out));
        for (const auto& r : reports) {
            CHECK(r["algorithm"] == algo);
            CHECK(r["mean_accuracy"].get<double>() >= 0.0);
        }
        if (std::string(algo) == "fo_maml") CHECK(fsa_sweep(c, nullptr, "ways", nullptr) == FSA_ERR_INVALID_ARGUMENT);
        fsa_config_free(c);
    }
}

TEST_CASE("status names and version") {
    CHECK(std::string(fsa_status_name(FSA_ERR_NOT_FOUND)) == "not_found");
    CHECK(std::string(fsa_version()).size() > 0);
}
