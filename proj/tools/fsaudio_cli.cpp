// Command-line front end; talks to the harness only through the C API.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "fsa/fsaudio.h"

namespace {

struct Failure {
    fsa_status status;
    std::string message;
};

void check(fsa_status s) {
    if (s != FSA_OK) throw Failure{s, fsa_last_error()};
}

void print_and_free(char* text) {
    if (!text) return;
    std::cout << text << '\n';
    fsa_string_free(text);
}

void progress_to_stderr(const char* message, void*) { std::fprintf(stderr, "%s\n", message); }

int error_record(const std::string& command, fsa_status status, const std::string& message) {
    const nlohmann::json record{
        {"error", {{"command", command}, {"code", static_cast<int>(status)}, {"kind", fsa_status_name(status)},
                   {"message", message}}}};
    std::cerr << record.dump() << '\n';
    return status == FSA_OK ? 1 : static_cast<int>(status);
}

class Config {
public:
    Config() { check(fsa_config_new(&handle_)); }
    ~Config() { fsa_config_free(handle_); }
    Config(const Config&) = delete;
    Config& operator=(const Config&) = delete;

    void load(const std::string& path) {
        fsa_config* loaded = nullptr;
        check(fsa_config_load(path.c_str(), &loaded));
        fsa_config_free(handle_);
        handle_ = loaded;
    }
    void set(const std::string& key, const std::string& value) {
        check(fsa_config_set(handle_, key.c_str(), value.c_str()));
    }
    std::string get(const std::string& key) const {
        char* v = nullptr;
        check(fsa_config_get(handle_, key.c_str(), &v));
        std::string out(v);
        fsa_string_free(v);
        return out;
    }
    const fsa_config* get() const { return handle_; }

private:
    fsa_config* handle_ = nullptr;
};

std::string join(const std::vector<std::string>& items) {
    std::string out;
    for (const auto& s : items) out += (out.empty() ? "" : ",") + s;
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Few-shot audio classification benchmark harness"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(fsa_version()));

    std::string config_path, workspace;
    std::vector<std::string> overrides;
    bool quiet = false;
    app.add_option("--config", config_path, "key = value configuration file");
    app.add_option("--set", overrides, "override a config value (key=value), repeatable")->take_all();
    app.add_option("--workspace", workspace, "root for every relative path");
    app.add_flag("--quiet", quiet, "suppress progress lines");

    auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
    std::string preset, out_dir;
    double noise = -1.0;
    synth->add_option("preset", preset, "synth-fixed, synth-var or synth-train")->required();
    synth->add_option("--out", out_dir, "output directory (default data/<preset> under the workspace)");
    synth->add_option("--noise", noise, "noise standard deviation (default: the preset's)");

    auto* prepare = app.add_subcommand("prepare", "ingest, prune and cache spectrograms for one dataset");
    std::string dataset, manifest;
    double max_duration = -1.0;
    long long min_class_count = -1;
    prepare->add_option("dataset", dataset, "dataset id")->required();
    prepare->add_option("--manifest", manifest, "manifest path (default data/<dataset>/manifest.tsv)");
    prepare->add_option("--max-duration", max_duration, "drop clips longer than this many seconds");
    prepare->add_option("--min-class-count", min_class_count, "drop classes with fewer clips");

    auto* split = app.add_subcommand("split", "write a class-disjoint train/val/test split");
    std::uint64_t split_seed = 1;
    std::string ratios = "7/1/2";
    split->add_option("dataset", dataset, "dataset id")->required();
    split->add_option("--seed", split_seed, "split seed")->required();
    split->add_option("--ratios", ratios, "train/val/test ratios")->capture_default_str();

    auto* train = app.add_subcommand("train", "train one learner, keeping the best-on-validation checkpoint");
    std::string algo, mode;
    std::vector<std::string> train_sets;
    train->add_option("--algo", algo, "random, protonet, fo_maml, fo_meta_curvature, simpleshot, meta_baseline");
    train->add_option("--mode", mode, "single, joint_within or joint_free");
    train->add_option("--datasets", train_sets, "training datasets")->delimiter(',');

    auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint on test splits and held-out datasets");
    std::string checkpoint;
    long long n_tasks = -1;
    std::vector<std::string> eval_sets, heldout_sets;
    evaluate->add_option("--checkpoint", checkpoint, "checkpoint (default: the run directory's best)");
    evaluate->add_option("--n-tasks", n_tasks, "tasks per dataset");
    evaluate->add_option("--datasets", eval_sets, "datasets tested on their test split")->delimiter(',');
    evaluate->add_option("--heldout", heldout_sets, "datasets tested on all classes")->delimiter(',');

    auto* sweep = app.add_subcommand("sweep", "accuracy over a grid of shots or ways");
    std::string shots, ways;
    sweep->add_option("--checkpoint", checkpoint, "checkpoint (default: the run directory's best)");
    sweep->add_option("--n-tasks", n_tasks, "tasks per grid point");
    auto* shots_opt = sweep->add_option("--shots", shots, "k values, e.g. 1..30");
    auto* ways_opt = sweep->add_option("--ways", ways, "N values, e.g. 5..30");
    shots_opt->excludes(ways_opt);
    sweep->add_option("--datasets", eval_sets, "datasets tested on their test split")->delimiter(',');
    sweep->add_option("--heldout", heldout_sets, "datasets tested on all classes")->delimiter(',');

    auto* report = app.add_subcommand("report", "average-rank tables and plot data from run directories");
    std::vector<std::string> run_dirs;
    std::string report_out = "report";
    report->add_option("runs", run_dirs, "run directories")->required();
    report->add_option("--out", report_out, "output directory")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return error_record("parse", FSA_ERR_INVALID_ARGUMENT, e.what());
    }
    const std::string command = app.get_subcommands().front()->get_name();
    if (!quiet) fsa_set_progress(progress_to_stderr, nullptr);

    try {
        Config config;
        if (!config_path.empty()) config.load(config_path);
        for (const auto& o : overrides) {
            const auto eq = o.find('=');
            if (eq == std::string::npos) throw Failure{FSA_ERR_INVALID_ARGUMENT, "--set expects key=value, got '" + o + "'"};
            config.set(o.substr(0, eq), o.substr(eq + 1));
        }
        if (!workspace.empty()) config.set("workspace", workspace);
        check(fsa_config_validate(config.get()));
        char* out = nullptr;

        if (command == "synth") {
            if (out_dir.empty()) {
                const std::string ws = config.get("workspace");
                out_dir = (ws.empty() ? std::string(".") : ws) + "/data/" + preset;
            }
            check(fsa_synth(preset.c_str(), out_dir.c_str(), noise, &out));
        } else if (command == "prepare") {
            if (!manifest.empty()) config.set("manifest." + dataset, manifest);
            if (max_duration >= 0) config.set("prune.max_duration", std::to_string(max_duration));
            if (min_class_count >= 0) config.set("prune.min_class_count", std::to_string(min_class_count));
            check(fsa_prepare(config.get(), dataset.c_str(), &out));
        } else if (command == "split") {
            double r[3];
            char tail = 0;
            if (std::sscanf(ratios.c_str(), "%lf/%lf/%lf%c", &r[0], &r[1], &r[2], &tail) != 3)
                throw Failure{FSA_ERR_INVALID_ARGUMENT, "--ratios expects a/b/c, got '" + ratios + "'"};
            check(fsa_split(config.get(), dataset.c_str(), split_seed, r[0], r[1], r[2], &out));
        } else if (command == "train") {
            if (!algo.empty()) config.set("algorithm", algo);
            if (!mode.empty()) config.set("sampler.mode", mode);
            if (!train_sets.empty()) config.set("datasets", join(train_sets));
            check(fsa_train(config.get(), &out));
        } else if (command == "evaluate" || command == "sweep") {
            if (n_tasks >= 0) config.set("eval.n_tasks", std::to_string(n_tasks));
            if (!eval_sets.empty()) config.set("eval_datasets", join(eval_sets));
            if (!heldout_sets.empty()) config.set("heldout_datasets", join(heldout_sets));
            const char* ckpt = checkpoint.empty() ? nullptr : checkpoint.c_str();
            if (command == "evaluate") {
                check(fsa_evaluate(config.get(), ckpt, &out));
            } else {
                if (shots.empty() && ways.empty())
                    throw Failure{FSA_ERR_INVALID_ARGUMENT, "sweep needs --shots or --ways"};
                if (!shots.empty()) config.set("sweep.shots", shots);
                if (!ways.empty()) config.set("sweep.ways", ways);
                check(fsa_sweep(config.get(), ckpt, shots.empty() ? "ways" : "shots", &out));
            }
        } else if (command == "report") {
            std::vector<const char*> dirs;
            for (const auto& d : run_dirs) dirs.push_back(d.c_str());
            check(fsa_report(dirs.data(), dirs.size(), report_out.c_str(), &out));
        }
        print_and_free(out);
    } catch (const Failure& f) {
        return error_record(command, f.status, f.message);
    }
    return 0;
}
