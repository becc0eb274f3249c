#include "fsa/fsaudio.h"

#include <cstdlib>
#include <cstring>
#include <mutex>
#include <new>
#include <string>

#include "fsa/experiment.hpp"
#include "fsa/synthbench.hpp"

struct fsa_config {
    fsa::ExperimentConfig config;
};

namespace {

thread_local std::string last_error;

std::mutex progress_mutex;
fsa_progress_fn progress_fn = nullptr;
void* progress_user = nullptr;

void progress(const std::string& line) {
    std::lock_guard<std::mutex> lock(progress_mutex);
    if (progress_fn) progress_fn(line.c_str(), progress_user);
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (!out) throw std::bad_alloc();
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

void emit(char** out, const nlohmann::json& j) {
    if (out) *out = dup_string(j.dump(2));
}

template <typename F>
fsa_status guarded(F&& f) {
    try {
        last_error.clear();
        f();
        return FSA_OK;
    } catch (const fsa::Error& e) {
        last_error = e.what();
        return static_cast<fsa_status>(static_cast<int>(e.code()));
    } catch (const nlohmann::json::exception& e) {
        last_error = e.what();
        return FSA_ERR_FORMAT;
    } catch (const std::filesystem::filesystem_error& e) {
        last_error = e.what();
        return FSA_ERR_IO;
    } catch (const std::exception& e) {
        last_error = e.what();
        return FSA_ERR_INTERNAL;
    } catch (...) {
        last_error = "unknown error";
        return FSA_ERR_INTERNAL;
    }
}

void require(const void* p, const char* what) {
    if (!p) fsa::fail(fsa::ErrorCode::invalid_argument, std::string(what) + " must not be null");
}

}  // namespace

extern "C" {

const char* fsa_version(void) { return "0.1.0"; }

const char* fsa_status_name(fsa_status status) {
    switch (status) {
        case FSA_OK: return "ok";
        case FSA_ERR_INVALID_ARGUMENT: return "invalid_argument";
        case FSA_ERR_IO: return "io";
        case FSA_ERR_FORMAT: return "format";
        case FSA_ERR_NOT_FOUND: return "not_found";
        case FSA_ERR_NUMERICAL: return "numerical";
        case FSA_ERR_UNAVAILABLE: return "unavailable";
        case FSA_ERR_INTERNAL: return "internal";
    }
    return "unknown";
}

const char* fsa_last_error(void) { return last_error.c_str(); }

void fsa_string_free(char* s) { std::free(s); }

fsa_status fsa_config_new(fsa_config** out) {
    return guarded([&] {
        require(out, "out");
        *out = new fsa_config{};
    });
}

fsa_status fsa_config_load(const char* path, fsa_config** out) {
    return guarded([&] {
        require(path, "path");
        require(out, "out");
        *out = new fsa_config{fsa::ExperimentConfig::load(path)};
    });
}

fsa_status fsa_config_set(fsa_config* config, const char* key, const char* value) {
    return guarded([&] {
        require(config, "config");
        require(key, "key");
        require(value, "value");
        config->config.set(key, value);
    });
}

fsa_status fsa_config_get(const fsa_config* config, const char* key, char** value) {
    return guarded([&] {
        require(config, "config");
        require(key, "key");
        require(value, "value");
        *value = dup_string(config->config.get(key));
    });
}

fsa_status fsa_config_validate(const fsa_config* config) {
    return guarded([&] {
        require(config, "config");
        (void)config->config.settings();
    });
}

fsa_status fsa_config_resolved(const fsa_config* config, char** text) {
    return guarded([&] {
        require(config, "config");
        require(text, "text");
        *text = dup_string(config->config.resolved_text());
    });
}

void fsa_config_free(fsa_config* config) { delete config; }

void fsa_set_progress(fsa_progress_fn fn, void* user) {
    std::lock_guard<std::mutex> lock(progress_mutex);
    progress_fn = fn;
    progress_user = user;
}

fsa_status fsa_synth(const char* preset, const char* out_dir, double noise_sigma, char** summary_json) {
    return guarded([&] {
        require(preset, "preset");
        require(out_dir, "out_dir");
        const auto index = fsa::run_synth(preset, out_dir, noise_sigma);
        emit(summary_json, {{"dataset", index.dataset_id},
                            {"clips", index.clips.size()},
                            {"classes", index.classes().size()},
                            {"manifest", (std::filesystem::path(out_dir) / fsa::kSynthManifestName).string()}});
    });
}

fsa_status fsa_prepare(const fsa_config* config, const char* dataset_id, char** summary_json) {
    return guarded([&] {
        require(config, "config");
        require(dataset_id, "dataset_id");
        const auto s = config->config.settings();
        const auto r = fsa::run_prepare(s, dataset_id, progress);
        emit(summary_json, {{"dataset", dataset_id},
                            {"clips", r.clips},
                            {"subclips", r.subclips},
                            {"files_written", r.files_written},
                            {"errors", r.errors},
                            {"cache", s.cache_for(dataset_id).string()}});
    });
}

fsa_status fsa_split(const fsa_config* config, const char* dataset_id, uint64_t seed, double train_ratio,
                     double val_ratio, double test_ratio, char** summary_json) {
    return guarded([&] {
        require(config, "config");
        require(dataset_id, "dataset_id");
        const auto s = config->config.settings();
        const auto split = fsa::run_split(s, dataset_id, seed, {train_ratio, val_ratio, test_ratio});
        emit(summary_json, {{"dataset", dataset_id},
                            {"seed", seed},
                            {"train", split.train.size()},
                            {"val", split.val.size()},
                            {"test", split.test.size()},
                            {"path", s.split_for(dataset_id).string()}});
    });
}

fsa_status fsa_train(const fsa_config* config, char** summary_json) {
    return guarded([&] {
        require(config, "config");
        const auto s = config->config.settings();
        const auto r = fsa::run_train(s, progress, [&] { fsa::write_snapshot(config->config, s); });
        emit(summary_json, {{"algorithm", fsa::to_string(r.state.algorithm)},
                            {"checkpoint", s.checkpoint_path().string()},
                            {"best_val_accuracy", r.best_val_accuracy},
                            {"best_step", r.best_step}});
    });
}

fsa_status fsa_evaluate(const fsa_config* config, const char* checkpoint, char** reports_json) {
    return guarded([&] {
        require(config, "config");
        const auto s = config->config.settings();
        const std::filesystem::path ckpt = checkpoint ? std::filesystem::path(checkpoint) : s.checkpoint_path();
        const auto reports = fsa::run_evaluate(s, ckpt, progress);
        fsa::write_snapshot(config->config, s);
        emit(reports_json, reports);
    });
}

fsa_status fsa_sweep(const fsa_config* config, const char* checkpoint, const char* kind, char** reports_json) {
    return guarded([&] {
        require(config, "config");
        require(kind, "kind");
        const auto s = config->config.settings();
        const std::filesystem::path ckpt = checkpoint ? std::filesystem::path(checkpoint) : s.checkpoint_path();
        const auto reports = fsa::run_sweep(s, ckpt, kind, progress);
        fsa::write_snapshot(config->config, s);
        emit(reports_json, reports);
    });
}

fsa_status fsa_report(const char* const* run_dirs, size_t n_run_dirs, const char* out_dir, char** summary_json) {
    return guarded([&] {
        require(out_dir, "out_dir");
        if (n_run_dirs > 0) require(run_dirs, "run_dirs");
        std::vector<std::filesystem::path> dirs;
        for (size_t i = 0; i < n_run_dirs; ++i) {
            require(run_dirs[i], "run directory");
            dirs.emplace_back(run_dirs[i]);
        }
        const auto files = fsa::run_report(dirs, out_dir);
        nlohmann::json plots = nlohmann::json::array();
        for (const auto& p : files.plots) plots.push_back(p.string());
        emit(summary_json, {{"text", files.text.string()}, {"csv", files.csv.string()}, {"plots", plots}});
    });
}

}  // extern "C"
