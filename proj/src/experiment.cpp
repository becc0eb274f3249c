#include "fsa/experiment.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "fsa/splits.hpp"
#include "fsa/synthbench.hpp"

namespace fsa {

namespace fs = std::filesystem;
using nlohmann::json;

// --- configuration -----------------------------------------------------------------

const std::map<std::string, std::string>& ExperimentConfig::defaults() {
    static const std::map<std::string, std::string> d{
        {"workspace", "."},
        {"cache_root", "cache"},
        {"run_dir", "runs/default"},
        {"datasets", ""},
        {"eval_datasets", ""},
        {"heldout_datasets", ""},
        {"spec.sample_rate", "16000"},
        {"spec.n_mels", "64"},
        {"spec.window_ms", "25"},
        {"spec.hop_ms", "10"},
        {"spec.clip_length_s", "5"},
        {"spec.log_scale", "true"},
        {"spec.log_floor", "1e-10"},
        {"norm.mode", "global"},
        {"prune.max_duration", "0"},
        {"prune.min_class_count", "0"},
        {"sampler.mode", "single"},
        {"train.n_way", "5"},
        {"train.k_shot", "1"},
        {"train.q_queries", "5"},
        {"model.conv_channels", "64,64,64,64"},
        {"model.rnn_hidden", "64"},
        {"model.head_width", "64"},
        {"model.readout", "last"},
        {"algorithm", "protonet"},
        {"inner.steps", "5"},
        {"inner.lr", "0.01"},
        {"train.steps", "2000"},
        {"train.meta_batch", "4"},
        {"train.lr", "0.001"},
        {"train.val_every", "200"},
        {"train.val_tasks", "200"},
        {"seed", "1"},
        {"conventional.epochs", "20"},
        {"conventional.batch_size", "32"},
        {"conventional.class_weighting", "true"},
        {"metabaseline.scale", "10"},
        {"metabaseline.steps", "1000"},
        {"metabaseline.patience", "3"},
        {"eval.n_way", "5"},
        {"eval.k_shot", "1"},
        {"eval.q_queries", "15"},
        {"eval.n_tasks", "10000"},
        {"eval.seed", "7"},
        {"eval.threads", "1"},
        {"sweep.shots", "1..30"},
        {"sweep.ways", "5..30"},
    };
    return d;
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

bool is_dynamic_key(const std::string& key) {
    for (const char* prefix : {"manifest.", "split."})
        if (key.rfind(prefix, 0) == 0 && key.size() > std::string(prefix).size()) return true;
    return false;
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(text);
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

long long to_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const long long x = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        fail(ErrorCode::invalid_argument, "config '" + key + "': expected an integer, got '" + v + "'");
    }
}

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        fail(ErrorCode::invalid_argument, "config '" + key + "': expected a number, got '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    fail(ErrorCode::invalid_argument, "config '" + key + "': expected true or false, got '" + v + "'");
}

int positive(const std::string& key, long long v) {
    if (v < 1 || v > 1'000'000'000) fail(ErrorCode::invalid_argument, "config '" + key + "' must be positive");
    return static_cast<int>(v);
}

}  // namespace

std::vector<int> parse_int_list(const std::string& text) {
    std::vector<int> out;
    for (const auto& part : split_list(text)) {
        std::size_t sep = part.find("..");
        std::size_t len = 2;
        if (sep == std::string::npos) {
            sep = part.find('-', 1);
            len = 1;
        }
        if (sep == std::string::npos) {
            out.push_back(static_cast<int>(to_int("list", part)));
            continue;
        }
        const long long lo = to_int("list", trim(part.substr(0, sep)));
        const long long hi = to_int("list", trim(part.substr(sep + len)));
        if (hi < lo || hi - lo > 100000) fail(ErrorCode::invalid_argument, "bad range '" + part + "'");
        for (long long v = lo; v <= hi; ++v) out.push_back(static_cast<int>(v));
    }
    if (out.empty()) fail(ErrorCode::invalid_argument, "empty integer list '" + text + "'");
    return out;
}

ExperimentConfig::ExperimentConfig() : values_(defaults()) {}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
    const std::string k = trim(key);
    if (!defaults().count(k) && !is_dynamic_key(k)) fail(ErrorCode::invalid_argument, "unknown config key '" + k + "'");
    values_[k] = trim(value);
    explicit_[k] = true;
}

bool ExperimentConfig::has(const std::string& key) const { return values_.count(key) > 0; }

std::string ExperimentConfig::get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) fail(ErrorCode::not_found, "config key '" + key + "' is not set");
    return it->second;
}

ExperimentConfig ExperimentConfig::parse(std::istream& in) {
    ExperimentConfig c;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            fail(ErrorCode::invalid_argument, "config line " + std::to_string(line_no) + ": expected key = value");
        c.set(line.substr(0, eq), line.substr(eq + 1));
    }
    return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::not_found, "no config file at " + path.string());
    return parse(in);
}

std::string ExperimentConfig::resolved_text() const {
    std::ostringstream out;
    out << "# resolved configuration\n";
    for (const auto& [k, v] : values_) {
        if (k == "cache_root" && !explicitly_set(k)) {
            const char* env = std::getenv(kCacheRootEnv);
            out << k << " = " << (env && *env ? std::string(env) : v) << '\n';
            continue;
        }
        // Record the effective list so a reload does not read it as explicitly empty.
        if (k == "eval_datasets" && !explicitly_set(k)) {
            out << k << " = " << values_.at("datasets") << '\n';
            continue;
        }
        out << k << " = " << v << '\n';
    }
    return out.str();
}

fs::path Settings::manifest_for(const std::string& id) const {
    const auto it = manifests.find(id);
    return it != manifests.end() ? it->second : workspace / "data" / id / "manifest.tsv";
}

fs::path Settings::split_for(const std::string& id) const {
    const auto it = splits.find(id);
    return it != splits.end() ? it->second : workspace / "splits" / (id + ".split");
}

fs::path Settings::cache_for(const std::string& id) const { return cache_root / id; }

Settings ExperimentConfig::settings() const {
    Settings s;
    auto str = [&](const std::string& k) { return get(k); };
    auto i = [&](const std::string& k) { return to_int(k, get(k)); };
    auto d = [&](const std::string& k) { return to_double(k, get(k)); };
    auto b = [&](const std::string& k) { return to_bool(k, get(k)); };

    s.workspace = fs::absolute(str("workspace")).lexically_normal();
    auto resolve = [&](const fs::path& p) { return p.is_absolute() ? p : (s.workspace / p).lexically_normal(); };
    std::string cache = str("cache_root");
    if (!explicitly_set("cache_root")) {
        const char* env = std::getenv(kCacheRootEnv);
        if (env && *env) cache = env;
    }
    s.cache_root = resolve(cache);
    s.run_dir = resolve(str("run_dir"));
    s.datasets = split_list(str("datasets"));
    s.eval_datasets = split_list(str("eval_datasets"));
    // Unset means "the training datasets"; an explicit empty value means none.
    if (s.eval_datasets.empty() && !explicitly_set("eval_datasets")) s.eval_datasets = s.datasets;
    s.heldout_datasets = split_list(str("heldout_datasets"));
    for (const auto& id : s.heldout_datasets)
        if (std::find(s.datasets.begin(), s.datasets.end(), id) != s.datasets.end())
            fail(ErrorCode::invalid_argument, "dataset '" + id + "' cannot be both trained on and held out");
    for (const auto& [k, v] : values_) {
        if (k.rfind("manifest.", 0) == 0) s.manifests[k.substr(9)] = resolve(v);
        if (k.rfind("split.", 0) == 0) s.splits[k.substr(6)] = resolve(v);
    }

    s.spectrogram.sample_rate_hz = static_cast<int>(i("spec.sample_rate"));
    s.spectrogram.n_mels = static_cast<int>(i("spec.n_mels"));
    s.spectrogram.window_ms = d("spec.window_ms");
    s.spectrogram.hop_ms = d("spec.hop_ms");
    s.spectrogram.clip_length_s = d("spec.clip_length_s");
    s.spectrogram.log_scale = b("spec.log_scale");
    s.spectrogram.log_floor = d("spec.log_floor");
    s.spectrogram.validate();
    s.norm = parse_norm_mode(str("norm.mode"));
    s.prune_max_duration = d("prune.max_duration");
    if (s.prune_max_duration < 0) fail(ErrorCode::invalid_argument, "config 'prune.max_duration' must be >= 0");
    const long long mcc = i("prune.min_class_count");
    if (mcc < 0) fail(ErrorCode::invalid_argument, "config 'prune.min_class_count' must be >= 0");
    s.prune_min_class_count = static_cast<std::size_t>(mcc);

    s.sampling = parse_sampling_mode(str("sampler.mode"));
    s.train_spec = {positive("train.n_way", i("train.n_way")), positive("train.k_shot", i("train.k_shot")),
                    positive("train.q_queries", i("train.q_queries"))};
    s.train_spec.validate();

    s.model.conv_channels.clear();
    for (const auto& c : split_list(str("model.conv_channels")))
        s.model.conv_channels.push_back(positive("model.conv_channels", to_int("model.conv_channels", c)));
    s.model.rnn_hidden = positive("model.rnn_hidden", i("model.rnn_hidden"));
    s.model.head_width = positive("model.head_width", i("model.head_width"));
    const std::string readout = str("model.readout");
    if (readout != "last" && readout != "mean")
        fail(ErrorCode::invalid_argument, "config 'model.readout' must be last or mean");
    s.model.readout = readout == "last" ? Readout::last : Readout::mean;
    s.model.input_mels = s.spectrogram.n_mels;
    s.model.input_frames = static_cast<int>(s.spectrogram.frames_per_clip());
    s.model.validate();

    s.algorithm = parse_algorithm(str("algorithm"));
    s.inner.steps = static_cast<int>(i("inner.steps"));
    s.inner.lr = d("inner.lr");
    if (s.inner.steps < 0 || s.inner.lr < 0) fail(ErrorCode::invalid_argument, "inner-loop settings must be >= 0");
    s.train_steps = static_cast<int>(i("train.steps"));
    if (s.train_steps < 0) fail(ErrorCode::invalid_argument, "config 'train.steps' must be >= 0");
    s.meta_batch = positive("train.meta_batch", i("train.meta_batch"));
    s.lr = d("train.lr");
    if (!(s.lr > 0)) fail(ErrorCode::invalid_argument, "config 'train.lr' must be positive");
    s.val_every = positive("train.val_every", i("train.val_every"));
    s.val_tasks = positive("train.val_tasks", i("train.val_tasks"));
    s.seed = static_cast<std::uint64_t>(i("seed"));

    s.conventional_epochs = positive("conventional.epochs", i("conventional.epochs"));
    s.conventional_batch = positive("conventional.batch_size", i("conventional.batch_size"));
    s.class_weighting = b("conventional.class_weighting");
    s.metabaseline_scale = d("metabaseline.scale");
    s.metabaseline_steps = static_cast<int>(i("metabaseline.steps"));
    if (s.metabaseline_steps < 0) fail(ErrorCode::invalid_argument, "config 'metabaseline.steps' must be >= 0");
    s.metabaseline_patience = positive("metabaseline.patience", i("metabaseline.patience"));

    s.eval_spec = {positive("eval.n_way", i("eval.n_way")), positive("eval.k_shot", i("eval.k_shot")),
                   positive("eval.q_queries", i("eval.q_queries"))};
    s.eval_spec.validate();
    s.eval_tasks = positive("eval.n_tasks", i("eval.n_tasks"));
    s.eval_seed = static_cast<std::uint64_t>(i("eval.seed"));
    s.threads = positive("eval.threads", i("eval.threads"));
    s.sweep_shots = parse_int_list(str("sweep.shots"));
    s.sweep_ways = parse_int_list(str("sweep.ways"));
    for (int k : s.sweep_shots)
        if (k < 1) fail(ErrorCode::invalid_argument, "sweep shots must be >= 1");
    for (int n : s.sweep_ways)
        if (n < 2) fail(ErrorCode::invalid_argument, "sweep ways must be >= 2");
    return s;
}

void write_snapshot(const ExperimentConfig& config, const Settings& s) {
    fs::create_directories(s.run_dir);
    std::ofstream out(s.run_dir / kResolvedConfigName);
    if (!out) fail(ErrorCode::io, "cannot write config snapshot in " + s.run_dir.string());
    out << config.resolved_text();
}

// --- synth / prepare / split ---------------------------------------------------------

DatasetIndex run_synth(const std::string& preset, const fs::path& out_dir, double noise_sigma) {
    SynthSpec spec = synth_preset(preset);
    if (noise_sigma >= 0.0) spec.noise_sigma = noise_sigma;
    return generate_synthetic_dataset(spec, out_dir);
}

PrepareResult run_prepare(const Settings& s, const std::string& dataset_id, const ProgressFn& progress) {
    const fs::path manifest = s.manifest_for(dataset_id);
    DatasetIndex index = ingest_dataset_file(manifest, dataset_id);
    if (s.prune_max_duration > 0.0 || s.prune_min_class_count > 0)
        index = prune_dataset(index, s.prune_max_duration > 0.0 ? s.prune_max_duration
                                                                  : std::numeric_limits<double>::infinity(),
                              s.prune_min_class_count);
    if (progress)
        progress("preparing " + dataset_id + ": " + std::to_string(index.clips.size()) + " clips, " +
                 std::to_string(index.class_inventory.size()) + " classes");
    const CacheManifest m = materialize_cache(index, manifest.parent_path(), s.spectrogram, s.cache_for(dataset_id));
    PrepareResult r;
    r.clips = index.clips.size();
    r.subclips = m.entries.size();
    r.files_written = m.files_written;
    r.errors = m.errors.size();
    return r;
}

ClassSplit run_split(const Settings& s, const std::string& dataset_id, std::uint64_t seed,
                     const std::array<double, 3>& ratios) {
    const DatasetIndex index = ingest_dataset_file(s.manifest_for(dataset_id), dataset_id);
    ClassSplit split = generate_split(dataset_id, index.classes(), seed, ratios);
    save_split(s.split_for(dataset_id), split);
    return split;
}

// --- training -------------------------------------------------------------------------

namespace {

struct DataContext {
    CacheStore store;
    std::vector<Partition> train, val, test;
};

void register_cache(CacheStore& store, const Settings& s, const std::string& id) {
    const fs::path dir = s.cache_for(id);
    if (!fs::exists(dir / kCacheManifestName))
        fail(ErrorCode::not_found, "no spectrogram cache for dataset '" + id + "' at " + dir.string() +
                                       " (run prepare first)");
    store.add_dataset(id, dir);
}

ClassSplit split_of(const CacheStore& store, const Settings& s, const std::string& id) {
    const fs::path path = s.split_for(id);
    if (!fs::exists(path)) fail(ErrorCode::not_found, "no split file for dataset '" + id + "' at " + path.string());
    return load_split(path, store.classes(id));
}

NormalizationStats train_stats(const CacheStore& store, const std::vector<Partition>& parts, NormMode mode) {
    if (mode == NormMode::per_sample) return NormalizationStats{NormMode::per_sample, {}, {}};
    return compute_normalization_stats(
        [&](const SpectrogramVisitor& visit) {
            for (const auto& p : parts)
                for (const auto& clips : p.clips)
                    for (const auto& c : clips)
                        for (int sub = 0; sub < c.n_subclips; ++sub) visit(store.load_raw(p.dataset_id, c.clip_id, sub));
        },
        mode);
}

class TrainLog {
public:
    explicit TrainLog(const fs::path& path) : out_(path, std::ios::trunc) {
        if (!out_) fail(ErrorCode::io, "cannot write training log " + path.string());
    }
    void write(const json& record) { out_ << record.dump() << '\n' << std::flush; }

private:
    std::ofstream out_;
};

std::string fmt(double v) {
    std::ostringstream s;
    s.setf(std::ios::fixed);
    s.precision(4);
    s << v;
    return s.str();
}

}  // namespace

TrainResult run_train(const Settings& s, const ProgressFn& progress, const std::function<void()>& on_start) {
    if (s.datasets.empty()) fail(ErrorCode::invalid_argument, "config 'datasets' names no training dataset");
    SamplerConfig sampler_config{s.train_spec, s.sampling, derive_seed(s.seed, 1)};
    sampler_config.validate(s.datasets.size());

    DataContext data;
    for (const auto& id : s.datasets) {
        register_cache(data.store, s, id);
        const ClassSplit split = split_of(data.store, s, id);
        data.train.push_back(data.store.partition(id, split.train));
        data.val.push_back(data.store.partition(id, split.val));
    }
    const NormalizationStats stats = train_stats(data.store, data.train, s.norm);
    data.store.set_stats(stats);

    TrainResult result;
    LearnerState& state = result.state;
    state = LearnerState::create(s.algorithm, s.model, s.train_spec, derive_seed(s.seed, 2));
    state.inner = s.inner;
    state.norm = stats;
    if (state.logit_scale) state.logit_scale = static_cast<float>(s.metabaseline_scale);
    state.metadata["datasets"] = s.datasets;
    state.metadata["sampling"] = to_string(s.sampling);

    if (on_start) on_start();
    fs::create_directories(s.run_dir / "checkpoints");
    const fs::path best_path = s.checkpoint_path();
    const fs::path last_path = s.run_dir / "checkpoints" / "last.ckpt";
    TrainLog log(s.run_dir / "train_log.jsonl");

    const EpisodeSpec val_spec{s.train_spec.n_way, s.train_spec.k_shot, s.eval_spec.q_queries};
    std::vector<const Partition*> val_parts;
    for (const auto& p : data.val)
        if (p.eligible_classes(val_spec.k_shot).size() >= static_cast<std::size_t>(val_spec.n_way)) val_parts.push_back(&p);
    if (val_parts.empty() && progress)
        progress("no validation partition has " + std::to_string(val_spec.n_way) +
                 " usable classes; keeping the final parameters");
    state.metadata["validation"] = val_parts.empty() ? "none (too few validation classes)" : "best on validation";

    auto validate = [&](std::int64_t step) -> double {
        if (val_parts.empty()) return -1.0;
        EvalOptions o;
        o.n_tasks = s.val_tasks;
        o.seed = derive_seed(s.seed, 4);
        o.store_per_task = false;
        o.threads = s.threads;
        double sum = 0.0;
        for (const Partition* p : val_parts) sum += evaluate(state, *p, val_spec, data.store, o).mean_accuracy;
        const double acc = sum / static_cast<double>(val_parts.size());
        log.write(json{{"step", step}, {"val_accuracy", acc}});
        return acc;
    };
    // Saves `state` when it beats the best validation accuracy so far.
    auto checkpoint = [&](std::int64_t step, double val) {
        state.save(last_path);
        if (val_parts.empty() || val > result.best_val_accuracy) {
            result.best_val_accuracy = val;
            result.best_step = step;
            state.save(best_path);
        }
        if (progress)
            progress("step " + std::to_string(step) + (val >= 0 ? " val " + fmt(val) : "") + " best " +
                     fmt(result.best_val_accuracy) + " @" + std::to_string(result.best_step));
    };

    auto episodic = [&](int steps, auto&& one_step, const std::function<bool(double)>& stop_rule) {
        EpisodeSampler sampler(sampler_config, data.train, data.store);
        double loss_acc = 0.0, acc_acc = 0.0;
        int window = 0;
        for (int step = 1; step <= steps; ++step) {
            std::vector<Episode> batch;
            for (int b = 0; b < s.meta_batch; ++b) batch.push_back(sampler.next());
            const auto [loss, acc] = one_step(batch);
            ++state.step;
            loss_acc += loss;
            acc_acc += acc;
            ++window;
            if (step % 10 == 0 || step == steps) {
                log.write(json{{"step", state.step}, {"loss", loss_acc / window}, {"accuracy", acc_acc / window}});
                loss_acc = acc_acc = 0.0;
                window = 0;
            }
            if (step % s.val_every == 0 || step == steps) {
                const double val = validate(state.step);
                checkpoint(state.step, val);
                if (stop_rule && stop_rule(val)) break;
            }
        }
    };

    switch (s.algorithm) {
        case Algorithm::random:
            checkpoint(0, validate(0));
            break;
        case Algorithm::protonet: {
            Adam opt(s.lr);
            episodic(s.train_steps,
                     [&](const std::vector<Episode>& batch) {
                         ParamSet<float> sum = state.params.zeros_like();
                         double loss = 0.0, acc = 0.0;
                         for (const auto& e : batch) {
                             ParamSet<float> g;
                             const auto out = protonet_episode(state, e, &g, &state.buffers);
                             sum.axpy(1.0f, g);
                             loss += out.loss;
                             acc += out.accuracy;
                         }
                         sum.scale(1.0f / static_cast<float>(batch.size()));
                         opt.step(state.params, sum);
                         const auto n = static_cast<double>(batch.size());
                         return std::pair{loss / n, acc / n};
                     },
                     {});
            break;
        }
        case Algorithm::fo_maml:
        case Algorithm::fo_meta_curvature: {
            Adam opt(s.lr), transform_opt(s.lr);
            const bool mc = s.algorithm == Algorithm::fo_meta_curvature;
            episodic(s.train_steps,
                     [&](const std::vector<Episode>& batch) {
                         const auto r = fomaml_meta_step(state, batch, opt, mc ? &transform_opt : nullptr);
                         --state.step;  // counted by the loop
                         return std::pair{r.query_loss, r.query_accuracy};
                     },
                     {});
            break;
        }
        case Algorithm::simpleshot:
        case Algorithm::meta_baseline: {
            std::vector<LabelledItem> items;
            std::map<std::string, std::size_t> counts;
            int label = 0;
            for (const auto& p : data.train)
                for (std::size_t c = 0; c < p.classes.size(); ++c, ++label) {
                    const std::string key = std::to_string(label);
                    for (const auto& clip : p.clips[c])
                        for (int sub = 0; sub < clip.n_subclips; ++sub) {
                            items.push_back({data.store.load(p.dataset_id, clip.clip_id, sub), label});
                            ++counts[key];
                        }
                }
            const auto weight_map = inverse_frequency_weights(counts);
            std::vector<double> weights(static_cast<std::size_t>(label));
            for (int l = 0; l < label; ++l) weights[static_cast<std::size_t>(l)] = weight_map.at(std::to_string(l));
            if (progress)
                progress("conventional stage: " + std::to_string(items.size()) + " sub-clips, " + std::to_string(label) +
                         " classes");
            ConventionalConfig cc;
            cc.epochs = s.conventional_epochs;
            cc.batch_size = s.conventional_batch;
            cc.lr = s.lr;
            cc.class_weighting = s.class_weighting;
            cc.seed = derive_seed(s.seed, 3);
            cc.on_epoch = [&](int epoch, double loss, double acc) {
                state.step = epoch;
                log.write(json{{"step", epoch}, {"loss", loss}, {"accuracy", acc}, {"stage", "conventional"}});
                if (s.algorithm == Algorithm::simpleshot) state.train_mean = feature_mean(state, items);
                checkpoint(epoch, validate(epoch));
            };
            conventional_train(state, items, label, weights, cc);
            state = LearnerState::load(best_path);
            if (s.algorithm == Algorithm::simpleshot || s.metabaseline_steps == 0) break;

            const std::int64_t conventional_step = state.step;
            result.best_step = conventional_step;
            Adam opt(s.lr), scale_opt(s.lr);
            int stale = 0;
            double best = result.best_val_accuracy;
            state.metadata["early_stopping"] = "validation plateau: stop after " +
                                               std::to_string(s.metabaseline_patience) +
                                               " checks without improvement, one check every " +
                                               std::to_string(s.val_every) + " steps";
            episodic(s.metabaseline_steps,
                     [&](const std::vector<Episode>& batch) {
                         ParamSet<float> sum = state.params.zeros_like();
                         double loss = 0.0, acc = 0.0, d_scale = 0.0;
                         for (const auto& e : batch) {
                             ParamSet<float> g;
                             double ds = 0.0;
                             const auto out = metabaseline_episode(state, e, &g, &ds, &state.buffers);
                             sum.axpy(1.0f, g);
                             d_scale += ds;
                             loss += out.loss;
                             acc += out.accuracy;
                         }
                         const auto n = static_cast<double>(batch.size());
                         sum.scale(1.0f / static_cast<float>(n));
                         opt.step(state.params, sum);
                         ParamSet<float> scale, scale_grad;
                         scale.add("logit_scale", {1}, *state.logit_scale);
                         scale_grad.add("logit_scale", {1}, static_cast<float>(d_scale / n));
                         scale_opt.step(scale, scale_grad);
                         state.logit_scale = scale[0].data[0];
                         return std::pair{loss / n, acc / n};
                     },
                     [&](double val) {
                         if (val < 0) return false;
                         if (val > best) {
                             best = val;
                             stale = 0;
                             return false;
                         }
                         return ++stale >= s.metabaseline_patience;
                     });
            break;
        }
    }
    state = LearnerState::load(best_path);
    return result;
}

// --- evaluation -----------------------------------------------------------------------

namespace {

LearnerState load_checkpoint(const fs::path& checkpoint) {
    if (!fs::exists(checkpoint)) fail(ErrorCode::not_found, "no checkpoint at " + checkpoint.string());
    return LearnerState::load(checkpoint);
}

struct EvalTarget {
    std::string dataset_id;
    std::string partition;  // "test" or "all"
    Partition part;
};

std::vector<EvalTarget> eval_targets(CacheStore& store, const Settings& s) {
    std::vector<EvalTarget> out;
    for (const auto& id : s.eval_datasets) {
        register_cache(store, s, id);
        out.push_back({id, "test", store.partition(id, split_of(store, s, id).test)});
    }
    for (const auto& id : s.heldout_datasets) {
        register_cache(store, s, id);
        out.push_back({id, "all", store.partition(id)});
    }
    if (out.empty()) fail(ErrorCode::invalid_argument, "no evaluation datasets configured");
    return out;
}

EvalOptions eval_options(const Settings& s) {
    EvalOptions o;
    o.n_tasks = s.eval_tasks;
    o.seed = s.eval_seed;
    o.store_per_task = true;
    o.threads = s.threads;
    return o;
}

}  // namespace

std::vector<EvalReport> run_evaluate(const Settings& s, const fs::path& checkpoint, const ProgressFn& progress) {
    const LearnerState state = load_checkpoint(checkpoint);
    CacheStore store(state.norm);
    const auto targets = eval_targets(store, s);
    std::vector<EvalReport> reports;
    for (const auto& t : targets) {
        EvalReport r = evaluate(state, t.part, s.eval_spec, store, eval_options(s));
        r.metadata["partition"] = t.partition;
        r.metadata["cross_dataset"] = t.partition == "all";
        reports.push_back(std::move(r));
        if (progress)
            progress(t.dataset_id + " (" + t.partition + "): " + fmt(reports.back().mean_accuracy) + " +- " +
                     fmt(reports.back().ci95_halfwidth));
    }
    for (const auto& r : reports) save_reports(s.run_dir / "reports" / (r.dataset_id + ".json"), {r});
    return reports;
}

std::vector<EvalReport> run_sweep(const Settings& s, const fs::path& checkpoint, const std::string& kind,
                                  const ProgressFn& progress) {
    if (kind != "shots" && kind != "ways") fail(ErrorCode::invalid_argument, "sweep kind must be shots or ways");
    const LearnerState state = load_checkpoint(checkpoint);
    if (kind == "ways" && is_gradient_based(state.algorithm))
        fail(ErrorCode::invalid_argument, "N-way sweeps exclude gradient-based learners (fixed-size output head)");
    CacheStore store(state.norm);
    const auto targets = eval_targets(store, s);
    std::vector<std::pair<std::string, std::vector<EvalReport>>> grids;
    for (const auto& t : targets) {
        auto grid = kind == "shots"
                        ? sweep_shots(state, t.part, s.sweep_shots, s.eval_spec.q_queries, store, eval_options(s))
                        : sweep_ways(state, t.part, s.sweep_ways, s.eval_spec.q_queries, store, eval_options(s));
        for (auto& r : grid) r.metadata["partition"] = t.partition;
        if (progress) progress(kind + " sweep on " + t.dataset_id + ": " + std::to_string(grid.size()) + " entries");
        grids.emplace_back(t.dataset_id, std::move(grid));
    }
    std::vector<EvalReport> all;
    for (const auto& [id, grid] : grids) {
        save_reports(s.run_dir / "reports" / ("sweep_" + kind + "_" + id + ".json"), grid);
        fs::create_directories(s.run_dir / "plots");
        std::ofstream(s.run_dir / "plots" / (kind + "_" + id + ".tsv")) << render_sweep(grid, kind == "shots");
        all.insert(all.end(), grid.begin(), grid.end());
    }
    return all;
}

ReportFiles run_report(const std::vector<fs::path>& run_dirs, const fs::path& out_dir) {
    if (run_dirs.empty()) fail(ErrorCode::invalid_argument, "no run directories given");
    std::vector<EvalReport> results, shots, ways;
    std::map<std::string, std::set<std::string>> runs_per_algorithm;
    std::vector<std::pair<std::string, EvalReport>> tagged;
    for (const auto& dir : run_dirs) {
        const fs::path reports = dir / "reports";
        if (!fs::is_directory(reports)) fail(ErrorCode::not_found, "no reports in run directory " + dir.string());
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(reports))
            if (e.path().extension() == ".json") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            const std::string name = f.filename().string();
            for (auto& r : load_reports(f)) {
                if (name.rfind("sweep_shots_", 0) == 0) shots.push_back(std::move(r));
                else if (name.rfind("sweep_ways_", 0) == 0) ways.push_back(std::move(r));
                else {
                    runs_per_algorithm[r.algorithm].insert(dir.filename().string());
                    tagged.emplace_back(dir.filename().string(), std::move(r));
                }
            }
        }
    }
    for (auto& [run, r] : tagged) {
        if (runs_per_algorithm[r.algorithm].size() > 1) r.algorithm = run;
        results.push_back(std::move(r));
    }
    fs::create_directories(out_dir);
    ReportFiles files;
    const ResultTable table = build_result_table(results);
    files.text = out_dir / "report.txt";
    files.csv = out_dir / "report.csv";
    std::ofstream(files.text) << render_text(table);
    std::ofstream(files.csv) << render_csv(table);
    if (!shots.empty()) {
        files.plots.push_back(out_dir / "shots.tsv");
        std::ofstream(files.plots.back()) << render_sweep(shots, true);
    }
    if (!ways.empty()) {
        files.plots.push_back(out_dir / "ways.tsv");
        std::ofstream(files.plots.back()) << render_sweep(ways, false);
    }
    return files;
}

}  // namespace fsa
