#include "fsa/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>
#include <thread>

namespace fsa {

using nlohmann::json;

void EvalReport::validate() const {
    if (mean_accuracy < 0.0 || mean_accuracy > 1.0) fail(ErrorCode::format, "mean accuracy outside [0, 1]");
    if (ci95_halfwidth < 0.0) fail(ErrorCode::format, "negative confidence interval");
    if (!per_task_accuracies.empty() && per_task_accuracies.size() != static_cast<std::size_t>(n_tasks))
        fail(ErrorCode::format, "stored per-task accuracies do not match n_tasks");
}

void to_json(json& j, const EvalReport& r) {
    j = json{{"dataset_id", r.dataset_id},
             {"algorithm", r.algorithm},
             {"spec", r.spec},
             {"n_tasks", r.n_tasks},
             {"mean_accuracy", r.mean_accuracy},
             {"ci95_halfwidth", r.ci95_halfwidth},
             {"seed", r.seed},
             {"available", r.available},
             {"metadata", r.metadata}};
    if (!r.per_task_accuracies.empty()) j["per_task_accuracies"] = r.per_task_accuracies;
}

void from_json(const json& j, EvalReport& r) {
    r.dataset_id = j.at("dataset_id").get<std::string>();
    r.algorithm = j.at("algorithm").get<std::string>();
    r.spec = j.at("spec").get<EpisodeSpec>();
    r.n_tasks = j.at("n_tasks").get<int>();
    r.mean_accuracy = j.at("mean_accuracy").get<double>();
    r.ci95_halfwidth = j.at("ci95_halfwidth").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.available = j.value("available", true);
    r.metadata = j.value("metadata", json::object());
    r.per_task_accuracies = j.value("per_task_accuracies", std::vector<double>{});
}

void save_reports(const std::filesystem::path& path, const std::vector<EvalReport>& reports) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) fail(ErrorCode::io, "cannot write " + tmp.string());
        out << json(reports).dump(2) << '\n';
        if (!out) fail(ErrorCode::io, "failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::vector<EvalReport> load_reports(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::not_found, "no report file at " + path.string());
    try {
        const json j = json::parse(in);
        if (j.is_array()) return j.get<std::vector<EvalReport>>();
        return {j.get<EvalReport>()};
    } catch (const json::exception& e) {
        fail(ErrorCode::format, "malformed report " + path.string() + ": " + e.what());
    }
}

MeanCi mean_ci95(const std::vector<double>& values) {
    if (values.empty()) fail(ErrorCode::invalid_argument, "no values to summarise");
    const auto n = static_cast<double>(values.size());
    double sum = 0.0;
    for (double v : values) sum += v;
    const double mean = sum / n;
    if (values.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return {mean, 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n)};
}

namespace {

// Runs fn(t) for t in [0, n) on `threads` workers; results are indexed by t.
template <typename Fn>
void parallel_tasks(int n, int threads, Fn fn) {
    threads = std::max(1, std::min(threads, n));
    if (threads == 1) {
        for (int t = 0; t < n; ++t) fn(t);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w)
        pool.emplace_back([&] {
            for (int t = next++; t < n; t = next++) {
                try {
                    fn(t);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                    next = n;
                }
            }
        });
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

EvalReport summarise(const std::string& dataset, const std::string& algorithm, const EpisodeSpec& spec,
                     std::vector<double> accuracies, const EvalOptions& options) {
    EvalReport r;
    r.dataset_id = dataset;
    r.algorithm = algorithm;
    r.spec = spec;
    r.n_tasks = static_cast<int>(accuracies.size());
    const MeanCi m = mean_ci95(accuracies);
    r.mean_accuracy = m.mean;
    r.ci95_halfwidth = m.ci95;
    r.seed = options.seed;
    r.metadata["ci_method"] = kCiMethod;
    if (options.store_per_task) r.per_task_accuracies = std::move(accuracies);
    return r;
}

}  // namespace

EvalReport evaluate(const LearnerState& state, const Partition& partition, const EpisodeSpec& spec,
                    const SpectrogramSource& source, const EvalOptions& options) {
    spec.validate();
    if (options.n_tasks < 1) fail(ErrorCode::invalid_argument, "n_tasks must be positive");
    if (is_gradient_based(state.algorithm) && spec.n_way != state.backbone.head_width)
        fail(ErrorCode::invalid_argument, "a gradient-based learner can only be evaluated at its trained N (" +
                                              std::to_string(state.backbone.head_width) + ")");
    const auto usable = partition.eligible_classes(spec.k_shot).size();
    if (usable < static_cast<std::size_t>(spec.n_way))
        fail(ErrorCode::invalid_argument, "partition '" + partition.dataset_id + "' has " + std::to_string(usable) +
                                              " usable classes, fewer than N = " + std::to_string(spec.n_way));
    FeatureCache cache;
    std::vector<double> acc(static_cast<std::size_t>(options.n_tasks));
    parallel_tasks(options.n_tasks, options.threads, [&](int t) {
        Rng rng(derive_seed(options.seed, static_cast<std::uint64_t>(t)));
        const Episode e = sample_episode_single(partition, spec, rng, source);
        acc[static_cast<std::size_t>(t)] = accuracy_of(predict_episode(state, e, &cache, rng), e.query());
    });
    EvalReport r = summarise(partition.dataset_id, to_string(state.algorithm), spec, std::move(acc), options);
    if (state.metadata.contains("mc_variant")) r.metadata["mc_variant"] = state.metadata["mc_variant"];
    if (state.metadata.contains("simpleshot_variant"))
        r.metadata["simpleshot_variant"] = state.metadata["simpleshot_variant"];
    if (state.metadata.contains("early_stopping")) r.metadata["early_stopping"] = state.metadata["early_stopping"];
    return r;
}

std::vector<EvalReport> sweep_shots(const LearnerState& state, const Partition& partition,
                                    const std::vector<int>& k_values, int q_queries, const SpectrogramSource& source,
                                    const EvalOptions& options) {
    std::vector<EvalReport> out;
    for (int k : k_values) {
        EpisodeSpec spec{state.train_spec.n_way, k, q_queries};
        EvalReport r = evaluate(state, partition, spec, source, options);
        r.metadata["sweep"] = "shots";
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<EvalReport> sweep_ways(const LearnerState& state, const Partition& partition,
                                   const std::vector<int>& n_values, int q_queries, const SpectrogramSource& source,
                                   const EvalOptions& options) {
    if (is_gradient_based(state.algorithm))
        fail(ErrorCode::invalid_argument, "N-way sweeps exclude gradient-based learners (fixed-size output head)");
    const auto usable = partition.eligible_classes(1).size();
    std::vector<EvalReport> out;
    for (int n : n_values) {
        EpisodeSpec spec{n, 1, q_queries};
        if (static_cast<std::size_t>(n) > usable) {
            EvalReport r;
            r.dataset_id = partition.dataset_id;
            r.algorithm = to_string(state.algorithm);
            r.spec = spec;
            r.seed = options.seed;
            r.available = false;
            r.metadata["sweep"] = "ways";
            r.metadata["reason"] = "only " + std::to_string(usable) + " usable classes";
            out.push_back(std::move(r));
            continue;
        }
        EvalReport r = evaluate(state, partition, spec, source, options);
        r.metadata["sweep"] = "ways";
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<double> average_rank(const RankTable& table) {
    const std::size_t m = table.algorithms.size();
    if (m == 0 || table.datasets.empty()) fail(ErrorCode::invalid_argument, "empty rank table");
    if (table.accuracy.size() != table.datasets.size()) fail(ErrorCode::invalid_argument, "rank table row count mismatch");
    std::vector<double> total(m, 0.0);
    for (std::size_t d = 0; d < table.datasets.size(); ++d) {
        const auto& row = table.accuracy[d];
        if (row.size() != m) fail(ErrorCode::invalid_argument, "rank table column count mismatch");
        for (std::size_t a = 0; a < m; ++a)
            if (std::isnan(row[a]))
                fail(ErrorCode::invalid_argument,
                     "missing cell (" + table.datasets[d] + ", " + table.algorithms[a] + ") in rank table");
        for (std::size_t a = 0; a < m; ++a) {
            std::size_t better = 0, equal = 0;
            for (std::size_t b = 0; b < m; ++b) {
                if (row[b] > row[a]) ++better;
                else if (row[b] == row[a]) ++equal;
            }
            // tied block occupies ranks better+1 .. better+equal
            total[a] += static_cast<double>(better) + (static_cast<double>(equal) + 1.0) / 2.0;
        }
    }
    for (double& t : total) t /= static_cast<double>(table.datasets.size());
    return total;
}

// --- fixed features --------------------------------------------------------------

FeatureTable read_feature_table(std::istream& in) {
    FeatureTable table;
    std::string line;
    std::size_t line_no = 0, dim = 0;
    while (std::getline(in, line)) {
        ++line_no;
        for (char& c : line)
            if (c == ',' || c == '\t' || c == '\r') c = ' ';
        std::istringstream ss(line);
        std::string id;
        if (!(ss >> id) || id[0] == '#') continue;
        std::vector<float> v;
        std::string tok;
        while (ss >> tok) {
            try {
                std::size_t used = 0;
                v.push_back(std::stof(tok, &used));
                if (used != tok.size()) throw std::invalid_argument(tok);
            } catch (const std::exception&) {
                fail(ErrorCode::format, "feature table line " + std::to_string(line_no) + ": bad value '" + tok + "'");
            }
        }
        if (v.empty()) fail(ErrorCode::format, "feature table line " + std::to_string(line_no) + ": no values");
        if (dim == 0) dim = v.size();
        if (v.size() != dim)
            fail(ErrorCode::format, "feature table line " + std::to_string(line_no) + ": expected " +
                                        std::to_string(dim) + " values, got " + std::to_string(v.size()));
        if (!table.emplace(id, std::move(v)).second)
            fail(ErrorCode::format, "feature table: duplicate clip '" + id + "'");
    }
    if (table.empty()) fail(ErrorCode::format, "feature table is empty");
    return table;
}

FeatureTable read_feature_table(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::not_found, "no feature table at " + path.string());
    return read_feature_table(in);
}

std::string to_string(FixedClassifier c) { return c == FixedClassifier::ncc_cl2n ? "ncc_cl2n" : "linear_svm"; }

FixedClassifier parse_fixed_classifier(const std::string& text) {
    if (text == "ncc_cl2n" || text == "ncc") return FixedClassifier::ncc_cl2n;
    if (text == "linear_svm" || text == "svm") return FixedClassifier::linear_svm;
    fail(ErrorCode::invalid_argument, "unknown fixed-feature classifier '" + text + "'");
}

namespace {

const std::vector<float>& feature_of(const FeatureTable& table, const std::string& clip) {
    const auto it = table.find(clip);
    if (it == table.end()) fail(ErrorCode::not_found, "no feature vector for clip '" + clip + "'");
    return it->second;
}

class FeatureSource : public SpectrogramSource {
public:
    explicit FeatureSource(const FeatureTable& table) : table_(table) {}
    SpectrogramPtr load(const std::string&, const std::string& clip_id, int) const override {
        const auto& v = feature_of(table_, clip_id);
        auto s = std::make_shared<Spectrogram>(1, v.size());
        s->values = v;
        return s;
    }

private:
    const FeatureTable& table_;
};

Matrix feature_rows(const std::vector<EpisodeItem>& items) {
    Matrix m(static_cast<Eigen::Index>(items.size()), static_cast<Eigen::Index>(items.front().spectrogram->values.size()));
    for (std::size_t i = 0; i < items.size(); ++i)
        for (std::size_t j = 0; j < items[i].spectrogram->values.size(); ++j)
            m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = items[i].spectrogram->values[j];
    return m;
}

}  // namespace

std::vector<float> partition_feature_mean(const FeatureTable& table, const Partition& partition) {
    std::vector<double> sum;
    std::size_t n = 0;
    for (const auto& clips : partition.clips)
        for (const auto& c : clips) {
            const auto& v = feature_of(table, c.clip_id);
            if (sum.empty()) sum.assign(v.size(), 0.0);
            for (std::size_t j = 0; j < v.size(); ++j) sum[j] += v[j];
            ++n;
        }
    if (n == 0) fail(ErrorCode::invalid_argument, "partition has no clips");
    std::vector<float> mean(sum.size());
    for (std::size_t j = 0; j < sum.size(); ++j) mean[j] = static_cast<float>(sum[j] / static_cast<double>(n));
    return mean;
}

std::vector<int> LinearSvm::predict(const Matrix& x) const {
    std::vector<int> out(static_cast<std::size_t>(x.rows()));
    const Eigen::Index dim = x.cols();
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        int best = 0;
        double best_score = -std::numeric_limits<double>::infinity();
        for (Eigen::Index c = 0; c < weights.rows(); ++c) {
            double s = weights(c, dim);
            for (Eigen::Index j = 0; j < dim; ++j) s += static_cast<double>(weights(c, j)) * x(i, j);
            if (s > best_score) {
                best_score = s;
                best = static_cast<int>(c);
            }
        }
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

LinearSvm train_linear_svm(const Matrix& x, const std::vector<int>& labels, int n_classes, double c, double tol,
                           int max_iter) {
    if (x.rows() == 0 || static_cast<std::size_t>(x.rows()) != labels.size())
        fail(ErrorCode::invalid_argument, "SVM needs one label per training row");
    const Eigen::Index n = x.rows(), dim = x.cols();
    // Bias folded in as a constant feature.
    Eigen::MatrixXd xa(n, dim + 1);
    xa.leftCols(dim) = x.cast<double>();
    xa.col(dim).setOnes();
    const Eigen::VectorXd qii = xa.rowwise().squaredNorm();
    LinearSvm svm;
    svm.weights = Matrix::Zero(n_classes, dim + 1);
    for (int cls = 0; cls < n_classes; ++cls) {
        Eigen::VectorXd y(n), alpha = Eigen::VectorXd::Zero(n), w = Eigen::VectorXd::Zero(dim + 1);
        for (Eigen::Index i = 0; i < n; ++i) y(i) = labels[static_cast<std::size_t>(i)] == cls ? 1.0 : -1.0;
        for (int it = 0; it < max_iter; ++it) {
            double pg_max = -std::numeric_limits<double>::infinity(), pg_min = std::numeric_limits<double>::infinity();
            for (Eigen::Index i = 0; i < n; ++i) {
                const double g = y(i) * xa.row(i).dot(w) - 1.0;
                double pg = g;
                if (alpha(i) <= 0.0) pg = std::min(g, 0.0);
                else if (alpha(i) >= c) pg = std::max(g, 0.0);
                pg_max = std::max(pg_max, pg);
                pg_min = std::min(pg_min, pg);
                if (pg != 0.0 && qii(i) > 0.0) {
                    const double old = alpha(i);
                    alpha(i) = std::clamp(old - g / qii(i), 0.0, c);
                    w += (alpha(i) - old) * y(i) * xa.row(i).transpose();
                }
            }
            if (pg_max - pg_min < tol) break;
        }
        svm.weights.row(cls) = w.transpose().cast<float>();
    }
    return svm;
}

EvalReport fixed_feature_evaluate(const FeatureTable& table, const Partition& partition, const EpisodeSpec& spec,
                                  FixedClassifier classifier, const std::vector<float>& train_mean,
                                  const EvalOptions& options) {
    spec.validate();
    for (const auto& clips : partition.clips)
        for (const auto& c : clips) feature_of(table, c.clip_id);
    const auto usable = partition.eligible_classes(spec.k_shot).size();
    if (usable < static_cast<std::size_t>(spec.n_way))
        fail(ErrorCode::invalid_argument, "partition '" + partition.dataset_id + "' has fewer than N usable classes");
    const FeatureSource source(table);
    std::vector<double> acc(static_cast<std::size_t>(options.n_tasks));
    parallel_tasks(options.n_tasks, options.threads, [&](int t) {
        Rng rng(derive_seed(options.seed, static_cast<std::uint64_t>(t)));
        const Episode e = sample_episode_single(partition, spec, rng, source);
        const Matrix s = feature_rows(e.support()), q = feature_rows(e.query());
        const auto sl = labels_of(e.support());
        std::vector<int> pred;
        if (classifier == FixedClassifier::ncc_cl2n) {
            pred = cl2n_nearest_centroid(s, sl, q, spec.n_way, train_mean);
        } else {
            pred = train_linear_svm(s, sl, spec.n_way).predict(q);
        }
        acc[static_cast<std::size_t>(t)] = accuracy_of(pred, e.query());
    });
    EvalReport r = summarise(partition.dataset_id, "fixed_feature/" + to_string(classifier), spec, std::move(acc), options);
    if (classifier == FixedClassifier::linear_svm) r.metadata["svm"] = "one-vs-rest hinge, C=1, dual CD, tol=1e-4";
    return r;
}

// --- rendering -----------------------------------------------------------------------

RankTable ResultTable::ranks() const {
    RankTable t;
    t.algorithms = algorithms;
    t.datasets = datasets;
    for (const auto& d : datasets) {
        std::vector<double> row;
        for (const auto& a : algorithms) {
            const auto it = cells.find({d, a});
            row.push_back(it == cells.end() || !it->second.available ? std::numeric_limits<double>::quiet_NaN()
                                                                     : it->second.mean_accuracy);
        }
        t.accuracy.push_back(std::move(row));
    }
    return t;
}

ResultTable build_result_table(const std::vector<EvalReport>& reports) {
    ResultTable t;
    for (const auto& r : reports) {
        if (std::find(t.algorithms.begin(), t.algorithms.end(), r.algorithm) == t.algorithms.end())
            t.algorithms.push_back(r.algorithm);
        if (std::find(t.datasets.begin(), t.datasets.end(), r.dataset_id) == t.datasets.end())
            t.datasets.push_back(r.dataset_id);
        t.cells[{r.dataset_id, r.algorithm}] = r;
    }
    return t;
}

namespace {

std::string cell_text(const ResultTable& t, const std::string& d, const std::string& a) {
    const auto it = t.cells.find({d, a});
    if (it == t.cells.end() || !it->second.available) return "-";
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << 100.0 * it->second.mean_accuracy << " +- "
      << 100.0 * it->second.ci95_halfwidth;
    return s.str();
}

std::vector<double> ranks_if_complete(const ResultTable& t) {
    const RankTable r = t.ranks();
    for (const auto& row : r.accuracy)
        for (double v : row)
            if (std::isnan(v)) return {};
    return average_rank(r);
}

std::string fixed(double v, int digits) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(digits) << v;
    return s.str();
}

}  // namespace

std::string render_text(const ResultTable& t) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> header{"dataset"};
    header.insert(header.end(), t.algorithms.begin(), t.algorithms.end());
    rows.push_back(header);
    for (const auto& d : t.datasets) {
        std::vector<std::string> row{d};
        for (const auto& a : t.algorithms) row.push_back(cell_text(t, d, a));
        rows.push_back(row);
    }
    const auto ranks = ranks_if_complete(t);
    if (!ranks.empty()) {
        std::vector<std::string> row{"avg rank"};
        for (double r : ranks) row.push_back(fixed(r, 1));
        rows.push_back(row);
    }
    std::vector<std::size_t> width(header.size(), 0);
    for (const auto& row : rows)
        for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
    std::ostringstream out;
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t i = 0; i < rows[r].size(); ++i) {
            if (i) out << "  ";
            out << (i == 0 ? std::left : std::right) << std::setw(static_cast<int>(width[i])) << rows[r][i];
        }
        out << '\n';
        if (r == 0 || (!ranks.empty() && r + 2 == rows.size())) {
            std::size_t total = 0;
            for (std::size_t w : width) total += w + 2;
            out << std::string(total - 2, '-') << '\n';
        }
    }
    return out.str();
}

std::string render_csv(const ResultTable& t) {
    std::ostringstream out;
    out << "dataset,algorithm,n_way,k_shot,n_tasks,mean_accuracy,ci95_halfwidth\n";
    for (const auto& d : t.datasets)
        for (const auto& a : t.algorithms) {
            const auto it = t.cells.find({d, a});
            if (it == t.cells.end()) continue;
            const auto& r = it->second;
            out << d << ',' << a << ',' << r.spec.n_way << ',' << r.spec.k_shot << ',' << r.n_tasks << ','
                << (r.available ? fixed(r.mean_accuracy, 6) : "") << ','
                << (r.available ? fixed(r.ci95_halfwidth, 6) : "") << '\n';
        }
    const auto ranks = ranks_if_complete(t);
    for (std::size_t a = 0; a < ranks.size(); ++a)
        out << "avg_rank," << t.algorithms[a] << ",,,,," << fixed(ranks[a], 3) << '\n';
    return out.str();
}

std::string render_sweep(const std::vector<EvalReport>& reports, bool by_shots) {
    std::vector<std::string> series;
    std::map<int, std::map<std::string, const EvalReport*>> grid;
    for (const auto& r : reports) {
        const std::string name = r.dataset_id + "/" + r.algorithm;
        if (std::find(series.begin(), series.end(), name) == series.end()) series.push_back(name);
        grid[by_shots ? r.spec.k_shot : r.spec.n_way][name] = &r;
    }
    std::ostringstream out;
    out << '#' << (by_shots ? "k_shot" : "n_way");
    for (const auto& s : series) out << '\t' << s << ":mean\t" << s << ":ci95";
    out << '\n';
    for (const auto& [x, row] : grid) {
        out << x;
        for (const auto& s : series) {
            const auto it = row.find(s);
            if (it == row.end() || !it->second->available) out << "\tnan\tnan";
            else out << '\t' << fixed(it->second->mean_accuracy, 6) << '\t' << fixed(it->second->ci95_halfwidth, 6);
        }
        out << '\n';
    }
    return out.str();
}

}  // namespace fsa
