#include "fsa/learners.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

namespace fsa {

using nlohmann::json;

std::string to_string(Algorithm a) {
    switch (a) {
        case Algorithm::protonet: return "protonet";
        case Algorithm::fo_maml: return "fo_maml";
        case Algorithm::fo_meta_curvature: return "fo_meta_curvature";
        case Algorithm::simpleshot: return "simpleshot";
        case Algorithm::meta_baseline: return "meta_baseline";
        case Algorithm::random: return "random";
    }
    return "protonet";
}

Algorithm parse_algorithm(const std::string& text) {
    for (Algorithm a : {Algorithm::protonet, Algorithm::fo_maml, Algorithm::fo_meta_curvature, Algorithm::simpleshot,
                        Algorithm::meta_baseline, Algorithm::random})
        if (to_string(a) == text) return a;
    if (text == "maml") return Algorithm::fo_maml;
    if (text == "meta_curvature" || text == "mc") return Algorithm::fo_meta_curvature;
    fail(ErrorCode::invalid_argument, "unknown algorithm '" + text + "'");
}

bool is_gradient_based(Algorithm a) { return a == Algorithm::fo_maml || a == Algorithm::fo_meta_curvature; }

// --- Meta-Curvature --------------------------------------------------------------

MCTransforms MCTransforms::identity(const ParamSet<float>& params) {
    MCTransforms t;
    for (const auto& p : params) {
        t.scales.add(p.name, p.shape, 1.0f);
        if (p.rank() == 2) {
            auto& left = t.lefts.add(p.name, {p.shape[0], p.shape[0]});
            for (int i = 0; i < p.shape[0]; ++i) left.data[static_cast<std::size_t>(i * p.shape[0] + i)] = 1.0f;
        }
    }
    return t;
}

ParamSet<float> metacurvature_transform(const ParamSet<float>& raw, const MCTransforms& transforms) {
    raw.check_layout(transforms.scales);
    ParamSet<float> out = raw;
    for (std::size_t i = 0; i < out.count(); ++i) {
        auto& g = out[i];
        const auto& s = transforms.scales[i].data;
        for (std::size_t j = 0; j < g.data.size(); ++j) g.data[j] *= s[j];
        if (g.rank() != 2) continue;
        const auto& left = transforms.lefts.at(g.name);
        if (left.shape != std::vector<int>{g.shape[0], g.shape[0]})
            fail(ErrorCode::invalid_argument, "meta-curvature matrix for '" + g.name + "' has the wrong shape");
        Eigen::Map<const Matrix> L(left.data.data(), g.shape[0], g.shape[0]);
        Eigen::Map<Matrix> G(g.data.data(), g.shape[0], g.shape[1]);
        const Matrix scaled = G;
        G.noalias() = L * scaled;
    }
    return out;
}

// --- state -----------------------------------------------------------------------

LearnerState LearnerState::create(Algorithm algorithm, CRNNConfig backbone, const EpisodeSpec& train_spec,
                                  std::uint64_t seed) {
    LearnerState s;
    s.algorithm = algorithm;
    if (is_gradient_based(algorithm)) {
        backbone.head = HeadKind::n_way;
        backbone.head_width = train_spec.n_way;
    } else {
        backbone.head = HeadKind::embedding;
    }
    s.backbone = backbone;
    const CRNN<float> model(backbone);
    s.params = model.init_params(seed);
    s.buffers = model.init_buffers();
    s.train_spec = train_spec;
    s.seed = seed;
    if (algorithm == Algorithm::fo_meta_curvature) {
        s.mc = MCTransforms::identity(s.params);
        s.metadata["mc_variant"] = "elementwise_scale+left_matrix_2d,first_order";
    }
    if (algorithm == Algorithm::simpleshot) {
        s.train_mean.assign(static_cast<std::size_t>(backbone.head_width), 0.0f);
        s.metadata["simpleshot_variant"] = "CL2N";
    }
    if (algorithm == Algorithm::meta_baseline) s.logit_scale = 10.0f;
    return s;
}

void LearnerState::validate() const {
    const CRNN<float> m(backbone);
    if (!m.init_params(0).same_layout(params)) fail(ErrorCode::format, "parameters do not match the backbone config");
    if (is_gradient_based(algorithm) && backbone.head != HeadKind::n_way)
        fail(ErrorCode::format, "gradient-based learners need an n_way head");
    if (mc.has_value() != (algorithm == Algorithm::fo_meta_curvature))
        fail(ErrorCode::format, "meta-curvature transforms present iff the algorithm is fo_meta_curvature");
    if (mc && !mc->scales.same_layout(params)) fail(ErrorCode::format, "meta-curvature scales do not match parameters");
    if (!train_mean.empty() != (algorithm == Algorithm::simpleshot))
        fail(ErrorCode::format, "train-feature mean present iff the algorithm is simpleshot");
    if (logit_scale.has_value() != (algorithm == Algorithm::meta_baseline))
        fail(ErrorCode::format, "logit scale present iff the algorithm is meta_baseline");
}

namespace {

constexpr char kCheckpointMagic[8] = {'F', 'S', 'A', 'C', 'K', 'P', 'T', '1'};

void add_tensors(json& index, std::vector<const std::vector<float>*>& blobs, const std::string& group,
                 const ParamSet<float>& set) {
    for (const auto& p : set) {
        index.push_back(json{{"group", group}, {"name", p.name}, {"shape", p.shape}});
        blobs.push_back(&p.data);
    }
}

}  // namespace

void LearnerState::save(const std::filesystem::path& path) const {
    validate();
    json header;
    header["algorithm"] = to_string(algorithm);
    header["backbone"] = backbone;
    header["inner"] = json{{"steps", inner.steps}, {"lr", inner.lr}};
    header["norm"] = norm;
    header["train_spec"] = train_spec;
    header["seed"] = seed;
    header["step"] = step;
    header["metadata"] = metadata;
    if (logit_scale) header["logit_scale"] = *logit_scale;
    json index = json::array();
    std::vector<const std::vector<float>*> blobs;
    add_tensors(index, blobs, "params", params);
    for (std::size_t b = 0; b < buffers.running_mean.size(); ++b) {
        index.push_back(json{{"group", "bn_mean"}, {"name", std::to_string(b)}, {"shape", {buffers.running_mean[b].size()}}});
        blobs.push_back(&buffers.running_mean[b]);
        index.push_back(json{{"group", "bn_var"}, {"name", std::to_string(b)}, {"shape", {buffers.running_var[b].size()}}});
        blobs.push_back(&buffers.running_var[b]);
    }
    if (mc) {
        add_tensors(index, blobs, "mc_scale", mc->scales);
        add_tensors(index, blobs, "mc_left", mc->lefts);
    }
    if (!train_mean.empty()) {
        index.push_back(json{{"group", "train_mean"}, {"name", "mean"}, {"shape", {train_mean.size()}}});
        blobs.push_back(&train_mean);
    }
    header["tensors"] = index;
    const std::string text = header.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) fail(ErrorCode::io, "cannot write checkpoint " + tmp.string());
        out.write(kCheckpointMagic, 8);
        const std::uint64_t len = text.size();
        out.write(reinterpret_cast<const char*>(&len), 8);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto* b : blobs)
            out.write(reinterpret_cast<const char*>(b->data()), static_cast<std::streamsize>(b->size() * sizeof(float)));
        if (!out) fail(ErrorCode::io, "failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

LearnerState LearnerState::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::not_found, "no checkpoint at " + path.string());
    char magic[8];
    std::uint64_t len = 0;
    if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        fail(ErrorCode::format, "not a checkpoint file: " + path.string());
    in.read(reinterpret_cast<char*>(&len), 8);
    if (!in || len > (1u << 30)) fail(ErrorCode::format, "corrupt checkpoint header: " + path.string());
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    json header;
    try {
        header = json::parse(text);
    } catch (const json::exception& e) {
        fail(ErrorCode::format, std::string("corrupt checkpoint header: ") + e.what());
    }

    LearnerState s;
    try {
        s.algorithm = parse_algorithm(header.at("algorithm").get<std::string>());
        s.backbone = header.at("backbone").get<CRNNConfig>();
        s.inner.steps = header.at("inner").at("steps").get<int>();
        s.inner.lr = header.at("inner").at("lr").get<double>();
        s.norm = header.at("norm").get<NormalizationStats>();
        s.train_spec = header.at("train_spec").get<EpisodeSpec>();
        s.seed = header.at("seed").get<std::uint64_t>();
        s.step = header.at("step").get<std::int64_t>();
        s.metadata = header.at("metadata");
        if (header.contains("logit_scale")) s.logit_scale = header.at("logit_scale").get<float>();
        MCTransforms mc;
        bool has_mc = false;
        for (const auto& t : header.at("tensors")) {
            const auto group = t.at("group").get<std::string>();
            const auto name = t.at("name").get<std::string>();
            const auto shape = t.at("shape").get<std::vector<int>>();
            std::size_t n = 1;
            for (int d : shape) n *= static_cast<std::size_t>(d);
            std::vector<float> data(n);
            in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(float)));
            if (!in) fail(ErrorCode::format, "truncated checkpoint: " + path.string());
            if (group == "params") s.params.add(name, shape).data = std::move(data);
            else if (group == "bn_mean") s.buffers.running_mean.push_back(std::move(data));
            else if (group == "bn_var") s.buffers.running_var.push_back(std::move(data));
            else if (group == "mc_scale") { mc.scales.add(name, shape).data = std::move(data); has_mc = true; }
            else if (group == "mc_left") { mc.lefts.add(name, shape).data = std::move(data); has_mc = true; }
            else if (group == "train_mean") s.train_mean = std::move(data);
            else fail(ErrorCode::format, "unknown tensor group '" + group + "'");
        }
        if (has_mc) s.mc = std::move(mc);
    } catch (const json::exception& e) {
        fail(ErrorCode::format, std::string("malformed checkpoint: ") + e.what());
    }
    s.validate();
    return s;
}

// --- losses ------------------------------------------------------------------------

LossResult softmax_cross_entropy(const Matrix& logits, const std::vector<int>& labels,
                                 const std::vector<double>& class_weights) {
    const auto rows = static_cast<int>(logits.rows()), cols = static_cast<int>(logits.cols());
    if (static_cast<std::size_t>(rows) != labels.size()) fail(ErrorCode::invalid_argument, "label count mismatch");
    LossResult r;
    r.d_logits = Matrix::Zero(rows, cols);
    double total_w = 0.0, loss = 0.0;
    int correct = 0;
    std::vector<double> p(static_cast<std::size_t>(cols));
    for (int i = 0; i < rows; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= cols) fail(ErrorCode::invalid_argument, "label out of range");
        const double w = class_weights.empty() ? 1.0 : class_weights[static_cast<std::size_t>(y)];
        double mx = -std::numeric_limits<double>::infinity();
        int arg = 0;
        for (int c = 0; c < cols; ++c)
            if (logits(i, c) > mx) {
                mx = logits(i, c);
                arg = c;
            }
        double z = 0.0;
        for (int c = 0; c < cols; ++c) z += (p[static_cast<std::size_t>(c)] = std::exp(logits(i, c) - mx));
        loss += w * (std::log(z) - (logits(i, y) - mx));
        total_w += w;
        correct += arg == y;
        for (int c = 0; c < cols; ++c) r.d_logits(i, c) = static_cast<float>(w * p[static_cast<std::size_t>(c)] / z);
        r.d_logits(i, y) -= static_cast<float>(w);
    }
    r.loss = loss / total_w;
    r.d_logits /= static_cast<float>(total_w);
    r.accuracy = static_cast<double>(correct) / rows;
    return r;
}

std::map<std::string, double> inverse_frequency_weights(const std::map<std::string, std::size_t>& counts) {
    if (counts.empty()) fail(ErrorCode::invalid_argument, "no classes to weight");
    double sum = 0.0;
    for (const auto& [c, n] : counts) {
        if (n == 0) fail(ErrorCode::invalid_argument, "class '" + c + "' has zero samples");
        sum += 1.0 / static_cast<double>(n);
    }
    const double mean = sum / static_cast<double>(counts.size());
    std::map<std::string, double> w;
    for (const auto& [c, n] : counts) w[c] = (1.0 / static_cast<double>(n)) / mean;
    return w;
}

// --- metric heads ------------------------------------------------------------------

Matrix class_centroids(const Matrix& support, const std::vector<int>& labels, int n_way) {
    Matrix c = Matrix::Zero(n_way, support.cols());
    std::vector<int> counts(static_cast<std::size_t>(n_way), 0);
    for (Eigen::Index i = 0; i < support.rows(); ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        c.row(y) += support.row(i);
        ++counts[static_cast<std::size_t>(y)];
    }
    for (int n = 0; n < n_way; ++n) {
        if (counts[static_cast<std::size_t>(n)] == 0) fail(ErrorCode::invalid_argument, "class without support items");
        c.row(n) /= static_cast<float>(counts[static_cast<std::size_t>(n)]);
    }
    return c;
}

namespace {

std::vector<int> argmax_rows(const Eigen::MatrixXd& scores) {
    std::vector<int> out(static_cast<std::size_t>(scores.rows()));
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        int best = 0;
        for (Eigen::Index c = 1; c < scores.cols(); ++c)
            if (scores(i, c) > scores(i, best)) best = static_cast<int>(c);
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

double match_rate(const std::vector<int>& pred, const std::vector<int>& labels) {
    if (labels.empty()) return 0.0;
    std::size_t hit = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

// Softmax cross-entropy on double logits; returns d_logits.
Eigen::MatrixXd ce_double(const Eigen::MatrixXd& logits, const std::vector<int>& labels, double& loss) {
    Eigen::MatrixXd d(logits.rows(), logits.cols());
    loss = 0.0;
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        double z = 0.0;
        for (Eigen::Index c = 0; c < logits.cols(); ++c) z += (d(i, c) = std::exp(logits(i, c) - mx));
        d.row(i) /= z;
        const int y = labels[static_cast<std::size_t>(i)];
        loss += std::log(z) - (logits(i, y) - mx);
        d(i, y) -= 1.0;
    }
    const auto n = static_cast<double>(logits.rows());
    loss /= n;
    return d / n;
}

}  // namespace

MetricResult protonet_loss(const Matrix& support, const std::vector<int>& support_labels, const Matrix& query,
                           const std::vector<int>& query_labels, int n_way) {
    const Eigen::MatrixXd s = support.cast<double>(), q = query.cast<double>();
    const Eigen::MatrixXd c = class_centroids(support, support_labels, n_way).cast<double>();
    // Centroids in double for the loss; recompute from double support for consistency.
    Eigen::MatrixXd cd = Eigen::MatrixXd::Zero(n_way, s.cols());
    std::vector<int> counts(static_cast<std::size_t>(n_way), 0);
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        cd.row(support_labels[static_cast<std::size_t>(i)]) += s.row(i);
        ++counts[static_cast<std::size_t>(support_labels[static_cast<std::size_t>(i)])];
    }
    for (int n = 0; n < n_way; ++n) cd.row(n) /= counts[static_cast<std::size_t>(n)];
    (void)c;

    Eigen::MatrixXd logits(q.rows(), n_way);
    for (Eigen::Index i = 0; i < q.rows(); ++i)
        for (int n = 0; n < n_way; ++n) logits(i, n) = -(q.row(i) - cd.row(n)).squaredNorm();

    MetricResult r;
    r.predictions = argmax_rows(logits);
    r.accuracy = match_rate(r.predictions, query_labels);
    const Eigen::MatrixXd dl = ce_double(logits, query_labels, r.loss);
    Eigen::MatrixXd dq = Eigen::MatrixXd::Zero(q.rows(), q.cols());
    Eigen::MatrixXd dc = Eigen::MatrixXd::Zero(n_way, q.cols());
    for (Eigen::Index i = 0; i < q.rows(); ++i)
        for (int n = 0; n < n_way; ++n) {
            const Eigen::RowVectorXd diff = q.row(i) - cd.row(n);
            dq.row(i) += -2.0 * dl(i, n) * diff;
            dc.row(n) += 2.0 * dl(i, n) * diff;
        }
    Eigen::MatrixXd ds(s.rows(), s.cols());
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const int y = support_labels[static_cast<std::size_t>(i)];
        ds.row(i) = dc.row(y) / counts[static_cast<std::size_t>(y)];
    }
    r.d_support = ds.cast<float>();
    r.d_query = dq.cast<float>();
    return r;
}

MetricResult metabaseline_loss(const Matrix& support, const std::vector<int>& support_labels, const Matrix& query,
                               const std::vector<int>& query_labels, int n_way, double scale) {
    const Eigen::MatrixXd s = support.cast<double>(), q = query.cast<double>();
    Eigen::MatrixXd c = Eigen::MatrixXd::Zero(n_way, s.cols());
    std::vector<int> counts(static_cast<std::size_t>(n_way), 0);
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        c.row(support_labels[static_cast<std::size_t>(i)]) += s.row(i);
        ++counts[static_cast<std::size_t>(support_labels[static_cast<std::size_t>(i)])];
    }
    for (int n = 0; n < n_way; ++n) {
        if (counts[static_cast<std::size_t>(n)] == 0) fail(ErrorCode::invalid_argument, "class without support items");
        c.row(n) /= counts[static_cast<std::size_t>(n)];
    }
    const double floor = 1e-12;
    Eigen::VectorXd qn(q.rows()), cn(n_way);
    for (Eigen::Index i = 0; i < q.rows(); ++i) qn(i) = std::max(q.row(i).norm(), floor);
    for (int n = 0; n < n_way; ++n) cn(n) = std::max(c.row(n).norm(), floor);
    Eigen::MatrixXd cosine(q.rows(), n_way);
    for (Eigen::Index i = 0; i < q.rows(); ++i)
        for (int n = 0; n < n_way; ++n) cosine(i, n) = q.row(i).dot(c.row(n)) / (qn(i) * cn(n));

    MetricResult r;
    r.predictions = argmax_rows(cosine);
    r.accuracy = match_rate(r.predictions, query_labels);
    const Eigen::MatrixXd logits = scale * cosine;
    const Eigen::MatrixXd dl = ce_double(logits, query_labels, r.loss);
    r.d_scale = (dl.array() * cosine.array()).sum();
    const Eigen::MatrixXd dcos = scale * dl;
    Eigen::MatrixXd dq = Eigen::MatrixXd::Zero(q.rows(), q.cols());
    Eigen::MatrixXd dc = Eigen::MatrixXd::Zero(n_way, q.cols());
    for (Eigen::Index i = 0; i < q.rows(); ++i)
        for (int n = 0; n < n_way; ++n) {
            const double g = dcos(i, n), cs = cosine(i, n);
            dq.row(i) += g * (c.row(n) / (qn(i) * cn(n)) - cs * q.row(i) / (qn(i) * qn(i)));
            dc.row(n) += g * (q.row(i) / (qn(i) * cn(n)) - cs * c.row(n) / (cn(n) * cn(n)));
        }
    Eigen::MatrixXd ds(s.rows(), s.cols());
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const int y = support_labels[static_cast<std::size_t>(i)];
        ds.row(i) = dc.row(y) / counts[static_cast<std::size_t>(y)];
    }
    r.d_support = ds.cast<float>();
    r.d_query = dq.cast<float>();
    return r;
}

Matrix cl2n(const Matrix& features, const std::vector<float>& mean) {
    if (static_cast<std::size_t>(features.cols()) != mean.size())
        fail(ErrorCode::invalid_argument, "feature mean has the wrong dimension");
    Matrix out(features.rows(), features.cols());
    for (Eigen::Index i = 0; i < features.rows(); ++i) {
        double norm = 0.0;
        for (Eigen::Index j = 0; j < features.cols(); ++j) {
            const double v = static_cast<double>(features(i, j)) - mean[static_cast<std::size_t>(j)];
            norm += v * v;
        }
        norm = std::max(std::sqrt(norm), 1e-12);
        for (Eigen::Index j = 0; j < features.cols(); ++j)
            out(i, j) = static_cast<float>((static_cast<double>(features(i, j)) - mean[static_cast<std::size_t>(j)]) / norm);
    }
    return out;
}

std::vector<int> nearest_centroid(const Matrix& support, const std::vector<int>& support_labels, const Matrix& query,
                                  int n_way) {
    const Eigen::MatrixXd c = class_centroids(support, support_labels, n_way).cast<double>();
    const Eigen::MatrixXd q = query.cast<double>();
    Eigen::MatrixXd neg(q.rows(), n_way);
    for (Eigen::Index i = 0; i < q.rows(); ++i)
        for (int n = 0; n < n_way; ++n) neg(i, n) = -(q.row(i) - c.row(n)).squaredNorm();
    return argmax_rows(neg);
}

std::vector<int> cl2n_nearest_centroid(const Matrix& support, const std::vector<int>& support_labels,
                                       const Matrix& query, int n_way, const std::vector<float>& mean) {
    return nearest_centroid(cl2n(support, mean), support_labels, cl2n(query, mean), n_way);
}

// --- episode helpers -----------------------------------------------------------------

std::vector<int> labels_of(const std::vector<EpisodeItem>& items) {
    std::vector<int> out;
    out.reserve(items.size());
    for (const auto& it : items) out.push_back(it.class_index);
    return out;
}

std::vector<float> pack_items(const std::vector<EpisodeItem>& items, const CRNNConfig& config) {
    std::vector<const Spectrogram*> ptrs;
    ptrs.reserve(items.size());
    for (const auto& it : items) ptrs.push_back(it.spectrogram.get());
    return pack_batch<float>(ptrs, config);
}

Matrix embed_spectrograms(const LearnerState& state, const std::vector<const Spectrogram*>& items) {
    const CRNN<float> model(state.backbone);
    Matrix out(static_cast<Eigen::Index>(items.size()), state.backbone.head_width);
    const std::size_t chunk = 64;
    for (std::size_t begin = 0; begin < items.size(); begin += chunk) {
        const std::size_t end = std::min(items.size(), begin + chunk);
        std::vector<const Spectrogram*> part(items.begin() + static_cast<long>(begin), items.begin() + static_cast<long>(end));
        auto buffers = state.buffers;
        const Matrix f = model.forward(state.params, pack_batch<float>(part, state.backbone),
                                       static_cast<int>(part.size()), Mode::infer, &buffers, nullptr);
        out.middleRows(static_cast<Eigen::Index>(begin), f.rows()) = f;
    }
    return out;
}

Matrix FeatureCache::embed(const LearnerState& state, const Episode& episode, const std::vector<EpisodeItem>& items) {
    std::vector<std::string> keys;
    keys.reserve(items.size());
    for (const auto& it : items)
        keys.push_back(episode.class_sources()[static_cast<std::size_t>(it.class_index)] + '\x1f' + it.parent_clip_id +
                       '\x1f' + std::to_string(it.subclip_index));
    std::vector<std::size_t> missing;
    {
        std::lock_guard<std::mutex> lock(mutex_);
        for (std::size_t i = 0; i < items.size(); ++i)
            if (!features_.count(keys[i])) missing.push_back(i);
    }
    if (!missing.empty()) {
        // One item per forward pass, so a cached feature never depends on
        // which other clips it happened to be batched with.
        for (std::size_t i : missing) {
            const Matrix f = embed_spectrograms(state, {items[i].spectrogram.get()});
            std::vector<float> row(f.data(), f.data() + f.cols());
            std::lock_guard<std::mutex> lock(mutex_);
            features_.emplace(keys[i], std::move(row));
        }
    }
    Matrix out(static_cast<Eigen::Index>(items.size()), state.backbone.head_width);
    std::lock_guard<std::mutex> lock(mutex_);
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& row = features_.at(keys[i]);
        for (std::size_t c = 0; c < row.size(); ++c) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = row[c];
    }
    return out;
}

// --- ProtoNets ---------------------------------------------------------------------

namespace {

std::vector<EpisodeItem> concat_items(const Episode& e) {
    std::vector<EpisodeItem> all = e.support();
    all.insert(all.end(), e.query().begin(), e.query().end());
    return all;
}

Matrix stack_rows(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows() + b.rows(), a.cols());
    out.topRows(a.rows()) = a;
    out.bottomRows(b.rows()) = b;
    return out;
}

}  // namespace

EpisodeOutcome protonet_episode(const LearnerState& state, const Episode& episode, ParamSet<float>* grads,
                                BnBuffers<float>* buffers) {
    const CRNN<float> model(state.backbone);
    const auto items = concat_items(episode);
    const auto ns = static_cast<Eigen::Index>(episode.support().size());
    CRNN<float>::Cache cache;
    const Matrix f = model.forward(state.params, pack_items(items, state.backbone), static_cast<int>(items.size()),
                                   Mode::train, buffers, &cache);
    const MetricResult r = protonet_loss(f.topRows(ns), labels_of(episode.support()), f.bottomRows(f.rows() - ns),
                                         labels_of(episode.query()), episode.spec().n_way);
    if (!std::isfinite(r.loss)) fail(ErrorCode::numerical, "non-finite prototypical loss");
    if (grads) *grads = model.backward(state.params, cache, stack_rows(r.d_support, r.d_query));
    return EpisodeOutcome{r.loss, r.accuracy};
}

// --- FO-MAML / FO-Meta-Curvature --------------------------------------------------------

Adaptation fomaml_adapt(const CRNN<float>& model, const ParamSet<float>& params, const Episode& episode,
                        const InnerLoopConfig& inner, const MCTransforms* mc) {
    if (model.config().head != HeadKind::n_way || model.config().head_width != episode.spec().n_way)
        fail(ErrorCode::invalid_argument, "adaptation needs an n_way classifier head matching the episode");
    Adaptation a;
    a.params = params;
    if (inner.steps <= 0) return a;
    const auto x = pack_items(episode.support(), model.config());
    const auto labels = labels_of(episode.support());
    const int batch = static_cast<int>(labels.size());
    for (int step = 0; step < inner.steps; ++step) {
        CRNN<float>::Cache cache;
        const Matrix logits = model.forward(a.params, x, batch, Mode::train, nullptr, &cache);
        const LossResult l = softmax_cross_entropy(logits, labels);
        if (!std::isfinite(l.loss))
            fail(ErrorCode::numerical, "non-finite support loss at inner step " + std::to_string(step));
        ParamSet<float> g = model.backward(a.params, cache, l.d_logits);
        a.support_losses.push_back(l.loss);
        if (mc) {
            a.params.axpy(static_cast<float>(-inner.lr), metacurvature_transform(g, *mc));
        } else {
            a.params.axpy(static_cast<float>(-inner.lr), g);
        }
        if (mc) a.support_grads.push_back(std::move(g));
    }
    return a;
}

MetaGradient fomaml_meta_gradient(const CRNN<float>& model, const ParamSet<float>& params, const Episode& episode,
                                  const InnerLoopConfig& inner, const MCTransforms* mc) {
    const Adaptation a = fomaml_adapt(model, params, episode, inner, mc);
    const auto labels = labels_of(episode.query());
    CRNN<float>::Cache cache;
    const Matrix logits = model.forward(a.params, pack_items(episode.query(), model.config()),
                                        static_cast<int>(labels.size()), Mode::train, nullptr, &cache);
    const LossResult l = softmax_cross_entropy(logits, labels);
    if (!std::isfinite(l.loss)) fail(ErrorCode::numerical, "non-finite query loss");
    MetaGradient mg;
    mg.params = model.backward(a.params, cache, l.d_logits);
    mg.query_loss = l.loss;
    mg.query_accuracy = l.accuracy;
    if (mc) {
        // First order: the query gradient at the adapted point stands in for
        // the gradient at every intermediate inner-loop point.
        MCTransforms g{mc->scales.zeros_like(), mc->lefts.zeros_like()};
        const float neg_lr = static_cast<float>(-inner.lr);
        for (std::size_t i = 0; i < params.count(); ++i) {
            const auto& G = mg.params[i];
            const auto& S = mc->scales[i].data;
            auto& dS = g.scales[i].data;
            for (const auto& step_grads : a.support_grads) {
                const auto& raw = step_grads[i].data;
                if (G.rank() == 2) {
                    const int rows = G.shape[0], cols = G.shape[1];
                    Eigen::Map<const Matrix> Gm(G.data.data(), rows, cols);
                    Eigen::Map<const Matrix> L(mc->lefts.at(G.name).data.data(), rows, rows);
                    Eigen::Map<const Matrix> R(raw.data(), rows, cols);
                    Eigen::Map<const Matrix> Sm(S.data(), rows, cols);
                    const Matrix u = Sm.cwiseProduct(R);
                    Eigen::Map<Matrix> dL(g.lefts.at(G.name).data.data(), rows, rows);
                    dL.noalias() += neg_lr * (Gm * u.transpose());
                    const Matrix back = L.transpose() * Gm;
                    Eigen::Map<Matrix> dSm(dS.data(), rows, cols);
                    dSm += neg_lr * back.cwiseProduct(R);
                } else {
                    for (std::size_t j = 0; j < dS.size(); ++j) dS[j] += neg_lr * G.data[j] * raw[j];
                }
            }
        }
        mg.transforms = std::move(g);
    }
    return mg;
}

void Adam::step(ParamSet<float>& params, const ParamSet<float>& grads) {
    params.check_layout(grads);
    if (m_.empty()) {
        for (const auto& p : params) {
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.count(); ++i) {
        auto& p = params[i].data;
        const auto& g = grads[i].data;
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
            p[j] = static_cast<float>(p[j] - lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_));
        }
    }
}

namespace {

ParamSet<float> join_transforms(const MCTransforms& t) {
    ParamSet<float> out;
    for (const auto& p : t.scales) out.add("scale:" + p.name, p.shape).data = p.data;
    for (const auto& p : t.lefts) out.add("left:" + p.name, p.shape).data = p.data;
    return out;
}

void split_transforms(const ParamSet<float>& joined, MCTransforms& t) {
    std::size_t k = 0;
    for (auto& p : t.scales) p.data = joined[k++].data;
    for (auto& p : t.lefts) p.data = joined[k++].data;
}

}  // namespace

MetaStepResult fomaml_meta_step(LearnerState& state, const std::vector<Episode>& batch, Adam& optimizer,
                                Adam* transform_optimizer) {
    if (batch.empty()) fail(ErrorCode::invalid_argument, "empty meta-batch");
    const CRNN<float> model(state.backbone);
    const MCTransforms* mc = state.mc ? &*state.mc : nullptr;
    MetaStepResult r;
    r.meta_gradient = state.params.zeros_like();
    std::optional<ParamSet<float>> transform_sum;
    for (const auto& e : batch) {
        const MetaGradient mg = fomaml_meta_gradient(model, state.params, e, state.inner, mc);
        r.meta_gradient.axpy(1.0f, mg.params);
        r.query_loss += mg.query_loss;
        r.query_accuracy += mg.query_accuracy;
        if (mg.transforms && transform_optimizer) {
            const ParamSet<float> j = join_transforms(*mg.transforms);
            if (!transform_sum) transform_sum = j.zeros_like();
            transform_sum->axpy(1.0f, j);
        }
    }
    const float inv = 1.0f / static_cast<float>(batch.size());
    r.meta_gradient.scale(inv);
    r.query_loss /= static_cast<double>(batch.size());
    r.query_accuracy /= static_cast<double>(batch.size());
    optimizer.step(state.params, r.meta_gradient);
    if (transform_sum && state.mc) {
        transform_sum->scale(inv);
        ParamSet<float> joined = join_transforms(*state.mc);
        transform_optimizer->step(joined, *transform_sum);
        split_transforms(joined, *state.mc);
    }
    ++state.step;
    return r;
}

// --- conventional stage ------------------------------------------------------------

ConventionalResult conventional_train(LearnerState& state, const std::vector<LabelledItem>& items, int n_classes,
                                      const std::vector<double>& class_weights, const ConventionalConfig& config) {
    if (items.empty()) fail(ErrorCode::invalid_argument, "no training items");
    if (n_classes < 2) fail(ErrorCode::invalid_argument, "conventional training needs at least two classes");
    if (!class_weights.empty() && class_weights.size() != static_cast<std::size_t>(n_classes))
        fail(ErrorCode::invalid_argument, "one weight per training class expected");
    const CRNN<float> model(state.backbone);
    const int width = state.backbone.head_width;
    Rng rng(config.seed);
    ConventionalResult r;
    auto& w = r.classifier.add("clf.weight", {n_classes, width});
    auto& b = r.classifier.add("clf.bias", {n_classes});
    const double bound = 1.0 / std::sqrt(static_cast<double>(width));
    for (auto& v : w.data) v = static_cast<float>(rng.uniform(-bound, bound));
    for (auto& v : b.data) v = static_cast<float>(rng.uniform(-bound, bound));

    Adam encoder_opt(config.lr), head_opt(config.lr);
    std::vector<std::size_t> order(items.size());
    std::iota(order.begin(), order.end(), 0);
    const auto batch_size = static_cast<std::size_t>(std::max(1, config.batch_size));
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0, acc_sum = 0.0;
        std::size_t seen = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
            const std::size_t end = std::min(order.size(), begin + batch_size);
            std::vector<const Spectrogram*> ptrs;
            std::vector<int> labels;
            for (std::size_t i = begin; i < end; ++i) {
                ptrs.push_back(items[order[i]].spectrogram.get());
                labels.push_back(items[order[i]].label);
            }
            const int n = static_cast<int>(ptrs.size());
            CRNN<float>::Cache cache;
            const Matrix f = model.forward(state.params, pack_batch<float>(ptrs, state.backbone), n, Mode::train,
                                           &state.buffers, &cache);
            Eigen::Map<const Matrix> W(r.classifier[0].data.data(), n_classes, width);
            Matrix logits = f * W.transpose();
            for (int i = 0; i < n; ++i)
                for (int c = 0; c < n_classes; ++c) logits(i, c) += r.classifier[1].data[static_cast<std::size_t>(c)];
            const LossResult l = softmax_cross_entropy(logits, labels, config.class_weighting ? class_weights
                                                                                                : std::vector<double>{});
            if (!std::isfinite(l.loss)) fail(ErrorCode::numerical, "conventional training diverged (non-finite loss)");
            ParamSet<float> head_grads = r.classifier.zeros_like();
            Eigen::Map<Matrix>(head_grads[0].data.data(), n_classes, width).noalias() = l.d_logits.transpose() * f;
            for (int c = 0; c < n_classes; ++c) head_grads[1].data[static_cast<std::size_t>(c)] = l.d_logits.col(c).sum();
            const Matrix d_features = l.d_logits * W;
            const ParamSet<float> enc_grads = model.backward(state.params, cache, d_features);
            encoder_opt.step(state.params, enc_grads);
            head_opt.step(r.classifier, head_grads);
            loss_sum += l.loss * n;
            acc_sum += l.accuracy * n;
            seen += static_cast<std::size_t>(n);
            ++state.step;
        }
        r.epoch_loss.push_back(loss_sum / static_cast<double>(seen));
        r.epoch_accuracy.push_back(acc_sum / static_cast<double>(seen));
        if (config.on_epoch) config.on_epoch(epoch + 1, r.epoch_loss.back(), r.epoch_accuracy.back());
    }
    if (state.algorithm == Algorithm::simpleshot) state.train_mean = feature_mean(state, items);
    return r;
}

std::vector<float> feature_mean(const LearnerState& state, const std::vector<LabelledItem>& items) {
    if (items.empty()) fail(ErrorCode::invalid_argument, "no items to average");
    std::vector<const Spectrogram*> ptrs;
    for (const auto& it : items) ptrs.push_back(it.spectrogram.get());
    const Matrix f = embed_spectrograms(state, ptrs);
    std::vector<float> mean(static_cast<std::size_t>(f.cols()));
    for (Eigen::Index c = 0; c < f.cols(); ++c) {
        double s = 0.0;
        for (Eigen::Index i = 0; i < f.rows(); ++i) s += f(i, c);
        mean[static_cast<std::size_t>(c)] = static_cast<float>(s / static_cast<double>(f.rows()));
    }
    return mean;
}

// --- Meta-Baseline --------------------------------------------------------------------

EpisodeOutcome metabaseline_episode(const LearnerState& state, const Episode& episode, ParamSet<float>* grads,
                                    double* d_scale, BnBuffers<float>* buffers) {
    if (!state.logit_scale) fail(ErrorCode::invalid_argument, "meta-baseline state has no logit scale");
    const CRNN<float> model(state.backbone);
    const auto items = concat_items(episode);
    const auto ns = static_cast<Eigen::Index>(episode.support().size());
    CRNN<float>::Cache cache;
    const Matrix f = model.forward(state.params, pack_items(items, state.backbone), static_cast<int>(items.size()),
                                   Mode::train, buffers, &cache);
    const MetricResult r = metabaseline_loss(f.topRows(ns), labels_of(episode.support()), f.bottomRows(f.rows() - ns),
                                             labels_of(episode.query()), episode.spec().n_way, *state.logit_scale);
    if (!std::isfinite(r.loss)) fail(ErrorCode::numerical, "non-finite meta-baseline loss");
    if (grads) *grads = model.backward(state.params, cache, stack_rows(r.d_support, r.d_query));
    if (d_scale) *d_scale = r.d_scale;
    return EpisodeOutcome{r.loss, r.accuracy};
}

// --- inference ----------------------------------------------------------------------

std::vector<int> predict_episode(const LearnerState& state, const Episode& episode, FeatureCache* cache, Rng& rng) {
    const int n_way = episode.spec().n_way;
    const auto support_labels = labels_of(episode.support());
    auto features = [&](const std::vector<EpisodeItem>& items) {
        if (cache) return cache->embed(state, episode, items);
        std::vector<const Spectrogram*> ptrs;
        for (const auto& it : items) ptrs.push_back(it.spectrogram.get());
        return embed_spectrograms(state, ptrs);
    };
    switch (state.algorithm) {
        case Algorithm::random: {
            std::vector<int> out;
            for (std::size_t i = 0; i < episode.query().size(); ++i)
                out.push_back(static_cast<int>(rng.uniform_index(static_cast<std::size_t>(n_way))));
            return out;
        }
        case Algorithm::protonet:
            return nearest_centroid(features(episode.support()), support_labels, features(episode.query()), n_way);
        case Algorithm::simpleshot:
            return cl2n_nearest_centroid(features(episode.support()), support_labels, features(episode.query()), n_way,
                                         state.train_mean);
        case Algorithm::meta_baseline: {
            const auto query_labels = labels_of(episode.query());
            return metabaseline_loss(features(episode.support()), support_labels, features(episode.query()),
                                     query_labels, n_way, state.logit_scale.value_or(10.0f))
                .predictions;
        }
        case Algorithm::fo_maml:
        case Algorithm::fo_meta_curvature: {
            const CRNN<float> model(state.backbone);
            const MCTransforms* mc = state.mc ? &*state.mc : nullptr;
            const Adaptation a = fomaml_adapt(model, state.params, episode, state.inner, mc);
            const Matrix logits = model.forward(a.params, pack_items(episode.query(), state.backbone),
                                                static_cast<int>(episode.query().size()), Mode::train, nullptr, nullptr);
            std::vector<int> out;
            for (Eigen::Index i = 0; i < logits.rows(); ++i) {
                Eigen::Index best = 0;
                logits.row(i).maxCoeff(&best);
                out.push_back(static_cast<int>(best));
            }
            return out;
        }
    }
    fail(ErrorCode::invalid_argument, "unknown algorithm");
}

double accuracy_of(const std::vector<int>& predictions, const std::vector<EpisodeItem>& query) {
    if (predictions.size() != query.size()) fail(ErrorCode::invalid_argument, "prediction count mismatch");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < query.size(); ++i) hit += predictions[i] == query[i].class_index;
    return query.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(query.size());
}

}  // namespace fsa
