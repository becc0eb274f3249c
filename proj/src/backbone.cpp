#include "fsa/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "fsa/random.hpp"

namespace fsa {

using nlohmann::json;

void CRNNConfig::validate() const {
    if (in_channels < 1) fail(ErrorCode::invalid_argument, "in_channels must be >= 1");
    if (conv_channels.empty()) fail(ErrorCode::invalid_argument, "need at least one conv block");
    for (int c : conv_channels)
        if (c < 1) fail(ErrorCode::invalid_argument, "conv channel counts must be >= 1");
    if (rnn_hidden < 1) fail(ErrorCode::invalid_argument, "rnn_hidden must be >= 1");
    if (rnn_layers != 1) fail(ErrorCode::invalid_argument, "only a single recurrent layer is supported");
    if (bidirectional) fail(ErrorCode::invalid_argument, "bidirectional recurrence is not supported");
    if (head_width < 1) fail(ErrorCode::invalid_argument, "head width must be >= 1");
    int h = input_mels, w = input_frames;
    for (std::size_t b = 0; b < conv_channels.size(); ++b) {
        h /= 2;
        w /= 2;
        if (h < 1 || w < 1)
            fail(ErrorCode::invalid_argument, "input " + std::to_string(input_mels) + "x" + std::to_string(input_frames) +
                                                  " is too small for " + std::to_string(conv_channels.size()) +
                                                  " pooling stages");
    }
}

std::pair<int, int> CRNNConfig::conv_output_dims() const {
    int h = input_mels, w = input_frames;
    for (std::size_t b = 0; b < conv_channels.size(); ++b) {
        h /= 2;
        w /= 2;
    }
    return {h, w};
}

int CRNNConfig::rnn_input_size() const { return conv_channels.back() * conv_output_dims().first; }

void to_json(json& j, const CRNNConfig& c) {
    j = json{{"in_channels", c.in_channels},
             {"conv_channels", c.conv_channels},
             {"rnn_hidden", c.rnn_hidden},
             {"rnn_layers", c.rnn_layers},
             {"bidirectional", c.bidirectional},
             {"head", c.head == HeadKind::n_way ? "n_way" : "embedding"},
             {"head_width", c.head_width},
             {"readout", c.readout == Readout::last ? "last" : "mean"},
             {"input_mels", c.input_mels},
             {"input_frames", c.input_frames},
             {"bn_momentum", c.bn_momentum},
             {"bn_eps", c.bn_eps}};
}

void from_json(const json& j, CRNNConfig& c) {
    j.at("in_channels").get_to(c.in_channels);
    j.at("conv_channels").get_to(c.conv_channels);
    j.at("rnn_hidden").get_to(c.rnn_hidden);
    j.at("rnn_layers").get_to(c.rnn_layers);
    j.at("bidirectional").get_to(c.bidirectional);
    c.head = j.at("head").get<std::string>() == "n_way" ? HeadKind::n_way : HeadKind::embedding;
    j.at("head_width").get_to(c.head_width);
    c.readout = j.at("readout").get<std::string>() == "mean" ? Readout::mean : Readout::last;
    j.at("input_mels").get_to(c.input_mels);
    j.at("input_frames").get_to(c.input_frames);
    j.at("bn_momentum").get_to(c.bn_momentum);
    j.at("bn_eps").get_to(c.bn_eps);
}


template <typename T>
CRNN<T>::CRNN(CRNNConfig config) : config_(std::move(config)) {
    config_.validate();
}
template <typename T>
CRNN<T>::~CRNN() = default;
template <typename T>
CRNN<T>::CRNN(const CRNN&) = default;
template <typename T>
CRNN<T>& CRNN<T>::operator=(const CRNN&) = default;

template <typename T>
std::unique_ptr<typename CRNN<T>::Cache> CRNN<T>::make_cache() const {
    return std::make_unique<Cache>();
}

template <typename T>
ParamSet<T> CRNN<T>::init_params(std::uint64_t seed) const {
    Rng rng(seed);
    ParamSet<T> p;
    auto uniform_fill = [&](Param<T>& param, double bound) {
        for (auto& v : param.data) v = static_cast<T>(rng.uniform(-bound, bound));
    };
    int cin = config_.in_channels;
    for (std::size_t b = 0; b < config_.conv_channels.size(); ++b) {
        const int cout = config_.conv_channels[b];
        const double bound = 1.0 / std::sqrt(static_cast<double>(cin * 9));
        uniform_fill(p.add("conv" + std::to_string(b) + ".weight", {cout, cin, 3, 3}), bound);
        uniform_fill(p.add("conv" + std::to_string(b) + ".bias", {cout}), bound);
        p.add("bn" + std::to_string(b) + ".weight", {cout}, T(1));
        p.add("bn" + std::to_string(b) + ".bias", {cout}, T(0));
        cin = cout;
    }
    const int hidden = config_.rnn_hidden, in = config_.rnn_input_size();
    const double gru_bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    uniform_fill(p.add("gru.weight_ih", {3 * hidden, in}), gru_bound);
    uniform_fill(p.add("gru.weight_hh", {3 * hidden, hidden}), gru_bound);
    uniform_fill(p.add("gru.bias_ih", {3 * hidden}), gru_bound);
    uniform_fill(p.add("gru.bias_hh", {3 * hidden}), gru_bound);
    const double head_bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    uniform_fill(p.add("head.weight", {config_.head_width, hidden}), head_bound);
    uniform_fill(p.add("head.bias", {config_.head_width}), head_bound);
    return p;
}

template <typename T>
BnBuffers<T> CRNN<T>::init_buffers() const {
    BnBuffers<T> b;
    for (int c : config_.conv_channels) {
        b.running_mean.emplace_back(static_cast<std::size_t>(c), T(0));
        b.running_var.emplace_back(static_cast<std::size_t>(c), T(1));
    }
    return b;
}

template <typename T>
std::size_t CRNN<T>::parameter_count() const {
    return init_params(0).total_size();
}

namespace {

template <typename T, typename Mat>
void im2col(const T* in, int cin, int h, int w, Mat& col) {
    col.resize(cin * 9, h * w);
    for (int c = 0; c < cin; ++c)
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                T* row = col.data() + static_cast<std::ptrdiff_t>((c * 3 + ky) * 3 + kx) * h * w;
                const int x0 = std::max(0, 1 - kx), x1 = std::min(w, w + 1 - kx);
                for (int y = 0; y < h; ++y) {
                    const int iy = y + ky - 1;
                    T* dst = row + static_cast<std::ptrdiff_t>(y) * w;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst, dst + w, T(0));
                        continue;
                    }
                    const T* src = in + static_cast<std::ptrdiff_t>(c * h + iy) * w + (kx - 1);
                    std::fill(dst, dst + x0, T(0));
                    std::copy(src + x0, src + x1, dst + x0);
                    std::fill(dst + x1, dst + w, T(0));
                }
            }
}

template <typename T, typename Mat>
void col2im(const Mat& col, int cin, int h, int w, T* out) {
    for (int c = 0; c < cin; ++c)
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                const T* row = col.data() + static_cast<std::ptrdiff_t>((c * 3 + ky) * 3 + kx) * h * w;
                const int x0 = std::max(0, 1 - kx), x1 = std::min(w, w + 1 - kx);
                for (int y = 0; y < h; ++y) {
                    const int iy = y + ky - 1;
                    if (iy < 0 || iy >= h) continue;
                    const T* src = row + static_cast<std::ptrdiff_t>(y) * w;
                    T* dst = out + static_cast<std::ptrdiff_t>(c * h + iy) * w + (kx - 1);
                    for (int x = x0; x < x1; ++x) dst[x] += src[x];
                }
            }
}

// Plain sequential sums: Eigen's vectorized reductions peel by address,
// which would make results depend on where buffers happen to be allocated.
template <typename Mat>
typename Mat::Scalar column_sum(const Mat& m, int col) {
    typename Mat::Scalar acc = 0;
    for (Eigen::Index i = 0; i < m.rows(); ++i) acc += m(i, col);
    return acc;
}

template <typename T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

}  // namespace

template <typename T>
typename CRNN<T>::Mat CRNN<T>::forward(const ParamSet<T>& params, const std::vector<T>& input, int batch, Mode mode,
                                       BnBuffers<T>* buffers, Cache* cache_out) const {
    if (batch < 1) fail(ErrorCode::invalid_argument, "empty batch");
    if (input.size() != static_cast<std::size_t>(batch) * input_size())
        fail(ErrorCode::invalid_argument, "input batch does not match the model's input shape");
    if (mode == Mode::infer && !buffers) fail(ErrorCode::invalid_argument, "inference needs batch-norm buffers");

    Cache local;
    Cache& cache = cache_out ? *cache_out : local;
    cache = Cache{};
    cache.batch = batch;
    cache.mode = mode;

    using CMap = Eigen::Map<const Mat>;
    std::vector<T> cur = input;
    int cin = config_.in_channels, h = config_.input_mels, w = config_.input_frames;
    const T eps = static_cast<T>(config_.bn_eps);
    const T momentum = static_cast<T>(config_.bn_momentum);

    for (std::size_t b = 0; b < config_.conv_channels.size(); ++b) {
        const int cout = config_.conv_channels[b];
        const int hw = h * w;
        typename Cache::Block blk;
        blk.cin = cin;
        blk.cout = cout;
        blk.h = h;
        blk.w = w;
        const std::string sb = std::to_string(b);
        const auto& wconv = params.at("conv" + sb + ".weight").data;
        const auto& bconv = params.at("conv" + sb + ".bias").data;
        const auto& gamma = params.at("bn" + sb + ".weight").data;
        const auto& beta = params.at("bn" + sb + ".bias").data;
        CMap W(wconv.data(), cout, cin * 9);

        std::vector<T> conv(static_cast<std::size_t>(batch) * cout * hw);
        blk.cols.resize(static_cast<std::size_t>(batch));
        for (int s = 0; s < batch; ++s) {
            Mat& col = blk.cols[static_cast<std::size_t>(s)];
            im2col(cur.data() + static_cast<std::ptrdiff_t>(s) * cin * hw, cin, h, w, col);
            Eigen::Map<Mat> out(conv.data() + static_cast<std::ptrdiff_t>(s) * cout * hw, cout, hw);
            out.noalias() = W * col;
            for (int c = 0; c < cout; ++c) out.row(c).array() += bconv[static_cast<std::size_t>(c)];
        }

        // batch norm
        blk.xhat.resize(conv.size());
        blk.inv_std.resize(static_cast<std::size_t>(cout));
        const double count = static_cast<double>(batch) * hw;
        for (int c = 0; c < cout; ++c) {
            T mean, var;
            if (mode == Mode::train) {
                double sum = 0.0, sumsq = 0.0;
                for (int s = 0; s < batch; ++s) {
                    const T* p = conv.data() + (static_cast<std::ptrdiff_t>(s) * cout + c) * hw;
                    for (int i = 0; i < hw; ++i) sum += p[i];
                }
                const double m = sum / count;
                for (int s = 0; s < batch; ++s) {
                    const T* p = conv.data() + (static_cast<std::ptrdiff_t>(s) * cout + c) * hw;
                    for (int i = 0; i < hw; ++i) sumsq += (p[i] - m) * (p[i] - m);
                }
                mean = static_cast<T>(m);
                var = static_cast<T>(sumsq / count);
                if (buffers) {
                    auto& rm = buffers->running_mean[b][static_cast<std::size_t>(c)];
                    auto& rv = buffers->running_var[b][static_cast<std::size_t>(c)];
                    const T unbiased = count > 1 ? static_cast<T>(sumsq / (count - 1)) : var;
                    rm = (T(1) - momentum) * rm + momentum * mean;
                    rv = (T(1) - momentum) * rv + momentum * unbiased;
                }
            } else {
                mean = buffers->running_mean[b][static_cast<std::size_t>(c)];
                var = buffers->running_var[b][static_cast<std::size_t>(c)];
            }
            const T inv = T(1) / std::sqrt(var + eps);
            blk.inv_std[static_cast<std::size_t>(c)] = inv;
            const T g = gamma[static_cast<std::size_t>(c)], be = beta[static_cast<std::size_t>(c)];
            for (int s = 0; s < batch; ++s) {
                const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(s) * cout + c) * hw;
                for (int i = 0; i < hw; ++i) {
                    const T xh = (conv[off + i] - mean) * inv;
                    blk.xhat[off + i] = xh;
                    conv[off + i] = std::max(T(0), g * xh + be);  // ReLU
                }
            }
        }

        // 2x2 max pool (floor)
        const int ho = h / 2, wo = w / 2;
        blk.ho = ho;
        blk.wo = wo;
        std::vector<T> pooled(static_cast<std::size_t>(batch) * cout * ho * wo);
        blk.argmax.resize(pooled.size());
        for (int sc = 0; sc < batch * cout; ++sc) {
            const T* src = conv.data() + static_cast<std::ptrdiff_t>(sc) * hw;
            for (int y = 0; y < ho; ++y)
                for (int x = 0; x < wo; ++x) {
                    int best = (2 * y) * w + 2 * x;
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const int idx = (2 * y + dy) * w + 2 * x + dx;
                            if (src[idx] > src[best]) best = idx;
                        }
                    const std::size_t o = static_cast<std::size_t>((sc * ho + y) * wo + x);
                    pooled[o] = src[best];
                    blk.argmax[o] = sc * hw + best;
                }
        }
        blk.act = std::move(conv);
        cache.blocks.push_back(std::move(blk));
        cur = std::move(pooled);
        cin = cout;
        h = ho;
        w = wo;
    }

    // GRU over time (the frame axis); per-step input is channel-major [c][mel].
    const int steps = w, in_size = cin * h, hidden = config_.rnn_hidden;
    CMap Wih(params.at("gru.weight_ih").data.data(), 3 * hidden, in_size);
    CMap Whh(params.at("gru.weight_hh").data.data(), 3 * hidden, hidden);
    const auto& bih = params.at("gru.bias_ih").data;
    const auto& bhh = params.at("gru.bias_hh").data;
    Mat hcur = Mat::Zero(batch, hidden);
    Mat hsum = Mat::Zero(batch, hidden);
    for (int t = 0; t < steps; ++t) {
        Mat x(batch, in_size);
        for (int s = 0; s < batch; ++s)
            for (int c = 0; c < cin; ++c)
                for (int f = 0; f < h; ++f)
                    x(s, c * h + f) = cur[static_cast<std::size_t>(((s * cin + c) * h + f) * w + t)];
        Mat gi = x * Wih.transpose();
        Mat gh = hcur * Whh.transpose();
        Mat r(batch, hidden), z(batch, hidden), n(batch, hidden), hn(batch, hidden), hnext(batch, hidden);
        for (int s = 0; s < batch; ++s)
            for (int j = 0; j < hidden; ++j) {
                const auto uj = static_cast<std::size_t>(j);
                const T rv = sigmoid(gi(s, j) + bih[uj] + gh(s, j) + bhh[uj]);
                const T zv = sigmoid(gi(s, hidden + j) + bih[hidden + uj] + gh(s, hidden + j) + bhh[hidden + uj]);
                const T hnv = gh(s, 2 * hidden + j) + bhh[2 * hidden + uj];
                const T nv = std::tanh(gi(s, 2 * hidden + j) + bih[2 * hidden + uj] + rv * hnv);
                r(s, j) = rv;
                z(s, j) = zv;
                hn(s, j) = hnv;
                n(s, j) = nv;
                hnext(s, j) = (T(1) - zv) * nv + zv * hcur(s, j);
            }
        cache.x.push_back(std::move(x));
        cache.h_prev.push_back(hcur);
        cache.r.push_back(std::move(r));
        cache.z.push_back(std::move(z));
        cache.n.push_back(std::move(n));
        cache.hn.push_back(std::move(hn));
        hcur = std::move(hnext);
        hsum += hcur;
    }
    cache.h_read = config_.readout == Readout::last ? hcur : Mat(hsum / static_cast<T>(steps));

    CMap Wout(params.at("head.weight").data.data(), config_.head_width, hidden);
    const auto& bout = params.at("head.bias").data;
    Mat out = cache.h_read * Wout.transpose();
    for (int s = 0; s < batch; ++s)
        for (int o = 0; o < config_.head_width; ++o) out(s, o) += bout[static_cast<std::size_t>(o)];
    return out;
}

template <typename T>
ParamSet<T> CRNN<T>::backward(const ParamSet<T>& params, const Cache& cache, const Mat& d_out) const {
    using CMap = Eigen::Map<const Mat>;
    using MMap = Eigen::Map<Mat>;
    const int batch = cache.batch;
    if (d_out.rows() != batch || d_out.cols() != config_.head_width)
        fail(ErrorCode::invalid_argument, "output gradient has the wrong shape");
    ParamSet<T> grads = params.zeros_like();
    const int hidden = config_.rnn_hidden;

    // head
    CMap Wout(params.at("head.weight").data.data(), config_.head_width, hidden);
    MMap(grads.at("head.weight").data.data(), config_.head_width, hidden).noalias() = d_out.transpose() * cache.h_read;
    {
        auto& db = grads.at("head.bias").data;
        for (int o = 0; o < config_.head_width; ++o) db[static_cast<std::size_t>(o)] = column_sum(d_out, o);
    }
    Mat d_read = d_out * Wout;

    // GRU, backwards through time
    const auto& last_blk = cache.blocks.back();
    const int cin = last_blk.cout, h = last_blk.ho, w = last_blk.wo;
    const int steps = w, in_size = cin * h;
    CMap Wih(params.at("gru.weight_ih").data.data(), 3 * hidden, in_size);
    CMap Whh(params.at("gru.weight_hh").data.data(), 3 * hidden, hidden);
    MMap dWih(grads.at("gru.weight_ih").data.data(), 3 * hidden, in_size);
    MMap dWhh(grads.at("gru.weight_hh").data.data(), 3 * hidden, hidden);
    auto& dbih = grads.at("gru.bias_ih").data;
    auto& dbhh = grads.at("gru.bias_hh").data;

    std::vector<T> d_seq(static_cast<std::size_t>(batch) * cin * h * w, T(0));
    Mat dh = Mat::Zero(batch, hidden);
    if (config_.readout == Readout::last) dh = d_read;
    const Mat d_each = config_.readout == Readout::mean ? Mat(d_read / static_cast<T>(steps)) : Mat();
    for (int t = steps - 1; t >= 0; --t) {
        const auto ut = static_cast<std::size_t>(t);
        if (config_.readout == Readout::mean) dh += d_each;
        const Mat& r = cache.r[ut];
        const Mat& z = cache.z[ut];
        const Mat& n = cache.n[ut];
        const Mat& hn = cache.hn[ut];
        const Mat& hp = cache.h_prev[ut];
        Mat dgi(batch, 3 * hidden), dgh(batch, 3 * hidden);
        Mat dh_prev(batch, hidden);
        for (int s = 0; s < batch; ++s)
            for (int j = 0; j < hidden; ++j) {
                const T g = dh(s, j);
                const T dn = g * (T(1) - z(s, j));
                const T dz = g * (hp(s, j) - n(s, j));
                dh_prev(s, j) = g * z(s, j);
                const T dn_pre = dn * (T(1) - n(s, j) * n(s, j));
                const T dr = dn_pre * hn(s, j);
                const T dr_pre = dr * r(s, j) * (T(1) - r(s, j));
                const T dz_pre = dz * z(s, j) * (T(1) - z(s, j));
                dgi(s, j) = dr_pre;
                dgi(s, hidden + j) = dz_pre;
                dgi(s, 2 * hidden + j) = dn_pre;
                dgh(s, j) = dr_pre;
                dgh(s, hidden + j) = dz_pre;
                dgh(s, 2 * hidden + j) = dn_pre * r(s, j);
            }
        dWih.noalias() += dgi.transpose() * cache.x[ut];
        dWhh.noalias() += dgh.transpose() * hp;
        for (int j = 0; j < 3 * hidden; ++j) {
            dbih[static_cast<std::size_t>(j)] += column_sum(dgi, j);
            dbhh[static_cast<std::size_t>(j)] += column_sum(dgh, j);
        }
        const Mat dx = dgi * Wih;
        for (int s = 0; s < batch; ++s)
            for (int c = 0; c < cin; ++c)
                for (int f = 0; f < h; ++f)
                    d_seq[static_cast<std::size_t>(((s * cin + c) * h + f) * w + t)] = dx(s, c * h + f);
        dh_prev.noalias() += dgh * Whh;
        dh = std::move(dh_prev);
    }

    // conv blocks in reverse
    std::vector<T> d_cur = std::move(d_seq);
    for (std::size_t bi = cache.blocks.size(); bi-- > 0;) {
        const auto& blk = cache.blocks[bi];
        const int cout = blk.cout, hw = blk.h * blk.w;
        const std::string sb = std::to_string(bi);
        // pool + ReLU
        std::vector<T> d_act(blk.act.size(), T(0));
        for (std::size_t o = 0; o < blk.argmax.size(); ++o) {
            const auto src = static_cast<std::size_t>(blk.argmax[o]);
            if (blk.act[src] > T(0)) d_act[src] += d_cur[o];
        }
        // batch norm
        const auto& gamma = params.at("bn" + sb + ".weight").data;
        auto& dgamma = grads.at("bn" + sb + ".weight").data;
        auto& dbeta = grads.at("bn" + sb + ".bias").data;
        std::vector<T> d_conv(d_act.size());
        const T count = static_cast<T>(batch * hw);
        for (int c = 0; c < cout; ++c) {
            const auto uc = static_cast<std::size_t>(c);
            T sum_dy = 0, sum_dy_xhat = 0;
            for (int s = 0; s < batch; ++s) {
                const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(s) * cout + c) * hw;
                for (int i = 0; i < hw; ++i) {
                    sum_dy += d_act[off + i];
                    sum_dy_xhat += d_act[off + i] * blk.xhat[off + i];
                }
            }
            dgamma[uc] = sum_dy_xhat;
            dbeta[uc] = sum_dy;
            const T g = gamma[uc], inv = blk.inv_std[uc];
            for (int s = 0; s < batch; ++s) {
                const std::ptrdiff_t off = (static_cast<std::ptrdiff_t>(s) * cout + c) * hw;
                if (cache.mode == Mode::infer) {
                    for (int i = 0; i < hw; ++i) d_conv[off + i] = g * inv * d_act[off + i];
                    continue;
                }
                for (int i = 0; i < hw; ++i)
                    d_conv[off + i] =
                        g * inv / count * (count * d_act[off + i] - sum_dy - blk.xhat[off + i] * sum_dy_xhat);
            }
        }
        // convolution
        CMap W(params.at("conv" + sb + ".weight").data.data(), cout, blk.cin * 9);
        MMap dW(grads.at("conv" + sb + ".weight").data.data(), cout, blk.cin * 9);
        auto& dbias = grads.at("conv" + sb + ".bias").data;
        const bool need_input_grad = bi > 0;
        std::vector<T> d_in(need_input_grad ? static_cast<std::size_t>(batch) * blk.cin * hw : 0, T(0));
        for (int s = 0; s < batch; ++s) {
            CMap dout(d_conv.data() + static_cast<std::ptrdiff_t>(s) * cout * hw, cout, hw);
            dW.noalias() += dout * blk.cols[static_cast<std::size_t>(s)].transpose();
            for (int c = 0; c < cout; ++c) {
                const T* row = d_conv.data() + (static_cast<std::ptrdiff_t>(s) * cout + c) * hw;
                T acc = 0;
                for (int i = 0; i < hw; ++i) acc += row[i];
                dbias[static_cast<std::size_t>(c)] += acc;
            }
            if (need_input_grad) {
                const Mat dcol = W.transpose() * dout;
                col2im(dcol, blk.cin, blk.h, blk.w, d_in.data() + static_cast<std::ptrdiff_t>(s) * blk.cin * hw);
            }
        }
        d_cur = std::move(d_in);
    }
    return grads;
}

template <typename T>
std::vector<T> pack_batch(const std::vector<const Spectrogram*>& items, const CRNNConfig& config) {
    const std::size_t per = static_cast<std::size_t>(config.input_mels) * static_cast<std::size_t>(config.input_frames);
    std::vector<T> out;
    out.reserve(items.size() * per);
    for (const Spectrogram* s : items) {
        if (s->n_mels != static_cast<std::size_t>(config.input_mels) ||
            s->n_frames != static_cast<std::size_t>(config.input_frames))
            fail(ErrorCode::invalid_argument, "spectrogram shape " + std::to_string(s->n_mels) + "x" +
                                                  std::to_string(s->n_frames) + " does not match the model input " +
                                                  std::to_string(config.input_mels) + "x" +
                                                  std::to_string(config.input_frames));
        for (float v : s->values) out.push_back(static_cast<T>(v));
    }
    return out;
}

template class CRNN<float>;
template class CRNN<double>;
template std::vector<float> pack_batch<float>(const std::vector<const Spectrogram*>&, const CRNNConfig&);
template std::vector<double> pack_batch<double>(const std::vector<const Spectrogram*>&, const CRNNConfig&);

}  // namespace fsa
