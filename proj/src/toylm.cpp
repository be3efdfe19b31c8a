#include "utf/toylm.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "utf/digest.hpp"
#include "utf/errors.hpp"
#include "utf/rng.hpp"

namespace utf {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<Mat>;
using CMapMat = Eigen::Map<const Mat>;
using Vec = Eigen::VectorXd;

constexpr double kRmsEps = 1e-5;

using Clock = std::chrono::steady_clock;

double elapsed_seconds(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::int64_t compute_offsets(ToyLM& model) {
    const auto& c = model.config;
    const std::int64_t v = c.vocab_size, h = c.hidden_dim, ctx = c.context_len;
    std::int64_t cursor = 0;
    model.off_wte = cursor;
    cursor += v * h;
    model.off_wpe = cursor;
    cursor += ctx * h;
    model.off_layers.clear();
    for (int l = 0; l < c.layers; ++l) {
        ToyLM::LayerOffsets off{};
        off.wq = cursor; cursor += h * h;
        off.wk = cursor; cursor += h * h;
        off.wv = cursor; cursor += h * h;
        off.wo = cursor; cursor += h * h;
        off.w1 = cursor; cursor += 4 * h * h;
        off.w2 = cursor; cursor += 4 * h * h;
        model.off_layers.push_back(off);
    }
    if (c.tied_unembedding) {
        model.off_unembed = model.off_wte;
    } else {
        model.off_unembed = cursor;
        cursor += v * h;
    }
    return cursor;
}

CMapMat view(const std::vector<double>& buf, std::int64_t off, std::int64_t rows,
             std::int64_t cols) {
    return CMapMat(buf.data() + off, rows, cols);
}

MapMat view(std::vector<double>& buf, std::int64_t off, std::int64_t rows, std::int64_t cols) {
    return MapMat(buf.data() + off, rows, cols);
}

void check_tokens(const ToyLMConfig& cfg, const TokenSeq& tokens) {
    for (TokenId t : tokens)
        if (t < 0 || t >= cfg.vocab_size)
            throw TokenOutOfRange("token " + std::to_string(t) + " outside vocab " +
                                  std::to_string(cfg.vocab_size));
}

// y = x / rms(x) per row; s holds the per-row inverse rms for the backward pass.
void rmsnorm(const Mat& x, Mat& y, Vec& s) {
    const auto t_len = x.rows();
    const auto h = x.cols();
    y.resize(t_len, h);
    s.resize(t_len);
    for (Eigen::Index t = 0; t < t_len; ++t) {
        const double ms = x.row(t).squaredNorm() / static_cast<double>(h);
        const double sc = 1.0 / std::sqrt(ms + kRmsEps);
        s(t) = sc;
        y.row(t) = x.row(t) * sc;
    }
}

Mat rmsnorm_backward(const Mat& x, const Vec& s, const Mat& dy) {
    const auto h = static_cast<double>(x.cols());
    Mat dx(x.rows(), x.cols());
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        const double dot = dy.row(t).dot(x.row(t));
        const double sc = s(t);
        dx.row(t) = sc * dy.row(t) - (sc * sc * sc * dot / h) * x.row(t);
    }
    return dx;
}

struct LayerCache {
    Mat x_in, n1, q, k, v, att_out, x_mid, n2, f1, f1r;
    Vec s1, s2;
    std::vector<Mat> att;  // per head, T x T softmax weights
};

struct ForwardCache {
    Mat x0;
    std::vector<LayerCache> layers;
    Mat x_final, nf, logits;
    Vec sf;
};

void forward(const ToyLM& model, const TokenSeq& tokens, ForwardCache& cache,
             bool last_logit_only) {
    const auto& cfg = model.config;
    const auto t_len = static_cast<Eigen::Index>(tokens.size());
    if (t_len == 0) throw InputError("empty token sequence");
    if (t_len > cfg.context_len)
        throw SequenceTooLong("sequence of " + std::to_string(t_len) + " tokens exceeds context " +
                              std::to_string(cfg.context_len));
    check_tokens(cfg, tokens);

    const std::int64_t h = cfg.hidden_dim;
    const int n_heads = cfg.heads;
    const std::int64_t d = h / n_heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(d));

    const auto wte = view(model.params, model.off_wte, cfg.vocab_size, h);
    const auto wpe = view(model.params, model.off_wpe, cfg.context_len, h);

    cache.x0.resize(t_len, h);
    for (Eigen::Index p = 0; p < t_len; ++p)
        cache.x0.row(p) = wte.row(tokens[static_cast<std::size_t>(p)]) + wpe.row(p);

    cache.layers.resize(static_cast<std::size_t>(cfg.layers));
    Mat x = cache.x0;
    for (int l = 0; l < cfg.layers; ++l) {
        auto& lc = cache.layers[static_cast<std::size_t>(l)];
        const auto& off = model.off_layers[static_cast<std::size_t>(l)];
        const auto wq = view(model.params, off.wq, h, h);
        const auto wk = view(model.params, off.wk, h, h);
        const auto wv = view(model.params, off.wv, h, h);
        const auto wo = view(model.params, off.wo, h, h);
        const auto w1 = view(model.params, off.w1, 4 * h, h);
        const auto w2 = view(model.params, off.w2, h, 4 * h);

        lc.x_in = x;
        rmsnorm(lc.x_in, lc.n1, lc.s1);
        lc.q.noalias() = lc.n1 * wq.transpose();
        lc.k.noalias() = lc.n1 * wk.transpose();
        lc.v.noalias() = lc.n1 * wv.transpose();

        lc.att.assign(static_cast<std::size_t>(n_heads), Mat());
        lc.att_out.resize(t_len, h);
        for (int head = 0; head < n_heads; ++head) {
            const auto qh = lc.q.middleCols(head * d, d);
            const auto kh = lc.k.middleCols(head * d, d);
            const auto vh = lc.v.middleCols(head * d, d);
            Mat scores = (qh * kh.transpose()) * att_scale;
            for (Eigen::Index i = 0; i < t_len; ++i)
                for (Eigen::Index j = i + 1; j < t_len; ++j)
                    scores(i, j) = -std::numeric_limits<double>::infinity();
            // row softmax
            for (Eigen::Index i = 0; i < t_len; ++i) {
                const double mx = scores.row(i).head(i + 1).maxCoeff();
                double sum = 0.0;
                for (Eigen::Index j = 0; j <= i; ++j) {
                    scores(i, j) = std::exp(scores(i, j) - mx);
                    sum += scores(i, j);
                }
                for (Eigen::Index j = 0; j <= i; ++j) scores(i, j) /= sum;
                for (Eigen::Index j = i + 1; j < t_len; ++j) scores(i, j) = 0.0;
            }
            lc.att[static_cast<std::size_t>(head)] = std::move(scores);
            lc.att_out.middleCols(head * d, d).noalias() =
                lc.att[static_cast<std::size_t>(head)] * vh;
        }

        lc.x_mid.noalias() = lc.att_out * wo.transpose();
        lc.x_mid += lc.x_in;

        rmsnorm(lc.x_mid, lc.n2, lc.s2);
        lc.f1.noalias() = lc.n2 * w1.transpose();
        lc.f1r = lc.f1.cwiseMax(0.0);
        x.noalias() = lc.f1r * w2.transpose();
        x += lc.x_mid;
    }

    cache.x_final = x;
    rmsnorm(cache.x_final, cache.nf, cache.sf);

    const auto wu = view(model.params, model.off_unembed, cfg.vocab_size, h);
    if (last_logit_only) {
        cache.logits.resize(1, cfg.vocab_size);
        cache.logits.noalias() = cache.nf.row(t_len - 1) * wu.transpose();
    } else {
        cache.logits.noalias() = cache.nf * wu.transpose();
    }
}

// Accumulates raw (unscaled) gradients of the NLL sum into grad. Returns the
// NLL sum and the number of scored positions.
std::pair<double, std::int64_t> backward(const ToyLM& model, const TrainSample& sample,
                                         const ForwardCache& cache, std::vector<double>& grad) {
    const auto& cfg = model.config;
    const auto t_len = static_cast<Eigen::Index>(sample.tokens.size());
    const std::int64_t h = cfg.hidden_dim;
    const int n_heads = cfg.heads;
    const std::int64_t d = h / n_heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(d));

    // softmax cross-entropy at unmasked positions
    Mat dlogits = Mat::Zero(t_len, cfg.vocab_size);
    double nll = 0.0;
    std::int64_t scored = 0;
    for (Eigen::Index p = 0; p < t_len; ++p) {
        if (!sample.loss_mask[static_cast<std::size_t>(p)]) continue;
        const TokenId label = sample.labels[static_cast<std::size_t>(p)];
        if (label < 0 || label >= cfg.vocab_size) throw TokenOutOfRange("label out of vocab");
        const auto row = cache.logits.row(p);
        const double mx = row.maxCoeff();
        double sum = 0.0;
        for (Eigen::Index j = 0; j < cfg.vocab_size; ++j) sum += std::exp(row(j) - mx);
        nll += -(row(label) - mx - std::log(sum));
        ++scored;
        for (Eigen::Index j = 0; j < cfg.vocab_size; ++j)
            dlogits(p, j) = std::exp(row(j) - mx) / sum;
        dlogits(p, label) -= 1.0;
    }
    if (scored == 0) return {0.0, 0};

    const auto wu = view(model.params, model.off_unembed, cfg.vocab_size, h);
    auto gwu = view(grad, model.off_unembed, cfg.vocab_size, h);
    gwu.noalias() += dlogits.transpose() * cache.nf;
    Mat dnf = dlogits * wu;
    Mat dx = rmsnorm_backward(cache.x_final, cache.sf, dnf);

    for (int l = cfg.layers - 1; l >= 0; --l) {
        const auto& lc = cache.layers[static_cast<std::size_t>(l)];
        const auto& off = model.off_layers[static_cast<std::size_t>(l)];
        const auto wq = view(model.params, off.wq, h, h);
        const auto wk = view(model.params, off.wk, h, h);
        const auto wv = view(model.params, off.wv, h, h);
        const auto wo = view(model.params, off.wo, h, h);
        const auto w1 = view(model.params, off.w1, 4 * h, h);
        const auto w2 = view(model.params, off.w2, h, 4 * h);
        auto gwq = view(grad, off.wq, h, h);
        auto gwk = view(grad, off.wk, h, h);
        auto gwv = view(grad, off.wv, h, h);
        auto gwo = view(grad, off.wo, h, h);
        auto gw1 = view(grad, off.w1, 4 * h, h);
        auto gw2 = view(grad, off.w2, h, 4 * h);

        // x_out = x_mid + relu(n2 W1^T) W2^T
        const Mat& dx_out = dx;
        gw2.noalias() += dx_out.transpose() * lc.f1r;
        Mat df1 = dx_out * w2;
        df1 = (lc.f1.array() > 0.0).select(df1, 0.0);
        gw1.noalias() += df1.transpose() * lc.n2;
        Mat dn2 = df1 * w1;
        Mat dx_mid = dx_out + rmsnorm_backward(lc.x_mid, lc.s2, dn2);

        // x_mid = x_in + att_out Wo^T
        gwo.noalias() += dx_mid.transpose() * lc.att_out;
        Mat datt = dx_mid * wo;

        Mat dq = Mat::Zero(t_len, h), dk = Mat::Zero(t_len, h), dv = Mat::Zero(t_len, h);
        for (int head = 0; head < n_heads; ++head) {
            const auto& a = lc.att[static_cast<std::size_t>(head)];
            const auto kh = lc.k.middleCols(head * d, d);
            const auto qh = lc.q.middleCols(head * d, d);
            const auto vh = lc.v.middleCols(head * d, d);
            const auto doh = datt.middleCols(head * d, d);

            Mat da = doh * vh.transpose();
            dv.middleCols(head * d, d).noalias() += a.transpose() * doh;
            Mat ds(t_len, t_len);
            for (Eigen::Index i = 0; i < t_len; ++i) {
                const double rowdot = da.row(i).cwiseProduct(a.row(i)).sum();
                ds.row(i) = (a.row(i).array() * (da.row(i).array() - rowdot)).matrix();
            }
            dq.middleCols(head * d, d).noalias() += (ds * kh) * att_scale;
            dk.middleCols(head * d, d).noalias() += (ds.transpose() * qh) * att_scale;
        }

        gwq.noalias() += dq.transpose() * lc.n1;
        gwk.noalias() += dk.transpose() * lc.n1;
        gwv.noalias() += dv.transpose() * lc.n1;
        Mat dn1 = dq * wq;
        dn1.noalias() += dk * wk;
        dn1.noalias() += dv * wv;
        dx = dx_mid + rmsnorm_backward(lc.x_in, lc.s1, dn1);
    }

    auto gwte = view(grad, model.off_wte, cfg.vocab_size, h);
    auto gwpe = view(grad, model.off_wpe, cfg.context_len, h);
    for (Eigen::Index p = 0; p < t_len; ++p) {
        gwte.row(sample.tokens[static_cast<std::size_t>(p)]) += dx.row(p);
        gwpe.row(p) += dx.row(p);
    }
    return {nll, scored};
}

// Plain momentum-free gradient descent, the one update rule for every
// training path. Parameters move in proportion to their true gradients, so
// fine-tuning on rare tokens stays surgical: weights that the data never
// exercises barely move.
struct Sgd {
    void step(std::vector<double>& params, const std::vector<double>& grad, double lr) {
        for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
    }
};

void log_epoch(std::ostream* log, int epoch, double loss, double seconds) {
    if (!log) return;
    nlohmann::json line = {{"epoch", epoch}, {"loss", loss}, {"seconds", seconds}};
    *log << line.dump() << '\n';
}

// Shared epoch driver for pretrain/finetune.
TrainStats run_lm_training(ToyLM& model, const std::vector<TokenSeq>& corpus, int epochs,
                           double lr, const TrainOptions& opts) {
    if (corpus.empty()) throw EmptyCorpus("training corpus is empty");
    if (epochs < 0 || lr <= 0.0 || opts.batch_size < 1) throw InputError("bad training schedule");

    std::vector<TrainSample> samples;
    samples.reserve(corpus.size());
    for (const auto& seq : corpus) samples.push_back(TrainSample::lm(seq));

    TrainStats stats;
    stats.lr = lr;
    const auto run_start = Clock::now();
    if (epochs == 0) return stats;

    Sgd optimizer;
    std::vector<double> grad;
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < epochs; ++epoch) {
        const auto epoch_start = Clock::now();
        Rng shuffle_rng(derive_seed(opts.shuffle_seed, static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        double nll_sum = 0.0;
        std::int64_t positions = 0;
        for (std::size_t base = 0; base < order.size(); base += static_cast<std::size_t>(opts.batch_size)) {
            const std::size_t end = std::min(order.size(), base + static_cast<std::size_t>(opts.batch_size));
            std::vector<TrainSample> batch;
            batch.reserve(end - base);
            for (std::size_t i = base; i < end; ++i) batch.push_back(samples[order[i]]);
            const LossResult res = forward_loss(model, batch, &grad);
            optimizer.step(model.params, grad, lr);
            nll_sum += res.loss * static_cast<double>(res.positions);
            positions += res.positions;
        }
        const double epoch_loss = nll_sum / static_cast<double>(positions);
        stats.epoch_losses.push_back(epoch_loss);
        log_epoch(opts.log, epoch + 1, epoch_loss, elapsed_seconds(epoch_start));
    }
    stats.epochs = epochs;
    stats.seconds = elapsed_seconds(run_start);
    return stats;
}

}  // namespace

void ToyLMConfig::validate() const {
    if (vocab_size < 2) throw InvalidConfig("vocab_size must be >= 2");
    if (hidden_dim < 1 || layers < 1 || heads < 1) throw InvalidConfig("bad model dimensions");
    if (hidden_dim % heads != 0) throw InvalidConfig("hidden_dim must be divisible by heads");
    if (context_len < 21) throw InvalidConfig("context_len must be >= 21");
    if (reserved_count < 0 || reserved_count >= vocab_size)
        throw InvalidConfig("reserved_count must lie in [0, vocab_size)");
    if (usable_vocab() < 2) throw InvalidConfig("usable vocabulary too small");
}

std::uint64_t ToyLM::param_digest() const {
    Fnv1a64 h;
    h.str("utf-toylm-params-v1");
    h.bytes(params.data(), params.size() * sizeof(double));
    return h.value();
}

std::vector<ToyLM::TensorInfo> ToyLM::tensor_table() const {
    const std::int64_t h = config.hidden_dim;
    std::vector<TensorInfo> table;
    table.push_back({"wte", config.vocab_size, h, off_wte});
    table.push_back({"wpe", config.context_len, h, off_wpe});
    for (std::size_t l = 0; l < off_layers.size(); ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        table.push_back({p + "wq", h, h, off_layers[l].wq});
        table.push_back({p + "wk", h, h, off_layers[l].wk});
        table.push_back({p + "wv", h, h, off_layers[l].wv});
        table.push_back({p + "wo", h, h, off_layers[l].wo});
        table.push_back({p + "w1", 4 * h, h, off_layers[l].w1});
        table.push_back({p + "w2", h, 4 * h, off_layers[l].w2});
    }
    if (!config.tied_unembedding)
        table.push_back({"unembed", config.vocab_size, h, off_unembed});
    return table;
}

ToyLM init_model(const ToyLMConfig& config, std::uint64_t seed) {
    config.validate();
    ToyLM model;
    model.config = config;
    model.rng_seed = seed;
    const std::int64_t total = compute_offsets(model);
    model.params.assign(static_cast<std::size_t>(total), 0.0);

    const TokenId first_reserved = static_cast<TokenId>(config.vocab_size - config.reserved_count);
    Rng rng(seed);
    for (const auto& tensor : model.tensor_table()) {
        const bool embedding_like =
            tensor.name == "wte" || tensor.name == "wpe" || tensor.name == "unembed";
        const double sigma =
            embedding_like ? 0.02 : 1.0 / std::sqrt(static_cast<double>(tensor.cols));
        const std::int64_t count = tensor.rows * tensor.cols;
        for (std::int64_t i = 0; i < count; ++i) {
            double s = sigma;
            if (tensor.name == "wte" && i / config.hidden_dim >= first_reserved) s = 0.25;
            model.params[static_cast<std::size_t>(tensor.offset + i)] = rng.gaussian(0.0, s);
        }
    }
    return model;
}

TrainSample TrainSample::lm(const TokenSeq& tokens) {
    TrainSample s;
    s.tokens = tokens;
    s.labels.assign(tokens.size(), 0);
    s.loss_mask.assign(tokens.size(), 0);
    for (std::size_t p = 0; p + 1 < tokens.size(); ++p) {
        s.labels[p] = tokens[p + 1];
        s.loss_mask[p] = 1;
    }
    return s;
}

TrainSample TrainSample::sft(const TokenSeq& trigger, const TokenSeq& target) {
    if (trigger.empty() || target.empty()) throw InputError("trigger/target must be non-empty");
    TrainSample s;
    s.tokens = trigger;
    s.tokens.insert(s.tokens.end(), target.begin(), target.end());
    s.labels.assign(s.tokens.size(), 0);
    s.loss_mask.assign(s.tokens.size(), 0);
    for (std::size_t p = 0; p + 1 < s.tokens.size(); ++p) s.labels[p] = s.tokens[p + 1];
    // only the positions that predict target tokens are scored
    for (std::size_t i = 0; i < target.size(); ++i)
        s.loss_mask[trigger.size() - 1 + i] = 1;
    return s;
}

LossResult forward_loss(const ToyLM& model, std::span<const TrainSample> batch,
                        std::vector<double>* grad) {
    if (batch.empty()) throw InputError("empty batch");
    for (const auto& sample : batch)
        if (sample.labels.size() != sample.tokens.size() ||
            sample.loss_mask.size() != sample.tokens.size())
            throw InputError("labels/mask length != tokens length");

    if (grad) grad->assign(model.params.size(), 0.0);

    // When no gradient is wanted we still run backward's CE bookkeeping only.
    double nll_sum = 0.0;
    std::int64_t positions = 0;
    ForwardCache cache;
    std::vector<double> scratch;
    for (const auto& sample : batch) {
        forward(model, sample.tokens, cache, false);
        if (grad) {
            const auto [nll, scored] = backward(model, sample, cache, *grad);
            nll_sum += nll;
            positions += scored;
        } else {
            for (std::size_t p = 0; p < sample.tokens.size(); ++p) {
                if (!sample.loss_mask[p]) continue;
                const TokenId label = sample.labels[p];
                if (label < 0 || label >= model.config.vocab_size)
                    throw TokenOutOfRange("label out of vocab");
                const auto row = cache.logits.row(static_cast<Eigen::Index>(p));
                const double mx = row.maxCoeff();
                double sum = 0.0;
                for (Eigen::Index j = 0; j < model.config.vocab_size; ++j)
                    sum += std::exp(row(j) - mx);
                nll_sum += -(row(label) - mx - std::log(sum));
                ++positions;
            }
        }
    }
    if (positions == 0) throw InputError("batch has no scoreable positions");
    if (grad)
        for (double& g : *grad) g /= static_cast<double>(positions);
    return {nll_sum / static_cast<double>(positions), positions};
}

TrainStats pretrain(ToyLM& model, const std::vector<TokenSeq>& corpus, int epochs, double lr,
                    const TrainOptions& opts) {
    const TokenId first_reserved =
        static_cast<TokenId>(model.config.vocab_size - model.config.reserved_count);
    for (const auto& seq : corpus)
        for (TokenId t : seq) {
            if (t < 0 || t >= model.config.vocab_size)
                throw TokenOutOfRange("corpus token outside vocab");
            if (t >= first_reserved)
                throw ReservedTokenInCorpus("token " + std::to_string(t) +
                                            " is in the reserved range");
        }
    return run_lm_training(model, corpus, epochs, lr, opts);
}

TrainStats finetune(ToyLM& model, const std::vector<TokenSeq>& corpus, int epochs, double lr,
                    const TrainOptions& opts) {
    return run_lm_training(model, corpus, epochs, lr, opts);
}

TrainStats sft_embed(ToyLM& model, std::span<const std::pair<TokenSeq, TokenSeq>> rows, int epochs,
                     double lr, const SftOptions& opts) {
    if (rows.empty()) throw InputError("no SFT rows");
    if (epochs < 0 || lr <= 0.0) throw InputError("bad SFT schedule");

    std::vector<TrainSample> samples;
    for (const auto& [trigger, target] : rows) {
        check_tokens(model.config, trigger);
        check_tokens(model.config, target);
        samples.push_back(TrainSample::sft(trigger, target));
        if (static_cast<int>(samples.back().tokens.size()) > model.config.context_len)
            throw SequenceTooLong("fingerprint row exceeds context length");
    }

    TrainStats stats;
    stats.lr = lr;
    if (epochs == 0) return stats;

    const TokenSeq& trigger = rows.front().first;
    const TokenSeq& target = rows.front().second;
    const auto max_new = static_cast<int>(target.size());

    const std::vector<double> snapshot = model.params;
    const auto run_start = Clock::now();

    double effective_lr = lr;
    for (int attempt = 0;; ++attempt) {
        Sgd optimizer;
        std::vector<double> grad;
        stats.epoch_losses.clear();
        for (int epoch = 0; epoch < epochs; ++epoch) {
            const auto epoch_start = Clock::now();
            double nll_sum = 0.0;
            std::int64_t positions = 0;
            for (const auto& sample : samples) {
                const LossResult res =
                    forward_loss(model, std::span<const TrainSample>(&sample, 1), &grad);
                optimizer.step(model.params, grad, effective_lr);
                nll_sum += res.loss * static_cast<double>(res.positions);
                positions += res.positions;
            }
            const double epoch_loss = nll_sum / static_cast<double>(positions);
            stats.epoch_losses.push_back(epoch_loss);
            log_epoch(opts.log, epoch + 1, epoch_loss, elapsed_seconds(epoch_start));
        }

        const bool converged =
            greedy_decode(model, trigger, max_new) == target &&
            min_target_probability(model, trigger, target) >= opts.convergence_min_target_prob;
        if (converged) {
            stats.epochs = epochs;
            stats.lr = effective_lr;
            stats.lr_escalations = attempt;
            stats.seconds = elapsed_seconds(run_start);
            return stats;
        }
        if (!opts.auto_scale_lr || attempt >= opts.max_escalations)
            throw SftDidNotConverge(
                "fingerprint SFT failed to converge (final loss " +
                std::to_string(stats.epoch_losses.back()) + ", target margin " +
                std::to_string(min_target_probability(model, trigger, target)) + ", lr " +
                std::to_string(effective_lr) + ")");
        model.params = snapshot;
        effective_lr *= 10.0;
    }
}

TokenSeq greedy_decode(const ToyLM& model, const TokenSeq& prompt, int max_new) {
    if (prompt.empty()) throw InputError("empty prompt");
    if (max_new < 0) throw InputError("max_new must be >= 0");
    if (static_cast<int>(prompt.size()) + max_new > model.config.context_len)
        throw PromptTooLong("prompt plus " + std::to_string(max_new) +
                            " new tokens exceeds context");
    check_tokens(model.config, prompt);

    TokenSeq ctx = prompt;
    TokenSeq out;
    ForwardCache cache;
    for (int step = 0; step < max_new; ++step) {
        forward(model, ctx, cache, true);
        const auto row = cache.logits.row(0);
        TokenId best = 0;
        double best_val = row(0);
        for (Eigen::Index j = 1; j < model.config.vocab_size; ++j)
            if (row(j) > best_val) {  // strict: ties keep the lowest id
                best_val = row(j);
                best = static_cast<TokenId>(j);
            }
        out.push_back(best);
        ctx.push_back(best);
    }
    return out;
}

std::vector<std::pair<TokenId, double>> sampling_distribution(std::span<const double> logits,
                                                              const SamplingConfig& cfg) {
    if (cfg.top_k < 1) throw InvalidSamplingConfig("top_k must be >= 1");
    if (!(cfg.top_p > 0.0 && cfg.top_p <= 1.0))
        throw InvalidSamplingConfig("top_p must lie in (0,1]");
    if (!(cfg.temperature > 0.0)) throw InvalidSamplingConfig("temperature must be > 0");
    if (logits.empty()) throw InputError("empty logits");

    std::vector<TokenId> ids(logits.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<TokenId>(i);
    std::sort(ids.begin(), ids.end(), [&](TokenId a, TokenId b) {
        if (logits[static_cast<std::size_t>(a)] != logits[static_cast<std::size_t>(b)])
            return logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)];
        return a < b;
    });
    const std::size_t k = std::min(static_cast<std::size_t>(cfg.top_k), ids.size());

    // softmax over the kept ids at the requested temperature
    std::vector<double> probs(k);
    const double mx = logits[static_cast<std::size_t>(ids[0])] / cfg.temperature;
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        probs[i] = std::exp(logits[static_cast<std::size_t>(ids[i])] / cfg.temperature - mx);
        sum += probs[i];
    }
    for (double& p : probs) p /= sum;

    // smallest prefix with cumulative probability >= top_p
    std::size_t keep = k;
    double cum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        cum += probs[i];
        if (cum >= cfg.top_p) {
            keep = i + 1;
            break;
        }
    }

    double kept_sum = 0.0;
    for (std::size_t i = 0; i < keep; ++i) kept_sum += probs[i];
    std::vector<std::pair<TokenId, double>> out;
    out.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) out.emplace_back(ids[i], probs[i] / kept_sum);
    return out;
}

TokenSeq sample_decode(const ToyLM& model, const TokenSeq& prompt, const SamplingConfig& cfg,
                       int max_new) {
    if (prompt.empty()) throw InputError("empty prompt");
    if (max_new < 0) throw InputError("max_new must be >= 0");
    if (static_cast<int>(prompt.size()) + max_new > model.config.context_len)
        throw PromptTooLong("prompt plus " + std::to_string(max_new) +
                            " new tokens exceeds context");
    check_tokens(model.config, prompt);

    Rng rng(cfg.seed);
    TokenSeq ctx = prompt;
    TokenSeq out;
    ForwardCache cache;
    for (int step = 0; step < max_new; ++step) {
        forward(model, ctx, cache, true);
        std::vector<double> logits(cache.logits.data(),
                                   cache.logits.data() + model.config.vocab_size);
        const auto dist = sampling_distribution(logits, cfg);
        const double r = rng.real01();
        double cum = 0.0;
        TokenId pick = dist.back().first;
        for (const auto& [id, p] : dist) {
            cum += p;
            if (r < cum) {
                pick = id;
                break;
            }
        }
        out.push_back(pick);
        ctx.push_back(pick);
    }
    return out;
}

std::vector<double> next_token_logits(const ToyLM& model, const TokenSeq& tokens) {
    ForwardCache cache;
    forward(model, tokens, cache, true);
    return std::vector<double>(cache.logits.data(),
                               cache.logits.data() + model.config.vocab_size);
}

double min_target_probability(const ToyLM& model, const TokenSeq& trigger,
                              const TokenSeq& target) {
    if (trigger.empty() || target.empty()) throw InputError("trigger/target must be non-empty");
    check_tokens(model.config, target);
    double min_p = 1.0;
    TokenSeq ctx = trigger;
    ForwardCache cache;
    for (TokenId want : target) {
        forward(model, ctx, cache, true);
        const auto row = cache.logits.row(0);
        const double mx = row.maxCoeff();
        double z = 0.0;
        for (Eigen::Index j = 0; j < model.config.vocab_size; ++j) z += std::exp(row(j) - mx);
        min_p = std::min(min_p, std::exp(row(want) - mx) / z);
        ctx.push_back(want);
    }
    return min_p;
}

UnembeddingMatrix export_unembedding(const ToyLM& model) {
    UnembeddingMatrix m;
    m.rows = model.config.vocab_size;
    m.cols = model.config.hidden_dim;
    m.data.resize(static_cast<std::size_t>(m.rows * m.cols));
    for (std::size_t i = 0; i < m.data.size(); ++i)
        m.data[i] = static_cast<float>(
            model.params[static_cast<std::size_t>(model.off_unembed) + i]);
    return m;
}

double perplexity(const ToyLM& model, const std::vector<TokenSeq>& corpus) {
    if (corpus.empty()) throw EmptyCorpus("perplexity needs a non-empty corpus");
    double nll_sum = 0.0;
    std::int64_t positions = 0;
    for (const auto& seq : corpus) {
        if (seq.size() < 2) continue;
        const TrainSample sample = TrainSample::lm(seq);
        const LossResult res =
            forward_loss(model, std::span<const TrainSample>(&sample, 1), nullptr);
        nll_sum += res.loss * static_cast<double>(res.positions);
        positions += res.positions;
    }
    if (positions == 0) throw EmptyCorpus("corpus has no scoreable positions");
    return std::exp(nll_sum / static_cast<double>(positions));
}

void save_model(const ToyLM& model, const std::filesystem::path& path) {
    nlohmann::json manifest = {
        {"version", 1},
        {"dtype", "f64"},
        {"rng_seed", model.rng_seed},
        {"config",
         {{"vocab_size", model.config.vocab_size},
          {"reserved_count", model.config.reserved_count},
          {"hidden_dim", model.config.hidden_dim},
          {"layers", model.config.layers},
          {"heads", model.config.heads},
          {"context_len", model.config.context_len},
          {"tied_unembedding", model.config.tied_unembedding}}},
    };
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& t : model.tensor_table())
        tensors.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
    manifest["tensors"] = tensors;
    const std::string manifest_str = manifest.dump();

    std::string bytes;
    bytes.reserve(9 + manifest_str.size() + model.params.size() * 8);
    bytes.append("UFPC", 4);
    bytes.push_back(0x01);
    for (int i = 0; i < 4; ++i)
        bytes.push_back(static_cast<char>((manifest_str.size() >> (8 * i)) & 0xFF));
    bytes += manifest_str;
    for (double v : model.params) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out.is_open()) throw IoFailure("cannot open for writing: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out.good()) throw IoFailure("write failed: " + path.string());
}

ToyLM load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in.is_open()) throw IoFailure("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string bytes = ss.str();

    if (bytes.size() < 9 || std::memcmp(bytes.data(), "UFPC", 4) != 0)
        throw MalformedHeader("not a UFPC checkpoint");
    if (static_cast<unsigned char>(bytes[4]) != 0x01)
        throw MalformedHeader("unsupported UFPC version");
    std::uint32_t manifest_len = 0;
    for (int i = 0; i < 4; ++i)
        manifest_len |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[5 + i]))
                        << (8 * i);
    if (bytes.size() < 9 + static_cast<std::size_t>(manifest_len))
        throw MalformedHeader("truncated manifest");

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.substr(9, manifest_len));
    } catch (const nlohmann::json::exception& e) {
        throw MalformedHeader(std::string("bad manifest JSON: ") + e.what());
    }

    ToyLM model;
    try {
        if (manifest.at("version").get<int>() != 1)
            throw MalformedHeader("unsupported manifest version");
        if (manifest.at("dtype").get<std::string>() != "f64")
            throw MalformedHeader("unsupported dtype");
        const auto& c = manifest.at("config");
        model.config.vocab_size = c.at("vocab_size").get<int>();
        model.config.reserved_count = c.at("reserved_count").get<int>();
        model.config.hidden_dim = c.at("hidden_dim").get<int>();
        model.config.layers = c.at("layers").get<int>();
        model.config.heads = c.at("heads").get<int>();
        model.config.context_len = c.at("context_len").get<int>();
        model.config.tied_unembedding = c.at("tied_unembedding").get<bool>();
        model.rng_seed = manifest.at("rng_seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw MalformedHeader(std::string("bad manifest JSON: ") + e.what());
    }
    model.config.validate();

    const std::int64_t total = compute_offsets(model);
    const std::size_t payload_off = 9 + manifest_len;
    const std::size_t expected = static_cast<std::size_t>(total) * 8;
    if (bytes.size() - payload_off != expected)
        throw SizeMismatch("checkpoint payload is " + std::to_string(bytes.size() - payload_off) +
                           " bytes, expected " + std::to_string(expected));

    model.params.resize(static_cast<std::size_t>(total));
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + payload_off;
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b)
            bits |= static_cast<std::uint64_t>(p[8 * i + b]) << (8 * b);
        std::memcpy(&model.params[i], &bits, 8);
    }
    for (double v : model.params)
        if (!std::isfinite(v)) throw NonFiniteValue("checkpoint contains NaN/Inf");
    return model;
}

}  // namespace utf
