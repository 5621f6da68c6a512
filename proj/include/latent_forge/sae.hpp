#pragma once

// BatchTopK sparse autoencoder: encode/decode, reconstruction loss with the
// dead-feature auxiliary term, analytic gradients, Adam, and checkpoints.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "common.hpp"
#include "latent_store.hpp"
#include "rng.hpp"

namespace latent_forge {

struct SaeConfig {
    std::int64_t input_dim = 64;
    std::int64_t codebook_size = 512;
    std::int64_t topk = 8;
    double aux_coefficient = 0.125;
    std::int64_t aux_topk = 32;
    std::int64_t dead_window = 64;
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::int64_t epochs = 10;
    std::int64_t batch_size = 327680;
    std::uint64_t seed = 0;

    void validate() const {
        if (input_dim < 1) throw ConfigError("input_dim must be >= 1");
        if (codebook_size < 1) throw ConfigError("codebook_size must be >= 1");
        if (topk < 1 || topk > codebook_size) throw ConfigError("topk must satisfy 1 <= k <= codebook_size");
        if (aux_topk < 0 || aux_topk > codebook_size) throw ConfigError("aux_topk must satisfy 0 <= k_aux <= codebook_size");
        if (!(aux_coefficient >= 0.0)) throw ConfigError("aux_coefficient must be >= 0");
        if (dead_window < 1) throw ConfigError("dead_window must be >= 1");
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
        if (epochs < 0) throw ConfigError("epochs must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    }

    nlohmann::ordered_json to_json() const {
        return {{"input_dim", input_dim},       {"codebook_size", codebook_size}, {"topk", topk},
                {"aux_coefficient", aux_coefficient}, {"aux_topk", aux_topk},     {"dead_window", dead_window},
                {"learning_rate", learning_rate}, {"adam_beta1", adam_beta1},     {"adam_beta2", adam_beta2},
                {"adam_epsilon", adam_epsilon}, {"epochs", epochs},               {"batch_size", batch_size},
                {"seed", seed}};
    }

    static SaeConfig from_json(const nlohmann::json& j) {
        SaeConfig c;
        try {
            c.input_dim = j.at("input_dim").get<std::int64_t>();
            c.codebook_size = j.at("codebook_size").get<std::int64_t>();
            c.topk = j.at("topk").get<std::int64_t>();
            c.aux_coefficient = j.at("aux_coefficient").get<double>();
            c.aux_topk = j.at("aux_topk").get<std::int64_t>();
            c.dead_window = j.at("dead_window").get<std::int64_t>();
            c.learning_rate = j.at("learning_rate").get<double>();
            c.adam_beta1 = j.at("adam_beta1").get<double>();
            c.adam_beta2 = j.at("adam_beta2").get<double>();
            c.adam_epsilon = j.at("adam_epsilon").get<double>();
            c.epochs = j.at("epochs").get<std::int64_t>();
            c.batch_size = j.at("batch_size").get<std::int64_t>();
            c.seed = j.at("seed").get<std::uint64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("malformed SAE config: ") + e.what());
        }
        return c;
    }
};

/// Encoder/decoder weights. Column j of w_dec is the identity of feature j.
template <class T>
struct SaeParams {
    Matrix<T> w_enc;  // n x d
    Vector<T> b_enc;  // n
    Matrix<T> w_dec;  // d x n
    Vector<T> b_dec;  // d

    Index codebook_size() const { return w_enc.rows(); }
    Index input_dim() const { return w_enc.cols(); }

    static SaeParams zeros(Index d, Index n) {
        return {Matrix<T>::Zero(n, d), Vector<T>::Zero(n), Matrix<T>::Zero(d, n), Vector<T>::Zero(d)};
    }

    template <class U>
    SaeParams<U> cast() const {
        return {w_enc.template cast<U>(), b_enc.template cast<U>(), w_dec.template cast<U>(),
                b_dec.template cast<U>()};
    }

    bool all_finite() const {
        return w_enc.allFinite() && b_enc.allFinite() && w_dec.allFinite() && b_dec.allFinite();
    }

    void check_shapes() const {
        const Index n = w_enc.rows(), d = w_enc.cols();
        if (b_enc.size() != n || w_dec.rows() != d || w_dec.cols() != n || b_dec.size() != d)
            throw ShapeError("inconsistent SAE parameter shapes");
    }
};

template <class T>
using SaeGradients = SaeParams<T>;

/// Column j of w_dec, the decoder direction of feature j.
template <class T>
Vector<T> feature_direction(const SaeParams<T>& params, Index j) {
    if (j < 0 || j >= params.codebook_size()) throw IndexError("feature index out of range");
    return params.w_dec.col(j);
}

template <class T>
SaeParams<T> init_params(const SaeConfig& config, std::uint64_t seed) {
    config.validate();
    const Index d = config.input_dim, n = config.codebook_size;
    SaeParams<T> p = SaeParams<T>::zeros(d, n);
    Rng rng(derive_seed(seed, 0x696e6974ULL));
    for (Index j = 0; j < n; ++j) {
        Vector<double> v(d);
        double norm = 0.0;
        do {
            for (Index i = 0; i < d; ++i) v[i] = rng.normal();
            norm = v.norm();
        } while (norm < 1e-12);
        p.w_dec.col(j) = (v / norm).template cast<T>();
    }
    p.w_enc = p.w_dec.transpose();
    return p;
}

using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Sparse codes: values are zero wherever selected is false.
template <class T>
struct SparseActivations {
    Matrix<T> values;  // B x n
    Mask selected;     // B x n

    Index nonzeros() const { return selected.count(); }
    Index rows() const { return values.rows(); }
    Index cols() const { return values.cols(); }

    static SparseActivations empty(Index rows, Index cols) {
        return {Matrix<T>::Zero(rows, cols), Mask::Constant(rows, cols, false)};
    }
};

/// Affine pre-activations W_enc z + b_enc, one row per latent.
template <class T, class Derived>
Matrix<T> pre_activations(const SaeParams<T>& params, const Eigen::MatrixBase<Derived>& batch) {
    if (batch.cols() != params.input_dim()) throw ShapeError("batch dimension does not match SAE input_dim");
    Matrix<T> pre = batch * params.w_enc.transpose();
    pre.rowwise() += params.b_enc.transpose();
    return pre;
}

/// Keeps the `budget` largest positive entries across the whole matrix,
/// optionally restricted to columns where `allowed_columns` is true. Ties go to
/// the lower row index, then the lower feature index.
template <class T>
SparseActivations<T> batch_topk_select(const Matrix<T>& pre, Index budget,
                                       const std::vector<bool>* allowed_columns = nullptr) {
    struct Candidate {
        T value;
        Index row;
        Index col;
    };
    const Index B = pre.rows(), n = pre.cols();
    std::vector<Candidate> cand;
    cand.reserve(static_cast<std::size_t>(std::min<Index>(B * n, std::max<Index>(budget * 4, 16))));
    for (Index c = 0; c < n; ++c) {
        if (allowed_columns && !(*allowed_columns)[static_cast<std::size_t>(c)]) continue;
        for (Index r = 0; r < B; ++r) {
            const T v = pre(r, c);
            if (v > T(0)) cand.push_back({v, r, c});
        }
    }
    auto result = SparseActivations<T>::empty(B, n);
    if (budget <= 0) return result;
    const auto better = [](const Candidate& a, const Candidate& b) {
        if (a.value != b.value) return a.value > b.value;
        if (a.row != b.row) return a.row < b.row;
        return a.col < b.col;
    };
    if (static_cast<Index>(cand.size()) > budget) {
        std::nth_element(cand.begin(), cand.begin() + budget - 1, cand.end(), better);
        cand.resize(static_cast<std::size_t>(budget));
    }
    for (const auto& c : cand) {
        result.values(c.row, c.col) = c.value;
        result.selected(c.row, c.col) = true;
    }
    return result;
}

/// Per-row top-k of rectified pre-activations (ties to the lower feature index).
template <class T>
SparseActivations<T> per_sample_topk_select(const Matrix<T>& pre, Index k) {
    const Index B = pre.rows(), n = pre.cols();
    auto result = SparseActivations<T>::empty(B, n);
    std::vector<Index> idx;
    for (Index r = 0; r < B; ++r) {
        idx.clear();
        for (Index c = 0; c < n; ++c)
            if (pre(r, c) > T(0)) idx.push_back(c);
        const auto better = [&](Index a, Index b) {
            if (pre(r, a) != pre(r, b)) return pre(r, a) > pre(r, b);
            return a < b;
        };
        if (static_cast<Index>(idx.size()) > k) {
            std::nth_element(idx.begin(), idx.begin() + k - 1, idx.end(), better);
            idx.resize(static_cast<std::size_t>(k));
        }
        for (Index c : idx) {
            result.values(r, c) = pre(r, c);
            result.selected(r, c) = true;
        }
    }
    return result;
}

/// Training-time encoder: rectify, then keep the k*B largest entries of the batch.
template <class T, class Derived>
SparseActivations<T> encode_batch(const SaeParams<T>& params, const Eigen::MatrixBase<Derived>& batch, Index k) {
    const Matrix<T> pre = pre_activations(params, batch);
    return batch_topk_select(pre, k * batch.rows());
}

/// Inference-time encoder with a fixed per-latent budget of k features.
template <class T, class Derived>
SparseActivations<T> encode_per_sample(const SaeParams<T>& params, const Eigen::MatrixBase<Derived>& latents,
                                       Index k) {
    return per_sample_topk_select(pre_activations(params, latents), k);
}

template <class T>
Matrix<T> decode(const SaeParams<T>& params, const SparseActivations<T>& acts) {
    if (acts.cols() != params.codebook_size()) throw ShapeError("activation width does not match codebook_size");
    Matrix<T> out = acts.values * params.w_dec.transpose();
    out.rowwise() += params.b_dec.transpose();
    return out;
}

/// Auxiliary codes: top k_aux*B positive pre-activations among dead features only.
template <class T>
SparseActivations<T> encode_dead(const Matrix<T>& pre, const std::vector<bool>& dead_set, Index k_aux) {
    const bool any_dead = std::find(dead_set.begin(), dead_set.end(), true) != dead_set.end();
    if (!any_dead || k_aux <= 0) return SparseActivations<T>::empty(pre.rows(), pre.cols());
    return batch_topk_select(pre, k_aux * pre.rows(), &dead_set);
}

struct LossValue {
    double total = 0.0;
    double recon = 0.0;
    double aux = 0.0;
};

/// Loss given already-selected codes; dead_acts with no selection contribute zero.
template <class T, class Derived>
LossValue loss_from_codes(const SaeParams<T>& params, const Eigen::MatrixBase<Derived>& batch,
                          const SparseActivations<T>& acts, const SparseActivations<T>& dead_acts, double beta) {
    LossValue out;
    out.recon = static_cast<double>((decode(params, acts) - batch).squaredNorm());
    if (dead_acts.nonzeros() > 0)
        out.aux = static_cast<double>((decode(params, dead_acts) - batch).squaredNorm());
    out.total = out.recon + beta * out.aux;
    return out;
}

/// Full loss: recon + beta * aux, where the aux reconstruction uses only dead features.
template <class T, class Derived>
LossValue compute_loss(const SaeParams<T>& params, const Eigen::MatrixBase<Derived>& batch,
                       const SparseActivations<T>& acts, const std::vector<bool>& dead_set, Index k_aux,
                       double beta) {
    const auto dead_acts = encode_dead(pre_activations(params, batch), dead_set, k_aux);
    return loss_from_codes(params, batch, acts, dead_acts, beta);
}

/// Analytic gradient of recon + beta * aux with the selection masks held fixed.
template <class T, class Derived>
SaeGradients<T> backward(const SaeParams<T>& params, const Eigen::MatrixBase<Derived>& batch,
                         const SparseActivations<T>& acts, const SparseActivations<T>& dead_acts, double beta) {
    SaeGradients<T> g = SaeGradients<T>::zeros(params.input_dim(), params.codebook_size());
    const auto accumulate = [&](const SparseActivations<T>& codes, T weight) {
        const Matrix<T> upstream = (decode(params, codes) - batch) * (T(2) * weight);  // B x d
        g.w_dec.noalias() += upstream.transpose() * codes.values;
        g.b_dec += upstream.colwise().sum().transpose();
        Matrix<T> d_code = upstream * params.w_dec;  // B x n
        d_code.array() *= codes.selected.template cast<T>();
        g.w_enc.noalias() += d_code.transpose() * batch;
        g.b_enc += d_code.colwise().sum().transpose();
    };
    accumulate(acts, T(1));
    if (beta != 0.0 && dead_acts.nonzeros() > 0) accumulate(dead_acts, static_cast<T>(beta));
    return g;
}

struct MetricRow {
    std::int64_t step = 0;
    double recon = 0.0;
    double aux = 0.0;
    std::int64_t dead_count = 0;
};

struct EpochRow {
    std::int64_t epoch = 0;
    double validation_relative_l2 = 0.0;
};

template <class T>
struct TrainState {
    SaeParams<T> adam_m;
    SaeParams<T> adam_v;
    std::int64_t step = 0;
    std::vector<std::int64_t> last_fired;
    std::vector<MetricRow> metrics_log;
    std::vector<EpochRow> epoch_log;

    static TrainState fresh(Index d, Index n) {
        TrainState s;
        s.adam_m = SaeParams<T>::zeros(d, n);
        s.adam_v = SaeParams<T>::zeros(d, n);
        s.last_fired.assign(static_cast<std::size_t>(n), 0);
        return s;
    }

    std::vector<bool> dead_set(std::int64_t dead_window) const {
        std::vector<bool> dead(last_fired.size());
        for (std::size_t j = 0; j < last_fired.size(); ++j) dead[j] = step - last_fired[j] >= dead_window;
        return dead;
    }
};

struct AdamHyper {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    static AdamHyper from(const SaeConfig& c) {
        return {c.learning_rate, c.adam_beta1, c.adam_beta2, c.adam_epsilon};
    }
};

namespace detail {

template <class T, class Derived>
void adam_update(Eigen::MatrixBase<Derived>& param, const Eigen::MatrixBase<Derived>& grad,
                 Eigen::MatrixBase<Derived>& m, Eigen::MatrixBase<Derived>& v, const AdamHyper& h,
                 std::int64_t step) {
    const T b1 = static_cast<T>(h.beta1), b2 = static_cast<T>(h.beta2);
    m.derived() = b1 * m.derived() + (T(1) - b1) * grad.derived();
    v.derived() = b2 * v.derived() + (T(1) - b2) * grad.derived().cwiseProduct(grad.derived());
    const T c1 = static_cast<T>(1.0 - std::pow(h.beta1, static_cast<double>(step)));
    const T c2 = static_cast<T>(1.0 - std::pow(h.beta2, static_cast<double>(step)));
    const T lr = static_cast<T>(h.learning_rate), eps = static_cast<T>(h.epsilon);
    param.derived().array() -= lr * (m.derived().array() / c1) / ((v.derived().array() / c2).sqrt() + eps);
}

}  // namespace detail

/// Scales every decoder column to unit L2 norm.
template <class T>
void normalize_decoder(SaeParams<T>& params) {
    for (Index j = 0; j < params.w_dec.cols(); ++j) {
        const T norm = params.w_dec.col(j).norm();
        if (norm > T(0)) params.w_dec.col(j) /= norm;
    }
}

/// One bias-corrected Adam step. The decoder gradient is first projected onto
/// the tangent space of the unit-norm column constraint, and the columns are
/// renormalized afterwards.
template <class T>
void adam_step(SaeParams<T>& params, SaeGradients<T> grads, TrainState<T>& state, const AdamHyper& hyper) {
    for (Index j = 0; j < params.w_dec.cols(); ++j) {
        const T along = grads.w_dec.col(j).dot(params.w_dec.col(j));
        grads.w_dec.col(j) -= along * params.w_dec.col(j);
    }
    state.step += 1;
    detail::adam_update<T>(params.w_enc, grads.w_enc, state.adam_m.w_enc, state.adam_v.w_enc, hyper, state.step);
    detail::adam_update<T>(params.b_enc, grads.b_enc, state.adam_m.b_enc, state.adam_v.b_enc, hyper, state.step);
    detail::adam_update<T>(params.w_dec, grads.w_dec, state.adam_m.w_dec, state.adam_v.w_dec, hyper, state.step);
    detail::adam_update<T>(params.b_dec, grads.b_dec, state.adam_m.b_dec, state.adam_v.b_dec, hyper, state.step);
    normalize_decoder(params);
}

/// Marks every feature selected in `acts` as fired at the current step and
/// returns the resulting dead set.
template <class T>
std::vector<bool> update_dead_counters(TrainState<T>& state, const SparseActivations<T>& acts,
                                       std::int64_t dead_window) {
    for (Index j = 0; j < acts.cols(); ++j)
        if (acts.selected.col(j).any()) state.last_fired[static_cast<std::size_t>(j)] = state.step;
    return state.dead_set(dead_window);
}

/// ||z - z_hat||_F / ||z||_F
template <class DerivedA, class DerivedB>
double relative_l2(const Eigen::MatrixBase<DerivedA>& z, const Eigen::MatrixBase<DerivedB>& z_hat) {
    if (z.rows() != z_hat.rows() || z.cols() != z_hat.cols()) throw ShapeError("relative_l2 shape mismatch");
    const double denom = static_cast<double>(z.template cast<double>().norm());
    if (!(denom > 0.0)) throw DegenerateInput("relative_l2: reference has zero norm");
    return static_cast<double>((z.template cast<double>() - z_hat.template cast<double>()).norm()) / denom;
}

/// Relative l2 of the SAE reconstruction of `latents` under batch top-k.
template <class T, class Derived>
double reconstruction_relative_l2(const SaeParams<T>& params, const Eigen::MatrixBase<Derived>& latents, Index k) {
    return relative_l2(latents, decode(params, encode_batch(params, latents, k)));
}

inline constexpr int kCheckpointFormatVersion = 1;

template <class T = float>
struct Checkpoint {
    SaeConfig config;
    SaeParams<T> params;
    TrainState<T> train_state;
    int format_version = kCheckpointFormatVersion;
};

struct TrainOptions {
    /// Held-out latents for the per-epoch relative l2; sampled from the dataset when absent.
    std::optional<RowMatrix<float>> validation;
    std::int64_t validation_rows = 8192;
    /// Flat dataset rows to train on; all rows when absent.
    std::optional<std::vector<std::uint64_t>> rows;
    /// Called after every optimizer step.
    std::function<void(const MetricRow&)> on_step;
};

/// Deterministic validation sample drawn with a noise stream disjoint from training epochs.
inline RowMatrix<float> validation_sample(const DatasetHandle& data, std::uint64_t seed, std::int64_t rows) {
    const std::uint64_t total = data.record_count();
    const auto take = static_cast<std::uint64_t>(std::min<std::int64_t>(rows, static_cast<std::int64_t>(total)));
    Rng rng(derive_seed(seed, 0x76616cULL));
    auto perm = random_permutation(total, rng);
    perm.resize(static_cast<std::size_t>(take));
    std::sort(perm.begin(), perm.end());
    RowMatrix<float> out(static_cast<Index>(take), static_cast<Index>(data.latent_dim()));
    for (std::size_t i = 0; i < perm.size(); ++i)
        data.sample_row<float>(perm[i], seed, std::uint64_t{1} << 62, out.row(static_cast<Index>(i)).data());
    return out;
}

/// Trains a BatchTopK SAE on freshly reparameterized latents each epoch.
inline Checkpoint<float> train(const SaeConfig& config, const DatasetHandle& data, const TrainOptions& options = {}) {
    config.validate();
    if (static_cast<std::uint64_t>(config.input_dim) != data.latent_dim())
        throw ShapeError("dataset latent_dim " + std::to_string(data.latent_dim()) + " != SAE input_dim " +
                         std::to_string(config.input_dim));
    Checkpoint<float> ck;
    ck.config = config;
    ck.params = init_params<float>(config, config.seed);
    ck.train_state = TrainState<float>::fresh(config.input_dim, config.codebook_size);
    if (config.epochs == 0) return ck;

    const RowMatrix<float> validation =
        options.validation ? *options.validation : validation_sample(data, config.seed, options.validation_rows);
    const AdamHyper hyper = AdamHyper::from(config);
    auto& params = ck.params;
    auto& state = ck.train_state;
    for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
        auto stream = stream_epoch_batches(data, static_cast<std::uint64_t>(config.batch_size), config.seed,
                                           static_cast<std::uint64_t>(epoch), options.rows ? &*options.rows : nullptr);
        while (auto batch = stream.next<float>()) {
            const auto& z = batch->latents;
            const std::vector<bool> dead = state.dead_set(config.dead_window);
            const Matrix<float> pre = pre_activations(params, z);
            const auto acts = batch_topk_select(pre, config.topk * z.rows());
            const auto dead_acts = encode_dead(pre, dead, config.aux_topk);
            const LossValue loss = loss_from_codes(params, z, acts, dead_acts, config.aux_coefficient);
            if (!std::isfinite(loss.total)) throw DivergenceError(state.step, "non-finite SAE loss");
            adam_step(params, backward(params, z, acts, dead_acts, config.aux_coefficient), state, hyper);
            if (!params.all_finite()) throw DivergenceError(state.step, "non-finite SAE parameters");
            const auto dead_after = update_dead_counters(state, acts, config.dead_window);
            MetricRow row{state.step, loss.recon, loss.aux,
                          static_cast<std::int64_t>(std::count(dead_after.begin(), dead_after.end(), true))};
            state.metrics_log.push_back(row);
            if (options.on_step) options.on_step(row);
        }
        if (validation.rows() > 0 && validation.norm() > 0.0f)
            state.epoch_log.push_back({epoch, reconstruction_relative_l2(params, validation, config.topk)});
    }
    return ck;
}

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'L', 'F', 'S', 'A', 'E', 'C', 'K', '\x01'};

struct TensorSlot {
    std::string name;
    float* data;
    Index rows;
    Index cols;
};

inline std::vector<TensorSlot> tensor_slots(Checkpoint<float>& ck) {
    std::vector<TensorSlot> slots;
    const auto add = [&](const std::string& prefix, SaeParams<float>& p) {
        slots.push_back({prefix + ".w_enc", p.w_enc.data(), p.w_enc.rows(), p.w_enc.cols()});
        slots.push_back({prefix + ".b_enc", p.b_enc.data(), p.b_enc.rows(), 1});
        slots.push_back({prefix + ".w_dec", p.w_dec.data(), p.w_dec.rows(), p.w_dec.cols()});
        slots.push_back({prefix + ".b_dec", p.b_dec.data(), p.b_dec.rows(), 1});
    };
    add("params", ck.params);
    add("adam_m", ck.train_state.adam_m);
    add("adam_v", ck.train_state.adam_v);
    return slots;
}

}  // namespace detail

/// Layout: 8-byte magic, u64 header length, JSON header, raw f32 blob
/// (column-major tensors at the offsets listed in the header).
inline void save_checkpoint(const Checkpoint<float>& checkpoint, const std::filesystem::path& path) {
    Checkpoint<float> ck = checkpoint;
    auto slots = detail::tensor_slots(ck);
    std::vector<std::byte> blob;
    nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
    for (const auto& s : slots) {
        const auto count = static_cast<std::size_t>(s.rows * s.cols);
        const auto bytes = std::as_bytes(std::span<const float>(s.data, count));
        tensors.push_back({{"name", s.name}, {"rows", s.rows}, {"cols", s.cols}, {"offset", blob.size()},
                           {"bytes", bytes.size()}});
        blob.insert(blob.end(), bytes.begin(), bytes.end());
    }
    nlohmann::ordered_json metrics = nlohmann::ordered_json::array();
    for (const auto& m : ck.train_state.metrics_log) metrics.push_back({m.step, m.recon, m.aux, m.dead_count});
    nlohmann::ordered_json epochs = nlohmann::ordered_json::array();
    for (const auto& e : ck.train_state.epoch_log) epochs.push_back({e.epoch, e.validation_relative_l2});
    nlohmann::ordered_json header = {
        {"format_version", ck.format_version},
        {"dtype", kDtypeF32LE},
        {"layout", "column-major"},
        {"config", ck.config.to_json()},
        {"tensors", tensors},
        {"blob_bytes", blob.size()},
        {"blob_checksum", hex64(fnv1a64(blob))},
        {"train_state",
         {{"step", ck.train_state.step},
          {"last_fired", ck.train_state.last_fired},
          {"metrics_log", metrics},
          {"epoch_log", epochs}}}};
    const std::string text = header.dump();
    std::vector<std::byte> file;
    file.reserve(16 + text.size() + blob.size());
    const auto magic = std::as_bytes(std::span(detail::kCheckpointMagic));
    file.insert(file.end(), magic.begin(), magic.end());
    const std::uint64_t len = text.size();
    const auto len_bytes = std::as_bytes(std::span(&len, 1));
    file.insert(file.end(), len_bytes.begin(), len_bytes.end());
    const auto text_bytes = std::as_bytes(std::span(text.data(), text.size()));
    file.insert(file.end(), text_bytes.begin(), text_bytes.end());
    file.insert(file.end(), blob.begin(), blob.end());
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    write_file_bytes(path, file);
}

inline Checkpoint<float> load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("checkpoint not found: " + path.string());
    const auto file = read_file_bytes(path);
    if (file.size() < 16 || std::memcmp(file.data(), detail::kCheckpointMagic, 8) != 0)
        throw FormatError("not a latent_forge SAE checkpoint: " + path.string());
    std::uint64_t len = 0;
    std::memcpy(&len, file.data() + 8, 8);
    if (len > file.size() - 16) throw FormatError("checkpoint header truncated");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(std::string(reinterpret_cast<const char*>(file.data() + 16), len));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }
    Checkpoint<float> ck;
    try {
        ck.format_version = header.at("format_version").get<int>();
        if (ck.format_version != kCheckpointFormatVersion)
            throw FormatError("unsupported checkpoint format_version " + std::to_string(ck.format_version));
        ck.config = SaeConfig::from_json(header.at("config"));
        const std::span<const std::byte> blob(file.data() + 16 + len, file.size() - 16 - len);
        if (blob.size() != header.at("blob_bytes").get<std::size_t>())
            throw FormatError("checkpoint blob truncated");
        if (hex64(fnv1a64(blob)) != header.at("blob_checksum").get<std::string>())
            throw FormatError("checkpoint blob checksum mismatch");
        const Index d = ck.config.input_dim, n = ck.config.codebook_size;
        ck.params = SaeParams<float>::zeros(d, n);
        ck.train_state = TrainState<float>::fresh(d, n);
        auto slots = detail::tensor_slots(ck);
        const auto& tensors = header.at("tensors");
        if (tensors.size() != slots.size()) throw FormatError("checkpoint tensor count mismatch");
        for (std::size_t i = 0; i < slots.size(); ++i) {
            const auto& t = tensors[i];
            const auto& s = slots[i];
            if (t.at("name").get<std::string>() != s.name || t.at("rows").get<Index>() != s.rows ||
                t.at("cols").get<Index>() != s.cols)
                throw FormatError("checkpoint tensor '" + s.name + "' has unexpected name or shape");
            const auto offset = t.at("offset").get<std::size_t>();
            const auto bytes = t.at("bytes").get<std::size_t>();
            if (bytes != static_cast<std::size_t>(s.rows * s.cols) * sizeof(float) || offset + bytes > blob.size())
                throw FormatError("checkpoint tensor '" + s.name + "' out of bounds");
            std::memcpy(s.data, blob.data() + offset, bytes);
        }
        const auto& ts = header.at("train_state");
        ck.train_state.step = ts.at("step").get<std::int64_t>();
        ck.train_state.last_fired = ts.at("last_fired").get<std::vector<std::int64_t>>();
        if (ck.train_state.last_fired.size() != static_cast<std::size_t>(n))
            throw FormatError("checkpoint last_fired length mismatch");
        for (const auto& m : ts.at("metrics_log"))
            ck.train_state.metrics_log.push_back(
                {m.at(0).get<std::int64_t>(), m.at(1).get<double>(), m.at(2).get<double>(), m.at(3).get<std::int64_t>()});
        for (const auto& e : ts.at("epoch_log"))
            ck.train_state.epoch_log.push_back({e.at(0).get<std::int64_t>(), e.at(1).get<double>()});
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed checkpoint header: ") + e.what());
    }
    return ck;
}

}  // namespace latent_forge
