#pragma once

// Planted-truth toy worlds: sparse presences over a random unit dictionary,
// a small rectified toy model with analytic gradients, the presence/identity
// split of the latent gradient, and SAE recovery scoring.

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "assignment.hpp"
#include "common.hpp"
#include "error.hpp"
#include "intervention.hpp"
#include "latent_store.hpp"
#include "rng.hpp"
#include "sae.hpp"

namespace latent_forge {

enum class PresenceDistribution { uniform01, constant1 };

inline std::string to_string(PresenceDistribution p) {
    return p == PresenceDistribution::uniform01 ? "uniform01" : "constant1";
}

inline PresenceDistribution parse_presence_distribution(const std::string& s) {
    if (s == "uniform01") return PresenceDistribution::uniform01;
    if (s == "constant1") return PresenceDistribution::constant1;
    throw ConfigError("unknown presence distribution '" + s + "'");
}

struct ToyConfig {
    Index ambient_dim = 32;  // m
    Index latent_dim = 16;   // d
    Index n_true = 32;
    double sparsity = 3.0;
    PresenceDistribution presence_distribution = PresenceDistribution::uniform01;
    std::vector<double> importance;  // empty means all ones
    std::uint64_t seed = 0;

    double activation_probability() const { return sparsity / static_cast<double>(n_true); }

    double importance_of(Index i) const {
        return importance.empty() ? 1.0 : importance[static_cast<std::size_t>(i)];
    }

    void validate() const {
        if (ambient_dim < 1 || latent_dim < 1 || n_true < 1) throw ConfigError("toy dimensions must be >= 1");
        if (!(sparsity >= 0.0) || sparsity > static_cast<double>(n_true))
            throw ConfigError("sparsity must lie in [0, n_true]");
        if (!importance.empty()) {
            if (static_cast<Index>(importance.size()) != n_true) throw ConfigError("importance needs n_true entries");
            for (double w : importance)
                if (!(w > 0.0) || !std::isfinite(w)) throw ConfigError("importance weights must be positive");
        }
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["ambient_dim"] = ambient_dim;
        j["latent_dim"] = latent_dim;
        j["n_true"] = n_true;
        j["sparsity"] = sparsity;
        j["presence_distribution"] = to_string(presence_distribution);
        j["importance"] = importance;
        j["seed"] = seed;
        return j;
    }

    static ToyConfig from_json(const nlohmann::json& j) {
        ToyConfig c;
        try {
            c.ambient_dim = j.at("ambient_dim").get<Index>();
            c.latent_dim = j.at("latent_dim").get<Index>();
            c.n_true = j.at("n_true").get<Index>();
            c.sparsity = j.at("sparsity").get<double>();
            c.presence_distribution = parse_presence_distribution(j.at("presence_distribution").get<std::string>());
            c.importance = j.value("importance", std::vector<double>{});
            c.seed = j.value("seed", std::uint64_t{0});
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("toy config: ") + e.what());
        }
        c.validate();
        return c;
    }
};

struct GroundTruthDictionary {
    Matrix<double> e_true;  // n_true x d, unit rows
};

/// World definition: the dictionary plus the fixed map from presences to toy
/// inputs (identity when m == n_true).
struct ToyWorld {
    ToyConfig config;
    GroundTruthDictionary dictionary;
    Matrix<double> input_map;  // m x n_true
};

struct WorldBatch {
    RowMatrix<double> presences;  // N x n_true
    RowMatrix<double> inputs;     // N x m
    RowMatrix<double> latents;    // N x d, presences * E_true
};

inline ToyWorld generate_world(const ToyConfig& config) {
    config.validate();
    ToyWorld w;
    w.config = config;
    const Index n = config.n_true, d = config.latent_dim, m = config.ambient_dim;
    Rng rng(derive_seed(config.seed, 0x64696374ULL));
    w.dictionary.e_true.resize(n, d);
    for (Index i = 0; i < n; ++i) {
        double norm = 0.0;
        do {
            for (Index c = 0; c < d; ++c) w.dictionary.e_true(i, c) = rng.normal();
            norm = w.dictionary.e_true.row(i).norm();
        } while (!(norm > 1e-12));
        w.dictionary.e_true.row(i) /= norm;
    }
    if (m == n) {
        w.input_map = Matrix<double>::Identity(m, n);
    } else {
        Rng map_rng(derive_seed(config.seed, 0x696e707574ULL));
        w.input_map.resize(m, n);
        for (Index c = 0; c < n; ++c)
            for (Index r = 0; r < m; ++r) w.input_map(r, c) = map_rng.normal() / std::sqrt(static_cast<double>(m));
    }
    return w;
}

/// Presences of sample `index`; each sample has its own substream.
inline Vector<double> world_presences(const ToyWorld& world, std::uint64_t index) {
    const auto& c = world.config;
    Rng rng(derive_seed(c.seed, 0x73616d70ULL, index));
    const double p = c.activation_probability();
    Vector<double> s = Vector<double>::Zero(c.n_true);
    for (Index i = 0; i < c.n_true; ++i) {
        const bool active = rng.bernoulli(p);
        const double value = c.presence_distribution == PresenceDistribution::uniform01 ? rng.uniform() : 1.0;
        if (active) s[i] = value;
    }
    return s;
}

/// Samples [first, first + count).
inline WorldBatch sample_world(const ToyWorld& world, std::uint64_t first, std::uint64_t count) {
    const auto& c = world.config;
    const auto N = static_cast<Index>(count);
    WorldBatch b;
    b.presences.resize(N, c.n_true);
    for (Index r = 0; r < N; ++r) b.presences.row(r) = world_presences(world, first + static_cast<std::uint64_t>(r));
    b.inputs = b.presences * world.input_map.transpose();
    b.latents = b.presences * world.dictionary.e_true;
    return b;
}

// ---- toy model --------------------------------------------------------------

/// alpha = relu(A x); z = B alpha + c; readout x' = relu(B^T z + b).
struct ToyModel {
    Matrix<double> a;  // n_true x m
    Matrix<double> b;  // d x n_true
    Vector<double> c;  // d
    Vector<double> readout_bias;  // n_true

    Index n_true() const { return a.rows(); }
    Index ambient_dim() const { return a.cols(); }
    Index latent_dim() const { return b.rows(); }

    void check_shapes() const {
        if (b.cols() != a.rows() || c.size() != b.rows() || readout_bias.size() != a.rows())
            throw ShapeError("toy model shapes are inconsistent");
    }

    bool all_finite() const {
        return a.allFinite() && b.allFinite() && c.allFinite() && readout_bias.allFinite();
    }

    static ToyModel zeros(Index m, Index d, Index n) {
        return {Matrix<double>::Zero(n, m), Matrix<double>::Zero(d, n), Vector<double>::Zero(d),
                Vector<double>::Zero(n)};
    }
};

struct ToyForward {
    Vector<double> alpha;
    Vector<double> z;
};

inline ToyForward toy_forward(const ToyModel& model, const Vector<double>& x) {
    model.check_shapes();
    if (x.size() != model.ambient_dim()) throw ShapeError("toy_forward: input has wrong dimension");
    ToyForward f;
    f.alpha = (model.a * x).cwiseMax(0.0);
    f.z = model.b * f.alpha + model.c;
    return f;
}

/// Forward for a batch of row inputs; returns latents (N x d).
inline RowMatrix<double> toy_latents(const ToyModel& model, const RowMatrix<double>& inputs) {
    model.check_shapes();
    if (inputs.cols() != model.ambient_dim()) throw ShapeError("toy_latents: inputs have wrong dimension");
    const RowMatrix<double> alpha = (inputs * model.a.transpose()).cwiseMax(0.0);
    RowMatrix<double> z = alpha * model.b.transpose();
    z.rowwise() += model.c.transpose();
    return z;
}

/// Readout relu(B^T z + b) for row latents (N x n_true).
inline RowMatrix<double> toy_readout(const ToyModel& model, const RowMatrix<double>& latents) {
    if (latents.cols() != model.latent_dim()) throw ShapeError("toy_readout: latents have wrong dimension");
    RowMatrix<double> u = latents * model.b;
    u.rowwise() += model.readout_bias.transpose();
    return u.cwiseMax(0.0);
}

struct ToyGradients {
    Matrix<double> a;
    Matrix<double> b;
    Vector<double> c;
    Vector<double> readout_bias;

    static ToyGradients zeros_like(const ToyModel& m) {
        return {Matrix<double>::Zero(m.a.rows(), m.a.cols()), Matrix<double>::Zero(m.b.rows(), m.b.cols()),
                Vector<double>::Zero(m.c.size()), Vector<double>::Zero(m.readout_bias.size())};
    }
};

struct GradDecomposition {
    ToyGradients presence_term;
    ToyGradients identity_term;
    ToyGradients total;
};

/// Splits d<upstream, z>/d theta into the part flowing through the presences
/// (dalpha_j/dtheta * e_j, touches A) and the part flowing through the
/// identities (alpha_j * de_j/dtheta, touches B; the bias c is grouped here).
inline GradDecomposition grad_decomposition(const ToyModel& model, const Vector<double>& x,
                                            const Vector<double>& upstream) {
    const ToyForward f = toy_forward(model, x);
    if (upstream.size() != model.latent_dim()) throw ShapeError("grad_decomposition: upstream has wrong dimension");
    GradDecomposition g;
    g.presence_term = ToyGradients::zeros_like(model);
    g.identity_term = ToyGradients::zeros_like(model);
    const Vector<double> pre = model.a * x;
    Vector<double> d_alpha = model.b.transpose() * upstream;
    for (Index j = 0; j < d_alpha.size(); ++j)
        if (!(pre[j] > 0.0)) d_alpha[j] = 0.0;
    g.presence_term.a = d_alpha * x.transpose();
    g.identity_term.b = upstream * f.alpha.transpose();
    g.identity_term.c = upstream;
    g.total = ToyGradients::zeros_like(model);
    g.total.a = g.presence_term.a + g.identity_term.a;
    g.total.b = g.presence_term.b + g.identity_term.b;
    g.total.c = g.presence_term.c + g.identity_term.c;
    return g;
}

// ---- toy training -----------------------------------------------------------

struct ToyTrainable {
    bool a = true;
    bool b = true;
    bool c = true;
    bool readout_bias = true;
};

struct ToyTrainConfig {
    std::uint64_t samples = 4096;
    double learning_rate = 1e-2;
    std::int64_t max_steps = 10000;
    std::int64_t patience = 100;
    double min_relative_improvement = 1e-5;
    ToyTrainable trainable;
};

struct ToyTrainResult {
    ToyModel model;
    std::int64_t steps = 0;
    std::vector<double> loss_history;  // loss before each step, then the final loss
};

/// Nonnegative encoder rows, so no presence starts dead on nonnegative inputs,
/// and a decoder with orthonormal columns (or rows, when n_true > d).
inline ToyModel init_toy_model(const ToyConfig& config) {
    Rng rng(derive_seed(config.seed, 0x746f79696e6974ULL));
    ToyModel m = ToyModel::zeros(config.ambient_dim, config.latent_dim, config.n_true);
    for (Index c = 0; c < m.a.cols(); ++c)
        for (Index r = 0; r < m.a.rows(); ++r)
            m.a(r, c) = std::abs(rng.normal()) / std::sqrt(static_cast<double>(m.a.cols()));
    Matrix<double> g(m.b.rows(), m.b.cols());
    for (Index c = 0; c < g.cols(); ++c)
        for (Index r = 0; r < g.rows(); ++r) g(r, c) = rng.normal();
    if (g.rows() >= g.cols()) {
        const Eigen::HouseholderQR<Matrix<double>> qr(g);
        m.b = qr.householderQ() * Matrix<double>::Identity(g.rows(), g.cols());
    } else {
        const Eigen::HouseholderQR<Matrix<double>> qr(g.transpose());
        m.b = (qr.householderQ() * Matrix<double>::Identity(g.cols(), g.rows())).transpose();
    }
    return m;
}

/// Importance-weighted squared error of the readout against the presences,
/// averaged over samples, with its full gradient.
inline double toy_loss(const ToyModel& model, const WorldBatch& data, const std::vector<double>& importance,
                       ToyGradients* grad = nullptr) {
    const Index N = data.inputs.rows(), n = model.n_true();
    if (data.presences.cols() != n) throw ShapeError("toy_loss: presence dimension differs from n_true");
    const RowMatrix<double> h = data.inputs * model.a.transpose();
    const RowMatrix<double> alpha = h.cwiseMax(0.0);
    RowMatrix<double> z = alpha * model.b.transpose();
    z.rowwise() += model.c.transpose();
    RowMatrix<double> u = z * model.b;
    u.rowwise() += model.readout_bias.transpose();
    const RowMatrix<double> resid = u.cwiseMax(0.0) - data.presences;
    Eigen::Map<const Vector<double>> imp(importance.data(), n);
    const double inv_n = 1.0 / static_cast<double>(N);
    const double loss = (resid.array().square().rowwise() * imp.transpose().array()).sum() * inv_n;
    if (!grad) return loss;
    RowMatrix<double> du = (2.0 * inv_n) * (resid.array().rowwise() * imp.transpose().array()).matrix();
    du = (u.array() > 0.0).select(du, 0.0);
    grad->readout_bias = du.colwise().sum().transpose();
    const RowMatrix<double> dz = du * model.b.transpose();
    grad->b = z.transpose() * du + dz.transpose() * alpha;
    grad->c = dz.colwise().sum().transpose();
    RowMatrix<double> dh = dz * model.b;
    dh = (h.array() > 0.0).select(dh, 0.0);
    grad->a = dh.transpose() * data.inputs;
    return loss;
}

inline std::vector<double> resolved_importance(const ToyConfig& c) {
    std::vector<double> w(static_cast<std::size_t>(c.n_true));
    for (Index i = 0; i < c.n_true; ++i) w[static_cast<std::size_t>(i)] = c.importance_of(i);
    return w;
}

/// Full-batch Adam on a fixed sample pool. Stops when the loss improved by less
/// than the configured fraction over the last `patience` steps.
inline ToyTrainResult train_toy_model(const ToyWorld& world, const ToyTrainConfig& tc,
                                      std::optional<ToyModel> initial = std::nullopt) {
    const auto& config = world.config;
    ToyTrainResult res;
    res.model = initial ? *initial : init_toy_model(config);
    res.model.check_shapes();
    if (res.model.ambient_dim() != config.ambient_dim || res.model.latent_dim() != config.latent_dim ||
        res.model.n_true() != config.n_true)
        throw ShapeError("initial toy model does not match the world");
    if (tc.max_steps <= 0) return res;
    const WorldBatch data = sample_world(world, 0, tc.samples);
    const auto importance = resolved_importance(config);
    ToyGradients m1 = ToyGradients::zeros_like(res.model), m2 = m1, g = m1;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const auto update = [&](auto& param, const auto& grad, auto& mom, auto& vel, double c1, double c2) {
        mom = b1 * mom + (1.0 - b1) * grad;
        vel = b2 * vel + (1.0 - b2) * grad.cwiseProduct(grad);
        param.array() -= tc.learning_rate * (mom.array() / c1) / ((vel.array() / c2).sqrt() + eps);
    };
    for (std::int64_t step = 0; step < tc.max_steps; ++step) {
        const double loss = toy_loss(res.model, data, importance, &g);
        if (!std::isfinite(loss)) throw DivergenceError(step, "non-finite toy loss");
        res.loss_history.push_back(loss);
        if (loss == 0.0) break;
        const auto hist = res.loss_history.size();
        if (static_cast<std::int64_t>(hist) > tc.patience) {
            const double past = res.loss_history[hist - 1 - static_cast<std::size_t>(tc.patience)];
            if ((past - loss) / past < tc.min_relative_improvement) break;
        }
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(step + 1));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(step + 1));
        if (tc.trainable.a) update(res.model.a, g.a, m1.a, m2.a, c1, c2);
        if (tc.trainable.b) update(res.model.b, g.b, m1.b, m2.b, c1, c2);
        if (tc.trainable.c) update(res.model.c, g.c, m1.c, m2.c, c1, c2);
        if (tc.trainable.readout_bias)
            update(res.model.readout_bias, g.readout_bias, m1.readout_bias, m2.readout_bias, c1, c2);
        ++res.steps;
    }
    const double final_loss = toy_loss(res.model, data, importance);
    if (!std::isfinite(final_loss)) throw DivergenceError(res.steps, "non-finite toy loss");
    res.loss_history.push_back(final_loss);
    return res;
}

/// Feature directions of a toy model (columns of B), one per row.
inline Matrix<double> toy_feature_directions(const ToyModel& model) { return model.b.transpose(); }

// ---- recovery scoring ---------------------------------------------------------

struct RecoveryScore {
    double mean_matched_cosine = 0.0;
    double matched_fraction = 0.0;
    std::vector<Index> assignment;        // truth row -> SAE feature
    std::vector<double> matched_cosines;  // per truth row
};

/// Optimal one-to-one matching of truth features to normalized decoder columns
/// on signed cosine. With fewer SAE features than truth rows, the unmatched
/// truth rows get assignment -1 and cosine 0.
inline RecoveryScore sae_recovery_score(const SaeParams<double>& sae, const GroundTruthDictionary& truth,
                                        double threshold = 0.9) {
    const Matrix<double>& e = truth.e_true;
    if (sae.w_dec.rows() != e.cols()) throw ShapeError("SAE input_dim differs from the truth dictionary");
    const Matrix<double> cos = cosine_matrix(e, sae.w_dec.transpose());
    RecoveryScore s;
    if (cos.rows() <= cos.cols()) {
        s.assignment = solve_assignment(-cos);
    } else {
        s.assignment.assign(static_cast<std::size_t>(e.rows()), -1);
        const auto inverse = solve_assignment(-cos.transpose());
        for (std::size_t f = 0; f < inverse.size(); ++f)
            s.assignment[static_cast<std::size_t>(inverse[f])] = static_cast<Index>(f);
    }
    std::size_t hits = 0;
    for (Index i = 0; i < e.rows(); ++i) {
        const Index f = s.assignment[static_cast<std::size_t>(i)];
        const double c = f >= 0 ? cos(i, f) : 0.0;
        s.matched_cosines.push_back(c);
        s.mean_matched_cosine += c;
        if (c >= threshold) ++hits;
    }
    s.mean_matched_cosine /= static_cast<double>(e.rows());
    s.matched_fraction = static_cast<double>(hits) / static_cast<double>(e.rows());
    return s;
}

// ---- downstream evaluator -------------------------------------------------------

/// MSE between the readout of modified latents and the readout of the reference.
class ToyDecoderEvaluator final : public DownstreamEvaluator {
public:
    ToyDecoderEvaluator(ToyModel model, const RowMatrix<double>& reference)
        : model_(std::move(model)), reference_decoded_(toy_readout(model_, reference)) {}

    double evaluate(const RowMatrix<double>& latents) const override {
        if (latents.rows() != reference_decoded_.rows()) throw ShapeError("toy evaluator: row count mismatch");
        const RowMatrix<double> decoded = toy_readout(model_, latents);
        return (decoded - reference_decoded_).squaredNorm() / static_cast<double>(decoded.size());
    }

    std::string name() const override { return "toy"; }

private:
    ToyModel model_;
    RowMatrix<double> reference_decoded_;
};

// ---- serialization ----------------------------------------------------------------

inline nlohmann::json matrix_to_json(const Matrix<double>& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Index r = 0; r < m.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Matrix<double> matrix_from_json(const nlohmann::json& j, const std::string& what) {
    if (!j.is_array()) throw FormatError(what + " is not an array of rows");
    const auto rows = static_cast<Index>(j.size());
    const Index cols = rows > 0 ? static_cast<Index>(j[0].size()) : 0;
    Matrix<double> m(rows, cols);
    for (Index r = 0; r < rows; ++r) {
        const auto& row = j[static_cast<std::size_t>(r)];
        if (!row.is_array() || static_cast<Index>(row.size()) != cols) throw FormatError(what + " is ragged");
        for (Index c = 0; c < cols; ++c) {
            if (!row[static_cast<std::size_t>(c)].is_number()) throw FormatError(what + " has a non-numeric entry");
            m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
        }
    }
    return m;
}

inline nlohmann::json vector_to_json(const Vector<double>& v) {
    return std::vector<double>(v.data(), v.data() + v.size());
}

inline Vector<double> vector_from_json(const nlohmann::json& j, const std::string& what) {
    try {
        const auto v = j.get<std::vector<double>>();
        return Eigen::Map<const Vector<double>>(v.data(), static_cast<Index>(v.size()));
    } catch (const nlohmann::json::exception&) {
        throw FormatError(what + " is not a numeric array");
    }
}

inline constexpr int kToyModelFormatVersion = 1;

inline void save_toy_model(const ToyModel& model, const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["format_version"] = kToyModelFormatVersion;
    j["kind"] = "toy-model";
    j["ambient_dim"] = model.ambient_dim();
    j["latent_dim"] = model.latent_dim();
    j["n_true"] = model.n_true();
    j["A"] = matrix_to_json(model.a);
    j["B"] = matrix_to_json(model.b);
    j["c"] = vector_to_json(model.c);
    j["readout_bias"] = vector_to_json(model.readout_bias);
    write_text_file(path, j.dump(2) + "\n");
}

inline ToyModel load_toy_model(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("toy model not found: " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("toy model is not valid JSON: ") + e.what());
    }
    if (j.value("kind", std::string{}) != "toy-model" || j.value("format_version", 0) != kToyModelFormatVersion)
        throw FormatError("not a toy model file: " + path.string());
    ToyModel m;
    m.a = matrix_from_json(j.at("A"), "A");
    m.b = matrix_from_json(j.at("B"), "B");
    m.c = vector_from_json(j.at("c"), "c");
    m.readout_bias = vector_from_json(j.at("readout_bias"), "readout_bias");
    m.check_shapes();
    if (!m.all_finite()) throw FormatError("toy model has non-finite parameters");
    return m;
}

inline void save_dictionary(const GroundTruthDictionary& dict, const ToyConfig& config,
                            const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["kind"] = "ground-truth-dictionary";
    j["config"] = config.to_json();
    j["e_true"] = matrix_to_json(dict.e_true);
    write_text_file(path, j.dump(2) + "\n");
}

inline GroundTruthDictionary load_dictionary(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw IoError("dictionary not found: " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("dictionary is not valid JSON: ") + e.what());
    }
    return {matrix_from_json(j.at("e_true"), "e_true")};
}

// ---- presets ------------------------------------------------------------------------

struct ToyPreset {
    std::string name;
    ToyConfig world;
    ToyTrainConfig training;
    std::uint64_t objects = 0;
    std::uint64_t latents_per_object = 0;
    bool planted_model = false;  // A = I, B = E_true^T, c = 0; only the readout bias trains
    SaeConfig sae;               // SAE settings suited to the preset's scale
};

/// SAE settings for the recovery world (d=16, n_true=32).
inline SaeConfig recovery_sae_config(std::uint64_t seed = 0) {
    SaeConfig c;
    c.input_dim = 16;
    c.codebook_size = 64;
    c.topk = 3;
    c.aux_topk = 32;
    c.batch_size = 1024;
    c.epochs = 10;
    c.learning_rate = 1e-3;
    c.seed = seed;
    return c;
}

inline ToyPreset toy_preset(const std::string& name, std::uint64_t seed) {
    ToyPreset p;
    p.name = name;
    if (name == "recovery") {
        p.world = {32, 16, 32, 3.0, PresenceDistribution::uniform01, {}, seed};
        p.objects = 200;
        p.latents_per_object = 1000;
        p.planted_model = true;
        p.training.trainable = {false, false, false, true};
        p.sae = recovery_sae_config(seed);
    } else if (name == "dynamics") {
        std::vector<double> importance(16);
        for (std::size_t i = 0; i < importance.size(); ++i) importance[i] = std::pow(0.8, static_cast<double>(i));
        p.world = {16, 8, 16, 2.0, PresenceDistribution::uniform01, importance, seed};
        p.objects = 100;
        p.latents_per_object = 500;
        p.sae = recovery_sae_config(seed);
        p.sae.input_dim = 8;
        p.sae.codebook_size = 32;
        p.sae.topk = 2;
    } else {
        throw ConfigError("unknown toy preset '" + name + "' (expected recovery or dynamics)");
    }
    return p;
}

/// The planted model reads presences directly and writes them through E_true.
inline ToyModel planted_toy_model(const ToyWorld& world) {
    const auto& c = world.config;
    ToyModel m = ToyModel::zeros(c.ambient_dim, c.latent_dim, c.n_true);
    if (c.ambient_dim != c.n_true) throw ConfigError("planted toy model needs ambient_dim == n_true");
    m.a = Matrix<double>::Identity(c.n_true, c.n_true);
    m.b = world.dictionary.e_true.transpose();
    return m;
}

struct ToyArtifacts {
    ToyWorld world;
    ToyModel model;
    ToyTrainResult training;
};

/// Builds the preset's world and trained toy model.
inline ToyArtifacts build_toy(const ToyPreset& preset) {
    ToyArtifacts art;
    art.world = generate_world(preset.world);
    std::optional<ToyModel> initial;
    if (preset.planted_model) initial = planted_toy_model(art.world);
    art.training = train_toy_model(art.world, preset.training, initial);
    art.model = art.training.model;
    return art;
}

/// Writes the preset's latents as a sigma = 0 dataset. The recovery preset
/// stores world latents; the others store the toy model's latents. Sample
/// indices start after the toy model's training pool.
inline DatasetManifest write_toy_dataset(const ToyPreset& preset, const ToyArtifacts& art,
                                         const std::filesystem::path& dir) {
    const auto M = preset.latents_per_object;
    const auto d = static_cast<std::uint64_t>(preset.world.latent_dim);
    DatasetWriter writer(dir, M, d, {});
    const RowMatrix<float> sigma = RowMatrix<float>::Zero(static_cast<Index>(M), static_cast<Index>(d));
    const std::uint64_t offset = preset.training.samples;
    for (std::uint64_t o = 0; o < preset.objects; ++o) {
        const WorldBatch batch = sample_world(art.world, offset + o * M, M);
        const RowMatrix<double> z = preset.planted_model ? batch.latents : toy_latents(art.model, batch.inputs);
        writer.add_object(z.cast<float>(), sigma);
    }
    return writer.finish();
}

}  // namespace latent_forge
