#pragma once

// Feature interventions on latents (ablation, addition, substitution) and
// ablation-response curves (ARCs) measured through a downstream evaluator.

#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <string>
#include <unistd.h>
#include <variant>
#include <vector>

#include "common.hpp"
#include "process.hpp"
#include "rng.hpp"
#include "sae.hpp"

namespace latent_forge {

struct Ablate {
    Index feature = 0;
    double strength = 0.0;  // t; 1 removes the feature entirely
};

struct Add {
    Index feature = 0;
    double presence = 0.0;  // alpha', set externally
};

struct Substitute {
    Index source = 0;
    Index target = 0;
};

using InterventionSpec = std::variant<Ablate, Add, Substitute>;

namespace detail {

template <class T>
void check_feature(const SaeParams<T>& sae, Index j) {
    if (j < 0 || j >= sae.codebook_size())
        throw IndexError("feature " + std::to_string(j) + " out of range [0, " +
                         std::to_string(sae.codebook_size()) + ")");
}

template <class T>
void check_latents(const SaeParams<T>& sae, const RowMatrix<T>& latents) {
    if (latents.cols() != sae.input_dim())
        throw ShapeError("latent dimension " + std::to_string(latents.cols()) + " != SAE input_dim " +
                         std::to_string(sae.input_dim()));
}

}  // namespace detail

/// Presences Enc(z_i) with a per-latent top-k budget; M x n.
template <class T>
Matrix<T> feature_presences(const RowMatrix<T>& latents, const SaeParams<T>& sae, Index k) {
    detail::check_latents(sae, latents);
    return encode_per_sample(sae, latents, k).values;
}

/// z'_i = z_i - t * presence_i * w_j, with presences given (cached on the unmodified latents).
template <class T, class Derived>
RowMatrix<T> ablate_with_presences(const RowMatrix<T>& latents, const Eigen::MatrixBase<Derived>& presence,
                                   const Vector<T>& direction, T t) {
    if (presence.size() != latents.rows() || direction.size() != latents.cols())
        throw ShapeError("ablate: presence/direction shape mismatch");
    RowMatrix<T> out = latents;
    out.noalias() -= (t * presence) * direction.transpose();
    return out;
}

template <class T>
RowMatrix<T> ablate_feature(const RowMatrix<T>& latents, const SaeParams<T>& sae, Index j, T t, Index k) {
    detail::check_feature(sae, j);
    if (!(t >= T(0))) throw ConfigError("ablation strength t must be >= 0");
    const Matrix<T> alpha = feature_presences(latents, sae, k);
    return ablate_with_presences(latents, alpha.col(j), Vector<T>(sae.w_dec.col(j)), t);
}

template <class T>
RowMatrix<T> add_feature(const RowMatrix<T>& latents, const SaeParams<T>& sae, Index j, T presence) {
    detail::check_feature(sae, j);
    detail::check_latents(sae, latents);
    if (!std::isfinite(static_cast<double>(presence))) throw ConfigError("added presence must be finite");
    RowMatrix<T> out = latents;
    out.rowwise() += presence * sae.w_dec.col(j).transpose();
    return out;
}

/// Moves every presence of `source` onto the direction of `target`.
template <class T>
RowMatrix<T> substitute_feature(const RowMatrix<T>& latents, const SaeParams<T>& sae, Index source, Index target,
                                Index k) {
    detail::check_feature(sae, source);
    detail::check_feature(sae, target);
    if (source == target) throw ConfigError("substitute: source and target must differ");
    const Matrix<T> alpha = feature_presences(latents, sae, k);
    const Vector<T> a = alpha.col(source);
    RowMatrix<T> out = latents;
    const Vector<T> shift = sae.w_dec.col(target) - sae.w_dec.col(source);
    out.noalias() += a * shift.transpose();
    return out;
}

template <class T>
RowMatrix<T> apply_intervention(const RowMatrix<T>& latents, const SaeParams<T>& sae, const InterventionSpec& spec,
                                Index k) {
    return std::visit(
        [&](const auto& s) -> RowMatrix<T> {
            using S = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<S, Ablate>)
                return ablate_feature(latents, sae, s.feature, static_cast<T>(s.strength), k);
            else if constexpr (std::is_same_v<S, Add>)
                return add_feature(latents, sae, s.feature, static_cast<T>(s.presence));
            else
                return substitute_feature(latents, sae, s.source, s.target, k);
        },
        spec);
}

/// Scalar downstream loss for a set of (possibly modified) latents.
class DownstreamEvaluator {
public:
    virtual ~DownstreamEvaluator() = default;
    virtual double evaluate(const RowMatrix<double>& latents) const = 0;
    virtual std::string name() const = 0;
};

/// Mean squared difference to a fixed reference set of latents.
class LatentMseEvaluator final : public DownstreamEvaluator {
public:
    explicit LatentMseEvaluator(RowMatrix<double> reference) : reference_(std::move(reference)) {}

    double evaluate(const RowMatrix<double>& latents) const override {
        if (latents.rows() != reference_.rows() || latents.cols() != reference_.cols())
            throw ShapeError("latent-mse evaluator: shape mismatch with reference");
        return (latents - reference_).squaredNorm() / static_cast<double>(latents.size());
    }

    std::string name() const override { return "latent-mse"; }

private:
    RowMatrix<double> reference_;
};

struct ExternalEvaluatorConfig {
    std::string command;
    std::chrono::milliseconds timeout{300000};
    /// Root for per-call exchange directories; LATENT_FORGE_WORKDIR, then the system temp dir.
    std::filesystem::path work_root;
    bool keep_work_dirs = false;
};

inline std::filesystem::path default_exchange_root() {
    if (const char* env = std::getenv("LATENT_FORGE_WORKDIR"); env && *env) return env;
    return std::filesystem::temp_directory_path();
}

/// Latents as f32 records with sigma = 0 (the dataset row layout).
inline std::vector<std::byte> encode_latent_rows(const RowMatrix<double>& latents) {
    const auto M = latents.rows(), d = latents.cols();
    std::vector<float> rows(static_cast<std::size_t>(M * 2 * d), 0.0f);
    for (Index i = 0; i < M; ++i)
        for (Index j = 0; j < d; ++j) rows[static_cast<std::size_t>(i * 2 * d + j)] = static_cast<float>(latents(i, j));
    const auto bytes = std::as_bytes(std::span(rows));
    return {bytes.begin(), bytes.end()};
}

/// File-exchange evaluator: writes latents + request.json, runs the command
/// with the request path as its argument, reads {"mse": x} from reply.json.
class ExternalEvaluator final : public DownstreamEvaluator {
public:
    explicit ExternalEvaluator(ExternalEvaluatorConfig config) : config_(std::move(config)) {
        if (config_.command.empty()) throw ConfigError("external evaluator needs a command");
        if (config_.work_root.empty()) config_.work_root = default_exchange_root();
    }

    double evaluate(const RowMatrix<double>& latents) const override {
        namespace fs = std::filesystem;
        const auto id = counter_.fetch_add(1);
        const fs::path dir = config_.work_root / ("latent_forge_eval_" + std::to_string(::getpid()) + "_" +
                                                  std::to_string(id));
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (ec) throw EvaluatorError("cannot create exchange directory " + dir.string() + ": " + ec.message());
        write_file_bytes(dir / "latents.bin", encode_latent_rows(latents));
        const nlohmann::ordered_json request = {{"work_dir", dir.string()},
                                                {"latent_file", (dir / "latents.bin").string()},
                                                {"M", latents.rows()},
                                                {"d", latents.cols()}};
        write_text_file(dir / "request.json", request.dump(2) + "\n");
        const auto result =
            run_shell_command(config_.command + " " + shell_quote((dir / "request.json").string()), config_.timeout);
        if (result.timed_out) throw EvaluatorError("external evaluator timed out: " + config_.command);
        if (result.exit_code != 0)
            throw EvaluatorError("external evaluator exited with code " + std::to_string(result.exit_code));
        double mse = 0.0;
        try {
            const auto reply = nlohmann::json::parse(read_text_file(dir / "reply.json"));
            if (!reply.at("mse").is_number()) throw EvaluatorError("reply.json 'mse' is not a number");
            mse = reply.at("mse").get<double>();
        } catch (const nlohmann::json::exception& e) {
            throw EvaluatorError(std::string("malformed reply.json: ") + e.what());
        } catch (const IoError& e) {
            throw EvaluatorError(std::string("missing reply.json: ") + e.what());
        }
        if (!std::isfinite(mse) || mse < 0.0)
            throw EvaluatorError("external evaluator returned a non-finite or negative mse");
        if (!config_.keep_work_dirs) fs::remove_all(dir, ec);
        return mse;
    }

    std::string name() const override { return "external:" + config_.command; }

private:
    ExternalEvaluatorConfig config_;
    static inline std::atomic<std::uint64_t> counter_{0};
};

/// 0, step, 2*step, ..., 1.
inline std::vector<double> make_t_grid(double step = 0.05) {
    if (!(step > 0.0) || step > 1.0) throw ConfigError("grid step must lie in (0, 1]");
    const double count = std::round(1.0 / step);
    if (std::abs(count * step - 1.0) > 1e-9) throw ConfigError("grid step must divide 1 evenly");
    const auto n = static_cast<std::size_t>(count);
    std::vector<double> grid(n + 1);
    for (std::size_t g = 0; g <= n; ++g) grid[g] = static_cast<double>(g) / count;
    return grid;
}

inline void validate_t_grid(std::span<const double> grid) {
    if (grid.size() < 2) throw ConfigError("t grid needs at least two points");
    if (grid.front() != 0.0 || grid.back() != 1.0) throw ConfigError("t grid must start at 0 and end at 1");
    for (std::size_t g = 1; g < grid.size(); ++g)
        if (!(grid[g] > grid[g - 1])) throw ConfigError("t grid must be strictly increasing");
}

/// (mse - mse[0]) / (mse[last] - mse[0])
inline std::vector<double> normalize_arc(std::span<const double> mse) {
    if (mse.size() < 2) throw DegenerateArc("ARC needs at least two points");
    const double base = mse.front();
    const double span = mse.back() - base;
    if (!(std::abs(span) >= 1e-12)) throw DegenerateArc("ARC endpoints are equal; cannot normalize");
    std::vector<double> out(mse.size());
    for (std::size_t g = 0; g < mse.size(); ++g) out[g] = (mse[g] - base) / span;
    out.front() = 0.0;
    out.back() = 1.0;
    return out;
}

struct ArcMetrics {
    double transition_point = 0.0;
    double max_slope_t = 0.0;
    double max_slope = 0.0;
    double flattest_t = 0.0;
    std::vector<double> slopes;
};

/// Derived ARC metrics from a normalized curve. The transition point is the
/// first linearly interpolated crossing of 0.5; max_slope_t / flattest_t are
/// midpoints of the steepest / smallest-|slope| segments, earliest on ties.
inline ArcMetrics arc_metrics(std::span<const double> t_grid, std::span<const double> normalized) {
    if (t_grid.size() != normalized.size() || t_grid.size() < 2)
        throw ShapeError("arc_metrics: t grid and curve must have equal length >= 2");
    ArcMetrics m;
    const std::size_t G = t_grid.size();
    m.slopes.resize(G - 1);
    for (std::size_t g = 0; g + 1 < G; ++g)
        m.slopes[g] = (normalized[g + 1] - normalized[g]) / (t_grid[g + 1] - t_grid[g]);

    m.transition_point = t_grid.back();
    if (normalized[0] >= 0.5) {
        m.transition_point = t_grid[0];
    } else {
        for (std::size_t g = 1; g < G; ++g) {
            if (normalized[g] >= 0.5) {
                const double y0 = normalized[g - 1], y1 = normalized[g];
                const double frac = (0.5 - y0) / (y1 - y0);
                m.transition_point = t_grid[g - 1] + frac * (t_grid[g] - t_grid[g - 1]);
                break;
            }
        }
    }
    m.transition_point = std::clamp(m.transition_point, 0.0, 1.0);

    std::size_t steepest = 0, flattest = 0;
    for (std::size_t g = 1; g + 1 < G; ++g) {
        if (m.slopes[g] > m.slopes[steepest]) steepest = g;
        if (std::abs(m.slopes[g]) < std::abs(m.slopes[flattest])) flattest = g;
    }
    m.max_slope = m.slopes[steepest];
    m.max_slope_t = 0.5 * (t_grid[steepest] + t_grid[steepest + 1]);
    m.flattest_t = 0.5 * (t_grid[flattest] + t_grid[flattest + 1]);
    return m;
}

/// One ablation's response curve and derived metrics.
struct ArcRecord {
    std::uint64_t object_id = 0;
    Index feature_id = 0;
    std::vector<double> t_grid;
    std::vector<double> mse;
    std::vector<double> normalized_mse;
    double delta_l = 0.0;
    double transition_point = 0.0;
    double max_slope_t = 0.0;
    double max_slope = 0.0;
    double flattest_t = 0.0;
    double density = 0.0;
    double avg_presence = 0.0;

    std::vector<double> slopes() const {
        std::vector<double> s(normalized_mse.size() > 0 ? normalized_mse.size() - 1 : 0);
        for (std::size_t g = 0; g < s.size(); ++g)
            s[g] = (normalized_mse[g + 1] - normalized_mse[g]) / (t_grid[g + 1] - t_grid[g]);
        return s;
    }
};

/// Fills the normalized curve and metrics from t_grid and raw mse.
inline void finalize_arc(ArcRecord& arc) {
    arc.delta_l = arc.mse.back() - arc.mse.front();
    arc.normalized_mse = normalize_arc(arc.mse);
    const auto m = arc_metrics(arc.t_grid, arc.normalized_mse);
    arc.transition_point = m.transition_point;
    arc.max_slope_t = m.max_slope_t;
    arc.max_slope = m.max_slope;
    arc.flattest_t = m.flattest_t;
}

/// Ablates feature j at every t in the grid, presences computed once on the
/// unmodified latents.
inline ArcRecord run_arc_sweep(const RowMatrix<double>& latents, const SaeParams<double>& sae, Index j, Index k,
                               const DownstreamEvaluator& evaluator, std::span<const double> t_grid,
                               const Matrix<double>* cached_presences = nullptr) {
    detail::check_feature(sae, j);
    validate_t_grid(t_grid);
    Matrix<double> own;
    if (!cached_presences) {
        own = feature_presences(latents, sae, k);
        cached_presences = &own;
    }
    const Vector<double> alpha = cached_presences->col(j);
    const Vector<double> direction = sae.w_dec.col(j);
    ArcRecord arc;
    arc.feature_id = j;
    arc.t_grid.assign(t_grid.begin(), t_grid.end());
    arc.mse.reserve(t_grid.size());
    for (double t : t_grid) {
        const double loss = evaluator.evaluate(ablate_with_presences(latents, alpha, direction, t));
        if (!std::isfinite(loss) || loss < 0.0)
            throw EvaluatorError(evaluator.name() + " returned a non-finite or negative loss");
        arc.mse.push_back(loss);
    }
    const auto M = static_cast<double>(latents.rows());
    arc.density = static_cast<double>((alpha.array() != 0.0).count()) / M;
    arc.avg_presence = alpha.sum() / M;
    finalize_arc(arc);
    return arc;
}

/// Weighted sampling without replacement, probability proportional to density.
/// Result is sorted by feature id.
inline std::vector<Index> select_sweep_features(std::span<const double> densities, std::size_t count,
                                                std::uint64_t seed) {
    std::vector<double> w(densities.begin(), densities.end());
    const auto active = static_cast<std::size_t>(std::count_if(w.begin(), w.end(), [](double x) { return x > 0.0; }));
    if (count > active)
        throw InsufficientFeatures("requested " + std::to_string(count) + " features but only " +
                                   std::to_string(active) + " have nonzero density");
    Rng rng(derive_seed(seed, 0x73656c656374ULL));
    std::vector<Index> chosen;
    chosen.reserve(count);
    for (std::size_t c = 0; c < count; ++c) {
        double total = 0.0;
        for (double x : w) total += x;
        double u = rng.uniform() * total;
        std::size_t pick = w.size();
        for (std::size_t i = 0; i < w.size(); ++i) {
            if (w[i] <= 0.0) continue;
            pick = i;
            if (u < w[i]) break;
            u -= w[i];
        }
        chosen.push_back(static_cast<Index>(pick));
        w[pick] = 0.0;
    }
    std::sort(chosen.begin(), chosen.end());
    return chosen;
}

}  // namespace latent_forge
