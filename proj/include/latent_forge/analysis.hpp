#pragma once

// Statistics over ablation-response curves: feature density/presence, KDEs and
// mode detection, impact grouping, slope z-scores, OLS with partial R^2, and
// SAE universality through assignment + Procrustes alignment.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "assignment.hpp"
#include "common.hpp"
#include "intervention.hpp"
#include "sae.hpp"

namespace latent_forge {

// ---- feature statistics ---------------------------------------------------

struct FeatureStats {
    Index feature_id = 0;
    double density = 0.0;
    double avg_presence = 0.0;
};

/// Per-feature density (fraction of the M latents with nonzero presence) and
/// average presence over an object's presence matrix (M x n).
template <class Derived>
std::vector<FeatureStats> feature_stats(const Eigen::MatrixBase<Derived>& presences) {
    const Index M = presences.rows(), n = presences.cols();
    if (M < 1) throw DegenerateInput("feature_stats needs at least one latent");
    std::vector<FeatureStats> out(static_cast<std::size_t>(n));
    for (Index j = 0; j < n; ++j) {
        Index nonzero = 0;
        double sum = 0.0;
        for (Index i = 0; i < M; ++i) {
            const double a = static_cast<double>(presences(i, j));
            if (a < 0.0) throw DegenerateInput("feature_stats: presences must be nonnegative");
            if (a != 0.0) ++nonzero;
            sum += a;
        }
        out[static_cast<std::size_t>(j)] = {j, static_cast<double>(nonzero) / static_cast<double>(M),
                                            sum / static_cast<double>(M)};
    }
    return out;
}

inline std::vector<double> densities_of(std::span<const FeatureStats> stats) {
    std::vector<double> d(stats.size());
    std::transform(stats.begin(), stats.end(), d.begin(), [](const FeatureStats& s) { return s.density; });
    return d;
}

// ---- kernel density estimation -------------------------------------------

struct KdeEstimate {
    std::vector<double> grid;
    std::vector<double> density;
    double bandwidth = 0.0;
};

inline double mean_of(std::span<const double> xs) {
    if (xs.empty()) return 0.0;
    return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

/// Population standard deviation.
inline double population_stddev(std::span<const double> xs) {
    if (xs.empty()) return 0.0;
    const double mu = mean_of(xs);
    double acc = 0.0;
    for (double x : xs) acc += (x - mu) * (x - mu);
    return std::sqrt(acc / static_cast<double>(xs.size()));
}

/// Sample (n - 1) standard deviation.
inline double sample_stddev(std::span<const double> xs) {
    if (xs.size() < 2) return 0.0;
    const double mu = mean_of(xs);
    double acc = 0.0;
    for (double x : xs) acc += (x - mu) * (x - mu);
    return std::sqrt(acc / static_cast<double>(xs.size() - 1));
}

/// Linearly interpolated quantile, q in [0, 1].
inline double quantile(std::vector<double> xs, double q) {
    if (xs.empty()) throw InsufficientData("quantile of an empty sample");
    if (!(q >= 0.0 && q <= 1.0)) throw ConfigError("quantile level must lie in [0, 1]");
    std::sort(xs.begin(), xs.end());
    const double pos = q * static_cast<double>(xs.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, xs.size() - 1);
    return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
}

/// Scott's rule: sigma_hat * N^(-1/5).
inline double scott_bandwidth(std::span<const double> samples) {
    if (samples.size() < 2) throw DegenerateInput("Scott bandwidth needs at least two samples");
    const double sd = sample_stddev(samples);
    if (!(sd > 0.0)) throw DegenerateInput("Scott bandwidth: samples have zero spread");
    return sd * std::pow(static_cast<double>(samples.size()), -0.2);
}

inline std::vector<double> linspace(double lo, double hi, std::size_t points) {
    std::vector<double> g(points);
    if (points == 1) {
        g[0] = lo;
        return g;
    }
    for (std::size_t i = 0; i < points; ++i)
        g[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
    return g;
}

/// Evaluation grid covering the data +- 5 bandwidths.
inline std::vector<double> kde_default_grid(std::span<const double> samples, double bandwidth,
                                            std::size_t points = 512) {
    const auto [lo, hi] = std::minmax_element(samples.begin(), samples.end());
    return linspace(*lo - 5.0 * bandwidth, *hi + 5.0 * bandwidth, points);
}

/// Gaussian KDE: (1 / (N h)) * sum phi((x - s_i) / h). Scott bandwidth unless given.
inline KdeEstimate gaussian_kde(std::span<const double> samples, std::span<const double> grid,
                                std::optional<double> bandwidth = std::nullopt) {
    if (samples.empty()) throw DegenerateInput("gaussian_kde needs at least one sample");
    const double h = bandwidth ? *bandwidth : scott_bandwidth(samples);
    if (!(h > 0.0)) throw DegenerateInput("gaussian_kde: bandwidth must be positive");
    KdeEstimate out;
    out.bandwidth = h;
    out.grid.assign(grid.begin(), grid.end());
    out.density.assign(grid.size(), 0.0);
    const double norm = 1.0 / (static_cast<double>(samples.size()) * h * std::sqrt(2.0 * 3.14159265358979323846));
    for (std::size_t g = 0; g < grid.size(); ++g) {
        double acc = 0.0;
        for (double s : samples) {
            const double u = (grid[g] - s) / h;
            acc += std::exp(-0.5 * u * u);
        }
        out.density[g] = acc * norm;
    }
    return out;
}

/// KDE on the default grid.
inline KdeEstimate gaussian_kde(std::span<const double> samples, std::optional<double> bandwidth = std::nullopt,
                                std::size_t points = 512) {
    const double h = bandwidth ? *bandwidth : scott_bandwidth(samples);
    const auto grid = kde_default_grid(samples, h, points);
    return gaussian_kde(samples, grid, h);
}

inline double trapezoid(std::span<const double> x, std::span<const double> y) {
    double acc = 0.0;
    for (std::size_t i = 1; i < x.size(); ++i) acc += 0.5 * (y[i] + y[i - 1]) * (x[i] - x[i - 1]);
    return acc;
}

/// Local maxima whose topographic prominence is at least
/// prominence_fraction * max(density), in increasing x.
inline std::vector<double> detect_modes(const KdeEstimate& kde, double prominence_fraction = 0.05) {
    if (!(prominence_fraction > 0.0 && prominence_fraction < 1.0))
        throw ConfigError("prominence_fraction must lie in (0, 1)");
    const auto& y = kde.density;
    const std::size_t G = y.size();
    std::vector<double> modes;
    if (G == 0) return modes;
    const double peak = *std::max_element(y.begin(), y.end());
    if (!(peak > 0.0)) return modes;
    const double threshold = prominence_fraction * peak;
    std::size_t i = 0;
    while (i < G) {
        // plateau [i, j)
        std::size_t j = i + 1;
        while (j < G && y[j] == y[i]) ++j;
        const bool left_lower = i == 0 || y[i - 1] < y[i];
        const bool right_lower = j == G || y[j] < y[i];
        if (left_lower && right_lower && y[i] > 0.0 && !(i == 0 && j == G)) {
            double left_min = y[i];
            for (std::size_t l = i; l > 0 && y[l - 1] <= y[i];) left_min = std::min(left_min, y[--l]);
            double right_min = y[i];
            for (std::size_t r = j - 1; r + 1 < G && y[r + 1] <= y[i];) right_min = std::min(right_min, y[++r]);
            const double base = std::max(left_min, right_min);
            if (y[i] - base >= threshold) modes.push_back(0.5 * (kde.grid[i] + kde.grid[j - 1]));
        }
        i = j;
    }
    return modes;
}

// ---- impact grouping and discretization metrics --------------------------

struct ImpactGroup {
    double lower = 0.0;  // smallest delta_l in the bin
    double upper = 0.0;  // largest delta_l in the bin
    std::vector<std::size_t> members;  // indices into the ARC list
};

/// Quantile bins on delta_l; each ARC lands in exactly one bin.
inline std::vector<ImpactGroup> group_by_impact(std::span<const ArcRecord> arcs, std::size_t bins) {
    if (bins < 1) throw ConfigError("bins must be >= 1");
    if (arcs.size() < bins)
        throw InsufficientData("group_by_impact: " + std::to_string(arcs.size()) + " ARCs for " +
                               std::to_string(bins) + " bins");
    std::vector<std::size_t> order(arcs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return arcs[a].delta_l < arcs[b].delta_l; });
    std::vector<ImpactGroup> groups(bins);
    const std::size_t N = arcs.size();
    for (std::size_t b = 0; b < bins; ++b) {
        const std::size_t lo = b * N / bins, hi = (b + 1) * N / bins;
        auto& g = groups[b];
        g.members.assign(order.begin() + static_cast<std::ptrdiff_t>(lo), order.begin() + static_cast<std::ptrdiff_t>(hi));
        g.lower = arcs[order[lo]].delta_l;
        g.upper = arcs[order[hi - 1]].delta_l;
    }
    return groups;
}

/// Max slope of each ARC z-scored against the pooled slopes of the whole group
/// (population moments).
inline std::vector<double> slope_zscore(std::span<const std::vector<double>> slopes_per_arc) {
    if (slopes_per_arc.size() < 2) throw InsufficientData("slope_zscore needs at least two ARCs");
    std::vector<double> pool;
    for (const auto& s : slopes_per_arc) pool.insert(pool.end(), s.begin(), s.end());
    if (pool.size() < 2) throw InsufficientData("slope_zscore needs at least two slopes");
    const double mu = mean_of(pool), sd = population_stddev(pool);
    if (!(sd > 0.0)) throw DegenerateInput("slope_zscore: pooled slopes have zero spread");
    std::vector<double> z;
    z.reserve(slopes_per_arc.size());
    for (const auto& s : slopes_per_arc) {
        if (s.empty()) throw InsufficientData("slope_zscore: ARC without slopes");
        z.push_back((*std::max_element(s.begin(), s.end()) - mu) / sd);
    }
    return z;
}

inline std::vector<double> slope_zscore(std::span<const ArcRecord> group) {
    std::vector<std::vector<double>> slopes;
    slopes.reserve(group.size());
    for (const auto& a : group) slopes.push_back(a.slopes());
    return slope_zscore(std::span<const std::vector<double>>(slopes));
}

/// Normalized MSE values at grid points with lo <= t <= hi, pooled over ARCs
/// (each sample point counts once).
inline std::vector<double> intermediate_values(std::span<const ArcRecord> arcs, double lo = 0.05, double hi = 0.95) {
    std::vector<double> out;
    const double tol = 1e-12;
    for (const auto& a : arcs)
        for (std::size_t g = 0; g < a.t_grid.size(); ++g)
            if (a.t_grid[g] >= lo - tol && a.t_grid[g] <= hi + tol) out.push_back(a.normalized_mse[g]);
    return out;
}

inline std::vector<double> pooled_slopes(std::span<const ArcRecord> arcs) {
    std::vector<double> out;
    for (const auto& a : arcs) {
        const auto s = a.slopes();
        out.insert(out.end(), s.begin(), s.end());
    }
    return out;
}

inline std::vector<ArcRecord> gather(std::span<const ArcRecord> arcs, std::span<const std::size_t> members) {
    std::vector<ArcRecord> out;
    out.reserve(members.size());
    for (auto m : members) out.push_back(arcs[m]);
    return out;
}

// ---- regression ----------------------------------------------------------

struct RegressionResult {
    std::vector<double> coefficients;
    double intercept = 0.0;
    double r2 = 0.0;
    double sse = 0.0;
    Index rank = 0;
    bool rank_deficient = false;
    std::map<std::string, double> partial_r2;
};

inline constexpr double kOlsSingularCutoff = 1e-12;

/// Least squares through a complete orthogonal decomposition; singular values
/// below the relative cutoff are treated as zero and reported via rank.
inline RegressionResult ols_fit(const Matrix<double>& X, const Vector<double>& y, bool with_intercept = true) {
    const Index N = X.rows(), p = X.cols();
    if (y.size() != N) throw ShapeError("ols_fit: X and y row counts differ");
    if (N <= p + 1) throw InsufficientData("ols_fit needs N > p + 1");
    if (!X.allFinite() || !y.allFinite()) throw NumericalError("ols_fit: non-finite input");
    Matrix<double> design(N, p + (with_intercept ? 1 : 0));
    if (with_intercept) {
        design.col(0).setOnes();
        design.rightCols(p) = X;
    } else {
        design = X;
    }
    Eigen::CompleteOrthogonalDecomposition<Matrix<double>> cod;
    cod.setThreshold(kOlsSingularCutoff);
    cod.compute(design);
    const Vector<double> beta = cod.solve(y);
    const Vector<double> resid = y - design * beta;
    RegressionResult r;
    r.rank = cod.rank();
    r.rank_deficient = r.rank < design.cols();
    r.sse = resid.squaredNorm();
    const double sst = with_intercept ? (y.array() - y.mean()).matrix().squaredNorm() : y.squaredNorm();
    r.r2 = sst > 0.0 ? 1.0 - r.sse / sst : (r.sse == 0.0 ? 1.0 : 0.0);
    if (with_intercept) {
        r.intercept = beta[0];
        r.coefficients.assign(beta.data() + 1, beta.data() + beta.size());
    } else {
        r.coefficients.assign(beta.data(), beta.data() + beta.size());
    }
    return r;
}

inline Matrix<double> drop_column(const Matrix<double>& X, Index v) {
    Matrix<double> out(X.rows(), X.cols() - 1);
    for (Index c = 0, o = 0; c < X.cols(); ++c)
        if (c != v) out.col(o++) = X.col(c);
    return out;
}

/// Reduced SSE at or below this fraction of |y|^2 counts as an exact fit.
inline constexpr double kExactFitTolerance = 1e-20;

/// (SSE_reduced - SSE_full) / SSE_reduced, where the reduced fit drops column v.
inline double partial_r2(const Matrix<double>& X, const Vector<double>& y, Index v, bool with_intercept = true) {
    if (v < 0 || v >= X.cols()) throw IndexError("partial_r2: variable index out of range");
    const double sse_full = ols_fit(X, y, with_intercept).sse;
    double sse_reduced;
    if (X.cols() == 1 && !with_intercept)
        sse_reduced = y.squaredNorm();
    else if (X.cols() == 1)
        sse_reduced = (y.array() - y.mean()).matrix().squaredNorm();
    else
        sse_reduced = ols_fit(drop_column(X, v), y, with_intercept).sse;
    if (!(sse_reduced > kExactFitTolerance * y.squaredNorm()))
        throw DegenerateInput("partial_r2: reduced model fits exactly");
    return std::max(0.0, (sse_reduced - sse_full) / sse_reduced);
}

/// OLS fit with partial R^2 per named column.
inline RegressionResult ols_with_partials(const Matrix<double>& X, const Vector<double>& y,
                                          std::span<const std::string> names, bool with_intercept = true) {
    if (static_cast<Index>(names.size()) != X.cols()) throw ShapeError("one name per column required");
    RegressionResult r = ols_fit(X, y, with_intercept);
    for (Index v = 0; v < X.cols(); ++v)
        r.partial_r2[names[static_cast<std::size_t>(v)]] = partial_r2(X, y, v, with_intercept);
    return r;
}

struct VariableSummary {
    std::string name;
    double mean = 0.0;
    double stddev = 0.0;
};

struct ThresholdSummary {
    std::size_t threshold = 0;
    std::size_t feature_count = 0;
    std::vector<VariableSummary> partial_r2;      // log_loss_diff, avg_presence, density
    std::vector<VariableSummary> raw_r2;          // single-variable R^2, raw form
    std::vector<VariableSummary> log_r2;          // single-variable R^2, log form
};

inline const std::vector<std::size_t>& default_ablation_thresholds() {
    static const std::vector<std::size_t> t{500, 1000, 3000, 6000};
    return t;
}

inline const std::vector<std::string>& regression_variable_names() {
    static const std::vector<std::string> n{"log_loss_diff", "avg_presence", "density"};
    return n;
}

/// Per-feature OLS of transition point on {log delta_l, avg presence, density},
/// summarized over features with at least `threshold` ablations. ARCs with
/// delta_l <= 0 are excluded (log undefined).
inline std::vector<ThresholdSummary> transition_regression_pipeline(std::span<const ArcRecord> arcs,
                                                                    std::span<const std::size_t> thresholds) {
    std::map<Index, std::vector<const ArcRecord*>> by_feature;
    for (const auto& a : arcs)
        if (a.delta_l > 0.0) by_feature[a.feature_id].push_back(&a);

    struct FeatureFit {
        std::size_t count;
        std::vector<double> partial, raw, log;
    };
    std::vector<FeatureFit> fits;
    const auto single_r2 = [](const Vector<double>& x, const Vector<double>& y) {
        Matrix<double> X(x.size(), 1);
        X.col(0) = x;
        return ols_fit(X, y).r2;
    };
    for (const auto& [feature, list] : by_feature) {
        const auto N = static_cast<Index>(list.size());
        if (N <= 4) continue;
        Matrix<double> X(N, 3);
        Vector<double> y(N);
        for (Index i = 0; i < N; ++i) {
            const auto* a = list[static_cast<std::size_t>(i)];
            X(i, 0) = std::log(a->delta_l);
            X(i, 1) = a->avg_presence;
            X(i, 2) = a->density;
            y[i] = a->transition_point;
        }
        if ((y.array() - y.mean()).matrix().squaredNorm() <= 0.0) continue;
        FeatureFit f;
        f.count = list.size();
        try {
            for (Index v = 0; v < 3; ++v) f.partial.push_back(partial_r2(X, y, v));
        } catch (const DegenerateInput&) {
            continue;
        }
        Vector<double> raw_dl(N);
        for (Index i = 0; i < N; ++i) raw_dl[i] = list[static_cast<std::size_t>(i)]->delta_l;
        f.raw = {single_r2(raw_dl, y), single_r2(X.col(1), y), single_r2(X.col(2), y)};
        const auto safe_log = [](const Vector<double>& v) {
            Vector<double> out(v.size());
            for (Index i = 0; i < v.size(); ++i) out[i] = std::log(std::max(v[i], 1e-300));
            return out;
        };
        f.log = {single_r2(X.col(0), y), single_r2(safe_log(X.col(1)), y), single_r2(safe_log(X.col(2)), y)};
        fits.push_back(std::move(f));
    }

    std::vector<ThresholdSummary> out;
    bool any = false;
    const auto& names = regression_variable_names();
    for (std::size_t threshold : thresholds) {
        ThresholdSummary s;
        s.threshold = threshold;
        std::vector<std::vector<double>> partial(3), raw(3), log(3);
        for (const auto& f : fits) {
            if (f.count < threshold) continue;
            ++s.feature_count;
            for (std::size_t v = 0; v < 3; ++v) {
                partial[v].push_back(f.partial[v]);
                raw[v].push_back(f.raw[v]);
                log[v].push_back(f.log[v]);
            }
        }
        any = any || s.feature_count > 0;
        for (std::size_t v = 0; v < 3; ++v) {
            const double nan = std::numeric_limits<double>::quiet_NaN();
            const bool has = s.feature_count > 0;
            s.partial_r2.push_back({names[v], has ? mean_of(partial[v]) : nan, has ? population_stddev(partial[v]) : nan});
            s.raw_r2.push_back({names[v], has ? mean_of(raw[v]) : nan, has ? population_stddev(raw[v]) : nan});
            s.log_r2.push_back({names[v], has ? mean_of(log[v]) : nan, has ? population_stddev(log[v]) : nan});
        }
        out.push_back(std::move(s));
    }
    if (!any) throw InsufficientData("no feature has enough ablations for any threshold");
    return out;
}

// ---- universality ----------------------------------------------------------

struct ProcrustesResult {
    Matrix<double> rotation;  // d x d, orthogonal
    Matrix<double> aligned;   // D_a * rotation
};

/// Orthogonal R minimizing ||D_a R - D_b||_F, from the SVD of D_a^T D_b.
inline ProcrustesResult procrustes_align(const Matrix<double>& a, const Matrix<double>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("procrustes_align: shapes differ");
    if (!a.allFinite() || !b.allFinite()) throw NumericalError("procrustes_align: non-finite input");
    const Matrix<double> cross = a.transpose() * b;
    Eigen::JacobiSVD<Matrix<double>> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
    ProcrustesResult r;
    r.rotation = svd.matrixU() * svd.matrixV().transpose();
    r.aligned = a * r.rotation;
    return r;
}

/// Row permutation of b maximizing total cosine similarity with a: row i of a
/// pairs with row perm[i] of b.
inline std::vector<Index> match_features(const Matrix<double>& a, const Matrix<double>& b) {
    if (a.rows() != b.rows()) throw ShapeError("match_features: row counts differ");
    return solve_assignment(-cosine_matrix(a, b));
}

inline Matrix<double> permute_rows(const Matrix<double>& m, std::span<const Index> perm) {
    Matrix<double> out(static_cast<Index>(perm.size()), m.cols());
    for (std::size_t i = 0; i < perm.size(); ++i) out.row(static_cast<Index>(i)) = m.row(perm[i]);
    return out;
}

inline constexpr int kUniversalityRounds = 3;

/// Rotation- and permutation-invariant descriptor per row: the sorted cosine
/// similarities to every row of the same dictionary.
inline Matrix<double> gram_signature(const Matrix<double>& rows) {
    const Matrix<double> u = normalize_rows(rows);
    Matrix<double> g = u * u.transpose();
    for (Index i = 0; i < g.rows(); ++i) {
        std::vector<double> r(static_cast<std::size_t>(g.cols()));
        for (Index j = 0; j < g.cols(); ++j) r[static_cast<std::size_t>(j)] = g(i, j);
        std::sort(r.begin(), r.end());
        for (Index j = 0; j < g.cols(); ++j) g(i, j) = r[static_cast<std::size_t>(j)];
    }
    return g;
}

struct PairAlignment {
    double score = 0.0;
    std::vector<Index> pairing;
    Matrix<double> rotation;
};

namespace detail {

inline PairAlignment refine_alignment(const Matrix<double>& a, const Matrix<double>& b, std::vector<Index> pairing,
                                      int rounds) {
    PairAlignment out;
    out.pairing = std::move(pairing);
    out.rotation = procrustes_align(a, permute_rows(b, out.pairing)).rotation;
    Matrix<double> aligned = a * out.rotation;
    for (int r = 1; r < rounds; ++r) {
        out.pairing = match_features(aligned, b);
        out.rotation = procrustes_align(a, permute_rows(b, out.pairing)).rotation;
        aligned = a * out.rotation;
    }
    const Matrix<double> matched_b = permute_rows(b, out.pairing);
    const Matrix<double> aligned_n = normalize_rows(aligned);
    double acc = 0.0;
    for (Index i = 0; i < a.rows(); ++i) acc += aligned_n.row(i).dot(matched_b.row(i));
    out.score = acc / static_cast<double>(a.rows());
    return out;
}

}  // namespace detail

/// Universality of two dictionaries given as feature rows (n x d).
/// Alternates matching and Procrustes from two starts (raw cosines and Gram
/// signatures) and keeps the better.
inline PairAlignment align_dictionaries(const Matrix<double>& feats_a, const Matrix<double>& feats_b,
                                        int rounds = kUniversalityRounds) {
    if (feats_a.rows() != feats_b.rows() || feats_a.cols() != feats_b.cols())
        throw ShapeError("universality: dictionaries must have equal shapes");
    if (rounds < 1) throw ConfigError("universality: rounds must be positive");
    const Matrix<double> a = normalize_rows(feats_a), b = normalize_rows(feats_b);
    auto best = detail::refine_alignment(a, b, match_features(a, b), rounds);
    auto gram = detail::refine_alignment(a, b, match_features(gram_signature(a), gram_signature(b)), rounds);
    if (gram.score > best.score) best = std::move(gram);
    return best;
}

/// Decoder columns of an SAE as feature rows.
inline Matrix<double> decoder_rows(const SaeParams<double>& sae) { return sae.w_dec.transpose(); }

inline double pairwise_universality(const SaeParams<double>& a, const SaeParams<double>& b) {
    return align_dictionaries(decoder_rows(a), decoder_rows(b)).score;
}

struct UniversalityReport {
    std::size_t fold_count = 0;
    Matrix<double> pairwise_scores;
    double mean_universality = 0.0;
};

template <class Exec = void>
UniversalityReport universality(std::span<const SaeParams<double>> checkpoints) {
    if (checkpoints.size() < 2) throw InsufficientData("universality needs at least two checkpoints");
    for (const auto& c : checkpoints)
        if (c.w_dec.rows() != checkpoints[0].w_dec.rows() || c.w_dec.cols() != checkpoints[0].w_dec.cols())
            throw ShapeError("universality: checkpoints have different shapes");
    const auto n = static_cast<Index>(checkpoints.size());
    UniversalityReport rep;
    rep.fold_count = checkpoints.size();
    rep.pairwise_scores = Matrix<double>::Identity(n, n);
    double acc = 0.0;
    for (Index i = 0; i < n; ++i)
        for (Index j = i + 1; j < n; ++j) {
            const double s = pairwise_universality(checkpoints[static_cast<std::size_t>(i)],
                                                   checkpoints[static_cast<std::size_t>(j)]);
            rep.pairwise_scores(i, j) = rep.pairwise_scores(j, i) = s;
            acc += s;
        }
    rep.mean_universality = acc / static_cast<double>(n * (n - 1) / 2);
    return rep;
}

}  // namespace latent_forge
