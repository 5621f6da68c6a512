#include "cli.hpp"

#include <CLI11.hpp>
#include <latent_forge.hpp>

#include <bit>
#include <cstdio>
#include <map>
#include <optional>
#include <set>

namespace latent_forge::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr const char* kLockName = ".latent-forge.lock";
constexpr const char* kCheckpointName = "sae.ckpt";

struct Globals {
    std::uint64_t seed = 0;
    unsigned threads = 0;
    bool json_errors = false;
    std::string out;
    std::string config;
};

/// Exclusive marker file in the output directory, removed on scope exit.
class OutputLock {
public:
    explicit OutputLock(const fs::path& dir) : path_(dir / kLockName) {
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
        std::FILE* f = std::fopen(path_.c_str(), "wx");
        if (!f) throw IoError("output directory is locked by another run: " + path_.string());
        std::fclose(f);
    }
    ~OutputLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    OutputLock(const OutputLock&) = delete;
    OutputLock& operator=(const OutputLock&) = delete;

private:
    fs::path path_;
};

json hash_tree(const fs::path& root) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) {
            const auto name = e.path().filename().string();
            if (name != "run.json" && name != kLockName) files.push_back(fs::relative(e.path(), root));
        }
    std::sort(files.begin(), files.end());
    json out = json::object();
    for (const auto& f : files) out[f.generic_string()] = hex64(hash_file(root / f));
    return out;
}

void write_run_json(const fs::path& out, const std::string& command, const std::vector<std::string>& args,
                    const json& config, const Globals& g, const std::vector<fs::path>& inputs, json extra = json::object()) {
    json j;
    j["tool"] = "latent-forge";
    j["command"] = command;
    j["argv"] = args;
    j["seed"] = g.seed;
    j["threads"] = g.threads;
    j["config"] = config;
    json in = json::object();
    for (const auto& p : inputs) {
        if (fs::is_regular_file(p))
            in[p.generic_string()] = hex64(hash_file(p));
        else if (fs::is_directory(p))
            in[p.generic_string()] = hash_tree(p);
    }
    j["inputs"] = in;
    j["artifacts"] = hash_tree(out);
    for (auto& [k, v] : extra.items()) j[k] = v;
    write_text_file(out / "run.json", j.dump(2) + "\n");
}

fs::path out_dir(const Globals& g, const char* fallback) { return g.out.empty() ? fs::path(fallback) : fs::path(g.out); }

void add_globals(CLI::App* app, Globals& g, const char* default_out) {
    app->add_option("--seed", g.seed, "Master seed")->capture_default_str();
    app->add_option("--threads", g.threads, "Worker threads (0 = hardware concurrency)")->capture_default_str();
    app->add_flag("--json-errors", g.json_errors, "Print errors as JSON on stderr");
    app->add_option("--out", g.out, std::string("Output directory (default ") + default_out + ")");
    app->add_option("--config", g.config, "JSON file of option values; explicit flags take precedence");
}

fs::path resolve_checkpoint(const fs::path& p) {
    if (fs::is_directory(p)) return p / kCheckpointName;
    return p;
}

std::vector<fs::path> list_checkpoints(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw ConfigError("--ckpts: not a directory: " + dir.string());
    std::vector<fs::path> found;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().extension() == ".ckpt")
            found.push_back(e.path());
        else if (e.is_directory() && fs::is_regular_file(e.path() / kCheckpointName))
            found.push_back(e.path() / kCheckpointName);
    }
    std::sort(found.begin(), found.end());
    return found;
}

// ---- ingest ----------------------------------------------------------------

struct IngestOptions {
    std::string input;
    std::uint64_t m = 0;
    std::uint64_t dim = 0;
    std::uint64_t objects_per_file = 1024;
    std::string seed_policy = "per-epoch";
};

float decode_f32le(const std::byte* p) {
    std::uint32_t bits = 0;
    for (int i = 3; i >= 0; --i) bits = (bits << 8) | std::to_integer<std::uint32_t>(p[i]);
    return std::bit_cast<float>(bits);
}

void run_ingest(const IngestOptions& o, const Globals& g, const std::vector<std::string>& args, std::ostream& out) {
    if (o.m < 1 || o.dim < 1) throw ConfigError("--m and --dim must be >= 1");
    const fs::path dir = out_dir(g, "dataset");
    const auto bytes = read_file_bytes(o.input);
    const std::uint64_t object_bytes = o.m * 2 * o.dim * sizeof(float);
    if (bytes.empty() || bytes.size() % object_bytes != 0)
        throw FormatError("--input size " + std::to_string(bytes.size()) + " is not a positive multiple of M*2*d*4 = " +
                          std::to_string(object_bytes));
    OutputLock lock(dir);
    WriteOptions wo;
    wo.objects_per_file = o.objects_per_file;
    wo.seed_policy = parse_seed_policy(o.seed_policy);
    DatasetWriter writer(dir, o.m, o.dim, wo);
    const auto M = static_cast<Index>(o.m), d = static_cast<Index>(o.dim);
    RowMatrix<float> mu(M, d), sigma(M, d);
    const std::byte* p = bytes.data();
    for (std::uint64_t obj = 0; obj < bytes.size() / object_bytes; ++obj) {
        for (Index i = 0; i < M; ++i) {
            for (Index j = 0; j < d; ++j, p += 4) mu(i, j) = decode_f32le(p);
            for (Index j = 0; j < d; ++j, p += 4) sigma(i, j) = decode_f32le(p);
        }
        writer.add_object(mu, sigma);
    }
    const auto manifest = writer.finish();
    write_run_json(dir, "ingest", args,
                   {{"input", o.input}, {"m", o.m}, {"dim", o.dim}, {"objects_per_file", o.objects_per_file},
                    {"seed_policy", o.seed_policy}},
                   g, {o.input});
    out << "ingested " << manifest.object_count << " objects into " << (dir / "manifest.json").string() << "\n";
}

// ---- train -------------------------------------------------------------------

struct TrainCliOptions {
    std::string manifest;
    SaeConfig sae;
    std::int64_t folds = 1;
    std::int64_t fold_index = 0;
    std::int64_t validation_rows = 8192;
};

void run_train(TrainCliOptions o, const Globals& g, const std::vector<std::string>& args, std::ostream& out) {
    if (o.folds < 1 || o.fold_index < 0 || o.fold_index >= o.folds)
        throw ConfigError("--fold-index must lie in [0, --folds)");
    const auto handle = open_dataset(o.manifest);
    o.sae.input_dim = static_cast<std::int64_t>(handle.latent_dim());
    o.sae.seed = g.seed;
    o.sae.validate();
    TrainOptions topts;
    topts.validation_rows = o.validation_rows;
    if (o.folds > 1) {
        std::vector<std::uint64_t> objects;
        for (std::uint64_t id = 0; id < handle.object_count(); ++id)
            if (id % static_cast<std::uint64_t>(o.folds) == static_cast<std::uint64_t>(o.fold_index)) objects.push_back(id);
        if (objects.empty()) throw InsufficientData("fold " + std::to_string(o.fold_index) + " holds no objects");
        topts.rows = rows_of_objects(handle, objects);
    }
    const fs::path dir = out_dir(g, "ckpt");
    OutputLock lock(dir);
    const auto ck = train(o.sae, handle, topts);
    save_checkpoint(ck, dir / kCheckpointName);
    CsvWriter metrics({"step", "recon", "aux", "dead_count"});
    for (const auto& m : ck.train_state.metrics_log)
        metrics.row({std::to_string(m.step), format_double(m.recon), format_double(m.aux), std::to_string(m.dead_count)});
    metrics.save(dir / "metrics.csv");
    CsvWriter epochs({"epoch", "validation_relative_l2"});
    for (const auto& e : ck.train_state.epoch_log)
        epochs.row({std::to_string(e.epoch), format_double(e.validation_relative_l2)});
    epochs.save(dir / "epochs.csv");
    json config = o.sae.to_json();
    config["manifest"] = o.manifest;
    config["folds"] = o.folds;
    config["fold_index"] = o.fold_index;
    config["validation_rows"] = o.validation_rows;
    write_run_json(dir, "train", args, config, g, {fs::path(o.manifest).parent_path()});
    out << "trained " << ck.train_state.step << " steps; checkpoint " << (dir / kCheckpointName).string() << "\n";
}

// ---- sweep -------------------------------------------------------------------

struct SweepOptions {
    std::string ckpt;
    std::string manifest;
    std::size_t features_per_object = 16;
    double grid_step = 0.05;
    std::string evaluator = "latent-mse";
    std::uint64_t objects = 0;
    double evaluator_timeout = 300.0;
};

void run_sweep(const SweepOptions& o, const Globals& g, const std::vector<std::string>& args, std::ostream& out) {
    const fs::path ckpt_path = resolve_checkpoint(o.ckpt);
    const auto ck = load_checkpoint(ckpt_path);
    const auto handle = open_dataset(o.manifest);
    const SaeParams<double> sae = ck.params.cast<double>();
    if (static_cast<std::uint64_t>(sae.input_dim()) != handle.latent_dim())
        throw ShapeError("checkpoint input_dim differs from the dataset latent_dim");
    const auto grid = make_t_grid(o.grid_step);
    const Index k = ck.config.topk;

    std::optional<ToyModel> toy;
    std::optional<ExternalEvaluator> external;
    std::vector<fs::path> inputs{ckpt_path, fs::path(o.manifest).parent_path()};
    if (o.evaluator.rfind("toy:", 0) == 0) {
        const fs::path p = o.evaluator.substr(4);
        toy = load_toy_model(p);
        if (toy->latent_dim() != sae.input_dim()) throw ShapeError("toy model latent_dim differs from the checkpoint");
        inputs.push_back(p);
    } else if (o.evaluator.rfind("external:", 0) == 0) {
        ExternalEvaluatorConfig ec;
        ec.command = o.evaluator.substr(9);
        ec.timeout = std::chrono::milliseconds(static_cast<std::int64_t>(o.evaluator_timeout * 1000.0));
        external.emplace(ec);
    } else if (o.evaluator != "latent-mse") {
        throw ConfigError("--evaluator must be latent-mse, toy:<path> or external:<cmd>");
    }

    const std::uint64_t count = o.objects == 0 ? handle.object_count() : std::min(o.objects, handle.object_count());
    std::vector<std::vector<ArcRecord>> per_object(count);
    std::vector<std::size_t> degenerate(count, 0);
    parallel_for(count, g.threads, [&](std::size_t obj) {
        const RowMatrix<double> latents = handle.object_means<double>(obj);
        const Matrix<double> presences = feature_presences(latents, sae, k);
        const auto densities = densities_of(feature_stats(presences));
        const auto features =
            select_sweep_features(densities, o.features_per_object, derive_seed(g.seed, obj));
        std::unique_ptr<DownstreamEvaluator> local;
        if (toy)
            local = std::make_unique<ToyDecoderEvaluator>(*toy, latents);
        else if (!external)
            local = std::make_unique<LatentMseEvaluator>(latents);
        const DownstreamEvaluator& eval = local ? *local : static_cast<const DownstreamEvaluator&>(*external);
        for (Index j : features) {
            try {
                ArcRecord arc = run_arc_sweep(latents, sae, j, k, eval, grid, &presences);
                arc.object_id = obj;
                per_object[obj].push_back(std::move(arc));
            } catch (const DegenerateArc&) {
                ++degenerate[obj];
            }
        }
    });

    const fs::path dir = out_dir(g, "sweeps");
    OutputLock lock(dir);
    CsvWriter longform({"object_id", "feature_id", "t", "mse"});
    CsvWriter arcs({"object_id", "feature_id", "delta_l", "transition_point", "max_slope_t", "max_slope", "flattest_t",
                    "density", "avg_presence"});
    std::size_t total = 0, skipped = 0;
    for (std::uint64_t obj = 0; obj < count; ++obj) {
        skipped += degenerate[obj];
        for (const auto& a : per_object[obj]) {
            ++total;
            const auto oid = std::to_string(a.object_id), fid = std::to_string(a.feature_id);
            for (std::size_t i = 0; i < a.t_grid.size(); ++i)
                longform.row({oid, fid, format_double(a.t_grid[i]), format_double(a.mse[i])});
            arcs.row({oid, fid, format_double(a.delta_l), format_double(a.transition_point), format_double(a.max_slope_t),
                      format_double(a.max_slope), format_double(a.flattest_t), format_double(a.density),
                      format_double(a.avg_presence)});
        }
    }
    longform.save(dir / "sweep.csv");
    arcs.save(dir / "arcs.csv");
    write_run_json(dir, "sweep", args,
                   {{"ckpt", ckpt_path.generic_string()}, {"manifest", o.manifest},
                    {"features_per_object", o.features_per_object}, {"grid_step", o.grid_step},
                    {"evaluator", o.evaluator}, {"objects", count}, {"topk", k}},
                   g, inputs, {{"arc_count", total}, {"degenerate_arcs_skipped", skipped}});
    out << "swept " << total << " ARCs over " << count << " objects (" << skipped << " degenerate skipped)\n";
}

// ---- analyze -----------------------------------------------------------------

struct AnalyzeOptions {
    std::string arcs;
    std::string sweep;
    std::size_t bins = 5;
    std::vector<std::size_t> thresholds = default_ablation_thresholds();
    std::string ckpts;
    std::size_t folds = 0;
    double prominence = 0.05;
    std::size_t min_feature_arcs = 5;
};

std::vector<ArcRecord> read_arcs(const fs::path& path) {
    const auto t = read_csv(path);
    std::vector<ArcRecord> arcs;
    const auto col = [&](const char* n) { return t.column(n); };
    const std::size_t c_obj = col("object_id"), c_feat = col("feature_id"), c_dl = col("delta_l"),
                      c_tp = col("transition_point"), c_mst = col("max_slope_t"), c_ms = col("max_slope"),
                      c_ft = col("flattest_t"), c_den = col("density"), c_pres = col("avg_presence");
    for (const auto& r : t.rows) {
        ArcRecord a;
        a.object_id = static_cast<std::uint64_t>(parse_double(r[c_obj], "object_id"));
        a.feature_id = static_cast<Index>(parse_double(r[c_feat], "feature_id"));
        a.delta_l = parse_double(r[c_dl], "delta_l");
        a.transition_point = parse_double(r[c_tp], "transition_point");
        a.max_slope_t = parse_double(r[c_mst], "max_slope_t");
        a.max_slope = parse_double(r[c_ms], "max_slope");
        a.flattest_t = parse_double(r[c_ft], "flattest_t");
        a.density = parse_double(r[c_den], "density");
        a.avg_presence = parse_double(r[c_pres], "avg_presence");
        arcs.push_back(std::move(a));
    }
    return arcs;
}

/// Attaches the sampled curves from a long-form sweep CSV; returns false if any ARC has no curve.
bool attach_curves(std::vector<ArcRecord>& arcs, const fs::path& path) {
    const auto t = read_csv(path);
    const std::size_t c_obj = t.column("object_id"), c_feat = t.column("feature_id"), c_t = t.column("t"),
                      c_mse = t.column("mse");
    std::map<std::pair<std::uint64_t, Index>, std::pair<std::vector<double>, std::vector<double>>> curves;
    for (const auto& r : t.rows) {
        auto& c = curves[{static_cast<std::uint64_t>(parse_double(r[c_obj], "object_id")),
                          static_cast<Index>(parse_double(r[c_feat], "feature_id"))}];
        c.first.push_back(parse_double(r[c_t], "t"));
        c.second.push_back(parse_double(r[c_mse], "mse"));
    }
    for (auto& a : arcs) {
        const auto it = curves.find({a.object_id, a.feature_id});
        if (it == curves.end()) return false;
        a.t_grid = it->second.first;
        a.mse = it->second.second;
        a.normalized_mse = normalize_arc(a.mse);
    }
    return true;
}

json vector_json(const std::vector<double>& v) {
    json j = json::array();
    for (double x : v) j.push_back(std::isfinite(x) ? json(x) : json(nullptr));
    return j;
}

/// KDE plus detected modes, or nullopt when the sample is degenerate.
std::optional<std::pair<KdeEstimate, std::vector<double>>> kde_with_modes(const std::vector<double>& xs,
                                                                          double prominence) {
    try {
        auto kde = gaussian_kde(xs);
        auto modes = detect_modes(kde, prominence);
        return std::make_pair(std::move(kde), std::move(modes));
    } catch (const DegenerateInput&) {
        return std::nullopt;
    }
}

json kde_summary(const std::optional<std::pair<KdeEstimate, std::vector<double>>>& k, std::size_t n) {
    json j;
    j["samples"] = n;
    if (k) {
        j["bandwidth"] = k->first.bandwidth;
        j["modes"] = vector_json(k->second);
    } else {
        j["bandwidth"] = nullptr;
        j["modes"] = json::array();
        j["degenerate"] = true;
    }
    return j;
}

double highest_mode(const KdeEstimate& kde, const std::vector<double>& modes) {
    double best = std::numeric_limits<double>::quiet_NaN(), best_d = -1.0;
    for (double m : modes) {
        const auto it = std::lower_bound(kde.grid.begin(), kde.grid.end(), m);
        const auto i = static_cast<std::size_t>(std::min<std::ptrdiff_t>(it - kde.grid.begin(),
                                                                          static_cast<std::ptrdiff_t>(kde.grid.size()) - 1));
        if (kde.density[i] > best_d) {
            best_d = kde.density[i];
            best = m;
        }
    }
    return best;
}

PlotSeries quantile_series(const std::string& name, std::span<const ArcRecord> arcs) {
    PlotSeries s;
    s.name = name;
    s.x = arcs.front().t_grid;
    for (std::size_t g = 0; g < s.x.size(); ++g) {
        std::vector<double> col;
        for (const auto& a : arcs) col.push_back(a.normalized_mse[g]);
        s.y.push_back(quantile(col, 0.5));
        s.y_low.push_back(quantile(col, 0.1));
        s.y_high.push_back(quantile(col, 0.9));
    }
    return s;
}

void run_analyze(AnalyzeOptions o, const Globals& g, const std::vector<std::string>& args, std::ostream& out,
                 bool plots_only) {
    if (o.bins < 1) throw ConfigError("--bins must be >= 1");
    auto arcs = read_arcs(o.arcs);
    if (arcs.empty()) throw InsufficientData("arcs file holds no ARCs: " + o.arcs);
    std::vector<fs::path> inputs{o.arcs};
    fs::path sweep_path = o.sweep.empty() ? fs::path(o.arcs).parent_path() / "sweep.csv" : fs::path(o.sweep);
    bool curves = false;
    if (fs::is_regular_file(sweep_path)) {
        curves = attach_curves(arcs, sweep_path);
        inputs.push_back(sweep_path);
    } else if (!o.sweep.empty()) {
        throw ConfigError("--sweep: file not found: " + o.sweep);
    }
    const auto groups = group_by_impact(arcs, o.bins);

    const fs::path dir = out_dir(g, "report");
    OutputLock lock(dir);

    std::vector<double> tps;
    for (const auto& a : arcs) tps.push_back(a.transition_point);
    const auto tp_all = kde_with_modes(tps, o.prominence);
    std::vector<std::optional<std::pair<KdeEstimate, std::vector<double>>>> tp_groups;
    std::vector<std::vector<double>> group_tps;
    for (const auto& grp : groups) {
        std::vector<double> xs;
        for (auto m : grp.members) xs.push_back(arcs[m].transition_point);
        tp_groups.push_back(kde_with_modes(xs, o.prominence));
        group_tps.push_back(std::move(xs));
    }
    std::vector<double> flats;
    for (const auto& a : arcs) flats.push_back(a.flattest_t);
    const auto flat_kde = kde_with_modes(flats, o.prominence);
    std::optional<std::pair<KdeEstimate, std::vector<double>>> inter_kde;
    std::vector<double> inter;
    if (curves) {
        inter = intermediate_values(arcs);
        inter_kde = kde_with_modes(inter, o.prominence);
    }

    // plots
    {
        PlotSpec spec{PlotKind::kde, "Transition point density", "transition point", "density", {}, dir / "transition_kde.svg"};
        if (tp_all) spec.series.push_back({"all", tp_all->first.grid, tp_all->first.density, {}, {}});
        for (std::size_t b = 0; b < groups.size(); ++b)
            if (tp_groups[b])
                spec.series.push_back({"impact bin " + std::to_string(b), tp_groups[b]->first.grid,
                                       tp_groups[b]->first.density, {}, {}});
        if (!spec.series.empty()) render_plot(spec);
    }
    if (flat_kde)
        render_plot({PlotKind::kde, "Flattest point density", "t", "density",
                     {{"all", flat_kde->first.grid, flat_kde->first.density, {}, {}}}, dir / "flattest_kde.svg"});
    if (inter_kde)
        render_plot({PlotKind::kde, "Intermediate normalized MSE density", "normalized MSE", "density",
                     {{"all", inter_kde->first.grid, inter_kde->first.density, {}, {}}}, dir / "intermediate_mse_kde.svg"});
    if (curves) {
        PlotSpec spec{PlotKind::quantile_band, "ARC quantiles (10/50/90)", "t", "normalized MSE", {}, dir / "arc_quantiles.svg"};
        spec.series.push_back(quantile_series("all", arcs));
        for (std::size_t b = 0; b < groups.size(); ++b)
            spec.series.push_back(quantile_series("impact bin " + std::to_string(b), gather(arcs, groups[b].members)));
        render_plot(spec);
    }
    {
        PlotSeries s{"arcs", {}, {}, {}, {}};
        for (const auto& a : arcs)
            if (a.delta_l > 0.0) {
                s.x.push_back(std::log(a.delta_l));
                s.y.push_back(a.transition_point);
            }
        if (!s.x.empty())
            render_plot({PlotKind::scatter, "Transition point vs log impact", "log delta L", "transition point", {s},
                         dir / "transition_vs_impact.svg"});
    }

    json extra = json::object();
    if (!plots_only) {
        // per-feature table
        std::map<Index, std::vector<const ArcRecord*>> by_feature;
        for (const auto& a : arcs) by_feature[a.feature_id].push_back(&a);
        CsvWriter fstats({"feature_id", "arc_count", "density", "avg_presence", "mean_delta_l", "mean_transition_point",
                          "transition_mode", "offset"});
        json feature_modes = json::array();
        for (const auto& [feature, list] : by_feature) {
            std::vector<double> den, pres, dl, tp;
            for (const auto* a : list) {
                den.push_back(a->density);
                pres.push_back(a->avg_presence);
                dl.push_back(a->delta_l);
                tp.push_back(a->transition_point);
            }
            double mode = std::numeric_limits<double>::quiet_NaN();
            if (list.size() >= o.min_feature_arcs)
                if (const auto k = kde_with_modes(tp, o.prominence); k && !k->second.empty())
                    mode = highest_mode(k->first, k->second);
            fstats.row({std::to_string(feature), std::to_string(list.size()), format_double(mean_of(den)),
                        format_double(mean_of(pres)), format_double(mean_of(dl)), format_double(mean_of(tp)),
                        format_double(mode), format_double(mode - 0.5)});
            if (std::isfinite(mode)) feature_modes.push_back({{"feature_id", feature}, {"mode", mode}, {"offset", mode - 0.5}});
        }
        fstats.save(dir / "feature_stats.csv");

        CsvWriter kde_csv({"series", "x", "density"});
        const auto dump_kde = [&](const std::string& name, const auto& k) {
            if (!k) return;
            for (std::size_t i = 0; i < k->first.grid.size(); ++i)
                kde_csv.row({name, format_double(k->first.grid[i]), format_double(k->first.density[i])});
        };
        dump_kde("all", tp_all);
        for (std::size_t b = 0; b < groups.size(); ++b) dump_kde("impact_bin_" + std::to_string(b), tp_groups[b]);
        kde_csv.save(dir / "transition_kde.csv");

        json modes;
        modes["transition_point"] = kde_summary(tp_all, tps.size());
        json gj = json::array();
        for (std::size_t b = 0; b < groups.size(); ++b) {
            json e = kde_summary(tp_groups[b], group_tps[b].size());
            e["bin"] = b;
            e["delta_l_lower"] = groups[b].lower;
            e["delta_l_upper"] = groups[b].upper;
            gj.push_back(e);
        }
        modes["transition_point_by_impact"] = gj;
        modes["flattest_t"] = kde_summary(flat_kde, flats.size());
        if (curves) {
            modes["intermediate_mse"] = kde_summary(inter_kde, inter.size());
            try {
                const auto z = slope_zscore(arcs);
                modes["max_slope_zscore"] = {{"mean", mean_of(z)}, {"median", quantile(z, 0.5)},
                                             {"q10", quantile(z, 0.1)}, {"q90", quantile(z, 0.9)}};
            } catch (const Error&) {
                modes["max_slope_zscore"] = nullptr;
            }
        }
        modes["feature_offsets"] = feature_modes;
        write_text_file(dir / "modes.json", modes.dump(2) + "\n");

        CsvWriter pr({"threshold", "feature_count", "variable", "partial_r2_mean", "partial_r2_std", "raw_r2_mean",
                      "raw_r2_std", "log_r2_mean", "log_r2_std"});
        try {
            for (const auto& s : transition_regression_pipeline(arcs, o.thresholds))
                for (std::size_t v = 0; v < s.partial_r2.size(); ++v)
                    pr.row({std::to_string(s.threshold), std::to_string(s.feature_count), s.partial_r2[v].name,
                            format_double(s.partial_r2[v].mean), format_double(s.partial_r2[v].stddev),
                            format_double(s.raw_r2[v].mean), format_double(s.raw_r2[v].stddev),
                            format_double(s.log_r2[v].mean), format_double(s.log_r2[v].stddev)});
            extra["regression"] = "ok";
        } catch (const InsufficientData& e) {
            extra["regression"] = e.what();
        }
        pr.save(dir / "partial_r2.csv");

        if (!o.ckpts.empty()) {
            auto paths = list_checkpoints(o.ckpts);
            if (o.folds > 0) {
                if (paths.size() < o.folds)
                    throw InsufficientData("--ckpts holds " + std::to_string(paths.size()) + " checkpoints, need " +
                                           std::to_string(o.folds));
                paths.resize(o.folds);
            }
            std::vector<SaeParams<double>> cks;
            for (const auto& p : paths) {
                cks.push_back(load_checkpoint(p).params.cast<double>());
                inputs.push_back(p);
            }
            const auto rep = universality(std::span<const SaeParams<double>>(cks));
            json u;
            u["fold_count"] = rep.fold_count;
            json names = json::array();
            for (const auto& p : paths) names.push_back(p.generic_string());
            u["checkpoints"] = names;
            json m = json::array();
            for (Index i = 0; i < rep.pairwise_scores.rows(); ++i) {
                json row = json::array();
                for (Index j = 0; j < rep.pairwise_scores.cols(); ++j) row.push_back(rep.pairwise_scores(i, j));
                m.push_back(row);
            }
            u["pairwise_scores"] = m;
            u["mean_universality"] = rep.mean_universality;
            write_text_file(dir / "universality.json", u.dump(2) + "\n");
        }
    }
    json thresholds = json::array();
    for (auto t : o.thresholds) thresholds.push_back(t);
    write_run_json(dir, plots_only ? "report" : "analyze", args,
                   {{"arcs", o.arcs}, {"sweep", curves ? sweep_path.generic_string() : ""}, {"bins", o.bins},
                    {"thresholds", thresholds}, {"ckpts", o.ckpts}, {"folds", o.folds}, {"prominence", o.prominence},
                    {"min_feature_arcs", o.min_feature_arcs}},
                   g, inputs, extra);
    out << (plots_only ? "report" : "analysis") << " of " << arcs.size() << " ARCs written to " << dir.string() << "\n";
}

// ---- universality ------------------------------------------------------------

void run_universality(const std::string& ckpts, std::size_t folds, const Globals& g,
                      const std::vector<std::string>& args, std::ostream& out) {
    auto paths = list_checkpoints(ckpts);
    if (paths.size() < folds)
        throw InsufficientData("--ckpts holds " + std::to_string(paths.size()) + " checkpoints, need --folds " +
                               std::to_string(folds));
    if (folds > 0) paths.resize(folds);
    std::vector<SaeParams<double>> cks;
    for (const auto& p : paths) cks.push_back(load_checkpoint(p).params.cast<double>());
    const auto rep = universality(std::span<const SaeParams<double>>(cks));
    const fs::path dir = out_dir(g, "universality");
    OutputLock lock(dir);
    json u;
    u["fold_count"] = rep.fold_count;
    json names = json::array();
    for (const auto& p : paths) names.push_back(p.generic_string());
    u["checkpoints"] = names;
    json m = json::array();
    for (Index i = 0; i < rep.pairwise_scores.rows(); ++i) {
        json row = json::array();
        for (Index j = 0; j < rep.pairwise_scores.cols(); ++j) row.push_back(rep.pairwise_scores(i, j));
        m.push_back(row);
    }
    u["pairwise_scores"] = m;
    u["mean_universality"] = rep.mean_universality;
    write_text_file(dir / "universality.json", u.dump(2) + "\n");
    write_run_json(dir, "universality", args, {{"ckpts", ckpts}, {"folds", folds}}, g, paths);
    out << "universality over " << rep.fold_count << " checkpoints: " << format_double(rep.mean_universality) << "\n";
}

// ---- toy ---------------------------------------------------------------------

void run_toy(const std::string& preset_name, const Globals& g, const std::vector<std::string>& args, std::ostream& out) {
    const ToyPreset preset = toy_preset(preset_name, g.seed);
    const fs::path dir = out_dir(g, "toy");
    OutputLock lock(dir);
    const auto art = build_toy(preset);
    write_toy_dataset(preset, art, dir);
    save_dictionary(art.world.dictionary, art.world.config, dir / "dictionary.json");
    save_toy_model(art.model, dir / "toy_model.json");
    CsvWriter hist({"step", "loss"});
    for (std::size_t i = 0; i < art.training.loss_history.size(); ++i)
        hist.row({std::to_string(i), format_double(art.training.loss_history[i])});
    hist.save(dir / "toy_training.csv");
    const SaeConfig& s = preset.sae;
    const json sae = {{"codebook", s.codebook_size}, {"k", s.topk},        {"beta", s.aux_coefficient},
                      {"lr", s.learning_rate},       {"epochs", s.epochs}, {"batch", s.batch_size},
                      {"aux-k", s.aux_topk},         {"dead-window", s.dead_window}};
    write_text_file(dir / "sae_config.json", sae.dump(2) + "\n");
    write_run_json(dir, "toy", args,
                   {{"preset", preset_name}, {"world", preset.world.to_json()}, {"objects", preset.objects},
                    {"latents_per_object", preset.latents_per_object}, {"toy_steps", art.training.steps}},
                   g, {});
    out << "toy preset " << preset_name << " written to " << dir.string() << "\n";
}

// ---- argument plumbing ---------------------------------------------------------

bool has_flag(const std::vector<std::string>& args, const std::string& flag) {
    return std::any_of(args.begin(), args.end(),
                       [&](const std::string& a) { return a == flag || a.rfind(flag + "=", 0) == 0; });
}

std::string json_scalar(const nlohmann::json& v, const std::string& key) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number_integer()) return v.dump();
    if (v.is_number()) return format_double(v.get<double>());
    throw ConfigError("--config: unsupported value for '" + key + "'");
}

/// Appends `--key value` for every config key not given explicitly.
std::vector<std::string> merge_config(std::vector<std::string> args) {
    std::string path;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
        if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
    }
    if (path.empty()) return args;
    if (!fs::is_regular_file(path)) throw ConfigError("--config: file not found: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("--config: invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("--config: top level must be an object");
    for (const auto& [key, value] : j.items()) {
        const std::string flag = "--" + key;
        if (key == "config" || has_flag(args, flag)) continue;
        if (value.is_boolean()) {
            if (value.get<bool>()) args.push_back(flag);
        } else if (value.is_array()) {
            args.push_back(flag);
            for (const auto& v : value) args.push_back(json_scalar(v, key));
        } else {
            args.push_back(flag);
            args.push_back(json_scalar(value, key));
        }
    }
    return args;
}

void report_error(std::ostream& err, bool as_json, const std::string& kind, const std::string& message, int code) {
    if (as_json)
        err << json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << "\n";
    else
        err << "latent-forge: " << message << "\n";
}

}  // namespace

int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
    const bool json_errors = has_flag(raw_args, "--json-errors");
    std::vector<std::string> args;
    try {
        args = merge_config(raw_args);
    } catch (const Error& e) {
        report_error(err, json_errors, e.kind(), e.what(), 1);
        return 1;
    }

    CLI::App app{"latent-forge: sparse-autoencoder feature analysis of 3D latent datasets", "latent-forge"};
    app.require_subcommand(1);
    Globals g;
    IngestOptions ingest;
    TrainCliOptions train_o;
    SweepOptions sweep;
    AnalyzeOptions analyze;
    std::string ckpts;
    std::size_t folds = 10;
    std::string preset = "recovery";

    auto* c_ingest = app.add_subcommand("ingest", "Convert raw f32 [mu | sigma] records into a dataset");
    c_ingest->add_option("--input", ingest.input, "Raw little-endian f32 file")->required()->check(CLI::ExistingFile);
    c_ingest->add_option("--m", ingest.m, "Latents per object")->required();
    c_ingest->add_option("--dim", ingest.dim, "Latent dimension")->required();
    c_ingest->add_option("--objects-per-file", ingest.objects_per_file, "Objects per data file")->capture_default_str();
    c_ingest->add_option("--seed-policy", ingest.seed_policy, "fixed or per-epoch")->capture_default_str();
    add_globals(c_ingest, g, "dataset");

    auto& sc = train_o.sae;
    auto* c_train = app.add_subcommand("train", "Train a BatchTopK sparse autoencoder");
    c_train->add_option("--manifest", train_o.manifest, "Dataset manifest.json")->required()->check(CLI::ExistingFile);
    c_train->add_option("--codebook", sc.codebook_size, "Codebook size n")->capture_default_str();
    c_train->add_option("--k", sc.topk, "Average active features per latent")->capture_default_str();
    c_train->add_option("--beta", sc.aux_coefficient, "Auxiliary loss coefficient")->capture_default_str();
    c_train->add_option("--lr", sc.learning_rate, "Adam learning rate")->capture_default_str();
    c_train->add_option("--epochs", sc.epochs, "Epochs")->capture_default_str();
    c_train->add_option("--batch", sc.batch_size, "Batch size")->capture_default_str();
    c_train->add_option("--aux-k", sc.aux_topk, "Dead features used by the auxiliary loss")->capture_default_str();
    c_train->add_option("--dead-window", sc.dead_window, "Steps without firing before a feature counts as dead")
        ->capture_default_str();
    c_train->add_option("--adam-beta1", sc.adam_beta1)->capture_default_str();
    c_train->add_option("--adam-beta2", sc.adam_beta2)->capture_default_str();
    c_train->add_option("--adam-eps", sc.adam_epsilon)->capture_default_str();
    c_train->add_option("--folds", train_o.folds, "Object folds (train on object_id % folds == fold-index)")
        ->capture_default_str();
    c_train->add_option("--fold-index", train_o.fold_index, "Fold to train on")->capture_default_str();
    c_train->add_option("--validation-rows", train_o.validation_rows, "Held-out rows for per-epoch metrics")
        ->capture_default_str();
    add_globals(c_train, g, "ckpt");

    auto* c_sweep = app.add_subcommand("sweep", "Ablation response curves for sampled features");
    c_sweep->add_option("--ckpt", sweep.ckpt, "Checkpoint file or training output directory")
        ->required()
        ->check(CLI::ExistingPath);
    c_sweep->add_option("--manifest", sweep.manifest, "Dataset manifest.json")->required()->check(CLI::ExistingFile);
    c_sweep->add_option("--features-per-object", sweep.features_per_object)->capture_default_str();
    c_sweep->add_option("--grid-step", sweep.grid_step, "Spacing of the t grid")->capture_default_str();
    c_sweep->add_option("--evaluator", sweep.evaluator, "latent-mse | toy:<path> | external:<cmd>")->capture_default_str();
    c_sweep->add_option("--objects", sweep.objects, "Sweep only the first N objects (0 = all)")->capture_default_str();
    c_sweep->add_option("--evaluator-timeout", sweep.evaluator_timeout, "Seconds per external evaluation")
        ->capture_default_str();
    add_globals(c_sweep, g, "sweeps");

    const auto add_analysis_options = [&](CLI::App* c) {
        c->add_option("--arcs", analyze.arcs, "arcs.csv from sweep")->required()->check(CLI::ExistingFile);
        c->add_option("--sweep", analyze.sweep, "Long-form sweep.csv (default: next to --arcs)");
        c->add_option("--bins", analyze.bins, "Impact quantile bins")->capture_default_str();
    };
    auto* c_analyze = app.add_subcommand("analyze", "Statistics, KDEs, regression and plots over ARCs");
    add_analysis_options(c_analyze);
    c_analyze->add_option("--thresholds", analyze.thresholds, "Minimum ablations per feature for the regression")
        ->capture_default_str();
    c_analyze->add_option("--ckpts", analyze.ckpts, "Directory of fold checkpoints for universality.json");
    c_analyze->add_option("--folds", analyze.folds, "Checkpoints to use from --ckpts (0 = all)")->capture_default_str();
    c_analyze->add_option("--prominence", analyze.prominence, "Mode prominence as a fraction of the peak")
        ->capture_default_str();
    c_analyze->add_option("--min-feature-arcs", analyze.min_feature_arcs, "ARCs needed for a per-feature mode")
        ->capture_default_str();
    add_globals(c_analyze, g, "report");

    auto* c_report = app.add_subcommand("report", "Render the SVG plots only");
    add_analysis_options(c_report);
    c_report->add_option("--prominence", analyze.prominence)->capture_default_str();
    add_globals(c_report, g, "report");

    auto* c_univ = app.add_subcommand("universality", "Pairwise Procrustes universality of fold checkpoints");
    c_univ->add_option("--ckpts", ckpts, "Directory of checkpoints (*.ckpt or */sae.ckpt)")->required();
    c_univ->add_option("--folds", folds, "Number of checkpoints to compare")->capture_default_str();
    add_globals(c_univ, g, "universality");

    auto* c_toy = app.add_subcommand("toy", "Generate a toy world, toy model and dataset");
    c_toy->add_option("--preset", preset, "recovery or dynamics")->capture_default_str();
    add_globals(c_toy, g, "toy");

    app.add_flag("--json-errors", g.json_errors, "Print errors as JSON on stderr");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        report_error(err, json_errors, "UsageError", e.what(), 1);
        return 1;
    }

    try {
        if (c_ingest->parsed())
            run_ingest(ingest, g, raw_args, out);
        else if (c_train->parsed())
            run_train(train_o, g, raw_args, out);
        else if (c_sweep->parsed())
            run_sweep(sweep, g, raw_args, out);
        else if (c_analyze->parsed())
            run_analyze(analyze, g, raw_args, out, false);
        else if (c_report->parsed())
            run_analyze(analyze, g, raw_args, out, true);
        else if (c_univ->parsed())
            run_universality(ckpts, folds, g, raw_args, out);
        else if (c_toy->parsed())
            run_toy(preset, g, raw_args, out);
    } catch (const Error& e) {
        const int code = e.error_class() == ErrorClass::validation ? 1 : 2;
        report_error(err, json_errors, e.kind(), e.what(), code);
        return code;
    } catch (const std::exception& e) {
        report_error(err, json_errors, "RuntimeError", e.what(), 2);
        return 2;
    }
    return 0;
}

int run(int argc, const char* const* argv) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args);
}

}  // namespace latent_forge::cli
