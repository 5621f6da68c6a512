#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "cli.hpp"
#include "support.hpp"

using namespace lf_test;
namespace fs = std::filesystem;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result invoke(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = latent_forge::cli::run(args, out, err);
    return {code, out.str(), err.str()};
}

void write_raw(const fs::path& path, const std::vector<float>& values) {
    const auto bytes = std::as_bytes(std::span(values));
    write_file_bytes(path, std::vector<std::byte>(bytes.begin(), bytes.end()));
}

/// Small dataset whose latents come from a planted world: d = 4, 6 objects of 40 latents.
fs::path small_dataset(const TempDir& dir) {
    const auto w = generate_world({8, 4, 8, 2.0, PresenceDistribution::uniform01, {}, 3});
    std::vector<std::vector<GaussianLatentRecord>> objs(6);
    for (std::size_t o = 0; o < objs.size(); ++o) {
        const auto b = sample_world(w, o * 40, 40);
        for (Index i = 0; i < 40; ++i)
            objs[o].push_back({b.latents.row(i).transpose().cast<float>(), Vector<float>::Zero(4)});
    }
    write_dataset(objs, dir / "data");
    return dir / "data" / "manifest.json";
}

std::vector<std::string> small_train(const fs::path& manifest, const fs::path& out) {
    return {"train",  "--manifest", manifest.string(), "--codebook", "8",  "--k",          "2",
            "--batch", "64",        "--epochs",        "2",          "--aux-k", "4", "--out", out.string()};
}

}  // namespace

TEST_CASE("help exits 0 on every subcommand", "[cli]") {
    CHECK(invoke({"--help"}).code == 0);
    for (const char* sub : {"ingest", "train", "sweep", "analyze", "report", "universality", "toy"}) {
        const auto r = invoke({sub, "--help"});
        CHECK(r.code == 0);
        CHECK(r.out.find("--out") != std::string::npos);
    }
}

TEST_CASE("usage errors exit 1", "[cli]") {
    CHECK(invoke({}).code == 1);
    CHECK(invoke({"bogus"}).code == 1);
    CHECK(invoke({"toy", "--no-such-flag"}).code == 1);
    SECTION("missing manifest names the flag") {
        const auto r = invoke({"train"});
        CHECK(r.code == 1);
        CHECK(r.err.find("--manifest") != std::string::npos);
        const auto missing = invoke({"train", "--manifest", "/nonexistent/manifest.json"});
        CHECK(missing.code == 1);
        CHECK(missing.err.find("--manifest") != std::string::npos);
    }
    SECTION("json errors") {
        const auto r = invoke({"train", "--json-errors"});
        CHECK(r.code == 1);
        const auto j = nlohmann::json::parse(r.err);
        CHECK(j.at("exit_code") == 1);
        CHECK(j.at("message").get<std::string>().find("--manifest") != std::string::npos);
    }
    SECTION("unknown preset is a validation error") {
        TempDir dir;
        CHECK(invoke({"toy", "--preset", "nope", "--out", (dir / "t").string()}).code == 1);
    }
}

TEST_CASE("ingest converts raw records without touching the input", "[cli]") {
    TempDir dir;
    Rng rng(1);
    std::vector<float> raw;
    for (int o = 0; o < 3; ++o)
        for (int i = 0; i < 5; ++i) {
            for (int j = 0; j < 2; ++j) raw.push_back(static_cast<float>(rng.normal()));
            for (int j = 0; j < 2; ++j) raw.push_back(static_cast<float>(std::abs(rng.normal())));
        }
    write_raw(dir / "raw.bin", raw);
    const auto before = hash_file(dir / "raw.bin");
    const auto r = invoke({"ingest", "--input", (dir / "raw.bin").string(), "--m", "5", "--dim", "2", "--out",
                           (dir / "ds").string()});
    REQUIRE(r.code == 0);
    CHECK(hash_file(dir / "raw.bin") == before);
    const auto h = open_dataset(dir / "ds" / "manifest.json");
    CHECK(h.object_count() == 3);
    const auto rec = h.record(2, 4);
    CHECK(rec.mu[1] == raw[(2 * 5 + 4) * 4 + 1]);
    CHECK(rec.sigma[0] == raw[(2 * 5 + 4) * 4 + 2]);
    const auto run = nlohmann::json::parse(read_text_file(dir / "ds" / "run.json"));
    CHECK(run.at("command") == "ingest");
    CHECK(run.at("artifacts").contains("manifest.json"));
    CHECK_FALSE(fs::exists(dir / "ds" / ".latent-forge.lock"));

    SECTION("size mismatch") {
        write_raw(dir / "short.bin", {1.0f, 2.0f, 3.0f});
        CHECK(invoke({"ingest", "--input", (dir / "short.bin").string(), "--m", "5", "--dim", "2", "--out",
                      (dir / "ds2").string()})
                  .code == 1);
    }
}

TEST_CASE("a locked output directory is refused", "[cli]") {
    TempDir dir;
    const auto manifest = small_dataset(dir);
    fs::create_directories(dir / "ck");
    write_text_file(dir / "ck" / ".latent-forge.lock", "");
    const auto r = invoke(small_train(manifest, dir / "ck"));
    CHECK(r.code == 2);
    CHECK(r.err.find("locked") != std::string::npos);
}

TEST_CASE("train, sweep, analyze and universality", "[cli]") {
    TempDir dir;
    const auto manifest = small_dataset(dir);
    REQUIRE(invoke(small_train(manifest, dir / "ck")).code == 0);
    CHECK(fs::exists(dir / "ck" / "sae.ckpt"));
    const auto metrics = read_csv(dir / "ck" / "metrics.csv");
    CHECK(metrics.header == std::vector<std::string>{"step", "recon", "aux", "dead_count"});
    CHECK(metrics.rows.size() == 8);

    SECTION("config overlay sits under explicit flags") {
        write_text_file(dir / "cfg.json", R"({"codebook": 12, "k": 3, "epochs": 1, "batch": 64})");
        auto args = small_train(manifest, dir / "ck2");
        args.push_back("--config");
        args.push_back((dir / "cfg.json").string());
        REQUIRE(invoke(args).code == 0);
        const auto run = nlohmann::json::parse(read_text_file(dir / "ck2" / "run.json"));
        CHECK(run.at("config").at("codebook_size") == 8);
        CHECK(run.at("config").at("topk") == 2);
        write_text_file(dir / "bad.json", R"({"no-such-option": 1})");
        CHECK(invoke({"train", "--config", (dir / "bad.json").string()}).code == 1);
    }

    SECTION("sweep is deterministic across thread counts and analyze consumes it") {
        const auto sweep = [&](const std::string& out, const std::string& threads) {
            return invoke({"sweep", "--ckpt", (dir / "ck").string(), "--manifest", manifest.string(),
                           "--features-per-object", "3", "--evaluator", "latent-mse", "--threads", threads, "--out",
                           (dir / out).string()});
        };
        REQUIRE(sweep("s1", "1").code == 0);
        REQUIRE(sweep("s3", "3").code == 0);
        CHECK(read_text_file(dir / "s1" / "arcs.csv") == read_text_file(dir / "s3" / "arcs.csv"));
        const auto arcs = read_csv(dir / "s1" / "arcs.csv");
        CHECK(arcs.header == std::vector<std::string>{"object_id", "feature_id", "delta_l", "transition_point",
                                                      "max_slope_t", "max_slope", "flattest_t", "density",
                                                      "avg_presence"});
        CHECK(arcs.rows.size() <= 18);
        CHECK(arcs.rows.size() >= 12);
        const auto longform = read_csv(dir / "s1" / "sweep.csv");
        CHECK(longform.header == std::vector<std::string>{"object_id", "feature_id", "t", "mse"});
        CHECK(longform.rows.size() == 21 * arcs.rows.size());

        auto second = small_train(manifest, dir / "ckb");
        second.insert(second.end(), {"--seed", "1"});
        REQUIRE(invoke(second).code == 0);
        const auto r = invoke({"analyze", "--arcs", (dir / "s1" / "arcs.csv").string(), "--bins", "3", "--thresholds",
                               "1", "--ckpts", dir.path().string(), "--out", (dir / "report").string()});
        INFO(r.err);
        REQUIRE(r.code == 0);
        for (const char* f : {"feature_stats.csv", "transition_kde.csv", "modes.json", "partial_r2.csv",
                              "transition_kde.svg", "arc_quantiles.svg", "run.json"})
            CHECK(fs::exists(dir / "report" / f));
        const auto modes = nlohmann::json::parse(read_text_file(dir / "report" / "modes.json"));
        CHECK(modes.at("transition_point_by_impact").size() == 3);

        REQUIRE(invoke({"report", "--arcs", (dir / "s1" / "arcs.csv").string(), "--out", (dir / "plots").string()})
                    .code == 0);
        CHECK(fs::exists(dir / "plots" / "transition_kde.svg"));
        CHECK_FALSE(fs::exists(dir / "plots" / "partial_r2.csv"));
    }

    SECTION("fold checkpoints feed universality") {
        for (int f = 0; f < 2; ++f) {
            auto args = small_train(manifest, dir / "folds" / ("fold" + std::to_string(f)));
            args.insert(args.end(), {"--folds", "2", "--fold-index", std::to_string(f)});
            REQUIRE(invoke(args).code == 0);
        }
        const auto r = invoke({"universality", "--ckpts", (dir / "folds").string(), "--folds", "2", "--out",
                               (dir / "u").string()});
        REQUIRE(r.code == 0);
        const auto u = nlohmann::json::parse(read_text_file(dir / "u" / "universality.json"));
        CHECK(u.at("fold_count") == 2);
        const double s01 = u.at("pairwise_scores")[0][1], s10 = u.at("pairwise_scores")[1][0];
        CHECK(std::abs(s01 - s10) <= 1e-9);
        CHECK(invoke({"universality", "--ckpts", (dir / "folds").string(), "--folds", "3", "--out",
                      (dir / "u3").string()})
                  .code == 1);
    }

    SECTION("bad evaluator and external evaluator") {
        CHECK(invoke({"sweep", "--ckpt", (dir / "ck").string(), "--manifest", manifest.string(), "--evaluator", "what",
                      "--out", (dir / "sx").string()})
                  .code == 1);
        write_text_file(dir / "eval.sh", "#!/bin/sh\nprintf '{\"mse\": 1.5}' > \"$(dirname \"$1\")/reply.json\"\n");
        fs::permissions(dir / "eval.sh", fs::perms::owner_all);
        // a constant external loss makes every ARC degenerate
        const auto r = invoke({"sweep", "--ckpt", (dir / "ck").string(), "--manifest", manifest.string(),
                               "--features-per-object", "1", "--objects", "2", "--evaluator",
                               "external:" + (dir / "eval.sh").string(), "--out", (dir / "se").string()});
        REQUIRE(r.code == 0);
        const auto run = nlohmann::json::parse(read_text_file(dir / "se" / "run.json"));
        CHECK(run.at("degenerate_arcs_skipped") == 2);
        CHECK(run.at("arc_count") == 0);
    }
}

TEST_CASE("toy subcommand writes its artifacts", "[cli]") {
    TempDir dir;
    const auto r = invoke({"toy", "--preset", "dynamics", "--seed", "2", "--out", (dir / "toy").string()});
    INFO(r.err);
    REQUIRE(r.code == 0);
    for (const char* f : {"manifest.json", "dictionary.json", "toy_model.json", "sae_config.json", "toy_training.csv",
                          "run.json"})
        CHECK(fs::exists(dir / "toy" / f));
    const auto h = open_dataset(dir / "toy" / "manifest.json");
    CHECK(h.latent_dim() == 8);
    CHECK(h.object_count() == 100);
    const auto model = load_toy_model(dir / "toy" / "toy_model.json");
    CHECK(model.latent_dim() == 8);
    const auto cfg = nlohmann::json::parse(read_text_file(dir / "toy" / "sae_config.json"));
    CHECK(cfg.at("codebook") == 32);
}
