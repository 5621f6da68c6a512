#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "support.hpp"

using namespace lf_test;
using Catch::Approx;

namespace {

ToyModel random_toy(Rng& rng, Index m, Index d, Index n) {
    ToyModel t{random_matrix(rng, n, m), random_matrix(rng, d, n), random_vector(rng, d, 0.3), random_vector(rng, n, 0.1)};
    return t;
}

double max_relative(const Matrix<double>& a, const Matrix<double>& b, double floor = 1e-6) {
    double worst = 0.0;
    for (Index i = 0; i < a.size(); ++i) worst = std::max(worst, oracles::relative_error(a.data()[i], b.data()[i], floor));
    return worst;
}

}  // namespace

TEST_CASE("generate_world examples", "[toy]") {
    SECTION("zero sparsity gives zero latents") {
        const auto w = generate_world({8, 4, 8, 0.0, PresenceDistribution::uniform01, {}, 1});
        CHECK(sample_world(w, 0, 100).latents.isZero(0.0));
    }
    SECTION("single always-active constant feature") {
        const auto w = generate_world({1, 5, 1, 1.0, PresenceDistribution::constant1, {}, 2});
        const auto b = sample_world(w, 0, 20);
        for (Index r = 0; r < 20; ++r) CHECK(b.latents.row(r) == w.dictionary.e_true.row(0));
    }
    SECTION("unit rows, construction identity and determinism") {
        const ToyConfig c{32, 16, 32, 3.0, PresenceDistribution::uniform01, {}, 3};
        const auto w = generate_world(c);
        for (Index i = 0; i < 32; ++i) CHECK(std::abs(w.dictionary.e_true.row(i).norm() - 1.0) <= 1e-6);
        const auto b = sample_world(w, 10, 50);
        RowMatrix<double> oracle = RowMatrix<double>::Zero(50, 16);
        for (Index r = 0; r < 50; ++r)
            for (Index i = 0; i < 32; ++i) oracle.row(r) += b.presences(r, i) * w.dictionary.e_true.row(i);
        CHECK((b.latents - oracle).cwiseAbs().maxCoeff() <= 1e-12);
        CHECK(b.inputs == b.presences);
        const auto again = sample_world(generate_world(c), 10, 50);
        CHECK(again.latents == b.latents);
        CHECK(generate_world(c).dictionary.e_true == w.dictionary.e_true);
        CHECK(sample_world(w, 20, 1).presences.row(0) == b.presences.row(10));
    }
    SECTION("config validation") {
        CHECK_THROWS_AS(generate_world({8, 4, 8, 9.0, PresenceDistribution::uniform01, {}, 0}), ConfigError);
        CHECK_THROWS_AS(generate_world({8, 4, 8, 1.0, PresenceDistribution::uniform01, {1.0}, 0}), ConfigError);
        CHECK_THROWS_AS(parse_presence_distribution("gamma"), ConfigError);
        CHECK_THROWS_AS(toy_preset("other", 0), ConfigError);
    }
}

TEST_CASE("activation rate matches the binomial rate", "[toy]") {
    const auto w = generate_world({16, 8, 16, 3.0, PresenceDistribution::constant1, {}, 4});
    const auto b = sample_world(w, 0, 100000);
    const double trials = 100000.0 * 16.0, p = 3.0 / 16.0;
    const double hits = (b.presences.array() > 0.0).cast<double>().sum();
    CHECK(std::abs(hits / trials - p) <= 3.0 * std::sqrt(p * (1 - p) / trials));
}

TEST_CASE("toy_forward", "[toy]") {
    Rng rng(5);
    SECTION("zero input and bias") {
        ToyModel m = random_toy(rng, 3, 4, 5);
        m.c.setZero();
        CHECK(toy_forward(m, Vector<double>::Zero(3)).z.isZero(0.0));
    }
    SECTION("identity presence map passes nonnegative inputs") {
        ToyModel m = random_toy(rng, 4, 3, 4);
        m.a.setIdentity();
        const Vector<double> x = random_vector(rng, 4).cwiseAbs();
        CHECK(toy_forward(m, x).alpha == x);
    }
    SECTION("dense oracle") {
        for (int trial = 0; trial < 20; ++trial) {
            const ToyModel m = random_toy(rng, 5, 3, 7);
            const Vector<double> x = random_vector(rng, 5);
            const auto f = toy_forward(m, x);
            for (Index j = 0; j < 7; ++j) {
                double s = 0;
                for (Index i = 0; i < 5; ++i) s += m.a(j, i) * x[i];
                CHECK(f.alpha[j] == Approx(std::max(s, 0.0)).margin(1e-12));
            }
            for (Index r = 0; r < 3; ++r) {
                double s = m.c[r];
                for (Index j = 0; j < 7; ++j) s += m.b(r, j) * f.alpha[j];
                CHECK(f.z[r] == Approx(s).margin(1e-12));
            }
            RowMatrix<double> xs(1, 5);
            xs.row(0) = x.transpose();
            CHECK((toy_latents(m, xs).row(0).transpose() - f.z).norm() <= 1e-12);
        }
        CHECK_THROWS_AS(toy_forward(random_toy(rng, 5, 3, 7), Vector<double>::Zero(4)), ShapeError);
    }
}

TEST_CASE("grad_decomposition examples", "[toy]") {
    Rng rng(6);
    SECTION("inactive presences give a zero identity term for B") {
        ToyModel m = random_toy(rng, 3, 3, 4);
        m.a = -m.a.cwiseAbs();
        const Vector<double> x = random_vector(rng, 3).cwiseAbs() + Vector<double>::Constant(3, 0.1);
        const auto g = grad_decomposition(m, x, random_vector(rng, 3));
        CHECK(g.identity_term.b.isZero(0.0));
        CHECK(g.presence_term.a.isZero(0.0));
    }
    SECTION("total against central differences, m=d=3, n_true=4") {
        for (int trial = 0; trial < 20; ++trial) {
            const ToyModel m = random_toy(rng, 3, 3, 4);
            const Vector<double> x = random_vector(rng, 3), up = random_vector(rng, 3);
            const auto g = grad_decomposition(m, x, up);
            CHECK(max_relative(g.total.a, oracles::toy_fd(m, &ToyModel::a, x, up)) < 1e-6);
            CHECK(max_relative(g.total.b, oracles::toy_fd(m, &ToyModel::b, x, up)) < 1e-6);
            CHECK(max_relative(g.total.c, oracles::toy_fd(m, &ToyModel::c, x, up)) < 1e-6);
        }
    }
    SECTION("doubling the active presences doubles the identity term") {
        const ToyModel m = random_toy(rng, 3, 3, 4);
        ToyModel twice = m;
        twice.a *= 2.0;
        const Vector<double> x = random_vector(rng, 3), up = random_vector(rng, 3);
        CHECK(grad_decomposition(twice, x, up).identity_term.b == 2.0 * grad_decomposition(m, x, up).identity_term.b);
    }
}

TEST_CASE("property: decomposition terms are exact and match frozen differences", "[toy][property]") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const Index m = random_int(rng, 1, 5), d = random_int(rng, 1, 5), n = random_int(rng, 1, 6);
        const ToyModel model = random_toy(rng, m, d, n);
        const Vector<double> x = random_vector(rng, m), up = random_vector(rng, d);
        const auto g = grad_decomposition(model, x, up);
        CHECK(max_abs(g.presence_term.a + g.identity_term.a - g.total.a) <= 1e-10);
        CHECK(max_abs(g.presence_term.b + g.identity_term.b - g.total.b) <= 1e-10);
        CHECK(g.presence_term.b.isZero(0.0));
        CHECK(g.identity_term.a.isZero(0.0));
        // the presence term is the A-gradient with B frozen, the identity term the B-gradient with A frozen
        CHECK(max_relative(g.presence_term.a, oracles::toy_fd(model, &ToyModel::a, x, up)) < 1e-6);
        CHECK(max_relative(g.identity_term.b, oracles::toy_fd(model, &ToyModel::b, x, up)) < 1e-6);
    }
}

TEST_CASE("toy_loss gradient and reference value", "[toy]") {
    Rng rng(8);
    const auto w = generate_world({5, 3, 5, 2.0, PresenceDistribution::uniform01, {1, 2, 0.5, 1, 3}, 8});
    const auto data = sample_world(w, 0, 40);
    const auto imp = resolved_importance(w.config);
    const ToyModel model = random_toy(rng, 5, 3, 5);
    ToyGradients g;
    const double loss = toy_loss(model, data, imp, &g);
    CHECK(loss == Approx(oracles::toy_loss_reference(model, data, imp)).epsilon(1e-12));
    const double h = 1e-6;
    const auto fd = [&](auto member) {
        ToyModel q = model;
        auto& t = q.*member;
        Matrix<double> out(t.rows(), t.cols());
        for (Index i = 0; i < t.size(); ++i) {
            const double orig = t.data()[i];
            t.data()[i] = orig + h;
            const double up = oracles::toy_loss_reference(q, data, imp);
            t.data()[i] = orig - h;
            const double down = oracles::toy_loss_reference(q, data, imp);
            t.data()[i] = orig;
            out.data()[i] = (up - down) / (2 * h);
        }
        return out;
    };
    CHECK(max_relative(g.a, fd(&ToyModel::a), 1e-4) < 1e-5);
    CHECK(max_relative(g.b, fd(&ToyModel::b), 1e-4) < 1e-5);
    CHECK(max_relative(g.c, fd(&ToyModel::c), 1e-4) < 1e-5);
    CHECK(max_relative(g.readout_bias, fd(&ToyModel::readout_bias), 1e-4) < 1e-5);
}

TEST_CASE("train_toy_model", "[toy]") {
    SECTION("capacity: n_true <= d reaches a small loss") {
        const auto w = generate_world({4, 4, 4, 1.0, PresenceDistribution::uniform01, {}, 9});
        ToyTrainConfig tc;
        tc.samples = 1024;
        const auto r = train_toy_model(w, tc);
        CHECK(r.loss_history.back() <= 1e-3);
        CHECK(r.loss_history.back() < r.loss_history.front());
        CHECK(r.model.all_finite());
    }
    SECTION("n_true = 2d shows interference") {
        const auto w = generate_world({8, 4, 8, 1.0, PresenceDistribution::uniform01, {}, 10});
        ToyTrainConfig tc;
        tc.samples = 1024;
        tc.max_steps = 2000;
        const auto r = train_toy_model(w, tc);
        const Matrix<double> cos = cosine_matrix(toy_feature_directions(r.model), toy_feature_directions(r.model));
        double worst = 0.0;
        for (Index i = 0; i < 8; ++i)
            for (Index j = i + 1; j < 8; ++j) worst = std::max(worst, std::abs(cos(i, j)));
        CHECK(worst > 0.05);
    }
    SECTION("zero steps return the initial model") {
        const auto w = generate_world({4, 2, 4, 1.0, PresenceDistribution::uniform01, {}, 11});
        ToyTrainConfig tc;
        tc.max_steps = 0;
        const auto r = train_toy_model(w, tc);
        const auto init = init_toy_model(w.config);
        CHECK(r.model.a == init.a);
        CHECK(r.model.b == init.b);
        CHECK(r.steps == 0);
    }
    SECTION("divergence") {
        const auto w = generate_world({4, 2, 4, 1.0, PresenceDistribution::uniform01, {}, 12});
        ToyModel bad = init_toy_model(w.config);
        bad.b(0, 0) = std::numeric_limits<double>::infinity();
        CHECK_THROWS_AS(train_toy_model(w, {}, bad), DivergenceError);
    }
}

TEST_CASE("sae_recovery_score", "[toy]") {
    Rng rng(13);
    const auto w = generate_world({32, 16, 32, 3.0, PresenceDistribution::uniform01, {}, 13});
    SECTION("planted identity padded with noise") {
        SaeParams<double> sae = random_sae(rng, 16, 64);
        for (Index i = 0; i < 32; ++i) sae.w_dec.col(2 * i) = w.dictionary.e_true.row(i).transpose();
        const auto s = sae_recovery_score(sae, w.dictionary);
        CHECK(s.mean_matched_cosine == Approx(1.0).margin(1e-10));
        CHECK(s.matched_fraction == 1.0);
        for (Index i = 0; i < 32; ++i) CHECK(s.assignment[static_cast<std::size_t>(i)] == 2 * i);
    }
    SECTION("random decoder is far below the threshold") {
        const auto minimal = random_sae(rng, 16, 32);
        const auto s = sae_recovery_score(minimal, w.dictionary);
        CHECK(s.mean_matched_cosine < 0.5);
        CHECK(s.matched_fraction < 0.1);
        // per-row best cosine bounds any one-to-one matching
        const Matrix<double> cos = cosine_matrix(w.dictionary.e_true, minimal.w_dec.transpose());
        CHECK(s.mean_matched_cosine <= cos.rowwise().maxCoeff().mean() + 1e-12);
        CHECK(sae_recovery_score(random_sae(rng, 16, 64), w.dictionary).matched_fraction < 0.1);
    }
    SECTION("smaller codebooks leave truth rows unmatched") {
        SaeParams<double> sae = random_sae(rng, 16, 8);
        for (Index i = 0; i < 8; ++i) sae.w_dec.col(i) = w.dictionary.e_true.row(3 * i).transpose();
        const auto s = sae_recovery_score(sae, w.dictionary);
        CHECK(s.matched_fraction == 0.25);
        CHECK(std::count(s.assignment.begin(), s.assignment.end(), Index{-1}) == 24);
    }
    CHECK_THROWS_AS(sae_recovery_score(random_sae(rng, 8, 64), w.dictionary), ShapeError);
}

TEST_CASE("property: recovery does not drop as the codebook grows", "[toy][property]") {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        TempDir dir("recovery_mono");
        ToyPreset preset = toy_preset("recovery", seed);
        preset.world = {8, 8, 8, 2.0, PresenceDistribution::uniform01, {}, seed};
        preset.objects = 20;
        preset.latents_per_object = 500;
        preset.training.max_steps = 0;
        const auto art = build_toy(preset);
        write_toy_dataset(preset, art, dir.path());
        const auto h = open_dataset(dir.path() / "manifest.json");
        double last = -1.0;
        for (std::int64_t n : {4, 8, 16}) {
            SaeConfig c = recovery_sae_config(seed);
            c.input_dim = 8;
            c.codebook_size = n;
            c.topk = 2;
            c.aux_topk = std::min<std::int64_t>(c.aux_topk, n);
            c.batch_size = 256;
            c.epochs = 40;
            c.learning_rate = 3e-3;
            const auto ck = train(c, h);
            const double frac = sae_recovery_score(ck.params.cast<double>(), art.world.dictionary).matched_fraction;
            CHECK(frac >= last);
            last = frac;
        }
    }
}

TEST_CASE("toy decoder evaluator", "[toy]") {
    Rng rng(14);
    const auto w = generate_world({6, 4, 6, 2.0, PresenceDistribution::uniform01, {}, 14});
    ToyModel m = planted_toy_model(w);
    m.readout_bias.setConstant(1.0);
    const RowMatrix<double> ref = sample_world(w, 0, 10).latents;
    const ToyDecoderEvaluator eval(m, ref);
    CHECK(eval.evaluate(ref) == 0.0);
    CHECK(eval.evaluate(ref) == eval.evaluate(ref));
    const auto perturbed = [&](double delta) {
        RowMatrix<double> z = ref;
        z(0, 0) += delta;
        return eval.evaluate(z);
    };
    const double delta = 1e-3;
    CHECK(perturbed(delta) / perturbed(delta / 2) == Approx(4.0).epsilon(1e-6));
    CHECK_THROWS_AS(eval.evaluate(ref.topRows(3)), ShapeError);
    CHECK(eval.name() == "toy");
}

TEST_CASE("toy serialization round trips", "[toy]") {
    Rng rng(15);
    TempDir dir;
    const ToyModel m = random_toy(rng, 4, 3, 5);
    save_toy_model(m, dir / "toy.json");
    const ToyModel back = load_toy_model(dir / "toy.json");
    CHECK(back.a == m.a);
    CHECK(back.b == m.b);
    CHECK(back.c == m.c);
    CHECK(back.readout_bias == m.readout_bias);

    const auto w = generate_world({4, 3, 5, 1.0, PresenceDistribution::uniform01, {}, 15});
    save_dictionary(w.dictionary, w.config, dir / "dict.json");
    CHECK(load_dictionary(dir / "dict.json").e_true == w.dictionary.e_true);

    write_text_file(dir / "bad.json", "{\"kind\": \"other\"}");
    CHECK_THROWS_AS(load_toy_model(dir / "bad.json"), FormatError);
    CHECK_THROWS_AS(load_toy_model(dir / "missing.json"), IoError);
    CHECK(ToyConfig::from_json(nlohmann::json::parse(w.config.to_json().dump())).to_json() == w.config.to_json());
}

TEST_CASE("toy presets and dataset export", "[toy]") {
    TempDir dir;
    ToyPreset p = toy_preset("dynamics", 3);
    p.objects = 3;
    p.latents_per_object = 7;
    p.training.max_steps = 5;
    const auto art = build_toy(p);
    const auto manifest = write_toy_dataset(p, art, dir.path());
    CHECK(manifest.object_count == 3);
    CHECK(manifest.latent_dim == 8);
    const auto h = open_dataset(dir.path() / "manifest.json");
    const auto batch = sample_world(art.world, p.training.samples + 7, 7);
    const RowMatrix<float> expected = toy_latents(art.model, batch.inputs).cast<float>();
    CHECK(h.object_means<float>(1) == expected);
    CHECK(h.sample_object<float>(1, 99) == expected);
    const auto rec = toy_preset("recovery", 0);
    CHECK(rec.objects * rec.latents_per_object == 200000);
    CHECK(rec.sae.codebook_size == 64);
    CHECK(rec.sae.topk == 3);
}
