#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "support.hpp"

using namespace lf_test;
using Catch::Approx;

TEST_CASE("init_params: unit columns, tied encoder, zero biases, deterministic", "[sae]") {
    SaeConfig c;
    c.input_dim = 2;
    c.codebook_size = 4;
    c.topk = 1;
    c.aux_topk = 2;
    const auto p = init_params<double>(c, 3);
    for (Index j = 0; j < 4; ++j) CHECK(std::abs(p.w_dec.col(j).norm() - 1.0) < 1e-7);
    CHECK(p.w_enc == p.w_dec.transpose());
    CHECK(p.b_enc.isZero(0));
    CHECK(p.b_dec.isZero(0));
    const auto q = init_params<double>(c, 3);
    CHECK(q.w_dec == p.w_dec);
    CHECK(init_params<double>(c, 4).w_dec != p.w_dec);
}

TEST_CASE("config validation", "[sae]") {
    SaeConfig c;
    CHECK_NOTHROW(c.validate());  // library defaults
    c.topk = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.topk = 600;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = SaeConfig{};
    c.aux_coefficient = -1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = SaeConfig{};
    c.aux_topk = 513;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = SaeConfig{};
    CHECK(SaeConfig::from_json(nlohmann::json::parse(c.to_json().dump())).to_json() == c.to_json());
}

TEST_CASE("encode_batch edge cases", "[sae]") {
    SECTION("zero input and zero bias select nothing") {
        auto p = SaeParams<double>::zeros(3, 5);
        p.w_enc.setRandom();
        const Matrix<double> z = Matrix<double>::Zero(4, 3);
        const auto a = encode_batch(p, z, 2);
        CHECK(a.nonzeros() == 0);
        CHECK(a.values.isZero(0));
    }
    SECTION("worked example keeps the two largest entries") {
        Matrix<double> pre(2, 2);
        pre << 3, 1, 2, 0.5;
        const auto a = batch_topk_select(pre, 2);
        CHECK(a.nonzeros() == 2);
        CHECK(a.selected(0, 0));
        CHECK(a.selected(1, 0));
        CHECK(a.values(0, 0) == 3);
        CHECK(a.values(1, 0) == 2);
        CHECK(a.values(0, 1) == 0);
    }
    SECTION("selection may concentrate in one row") {
        Matrix<double> pre(2, 3);
        pre << 5, 4, 3, 1, 0.5, 0.25;
        const auto a = batch_topk_select(pre, 3);
        CHECK(a.selected.row(0).count() == 3);
        CHECK(a.selected.row(1).count() == 0);
    }
    SECTION("ties go to the lower row, then the lower feature") {
        Matrix<double> pre = Matrix<double>::Constant(2, 2, 1.0);
        const auto a = batch_topk_select(pre, 3);
        CHECK(a.selected(0, 0));
        CHECK(a.selected(0, 1));
        CHECK(a.selected(1, 0));
        CHECK_FALSE(a.selected(1, 1));
    }
    SECTION("negative pre-activations are never selected") {
        Matrix<double> pre = Matrix<double>::Constant(3, 4, -1.0);
        pre(1, 2) = 0.5;
        const auto a = batch_topk_select(pre, 10);
        CHECK(a.nonzeros() == 1);
    }
}

TEST_CASE("property: batch top-k matches the brute-force sort oracle", "[sae][property]") {
    Rng rng(2024);
    for (int trial = 0; trial < 200; ++trial) {
        const Index B = random_int(rng, 1, 6), n = random_int(rng, 1, 9), k = random_int(rng, 1, n);
        Matrix<double> pre = random_matrix(rng, B, n);
        if (trial % 5 == 0) pre = pre.array().round().matrix();  // force ties
        const auto a = batch_topk_select(pre, k * B);
        const Mask oracle = oracles::brute_force_batch_topk(pre, k * B);
        CHECK((a.selected == oracle).all());
        const Index positives = (pre.array() > 0.0).count();
        CHECK(a.nonzeros() == std::min(k * B, positives));
        for (Index r = 0; r < B; ++r)
            for (Index c = 0; c < n; ++c) {
                if (a.selected(r, c))
                    CHECK(a.values(r, c) == pre(r, c));
                else
                    CHECK(a.values(r, c) == 0.0);
            }
    }
}

TEST_CASE("property: per-sample top-k matches the brute-force oracle", "[sae][property]") {
    Rng rng(77);
    for (int trial = 0; trial < 200; ++trial) {
        const Index B = random_int(rng, 1, 5), n = random_int(rng, 1, 8), k = random_int(rng, 1, n);
        Matrix<double> pre = random_matrix(rng, B, n);
        if (trial % 4 == 0) pre = pre.array().round().matrix();
        const auto a = per_sample_topk_select(pre, k);
        for (Index r = 0; r < B; ++r) {
            const Matrix<double> row = pre.row(r);
            const Mask oracle = oracles::brute_force_batch_topk(row, k);
            CHECK((a.selected.row(r) == oracle.row(0)).all());
        }
    }
}

TEST_CASE("average nonzeros per row equals k when every entry is positive", "[sae]") {
    Rng rng(8);
    const Index B = 64, n = 512, k = 8;
    const Matrix<double> pre = random_matrix(rng, B, n).cwiseAbs().array() + 1e-3;
    const auto a = batch_topk_select(pre, k * B);
    CHECK(static_cast<double>(a.nonzeros()) / static_cast<double>(B) == 8.0);
}

TEST_CASE("decode", "[sae]") {
    Rng rng(4);
    auto p = random_sae(rng, 3, 5);
    SECTION("zero codes give the decoder bias") {
        const auto acts = SparseActivations<double>::empty(2, 5);
        const Matrix<double> out = decode(p, acts);
        for (Index r = 0; r < 2; ++r) CHECK(out.row(r) == p.b_dec.transpose());
    }
    SECTION("one active feature") {
        auto acts = SparseActivations<double>::empty(1, 5);
        acts.values(0, 2) = 1.5;
        acts.selected(0, 2) = true;
        const Vector<double> expected = 1.5 * p.w_dec.col(2) + p.b_dec;
        CHECK((decode(p, acts).row(0).transpose() - expected).norm() < 1e-15);
    }
    SECTION("dense oracle") {
        const Matrix<double> z = random_matrix(rng, 4, 3);
        const auto acts = encode_batch(p, z, 2);
        Matrix<double> oracle(4, 3);
        for (Index r = 0; r < 4; ++r)
            for (Index i = 0; i < 3; ++i) {
                double acc = p.b_dec[i];
                for (Index j = 0; j < 5; ++j) acc += p.w_dec(i, j) * acts.values(r, j);
                oracle(r, i) = acc;
            }
        CHECK(max_abs(decode(p, acts) - oracle) < 1e-14);
    }
}

TEST_CASE("compute_loss examples", "[sae]") {
    SECTION("B=1, z=(1,0), zero reconstruction") {
        auto p = SaeParams<double>::zeros(2, 3);
        Matrix<double> z(1, 2);
        z << 1, 0;
        const auto acts = SparseActivations<double>::empty(1, 3);
        const auto l = compute_loss(p, z, acts, std::vector<bool>(3, false), 2, 0.125);
        CHECK(l.recon == 1.0);
        CHECK(l.aux == 0.0);
        CHECK(l.total == 1.0);
    }
    SECTION("perfect reconstruction and no dead features gives zero") {
        auto p = SaeParams<double>::zeros(2, 2);
        p.w_enc = Matrix<double>::Identity(2, 2);
        p.w_dec = Matrix<double>::Identity(2, 2);
        Matrix<double> z(2, 2);
        z << 1, 0, 0, 2;
        const auto acts = encode_batch(p, z, 1);
        const auto l = compute_loss(p, z, acts, std::vector<bool>(2, false), 1, 0.125);
        CHECK(l.total == 0.0);
    }
    SECTION("aux weight is applied") {
        Rng rng(6);
        auto p = random_sae(rng, 3, 4);
        const Matrix<double> z = random_matrix(rng, 3, 3);
        const auto acts = encode_batch(p, z, 1);
        std::vector<bool> dead{true, true, false, false};
        const auto l = compute_loss(p, z, acts, dead, 2, 0.125);
        const auto dead_acts = encode_dead(pre_activations(p, z), dead, 2);
        for (Index j = 2; j < 4; ++j) CHECK_FALSE(dead_acts.selected.col(j).any());
        const double aux = (decode(p, dead_acts) - z).squaredNorm();
        CHECK(l.aux == Approx(aux).epsilon(1e-14));
        CHECK(l.total == Approx(l.recon + 0.125 * aux).epsilon(1e-14));
    }
}

TEST_CASE("backward: stationary point and decoder-bias closed form", "[sae]") {
    SECTION("zero residual gives zero gradients") {
        auto p = SaeParams<double>::zeros(2, 2);
        p.w_enc = Matrix<double>::Identity(2, 2);
        p.w_dec = Matrix<double>::Identity(2, 2);
        Matrix<double> z(2, 2);
        z << 1, 0, 0, 2;
        const auto acts = encode_batch(p, z, 1);
        const auto g = backward(p, z, acts, SparseActivations<double>::empty(2, 2), 0.0);
        CHECK(g.w_enc.isZero(0));
        CHECK(g.b_enc.isZero(0));
        CHECK(g.w_dec.isZero(0));
        CHECK(g.b_dec.isZero(0));
    }
    SECTION("b_dec gradient is 2 * sum of residuals") {
        Rng rng(12);
        auto p = random_sae(rng, 3, 5);
        const Matrix<double> z = random_matrix(rng, 4, 3);
        const auto acts = encode_batch(p, z, 2);
        const auto g = backward(p, z, acts, SparseActivations<double>::empty(4, 5), 0.0);
        const Vector<double> expected = 2.0 * (decode(p, acts) - z).colwise().sum().transpose();
        CHECK((g.b_dec - expected).norm() < 1e-13);
    }
}

TEST_CASE("property: analytic gradients match central finite differences", "[sae][property]") {
    Rng rng(99);
    for (int trial = 0; trial < 20; ++trial) {
        const Index d = random_int(rng, 1, 4), n = random_int(rng, 2, 6), B = random_int(rng, 1, 4);
        const Index k = random_int(rng, 1, n);
        const auto p = random_sae(rng, d, n);
        const Matrix<double> z = random_matrix(rng, B, d);
        std::vector<bool> dead(static_cast<std::size_t>(n));
        for (auto&& x : dead) x = rng.bernoulli(0.5);
        const double err = oracles::max_gradient_relative_error(p, z, k, dead, 2, 0.125, 1e-5);
        INFO("trial " << trial << " d=" << d << " n=" << n << " B=" << B);
        CHECK(err < 1e-4);
    }
}

TEST_CASE("adam_step", "[sae]") {
    SECTION("zero gradient leaves parameters unchanged") {
        Rng rng(1);
        auto p = random_sae(rng, 3, 4);
        const auto before = p;
        auto state = TrainState<double>::fresh(3, 4);
        adam_step(p, SaeGradients<double>::zeros(3, 4), state, AdamHyper{});
        CHECK(max_abs(p.w_enc - before.w_enc) == 0.0);
        CHECK(max_abs(p.w_dec - before.w_dec) < 1e-15);
        CHECK(state.step == 1);
    }
    SECTION("first step on a scalar parameter moves by about the learning rate") {
        auto p = SaeParams<double>::zeros(1, 1);
        p.w_dec(0, 0) = 1.0;
        p.b_dec[0] = 0.7;
        auto g = SaeGradients<double>::zeros(1, 1);
        g.b_dec[0] = 0.3;
        auto state = TrainState<double>::fresh(1, 1);
        adam_step(p, g, state, AdamHyper{});
        CHECK(p.b_dec[0] - 0.7 == Approx(-1e-3).epsilon(1e-6));
    }
    SECTION("decoder columns stay unit norm and the radial gradient is removed") {
        Rng rng(3);
        auto p = random_sae(rng, 4, 6);
        auto state = TrainState<double>::fresh(4, 6);
        for (int s = 0; s < 25; ++s) {
            auto g = SaeGradients<double>::zeros(4, 6);
            g.w_dec = random_matrix(rng, 4, 6, 10.0);
            g.w_enc = random_matrix(rng, 6, 4);
            adam_step(p, g, state, AdamHyper{0.05});
            for (Index j = 0; j < 6; ++j) CHECK(std::abs(p.w_dec.col(j).norm() - 1.0) < 1e-6);
        }
        // a purely radial gradient produces no decoder movement
        auto radial = SaeGradients<double>::zeros(4, 6);
        radial.w_dec = 3.0 * p.w_dec;
        auto fresh = TrainState<double>::fresh(4, 6);
        const auto before = p.w_dec;
        adam_step(p, radial, fresh, AdamHyper{});
        CHECK(max_abs(p.w_dec - before) < 1e-9);
    }
}

TEST_CASE("dead-feature counters", "[sae]") {
    auto state = TrainState<double>::fresh(2, 3);
    const std::int64_t window = 64;
    auto only_first = SparseActivations<double>::empty(1, 3);
    only_first.selected(0, 0) = true;
    only_first.values(0, 0) = 1.0;
    for (std::int64_t batch = 1; batch <= 70; ++batch) {
        state.step = batch;
        const auto dead = update_dead_counters(state, only_first, window);
        CHECK_FALSE(dead[0]);
        CHECK(dead[1] == (batch >= 64));
        for (auto lf : state.last_fired) CHECK(lf <= state.step);
    }
    auto fresh = TrainState<double>::fresh(2, 3);
    for (std::int64_t s = 0; s < window; ++s) {
        fresh.step = s;
        const auto dead = fresh.dead_set(window);
        CHECK(std::none_of(dead.begin(), dead.end(), [](bool b) { return b; }));
    }
}

TEST_CASE("relative_l2", "[sae]") {
    Rng rng(5);
    const Matrix<double> z = random_matrix(rng, 3, 4);
    CHECK(relative_l2(z, z) == 0.0);
    CHECK(relative_l2(z, Matrix<double>::Zero(3, 4)) == Approx(1.0).epsilon(1e-15));
    CHECK_THROWS_AS(relative_l2(Matrix<double>::Zero(3, 4), z), DegenerateInput);
    CHECK_THROWS_AS(relative_l2(z, Matrix<double>::Zero(2, 4)), ShapeError);
}

namespace {

std::filesystem::path toy_dataset(const TempDir& dir, std::uint64_t objects, std::uint64_t M) {
    ToyConfig c{16, 16, 64, 3.0, PresenceDistribution::uniform01, {}, 5};
    c.ambient_dim = 64;
    const auto world = generate_world(c);
    DatasetWriter w(dir.path(), M, 16, {});
    const RowMatrix<float> sigma = RowMatrix<float>::Zero(static_cast<Index>(M), 16);
    for (std::uint64_t o = 0; o < objects; ++o)
        w.add_object(sample_world(world, o * M, M).latents.cast<float>(), sigma);
    w.finish();
    return dir.path() / "manifest.json";
}

}  // namespace

TEST_CASE("training reduces validation error on a toy dataset", "[sae][train]") {
    TempDir dir;
    const auto h = open_dataset(toy_dataset(dir, 20, 500));
    SaeConfig c;
    c.input_dim = 16;
    c.codebook_size = 64;
    c.topk = 3;
    c.batch_size = 512;
    c.epochs = 10;
    c.seed = 1;
    const auto ck = train(c, h);
    REQUIRE(ck.train_state.epoch_log.size() == 10);
    CHECK(ck.train_state.epoch_log.back().validation_relative_l2 <
          ck.train_state.epoch_log.front().validation_relative_l2);
    CHECK(ck.train_state.metrics_log.size() == static_cast<std::size_t>(ck.train_state.step));
    CHECK(ck.train_state.step == 10 * 20);
    for (Index j = 0; j < 64; ++j) CHECK(std::abs(ck.params.w_dec.col(j).norm() - 1.0f) < 1e-6f);

    SECTION("deterministic per seed") {
        const auto again = train(c, h);
        CHECK(again.params.w_dec == ck.params.w_dec);
        CHECK(again.params.b_enc == ck.params.b_enc);
    }
}

TEST_CASE("training edge cases", "[sae][train]") {
    TempDir dir;
    const auto h = open_dataset(toy_dataset(dir, 2, 64));
    SaeConfig c;
    c.input_dim = 16;
    c.codebook_size = 32;
    c.topk = 2;
    c.batch_size = 32;
    c.seed = 9;
    SECTION("zero epochs returns the initial parameters") {
        c.epochs = 0;
        const auto ck = train(c, h);
        CHECK(ck.params.w_dec == init_params<float>(c, c.seed).w_dec);
        CHECK(ck.train_state.step == 0);
    }
    SECTION("dimension mismatch") {
        c.input_dim = 8;
        CHECK_THROWS_AS(train(c, h), ShapeError);
    }
    SECTION("rows subset restricts the stream") {
        c.epochs = 1;
        TrainOptions opts;
        const std::vector<std::uint64_t> first{0};
        opts.rows = rows_of_objects(h, first);
        const auto ck = train(c, h, opts);
        CHECK(ck.train_state.step == 2);
    }
}

TEST_CASE("non-finite loss raises DivergenceError with the step", "[sae][train]") {
    TempDir dir;
    std::vector<std::vector<GaussianLatentRecord>> objs(1);
    for (int i = 0; i < 4; ++i) objs[0].push_back({Vector<float>::Constant(2, 1e30f), Vector<float>::Zero(2)});
    write_dataset(objs, dir.path());
    const auto h = open_dataset(dir.path() / "manifest.json");
    SaeConfig c;
    c.input_dim = 2;
    c.codebook_size = 4;
    c.topk = 1;
    c.aux_topk = 2;
    c.batch_size = 4;
    c.epochs = 1;
    try {
        train(c, h);
        FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
        CHECK(e.step() == 0);
    }
}

TEST_CASE("checkpoint round trip and corruption", "[sae][checkpoint]") {
    TempDir dir;
    const auto h = open_dataset(toy_dataset(dir, 2, 64));
    SaeConfig c;
    c.input_dim = 16;
    c.codebook_size = 32;
    c.topk = 2;
    c.batch_size = 32;
    c.epochs = 2;
    const auto ck = train(c, h);
    const auto path = dir.path() / "sae.ckpt";
    save_checkpoint(ck, path);
    const auto back = load_checkpoint(path);
    CHECK(back.config.to_json() == ck.config.to_json());
    CHECK(back.params.w_enc == ck.params.w_enc);
    CHECK(back.params.b_enc == ck.params.b_enc);
    CHECK(back.params.w_dec == ck.params.w_dec);
    CHECK(back.params.b_dec == ck.params.b_dec);
    CHECK(back.train_state.adam_m.w_dec == ck.train_state.adam_m.w_dec);
    CHECK(back.train_state.adam_v.b_enc == ck.train_state.adam_v.b_enc);
    CHECK(back.train_state.step == ck.train_state.step);
    CHECK(back.train_state.last_fired == ck.train_state.last_fired);
    REQUIRE(back.train_state.metrics_log.size() == ck.train_state.metrics_log.size());
    CHECK(back.train_state.metrics_log.back().recon == ck.train_state.metrics_log.back().recon);
    CHECK(back.train_state.epoch_log.size() == ck.train_state.epoch_log.size());

    // saving the loaded checkpoint reproduces the same bytes
    save_checkpoint(back, dir.path() / "again.ckpt");
    CHECK(read_file_bytes(path) == read_file_bytes(dir.path() / "again.ckpt"));

    auto bytes = read_file_bytes(path);
    SECTION("flipped blob byte") {
        bytes[bytes.size() - 3] ^= std::byte{1};
        write_file_bytes(path, bytes);
        CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    }
    SECTION("truncated") {
        bytes.resize(bytes.size() / 2);
        write_file_bytes(path, bytes);
        CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    }
    SECTION("bad magic") {
        bytes[0] = std::byte{'X'};
        write_file_bytes(path, bytes);
        CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    }
    SECTION("version mismatch") {
        std::uint64_t len = 0;
        std::memcpy(&len, bytes.data() + 8, 8);
        std::string header(reinterpret_cast<const char*>(bytes.data() + 16), len);
        const auto pos = header.find("\"format_version\":1");
        REQUIRE(pos != std::string::npos);
        header.replace(pos, 18, "\"format_version\":7");
        std::memcpy(bytes.data() + 16, header.data(), len);
        write_file_bytes(path, bytes);
        CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    }
}
