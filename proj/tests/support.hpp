#pragma once

#include <latent_forge.hpp>

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

namespace lf_test {

using namespace latent_forge;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "lf") {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("latent_forge_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline Matrix<double> random_matrix(Rng& rng, Index rows, Index cols, double scale = 1.0) {
    Matrix<double> m(rows, cols);
    for (Index c = 0; c < cols; ++c)
        for (Index r = 0; r < rows; ++r) m(r, c) = scale * rng.normal();
    return m;
}

inline RowMatrix<double> random_rows(Rng& rng, Index rows, Index cols, double scale = 1.0) {
    return random_matrix(rng, rows, cols, scale);
}

inline Vector<double> random_vector(Rng& rng, Index n, double scale = 1.0) {
    Vector<double> v(n);
    for (Index i = 0; i < n; ++i) v[i] = scale * rng.normal();
    return v;
}

inline Index random_int(Rng& rng, Index lo, Index hi) {
    return lo + static_cast<Index>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

/// Random SAE with unit decoder columns and random biases.
inline SaeParams<double> random_sae(Rng& rng, Index d, Index n) {
    SaeParams<double> p;
    p.w_enc = random_matrix(rng, n, d);
    p.b_enc = random_vector(rng, n, 0.3);
    p.w_dec = random_matrix(rng, d, n);
    normalize_decoder(p);
    p.b_dec = random_vector(rng, d, 0.3);
    return p;
}

/// Random orthogonal matrix from the QR factorization of a Gaussian matrix.
inline Matrix<double> random_orthogonal(Rng& rng, Index d) {
    const Matrix<double> g = random_matrix(rng, d, d);
    Eigen::HouseholderQR<Matrix<double>> qr(g);
    Matrix<double> q = qr.householderQ();
    const Matrix<double> r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Index i = 0; i < d; ++i)
        if (r(i, i) < 0) q.col(i) *= -1.0;
    return q;
}

inline double max_abs(const Matrix<double>& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

}  // namespace lf_test
