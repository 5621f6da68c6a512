#pragma once

// On-disk store of Gaussian pre-embeddings (mu, sigma) and the per-epoch
// reparameterized latent stream used for SAE training.
//
// Layout: each latent row is d mu values followed by d sigma values, f32
// little-endian, row-major by (object, latent). A JSON manifest describes the
// shape and the data files.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "common.hpp"
#include "rng.hpp"

namespace latent_forge {

inline constexpr int kDatasetFormatVersion = 1;
inline constexpr const char* kDtypeF32LE = "f32-little-endian";

enum class SeedPolicy { fixed, per_epoch };

inline std::string to_string(SeedPolicy p) { return p == SeedPolicy::fixed ? "fixed" : "per-epoch"; }

inline SeedPolicy parse_seed_policy(const std::string& s) {
    if (s == "fixed") return SeedPolicy::fixed;
    if (s == "per-epoch") return SeedPolicy::per_epoch;
    throw FormatError("unknown seed_policy '" + s + "'");
}

struct DataFileEntry {
    std::string path;  // relative to the manifest directory
    std::uint64_t object_begin = 0;
    std::uint64_t object_end = 0;  // exclusive
    std::string checksum;          // FNV-1a 64 of the file bytes, hex

    std::uint64_t object_count() const { return object_end - object_begin; }
    bool operator==(const DataFileEntry&) const = default;
};

struct DatasetManifest {
    int version = kDatasetFormatVersion;
    std::uint64_t object_count = 0;
    std::uint64_t latents_per_object = 0;
    std::uint64_t latent_dim = 0;
    std::string dtype = kDtypeF32LE;
    std::vector<DataFileEntry> data_files;
    SeedPolicy seed_policy = SeedPolicy::per_epoch;

    std::uint64_t record_count() const { return object_count * latents_per_object; }
    std::uint64_t row_bytes() const { return 2 * latent_dim * sizeof(float); }
    bool operator==(const DatasetManifest&) const = default;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json files = nlohmann::ordered_json::array();
        for (const auto& f : data_files) {
            files.push_back({{"path", f.path},
                             {"object_begin", f.object_begin},
                             {"object_end", f.object_end},
                             {"checksum", f.checksum}});
        }
        return {{"version", version},
                {"object_count", object_count},
                {"latents_per_object", latents_per_object},
                {"latent_dim", latent_dim},
                {"dtype", dtype},
                {"data_files", files},
                {"seed_policy", to_string(seed_policy)}};
    }

    static DatasetManifest from_json(const nlohmann::json& j) {
        DatasetManifest m;
        try {
            m.version = j.at("version").get<int>();
            if (m.version != kDatasetFormatVersion)
                throw FormatError("unsupported dataset manifest version " + std::to_string(m.version));
            m.object_count = j.at("object_count").get<std::uint64_t>();
            m.latents_per_object = j.at("latents_per_object").get<std::uint64_t>();
            m.latent_dim = j.at("latent_dim").get<std::uint64_t>();
            m.dtype = j.at("dtype").get<std::string>();
            m.seed_policy = parse_seed_policy(j.at("seed_policy").get<std::string>());
            for (const auto& f : j.at("data_files")) {
                DataFileEntry e;
                e.path = f.at("path").get<std::string>();
                e.object_begin = f.at("object_begin").get<std::uint64_t>();
                e.object_end = f.at("object_end").get<std::uint64_t>();
                if (f.contains("checksum")) e.checksum = f.at("checksum").get<std::string>();
                m.data_files.push_back(std::move(e));
            }
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(std::string("malformed dataset manifest: ") + e.what());
        }
        m.validate();
        return m;
    }

    void validate() const {
        if (dtype != kDtypeF32LE) throw FormatError("unsupported dtype '" + dtype + "'");
        if (object_count < 1) throw FormatError("object_count must be >= 1");
        if (latents_per_object < 1) throw FormatError("latents_per_object must be >= 1");
        if (latent_dim < 1) throw FormatError("latent_dim must be >= 1");
        std::uint64_t next = 0;
        for (const auto& f : data_files) {
            if (f.object_begin != next || f.object_end <= f.object_begin)
                throw FormatError("data_files object ranges must be contiguous and nonempty");
            next = f.object_end;
        }
        if (next != object_count)
            throw FormatError("data_files cover " + std::to_string(next) + " objects, manifest declares " +
                              std::to_string(object_count));
    }
};

/// One pre-embedding: mean and standard deviation of the latent Gaussian.
struct GaussianLatentRecord {
    Vector<float> mu;
    Vector<float> sigma;
};

/// Reparameterized draw: mu + sigma * noise, elementwise.
template <class T, class MuT, class SigmaT>
Vector<T> sample_latent(std::span<const MuT> mu, std::span<const SigmaT> sigma, std::span<const T> noise) {
    if (mu.size() != sigma.size() || mu.size() != noise.size())
        throw ShapeError("sample_latent: mu, sigma and noise must share a length");
    Vector<T> z(static_cast<Index>(mu.size()));
    for (std::size_t j = 0; j < mu.size(); ++j)
        z[static_cast<Index>(j)] = static_cast<T>(mu[j]) + static_cast<T>(sigma[j]) * noise[j];
    return z;
}

inline Vector<float> sample_latent(const GaussianLatentRecord& rec, std::span<const float> noise) {
    return sample_latent<float>(std::span<const float>(rec.mu.data(), static_cast<std::size_t>(rec.mu.size())),
                                std::span<const float>(rec.sigma.data(), static_cast<std::size_t>(rec.sigma.size())),
                                noise);
}

struct WriteOptions {
    std::uint64_t objects_per_file = 1024;
    SeedPolicy seed_policy = SeedPolicy::per_epoch;
};

/// Streaming writer; objects are appended in id order.
class DatasetWriter {
public:
    DatasetWriter(std::filesystem::path out_dir, std::uint64_t latents_per_object, std::uint64_t latent_dim,
                  WriteOptions options = {})
        : dir_(std::move(out_dir)), options_(options) {
        if (latents_per_object < 1 || latent_dim < 1)
            throw FormatError("latents_per_object and latent_dim must be >= 1");
        if (options_.objects_per_file < 1) throw FormatError("objects_per_file must be >= 1");
        manifest_.latents_per_object = latents_per_object;
        manifest_.latent_dim = latent_dim;
        manifest_.seed_policy = options_.seed_policy;
        std::error_code ec;
        std::filesystem::create_directories(dir_, ec);
        if (ec) throw IoError("cannot create dataset directory " + dir_.string() + ": " + ec.message());
    }

    /// Appends one object given as M x d mean and sigma matrices.
    void add_object(const RowMatrix<float>& mu, const RowMatrix<float>& sigma) {
        const auto M = static_cast<Index>(manifest_.latents_per_object);
        const auto d = static_cast<Index>(manifest_.latent_dim);
        if (mu.rows() != M || sigma.rows() != M)
            throw FormatError("object must have exactly " + std::to_string(M) + " latents");
        if (mu.cols() != d || sigma.cols() != d)
            throw FormatError("record dimension mismatch: expected " + std::to_string(d));
        if (!mu.allFinite() || !sigma.allFinite()) throw FormatError("non-finite mu/sigma value");
        if ((sigma.array() < 0.0f).any()) throw FormatError("negative sigma value");
        std::vector<float> row(static_cast<std::size_t>(2 * d));
        for (Index i = 0; i < M; ++i) {
            for (Index j = 0; j < d; ++j) {
                row[static_cast<std::size_t>(j)] = mu(i, j);
                row[static_cast<std::size_t>(d + j)] = sigma(i, j);
            }
            append_bytes(std::as_bytes(std::span(row)));
        }
        ++objects_in_file_;
        ++manifest_.object_count;
        if (objects_in_file_ == options_.objects_per_file) flush_file();
    }

    void add_object(std::span<const GaussianLatentRecord> records) {
        const auto M = static_cast<Index>(manifest_.latents_per_object);
        const auto d = static_cast<Index>(manifest_.latent_dim);
        if (static_cast<Index>(records.size()) != M)
            throw FormatError("object must have exactly " + std::to_string(M) + " latents");
        RowMatrix<float> mu(M, d), sigma(M, d);
        for (Index i = 0; i < M; ++i) {
            const auto& r = records[static_cast<std::size_t>(i)];
            if (r.mu.size() != d || r.sigma.size() != d)
                throw FormatError("record dimension mismatch: expected " + std::to_string(d));
            mu.row(i) = r.mu.transpose();
            sigma.row(i) = r.sigma.transpose();
        }
        add_object(mu, sigma);
    }

    /// Flushes pending data and writes manifest.json.
    DatasetManifest finish() {
        if (objects_in_file_ > 0) flush_file();
        manifest_.validate();
        write_text_file(dir_ / "manifest.json", manifest_.to_json().dump(2) + "\n");
        return manifest_;
    }

private:
    void append_bytes(std::span<const std::byte> bytes) { buffer_.insert(buffer_.end(), bytes.begin(), bytes.end()); }

    void flush_file() {
        char name[32];
        std::snprintf(name, sizeof(name), "data_%05zu.bin", manifest_.data_files.size());
        write_file_bytes(dir_ / name, buffer_);
        DataFileEntry e;
        e.path = name;
        e.object_end = manifest_.object_count;
        e.object_begin = e.object_end - objects_in_file_;
        e.checksum = hex64(fnv1a64(buffer_));
        manifest_.data_files.push_back(std::move(e));
        buffer_.clear();
        objects_in_file_ = 0;
    }

    std::filesystem::path dir_;
    WriteOptions options_;
    DatasetManifest manifest_;
    std::vector<std::byte> buffer_;
    std::uint64_t objects_in_file_ = 0;
};

/// Writes every object (each a list of M records) and returns the manifest.
inline DatasetManifest write_dataset(std::span<const std::vector<GaussianLatentRecord>> objects,
                                     const std::filesystem::path& out_dir, WriteOptions options = {}) {
    if (objects.empty() || objects.front().empty()) throw FormatError("write_dataset needs at least one record");
    const auto d = static_cast<std::uint64_t>(objects.front().front().mu.size());
    DatasetWriter writer(out_dir, objects.front().size(), d, options);
    for (const auto& obj : objects) writer.add_object(std::span<const GaussianLatentRecord>(obj));
    return writer.finish();
}

struct OpenOptions {
    bool verify_checksum = true;
};

struct RecordView {
    std::span<const float> mu;
    std::span<const float> sigma;
};

struct LatentRef {
    std::uint64_t object_id = 0;
    std::uint64_t latent_index = 0;

    friend bool operator==(const LatentRef&, const LatentRef&) = default;
};

/// Read-only, memory-resident view of a dataset. Safe for concurrent readers.
class DatasetHandle {
public:
    DatasetHandle(DatasetManifest manifest, std::filesystem::path root, OpenOptions options)
        : manifest_(std::move(manifest)), root_(std::move(root)) {
        const std::uint64_t row_floats = 2 * manifest_.latent_dim;
        data_.reserve(static_cast<std::size_t>(manifest_.record_count() * row_floats));
        for (const auto& f : manifest_.data_files) {
            const auto path = root_ / f.path;
            if (!std::filesystem::exists(path)) throw CorruptDataset("missing data file " + path.string());
            const auto bytes = read_file_bytes(path);
            const std::uint64_t expected = f.object_count() * manifest_.latents_per_object * manifest_.row_bytes();
            if (bytes.size() != expected)
                throw CorruptDataset("data file " + f.path + " has " + std::to_string(bytes.size()) +
                                     " bytes, expected " + std::to_string(expected));
            if (options.verify_checksum && !f.checksum.empty() && hex64(fnv1a64(bytes)) != f.checksum)
                throw CorruptDataset("checksum mismatch in " + f.path);
            const std::size_t old = data_.size();
            data_.resize(old + bytes.size() / sizeof(float));
            std::memcpy(data_.data() + old, bytes.data(), bytes.size());
        }
    }

    const DatasetManifest& manifest() const noexcept { return manifest_; }
    std::uint64_t object_count() const noexcept { return manifest_.object_count; }
    std::uint64_t latents_per_object() const noexcept { return manifest_.latents_per_object; }
    std::uint64_t latent_dim() const noexcept { return manifest_.latent_dim; }
    std::uint64_t record_count() const noexcept { return manifest_.record_count(); }

    /// Record by flat row index (object * M + latent).
    RecordView record(std::uint64_t row) const {
        if (row >= record_count()) throw IndexError("record index out of range");
        const std::size_t d = static_cast<std::size_t>(manifest_.latent_dim);
        const float* base = data_.data() + row * 2 * d;
        return {std::span<const float>(base, d), std::span<const float>(base + d, d)};
    }

    RecordView record(std::uint64_t object_id, std::uint64_t latent_index) const {
        if (object_id >= object_count() || latent_index >= latents_per_object())
            throw IndexError("(object, latent) index out of range");
        return record(object_id * latents_per_object() + latent_index);
    }

    GaussianLatentRecord copy_record(std::uint64_t object_id, std::uint64_t latent_index) const {
        const auto v = record(object_id, latent_index);
        GaussianLatentRecord r;
        r.mu = Eigen::Map<const Vector<float>>(v.mu.data(), static_cast<Index>(v.mu.size()));
        r.sigma = Eigen::Map<const Vector<float>>(v.sigma.data(), static_cast<Index>(v.sigma.size()));
        return r;
    }

    /// Reparameterized latent for one row; noise comes from the row's own substream.
    template <class T = float>
    void sample_row(std::uint64_t row, std::uint64_t seed, std::uint64_t epoch, T* out) const {
        const auto v = record(row);
        const std::uint64_t noise_epoch = manifest_.seed_policy == SeedPolicy::fixed ? 0 : epoch;
        Rng rng(derive_seed(seed, noise_epoch, row, 0x6e6f697365ULL));
        for (std::size_t j = 0; j < v.mu.size(); ++j) {
            const double eps = rng.normal();
            out[j] = static_cast<T>(static_cast<double>(v.mu[j]) + static_cast<double>(v.sigma[j]) * eps);
        }
    }

    /// All M latents of one object, reparameterized with the given seed/epoch.
    template <class T = float>
    RowMatrix<T> sample_object(std::uint64_t object_id, std::uint64_t seed, std::uint64_t epoch = 0) const {
        if (object_id >= object_count()) throw IndexError("object id out of range");
        const auto M = static_cast<Index>(latents_per_object());
        const auto d = static_cast<Index>(latent_dim());
        RowMatrix<T> z(M, d);
        for (Index i = 0; i < M; ++i)
            sample_row<T>(object_id * latents_per_object() + static_cast<std::uint64_t>(i), seed, epoch,
                          z.row(i).data());
        return z;
    }

    /// Means of one object without sampling.
    template <class T = float>
    RowMatrix<T> object_means(std::uint64_t object_id) const {
        const auto M = static_cast<Index>(latents_per_object());
        const auto d = static_cast<Index>(latent_dim());
        RowMatrix<T> z(M, d);
        for (Index i = 0; i < M; ++i) {
            const auto v = record(object_id, static_cast<std::uint64_t>(i));
            for (Index j = 0; j < d; ++j) z(i, j) = static_cast<T>(v.mu[static_cast<std::size_t>(j)]);
        }
        return z;
    }

private:
    DatasetManifest manifest_;
    std::filesystem::path root_;
    std::vector<float> data_;
};

inline DatasetHandle open_dataset(const std::filesystem::path& manifest_path, OpenOptions options = {}) {
    if (!std::filesystem::exists(manifest_path)) throw IoError("manifest not found: " + manifest_path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(manifest_path));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
    }
    return DatasetHandle(DatasetManifest::from_json(j), manifest_path.parent_path(), options);
}

template <class T = float>
struct LatentBatch {
    RowMatrix<T> latents;
    std::vector<LatentRef> provenance;

    Index size() const { return latents.rows(); }
};

/// Flat row indices of the given objects, in object order.
inline std::vector<std::uint64_t> rows_of_objects(const DatasetHandle& handle, std::span<const std::uint64_t> objects) {
    std::vector<std::uint64_t> rows;
    const auto M = handle.latents_per_object();
    rows.reserve(objects.size() * M);
    for (auto o : objects) {
        if (o >= handle.object_count()) throw IndexError("object id out of range");
        for (std::uint64_t i = 0; i < M; ++i) rows.push_back(o * M + i);
    }
    return rows;
}

/// One epoch of shuffled, freshly reparameterized batches. Single consumer.
/// When `rows` is given only those flat rows are streamed.
class EpochBatchStream {
public:
    EpochBatchStream(const DatasetHandle& handle, std::uint64_t batch_size, std::uint64_t seed, std::uint64_t epoch,
                     const std::vector<std::uint64_t>* rows = nullptr)
        : handle_(&handle), batch_size_(batch_size), seed_(seed), epoch_(epoch) {
        if (batch_size_ < 1) throw ConfigError("batch_size must be >= 1");
        Rng rng(derive_seed(seed, epoch, 0, 0x73687566666c65ULL));
        if (rows) {
            order_ = *rows;
            shuffle(std::span<std::uint64_t>(order_), rng);
        } else {
            order_ = random_permutation(handle.record_count(), rng);
        }
    }

    std::uint64_t batch_count() const { return (order_.size() + batch_size_ - 1) / batch_size_; }
    std::uint64_t epoch() const { return epoch_; }

    template <class T = float>
    std::optional<LatentBatch<T>> next() {
        if (cursor_ >= order_.size()) return std::nullopt;
        const std::uint64_t end = std::min<std::uint64_t>(order_.size(), cursor_ + batch_size_);
        const auto d = static_cast<Index>(handle_->latent_dim());
        const auto M = handle_->latents_per_object();
        LatentBatch<T> batch;
        batch.latents.resize(static_cast<Index>(end - cursor_), d);
        batch.provenance.reserve(static_cast<std::size_t>(end - cursor_));
        for (std::uint64_t k = cursor_; k < end; ++k) {
            const std::uint64_t row = order_[k];
            handle_->sample_row<T>(row, seed_, epoch_, batch.latents.row(static_cast<Index>(k - cursor_)).data());
            batch.provenance.push_back({row / M, row % M});
        }
        cursor_ = end;
        return batch;
    }

private:
    const DatasetHandle* handle_;
    std::uint64_t batch_size_;
    std::uint64_t seed_;
    std::uint64_t epoch_;
    std::vector<std::uint64_t> order_;
    std::uint64_t cursor_ = 0;
};

inline EpochBatchStream stream_epoch_batches(const DatasetHandle& handle, std::uint64_t batch_size,
                                             std::uint64_t seed, std::uint64_t epoch = 0,
                                             const std::vector<std::uint64_t>* rows = nullptr) {
    return EpochBatchStream(handle, batch_size, seed, epoch, rows);
}

}  // namespace latent_forge
