#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "autolora/tensor.hpp"

namespace autolora {

/// splitmix64 step; derives independent seed streams from a base seed.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

struct Batch {
    Tensor x;            // [b x d]
    std::vector<int> y;  // labels in [0, z)
};

/// Immutable labelled dataset with features in the unit box.
struct Dataset {
    Tensor x;            // [n x d]
    std::vector<int> y;  // [n]
    std::size_t num_classes = 0;
    std::string name;
    std::uint64_t seed = 0;

    std::size_t size() const { return y.size(); }
    std::size_t dims() const { return x.rank() == 2 ? x.dim(1) : 0; }
};

struct SplitSpec {
    double val_fraction = 0.05;
    double test_fraction = 0.2;
    std::uint64_t shuffle_seed = 0;

    void validate() const {
        if (val_fraction < 0.0 || test_fraction < 0.0 ||
            val_fraction + test_fraction >= 1.0) {
            throw ConfigError("split fractions must be non-negative and sum below 1");
        }
    }
};

struct DataSplit {
    Dataset train;
    Dataset val;
    Dataset test;
};

enum class SyntheticKind { kBlobs, kRings, kMoons };

inline SyntheticKind synthetic_kind_from_string(const std::string& s) {
    if (s == "blobs") return SyntheticKind::kBlobs;
    if (s == "rings") return SyntheticKind::kRings;
    if (s == "moons") return SyntheticKind::kMoons;
    throw ConfigError("unknown synthetic dataset kind '" + s + "'");
}

namespace detail {

inline Dataset rows_subset(const Dataset& ds, const std::vector<std::size_t>& rows) {
    const std::size_t d = ds.dims();
    std::vector<double> data(rows.size() * d);
    std::vector<int> labels(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const double* src = ds.x.data() + rows[i] * d;
        std::copy(src, src + d, data.begin() + static_cast<std::ptrdiff_t>(i * d));
        labels[i] = ds.y[rows[i]];
    }
    Dataset out;
    out.x = Tensor({rows.size(), d}, std::move(data));
    out.y = std::move(labels);
    out.num_classes = ds.num_classes;
    out.name = ds.name;
    out.seed = ds.seed;
    return out;
}

// Affine map of every column into [0.05, 0.95]; constant columns land at 0.5.
inline void map_into_box(std::vector<double>& data, std::size_t n, std::size_t d) {
    for (std::size_t j = 0; j < d; ++j) {
        double lo = data[j];
        double hi = data[j];
        for (std::size_t i = 1; i < n; ++i) {
            lo = std::min(lo, data[i * d + j]);
            hi = std::max(hi, data[i * d + j]);
        }
        for (std::size_t i = 0; i < n; ++i) {
            double& v = data[i * d + j];
            v = hi > lo ? 0.05 + 0.9 * (v - lo) / (hi - lo) : 0.5;
        }
    }
}

}  // namespace detail

/// Seeded synthetic classification task in [0.05, 0.95]^d. The first two
/// dimensions carry the class structure; the rest are noise. `margin` scales
/// class separation, `noise` the within-class jitter.
inline Dataset make_synthetic(SyntheticKind kind, std::size_t n, std::size_t d, std::size_t z,
                              double margin, double noise, std::uint64_t seed) {
    if (z < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
    if (n < z * 10) throw ConfigError("synthetic dataset needs n >= 10 * classes");
    if (d < 2) throw ConfigError("synthetic dataset needs d >= 2");
    if (margin <= 0.0) throw ConfigError("synthetic dataset needs margin > 0");
    if (kind == SyntheticKind::kMoons && z != 2) {
        throw ConfigError("moons dataset is binary; got " + std::to_string(z) + " classes");
    }

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> jitter(0.0, noise);
    std::uniform_real_distribution<double> angle(0.0, 2.0 * M_PI);

    std::vector<double> data(n * d);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % z);
        labels[i] = label;
        double u = 0.0;
        double v = 0.0;
        switch (kind) {
            case SyntheticKind::kBlobs: {
                // Class centers equally spaced on a circle with pairwise
                // distance `margin`.
                const double radius =
                    z == 2 ? margin / 2.0 : margin / (2.0 * std::sin(M_PI / static_cast<double>(z)));
                const double phi = 2.0 * M_PI * static_cast<double>(label) / static_cast<double>(z);
                u = radius * std::cos(phi) + jitter(rng);
                v = radius * std::sin(phi) + jitter(rng);
                break;
            }
            case SyntheticKind::kRings: {
                const double radius = 1.0 + margin * static_cast<double>(label) + jitter(rng);
                const double phi = angle(rng);
                u = radius * std::cos(phi);
                v = radius * std::sin(phi);
                break;
            }
            case SyntheticKind::kMoons: {
                std::uniform_real_distribution<double> arc(0.0, M_PI);
                const double t = arc(rng);
                if (label == 0) {
                    u = std::cos(t) + jitter(rng);
                    v = std::sin(t) + jitter(rng);
                } else {
                    u = 1.0 - std::cos(t) + jitter(rng);
                    v = margin / 2.0 - std::sin(t) + jitter(rng);
                }
                break;
            }
        }
        data[i * d + 0] = u;
        data[i * d + 1] = v;
        for (std::size_t j = 2; j < d; ++j) data[i * d + j] = jitter(rng);
    }

    // Shuffle rows so class labels are not periodic in index order.
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> shuffled(n * d);
    std::vector<int> shuffled_labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::copy(data.begin() + static_cast<std::ptrdiff_t>(perm[i] * d),
                  data.begin() + static_cast<std::ptrdiff_t>((perm[i] + 1) * d),
                  shuffled.begin() + static_cast<std::ptrdiff_t>(i * d));
        shuffled_labels[i] = labels[perm[i]];
    }

    detail::map_into_box(shuffled, n, d);

    Dataset ds;
    ds.x = Tensor({n, d}, std::move(shuffled));
    ds.y = std::move(shuffled_labels);
    ds.num_classes = z;
    switch (kind) {
        case SyntheticKind::kBlobs: ds.name = "blobs"; break;
        case SyntheticKind::kRings: ds.name = "rings"; break;
        case SyntheticKind::kMoons: ds.name = "moons"; break;
    }
    ds.seed = seed;
    return ds;
}

/// Comma-separated rows of d real features followed by one integer label.
inline Dataset load_csv(const std::filesystem::path& path, std::size_t d, std::size_t z,
                        bool has_header = false) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open CSV file: " + path.string());
    std::vector<double> data;
    std::vector<int> labels;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line_no == 1 && has_header) continue;
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != d + 1) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                              std::to_string(d + 1) + " columns, got " +
                              std::to_string(fields.size()));
        }
        for (std::size_t j = 0; j < d; ++j) {
            try {
                std::size_t used = 0;
                const double v = std::stod(fields[j], &used);
                if (used != fields[j].size()) throw std::invalid_argument("trailing chars");
                data.push_back(v);
            } catch (const std::exception&) {
                throw FormatError(path.string() + ":" + std::to_string(line_no) +
                                  ": malformed feature '" + fields[j] + "'");
            }
        }
        long label = 0;
        try {
            std::size_t used = 0;
            label = std::stol(fields[d], &used);
            if (used != fields[d].size()) throw std::invalid_argument("trailing chars");
        } catch (const std::exception&) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) +
                              ": malformed label '" + fields[d] + "'");
        }
        if (label < 0 || static_cast<std::size_t>(label) >= z) {
            throw ContractError(path.string() + ":" + std::to_string(line_no) + ": label " +
                                std::to_string(label) + " outside [0, " + std::to_string(z) + ")");
        }
        labels.push_back(static_cast<int>(label));
    }
    if (labels.empty()) throw FormatError(path.string() + ": no data rows");
    Dataset ds;
    ds.x = Tensor({labels.size(), d}, std::move(data));
    ds.y = std::move(labels);
    ds.num_classes = z;
    ds.name = path.filename().string();
    return ds;
}

namespace detail {

inline std::uint32_t idx_read_u32(std::ifstream& in, const std::string& path) {
    unsigned char buf[4];
    if (!in.read(reinterpret_cast<char*>(buf), 4)) {
        throw FormatError(path + ": truncated IDX header");
    }
    return (std::uint32_t(buf[0]) << 24) | (std::uint32_t(buf[1]) << 16) |
           (std::uint32_t(buf[2]) << 8) | std::uint32_t(buf[3]);
}

}  // namespace detail

/// IDX image/label pair (magic 0x00000803 / 0x00000801), pixels scaled by
/// 1/255 into the unit box and flattened row-major.
inline Dataset load_idx(const std::filesystem::path& images_path,
                        const std::filesystem::path& labels_path, std::size_t z) {
    std::ifstream imgs(images_path, std::ios::binary);
    if (!imgs) throw FormatError("cannot open IDX image file: " + images_path.string());
    if (detail::idx_read_u32(imgs, images_path.string()) != 0x00000803u) {
        throw FormatError(images_path.string() + ": bad IDX image magic");
    }
    const std::size_t n = detail::idx_read_u32(imgs, images_path.string());
    const std::size_t rows = detail::idx_read_u32(imgs, images_path.string());
    const std::size_t cols = detail::idx_read_u32(imgs, images_path.string());
    const std::size_t d = rows * cols;
    std::vector<unsigned char> pixels(n * d);
    if (!imgs.read(reinterpret_cast<char*>(pixels.data()),
                   static_cast<std::streamsize>(pixels.size()))) {
        throw FormatError(images_path.string() + ": truncated IDX image payload");
    }

    std::ifstream labs(labels_path, std::ios::binary);
    if (!labs) throw FormatError("cannot open IDX label file: " + labels_path.string());
    if (detail::idx_read_u32(labs, labels_path.string()) != 0x00000801u) {
        throw FormatError(labels_path.string() + ": bad IDX label magic");
    }
    const std::size_t ln = detail::idx_read_u32(labs, labels_path.string());
    if (ln != n) {
        throw FormatError("IDX image/label counts differ: " + std::to_string(n) + " vs " +
                          std::to_string(ln));
    }
    std::vector<unsigned char> raw_labels(n);
    if (!labs.read(reinterpret_cast<char*>(raw_labels.data()),
                   static_cast<std::streamsize>(n))) {
        throw FormatError(labels_path.string() + ": truncated IDX label payload");
    }

    std::vector<double> data(n * d);
    for (std::size_t i = 0; i < n * d; ++i) data[i] = static_cast<double>(pixels[i]) / 255.0;
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (raw_labels[i] >= z) {
            throw ContractError(labels_path.string() + ": label " +
                                std::to_string(int(raw_labels[i])) + " outside [0, " +
                                std::to_string(z) + ")");
        }
        labels[i] = static_cast<int>(raw_labels[i]);
    }
    Dataset ds;
    ds.x = Tensor({n, d}, std::move(data));
    ds.y = std::move(labels);
    ds.num_classes = z;
    ds.name = images_path.filename().string();
    return ds;
}

/// Seeded permutation partition into train/val/test.
inline DataSplit split(const Dataset& ds, const SplitSpec& spec) {
    spec.validate();
    const std::size_t n = ds.size();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::mt19937_64 rng(spec.shuffle_seed);
    std::shuffle(perm.begin(), perm.end(), rng);

    const std::size_t n_val =
        static_cast<std::size_t>(std::llround(spec.val_fraction * static_cast<double>(n)));
    const std::size_t n_test =
        static_cast<std::size_t>(std::llround(spec.test_fraction * static_cast<double>(n)));
    if (n_val + n_test >= n) throw ConfigError("split leaves no training data");

    const std::vector<std::size_t> val_rows(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_val));
    const std::vector<std::size_t> test_rows(perm.begin() + static_cast<std::ptrdiff_t>(n_val),
                                             perm.begin() + static_cast<std::ptrdiff_t>(n_val + n_test));
    const std::vector<std::size_t> train_rows(perm.begin() + static_cast<std::ptrdiff_t>(n_val + n_test),
                                              perm.end());
    DataSplit out;
    out.train = detail::rows_subset(ds, train_rows);
    out.val = detail::rows_subset(ds, val_rows);
    out.test = detail::rows_subset(ds, test_rows);
    return out;
}

/// Minibatches in a fresh seeded order; the last partial batch is kept.
inline std::vector<Batch> batches(const Dataset& ds, std::size_t batch_size,
                                  std::uint64_t epoch_seed) {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    const std::size_t n = ds.size();
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::mt19937_64 rng(epoch_seed);
    std::shuffle(perm.begin(), perm.end(), rng);

    std::vector<Batch> out;
    const std::size_t d = ds.dims();
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t stop = std::min(n, start + batch_size);
        std::vector<double> data((stop - start) * d);
        std::vector<int> labels(stop - start);
        for (std::size_t i = start; i < stop; ++i) {
            const double* src = ds.x.data() + perm[i] * d;
            std::copy(src, src + d,
                      data.begin() + static_cast<std::ptrdiff_t>((i - start) * d));
            labels[i - start] = ds.y[perm[i]];
        }
        out.push_back(Batch{Tensor({stop - start, d}, std::move(data)), std::move(labels)});
    }
    return out;
}

}  // namespace autolora
