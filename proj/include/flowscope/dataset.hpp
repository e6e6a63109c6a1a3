#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "flowscope/csv.hpp"
#include "flowscope/errors.hpp"
#include "flowscope/matrix.hpp"
#include "flowscope/numerics.hpp"
#include "flowscope/rng.hpp"

namespace flowscope {

// The empirical mixture {x1_i}: an N x D matrix with optional class labels.
// Immutable after construction; queries and views are safe for concurrent
// readers.
class Dataset {
public:
    Dataset(Matrix points, std::optional<std::vector<std::uint32_t>> labels = {},
            std::string name = {})
        : points_(std::move(points)), labels_(std::move(labels)), name_(std::move(name)) {
        if (points_.rows() < 1 || points_.cols() < 1)
            throw std::invalid_argument("Dataset: need N >= 1 and D >= 1");
        for (double v : points_.flat())
            if (!std::isfinite(v)) throw std::invalid_argument("Dataset: non-finite entry");
        if (labels_) {
            if (labels_->size() != points_.rows())
                throw std::invalid_argument("Dataset: label count does not match N");
            validate_labels();
        }
        double acc = 0.0;
        for (std::size_t i = 0; i < points_.rows(); ++i) acc += squared_norm(points_.row(i));
        rms_norm_ = std::sqrt(acc / static_cast<double>(points_.rows()));
    }

    std::size_t size() const { return points_.rows(); }
    std::size_t dim() const { return points_.cols(); }
    std::span<const double> point(std::size_t i) const { return points_.row(i); }
    const Matrix& points() const { return points_; }
    const std::string& name() const { return name_; }

    bool has_labels() const { return labels_.has_value(); }
    std::uint32_t label(std::size_t i) const { return (*labels_)[i]; }
    std::span<const std::uint32_t> labels() const { return *labels_; }
    std::size_t num_classes() const { return num_classes_; }

    // sqrt(mean_i ||x1_i||^2), the data scale used for relative distances.
    double rms_norm() const { return rms_norm_; }

private:
    void validate_labels() {
        std::uint32_t max_id = 0;
        for (std::uint32_t y : *labels_) max_id = std::max(max_id, y);
        num_classes_ = static_cast<std::size_t>(max_id) + 1;
        std::vector<bool> seen(num_classes_, false);
        for (std::uint32_t y : *labels_) seen[y] = true;
        if (!std::all_of(seen.begin(), seen.end(), [](bool b) { return b; }))
            throw std::invalid_argument("Dataset: class ids must be contiguous from 0");
    }

    Matrix points_;
    std::optional<std::vector<std::uint32_t>> labels_;
    std::string name_;
    std::size_t num_classes_ = 0;
    double rms_norm_ = 0.0;
};

// Read-only view over the rows of one class.
class ClassView {
public:
    ClassView(const Dataset& parent, std::uint32_t class_id, std::vector<std::uint32_t> rows)
        : parent_(&parent), class_id_(class_id), rows_(std::move(rows)) {}

    std::size_t size() const { return rows_.size(); }
    std::size_t dim() const { return parent_->dim(); }
    std::span<const double> point(std::size_t i) const { return parent_->point(rows_[i]); }

    std::uint32_t class_id() const { return class_id_; }
    const Dataset& parent() const { return *parent_; }
    std::span<const std::uint32_t> row_indices() const { return rows_; }

private:
    const Dataset* parent_;
    std::uint32_t class_id_;
    std::vector<std::uint32_t> rows_;
};

// Anything exposing an N x D point collection (Dataset, ClassView).
template <class T>
concept PointSet = requires(const T& set, std::size_t i) {
    { set.size() } -> std::convertible_to<std::size_t>;
    { set.dim() } -> std::convertible_to<std::size_t>;
    { set.point(i) } -> std::convertible_to<std::span<const double>>;
};

inline ClassView class_subset(const Dataset& data, std::uint32_t class_id) {
    if (!data.has_labels()) throw std::invalid_argument("class_subset: dataset has no labels");
    if (class_id >= data.num_classes())
        throw std::invalid_argument("class_subset: unknown class id " + std::to_string(class_id));
    std::vector<std::uint32_t> rows;
    for (std::size_t i = 0; i < data.size(); ++i)
        if (data.label(i) == class_id) rows.push_back(static_cast<std::uint32_t>(i));
    return ClassView(data, class_id, std::move(rows));
}

inline Dataset gen_gaussian(std::size_t n, std::size_t d, std::uint64_t seed,
                            std::string name = "gaussian") {
    if (n < 1 || d < 1) throw std::invalid_argument("gen_gaussian: need n >= 1 and d >= 1");
    Matrix points(n, d);
    Rng rng(seed);
    for (double& v : points.flat()) v = rng.normal();
    return Dataset(std::move(points), std::nullopt, std::move(name));
}

// Labeled isotropic Gaussian blobs, one per center row.
inline Dataset gen_mixture(const Matrix& centers, double spread, std::size_t n_per_class,
                           std::uint64_t seed, std::string name = "mixture") {
    if (centers.rows() < 1 || centers.cols() < 1)
        throw std::invalid_argument("gen_mixture: need K >= 1 and D >= 1");
    if (!(spread > 0.0)) throw std::invalid_argument("gen_mixture: spread must be > 0");
    if (n_per_class < 1) throw std::invalid_argument("gen_mixture: need n_per_class >= 1");
    for (double v : centers.flat())
        if (!std::isfinite(v)) throw std::invalid_argument("gen_mixture: non-finite center");
    const std::size_t k = centers.rows();
    const std::size_t d = centers.cols();
    Matrix points(k * n_per_class, d);
    std::vector<std::uint32_t> labels(k * n_per_class);
    Rng rng(seed);
    for (std::size_t c = 0; c < k; ++c) {
        const auto center = centers.row(c);
        for (std::size_t j = 0; j < n_per_class; ++j) {
            auto row = points.row(c * n_per_class + j);
            for (std::size_t m = 0; m < d; ++m) row[m] = center[m] + spread * rng.normal();
            labels[c * n_per_class + j] = static_cast<std::uint32_t>(c);
        }
    }
    return Dataset(std::move(points), std::move(labels), std::move(name));
}

// K centers evenly spaced on a circle of the given radius (2-D toy layout).
inline Matrix ring_centers(std::size_t k, double radius) {
    Matrix centers(k, 2);
    for (std::size_t i = 0; i < k; ++i) {
        const double theta = 2.0 * 3.141592653589793238462643383279502884 *
                             static_cast<double>(i) / static_cast<double>(k);
        centers(i, 0) = radius * std::cos(theta);
        centers(i, 1) = radius * std::sin(theta);
    }
    return centers;
}

// Per-coordinate mean 0 / variance 1 (population convention, 1/N). Coordinates
// with zero variance are mapped to 0.
inline Dataset normalize(const Dataset& data) {
    if (data.size() < 2) throw std::invalid_argument("normalize: need N >= 2");
    const std::size_t n = data.size(), d = data.dim();
    std::vector<double> mean(d, 0.0), var(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        auto row = data.point(i);
        for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
    }
    for (double& m : mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto row = data.point(i);
        for (std::size_t j = 0; j < d; ++j) {
            const double c = row[j] - mean[j];
            var[j] += c * c;
        }
    }
    for (double& v : var) v /= static_cast<double>(n);
    Matrix out(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        auto row = data.point(i);
        for (std::size_t j = 0; j < d; ++j)
            out(i, j) = var[j] > 0.0 ? (row[j] - mean[j]) / std::sqrt(var[j]) : 0.0;
    }
    std::optional<std::vector<std::uint32_t>> labels;
    if (data.has_labels())
        labels.emplace(data.labels().begin(), data.labels().end());
    return Dataset(std::move(out), std::move(labels), data.name());
}

// Exhaustive scan; ties broken by lowest row index.
template <PointSet Set>
std::pair<std::size_t, double> nearest_neighbor(const Set& set, std::span<const double> x) {
    if (x.size() != set.dim())
        throw std::invalid_argument("nearest_neighbor: query dimension mismatch");
    std::size_t best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < set.size(); ++i) {
        const double d2 = squared_distance(set.point(i), x);
        if (d2 < best_d2) {
            best_d2 = d2;
            best = i;
        }
    }
    return {best, std::sqrt(best_d2)};
}

enum class DataFormat { Csv, Binary };

namespace detail {

inline void write_u64le(std::ostream& out, std::uint64_t v) {
    char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(buf, 8);
}

inline void write_u32le(std::ostream& out, std::uint32_t v) {
    char buf[4];
    for (int i = 0; i < 4; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(buf, 4);
}

inline void write_f64le(std::ostream& out, double v) {
    write_u64le(out, std::bit_cast<std::uint64_t>(v));
}

inline std::uint64_t read_u64le(std::istream& in, std::string_view what) {
    unsigned char buf[8];
    if (!in.read(reinterpret_cast<char*>(buf), 8))
        throw FormatError("truncated payload while reading " + std::string(what));
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

inline std::uint32_t read_u32le(std::istream& in, std::string_view what) {
    unsigned char buf[4];
    if (!in.read(reinterpret_cast<char*>(buf), 4))
        throw FormatError("truncated payload while reading " + std::string(what));
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[i]) << (8 * i);
    return v;
}

inline double read_f64le(std::istream& in, std::string_view what) {
    return std::bit_cast<double>(read_u64le(in, what));
}

} // namespace detail

inline void save(const Dataset& data, const std::filesystem::path& path, DataFormat format) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open for writing: " + path.string());
    const std::size_t n = data.size(), d = data.dim();
    if (format == DataFormat::Csv) {
        for (std::size_t j = 0; j < d; ++j) out << (j ? "," : "") << "dim_" << j;
        if (data.has_labels()) out << ",label";
        out << "\n";
        for (std::size_t i = 0; i < n; ++i) {
            auto row = data.point(i);
            for (std::size_t j = 0; j < d; ++j) out << (j ? "," : "") << format_double(row[j]);
            if (data.has_labels()) out << "," << data.label(i);
            out << "\n";
        }
    } else {
        out.write("FSDS", 4);
        out.put(static_cast<char>(1)); // version
        detail::write_u64le(out, n);
        detail::write_u64le(out, d);
        out.put(data.has_labels() ? static_cast<char>(1) : static_cast<char>(0));
        for (std::size_t i = 0; i < n; ++i)
            for (double v : data.point(i)) detail::write_f64le(out, v);
        if (data.has_labels())
            for (std::size_t i = 0; i < n; ++i) detail::write_u32le(out, data.label(i));
    }
    if (!out) throw FormatError("write failed: " + path.string());
}

inline Dataset load(const std::filesystem::path& path, DataFormat format) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open: " + path.string());
    std::string name = path.stem().string();
    if (format == DataFormat::Csv) {
        std::string line;
        if (!std::getline(in, line)) throw FormatError(path.string() + ": missing header");
        if (!line.empty() && line.back() == '\r') line.pop_back();
        auto header = csv_split(line);
        bool has_labels = !header.empty() && header.back() == "label";
        const std::size_t d = header.size() - (has_labels ? 1 : 0);
        if (d == 0) throw FormatError(path.string() + ": malformed header");
        for (std::size_t j = 0; j < d; ++j)
            if (header[j] != "dim_" + std::to_string(j))
                throw FormatError(path.string() + ": malformed header column " + std::to_string(j));
        std::vector<double> values;
        std::vector<std::uint32_t> labels;
        std::size_t row = 0;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            ++row;
            auto fields = csv_split(line);
            if (fields.size() != header.size())
                throw FormatError(path.string() + ": row " + std::to_string(row) + " has " +
                                  std::to_string(fields.size()) + " fields, expected " +
                                  std::to_string(header.size()));
            for (std::size_t j = 0; j < d; ++j) {
                const double v =
                    parse_double(fields[j], path.string() + ": row " + std::to_string(row) +
                                                ", column " + std::to_string(j));
                if (!std::isfinite(v))
                    throw FormatError(path.string() + ": non-finite entry at row " +
                                      std::to_string(row) + ", column " + std::to_string(j));
                values.push_back(v);
            }
            if (has_labels)
                labels.push_back(static_cast<std::uint32_t>(
                    parse_double(fields[d], path.string() + ": row " + std::to_string(row) +
                                                ", label column")));
        }
        if (row == 0) throw FormatError(path.string() + ": no data rows");
        Matrix points(row, d, std::move(values));
        std::optional<std::vector<std::uint32_t>> maybe_labels;
        if (has_labels) maybe_labels = std::move(labels);
        return Dataset(std::move(points), std::move(maybe_labels), std::move(name));
    }

    char magic[4];
    if (!in.read(magic, 4) || std::string_view(magic, 4) != "FSDS")
        throw FormatError(path.string() + ": bad magic, not an FSDS file");
    const int version = in.get();
    if (version != 1) throw FormatError(path.string() + ": unsupported FSDS version");
    const std::uint64_t n = detail::read_u64le(in, "N");
    const std::uint64_t d = detail::read_u64le(in, "D");
    const int has_labels = in.get();
    if (has_labels != 0 && has_labels != 1)
        throw FormatError(path.string() + ": bad has_labels flag");
    if (n == 0 || d == 0) throw FormatError(path.string() + ": empty dataset");
    Matrix points(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        auto row = points.row(i);
        for (std::size_t j = 0; j < d; ++j)
            row[j] = detail::read_f64le(in, "row " + std::to_string(i));
    }
    std::optional<std::vector<std::uint32_t>> labels;
    if (has_labels) {
        labels.emplace(n);
        for (std::size_t i = 0; i < n; ++i)
            (*labels)[i] = detail::read_u32le(in, "label " + std::to_string(i));
    }
    return Dataset(std::move(points), std::move(labels), std::move(name));
}

} // namespace flowscope
