#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <utility>

namespace flowscope {

// Pairwise (cascade) summation: O(log n) error growth and a fixed association
// order, so reductions are reproducible regardless of how the values were
// produced.
inline double pairwise_sum(std::span<const double> values) {
    const std::size_t n = values.size();
    if (n <= 8) {
        double acc = 0.0;
        for (double v : values) acc += v;
        return acc;
    }
    const std::size_t half = n / 2;
    return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

inline double pairwise_mean(std::span<const double> values) {
    return values.empty() ? 0.0 : pairwise_sum(values) / static_cast<double>(values.size());
}

// Population (1/n) standard deviation around the pairwise mean.
inline std::pair<double, double> mean_and_stddev(std::span<const double> values) {
    if (values.empty()) return {0.0, 0.0};
    const double mean = pairwise_mean(values);
    double acc = 0.0;
    std::size_t i = 0;
    // Two-pass: pairwise over blocks of squared deviations.
    constexpr std::size_t kBlock = 256;
    double blocks_sum = 0.0;
    while (i < values.size()) {
        const std::size_t end = std::min(i + kBlock, values.size());
        acc = 0.0;
        for (std::size_t j = i; j < end; ++j) {
            const double d = values[j] - mean;
            acc += d * d;
        }
        blocks_sum += acc;
        i = end;
    }
    const double var = blocks_sum / static_cast<double>(values.size());
    return {mean, var > 0.0 ? std::sqrt(var) : 0.0};
}

inline double logsumexp(std::span<const double> values) {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : values) m = std::max(m, v);
    if (!std::isfinite(m)) return m; // all -inf (or empty)
    double acc = 0.0;
    for (double v : values) acc += std::exp(v - m);
    return m + std::log(acc);
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

inline double squared_norm(std::span<const double> a) {
    double acc = 0.0;
    for (double v : a) acc += v * v;
    return acc;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

} // namespace flowscope
