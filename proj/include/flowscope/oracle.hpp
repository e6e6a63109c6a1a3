#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "flowscope/dataset.hpp"
#include "flowscope/matrix.hpp"
#include "flowscope/numerics.hpp"
#include "flowscope/parallel.hpp"
#include "flowscope/schedule.hpp"

namespace flowscope {

// Normalized posterior weights of the data points given a noisy state x_t:
// a softmax over -||x_t - alpha_t*x1_i||^2 / (2*sigma_t^2). Kept in log domain
// because at D ~ 10^3..10^4 the exponents reach magnitudes where naive
// exponentiation under/overflows.
struct PosteriorWeights {
    std::vector<double> log_weights; // normalized so logsumexp == 0
    std::vector<double> weights;
    std::size_t top1_index = 0; // argmax, ties -> lowest index
    double top1_weight = 0.0;
};

// x_t = alpha_t*x1 + sigma_t*x0 (exact, unclamped coefficients).
inline std::vector<double> interpolate(std::span<const double> x0, std::span<const double> x1,
                                       double t, const Schedule& schedule) {
    if (x0.size() != x1.size()) throw std::invalid_argument("interpolate: dimension mismatch");
    const PathCoeffs pc = path_coeffs(schedule, t);
    std::vector<double> xt(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) xt[i] = pc.alpha * x1[i] + pc.sigma * x0[i];
    return xt;
}

// Conditional target alpha_dot*x1 + sigma_dot*x0; x1 - x0 under rectified flow.
inline std::vector<double> conditional_velocity(std::span<const double> x0,
                                                std::span<const double> x1, double t,
                                                const Schedule& schedule) {
    if (x0.size() != x1.size())
        throw std::invalid_argument("conditional_velocity: dimension mismatch");
    const PathCoeffs pc = path_coeffs(schedule, t);
    std::vector<double> v(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) v[i] = pc.alpha_dot * x1[i] + pc.sigma_dot * x0[i];
    return v;
}

template <PointSet Set>
PosteriorWeights posterior_weights(std::span<const double> xt, double t, const Set& set,
                                   const Schedule& schedule) {
    if (set.size() == 0) throw std::invalid_argument("posterior_weights: empty data");
    if (xt.size() != set.dim())
        throw std::invalid_argument("posterior_weights: dimension mismatch");
    const ScheduleEval ev = schedule_eval(schedule, t);
    const std::size_t n = set.size();
    const double inv_two_sigma2 = 1.0 / (2.0 * ev.sigma * ev.sigma);

    PosteriorWeights post;
    post.log_weights.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto row = set.point(i);
        double d2 = 0.0;
        for (std::size_t j = 0; j < xt.size(); ++j) {
            const double diff = xt[j] - ev.alpha * row[j];
            d2 += diff * diff;
        }
        post.log_weights[i] = -d2 * inv_two_sigma2;
    }

    const auto [min_it, max_it] =
        std::minmax_element(post.log_weights.begin(), post.log_weights.end());
    post.weights.resize(n);
    if (*min_it == *max_it) {
        // All exponents equal (e.g. t=0, where alpha=0): exactly uniform.
        const double w = 1.0 / static_cast<double>(n);
        const double lw = -std::log(static_cast<double>(n));
        std::fill(post.weights.begin(), post.weights.end(), w);
        std::fill(post.log_weights.begin(), post.log_weights.end(), lw);
        post.top1_index = 0;
        post.top1_weight = w;
        return post;
    }

    const double lse = logsumexp(post.log_weights);
    std::size_t top = 0;
    double top_lw = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        post.log_weights[i] -= lse;
        post.weights[i] = std::exp(post.log_weights[i]);
        if (post.log_weights[i] > top_lw) {
            top_lw = post.log_weights[i];
            top = i;
        }
    }
    post.top1_index = top;
    post.top1_weight = post.weights[top];
    return post;
}

// Nadaraya-Watson posterior mean E[x1 | x_t] = sum_i gamma_i * x1_i.
template <PointSet Set>
std::vector<double> posterior_mean(std::span<const double> xt, double t, const Set& set,
                                   const Schedule& schedule) {
    const PosteriorWeights post = posterior_weights(xt, t, set, schedule);
    std::vector<double> mean(set.dim(), 0.0);
    for (std::size_t i = 0; i < set.size(); ++i) {
        const double w = post.weights[i];
        if (w == 0.0) continue;
        auto row = set.point(i);
        for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += w * row[j];
    }
    return mean;
}

// Closed-form marginal velocity  u*(x_t, t) = A_t * E[x1|x_t] + B_t * x_t.
template <PointSet Set>
std::vector<double> oracle_velocity(std::span<const double> xt, double t, const Set& set,
                                    const Schedule& schedule) {
    const ScheduleEval ev = schedule_eval(schedule, t);
    std::vector<double> v = posterior_mean(xt, t, set, schedule);
    for (std::size_t j = 0; j < v.size(); ++j) v[j] = ev.coeff_a * v[j] + ev.coeff_b * xt[j];
    return v;
}

// Log density of the path marginal, the N-component Gaussian mixture
// (1/N) * sum_i Normal(x_t; alpha_t*x1_i, sigma_t^2 I). Serves as the
// brute-force reference for the posterior-weight tests.
template <PointSet Set>
double mixture_log_density(std::span<const double> xt, double t, const Set& set,
                           const Schedule& schedule) {
    if (set.size() == 0) throw std::invalid_argument("mixture_log_density: empty data");
    if (xt.size() != set.dim())
        throw std::invalid_argument("mixture_log_density: dimension mismatch");
    const ScheduleEval ev = schedule_eval(schedule, t);
    const double inv_two_sigma2 = 1.0 / (2.0 * ev.sigma * ev.sigma);
    const std::size_t n = set.size();
    std::vector<double> exponents(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto row = set.point(i);
        double d2 = 0.0;
        for (std::size_t j = 0; j < xt.size(); ++j) {
            const double diff = xt[j] - ev.alpha * row[j];
            d2 += diff * diff;
        }
        exponents[i] = -d2 * inv_two_sigma2;
    }
    const double two_pi = 2.0 * 3.141592653589793238462643383279502884;
    return -std::log(static_cast<double>(n)) -
           0.5 * static_cast<double>(xt.size()) * std::log(two_pi * ev.sigma * ev.sigma) +
           logsumexp(exponents);
}

// Per-dimension MSE between the oracle velocity at the constructed x_t and the
// conditional target of the generating pair.
template <PointSet Set>
double target_gap(std::span<const double> x0, std::size_t x1_index, double t, const Set& set,
                  const Schedule& schedule) {
    if (x1_index >= set.size()) throw std::invalid_argument("target_gap: row index out of range");
    const auto x1 = set.point(x1_index);
    const std::vector<double> xt = interpolate(x0, x1, t, schedule);
    const std::vector<double> u_star = oracle_velocity(xt, t, set, schedule);
    const std::vector<double> u_cond = conditional_velocity(x0, x1, t, schedule);
    return squared_distance(u_star, u_cond) / static_cast<double>(set.dim());
}

// Batch oracle evaluation: one velocity row per query row. Queries are
// independent, so rows may be fanned out across workers; results do not
// depend on the partitioning.
template <PointSet Set>
Matrix oracle_velocity_batch(const Matrix& queries, double t, const Set& set,
                             const Schedule& schedule, int workers = 1) {
    if (queries.cols() != set.dim())
        throw std::invalid_argument("oracle_velocity_batch: dimension mismatch");
    Matrix out(queries.rows(), queries.cols());
    parallel_for(queries.rows(), workers, [&](std::size_t i) {
        const std::vector<double> v = oracle_velocity(queries.row(i), t, set, schedule);
        std::copy(v.begin(), v.end(), out.row(i).begin());
    });
    return out;
}

} // namespace flowscope
