#pragma once

#include <cmath>
#include <cstddef>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "flowscope/csv.hpp"

namespace flowscope {

enum class ScheduleKind {
    RectifiedFlow, // (alpha_t, sigma_t) = (t, 1-t)
};

// Interpolation schedule. sigma_t vanishes at t=1, which makes the oracle
// coefficients singular there, so evaluations requested past 1-eps_clamp are
// clamped to 1-eps_clamp.
struct Schedule {
    ScheduleKind kind = ScheduleKind::RectifiedFlow;
    double eps_clamp = 1e-3;

    static Schedule rectified_flow(double eps_clamp = 1e-3) {
        if (!(eps_clamp > 0.0 && eps_clamp < 0.1))
            throw std::invalid_argument("Schedule: eps_clamp must be in (0, 0.1)");
        return Schedule{ScheduleKind::RectifiedFlow, eps_clamp};
    }
};

// Interpolation coefficients at an exact (unclamped) time. Used for building
// path samples and conditional targets; safe on all of [0, 1].
struct PathCoeffs {
    double alpha = 0.0;
    double sigma = 0.0;
    double alpha_dot = 0.0;
    double sigma_dot = 0.0;
};

inline PathCoeffs path_coeffs(const Schedule& schedule, double t) {
    if (!std::isfinite(t)) throw std::invalid_argument("path_coeffs: non-finite t");
    if (t < 0.0 || t > 1.0) throw std::invalid_argument("path_coeffs: t outside [0, 1]");
    switch (schedule.kind) {
    case ScheduleKind::RectifiedFlow:
        return PathCoeffs{t, 1.0 - t, 1.0, -1.0};
    }
    throw std::invalid_argument("path_coeffs: unknown schedule kind");
}

// Clamped evaluation including the oracle coefficients
//   coeff_a = alpha_dot - alpha * sigma_dot / sigma,   coeff_b = sigma_dot / sigma.
struct ScheduleEval {
    double t = 0.0; // the clamped time actually evaluated
    double alpha = 0.0;
    double sigma = 0.0;
    double alpha_dot = 0.0;
    double sigma_dot = 0.0;
    double coeff_a = 0.0;
    double coeff_b = 0.0;
};

inline ScheduleEval schedule_eval(const Schedule& schedule, double t) {
    if (!std::isfinite(t)) throw std::invalid_argument("schedule_eval: non-finite t");
    if (t < 0.0 || t > 1.0) throw std::invalid_argument("schedule_eval: t outside [0, 1]");
    const double tc = std::min(t, 1.0 - schedule.eps_clamp);
    const PathCoeffs pc = path_coeffs(schedule, tc);
    ScheduleEval ev;
    ev.t = tc;
    ev.alpha = pc.alpha;
    ev.sigma = pc.sigma;
    ev.alpha_dot = pc.alpha_dot;
    ev.sigma_dot = pc.sigma_dot;
    ev.coeff_b = pc.sigma_dot / pc.sigma;
    ev.coeff_a = pc.alpha_dot - pc.alpha * ev.coeff_b;
    return ev;
}

enum class GridKind {
    Uniform,
    Shifted,
    Stagewise,
};

// A sampling-time grid: strictly increasing left endpoints starting at 0.
// The terminal time 1 is held implicitly by the integrator, so an n-step
// grid costs exactly n velocity evaluations (NFE = n).
struct TimeGrid {
    std::vector<double> times;
    GridKind construction = GridKind::Uniform;

    std::size_t size() const { return times.size(); }
};

inline TimeGrid uniform_grid(std::size_t n) {
    if (n < 2) throw std::invalid_argument("uniform_grid: need n >= 2");
    TimeGrid grid;
    grid.construction = GridKind::Uniform;
    grid.times.resize(n);
    for (std::size_t i = 0; i < n; ++i)
        grid.times[i] = static_cast<double>(i) / static_cast<double>(n);
    return grid;
}

// Monotone remapping t -> s*t / (1 + (s-1)*t) with fixed points at 0 and 1.
// s < 1 packs steps toward early times, s > 1 toward late times.
inline double shift_time(double t, double s) {
    if (!(s > 0.0)) throw std::invalid_argument("shift_time: shift factor must be > 0");
    return s * t / (1.0 + (s - 1.0) * t);
}

inline TimeGrid shifted_grid(std::size_t n, double s) {
    if (!(s > 0.0)) throw std::invalid_argument("shifted_grid: shift factor must be > 0");
    TimeGrid grid = uniform_grid(n);
    grid.construction = GridKind::Shifted;
    if (s == 1.0) return grid; // identity, keep uniform times bit-exact
    for (double& t : grid.times) t = shift_time(t, s);
    return grid;
}

// n1 uniform left endpoints on [0, t_split) followed by n2 on [t_split, 1).
inline TimeGrid stagewise_grid(std::size_t n1, std::size_t n2, double t_split) {
    if (n1 < 1 || n2 < 1) throw std::invalid_argument("stagewise_grid: need n1, n2 >= 1");
    if (!(t_split > 0.0 && t_split < 1.0))
        throw std::invalid_argument("stagewise_grid: t_split must be in (0, 1)");
    TimeGrid grid;
    grid.construction = GridKind::Stagewise;
    grid.times.reserve(n1 + n2);
    for (std::size_t i = 0; i < n1; ++i)
        grid.times.push_back(t_split * static_cast<double>(i) / static_cast<double>(n1));
    for (std::size_t i = 0; i < n2; ++i)
        grid.times.push_back(t_split +
                             (1.0 - t_split) * static_cast<double>(i) / static_cast<double>(n2));
    return grid;
}

inline double fraction_below(const TimeGrid& grid, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0))
        throw std::invalid_argument("fraction_below: threshold must be in (0, 1)");
    std::size_t count = 0;
    for (double t : grid.times)
        if (t < threshold) ++count;
    return static_cast<double>(count) / static_cast<double>(grid.times.size());
}

// One time per row, 17 significant digits (golden-test format).
inline void save_csv(const TimeGrid& grid, std::ostream& out) {
    for (double t : grid.times) out << format_double(t) << "\n";
}

} // namespace flowscope
