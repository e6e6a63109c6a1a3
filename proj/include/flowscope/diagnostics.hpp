#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "flowscope/csv.hpp"
#include "flowscope/dataset.hpp"
#include "flowscope/model.hpp"
#include "flowscope/numerics.hpp"
#include "flowscope/oracle.hpp"
#include "flowscope/parallel.hpp"
#include "flowscope/rng.hpp"
#include "flowscope/sampler.hpp"
#include "flowscope/schedule.hpp"
#include "flowscope/velocity_field.hpp"

namespace flowscope {

// One sweep statistic: mean +/- std (population, over n_mc replicates) per
// axis value. Reproducible given (seed, config); replicate cells use seeds
// derived from (seed, cell index), so results are independent of worker count.
struct SweepSeries {
    std::string statistic_name;
    std::vector<double> axis;
    std::vector<double> mean;
    std::vector<double> std_dev;
    std::size_t n_mc = 0;
    std::uint64_t seed = 0;
};

// t values used by the sweep commands: 50 uniform points on [0, 0.98] plus a
// dense band across the stage transition.
inline std::vector<double> default_sweep_grid() {
    std::vector<double> grid;
    for (std::size_t i = 0; i < 50; ++i) grid.push_back(static_cast<double>(i) / 50.0);
    for (std::size_t j = 1; j <= 15; ++j) grid.push_back(static_cast<double>(j) / 100.0);
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    return grid;
}

namespace detail_sweep {

// Generic (t, replicate) cell harness. cell(axis_index, rng) -> statistic.
template <class Cell>
SweepSeries run_cells(std::string name, std::span<const double> axis, std::size_t n_mc,
                      std::uint64_t seed, int workers, Cell&& cell) {
    if (axis.empty()) throw std::invalid_argument("sweep: empty grid");
    if (n_mc < 1) throw std::invalid_argument("sweep: need n_mc >= 1");
    SweepSeries series;
    series.statistic_name = std::move(name);
    series.axis.assign(axis.begin(), axis.end());
    series.n_mc = n_mc;
    series.seed = seed;
    std::vector<double> values(axis.size() * n_mc);
    parallel_for(values.size(), workers, [&](std::size_t idx) {
        const std::size_t ti = idx / n_mc;
        Rng rng(Rng::derive(seed, idx));
        values[idx] = cell(ti, rng);
    });
    series.mean.resize(axis.size());
    series.std_dev.resize(axis.size());
    for (std::size_t ti = 0; ti < axis.size(); ++ti) {
        const auto [m, s] =
            mean_and_stddev(std::span<const double>(values.data() + ti * n_mc, n_mc));
        series.mean[ti] = m;
        series.std_dev[ti] = s;
    }
    return series;
}

// Fresh path sample x_t = alpha_t*x1 + sigma_t*x0 with x0 ~ N(0, I) and x1 a
// uniform row; the analytic training-time distribution, not a model rollout.
template <PointSet Set>
std::pair<std::vector<double>, std::size_t> draw_path_sample(const Set& set, double t,
                                                             const Schedule& schedule, Rng& rng,
                                                             std::vector<double>& x0_out) {
    x0_out.resize(set.dim());
    for (double& v : x0_out) v = rng.normal();
    const std::size_t row = rng.uniform_index(set.size());
    return {interpolate(x0_out, set.point(row), t, schedule), row};
}

} // namespace detail_sweep

// Mean per-dimension MSE between the oracle velocity and the conditional
// target across timesteps.
template <PointSet Set>
SweepSeries target_mse_sweep(const Set& data, const Schedule& schedule,
                             std::span<const double> t_grid, std::size_t n_mc, std::uint64_t seed,
                             int workers = 1) {
    return detail_sweep::run_cells(
        "target_mse", t_grid, n_mc, seed, workers, [&](std::size_t ti, Rng& rng) {
            std::vector<double> x0(data.dim());
            for (double& v : x0) v = rng.normal();
            const std::size_t row = rng.uniform_index(data.size());
            return target_gap(x0, row, t_grid[ti], data, schedule);
        });
}

// Mean top-1 posterior weight across timesteps (stage-transition probe).
template <PointSet Set>
SweepSeries top1_sweep(const Set& data, const Schedule& schedule, std::span<const double> t_grid,
                       std::size_t n_mc, std::uint64_t seed, int workers = 1) {
    return detail_sweep::run_cells(
        "top1_weight", t_grid, n_mc, seed, workers, [&](std::size_t ti, Rng& rng) {
            std::vector<double> x0;
            const auto [xt, row] =
                detail_sweep::draw_path_sample(data, t_grid[ti], schedule, rng, x0);
            (void)row;
            return posterior_weights(xt, t_grid[ti], data, schedule).top1_weight;
        });
}

struct DimSizeCell {
    std::size_t dim = 0;
    std::size_t size = 0;
    SweepSeries series;
};

// One top-1 sweep per (D, N) pair over freshly generated unit-Gaussian data.
inline std::vector<DimSizeCell> dim_size_sweep(std::span<const std::size_t> dims,
                                               std::span<const std::size_t> sizes,
                                               std::span<const double> t_grid, std::size_t n_mc,
                                               std::uint64_t seed, const Schedule& schedule,
                                               int workers = 1) {
    if (dims.empty() || sizes.empty())
        throw std::invalid_argument("dim_size_sweep: empty dims or sizes");
    std::vector<DimSizeCell> table;
    std::size_t cell_idx = 0;
    for (std::size_t d : dims) {
        for (std::size_t n : sizes) {
            const std::uint64_t data_seed = Rng::derive(seed, 2 * cell_idx);
            const std::uint64_t sweep_seed = Rng::derive(seed, 2 * cell_idx + 1);
            const Dataset data = gen_gaussian(n, d, data_seed);
            table.push_back({d, n, top1_sweep(data, schedule, t_grid, n_mc, sweep_seed, workers)});
            ++cell_idx;
        }
    }
    return table;
}

// Per-timestep prediction MSE against the conditional and the oracle target,
// both measured on the same path samples so the gap is not confounded by
// sampling noise. Labeled data conditions the field input and the oracle
// target on the drawn row's class.
inline std::pair<SweepSeries, SweepSeries> model_loss_sweep(const VelocityField& model,
                                                            const Dataset& data,
                                                            const Schedule& schedule,
                                                            std::span<const double> t_grid,
                                                            std::size_t n_mc, std::uint64_t seed,
                                                            int workers = 1) {
    if (t_grid.empty()) throw std::invalid_argument("model_loss_sweep: empty grid");
    if (n_mc < 1) throw std::invalid_argument("model_loss_sweep: need n_mc >= 1");
    if (model.dim() != data.dim())
        throw std::invalid_argument("model_loss_sweep: model/data dim mismatch");

    std::vector<ClassView> views;
    if (data.has_labels())
        for (std::uint32_t y = 0; y < data.num_classes(); ++y)
            views.push_back(class_subset(data, y));

    const std::size_t cells = t_grid.size() * n_mc;
    std::vector<double> vs_cond(cells), vs_oracle(cells);
    parallel_for(cells, workers, [&](std::size_t idx) {
        const std::size_t ti = idx / n_mc;
        const double t = t_grid[ti];
        Rng rng(Rng::derive(seed, idx));
        std::vector<double> x0(data.dim());
        for (double& v : x0) v = rng.normal();
        const std::size_t row = rng.uniform_index(data.size());
        const auto x1 = data.point(row);
        const std::vector<double> xt = interpolate(x0, x1, t, schedule);
        const auto cls =
            data.has_labels() ? std::optional(data.label(row)) : std::optional<std::uint32_t>{};
        const std::vector<double> pred = model.evaluate(xt, t, cls);
        const std::vector<double> u_cond = conditional_velocity(x0, x1, t, schedule);
        std::vector<double> u_star;
        if (data.has_labels())
            u_star = oracle_velocity(xt, t, views[data.label(row)], schedule);
        else
            u_star = oracle_velocity(xt, t, data, schedule);
        const double inv_d = 1.0 / static_cast<double>(data.dim());
        vs_cond[idx] = squared_distance(pred, u_cond) * inv_d;
        vs_oracle[idx] = squared_distance(pred, u_star) * inv_d;
    });

    auto reduce = [&](std::string name, const std::vector<double>& values) {
        SweepSeries s;
        s.statistic_name = std::move(name);
        s.axis.assign(t_grid.begin(), t_grid.end());
        s.n_mc = n_mc;
        s.seed = seed;
        s.mean.resize(t_grid.size());
        s.std_dev.resize(t_grid.size());
        for (std::size_t ti = 0; ti < t_grid.size(); ++ti) {
            const auto [m, sd] =
                mean_and_stddev(std::span<const double>(values.data() + ti * n_mc, n_mc));
            s.mean[ti] = m;
            s.std_dev[ti] = sd;
        }
        return s;
    };
    return {reduce("model_loss_conditional", vs_cond), reduce("model_loss_oracle", vs_oracle)};
}

// Mean L2 norm of a field's predictions at path samples.
inline SweepSeries velocity_norm_sweep(const VelocityField& field, const Dataset& data,
                                       const Schedule& schedule, std::span<const double> t_grid,
                                       std::size_t n_mc, std::uint64_t seed, int workers = 1) {
    if (field.dim() != data.dim())
        throw std::invalid_argument("velocity_norm_sweep: field/data dim mismatch");
    return detail_sweep::run_cells(
        "velocity_norm", t_grid, n_mc, seed, workers, [&](std::size_t ti, Rng& rng) {
            const double t = t_grid[ti];
            std::vector<double> x0(data.dim());
            for (double& v : x0) v = rng.normal();
            const std::size_t row = rng.uniform_index(data.size());
            const std::vector<double> xt = interpolate(x0, data.point(row), t, schedule);
            const auto cls = data.has_labels() ? std::optional(data.label(row))
                                               : std::optional<std::uint32_t>{};
            return std::sqrt(squared_norm(field.evaluate(xt, t, cls)));
        });
}

// Mean L2 distance between conditional and null-class predictions.
inline SweepSeries cond_uncond_divergence(const MlpVelocityModel& model, const Dataset& data,
                                          const Schedule& schedule, std::span<const double> t_grid,
                                          std::size_t n_mc, std::uint64_t seed, int workers = 1) {
    if (model.num_classes() == 0)
        throw std::invalid_argument("cond_uncond_divergence: model has no class support");
    if (!data.has_labels())
        throw std::invalid_argument("cond_uncond_divergence: data has no labels");
    if (model.dim() != data.dim())
        throw std::invalid_argument("cond_uncond_divergence: model/data dim mismatch");
    return detail_sweep::run_cells(
        "cond_uncond_divergence", t_grid, n_mc, seed, workers, [&](std::size_t ti, Rng& rng) {
            const double t = t_grid[ti];
            std::vector<double> x0(data.dim());
            for (double& v : x0) v = rng.normal();
            const std::size_t row = rng.uniform_index(data.size());
            const std::vector<double> xt = interpolate(x0, data.point(row), t, schedule);
            const std::vector<double> v_c = model.forward(xt, t, data.label(row));
            const std::vector<double> v_u = model.forward(xt, t, std::nullopt);
            return std::sqrt(squared_distance(v_c, v_u));
        });
}

// Terminal-state nearest-neighbor distance (relative to the dataset rms norm)
// of mixed sampling, per switch point. Seeds are shared across switch points
// (common random numbers), so the curve is a paired comparison.
inline SweepSeries memorization_curve(const VelocityField& oracle_field,
                                      const VelocityField& model_field, const Dataset& data,
                                      std::span<const double> t_switch_list, std::size_t n_seeds,
                                      const TimeGrid& grid, std::uint64_t seed, int workers = 1) {
    if (t_switch_list.empty()) throw std::invalid_argument("memorization_curve: empty list");
    if (n_seeds < 1) throw std::invalid_argument("memorization_curve: need n_seeds >= 1");
    SweepSeries series;
    series.statistic_name = "memorization";
    series.axis.assign(t_switch_list.begin(), t_switch_list.end());
    series.n_mc = n_seeds;
    series.seed = seed;
    const std::size_t cells = t_switch_list.size() * n_seeds;
    std::vector<double> values(cells);
    parallel_for(cells, workers, [&](std::size_t idx) {
        const std::size_t k = idx / n_seeds;
        const std::size_t j = idx % n_seeds;
        Rng rng(Rng::derive(seed, j)); // same draw for every t_switch
        std::vector<double> x0(data.dim());
        for (double& v : x0) v = rng.normal();
        MixedConfig cfg;
        cfg.t_switch = t_switch_list[k];
        cfg.grid = grid;
        if (data.has_labels())
            cfg.cls = static_cast<std::uint32_t>(rng.uniform_index(data.num_classes()));
        const Trajectory traj = mixed_sample(oracle_field, model_field, cfg, x0);
        values[idx] = nearest_neighbor(data, traj.terminal()).second / data.rms_norm();
    });
    series.mean.resize(t_switch_list.size());
    series.std_dev.resize(t_switch_list.size());
    for (std::size_t k = 0; k < t_switch_list.size(); ++k) {
        const auto [m, s] =
            mean_and_stddev(std::span<const double>(values.data() + k * n_seeds, n_seeds));
        series.mean[k] = m;
        series.std_dev[k] = s;
    }
    return series;
}

// CSV schema shared by all sweep outputs:
//   sweep_name,param_json,t,mean,std,n_mc,seed
inline void write_sweep_header(std::ostream& out) {
    out << "sweep_name,param_json,t,mean,std,n_mc,seed\n";
}

inline void append_sweep_csv(std::ostream& out, const SweepSeries& series,
                             const std::string& param_json) {
    for (std::size_t i = 0; i < series.axis.size(); ++i) {
        out << csv_quote(series.statistic_name) << "," << csv_quote(param_json) << ","
            << format_double(series.axis[i]) << "," << format_double(series.mean[i]) << ","
            << format_double(series.std_dev[i]) << "," << series.n_mc << "," << series.seed
            << "\n";
    }
}

} // namespace flowscope
