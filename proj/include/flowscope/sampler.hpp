#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowscope/csv.hpp"
#include "flowscope/errors.hpp"
#include "flowscope/rng.hpp"
#include "flowscope/schedule.hpp"
#include "flowscope/velocity_field.hpp"

namespace flowscope {

// Classifier-free guidance: v_u + omega * (v_c - v_u), gated to [lo, hi].
struct GuidanceConfig {
    double scale = 1.0;
    double lo = 0.0;
    double hi = 1.0;
    bool enabled = false;

    void validate() const {
        if (!(scale >= 0.0)) throw std::invalid_argument("GuidanceConfig: scale must be >= 0");
        if (!(lo <= hi) || lo < 0.0 || hi > 1.0)
            throw std::invalid_argument("GuidanceConfig: interval must satisfy 0 <= lo <= hi <= 1");
    }
};

// Ordered (t, state) pairs from Euler integration. states[k+1] was produced by
// the field tagged field_tags[k], so there is one tag per step.
struct Trajectory {
    std::vector<double> times;
    std::vector<std::vector<double>> states;
    std::vector<std::string> field_tags;

    std::span<const double> terminal() const { return states.back(); }
};

struct MixedConfig {
    double t_switch = 0.1;
    TimeGrid grid;
    std::optional<std::uint32_t> cls;
};

struct ResumeConfig {
    double t_resume = 0.2;
    std::vector<double> reference; // x1_ref
    std::uint64_t seed = 0;
};

namespace detail_sampler {

inline void check_finite(std::span<const double> state, std::size_t step) {
    for (double v : state)
        if (!std::isfinite(v)) throw DivergenceError("sampler: non-finite state", step);
}

// Core explicit-Euler loop; the field used for each interval is chosen by
// `pick` from the interval's left endpoint.
template <class Pick>
Trajectory euler_loop(std::span<const double> times, std::span<const double> x_start,
                      std::optional<std::uint32_t> cls, Pick&& pick) {
    Trajectory traj;
    traj.times.assign(times.begin(), times.end());
    traj.states.reserve(times.size());
    traj.states.emplace_back(x_start.begin(), x_start.end());
    check_finite(traj.states.front(), 0);
    for (std::size_t k = 0; k + 1 < times.size(); ++k) {
        const VelocityField& field = pick(times[k]);
        const std::vector<double> v = field.evaluate(traj.states[k], times[k], cls);
        const double dt = times[k + 1] - times[k];
        std::vector<double> next(traj.states[k]);
        for (std::size_t j = 0; j < next.size(); ++j) next[j] += dt * v[j];
        check_finite(next, k + 1);
        traj.states.push_back(std::move(next));
        traj.field_tags.emplace_back(field.tag());
    }
    return traj;
}

inline std::vector<double> times_with_terminal(const TimeGrid& grid) {
    if (grid.times.size() < 1) throw std::invalid_argument("sampler: empty grid");
    std::vector<double> times = grid.times;
    if (times.back() < 1.0) times.push_back(1.0);
    return times;
}

} // namespace detail_sampler

// Explicit Euler over the grid's left endpoints, with the terminal time 1
// appended: x_{k+1} = x_k + (t_{k+1} - t_k) * field(x_k, t_k, class).
inline Trajectory euler_sample(const VelocityField& field, const TimeGrid& grid,
                               std::span<const double> x0,
                               std::optional<std::uint32_t> cls = {}) {
    if (x0.size() != field.dim()) throw std::invalid_argument("euler_sample: dimension mismatch");
    const std::vector<double> times = detail_sampler::times_with_terminal(grid);
    return detail_sampler::euler_loop(times, x0, cls,
                                      [&](double) -> const VelocityField& { return field; });
}

// CFG blend at a single point. Outside the interval (or when disabled, or at
// scale exactly 1) the conditional prediction is returned untouched.
inline std::vector<double> guided_velocity(const VelocityField& field, std::span<const double> xt,
                                           double t, std::uint32_t cls, const GuidanceConfig& g) {
    g.validate();
    std::vector<double> v_c = field.evaluate(xt, t, cls);
    if (!g.enabled || g.scale == 1.0 || t < g.lo || t > g.hi) return v_c;
    const std::vector<double> v_u = field.evaluate(xt, t, std::nullopt);
    for (std::size_t j = 0; j < v_c.size(); ++j) v_c[j] = v_u[j] + g.scale * (v_c[j] - v_u[j]);
    return v_c;
}

// Guidance wrapper usable anywhere a VelocityField is expected. Requires a
// class id whenever guidance is enabled.
class GuidedField final : public VelocityField {
public:
    GuidedField(const VelocityField& base, GuidanceConfig guidance)
        : base_(&base), guidance_(guidance) {
        guidance_.validate();
    }

    std::size_t dim() const override { return base_->dim(); }

    std::vector<double> evaluate(std::span<const double> xt, double t,
                                 std::optional<std::uint32_t> cls = {}) const override {
        if (!guidance_.enabled) return base_->evaluate(xt, t, cls);
        if (!cls)
            throw std::invalid_argument("GuidedField: guidance enabled but no class id given");
        return guided_velocity(*base_, xt, t, *cls, guidance_);
    }

    std::string_view tag() const override { return "guided-model"; }

private:
    const VelocityField* base_;
    GuidanceConfig guidance_;
};

// Oracle steps on intervals whose left endpoint is below t_switch, model steps
// afterward; a step straddling t_switch belongs to the model.
inline Trajectory mixed_sample(const VelocityField& oracle_field, const VelocityField& model_field,
                               const MixedConfig& cfg, std::span<const double> x0) {
    if (oracle_field.dim() != model_field.dim())
        throw std::invalid_argument("mixed_sample: field dimension mismatch");
    if (x0.size() != oracle_field.dim())
        throw std::invalid_argument("mixed_sample: dimension mismatch");
    if (!(cfg.t_switch >= 0.0 && cfg.t_switch <= 1.0))
        throw std::invalid_argument("mixed_sample: t_switch outside [0, 1]");
    const std::vector<double> times = detail_sampler::times_with_terminal(cfg.grid);
    return detail_sampler::euler_loop(times, x0, cfg.cls, [&](double t) -> const VelocityField& {
        return t < cfg.t_switch ? oracle_field : model_field;
    });
}

// Re-noises a reference point to t_resume via the interpolation path, then
// integrates to 1 over the remaining grid times.
inline Trajectory resume_sample(const VelocityField& field, const ResumeConfig& r,
                                const TimeGrid& grid, const Schedule& schedule = Schedule{},
                                std::optional<std::uint32_t> cls = {}) {
    if (r.reference.size() != field.dim())
        throw std::invalid_argument("resume_sample: reference dimension mismatch");
    if (!(r.t_resume >= 0.0 && r.t_resume <= 1.0))
        throw std::invalid_argument("resume_sample: t_resume outside [0, 1]");
    Rng rng(r.seed);
    std::vector<double> x0(r.reference.size());
    for (double& v : x0) v = rng.normal();
    const std::vector<double> x_start = interpolate(x0, r.reference, r.t_resume, schedule);

    std::vector<double> times{r.t_resume};
    for (double t : grid.times)
        if (t > r.t_resume) times.push_back(t);
    if (times.back() < 1.0) times.push_back(1.0);
    return detail_sampler::euler_loop(times, x_start, cls,
                                      [&](double) -> const VelocityField& { return field; });
}

// Single Euler step to t=1: the model's current guess of the final sample.
inline std::vector<double> intermediate_prediction(std::span<const double> xt, double t,
                                                   std::span<const double> v) {
    if (xt.size() != v.size())
        throw std::invalid_argument("intermediate_prediction: dimension mismatch");
    if (!std::isfinite(t) || t < 0.0 || t > 1.0)
        throw std::invalid_argument("intermediate_prediction: t outside [0, 1]");
    std::vector<double> out(xt.size());
    for (std::size_t j = 0; j < xt.size(); ++j) out[j] = xt[j] + (1.0 - t) * v[j];
    return out;
}

// Full trajectory export: (step, t, field_tag, dim_0..dim_{D-1}). Row 0 is the
// initial state and carries the tag "prior".
inline void save_csv(const Trajectory& traj, std::ostream& out) {
    const std::size_t d = traj.states.front().size();
    out << "step,t,field_tag";
    for (std::size_t j = 0; j < d; ++j) out << ",dim_" << j;
    out << "\n";
    for (std::size_t k = 0; k < traj.states.size(); ++k) {
        out << k << "," << format_double(traj.times[k]) << ","
            << (k == 0 ? std::string("prior") : traj.field_tags[k - 1]);
        for (double v : traj.states[k]) out << "," << format_double(v);
        out << "\n";
    }
}

// Terminal-state-only export for large sweeps.
inline void save_terminal_csv(std::span<const Trajectory> trajectories, std::ostream& out) {
    if (trajectories.empty()) throw std::invalid_argument("save_terminal_csv: no trajectories");
    const std::size_t d = trajectories.front().states.front().size();
    out << "trajectory";
    for (std::size_t j = 0; j < d; ++j) out << ",dim_" << j;
    out << "\n";
    for (std::size_t i = 0; i < trajectories.size(); ++i) {
        out << i;
        for (double v : trajectories[i].terminal()) out << "," << format_double(v);
        out << "\n";
    }
}

} // namespace flowscope
