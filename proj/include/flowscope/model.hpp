#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "flowscope/dataset.hpp"
#include "flowscope/errors.hpp"
#include "flowscope/matrix.hpp"
#include "flowscope/numerics.hpp"
#include "flowscope/oracle.hpp"
#include "flowscope/parallel.hpp"
#include "flowscope/rng.hpp"
#include "flowscope/schedule.hpp"

namespace flowscope {

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double silu_grad(double x) {
    const double s = 1.0 / (1.0 + std::exp(-x));
    return s * (1.0 + x * (1.0 - s));
}

// Velocity model: [x | time features | class embedding] -> H -> H -> D with a
// smooth nonlinearity, manual backprop, flat parameter storage. The class
// table has one extra null-class row used when no class is given (the
// unconditional branch for CFG). All math in 64-bit.
class MlpVelocityModel {
public:
    struct Config {
        std::size_t dim = 2;
        std::size_t hidden = 256;
        std::size_t time_features = 64; // even: sin/cos pairs on a geometric frequency ladder
        std::size_t class_embed = 16;
        std::size_t num_classes = 0; // 0 = unconditional-only (null row still present)
        std::uint64_t init_seed = 0;
    };

    explicit MlpVelocityModel(const Config& cfg) : cfg_(cfg) {
        if (cfg.dim < 1 || cfg.hidden < 1 || cfg.class_embed < 1)
            throw std::invalid_argument("MlpVelocityModel: bad sizes");
        if (cfg.time_features < 2 || cfg.time_features % 2 != 0)
            throw std::invalid_argument("MlpVelocityModel: time_features must be even and >= 2");
        in_ = cfg.dim + cfg.time_features + cfg.class_embed;
        offsets_[0] = 0;
        offsets_[1] = offsets_[0] + cfg.hidden * in_;                        // W1
        offsets_[2] = offsets_[1] + cfg.hidden;                              // b1
        offsets_[3] = offsets_[2] + cfg.hidden * cfg.hidden;                 // W2
        offsets_[4] = offsets_[3] + cfg.hidden;                              // b2
        offsets_[5] = offsets_[4] + cfg.dim * cfg.hidden;                    // W3
        offsets_[6] = offsets_[5] + cfg.dim;                                 // b3
        offsets_[7] = offsets_[6] + (cfg.num_classes + 1) * cfg.class_embed; // class table
        params_.assign(offsets_[7], 0.0);
        init_params();
    }

    std::size_t dim() const { return cfg_.dim; }
    std::size_t hidden() const { return cfg_.hidden; }
    std::size_t time_features() const { return cfg_.time_features; }
    std::size_t class_embed() const { return cfg_.class_embed; }
    std::size_t num_classes() const { return cfg_.num_classes; }
    std::uint32_t null_class() const { return static_cast<std::uint32_t>(cfg_.num_classes); }
    const Config& config() const { return cfg_; }

    std::size_t parameter_count() const { return params_.size(); }
    std::span<double> parameters() { return params_; }
    std::span<const double> parameters() const { return params_; }

    std::span<double> w1() { return block(0); }
    std::span<double> b1() { return block(1); }
    std::span<double> w2() { return block(2); }
    std::span<double> b2() { return block(3); }
    std::span<double> w3() { return block(4); }
    std::span<double> b3() { return block(5); }
    std::span<double> class_table() { return block(6); }
    std::span<const double> class_table() const {
        return {params_.data() + offsets_[6], offsets_[7] - offsets_[6]};
    }

    // Gradient layout mirrors the parameter layout; block index order is
    // W1, b1, W2, b2, W3, b3, class table.
    static constexpr std::size_t kNumBlocks = 7;
    std::pair<std::size_t, std::size_t> block_range(std::size_t b) const {
        return {offsets_[b], offsets_[b + 1]};
    }

    std::vector<double> time_feature_vector(double t) const {
        const std::size_t pairs = cfg_.time_features / 2;
        std::vector<double> feat(cfg_.time_features);
        for (std::size_t k = 0; k < pairs; ++k) {
            const double freq =
                pairs == 1 ? 1.0
                           : std::pow(1000.0, static_cast<double>(k) / static_cast<double>(pairs - 1));
            feat[2 * k] = std::sin(freq * t);
            feat[2 * k + 1] = std::cos(freq * t);
        }
        return feat;
    }

    std::vector<double> forward(std::span<const double> xt, double t,
                                std::optional<std::uint32_t> cls = {}) const {
        std::vector<double> input = assemble_input(xt, t, cls);
        std::vector<double> z1(cfg_.hidden), a1(cfg_.hidden), z2(cfg_.hidden), a2(cfg_.hidden);
        std::vector<double> out(cfg_.dim);
        forward_into(input, z1, a1, z2, a2, out);
        return out;
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw FormatError("cannot open for writing: " + path.string());
        out.write("FSMD", 4);
        out.put(static_cast<char>(1)); // version
        detail::write_u64le(out, cfg_.dim);
        detail::write_u64le(out, cfg_.hidden);
        detail::write_u64le(out, cfg_.time_features);
        detail::write_u64le(out, cfg_.class_embed);
        detail::write_u64le(out, cfg_.num_classes);
        for (double v : params_) detail::write_f64le(out, v);
        if (!out) throw FormatError("write failed: " + path.string());
    }

    static MlpVelocityModel load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw FormatError("cannot open: " + path.string());
        char magic[4];
        if (!in.read(magic, 4) || std::string_view(magic, 4) != "FSMD")
            throw FormatError(path.string() + ": bad magic, not an FSMD checkpoint");
        const int version = in.get();
        if (version != 1) throw FormatError(path.string() + ": unsupported FSMD version");
        Config cfg;
        cfg.dim = detail::read_u64le(in, "dim");
        cfg.hidden = detail::read_u64le(in, "hidden");
        cfg.time_features = detail::read_u64le(in, "time_features");
        cfg.class_embed = detail::read_u64le(in, "class_embed");
        cfg.num_classes = detail::read_u64le(in, "num_classes");
        MlpVelocityModel model(cfg);
        for (double& v : model.params_) v = detail::read_f64le(in, "parameters");
        return model;
    }

    // ---- internals shared with the training code ----

    std::vector<double> assemble_input(std::span<const double> xt, double t,
                                       std::optional<std::uint32_t> cls) const {
        if (xt.size() != cfg_.dim)
            throw std::invalid_argument("MlpVelocityModel: input dimension mismatch");
        const std::uint32_t c = cls.value_or(null_class());
        if (c > cfg_.num_classes)
            throw std::invalid_argument("MlpVelocityModel: unknown class id " + std::to_string(c));
        std::vector<double> input(in_);
        std::copy(xt.begin(), xt.end(), input.begin());
        const std::vector<double> tf = time_feature_vector(t);
        std::copy(tf.begin(), tf.end(), input.begin() + cfg_.dim);
        const double* emb = params_.data() + offsets_[6] + c * cfg_.class_embed;
        std::copy(emb, emb + cfg_.class_embed, input.begin() + cfg_.dim + cfg_.time_features);
        return input;
    }

    void forward_into(std::span<const double> input, std::span<double> z1, std::span<double> a1,
                      std::span<double> z2, std::span<double> a2, std::span<double> out) const {
        const double* w1p = params_.data() + offsets_[0];
        const double* b1p = params_.data() + offsets_[1];
        const double* w2p = params_.data() + offsets_[2];
        const double* b2p = params_.data() + offsets_[3];
        const double* w3p = params_.data() + offsets_[4];
        const double* b3p = params_.data() + offsets_[5];
        for (std::size_t h = 0; h < cfg_.hidden; ++h) {
            double acc = b1p[h];
            const double* wrow = w1p + h * in_;
            for (std::size_t j = 0; j < in_; ++j) acc += wrow[j] * input[j];
            z1[h] = acc;
            a1[h] = silu(acc);
        }
        for (std::size_t h = 0; h < cfg_.hidden; ++h) {
            double acc = b2p[h];
            const double* wrow = w2p + h * cfg_.hidden;
            for (std::size_t j = 0; j < cfg_.hidden; ++j) acc += wrow[j] * a1[j];
            z2[h] = acc;
            a2[h] = silu(acc);
        }
        for (std::size_t d = 0; d < cfg_.dim; ++d) {
            double acc = b3p[d];
            const double* wrow = w3p + d * cfg_.hidden;
            for (std::size_t j = 0; j < cfg_.hidden; ++j) acc += wrow[j] * a2[j];
            out[d] = acc;
        }
    }

    std::size_t input_width() const { return in_; }
    std::size_t class_table_offset() const { return offsets_[6]; }

private:
    std::span<double> block(std::size_t b) {
        return {params_.data() + offsets_[b], offsets_[b + 1] - offsets_[b]};
    }

    void init_params() {
        Rng rng(cfg_.init_seed);
        // Hidden layers: fan-in-scaled uniform. Final layer stays zero so the
        // initial field is identically zero. Class rows start small so class
        // signals can differentiate quickly.
        const double bound1 = std::sqrt(1.0 / static_cast<double>(in_));
        for (double& v : w1()) v = bound1 * (2.0 * rng.uniform() - 1.0);
        const double bound2 = std::sqrt(1.0 / static_cast<double>(cfg_.hidden));
        for (double& v : w2()) v = bound2 * (2.0 * rng.uniform() - 1.0);
        for (double& v : class_table_mut()) v = 0.1 * (2.0 * rng.uniform() - 1.0);
    }

    std::span<double> class_table_mut() { return block(6); }

    Config cfg_;
    std::size_t in_ = 0;
    std::array<std::size_t, kNumBlocks + 1> offsets_{};
    std::vector<double> params_;
};

// One training batch in structure-of-arrays form.
struct Batch {
    Matrix inputs;  // B x D noisy states
    std::vector<double> times;
    std::vector<std::optional<std::uint32_t>> classes;
    Matrix targets; // B x D velocity targets

    std::size_t size() const { return inputs.rows(); }
};

// Mean squared error over batch and dimensions plus its gradient with respect
// to every parameter (reverse-mode accumulation through the MLP).
inline std::pair<double, std::vector<double>> loss_and_grad(const MlpVelocityModel& model,
                                                            const Batch& batch) {
    const std::size_t b_size = batch.size();
    if (b_size == 0) throw std::invalid_argument("loss_and_grad: empty batch");
    if (batch.targets.rows() != b_size || batch.times.size() != b_size ||
        batch.classes.size() != b_size)
        throw std::invalid_argument("loss_and_grad: ragged batch");
    for (double v : batch.targets.flat())
        if (!std::isfinite(v)) throw std::invalid_argument("loss_and_grad: non-finite target");

    const std::size_t d = model.dim(), h = model.hidden(), in = model.input_width();
    std::vector<double> grad(model.parameter_count(), 0.0);
    const std::size_t w1_off = model.block_range(0).first;
    const std::size_t b1_off = model.block_range(1).first;
    const std::size_t w2_off = model.block_range(2).first;
    const std::size_t b2_off = model.block_range(3).first;
    const std::size_t w3_off = model.block_range(4).first;
    const std::size_t b3_off = model.block_range(5).first;
    const std::size_t table_off = model.class_table_offset();
    const std::span<const double> params = model.parameters();
    const double* w2p = params.data() + w2_off;
    const double* w3p = params.data() + w3_off;
    const double* w1p = params.data() + w1_off;

    std::vector<double> z1(h), a1(h), z2(h), a2(h), y(d);
    std::vector<double> g3(d), da2(h), dz2(h), da1(h), dz1(h);
    const double scale = 2.0 / (static_cast<double>(b_size) * static_cast<double>(d));
    double loss = 0.0;

    for (std::size_t b = 0; b < b_size; ++b) {
        const std::vector<double> input =
            model.assemble_input(batch.inputs.row(b), batch.times[b], batch.classes[b]);
        model.forward_into(input, z1, a1, z2, a2, y);

        const auto target = batch.targets.row(b);
        for (std::size_t k = 0; k < d; ++k) {
            const double r = y[k] - target[k];
            loss += r * r;
            g3[k] = scale * r;
        }

        for (std::size_t k = 0; k < d; ++k) {
            grad[b3_off + k] += g3[k];
            double* grow = grad.data() + w3_off + k * h;
            const double gk = g3[k];
            for (std::size_t j = 0; j < h; ++j) grow[j] += gk * a2[j];
        }
        std::fill(da2.begin(), da2.end(), 0.0);
        for (std::size_t k = 0; k < d; ++k) {
            const double gk = g3[k];
            const double* wrow = w3p + k * h;
            for (std::size_t j = 0; j < h; ++j) da2[j] += wrow[j] * gk;
        }
        for (std::size_t j = 0; j < h; ++j) dz2[j] = da2[j] * silu_grad(z2[j]);

        for (std::size_t k = 0; k < h; ++k) {
            grad[b2_off + k] += dz2[k];
            double* grow = grad.data() + w2_off + k * h;
            const double gk = dz2[k];
            for (std::size_t j = 0; j < h; ++j) grow[j] += gk * a1[j];
        }
        std::fill(da1.begin(), da1.end(), 0.0);
        for (std::size_t k = 0; k < h; ++k) {
            const double gk = dz2[k];
            const double* wrow = w2p + k * h;
            for (std::size_t j = 0; j < h; ++j) da1[j] += wrow[j] * gk;
        }
        for (std::size_t j = 0; j < h; ++j) dz1[j] = da1[j] * silu_grad(z1[j]);

        for (std::size_t k = 0; k < h; ++k) {
            grad[b1_off + k] += dz1[k];
            double* grow = grad.data() + w1_off + k * in;
            const double gk = dz1[k];
            for (std::size_t j = 0; j < in; ++j) grow[j] += gk * input[j];
        }

        // Input gradient lands on the class-embedding slice only; x and the
        // time features are not parameters.
        const std::uint32_t c = batch.classes[b].value_or(model.null_class());
        const std::size_t emb_pos = model.dim() + model.time_features();
        double* emb_grad = grad.data() + table_off + c * model.class_embed();
        for (std::size_t m = 0; m < model.class_embed(); ++m) {
            double acc = 0.0;
            for (std::size_t k = 0; k < h; ++k) acc += dz1[k] * w1p[k * in + emb_pos + m];
            emb_grad[m] += acc;
        }
    }

    loss /= static_cast<double>(b_size) * static_cast<double>(d);
    return {loss, std::move(grad)};
}

struct TrainConfig {
    std::size_t steps = 5000;
    std::size_t batch_size = 128;
    double learning_rate = 1e-4;
    std::pair<double, double> adam_betas{0.9, 0.995};
    double adam_eps = 1e-8;
    double class_drop_prob = 0.1;
    enum class Target { Cfm, Oracle } target = Target::Cfm;
    std::uint64_t seed = 0;
    // time sampler is Uniform[0, 1]

    void validate() const {
        if (steps < 1 || batch_size < 1) throw std::invalid_argument("TrainConfig: zero counts");
        if (!(learning_rate >= 0.0)) throw std::invalid_argument("TrainConfig: bad learning rate");
        if (!(class_drop_prob >= 0.0 && class_drop_prob <= 1.0))
            throw std::invalid_argument("TrainConfig: class_drop_prob outside [0, 1]");
    }
};

struct AdamState {
    std::vector<double> m, v;
    std::size_t step = 0;

    explicit AdamState(std::size_t n) : m(n, 0.0), v(n, 0.0) {}

    void update(std::span<double> params, std::span<const double> grad, double lr, double beta1,
                double beta2, double eps) {
        ++step;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            params[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        }
    }
};

namespace detail_train {

// Draws one path sample per batch slot. The oracle target is recomputed per
// sample against the full (class) subset; fine at toy N, and the whole reason
// oracle supervision does not scale to real datasets.
inline Batch make_batch(const Dataset& data, const Schedule& schedule, const TrainConfig& cfg,
                        const std::vector<ClassView>& views, Rng& rng, int workers) {
    const std::size_t d = data.dim();
    Batch batch;
    batch.inputs = Matrix(cfg.batch_size, d);
    batch.targets = Matrix(cfg.batch_size, d);
    batch.times.resize(cfg.batch_size);
    batch.classes.resize(cfg.batch_size);
    std::vector<std::size_t> rows(cfg.batch_size);
    std::vector<std::vector<double>> x0s(cfg.batch_size);

    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        auto& x0 = x0s[b];
        x0.resize(d);
        for (double& v : x0) v = rng.normal();
        rows[b] = rng.uniform_index(data.size());
        batch.times[b] = rng.uniform();
        if (data.has_labels()) {
            const std::uint32_t y = data.label(rows[b]);
            batch.classes[b] =
                rng.bernoulli(cfg.class_drop_prob) ? std::nullopt : std::optional(y);
        } else {
            batch.classes[b] = std::nullopt;
        }
    }

    parallel_for(cfg.batch_size, workers, [&](std::size_t b) {
        const auto x1 = data.point(rows[b]);
        const double t = batch.times[b];
        const std::vector<double> xt = interpolate(x0s[b], x1, t, schedule);
        std::copy(xt.begin(), xt.end(), batch.inputs.row(b).begin());
        std::vector<double> target;
        if (cfg.target == TrainConfig::Target::Cfm) {
            target = conditional_velocity(x0s[b], x1, t, schedule);
        } else if (data.has_labels()) {
            target = oracle_velocity(xt, t, views[data.label(rows[b])], schedule);
        } else {
            target = oracle_velocity(xt, t, data, schedule);
        }
        std::copy(target.begin(), target.end(), batch.targets.row(b).begin());
    });
    return batch;
}

} // namespace detail_train

// Single-threaded sequence of Adam updates; `workers` only fans out the
// per-batch target construction, which never changes results.
inline std::vector<double> train(MlpVelocityModel& model, const Dataset& data,
                                 const TrainConfig& cfg, const Schedule& schedule,
                                 int workers = 1) {
    cfg.validate();
    if (model.dim() != data.dim()) throw std::invalid_argument("train: model/data dim mismatch");
    if (data.has_labels() && data.num_classes() > model.num_classes())
        throw std::invalid_argument("train: model has fewer classes than the data");

    std::vector<ClassView> views;
    if (data.has_labels())
        for (std::uint32_t y = 0; y < data.num_classes(); ++y)
            views.push_back(class_subset(data, y));

    Rng rng(cfg.seed);
    AdamState adam(model.parameter_count());
    std::vector<double> history;
    history.reserve(cfg.steps);
    for (std::size_t s = 0; s < cfg.steps; ++s) {
        const Batch batch = detail_train::make_batch(data, schedule, cfg, views, rng, workers);
        auto [loss, grad] = loss_and_grad(model, batch);
        adam.update(model.parameters(), grad, cfg.learning_rate, cfg.adam_betas.first,
                    cfg.adam_betas.second, cfg.adam_eps);
        history.push_back(loss);
    }
    return history;
}

inline void save_loss_history(std::span<const double> history, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open for writing: " + path.string());
    out << "step,loss\n";
    for (std::size_t i = 0; i < history.size(); ++i)
        out << i << "," << format_double(history[i]) << "\n";
}

// Monte Carlo check that the conditional-target and oracle-target gradients
// agree: both estimates are taken over the same x_t batch at a fixed t, and
// the cosine similarity of the flattened gradients is returned.
inline double fm_cfm_gradient_check(const MlpVelocityModel& model, const Dataset& data, double t,
                                    std::size_t n_mc, std::uint64_t seed,
                                    const Schedule& schedule = Schedule{}, int workers = 1) {
    if (n_mc < 2) throw std::invalid_argument("fm_cfm_gradient_check: need n_mc >= 2");
    if (model.dim() != data.dim())
        throw std::invalid_argument("fm_cfm_gradient_check: model/data dim mismatch");

    std::vector<ClassView> views;
    if (data.has_labels())
        for (std::uint32_t y = 0; y < data.num_classes(); ++y)
            views.push_back(class_subset(data, y));

    Rng rng(seed);
    const std::size_t d = data.dim();
    std::vector<double> grad_cfm(model.parameter_count(), 0.0);
    std::vector<double> grad_fm(model.parameter_count(), 0.0);

    const std::size_t chunk_max = 512;
    std::size_t done = 0;
    while (done < n_mc) {
        const std::size_t b_size = std::min(chunk_max, n_mc - done);
        Batch cfm, fm;
        cfm.inputs = Matrix(b_size, d);
        cfm.targets = Matrix(b_size, d);
        cfm.times.assign(b_size, t);
        cfm.classes.resize(b_size);
        fm = cfm;
        std::vector<std::size_t> rows(b_size);
        std::vector<std::vector<double>> x0s(b_size);
        for (std::size_t b = 0; b < b_size; ++b) {
            x0s[b].resize(d);
            for (double& v : x0s[b]) v = rng.normal();
            rows[b] = rng.uniform_index(data.size());
            const auto cls = data.has_labels() ? std::optional(data.label(rows[b])) : std::nullopt;
            cfm.classes[b] = cls;
            fm.classes[b] = cls;
        }
        parallel_for(b_size, workers, [&](std::size_t b) {
            const auto x1 = data.point(rows[b]);
            const std::vector<double> xt = interpolate(x0s[b], x1, t, schedule);
            std::copy(xt.begin(), xt.end(), cfm.inputs.row(b).begin());
            std::copy(xt.begin(), xt.end(), fm.inputs.row(b).begin());
            const std::vector<double> u_cond = conditional_velocity(x0s[b], x1, t, schedule);
            std::copy(u_cond.begin(), u_cond.end(), cfm.targets.row(b).begin());
            std::vector<double> u_star;
            if (data.has_labels())
                u_star = oracle_velocity(xt, t, views[data.label(rows[b])], schedule);
            else
                u_star = oracle_velocity(xt, t, data, schedule);
            std::copy(u_star.begin(), u_star.end(), fm.targets.row(b).begin());
        });
        const double weight = static_cast<double>(b_size) / static_cast<double>(n_mc);
        auto [loss_c, g_c] = loss_and_grad(model, cfm);
        auto [loss_f, g_f] = loss_and_grad(model, fm);
        (void)loss_c;
        (void)loss_f;
        for (std::size_t i = 0; i < grad_cfm.size(); ++i) {
            grad_cfm[i] += weight * g_c[i];
            grad_fm[i] += weight * g_f[i];
        }
        done += b_size;
    }

    const double na = std::sqrt(squared_norm(grad_cfm));
    const double nb = std::sqrt(squared_norm(grad_fm));
    if (na == 0.0 && nb == 0.0) return 1.0; // both gradients vanish: identical
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(grad_cfm, grad_fm) / (na * nb);
}

} // namespace flowscope
