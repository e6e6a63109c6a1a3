#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <iostream>
#include <sstream>

#include "flowscope/dataset.hpp"
#include "flowscope/diagnostics.hpp"
#include "flowscope/model.hpp"
#include "flowscope/sampler.hpp"
#include "flowscope/velocity_field.hpp"

using namespace flowscope;

namespace {

const Schedule kSched = Schedule::rectified_flow();

} // namespace

TEST_CASE("default sweep grid shape") {
    const std::vector<double> grid = default_sweep_grid();
    REQUIRE(grid.size() >= 50);
    CHECK(grid.front() == 0.0);
    CHECK(grid.back() <= 0.98);
    for (std::size_t i = 0; i + 1 < grid.size(); ++i) CHECK(grid[i] < grid[i + 1]);
    // dense band resolves the stage transition
    for (int j = 1; j <= 15; ++j)
        CHECK(std::find(grid.begin(), grid.end(), j / 100.0) != grid.end());
}

TEST_CASE("target_mse_sweep: zero for N=1, nonnegative otherwise") {
    const std::vector<double> t_grid{0.0, 0.1, 0.5, 0.9};
    const Dataset single = gen_gaussian(1, 3, 2);
    const SweepSeries zero = target_mse_sweep(single, kSched, t_grid, 64, 3);
    for (double m : zero.mean) CHECK(m < 1e-12);

    const Dataset data = gen_gaussian(32, 3, 4);
    const SweepSeries series = target_mse_sweep(data, kSched, t_grid, 64, 5);
    REQUIRE(series.axis == t_grid);
    for (double m : series.mean) CHECK(m >= 0.0);
    for (double s : series.std_dev) CHECK(s >= 0.0);
    CHECK(series.statistic_name == "target_mse");
}

TEST_CASE("top1_sweep endpoints") {
    const std::vector<double> t_grid{0.0, 0.4};
    const Dataset data = gen_gaussian(25, 4, 6);
    const SweepSeries series = top1_sweep(data, kSched, t_grid, 128, 7);
    CHECK(series.mean[0] == 1.0 / 25.0); // exactly uniform at t=0
    CHECK(series.mean[1] >= series.mean[0]);

    const Dataset single = gen_gaussian(1, 4, 8);
    const SweepSeries ones = top1_sweep(single, kSched, t_grid, 16, 9);
    for (double m : ones.mean) CHECK(m == 1.0);
}

TEST_CASE("sweeps are identical across worker counts") {
    const Dataset data = gen_gaussian(40, 6, 10);
    const std::vector<double> t_grid{0.0, 0.05, 0.2, 0.7};
    const SweepSeries w1 = top1_sweep(data, kSched, t_grid, 32, 11, 1);
    const SweepSeries w4 = top1_sweep(data, kSched, t_grid, 32, 11, 4);
    CHECK(w1.mean == w4.mean);
    CHECK(w1.std_dev == w4.std_dev);

    const SweepSeries g1 = target_mse_sweep(data, kSched, t_grid, 32, 12, 1);
    const SweepSeries g4 = target_mse_sweep(data, kSched, t_grid, 32, 12, 4);
    CHECK(g1.mean == g4.mean);
}

TEST_CASE("dim_size_sweep cells start at 1/N") {
    const std::vector<std::size_t> dims{2, 8};
    const std::vector<std::size_t> sizes{10, 20};
    const std::vector<double> t_grid{0.0, 0.3};
    const auto table = dim_size_sweep(dims, sizes, t_grid, 16, 13, kSched);
    REQUIRE(table.size() == 4);
    for (const auto& cell : table) {
        CHECK(cell.series.mean[0] == 1.0 / static_cast<double>(cell.size));
        CHECK(cell.series.axis == t_grid);
    }
    CHECK_THROWS_AS(
        dim_size_sweep(std::vector<std::size_t>{}, sizes, t_grid, 4, 1, kSched),
        std::invalid_argument);
}

TEST_CASE("model_loss_sweep with a zero field against a centered dataset") {
    Matrix pts(2, 2);
    pts(0, 0) = 1.0;
    pts(1, 0) = -1.0; // mean is the origin
    const Dataset data(std::move(pts));
    const CallableField zero(2, [](auto, double, auto) { return std::vector<double>{0.0, 0.0}; });
    const std::vector<double> t_grid{0.0};
    const auto [vs_cond, vs_oracle] = model_loss_sweep(zero, data, kSched, t_grid, 4096, 15);
    // at t=0 the oracle target is mean - x0 = -x0, so the per-dim loss of the
    // zero field is ||x0||^2 / D with expectation 1
    CHECK_THAT(vs_oracle.mean[0], Catch::Matchers::WithinAbs(1.0, 0.1));
    CHECK(vs_cond.mean[0] >= vs_oracle.mean[0]);
}

TEST_CASE("model_loss_sweep with the oracle itself as the field") {
    const Dataset data = gen_mixture(ring_centers(3, 3.0), 0.6, 8, 16);
    const OracleField oracle(data, kSched);
    const std::vector<double> t_grid{0.02, 0.3, 0.8};
    const auto [vs_cond, vs_oracle] = model_loss_sweep(oracle, data, kSched, t_grid, 64, 17);
    for (double m : vs_oracle.mean) CHECK(m < 1e-18);
    CHECK(vs_cond.statistic_name == "model_loss_conditional");
    CHECK(vs_oracle.statistic_name == "model_loss_oracle");
}

TEST_CASE("velocity_norm_sweep: zero field and flat conditional stand-in") {
    const Dataset data = gen_gaussian(12, 2, 18);
    const CallableField zero(2, [](auto, double, auto) { return std::vector<double>{0.0, 0.0}; });
    const std::vector<double> t_grid{0.1, 0.5, 0.9};
    const SweepSeries zeros = velocity_norm_sweep(zero, data, kSched, t_grid, 32, 19);
    for (double m : zeros.mean) CHECK(m == 0.0);

    // N=1 oracle field equals the conditional velocity pointwise, a
    // t-independent quantity; the sweep should be flat
    const Dataset single = gen_gaussian(1, 2, 20);
    const OracleField cond(single, kSched);
    const SweepSeries flat = velocity_norm_sweep(cond, single, kSched, t_grid, 2000, 21);
    const double lo = *std::min_element(flat.mean.begin(), flat.mean.end());
    const double hi = *std::max_element(flat.mean.begin(), flat.mean.end());
    CHECK(hi / lo < 1.1);
}

TEST_CASE("velocity_norm_sweep over the oracle field reports its peak") {
    const Dataset data = gen_gaussian(64, 8, 22);
    const OracleField field(data, kSched);
    std::vector<double> t_grid;
    for (int i = 0; i <= 19; ++i) t_grid.push_back(i * 0.05);
    const SweepSeries series = velocity_norm_sweep(field, data, kSched, t_grid, 128, 23);
    std::size_t argmax = 0;
    for (std::size_t i = 0; i < series.mean.size(); ++i) {
        CHECK(series.mean[i] >= 0.0);
        REQUIRE(std::isfinite(series.mean[i]));
        if (series.mean[i] > series.mean[argmax]) argmax = i;
    }
    // peak location is data-dependent; recorded, not asserted
    std::cout << "velocity norm peak at t=" << series.axis[argmax] << " ("
              << series.mean[argmax] << ")\n";
}

TEST_CASE("cond_uncond_divergence: zeroed class table gives a zero series") {
    const Dataset data = gen_mixture(ring_centers(2, 4.0), 0.5, 8, 24);
    MlpVelocityModel::Config cfg;
    cfg.dim = 2;
    cfg.hidden = 16;
    cfg.num_classes = 2;
    cfg.init_seed = 25;
    MlpVelocityModel model(cfg);
    auto table = model.class_table();
    std::fill(table.begin(), table.end(), 0.0);
    const std::vector<double> t_grid{0.1, 0.5};
    const SweepSeries series = cond_uncond_divergence(model, data, kSched, t_grid, 32, 26);
    for (double m : series.mean) CHECK(m == 0.0);

    MlpVelocityModel::Config uncond = cfg;
    uncond.num_classes = 0;
    const MlpVelocityModel no_classes(uncond);
    CHECK_THROWS_AS(cond_uncond_divergence(no_classes, data, kSched, t_grid, 8, 27),
                    std::invalid_argument);
}

TEST_CASE("cond_uncond_divergence on trained models", "[slow]") {
    // two well-separated classes: conditional and unconditional predictions
    // must split; a single class trained with dropout must not
    Matrix centers(2, 2);
    centers(0, 0) = -5.0;
    centers(1, 0) = 5.0;
    const Dataset two_class = gen_mixture(centers, 0.5, 48, 28);

    auto trained = [&](const Dataset& data, std::size_t classes, std::uint64_t seed) {
        MlpVelocityModel::Config cfg;
        cfg.dim = 2;
        cfg.hidden = 32;
        cfg.class_embed = 8;
        cfg.num_classes = classes;
        cfg.init_seed = seed;
        MlpVelocityModel model(cfg);
        TrainConfig tc;
        tc.steps = 1200;
        tc.batch_size = 48;
        tc.learning_rate = 1e-3;
        tc.class_drop_prob = 0.1;
        tc.seed = seed;
        train(model, data, tc, kSched);
        return model;
    };

    std::vector<double> t_grid;
    for (int i = 1; i <= 9; ++i) t_grid.push_back(i * 0.1);

    const MlpVelocityModel both = trained(two_class, 2, 29);
    const SweepSeries split = cond_uncond_divergence(both, two_class, kSched, t_grid, 128, 30);
    for (std::size_t i = 0; i < t_grid.size(); ++i)
        if (t_grid[i] >= 0.1) CHECK(split.mean[i] > 1e-4);

    Matrix one_center(1, 2);
    one_center(0, 0) = 1.0;
    const Dataset one_class = gen_mixture(one_center, 1.0, 96, 31);
    const MlpVelocityModel single = trained(one_class, 1, 32);
    const SweepSeries near_zero =
        cond_uncond_divergence(single, one_class, kSched, t_grid, 128, 33);
    const ModelField field(single);
    const SweepSeries norms = velocity_norm_sweep(field, one_class, kSched, t_grid, 128, 34);
    const double max_div = *std::max_element(near_zero.mean.begin(), near_zero.mean.end());
    const double mean_norm = pairwise_mean(norms.mean);
    CHECK(max_div < 0.05 * mean_norm);
}

TEST_CASE("memorization_curve endpoints with an untrained model") {
    const Dataset data = gen_mixture(ring_centers(8, 8.0), 1.0, 8, 36);
    const OracleField oracle(data, kSched);
    MlpVelocityModel::Config cfg;
    cfg.dim = 2;
    cfg.hidden = 8;
    cfg.num_classes = 8;
    cfg.init_seed = 37;
    const MlpVelocityModel model(cfg); // zero field
    const ModelField field(model);

    const std::vector<double> t_switches{0.0, 1.0};
    const SweepSeries curve =
        memorization_curve(oracle, field, data, t_switches, 8, uniform_grid(100), 38);
    // t_switch=1: pure oracle retrieval
    CHECK(curve.mean[1] <= 0.05);
    // t_switch=0: the pure-model value is the curve's ceiling (the zero field
    // leaves the prior untouched)
    CHECK(curve.mean[0] > 3.0 * curve.mean[1]);
    CHECK(curve.n_mc == 8);
}

TEST_CASE("memorization_curve is worker-count independent") {
    const Dataset data = gen_mixture(ring_centers(4, 6.0), 1.0, 6, 39);
    const OracleField oracle(data, kSched);
    const CallableField drift(2, [](auto, double, auto) { return std::vector<double>{1.0, 0.0}; });
    const std::vector<double> t_switches{0.0, 0.5, 1.0};
    const SweepSeries a =
        memorization_curve(oracle, drift, data, t_switches, 6, uniform_grid(50), 40, 1);
    const SweepSeries b =
        memorization_curve(oracle, drift, data, t_switches, 6, uniform_grid(50), 40, 4);
    CHECK(a.mean == b.mean);
    CHECK(a.std_dev == b.std_dev);
}

TEST_CASE("sweep CSV output is deterministic and properly quoted") {
    SweepSeries series;
    series.statistic_name = "top1_weight";
    series.axis = {0.0, 0.5};
    series.mean = {0.1, 0.9};
    series.std_dev = {0.01, 0.0};
    series.n_mc = 16;
    series.seed = 7;

    auto render = [&] {
        std::ostringstream out;
        write_sweep_header(out);
        append_sweep_csv(out, series, R"({"d":4,"n":16})");
        return out.str();
    };
    const std::string a = render(), b = render();
    CHECK(a == b);
    std::istringstream in(a);
    std::string line;
    std::getline(in, line);
    CHECK(line == "sweep_name,param_json,t,mean,std,n_mc,seed");
    std::getline(in, line);
    CHECK(line == "top1_weight,\"{\"\"d\"\":4,\"\"n\"\":16}\",0,0.1,0.01,16,7");
}
