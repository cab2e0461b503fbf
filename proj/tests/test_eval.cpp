#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <vector>

#include "fdm/eval.hpp"
#include "fdm/model.hpp"

using namespace fdm;

namespace {

double unit_gauss(double x, double mean) {
    return std::exp(-0.5 * (x - mean) * (x - mean)) / std::sqrt(2.0 * std::numbers::pi);
}

// TV between N(0,1) and N(1,1) has the closed form 2*Phi(1/2) - 1
const double kShiftedGaussTv = std::erf(0.5 / std::sqrt(2.0));

} // namespace

TEST_CASE("grid TV between shifted unit Gaussians matches the closed form") {
    const double tv = tv_density_grid([](double x) { return unit_gauss(x, 0.0); },
                                      [](double x) { return unit_gauss(x, 1.0); }, -6.0, 7.0, 2000);
    CHECK(tv == Catch::Approx(kShiftedGaussTv).margin(1e-4));

    const double self = tv_density_grid([](double x) { return unit_gauss(x, 0.0); },
                                        [](double x) { return unit_gauss(x, 0.0); }, -6.0, 7.0, 2000);
    CHECK(self == 0.0);

    CHECK_THROWS_AS(tv_density_grid([](double) { return 0.0; }, [](double) { return 0.0; },
                                    -6.0, 7.0, 100),
                    ConfigError);
}

TEST_CASE("density TV of the oracle against itself is quadrature noise") {
    const Mixture1D mix = mix1d_target();
    const Path path(PathFamily::OT, 1);
    const Field1D oracle = oracle_field(mix, path);
    DivField field;
    field.dim = 1;
    field.value = [&](double t, const double* x, double* out) { out[0] = oracle.value(t, x[0]); };
    field.div = [&](double t, const double* x) { return oracle.div(t, x[0]); };

    const double tv = tv_density_1d(field, path, mix);
    CHECK(tv < 1e-4);

    const Path path2(PathFamily::OT, 2);
    CHECK_THROWS_AS(tv_density_1d(field, path2, mix), ConfigError);
}

TEST_CASE("histogram TV basics and the Gaussian pair") {
    HistogramSpec h{200, -6.0, 7.0, 1e-10};

    std::vector<double> same{0.1, 0.5, 0.9, 1.4, 2.2};
    CHECK(tv_histogram(same, same, h) == 0.0);
    CHECK(kl_histogram(same, same, h) == Catch::Approx(0.0).margin(1e-12));

    std::vector<double> left{-4.0, -4.2, -3.9}, right{4.0, 4.2, 3.9};
    CHECK(tv_histogram(left, right, h) == Catch::Approx(1.0).margin(1e-12));

    Rng rng(15);
    const std::size_t n = 1000000;
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
        a[i] = rng.normal();
        b[i] = rng.normal() + 1.0;
    }
    const double tv = tv_histogram(a, b, h);
    CHECK(tv == Catch::Approx(kShiftedGaussTv).margin(0.01));
    CHECK(tv == tv_histogram(b, a, h));  // symmetric

    const double kl_ab = kl_histogram(a, b, h);
    const double kl_ba = kl_histogram(b, a, h);
    CHECK(kl_ab >= 0.0);
    // KL(N(0,1)||N(1,1)) = 1/2; binning spreads it a little
    CHECK(kl_ab == Catch::Approx(0.5).margin(0.05));
    CHECK(kl_ab != kl_ba);

    std::vector<double> empty;
    CHECK_THROWS_AS(tv_histogram(empty, same, h), DataError);
    CHECK_THROWS_AS(kl_histogram(same, empty, h), DataError);
    HistogramSpec bad{1, 0.0, 1.0, 1e-10};
    CHECK_THROWS_AS(tv_histogram(same, same, bad), ConfigError);
}

TEST_CASE("kl is asymmetric with a wide-narrow witness pair") {
    Rng rng(77);
    std::vector<double> wide(20000), narrow(20000);
    for (double& v : wide) v = 3.0 * rng.normal();
    for (double& v : narrow) v = 0.5 * rng.normal();
    HistogramSpec h{200, -10.0, 10.0, 1e-10};
    // narrow||wide is modest, wide||narrow pays the floor penalty in the tails
    CHECK(kl_histogram(wide, narrow, h) > kl_histogram(narrow, wide, h) + 0.5);
}

TEST_CASE("nll of the zero field on standard-normal data is the gaussian entropy") {
    const std::size_t d = 2;
    ModelConfig mc;
    mc.dim = d;
    mc.hidden = {8};
    mc.time_freqs = 2;
    VectorFieldModel model(mc);
    model.init(1);
    std::vector<double> zeros(model.param_count(), 0.0);
    model.set_params_from(zeros);
    auto ws = model.make_workspace();
    DivField field = model_div_field(model, ws);

    Rng rng(5);
    Tensor rows(400, d);
    for (double& v : rows.data) v = rng.normal();

    const Path path(PathFamily::OT, d);
    const NllResult res = mean_nll(field, path, rows);
    CHECK(res.used == 400);
    CHECK(res.failed == 0);
    const double entropy = 0.5 * std::log(2.0 * std::numbers::pi) + 0.5;
    CHECK(res.mean == Catch::Approx(entropy).margin(4.0 * res.se + 1e-3));
    CHECK(res.se > 0.0);

    // order invariance: reversing the rows moves the mean by rounding only
    Tensor rev(rows.rows, rows.cols);
    for (std::size_t i = 0; i < rows.rows; ++i)
        for (std::size_t j = 0; j < d; ++j) rev.at(i, j) = rows.at(rows.rows - 1 - i, j);
    const NllResult res2 = mean_nll(field, path, rev);
    CHECK(res2.mean == Catch::Approx(res.mean).margin(1e-12));

    Tensor none(0, 0);
    CHECK_THROWS_AS(mean_nll(field, path, none), DataError);
}

TEST_CASE("event probability endpoints and standard error") {
    EventConstraint spike = fhn_spike(3);
    Tensor quiet(50, spike.flat_dim());  // all zeros: C = -2.5 everywhere
    const EventRate none = event_probability(quiet, spike);
    CHECK(none.p == 0.0);
    CHECK(none.se == 0.0);
    CHECK(none.n == 50);

    Tensor loud(40, spike.flat_dim());
    for (std::size_t i = 0; i < loud.rows; ++i) loud.at(i, 4) = 6.0;  // step 1, x1
    REQUIRE(spike.value(std::span<const double>(loud.ptr(), spike.flat_dim())) > 0.0);
    const EventRate all = event_probability(loud, spike);
    CHECK(all.p == 1.0);

    Tensor mixed(100, spike.flat_dim());
    for (std::size_t i = 0; i < 25; ++i) mixed.at(i, 4) = 6.0;
    const EventRate quarter = event_probability(mixed, spike);
    CHECK(quarter.p == Catch::Approx(0.25));
    CHECK(quarter.se == Catch::Approx(std::sqrt(0.25 * 0.75 / 100.0)));
}

TEST_CASE("marginal TV separates shifted sample clouds") {
    Rng rng(31);
    Tensor a(4000, 3), b(4000, 3), c(4000, 3);
    for (double& v : a.data) v = rng.normal();
    for (double& v : b.data) v = rng.normal();
    for (double& v : c.data) v = rng.normal() + 2.0;

    const double same = mean_marginal_tv(a, b);
    const double far = mean_marginal_tv(a, c);
    CHECK(same < 0.15);     // binning noise floor only
    CHECK(far > 0.5);
    CHECK(far <= 1.0);

    Tensor skinny(10, 2);
    CHECK_THROWS_AS(mean_marginal_tv(a, skinny), ShapeError);
}

TEST_CASE("constraint values feed histogram comparisons") {
    EventConstraint spike = fhn_spike(3);
    Tensor rows(30, spike.flat_dim());
    for (std::size_t i = 0; i < rows.rows; ++i) rows.at(i, 0) = static_cast<double>(i) * 0.1;
    const std::vector<double> vals = constraint_values(rows, spike);
    REQUIRE(vals.size() == 30);
    for (std::size_t i = 0; i < vals.size(); ++i)
        CHECK(vals[i] == Catch::Approx(0.05 * static_cast<double>(i) - 2.5).margin(1e-12));
}

TEST_CASE("metrics csv writes rows the harness can read back") {
    const std::string path = "/tmp/fdm_eval_metrics.csv";
    std::filesystem::remove(path);
    write_metrics_csv(path, {{"tv_density_1d", 0.0587, 0.001, 2000}, {"nll", -1.25, 0.02, 500}},
                      0xdeadbeef12345678ull);
    std::ifstream is(path);
    std::string line;
    std::getline(is, line);
    CHECK(line == "name,value,stderr,n,config_hash");
    std::getline(is, line);
    CHECK(line == "tv_density_1d,0.0587,0.001,2000,deadbeef12345678");
    std::getline(is, line);
    CHECK(line == "nll,-1.25,0.02,500,deadbeef12345678");
    CHECK(!std::getline(is, line));
    std::filesystem::remove(path);
}
