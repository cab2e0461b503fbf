// Path family identities. The heart of the module is that the conditional
// field transports the conditional Gaussian: d/dt [s_t x1 + sigma_t z] must
// equal u_t evaluated on the path, and the density must satisfy the material
// form of the continuity equation. Both are checked against finite
// differences; the drift/diffusion view is checked against the exact algebra
// that converts a field into a score.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "fdm/paths.hpp"
#include "fdm/rng.hpp"

using namespace fdm;

namespace {

double gauss_logpdf_1d(double x, double mean, double var) {
    constexpr double log2pi = 1.8378770664093454836;
    const double d = x - mean;
    return -0.5 * (d * d / var + std::log(var) + log2pi);
}

// conditional log p_t(x|x1) for a d-dim isotropic Gaussian path
double cond_logpdf(const Path& p, double t, const std::vector<double>& x,
                   const std::vector<double>& x1) {
    const double s = p.mean_coef(t), sg = p.sigma(t);
    double lp = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
        lp += gauss_logpdf_1d(x[i], s * x1[i], sg * sg);
    return lp;
}

std::vector<Path> all_families(std::size_t dim) {
    PathParams prm;
    prm.ve_sigma_a = 0.05;
    prm.ve_sigma_b = 8.0;
    return {Path(PathFamily::OT, dim, prm), Path(PathFamily::VP, dim, prm),
            Path(PathFamily::VE, dim, prm)};
}

} // namespace

TEST_CASE("conditional field transports the path: dx/dt == u_t(x|x1)") {
    const std::size_t d = 3;
    Rng rng(42);
    for (const Path& p : all_families(d)) {
        std::vector<double> x1(d), z(d);
        for (auto& v : x1) v = rng.normal() * 1.5;
        for (auto& v : z) v = rng.normal();
        for (double t : {0.05, 0.2, 0.5, 0.8, 0.95}) {
            const double h = 1e-5;
            std::vector<double> xp(d), xm(d), x0(d), u(d);
            p.sample_point(t + h, x1.data(), z.data(), xp.data());
            p.sample_point(t - h, x1.data(), z.data(), xm.data());
            p.sample_point(t, x1.data(), z.data(), x0.data());
            p.cond_field(t, x0.data(), x1.data(), u.data());
            for (std::size_t i = 0; i < d; ++i) {
                const double fd = (xp[i] - xm[i]) / (2 * h);
                INFO(family_name(p.family()) << " t=" << t << " i=" << i);
                CHECK(std::abs(u[i] - fd) <=
                      1e-6 * std::max({1.0, std::abs(u[i]), std::abs(fd)}));
            }
        }
    }
}

TEST_CASE("conditional divergence equals d * a_t and matches finite differences") {
    const std::size_t d = 4;
    Rng rng(7);
    for (const Path& p : all_families(d)) {
        std::vector<double> x1(d), x(d), up(d), um(d);
        for (auto& v : x1) v = rng.normal();
        for (auto& v : x) v = rng.normal();
        for (double t : {0.1, 0.5, 0.9}) {
            const double h = 1e-6;
            double div_fd = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                std::vector<double> xx = x;
                xx[i] += h;
                p.cond_field(t, xx.data(), x1.data(), up.data());
                xx[i] -= 2 * h;
                p.cond_field(t, xx.data(), x1.data(), um.data());
                div_fd += (up[i] - um[i]) / (2 * h);
            }
            const double dv = p.cond_div(t);
            INFO(family_name(p.family()) << " t=" << t);
            CHECK(std::abs(dv - div_fd) <= 1e-5 * std::max(1.0, std::abs(dv)));
            CHECK(dv == static_cast<double>(d) * p.field_coeffs(t).a);
        }
    }
}

TEST_CASE("conditional score matches the gradient of the Gaussian log density") {
    const std::size_t d = 2;
    Rng rng(19);
    for (const Path& p : all_families(d)) {
        std::vector<double> x1(d), x(d), score(d);
        for (auto& v : x1) v = rng.normal();
        for (auto& v : x) v = 2.0 * rng.normal();
        for (double t : {0.15, 0.6, 0.92}) {
            p.cond_score(t, x.data(), x1.data(), score.data());
            const double h = 1e-6;
            for (std::size_t i = 0; i < d; ++i) {
                std::vector<double> xx = x;
                xx[i] += h;
                const double lp = cond_logpdf(p, t, xx, x1);
                xx[i] -= 2 * h;
                const double lm = cond_logpdf(p, t, xx, x1);
                const double fd = (lp - lm) / (2 * h);
                INFO(family_name(p.family()) << " t=" << t << " i=" << i);
                CHECK(std::abs(score[i] - fd) <=
                      1e-4 * std::max(1.0, std::abs(score[i])));
            }
        }
    }
}

TEST_CASE("material continuity: dt log p + u . grad log p + div u == 0") {
    const std::size_t d = 2;
    Rng rng(23);
    for (const Path& p : all_families(d)) {
        std::vector<double> x1(d), x(d), u(d), score(d);
        for (auto& v : x1) v = rng.normal();
        for (double t : {0.1, 0.35, 0.7, 0.9}) {
            // sample x near the path so densities are not degenerate
            std::vector<double> z(d);
            for (auto& v : z) v = rng.normal();
            p.sample_point(t, x1.data(), z.data(), x.data());
            const double h = 1e-5;
            const double dt_logp =
                (cond_logpdf(p, t + h, x, x1) - cond_logpdf(p, t - h, x, x1)) / (2 * h);
            p.cond_field(t, x.data(), x1.data(), u.data());
            p.cond_score(t, x.data(), x1.data(), score.data());
            double residual = dt_logp + p.cond_div(t);
            for (std::size_t i = 0; i < d; ++i) residual += u[i] * score[i];
            INFO(family_name(p.family()) << " t=" << t);
            CHECK(std::abs(residual) <= 2e-5 * std::max(1.0, std::abs(dt_logp)));
        }
    }
}

TEST_CASE("drift/diffusion view reproduces the field: u == -f x + g^2/2 score") {
    const std::size_t d = 3;
    Rng rng(31);
    PathParams prm;
    prm.ve_sigma_a = 0.05;
    prm.ve_sigma_b = 8.0;
    for (PathFamily fam : {PathFamily::VP, PathFamily::VE}) {
        Path p(fam, d, prm);
        std::vector<double> x1(d), x(d), u(d), score(d);
        for (auto& v : x1) v = rng.normal();
        for (auto& v : x) v = rng.normal();
        for (double t : {0.05, 0.4, 0.75, 0.99}) {
            p.cond_field(t, x.data(), x1.data(), u.data());
            p.cond_score(t, x.data(), x1.data(), score.data());
            const Schedule sc = p.schedule(t);
            for (std::size_t i = 0; i < d; ++i) {
                const double rhs = -sc.f_coeff * x[i] + 0.5 * sc.g2 * score[i];
                INFO(family_name(fam) << " t=" << t << " i=" << i);
                CHECK(std::abs(u[i] - rhs) <= 1e-12 * std::max(1.0, std::abs(u[i])));
            }
        }
    }
}

TEST_CASE("schedule sigma derivative matches finite differences") {
    PathParams prm;
    prm.ve_sigma_a = 0.05;
    prm.ve_sigma_b = 8.0;
    for (PathFamily fam : {PathFamily::VP, PathFamily::VE}) {
        Path p(fam, 1, prm);
        for (double t : {0.1, 0.5, 0.85}) {
            const double h = 1e-6;
            // diffusion-time derivative: sigma as a function of s = 1-t
            const double num =
                (p.sigma(t - h) - p.sigma(t + h)) / (2 * h);  // d sigma / ds
            const Schedule sc = p.schedule(t);
            INFO(family_name(fam) << " t=" << t);
            CHECK(std::abs(sc.dsigma_diff - num) <=
                  1e-5 * std::max(1.0, std::abs(num)));
        }
    }
}

TEST_CASE("OT path has no drift/diffusion form") {
    Path p(PathFamily::OT, 2);
    REQUIRE_THROWS_AS(p.schedule(0.5), UnsupportedError);
}

TEST_CASE("OT closed forms at a hand-checked point") {
    PathParams prm;
    prm.sigma_min = 1e-4;
    Path p(PathFamily::OT, 1, prm);
    CHECK(p.mean_coef(0.0) == 0.0);
    CHECK(p.sigma(0.0) == 1.0);
    CHECK(p.sigma(1.0) == Catch::Approx(1e-4));
    const double t = 0.5;
    const double den = 1.0 - 0.9999 * 0.5;
    const FieldCoeffs c = p.field_coeffs(t);
    CHECK(c.a == Catch::Approx(-0.9999 / den).epsilon(1e-14));
    CHECK(c.b == Catch::Approx(1.0 / den).epsilon(1e-14));
}

TEST_CASE("time clipping clamps evaluation and reports it") {
    Path p(PathFamily::VP, 1);
    bool clipped = false;
    CHECK(p.clip_time(0.5, &clipped) == 0.5);
    CHECK_FALSE(clipped);
    CHECK(p.clip_time(1.0, &clipped) == 1.0 - p.params().clip_delta);
    CHECK(clipped);
    CHECK(p.clip_time(0.0, &clipped) == p.params().clip_delta);
    CHECK(clipped);
    // the VP field is singular at t=1; the clipped evaluation must be finite
    const double x = 0.3, x1 = -1.2;
    double u_end = 0.0, u_near = 0.0;
    p.cond_field(1.0, &x, &x1, &u_end);
    p.cond_field(1.0 - p.params().clip_delta, &x, &x1, &u_near);
    CHECK(std::isfinite(u_end));
    CHECK(u_end == u_near);
}

TEST_CASE("noise-end prior is standard normal for OT and VP") {
    const std::size_t n = 100000;
    Rng rng(555);
    for (PathFamily fam : {PathFamily::OT, PathFamily::VP}) {
        Path p(fam, 1);
        double sum = 0.0, sumsq = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double x1 = (i % 2 == 0) ? 2.5 : -1.0;  // spread-out data
            const double z = rng.normal();
            double x = 0.0;
            p.sample_point(0.0, &x1, &z, &x);
            sum += x;
            sumsq += x * x;
        }
        const double mean = sum / n;
        const double var = sumsq / n - mean * mean;
        const double se_mean = 1.0 / std::sqrt(static_cast<double>(n));
        const double se_var = std::sqrt(2.0 / static_cast<double>(n - 1));
        INFO(family_name(fam) << " mean=" << mean << " var=" << var);
        CHECK(std::abs(mean - 0.0) <= 4 * se_mean);
        CHECK(std::abs(var - 1.0) <= 4 * se_var);
    }
}

TEST_CASE("prior log density normalizes against the sampler width") {
    PathParams prm;
    prm.ve_sigma_a = 0.05;
    prm.ve_sigma_b = 8.0;
    Path pve(PathFamily::VE, 2, prm);
    const double x[2] = {1.0, -3.0};
    const double expect = gauss_logpdf_1d(1.0, 0.0, 64.0) + gauss_logpdf_1d(-3.0, 0.0, 64.0);
    CHECK(pve.prior_logdensity(x) == Catch::Approx(expect).epsilon(1e-13));
    Path pot(PathFamily::OT, 2, prm);
    const double expect_std = gauss_logpdf_1d(1.0, 0.0, 1.0) + gauss_logpdf_1d(-3.0, 0.0, 1.0);
    CHECK(pot.prior_logdensity(x) == Catch::Approx(expect_std).epsilon(1e-13));
}

TEST_CASE("sigma stays positive away from the data endpoint") {
    for (const Path& p : all_families(1)) {
        CHECK(p.sigma(0.0) > 0.0);
        CHECK(p.sigma(0.999) > 0.0);
        CHECK(p.sigma(1.0 - p.params().clip_delta) > 0.0);
    }
}

TEST_CASE("bad construction and bad times are rejected") {
    CHECK_THROWS_AS(Path(PathFamily::OT, 0), ConfigError);
    PathParams bad;
    bad.sigma_min = 0.0;
    CHECK_THROWS_AS(Path(PathFamily::OT, 1, bad), ConfigError);
    PathParams badve;
    badve.ve_sigma_a = 2.0;
    badve.ve_sigma_b = 1.0;
    CHECK_THROWS_AS(Path(PathFamily::VE, 1, badve), ConfigError);
    Path p(PathFamily::OT, 1);
    double x = 0, x1 = 0, u = 0;
    CHECK_THROWS_AS(p.cond_field(1.5, &x, &x1, &u), NumericError);
    CHECK_THROWS_AS(p.cond_field(-0.1, &x, &x1, &u), NumericError);
}
