#pragma once

// Closed-form marginals for a 1D Gaussian mixture pushed through a Gaussian
// path. With p(x1) = sum_i w_i N(m_i, v_i) and p_t(x|x1) = N(s_t x1,
// sigma_t^2), every marginal quantity is available exactly:
//
//   p_t(x)      = sum_i w_i N(x; s_t m_i, s_t^2 v_i + sigma_t^2)
//   score       = sum_i r_i(x) * (-(x - M_i)/V_i)
//   field       = a_t x + b_t E[x1|x]         (the conditional field is
//                 affine, u = a x + b x1, so marginalizing is a posterior
//                 mean over x1)
//   divergence  = a_t + b_t * d/dx E[x1|x]
//
// with responsibilities r_i computed in log space. This is the oracle that
// Monte Carlo checks of the density-matching bounds lean on, so it gets its
// own finite-difference and quadrature tests rather than trusting the
// algebra above.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "paths.hpp"
#include "rng.hpp"

namespace fdm {

struct MixtureComponent {
    double weight = 1.0;
    double mean = 0.0;
    double var = 1.0;
};

struct Mixture1D {
    std::vector<MixtureComponent> comps;

    Mixture1D() = default;
    explicit Mixture1D(std::vector<MixtureComponent> c) : comps(std::move(c)) {
        if (comps.empty()) throw ConfigError("mixture needs at least one component");
        double wsum = 0.0;
        for (const auto& mc : comps) {
            if (mc.weight <= 0.0) throw ConfigError("mixture weights must be positive");
            if (mc.var <= 0.0) throw ConfigError("mixture variances must be positive");
            wsum += mc.weight;
        }
        if (std::abs(wsum - 1.0) > 1e-9)
            throw ConfigError("mixture weights must sum to 1, got " + std::to_string(wsum));
    }

    double density(double x) const {
        double p = 0.0;
        for (const auto& c : comps) p += c.weight * gauss(x, c.mean, c.var);
        return p;
    }

    double sample(Rng& rng) const {
        const double u = rng.uniform();
        double acc = 0.0;
        for (const auto& c : comps) {
            acc += c.weight;
            if (u < acc) return c.mean + std::sqrt(c.var) * rng.normal();
        }
        const auto& last = comps.back();
        return last.mean + std::sqrt(last.var) * rng.normal();
    }

    static double gauss(double x, double mean, double var) {
        constexpr double inv_sqrt2pi = 0.3989422804014326779;
        const double d = x - mean;
        return inv_sqrt2pi / std::sqrt(var) * std::exp(-0.5 * d * d / var);
    }

    static double log_gauss(double x, double mean, double var) {
        constexpr double log2pi = 1.8378770664093454836;
        const double d = x - mean;
        return -0.5 * (d * d / var + std::log(var) + log2pi);
    }
};

// The toolkit's canonical 1D target. The two inner components sit on the
// same spot and are kept separate on purpose: duplicate entries are legal
// and the marginal algebra must not care.
inline Mixture1D mix1d_target() {
    return Mixture1D({{0.23, -3.0, 0.1}, {0.35, -1.0, 0.1}, {0.15, -1.0, 0.1}, {0.27, 3.0, 0.1}});
}

namespace detail {

struct MarginalWork {
    double logp = 0.0;    // log p_t(x)
    double score = 0.0;   // d/dx log p_t(x)
    double post_mean = 0.0;    // E[x1 | x]
    double dpost_mean = 0.0;   // d/dx E[x1 | x]
};

inline MarginalWork marginal_work(const Mixture1D& mix, const Path& path, double t, double x) {
    const double tc = path.clip_time(t);
    const double s = path.mean_coef(tc);
    const double sg = path.sigma(tc);
    const double sg2 = sg * sg;

    const std::size_t n = mix.comps.size();
    std::vector<double> logw(n), comp_score(n), pm(n), dpm(n);
    double lmax = -1e300;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& c = mix.comps[i];
        const double big_m = s * c.mean;
        const double big_v = s * s * c.var + sg2;
        logw[i] = std::log(c.weight) + Mixture1D::log_gauss(x, big_m, big_v);
        comp_score[i] = -(x - big_m) / big_v;
        // posterior over x1 within component i: precision form
        const double post_var = 1.0 / (1.0 / c.var + s * s / sg2);
        pm[i] = post_var * (c.mean / c.var + s * x / sg2);
        dpm[i] = post_var * s / sg2;
        if (logw[i] > lmax) lmax = logw[i];
    }
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += std::exp(logw[i] - lmax);

    MarginalWork out;
    out.logp = lmax + std::log(z);
    for (std::size_t i = 0; i < n; ++i) {
        const double r = std::exp(logw[i] - lmax) / z;
        out.score += r * comp_score[i];
        out.post_mean += r * pm[i];
    }
    // d/dx of the responsibility-weighted posterior mean: the responsibilities
    // move with x (dr_i/dx = r_i (score_i - score)) and so do the component
    // posterior means
    for (std::size_t i = 0; i < n; ++i) {
        const double r = std::exp(logw[i] - lmax) / z;
        out.dpost_mean += r * ((comp_score[i] - out.score) * pm[i] + dpm[i]);
    }
    return out;
}

} // namespace detail

inline double marginal_logdensity(const Mixture1D& mix, const Path& path, double t, double x) {
    return detail::marginal_work(mix, path, t, x).logp;
}

inline double marginal_density(const Mixture1D& mix, const Path& path, double t, double x) {
    return std::exp(marginal_logdensity(mix, path, t, x));
}

inline double marginal_score(const Mixture1D& mix, const Path& path, double t, double x) {
    return detail::marginal_work(mix, path, t, x).score;
}

inline double marginal_field(const Mixture1D& mix, const Path& path, double t, double x) {
    const FieldCoeffs c = path.field_coeffs(t);
    const auto w = detail::marginal_work(mix, path, t, x);
    return c.a * x + c.b * w.post_mean;
}

inline double marginal_div(const Mixture1D& mix, const Path& path, double t, double x) {
    const FieldCoeffs c = path.field_coeffs(t);
    const auto w = detail::marginal_work(mix, path, t, x);
    return c.a + c.b * w.dpost_mean;
}

// Draw x ~ p_t by pushing a data sample through the path.
inline double sample_marginal(const Mixture1D& mix, const Path& path, double t, Rng& rng) {
    const double x1 = mix.sample(rng);
    const double z = rng.normal();
    double x = 0.0;
    path.sample_point(t, &x1, &z, &x);
    return x;
}

// A 1D velocity field with a divergence, the shape the oracle losses accept.
// Wraps either a trained model or the oracle itself.
struct Field1D {
    std::function<double(double t, double x)> value;
    std::function<double(double t, double x)> div;
};

inline Field1D oracle_field(const Mixture1D& mix, const Path& path) {
    return {[&mix, &path](double t, double x) { return marginal_field(mix, path, t, x); },
            [&mix, &path](double t, double x) { return marginal_div(mix, path, t, x); }};
}

struct McEstimate {
    double mean = 0.0;
    double se = 0.0;
    std::size_t n = 0;
};

// Paired Monte Carlo samples of the marginal (density-matching) and
// conditional (its trainable upper bound) integrands, evaluated on the same
// (t, x1, noise) draws so their ordering can be tested without the sampling
// noise swamping it. out_dm / out_cdm must hold n doubles.
inline void dm_cdm_samples(const Mixture1D& mix, const Path& path, const Field1D& field,
                           std::size_t n, std::uint64_t seed, double* out_dm,
                           double* out_cdm) {
    Rng rng = Rng::stream(seed, 0x646d5f6f7261636cULL);
    for (std::size_t i = 0; i < n; ++i) {
        const double t = rng.uniform();
        const double tc = path.clip_time(t);
        const double x1 = mix.sample(rng);
        const double z = rng.normal();
        double x = 0.0;
        path.sample_point(tc, &x1, &z, &x);

        const double v = field.value(tc, x);
        const double dv = field.div(tc, x);

        const auto w = detail::marginal_work(mix, path, tc, x);
        const FieldCoeffs fc = path.field_coeffs(tc);
        const double u_marg = fc.a * x + fc.b * w.post_mean;
        const double du_marg = fc.a + fc.b * w.dpost_mean;
        out_dm[i] = std::abs(du_marg - dv + (u_marg - v) * w.score);

        double u_cond = 0.0, cscore = 0.0;
        path.cond_field(tc, &x, &x1, &u_cond);
        path.cond_score(tc, &x, &x1, &cscore);
        const double du_cond = path.cond_div(tc);
        out_cdm[i] = std::abs(du_cond - dv + (u_cond - v) * cscore);
    }
}

inline McEstimate mc_stats(const double* samples, std::size_t n) {
    double m1 = 0.0;
    for (std::size_t i = 0; i < n; ++i) m1 += samples[i];
    m1 /= static_cast<double>(n);
    double m2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = samples[i] - m1;
        m2 += d * d;
    }
    const double var = (n > 1) ? m2 / static_cast<double>(n - 1) : 0.0;
    return {m1, std::sqrt(var / static_cast<double>(n)), n};
}

// Monte Carlo estimate of the density-matching loss of `field` against the
// exact mixture marginals: E_{t,x} |div u - div v + (u - v) . score|.
inline McEstimate dm_loss_oracle(const Mixture1D& mix, const Path& path, const Field1D& field,
                                 std::size_t n, std::uint64_t seed) {
    std::vector<double> dm(n), cdm(n);
    dm_cdm_samples(mix, path, field, n, seed, dm.data(), cdm.data());
    return mc_stats(dm.data(), n);
}

inline McEstimate cdm_loss_oracle(const Mixture1D& mix, const Path& path, const Field1D& field,
                                  std::size_t n, std::uint64_t seed) {
    std::vector<double> dm(n), cdm(n);
    dm_cdm_samples(mix, path, field, n, seed, dm.data(), cdm.data());
    return mc_stats(cdm.data(), n);
}

} // namespace fdm
