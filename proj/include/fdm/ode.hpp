#pragma once

// ODE integration for flows: fixed-step Euler/RK4, adaptive Dormand-Prince
// 5(4) with the standard mixed absolute/relative error norm, and on top of
// those the two flow operations that matter here: pushing prior samples to
// data time, and computing exact log likelihood by integrating the state
// together with the divergence backward to noise time.
//
// Integrators are direction-agnostic; likelihood integrates t downward. The
// instantaneous change of variables is d/dt log p_t(x_t) = -div v, so
//
//   log p(x at t_end) = log q(x at delta) - int_delta^t_end div v dt
//
// with q the path prior. A zero field must therefore return the prior
// density untouched, which the tests pin to 1e-10.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "model.hpp"
#include "paths.hpp"
#include "rng.hpp"

namespace fdm {

using OdeRhs = std::function<void(double t, const double* y, double* dy)>;

struct OdeOptions {
    double atol = 1.4e-8;
    double rtol = 1e-6;
    double safety = 0.9;
    double fac_min = 0.2;   // step shrink/grow clamps
    double fac_max = 10.0;
    double h_init = 0.0;    // 0 picks 1% of the span
    std::size_t max_steps = 100000;
};

struct OdeStats {
    std::size_t accepted = 0;
    std::size_t rejected = 0;
    std::size_t rhs_evals = 0;
};

namespace detail {

inline void check_finite(const double* y, std::size_t n, double t) {
    for (std::size_t i = 0; i < n; ++i)
        if (!std::isfinite(y[i]))
            throw NumericError("non-finite state during integration at t=" + std::to_string(t));
}

} // namespace detail

inline void integrate_euler(const OdeRhs& f, std::span<double> y, double t0, double t1,
                            std::size_t steps) {
    if (steps == 0) throw ConfigError("integrator needs at least one step");
    const std::size_t n = y.size();
    const double h = (t1 - t0) / static_cast<double>(steps);
    std::vector<double> k(n);
    double t = t0;
    for (std::size_t s = 0; s < steps; ++s) {
        f(t, y.data(), k.data());
        for (std::size_t i = 0; i < n; ++i) y[i] += h * k[i];
        t = t0 + h * static_cast<double>(s + 1);
        detail::check_finite(y.data(), n, t);
    }
}

inline void integrate_rk4(const OdeRhs& f, std::span<double> y, double t0, double t1,
                          std::size_t steps) {
    if (steps == 0) throw ConfigError("integrator needs at least one step");
    const std::size_t n = y.size();
    const double h = (t1 - t0) / static_cast<double>(steps);
    std::vector<double> k1(n), k2(n), k3(n), k4(n), tmp(n);
    double t = t0;
    for (std::size_t s = 0; s < steps; ++s) {
        f(t, y.data(), k1.data());
        for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * h * k1[i];
        f(t + 0.5 * h, tmp.data(), k2.data());
        for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + 0.5 * h * k2[i];
        f(t + 0.5 * h, tmp.data(), k3.data());
        for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + h * k3[i];
        f(t + h, tmp.data(), k4.data());
        for (std::size_t i = 0; i < n; ++i)
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        t = t0 + h * static_cast<double>(s + 1);
        detail::check_finite(y.data(), n, t);
    }
}

// Dormand-Prince 5(4), 7 stages, first-same-as-last. Error per component is
// scaled by atol + rtol max(|y|, |y_new|) and combined as an RMS norm; steps
// with norm <= 1 are accepted.
inline OdeStats integrate_dopri5(const OdeRhs& f, std::span<double> y, double t0, double t1,
                                 const OdeOptions& opt = {}) {
    static constexpr double a21 = 1.0 / 5;
    static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
    static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
    static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187,
                            a53 = 64448.0 / 6561, a54 = -212.0 / 729;
    static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                            a64 = 49.0 / 176, a65 = -5103.0 / 18656;
    static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                            b5 = -2187.0 / 6784, b6 = 11.0 / 84;
    static constexpr double e1 = 35.0 / 384 - 5179.0 / 57600, e3 = 500.0 / 1113 - 7571.0 / 16695,
                            e4 = 125.0 / 192 - 393.0 / 640,
                            e5 = -2187.0 / 6784 + 92097.0 / 339200,
                            e6 = 11.0 / 84 - 187.0 / 2100, e7 = -1.0 / 40;
    static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;

    const std::size_t n = y.size();
    const double span = t1 - t0;
    if (span == 0.0) return {};
    const double dir = span > 0.0 ? 1.0 : -1.0;

    std::vector<double> k1(n), k2(n), k3(n), k4(n), k5(n), k6(n), k7(n), tmp(n), y5(n);
    OdeStats st;

    double t = t0;
    double h = (opt.h_init != 0.0) ? dir * std::abs(opt.h_init) : 0.01 * span;
    f(t, y.data(), k1.data());
    ++st.rhs_evals;

    while (dir * (t1 - t) > 0.0) {
        if (st.accepted + st.rejected >= opt.max_steps)
            throw NumericError("adaptive integrator exceeded " + std::to_string(opt.max_steps) +
                               " steps at t=" + std::to_string(t));
        if (std::abs(h) < 1e-14 * std::abs(span))
            throw NumericError("adaptive step size underflow at t=" + std::to_string(t));
        if (dir * (t + h - t1) > 0.0) h = t1 - t;

        for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + h * a21 * k1[i];
        f(t + c2 * h, tmp.data(), k2.data());
        for (std::size_t i = 0; i < n; ++i) tmp[i] = y[i] + h * (a31 * k1[i] + a32 * k2[i]);
        f(t + c3 * h, tmp.data(), k3.data());
        for (std::size_t i = 0; i < n; ++i)
            tmp[i] = y[i] + h * (a41 * k1[i] + a42 * k2[i] + a43 * k3[i]);
        f(t + c4 * h, tmp.data(), k4.data());
        for (std::size_t i = 0; i < n; ++i)
            tmp[i] = y[i] + h * (a51 * k1[i] + a52 * k2[i] + a53 * k3[i] + a54 * k4[i]);
        f(t + c5 * h, tmp.data(), k5.data());
        for (std::size_t i = 0; i < n; ++i)
            tmp[i] = y[i] +
                     h * (a61 * k1[i] + a62 * k2[i] + a63 * k3[i] + a64 * k4[i] + a65 * k5[i]);
        f(t + h, tmp.data(), k6.data());
        for (std::size_t i = 0; i < n; ++i)
            y5[i] = y[i] +
                    h * (b1 * k1[i] + b3 * k3[i] + b4 * k4[i] + b5 * k5[i] + b6 * k6[i]);
        f(t + h, y5.data(), k7.data());
        st.rhs_evals += 6;

        double err2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double e = h * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] +
                                  e6 * k6[i] + e7 * k7[i]);
            const double sc = opt.atol + opt.rtol * std::max(std::abs(y[i]), std::abs(y5[i]));
            err2 += (e / sc) * (e / sc);
        }
        const double err = std::sqrt(err2 / static_cast<double>(n));
        if (!std::isfinite(err))
            throw NumericError("non-finite error estimate at t=" + std::to_string(t));

        if (err <= 1.0) {
            t += h;
            for (std::size_t i = 0; i < n; ++i) y[i] = y5[i];
            k1.swap(k7);  // first-same-as-last
            ++st.accepted;
            detail::check_finite(y.data(), n, t);
        } else {
            ++st.rejected;
        }
        const double fac = std::clamp(opt.safety * std::pow(err > 0.0 ? err : 1e-10, -0.2),
                                      opt.fac_min, opt.fac_max);
        h *= fac;
    }
    return st;
}

// --- flow operations --------------------------------------------------------

enum class OdeMethod { Euler, RK4, Dopri5 };

inline const char* method_name(OdeMethod m) {
    switch (m) {
        case OdeMethod::Euler: return "euler";
        case OdeMethod::RK4: return "rk4";
        case OdeMethod::Dopri5: return "dopri5";
    }
    return "?";
}

inline OdeMethod method_from_name(const std::string& s) {
    if (s == "euler") return OdeMethod::Euler;
    if (s == "rk4") return OdeMethod::RK4;
    if (s == "dopri5") return OdeMethod::Dopri5;
    throw ConfigError("unknown integrator '" + s + "' (want euler|rk4|dopri5)");
}

// A velocity field with a divergence, dimension attached. Adapters below
// wrap models; tests wrap oracles.
struct DivField {
    std::size_t dim = 0;
    std::function<void(double t, const double* x, double* v)> value;
    std::function<double(double t, const double* x)> div;  // may be empty for sampling
};

inline DivField model_div_field(const VectorFieldModel& m, VectorFieldModel::Workspace& ws,
                                const double* cond = nullptr) {
    DivField f;
    f.dim = m.config().dim;
    f.value = [&m, &ws, cond](double t, const double* x, double* v) {
        m.velocity(t, x, v, ws, cond);
    };
    f.div = [&m, &ws, cond](double t, const double* x) {
        return m.divergence_exact(t, x, ws, cond);
    };
    return f;
}

// Hutchinson divergence with probes drawn once and held fixed, so the
// likelihood integrand stays smooth along the trajectory.
inline DivField model_div_field_probes(const VectorFieldModel& m,
                                       VectorFieldModel::Workspace& ws,
                                       std::vector<double> probes,
                                       const double* cond = nullptr) {
    if (probes.empty() || probes.size() % m.config().dim != 0)
        throw ShapeError("probe buffer must hold k*dim values");
    DivField f;
    f.dim = m.config().dim;
    f.value = [&m, &ws, cond](double t, const double* x, double* v) {
        m.velocity(t, x, v, ws, cond);
    };
    f.div = [&m, &ws, cond, p = std::move(probes)](double t, const double* x) {
        return m.divergence_hutchinson(t, x, p, ws, cond);
    };
    return f;
}

inline std::vector<double> rademacher_probes(std::size_t dim, std::size_t k, Rng& rng) {
    std::vector<double> p(dim * k);
    for (double& v : p) v = rng.uniform() < 0.5 ? -1.0 : 1.0;
    return p;
}

// Push one prior draw from noise time to data time. Returns the sample in x.
inline OdeStats sample_flow(const DivField& field, const Path& path, Rng& rng,
                            std::span<double> x, OdeMethod method = OdeMethod::Dopri5,
                            std::size_t fixed_steps = 100, const OdeOptions& opt = {}) {
    if (x.size() != field.dim) throw ShapeError("sample_flow: state size != field dim");
    path.prior_sample(rng, x.data());
    const double delta = path.params().clip_delta;
    const OdeRhs rhs = [&field](double t, const double* y, double* dy) {
        field.value(t, y, dy);
    };
    switch (method) {
        case OdeMethod::Euler:
            integrate_euler(rhs, x, delta, 1.0 - delta, fixed_steps);
            return {fixed_steps, 0, fixed_steps};
        case OdeMethod::RK4:
            integrate_rk4(rhs, x, delta, 1.0 - delta, fixed_steps);
            return {fixed_steps, 0, 4 * fixed_steps};
        case OdeMethod::Dopri5:
            return integrate_dopri5(rhs, x, delta, 1.0 - delta, opt);
    }
    return {};
}

struct LikelihoodResult {
    double logp = 0.0;        // log density of x under the flow at t_end
    double prior_term = 0.0;  // log q(x at delta)
    double div_term = 0.0;    // integral of div v from delta to t_end
    OdeStats stats;
};

// Exact likelihood of a point under the flow's marginal at time t_end
// (defaults to the data end). Integrates [x, L] backward; L accumulates
// int div v dt, so logp = prior - L.
inline LikelihoodResult log_likelihood(const DivField& field, const Path& path,
                                       std::span<const double> x, double t_end = -1.0,
                                       const OdeOptions& opt = {}) {
    if (x.size() != field.dim) throw ShapeError("log_likelihood: state size != field dim");
    if (!field.div) throw ConfigError("log_likelihood needs a field with a divergence");
    const double delta = path.params().clip_delta;
    if (t_end < 0.0) t_end = 1.0 - delta;
    if (t_end < delta || t_end > 1.0 - delta)
        throw ConfigError("likelihood time must lie in [delta, 1-delta]");

    const std::size_t d = field.dim;
    std::vector<double> aug(d + 1, 0.0);
    for (std::size_t i = 0; i < d; ++i) aug[i] = x[i];

    const OdeRhs rhs = [&field, d](double t, const double* y, double* dy) {
        field.value(t, y, dy);
        dy[d] = field.div(t, y);
    };
    LikelihoodResult r;
    r.stats = integrate_dopri5(rhs, aug, t_end, delta, opt);
    // integrated t_end -> delta, so aug[d] = -(int_delta^t_end div dt)
    r.div_term = -aug[d];
    r.prior_term = path.prior_logdensity(aug.data());
    r.logp = r.prior_term - r.div_term;
    return r;
}

} // namespace fdm
