#pragma once

// Event-guided sampling. The learned velocity field is first converted to a
// score through the drift/noise decomposition of the probability path, then
// an event likelihood term built from Tweedie's posterior moments tilts the
// score toward trajectories that satisfy the constraint, and the tilted
// score is folded back into the velocity that the ODE sampler integrates.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "fdm/errors.hpp"
#include "fdm/events.hpp"
#include "fdm/model.hpp"
#include "fdm/ode.hpp"
#include "fdm/paths.hpp"
#include "fdm/rng.hpp"
#include "fdm/serialize.hpp"
#include "fdm/tensor.hpp"

namespace fdm {

// A velocity field plus its Jacobian-vector product. The JVP callback may be
// left empty when only diagonal-covariance guidance or plain sampling is
// used; full Tweedie covariance needs it.
struct VectorField {
    std::size_t dim = 0;
    // value(t, x, out_v)
    std::function<void(double, const double*, double*)> value;
    // jvp(t, x, w, out_v, out_jvp): velocity and J_v w in one pass
    std::function<void(double, const double*, const double*, double*, double*)> jvp;
};

inline VectorField model_vector_field(const VectorFieldModel& m, VectorFieldModel::Workspace& ws,
                                      const double* cond = nullptr) {
    VectorField f;
    f.dim = m.config().dim;
    f.value = [&m, &ws, cond](double t, const double* x, double* out) {
        m.velocity(t, x, out, ws, cond);
    };
    f.jvp = [&m, &ws, cond](double t, const double* x, const double* w, double* v, double* jv) {
        m.velocity_jvp(t, x, w, v, jv, ws, cond);
    };
    return f;
}

// A scalar constraint on flattened terminal states; the event is C(x) > 0.
struct Constraint {
    std::size_t dim = 0;
    std::function<double(std::span<const double>)> value;
    std::function<void(std::span<const double>, std::span<double>)> gradient;
};

// Non-owning adapter: the callbacks capture e by reference, so the
// EventConstraint has to outlive the view.
inline Constraint constraint_view(const EventConstraint& e) {
    Constraint c;
    c.dim = e.flat_dim();
    c.value = [&e](std::span<const double> x) { return e.value(x); };
    c.gradient = [&e](std::span<const double> x, std::span<double> g) { e.gradient(x, g); };
    return c;
}

enum class CovMode { FullTweedie, Diagonal };

inline const char* cov_mode_name(CovMode m) {
    return m == CovMode::FullTweedie ? "full-tweedie" : "diagonal";
}

inline CovMode cov_mode_from_name(const std::string& s) {
    if (s == "full-tweedie" || s == "full") return CovMode::FullTweedie;
    if (s == "diagonal") return CovMode::Diagonal;
    throw ConfigError("unknown covariance mode '" + s + "'");
}

struct GuidanceConfig {
    double scale = 1.0;            // 0 switches guidance off entirely
    CovMode cov = CovMode::FullTweedie;
    double clip = 1e3;             // cap on the event term's norm

    void validate() const {
        if (!(scale >= 0.0)) throw ConfigError("guidance scale must be >= 0");
        if (!(clip > 0.0)) throw ConfigError("guidance clip must be positive");
    }
};

// score(x) = 2 (v(x) + f_coeff x) / g^2 at the matching diffusion time;
// defined for families with a drift/noise decomposition (VP, VE)
inline void score_from_field(const VectorField& field, const Path& path, double t,
                             std::span<const double> x, std::span<double> out) {
    if (x.size() != field.dim || out.size() != field.dim)
        throw ShapeError("score_from_field: state width mismatch");
    const Schedule sc = path.schedule(t);
    if (sc.g2 < 1e-12) throw NumericError("score recovery at a vanishing noise coefficient");
    field.value(t, x.data(), out.data());
    const double inv = 2.0 / sc.g2;
    for (std::size_t i = 0; i < field.dim; ++i) out[i] = inv * (out[i] + sc.f_coeff * x[i]);
}

// x1_hat = (x + sigma_t^2 score) / s_t, the posterior mean of the clean
// sample given the noisy state
inline void tweedie_mean(const Path& path, double t, std::span<const double> x,
                         std::span<const double> score, std::span<double> out) {
    if (x.size() != score.size() || x.size() != out.size())
        throw ShapeError("tweedie_mean: width mismatch");
    const double s = path.mean_coef(path.clip_time(t));
    if (std::abs(s) < 1e-12) throw NumericError("tweedie mean at a vanishing mean coefficient");
    const double var = path.sigma(path.clip_time(t)) * path.sigma(path.clip_time(t));
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] + var * score[i]) / s;
}

namespace detail {

// phi(z)/Phi(z). The erfc form only loses to underflow near z = -37, so the
// asymptotic series takes over just before that, where its truncation error
// is below 1e-7.
inline double inverse_mills(double z) {
    if (z < -35.0) return -z - 1.0 / z + 2.0 / (z * z * z);
    const double phi = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
    const double cdf = 0.5 * std::erfc(-z / std::numbers::sqrt2);
    return phi / cdf;
}

} // namespace detail

// reusable scratch so the guided RHS does not allocate on every evaluation
struct GuidanceWork {
    std::vector<double> score, x1, cgrad, sig_cg, jv, vtmp;
    void resize(std::size_t d) {
        score.resize(d);
        x1.resize(d);
        cgrad.resize(d);
        sig_cg.resize(d);
        jv.resize(d);
        vtmp.resize(d);
    }
};

// The additive event term of the guided score:
// scale * d/dx log Phi(C(x1_hat)/sqrt(grad C' Sigma grad C)), where Sigma is
// the Tweedie posterior covariance (sigma^2/s^2)(I + sigma^2 H) and H gradC
// is taken through one JVP of the score map. Sigma degenerating to zero
// width falls back to pushing along the raw constraint gradient. The term's
// norm is capped at cfg.clip.
inline void guidance_event_term(const VectorField& field, const Path& path,
                                const Constraint& event, const GuidanceConfig& cfg, double t,
                                std::span<const double> x, std::span<double> out,
                                GuidanceWork& work) {
    if (event.dim != field.dim)
        throw ShapeError("event constraint does not match the field dimension");
    work.resize(field.dim);

    score_from_field(field, path, t, x, std::span<double>(work.score));
    const double tc = path.clip_time(t);
    const double s = path.mean_coef(tc);
    const double sig = path.sigma(tc);
    const double var = sig * sig;

    tweedie_mean(path, t, x, work.score, std::span<double>(work.x1));
    const double c = event.value(work.x1);
    event.gradient(work.x1, std::span<double>(work.cgrad));

    const double pref = var / (s * s);
    if (cfg.cov == CovMode::FullTweedie) {
        if (!field.jvp) throw ConfigError("full Tweedie covariance needs a field with a JVP");
        const Schedule sc = path.schedule(t);
        field.jvp(t, x.data(), work.cgrad.data(), work.vtmp.data(), work.jv.data());
        const double inv = 2.0 / sc.g2;
        for (std::size_t i = 0; i < field.dim; ++i) {
            const double score_jvp = inv * (work.jv[i] + sc.f_coeff * work.cgrad[i]);
            out[i] = pref * (work.cgrad[i] + var * score_jvp);
        }
    } else {
        for (std::size_t i = 0; i < field.dim; ++i) out[i] = pref * work.cgrad[i];
    }

    double quad = 0.0;
    for (std::size_t i = 0; i < field.dim; ++i) quad += work.cgrad[i] * out[i];

    const double width = quad > 0.0 ? std::sqrt(quad) : 0.0;
    double norm2 = 0.0;
    if (width < 1e-10) {
        // degenerate posterior: no calibrated likelihood, push along gradC
        for (std::size_t i = 0; i < field.dim; ++i) {
            out[i] = cfg.scale * work.cgrad[i];
            norm2 += out[i] * out[i];
        }
    } else {
        const double lift = detail::inverse_mills(c / width) * (s / var) / width;
        for (std::size_t i = 0; i < field.dim; ++i) {
            out[i] *= cfg.scale * lift;
            norm2 += out[i] * out[i];
        }
    }
    const double norm = std::sqrt(norm2);
    if (norm > cfg.clip) {
        const double shrink = cfg.clip / norm;
        for (std::size_t i = 0; i < field.dim; ++i) out[i] *= shrink;
    }
}

// unguided score plus the event term; with scale 0 this IS the plain score
inline void guided_score(const VectorField& field, const Path& path, const Constraint& event,
                         const GuidanceConfig& cfg, double t, std::span<const double> x,
                         std::span<double> out, GuidanceWork& work) {
    cfg.validate();
    score_from_field(field, path, t, x, out);
    if (cfg.scale == 0.0) return;
    work.resize(field.dim);
    guidance_event_term(field, path, event, cfg, t, x, std::span<double>(work.sig_cg), work);
    for (std::size_t i = 0; i < field.dim; ++i) out[i] += work.sig_cg[i];
}

// velocity with the guided score folded back in:
// v_guided = v + (g^2/2) (guided score - plain score) = v + (g^2/2) event term
inline void guided_velocity(const VectorField& field, const Path& path,
                            const Constraint& event, const GuidanceConfig& cfg, double t,
                            std::span<const double> x, std::span<double> out, GuidanceWork& work) {
    cfg.validate();
    if (cfg.scale == 0.0) {
        field.value(t, x.data(), out.data());
        return;
    }
    work.resize(field.dim);
    guidance_event_term(field, path, event, cfg, t, x, std::span<double>(work.sig_cg), work);
    const Schedule sc = path.schedule(t);
    field.value(t, x.data(), out.data());
    for (std::size_t i = 0; i < field.dim; ++i) out[i] += 0.5 * sc.g2 * work.sig_cg[i];
}

constexpr std::uint64_t kGuidedSampleStream = 0x67756964656473ULL;

struct GuidedSamples {
    Tensor rows;                    // one flattened trajectory per row
    std::vector<double> c_values;   // constraint value of each row
    std::size_t dropped = 0;        // solver failures, excluded from rows
};

// Integrates the guided probability-flow field from n prior draws, each on
// its own derived stream. With scale 0 this is exactly unguided sampling.
inline GuidedSamples sample_guided(const VectorField& field, const Path& path,
                                   const Constraint& event, std::size_t n,
                                   const GuidanceConfig& cfg, std::uint64_t seed,
                                   const OdeOptions& opt = {}) {
    cfg.validate();
    if (field.dim != path.dim()) throw ShapeError("field and path dimensions differ");
    if (event.dim != field.dim)
        throw ShapeError("event constraint does not match the field dimension");

    GuidanceWork work;
    OdeRhs rhs = [&](double t, const double* y, double* dy) {
        guided_velocity(field, path, event, cfg, t, std::span<const double>(y, field.dim),
                        std::span<double>(dy, field.dim), work);
    };

    const double delta = path.params().clip_delta;
    std::vector<std::vector<double>> kept;
    std::size_t dropped = 0;
    std::vector<double> state(field.dim);
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng = Rng::stream(seed, kGuidedSampleStream, i);
        path.prior_sample(rng, state.data());
        try {
            integrate_dopri5(rhs, std::span<double>(state), delta, 1.0 - delta, opt);
            kept.push_back(state);
        } catch (const NumericError&) {
            ++dropped;
        }
    }

    GuidedSamples out;
    out.dropped = dropped;
    out.rows = Tensor(kept.size(), field.dim);
    out.c_values.resize(kept.size());
    for (std::size_t i = 0; i < kept.size(); ++i) {
        for (std::size_t j = 0; j < field.dim; ++j) out.rows.at(i, j) = kept[i][j];
        out.c_values[i] = event.value(std::span<const double>(kept[i].data(), field.dim));
    }
    return out;
}

// sidecar next to a guided dataset: one row per kept trajectory
inline void write_constraint_csv(const std::string& path, std::span<const double> c_values) {
    std::ofstream out = open_out(path);
    out << "index,C\n";
    out.precision(12);
    for (std::size_t i = 0; i < c_values.size(); ++i) out << i << "," << c_values[i] << "\n";
    if (!out) throw IoError("failed writing constraint values to " + path);
}

} // namespace fdm
