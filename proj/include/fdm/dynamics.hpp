#pragma once

// Chaotic benchmark systems and trajectory dataset generation. Trajectories
// are integrated on a fixed dt grid, the first burn_in states are discarded
// so the system settles onto its attractor, and the next `steps` states are
// recorded time-major into a TrajectoryDataset.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fdm/datasets.hpp"
#include "fdm/errors.hpp"
#include "fdm/ode.hpp"
#include "fdm/rng.hpp"

namespace fdm {

// Lorenz system rescaled so the attractor fits in roughly [-3,3] per
// coordinate: states are stored as x = y/scale where y follows the usual
// sigma/rho/beta equations. Only the quadratic terms pick up the scale.
struct LorenzSystem {
    double sigma = 10.0;
    double rho = 28.0;
    double beta = 8.0 / 3.0;
    double scale = 20.0;

    static constexpr std::size_t dim = 3;

    void operator()(const double* x, double* dx) const {
        dx[0] = sigma * (x[1] - x[0]);
        dx[1] = rho * x[0] - scale * x[0] * x[2] - x[1];
        dx[2] = scale * x[0] * x[1] - beta * x[2];
    }
};

// Two coupled FitzHugh-Nagumo neurons, state ordered (x1, x2, y1, y2).
// The units differ only in their recovery gains b1, b2; the coupling is
// symmetric diffusive exchange between the two excitable variables. The slow
// recovery constant c = 0.02 puts the pair in the regime where it bursts
// chaotically and occasionally synchronizes into a rare joint spike; with a
// fast recovery (c around 0.2) the units anti-phase-lock and the joint
// spikes that the spike event looks for never happen.
struct FhnSystem {
    double a = -0.025794;
    double b1 = 0.0065;
    double b2 = 0.0135;
    double c = 0.02;
    double coupling = 0.128;

    static constexpr std::size_t dim = 4;

    void operator()(const double* s, double* ds) const {
        const double x1 = s[0], x2 = s[1], y1 = s[2], y2 = s[3];
        ds[0] = x1 * (a - x1) * (x1 - 1.0) - y1 + coupling * (x2 - x1);
        ds[1] = x2 * (a - x2) * (x2 - 1.0) - y2 + coupling * (x1 - x2);
        ds[2] = b1 * x1 - c * y1;
        ds[3] = b2 * x2 - c * y2;
    }
};

struct TrajectorySpec {
    std::string system;
    std::size_t dim = 0;
    std::size_t steps = 60;    // recorded states per trajectory
    std::size_t burn_in = 0;   // solver steps dropped before recording
    double dt = 0.0;           // grid spacing, also the burn-in spacing
    double ic_sd = 1.0;        // isotropic std dev of the initial condition

    void validate() const {
        if (dim == 0 || steps == 0) throw ConfigError("trajectory spec needs dim and steps");
        if (!(dt > 0.0)) throw ConfigError("trajectory spec needs dt > 0");
        if (!(ic_sd > 0.0)) throw ConfigError("trajectory spec needs ic_sd > 0");
    }
};

inline TrajectorySpec lorenz_spec(std::size_t steps = 60) {
    return {"lorenz", LorenzSystem::dim, steps, 30, 0.1, 1.0};
}

inline TrajectorySpec fhn_spec(std::size_t steps = 60) {
    return {"fhn", FhnSystem::dim, steps, 250, 6.0, 0.2};
}

inline OdeOptions trajectory_ode_options() {
    OdeOptions opt;
    opt.atol = 1.4e-8;
    opt.rtol = 1e-6;
    return opt;
}

// State derivative without explicit time dependence; both systems here are
// autonomous so generation works with this narrower signature.
using StateRhs = std::function<void(const double*, double*)>;

namespace detail {

inline bool advance_segment(const StateRhs& rhs, std::vector<double>& state,
                            double t0, double dt, const OdeOptions& opt) {
    OdeRhs wrapped = [&rhs](double, const double* y, double* dy) { rhs(y, dy); };
    try {
        integrate_dopri5(wrapped, std::span<double>(state), t0, t0 + dt, opt);
    } catch (const NumericError&) {
        return false;
    }
    for (double v : state)
        if (!std::isfinite(v) || std::abs(v) > 1e6) return false;
    return true;
}

} // namespace detail

// Generates `count` trajectories, each from its own derived RNG stream so
// the dataset is reproducible independent of generation order. An initial
// condition whose integration blows up is redrawn from the same stream and
// counted in *resampled; after 64 redraws the record is abandoned as a
// NumericError since that points at a broken rhs rather than bad luck.
inline TrajectoryDataset generate_trajectories(const TrajectorySpec& spec, const StateRhs& rhs,
                                               std::size_t count, std::uint64_t seed,
                                               const OdeOptions& opt = trajectory_ode_options(),
                                               std::size_t* resampled = nullptr) {
    spec.validate();
    constexpr std::uint64_t kTrajStream = 0x74726a6563746f72ULL;

    TrajectoryDataset ds;
    ds.system = spec.system;
    ds.count = count;
    ds.steps = spec.steps;
    ds.dim = spec.dim;
    ds.dt = spec.dt;
    ds.seed = seed;
    ds.data.resize(count * spec.steps * spec.dim);
    if (resampled) *resampled = 0;

    std::vector<double> state(spec.dim);
    const std::size_t total_steps = spec.burn_in + spec.steps;
    for (std::size_t rec = 0; rec < count; ++rec) {
        Rng rng = Rng::stream(seed, kTrajStream, rec);
        bool done = false;
        for (int attempt = 0; attempt < 64 && !done; ++attempt) {
            if (attempt > 0 && resampled) ++*resampled;
            for (std::size_t j = 0; j < spec.dim; ++j) state[j] = spec.ic_sd * rng.normal();
            bool ok = true;
            for (std::size_t k = 0; k < total_steps && ok; ++k) {
                ok = detail::advance_segment(rhs, state, static_cast<double>(k) * spec.dt,
                                             spec.dt, opt);
                if (ok && k >= spec.burn_in) {
                    double* out = ds.record(rec) + (k - spec.burn_in) * spec.dim;
                    for (std::size_t j = 0; j < spec.dim; ++j) out[j] = state[j];
                }
            }
            done = ok;
        }
        if (!done) throw NumericError("trajectory " + std::to_string(rec) +
                                      " diverged on every retried initial condition");
    }
    return ds;
}

inline TrajectoryDataset generate_trajectories(const TrajectorySpec& spec, std::size_t count,
                                               std::uint64_t seed,
                                               const OdeOptions& opt = trajectory_ode_options(),
                                               std::size_t* resampled = nullptr) {
    if (spec.system == "lorenz") {
        LorenzSystem sys;
        return generate_trajectories(spec, [sys](const double* x, double* dx) { sys(x, dx); },
                                     count, seed, opt, resampled);
    }
    if (spec.system == "fhn") {
        FhnSystem sys;
        return generate_trajectories(spec, [sys](const double* x, double* dx) { sys(x, dx); },
                                     count, seed, opt, resampled);
    }
    throw ConfigError("unknown trajectory system '" + spec.system + "'");
}

} // namespace fdm
