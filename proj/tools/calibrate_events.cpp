// Scratch tool: empirical event rates of the generated datasets under
// candidate constraint conventions, to pin the event normalization.
#include <chrono>
#include <cstdio>
#include <numbers>
#include <vector>

#include "fdm/dynamics.hpp"
#include "fdm/events.hpp"

using namespace fdm;

namespace {

// pooled per-coordinate moments over records and steps
void coord_stats(const TrajectoryDataset& ds, std::vector<double>& mean, std::vector<double>& sd) {
    mean.assign(ds.dim, 0.0);
    sd.assign(ds.dim, 0.0);
    const std::size_t n = ds.count * ds.steps;
    for (std::size_t i = 0; i < ds.count; ++i)
        for (std::size_t s = 0; s < ds.steps; ++s)
            for (std::size_t j = 0; j < ds.dim; ++j) mean[j] += ds.at(i, s, j);
    for (std::size_t j = 0; j < ds.dim; ++j) mean[j] /= static_cast<double>(n);
    for (std::size_t i = 0; i < ds.count; ++i)
        for (std::size_t s = 0; s < ds.steps; ++s)
            for (std::size_t j = 0; j < ds.dim; ++j) {
                const double d = ds.at(i, s, j) - mean[j];
                sd[j] += d * d;
            }
    for (std::size_t j = 0; j < ds.dim; ++j) sd[j] = std::sqrt(sd[j] / static_cast<double>(n));
}

// l1 spectrum mass of the centered trajectory, magnitudes or power,
// full or half spectrum, optional per-coordinate standardization
double spectrum_mass(const double* x, std::size_t m, std::size_t dim, bool half, bool power,
                     const double* sd) {
    std::vector<double> centered(m);
    double total = 0.0;
    const std::size_t kmax = half ? m / 2 + 1 : m;
    for (std::size_t j = 0; j < dim; ++j) {
        double mean = 0.0;
        for (std::size_t s = 0; s < m; ++s) mean += x[s * dim + j];
        mean /= static_cast<double>(m);
        const double w = sd ? 1.0 / sd[j] : 1.0;
        for (std::size_t s = 0; s < m; ++s) centered[s] = (x[s * dim + j] - mean) * w;
        for (std::size_t k = 0; k < kmax; ++k) {
            double re = 0.0, im = 0.0;
            for (std::size_t s = 0; s < m; ++s) {
                const double th =
                    2.0 * std::numbers::pi * static_cast<double>(k * s % m) / static_cast<double>(m);
                re += centered[s] * std::cos(th);
                im -= centered[s] * std::sin(th);
            }
            const double mag2 = re * re + im * im;
            total += power ? mag2 : std::sqrt(mag2);
        }
    }
    return total;
}

void lorenz_sweep(const TrajectoryDataset& ds, bool zscore) {
    std::vector<double> mean, sd;
    coord_stats(ds, mean, sd);
    const double m = static_cast<double>(ds.steps);
    const double* w = zscore ? sd.data() : nullptr;
    struct Cand {
        const char* label;
        bool half, power;
        double norm;
    };
    const Cand cands[] = {
        {"mag  full /M      ", false, false, 1.0 / m},
        {"mag  full /(2M)   ", false, false, 0.5 / m},
        {"mag  full /(M*rtM)", false, false, 1.0 / (m * std::sqrt(m))},
        {"mag  half /M      ", true, false, 1.0 / m},
        {"mag  half /(M*rtM)", true, false, 1.0 / (m * std::sqrt(m))},
        {"pow  full /M^2    ", false, true, 1.0 / (m * m)},
        {"pow  half /M^2    ", true, true, 1.0 / (m * m)},
        {"pow  full /M      ", false, true, 1.0 / m},
    };
    std::printf("lorenz rates (%s):\n", zscore ? "z-scored" : "raw");
    for (const Cand& c : cands) {
        std::size_t hits = 0;
        for (std::size_t i = 0; i < ds.count; ++i) {
            const double mass =
                spectrum_mass(ds.record(i), ds.steps, ds.dim, c.half, c.power, w);
            if (0.6 - c.norm * mass > 0.0) ++hits;
        }
        std::printf("  %s: %.4f\n", c.label, static_cast<double>(hits) / static_cast<double>(ds.count));
    }
}

void fhn_sweep(const TrajectoryDataset& ds) {
    std::vector<double> mean, sd;
    coord_stats(ds, mean, sd);
    std::printf("fhn coord means: %.4f %.4f %.4f %.4f\n", mean[0], mean[1], mean[2], mean[3]);
    std::printf("fhn coord sds  : %.4f %.4f %.4f %.4f\n", sd[0], sd[1], sd[2], sd[3]);
    std::size_t hits = 0;
    double maxv = -1e30;
    for (std::size_t i = 0; i < ds.count; ++i) {
        double best = -1e30;
        for (std::size_t s = 0; s < ds.steps; ++s) {
            const double z1 = (ds.at(i, s, 0) - mean[0]) / sd[0];
            const double z2 = (ds.at(i, s, 1) - mean[1]) / sd[1];
            best = std::max(best, 0.5 * (z1 + z2));
        }
        maxv = std::max(maxv, best);
        if (best > 2.5) ++hits;
    }
    std::printf("fhn z-scored spike rate: %.4f (max observable %.3f)\n",
                static_cast<double>(hits) / static_cast<double>(ds.count), maxv);
}

} // namespace

int main(int argc, char** argv) {
    const std::size_t n = argc > 1 ? static_cast<std::size_t>(std::atol(argv[1])) : 4000;

    const auto t0 = std::chrono::steady_clock::now();
    const TrajectoryDataset lorenz = generate_trajectories(lorenz_spec(), n, 2024);
    const auto t1 = std::chrono::steady_clock::now();
    std::printf("lorenz: %zu trajectories in %.1f s\n", n,
                std::chrono::duration<double>(t1 - t0).count());
    std::vector<double> lmean, lsd;
    coord_stats(lorenz, lmean, lsd);
    std::printf("lorenz coord means: %.4f %.4f %.4f\n", lmean[0], lmean[1], lmean[2]);
    std::printf("lorenz coord sds  : %.4f %.4f %.4f\n", lsd[0], lsd[1], lsd[2]);
    lorenz_sweep(lorenz, false);
    lorenz_sweep(lorenz, true);

    const auto t2 = std::chrono::steady_clock::now();
    const TrajectoryDataset fhn = generate_trajectories(fhn_spec(), n, 2024);
    const auto t3 = std::chrono::steady_clock::now();
    std::printf("fhn: %zu trajectories in %.1f s\n", n,
                std::chrono::duration<double>(t3 - t2).count());
    fhn_sweep(fhn);
    return 0;
}
