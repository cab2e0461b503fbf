#pragma once

// Training data. Static targets (the 1D mixture and the 2D checkerboard) are
// sampled on the fly; trajectory data lives in a small binary container so
// generation and training can run as separate processes. One record is a
// whole trajectory, stored time-major: record i, step s, coordinate j sits at
// data[(i * steps + s) * dim + j]. Static datasets reuse the container with
// steps = 1.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "mixture.hpp"
#include "rng.hpp"
#include "serialize.hpp"
#include "tensor.hpp"

namespace fdm {

inline Tensor sample_mixture_data(const Mixture1D& mix, std::size_t n, Rng& rng) {
    Tensor out(n, 1);
    for (std::size_t i = 0; i < n; ++i) out.at(i, 0) = mix.sample(rng);
    return out;
}

// Checkerboard on [-4,4]^2: sixteen 2x2 cells, the eight with even i+j
// occupied, uniform within each.
inline bool in_checkerboard(double x, double y) {
    if (x < -4.0 || x >= 4.0 || y < -4.0 || y >= 4.0) return false;
    const int i = static_cast<int>(std::floor((x + 4.0) / 2.0));
    const int j = static_cast<int>(std::floor((y + 4.0) / 2.0));
    return (i + j) % 2 == 0;
}

inline double checkerboard_logdensity(double x, double y) {
    // eight occupied cells of area 4 each
    return in_checkerboard(x, y) ? -std::log(32.0)
                                 : -std::numeric_limits<double>::infinity();
}

inline Tensor sample_checkerboard_data(std::size_t n, Rng& rng) {
    // occupied cells in row-major (i,j) order with i+j even
    static constexpr int cells[8][2] = {{0, 0}, {0, 2}, {1, 1}, {1, 3},
                                        {2, 0}, {2, 2}, {3, 1}, {3, 3}};
    Tensor out(n, 2);
    for (std::size_t r = 0; r < n; ++r) {
        const auto& c = cells[rng.below(8)];
        out.at(r, 0) = -4.0 + 2.0 * static_cast<double>(c[0]) + rng.uniform(0.0, 2.0);
        out.at(r, 1) = -4.0 + 2.0 * static_cast<double>(c[1]) + rng.uniform(0.0, 2.0);
    }
    return out;
}

struct TrajectoryDataset {
    std::string system;         // generator name, e.g. "lorenz"
    std::uint64_t count = 0;    // trajectories
    std::uint64_t steps = 0;    // recorded steps per trajectory
    std::uint64_t dim = 0;      // coordinates per step
    double dt = 0.0;            // recording interval of the generator
    std::uint64_t seed = 0;
    std::uint64_t config_hash = 0;
    std::vector<double> data;   // count * steps * dim, time-major

    std::size_t record_size() const { return static_cast<std::size_t>(steps * dim); }

    double* record(std::size_t i) { return data.data() + i * record_size(); }
    const double* record(std::size_t i) const { return data.data() + i * record_size(); }

    double& at(std::size_t rec, std::size_t step, std::size_t j) {
        return data[(rec * steps + step) * dim + j];
    }
    double at(std::size_t rec, std::size_t step, std::size_t j) const {
        return data[(rec * steps + step) * dim + j];
    }

    // flat [count, steps*dim] view for training on whole trajectories
    Tensor to_tensor() const {
        Tensor t(count, record_size());
        t.data = data;
        return t;
    }

    void validate() const {
        // zero records is fine (a freshly declared dataset), zero shape is not
        if (steps == 0 || dim == 0) throw DataError("dataset has an empty axis");
        if (data.size() != count * steps * dim)
            throw DataError("dataset payload size does not match its header");
    }
};

inline constexpr char kDatasetMagic[] = "FDMT";
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void save_dataset(const std::string& path, const TrajectoryDataset& ds) {
    ds.validate();
    std::ofstream out = open_out(path);
    write_bytes(out, std::string(kDatasetMagic, 4));
    write_u32(out, kDatasetVersion);
    write_u32(out, static_cast<std::uint32_t>(ds.system.size()));
    write_bytes(out, ds.system);
    write_u64(out, ds.count);
    write_u64(out, ds.steps);
    write_u64(out, ds.dim);
    write_f64(out, ds.dt);
    write_u64(out, ds.seed);
    write_u64(out, ds.config_hash);
    write_f64_array(out, ds.data.data(), ds.data.size());
    if (!out) throw IoError("failed writing dataset to " + path);
}

inline TrajectoryDataset load_dataset(const std::string& path) {
    std::ifstream in = open_in(path);
    expect_magic(in, kDatasetMagic, "trajectory dataset");
    const std::uint32_t version = read_u32(in, "dataset version");
    if (version != kDatasetVersion)
        throw DataError("unsupported dataset version " + std::to_string(version));
    TrajectoryDataset ds;
    const std::uint32_t name_len = read_u32(in, "system name length");
    if (name_len > 256) throw DataError("implausible system name length");
    ds.system = read_bytes(in, name_len, "system name");
    ds.count = read_u64(in, "trajectory count");
    ds.steps = read_u64(in, "step count");
    ds.dim = read_u64(in, "step dimension");
    if (ds.count > (1ull << 32) || ds.steps > (1ull << 24) || ds.dim > (1ull << 24))
        throw DataError("implausible dataset header");
    ds.dt = read_f64(in, "dt");
    ds.seed = read_u64(in, "seed");
    ds.config_hash = read_u64(in, "config hash");
    const std::size_t total = static_cast<std::size_t>(ds.count * ds.steps * ds.dim);
    ds.data.resize(total);
    read_f64_array(in, ds.data.data(), total, "trajectory payload");
    ds.validate();
    return ds;
}

// Per-coordinate affine map to zero mean, unit sd, with moments pooled over
// records and steps. Trajectory data whose coordinates live on very
// different scales (the FitzHugh-Nagumo recovery variables are two orders
// of magnitude smaller than the excitable ones) trains poorly against a
// fixed noise schedule, so models see standardized rows and samples are
// mapped back through the same constants.
struct Standardizer {
    std::vector<double> mean, sd;

    std::size_t dim() const { return mean.size(); }
    double z(double v, std::size_t j) const { return (v - mean[j]) / sd[j]; }
    double x(double zv, std::size_t j) const { return mean[j] + sd[j] * zv; }

    static Standardizer identity(std::size_t d) {
        Standardizer st;
        st.mean.assign(d, 0.0);
        st.sd.assign(d, 1.0);
        return st;
    }
};

inline Standardizer fit_standardizer(const TrajectoryDataset& ds) {
    ds.validate();
    if (ds.count == 0) throw DataError("cannot fit a standardizer to an empty dataset");
    Standardizer st;
    st.mean.assign(ds.dim, 0.0);
    st.sd.assign(ds.dim, 0.0);
    const double n = static_cast<double>(ds.count * ds.steps);
    for (std::uint64_t i = 0; i < ds.count; ++i)
        for (std::uint64_t s = 0; s < ds.steps; ++s)
            for (std::uint64_t j = 0; j < ds.dim; ++j) st.mean[j] += ds.at(i, s, j);
    for (double& m : st.mean) m /= n;
    for (std::uint64_t i = 0; i < ds.count; ++i)
        for (std::uint64_t s = 0; s < ds.steps; ++s)
            for (std::uint64_t j = 0; j < ds.dim; ++j) {
                const double d = ds.at(i, s, j) - st.mean[j];
                st.sd[j] += d * d;
            }
    for (double& s : st.sd) {
        s = std::sqrt(s / n);
        if (!(s > 1e-12)) throw DataError("degenerate coordinate: sd is zero");
    }
    return st;
}

// Flattens each trajectory to a row of steps*dim standardized values.
inline Tensor standardized_rows(const TrajectoryDataset& ds, const Standardizer& st) {
    if (st.dim() != ds.dim) throw ShapeError("standardizer dim does not match the dataset");
    Tensor out(ds.count, ds.record_size());
    for (std::uint64_t i = 0; i < ds.count; ++i)
        for (std::uint64_t s = 0; s < ds.steps; ++s)
            for (std::uint64_t j = 0; j < ds.dim; ++j)
                out.at(i, s * ds.dim + j) = st.z(ds.at(i, s, j), j);
    return out;
}

// One row per (trajectory, step); handy for plotting outside the toolkit.
inline void export_dataset_csv(const std::string& path, const TrajectoryDataset& ds) {
    ds.validate();
    std::ofstream out = open_out(path);
    out << "record,step";
    for (std::uint64_t j = 0; j < ds.dim; ++j) out << ",x" << j;
    out << "\n";
    out.precision(17);
    for (std::uint64_t i = 0; i < ds.count; ++i)
        for (std::uint64_t s = 0; s < ds.steps; ++s) {
            out << i << "," << s;
            for (std::uint64_t j = 0; j < ds.dim; ++j) out << "," << ds.at(i, s, j);
            out << "\n";
        }
    if (!out) throw IoError("failed writing csv to " + path);
}

} // namespace fdm
