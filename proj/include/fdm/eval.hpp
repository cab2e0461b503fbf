#pragma once

// Reporting metrics: total-variation and KL estimates, per-dimension NLL,
// and event probabilities, plus the metrics CSV both the CLI and the test
// harness read back.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <span>
#include <string>
#include <vector>

#include "fdm/datasets.hpp"
#include "fdm/errors.hpp"
#include "fdm/events.hpp"
#include "fdm/mixture.hpp"
#include "fdm/ode.hpp"
#include "fdm/serialize.hpp"
#include "fdm/tensor.hpp"

namespace fdm {

struct HistogramSpec {
    std::size_t bins = 200;
    double lo = 0.0;
    double hi = 1.0;
    double kl_floor = 1e-10;  // added to the second argument's bin mass

    void validate() const {
        if (bins < 2) throw ConfigError("histogram needs at least 2 bins");
        if (!(lo < hi) || !std::isfinite(lo) || !std::isfinite(hi))
            throw ConfigError("histogram range must be finite and ordered");
        if (!(kl_floor > 0.0)) throw ConfigError("histogram KL floor must be positive");
    }
};

// covers the pooled range of both sample sets with a little padding so
// boundary samples do not fall off the edge
inline HistogramSpec histogram_over(std::span<const double> a, std::span<const double> b,
                                    std::size_t bins = 200) {
    if (a.empty() || b.empty()) throw DataError("histogram range needs samples on both sides");
    double lo = a[0], hi = a[0];
    for (double v : a) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    for (double v : b) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (!(hi > lo)) hi = lo + 1.0;  // all samples equal: any covering bin works
    const double pad = 1e-9 * (hi - lo);
    return {bins, lo - pad, hi + pad, 1e-10};
}

namespace detail {

inline std::vector<double> bin_masses(std::span<const double> samples, const HistogramSpec& h) {
    std::vector<double> mass(h.bins, 0.0);
    const double w = (h.hi - h.lo) / static_cast<double>(h.bins);
    for (double v : samples) {
        if (v < h.lo || v >= h.hi) continue;  // out-of-range mass is lost on purpose
        const std::size_t b =
            std::min(h.bins - 1, static_cast<std::size_t>((v - h.lo) / w));
        mass[b] += 1.0;
    }
    const double n = static_cast<double>(samples.size());
    for (double& m : mass) m /= n;
    return mass;
}

} // namespace detail

// half the l1 distance between the two binned empirical distributions;
// samples outside the range count as missing mass, so a range that covers
// only one of the sets drives the distance toward 1 rather than hiding it
inline double tv_histogram(std::span<const double> a, std::span<const double> b,
                           const HistogramSpec& h) {
    h.validate();
    if (a.empty() || b.empty()) throw DataError("tv_histogram needs nonempty sample sets");
    const std::vector<double> pa = detail::bin_masses(a, h);
    const std::vector<double> pb = detail::bin_masses(b, h);
    double acc = 0.0;
    for (std::size_t i = 0; i < h.bins; ++i) acc += std::abs(pa[i] - pb[i]);
    // mass dropped outside the range also separates the distributions
    double in_a = 0.0, in_b = 0.0;
    for (double v : pa) in_a += v;
    for (double v : pb) in_b += v;
    acc += std::abs((1.0 - in_a) - (1.0 - in_b));
    return 0.5 * acc;
}

inline double kl_histogram(std::span<const double> a, std::span<const double> b,
                           const HistogramSpec& h) {
    h.validate();
    if (a.empty() || b.empty()) throw DataError("kl_histogram needs nonempty sample sets");
    const std::vector<double> pa = detail::bin_masses(a, h);
    const std::vector<double> pb = detail::bin_masses(b, h);
    double acc = 0.0;
    for (std::size_t i = 0; i < h.bins; ++i) {
        if (pa[i] <= 0.0) continue;
        acc += pa[i] * std::log(pa[i] / (pb[i] + h.kl_floor));
    }
    // the floor on the second argument can pull matching histograms a hair
    // below zero; that artifact is not a signal
    return std::max(0.0, acc);
}

// half the trapezoid integral of |pa - pb| over a uniform grid
inline double tv_density_grid(const std::function<double(double)>& pa,
                              const std::function<double(double)>& pb, double lo, double hi,
                              std::size_t points) {
    if (points < 2) throw ConfigError("density grid needs at least 2 points");
    if (!(hi > lo)) throw ConfigError("density grid range must be ordered");
    const double step = (hi - lo) / static_cast<double>(points - 1);
    if (step > 0.02)
        throw ConfigError("density grid too coarse for the density scale; use more points");
    double acc = 0.0;
    double prev = std::abs(pa(lo) - pb(lo));
    for (std::size_t i = 1; i < points; ++i) {
        const double x = lo + step * static_cast<double>(i);
        const double cur = std::abs(pa(x) - pb(x));
        acc += 0.5 * (prev + cur) * step;
        prev = cur;
    }
    return 0.5 * acc;
}

// TV between a learned 1D density (through the exact-likelihood solve) and
// the analytic mixture, on a fixed grid
inline double tv_density_1d(const DivField& field, const Path& path, const Mixture1D& mix,
                            double lo = -5.0, double hi = 5.0, std::size_t points = 2000,
                            const OdeOptions& opt = {}) {
    if (path.dim() != 1) throw ConfigError("tv_density_1d expects a one-dimensional flow");
    auto model_density = [&](double x) {
        const double xv = x;
        const LikelihoodResult lr = log_likelihood(field, path, std::span<const double>(&xv, 1),
                                                   -1.0, opt);
        return std::exp(lr.logp);
    };
    auto exact_density = [&](double x) { return mix.density(x); };
    return tv_density_grid(model_density, exact_density, lo, hi, points);
}

struct NllResult {
    double mean = 0.0;   // negative log-likelihood per dimension
    double se = 0.0;
    std::size_t used = 0;
    std::size_t failed = 0;  // rows the likelihood solver rejected
};

// mean over rows of -logp/row_width; solver failures are excluded and
// counted rather than poisoning the average
inline NllResult mean_nll(const DivField& field, const Path& path, const Tensor& rows,
                          const OdeOptions& opt = {}, double t_end = -1.0) {
    if (rows.rows == 0 || rows.cols == 0) throw DataError("mean_nll needs a nonempty test set");
    if (rows.cols != field.dim) throw ShapeError("test rows do not match the field dimension");
    NllResult res;
    double acc = 0.0, acc2 = 0.0;
    for (std::size_t i = 0; i < rows.rows; ++i) {
        std::span<const double> x(rows.ptr() + i * rows.cols, rows.cols);
        double nll;
        try {
            const LikelihoodResult lr = log_likelihood(field, path, x, t_end, opt);
            nll = -lr.logp / static_cast<double>(rows.cols);
        } catch (const NumericError&) {
            ++res.failed;
            continue;
        }
        ++res.used;
        acc += nll;
        acc2 += nll * nll;
    }
    if (res.used == 0) throw NumericError("likelihood solver failed on every test row");
    const double n = static_cast<double>(res.used);
    res.mean = acc / n;
    const double var = std::max(0.0, acc2 / n - res.mean * res.mean);
    res.se = res.used > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
    return res;
}

struct EventRate {
    double p = 0.0;
    double se = 0.0;
    std::size_t n = 0;
};

inline EventRate event_probability(const Tensor& rows, const EventConstraint& c) {
    if (rows.rows == 0) throw DataError("event_probability needs samples");
    EventRate r;
    r.n = rows.rows;
    r.p = event_fraction(rows, c);
    r.se = std::sqrt(r.p * (1.0 - r.p) / static_cast<double>(r.n));
    return r;
}

// mean over all flattened coordinates of the per-coordinate marginal TV,
// each over a shared 200-bin range covering both sample sets
inline double mean_marginal_tv(const Tensor& a, const Tensor& b, std::size_t bins = 200) {
    if (a.cols != b.cols) throw ShapeError("sample sets have different widths");
    if (a.rows == 0 || b.rows == 0) throw DataError("mean_marginal_tv needs nonempty sets");
    std::vector<double> ca(a.rows), cb(b.rows);
    double acc = 0.0;
    for (std::size_t j = 0; j < a.cols; ++j) {
        for (std::size_t i = 0; i < a.rows; ++i) ca[i] = a.at(i, j);
        for (std::size_t i = 0; i < b.rows; ++i) cb[i] = b.at(i, j);
        acc += tv_histogram(ca, cb, histogram_over(ca, cb, bins));
    }
    return acc / static_cast<double>(a.cols);
}

// constraint values of every row, for event-histogram comparisons
inline std::vector<double> constraint_values(const Tensor& rows, const EventConstraint& c) {
    std::vector<double> vals(rows.rows);
    for (std::size_t i = 0; i < rows.rows; ++i)
        vals[i] = c.value(std::span<const double>(rows.ptr() + i * rows.cols, rows.cols));
    return vals;
}

struct MetricRow {
    std::string name;
    double value = 0.0;
    double se = 0.0;
    std::size_t n = 0;
};

inline void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows,
                              std::uint64_t config_hash) {
    std::ofstream out = open_out(path);
    out << "name,value,stderr,n,config_hash\n";
    out << std::setprecision(12);
    char hash[20];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(config_hash));
    for (const MetricRow& r : rows)
        out << r.name << "," << r.value << "," << r.se << "," << r.n << "," << hash << "\n";
    if (!out) throw IoError("failed writing metrics to " + path);
}

} // namespace fdm
