#pragma once

// Gaussian conditional probability paths p_t(x|x1) = N(s_t x1, sigma_t^2 I)
// on flow time t in [0,1] (t=0 noise, t=1 data), with the conditional vector
// fields that transport them. Three families:
//
//   OT  straight-line: s_t = t, sigma_t = 1 - (1 - sigma_min) t
//   VP  variance preserving: s_t = alpha(1-t), sigma_t = sqrt(1 - alpha(1-t)^2),
//       alpha(s) = exp(-T(s)/2), T(s) = int_0^s beta, beta linear in s
//   VE  variance exploding: s_t = 1, sigma_t = sched(1-t),
//       sched(s) = sigma_a (sigma_b/sigma_a)^s geometric
//
// Every conditional field here is affine in x with an isotropic Jacobian,
// u_t(x|x1) = a_t x + b_t x1, so the conditional divergence is d * a_t and
// the Jacobian-vector product is a_t * eps. VP and VE additionally expose
// their stochastic-process view (drift f(x,s) = f_coeff * x and squared
// diffusion g^2(s) in diffusion time s = 1-t), which is what converts a
// learned field into a score. OT has no such form.
//
// The geometric VE schedule cannot reach sigma = 0 at the data end; sigma_a
// plays the role of a floor and is configurable.

#include <cmath>
#include <cstddef>
#include <string>

#include "errors.hpp"
#include "rng.hpp"

namespace fdm {

enum class PathFamily { OT, VP, VE };

inline const char* family_name(PathFamily f) {
    switch (f) {
        case PathFamily::OT: return "ot";
        case PathFamily::VP: return "vp";
        case PathFamily::VE: return "ve";
    }
    return "?";
}

inline PathFamily family_from_name(const std::string& s) {
    if (s == "ot") return PathFamily::OT;
    if (s == "vp") return PathFamily::VP;
    if (s == "ve") return PathFamily::VE;
    throw ConfigError("unknown path family '" + s + "' (want ot|vp|ve)");
}

struct PathParams {
    double sigma_min = 1e-4;  // OT terminal width
    double beta_min = 0.1;    // VP linear beta schedule
    double beta_max = 20.0;
    double ve_sigma_a = 1e-2;  // VE geometric schedule endpoints (data end, noise end)
    double ve_sigma_b = 20.0;
    double clip_delta = 1e-5;  // evaluation times are clamped to [delta, 1-delta]
};

struct FieldCoeffs {
    double a = 0.0;  // u = a x + b x1
    double b = 0.0;
};

struct Schedule {
    double s = 0.0;            // mean coefficient s_t
    double sigma = 0.0;        // flow-time sigma_t
    double dsigma_diff = 0.0;  // d(sched)/ds of the diffusion schedule at s = 1-t
    double f_coeff = 0.0;      // drift f(x,s) = f_coeff * x
    double g2 = 0.0;           // squared diffusion g^2(s)
};

class Path {
  public:
    Path(PathFamily family, std::size_t dim, PathParams prm = {})
        : family_(family), dim_(dim), prm_(prm) {
        if (dim_ == 0) throw ConfigError("path dimension must be positive");
        if (prm_.sigma_min <= 0 || prm_.sigma_min >= 1)
            throw ConfigError("sigma_min must lie in (0,1)");
        if (prm_.ve_sigma_a <= 0 || prm_.ve_sigma_b <= prm_.ve_sigma_a)
            throw ConfigError("VE schedule needs 0 < sigma_a < sigma_b");
        if (prm_.clip_delta <= 0 || prm_.clip_delta >= 0.5)
            throw ConfigError("clip_delta must lie in (0, 0.5)");
    }

    PathFamily family() const { return family_; }
    std::size_t dim() const { return dim_; }
    const PathParams& params() const { return prm_; }

    double clip_time(double t, bool* clipped = nullptr) const {
        const double lo = prm_.clip_delta, hi = 1.0 - prm_.clip_delta;
        double tc = t < lo ? lo : (t > hi ? hi : t);
        if (clipped) *clipped = (tc != t);
        return tc;
    }

    // Mean coefficient s_t and width sigma_t of p_t(.|x1). Valid on all of
    // [0,1]; these are the pathwise quantities, so no clipping here.
    double mean_coef(double t) const {
        check_time(t);
        switch (family_) {
            case PathFamily::OT: return t;
            case PathFamily::VP: return alpha(1.0 - t);
            case PathFamily::VE: return 1.0;
        }
        return 0.0;
    }

    double sigma(double t) const {
        check_time(t);
        switch (family_) {
            case PathFamily::OT: return 1.0 - (1.0 - prm_.sigma_min) * t;
            case PathFamily::VP: {
                const double a = alpha(1.0 - t);
                return std::sqrt(std::max(0.0, 1.0 - a * a));
            }
            case PathFamily::VE: return ve_sched(1.0 - t);
        }
        return 0.0;
    }

    // x = s_t x1 + sigma_t noise
    void sample_point(double t, const double* x1, const double* noise, double* x) const {
        const double s = mean_coef(t);
        const double sg = sigma(t);
        for (std::size_t i = 0; i < dim_; ++i) x[i] = s * x1[i] + sg * noise[i];
    }

    // Coefficients of the conditional field u = a x + b x1, evaluated at the
    // clipped time (the VP form is singular at t = 1).
    FieldCoeffs field_coeffs(double t) const {
        check_time(t);
        const double tc = clip_time(t);
        switch (family_) {
            case PathFamily::OT: {
                const double k = 1.0 - prm_.sigma_min;
                const double den = 1.0 - k * tc;
                return {-k / den, 1.0 / den};
            }
            case PathFamily::VP: {
                const double s = 1.0 - tc;
                const double a = alpha(s);
                const double ap = alpha_prime(s);
                const double den = 1.0 - a * a;
                return {ap * a / den, -ap / den};
            }
            case PathFamily::VE: {
                const double s = 1.0 - tc;
                const double ratio = ve_sched_prime(s) / ve_sched(s);  // = log(sigma_b/sigma_a)
                return {-ratio, ratio};
            }
        }
        return {};
    }

    void cond_field(double t, const double* x, const double* x1, double* u) const {
        const FieldCoeffs c = field_coeffs(t);
        for (std::size_t i = 0; i < dim_; ++i) u[i] = c.a * x[i] + c.b * x1[i];
    }

    // Divergence of the conditional field; isotropic, so independent of x.
    double cond_div(double t) const {
        return static_cast<double>(dim_) * field_coeffs(t).a;
    }

    // grad_x log p_t(x|x1) = -(x - s_t x1) / sigma_t^2
    void cond_score(double t, const double* x, const double* x1, double* out) const {
        check_time(t);
        const double tc = clip_time(t);
        const double s = mean_coef(tc);
        const double sg = sigma(tc);
        if (sg < 1e-12)
            throw NumericError("cond_score: sigma_t below 1e-12 at t=" + std::to_string(t));
        const double inv = 1.0 / (sg * sg);
        for (std::size_t i = 0; i < dim_; ++i) out[i] = -(x[i] - s * x1[i]) * inv;
    }

    // Stochastic-process view at diffusion time s = 1-t; what score recovery
    // and guidance consume. OT is a pure interpolation with no such process.
    Schedule schedule(double t) const {
        check_time(t);
        const double tc = clip_time(t);
        const double s = 1.0 - tc;
        switch (family_) {
            case PathFamily::OT:
                throw UnsupportedError("schedule: OT path has no drift/diffusion form");
            case PathFamily::VP: {
                const double a = alpha(s);
                const double sig = std::sqrt(std::max(0.0, 1.0 - a * a));
                const double b = beta(s);
                // diffusion-time sigma(s) = sqrt(1 - alpha(s)^2), increasing in s
                const double dsig = (sig > 0.0) ? (-alpha_prime(s) * a / sig) : 0.0;
                return {a, sig, dsig, -0.5 * b, b};
            }
            case PathFamily::VE: {
                const double sig = ve_sched(s);
                const double dsig = ve_sched_prime(s);
                // g^2(s) = d/ds sched(s)^2
                return {1.0, sig, dsig, 0.0, 2.0 * sig * dsig};
            }
        }
        return {};
    }

    // Prior at the noise end: standard normal for OT/VP, N(0, sigma_b^2) for VE.
    void prior_sample(Rng& rng, double* x) const {
        const double width = prior_width();
        for (std::size_t i = 0; i < dim_; ++i) x[i] = width * rng.normal();
    }

    double prior_logdensity(const double* x) const {
        const double width = prior_width();
        constexpr double log2pi = 1.8378770664093454836;
        double q = 0.0;
        for (std::size_t i = 0; i < dim_; ++i) q += x[i] * x[i];
        const double n = static_cast<double>(dim_);
        return -0.5 * q / (width * width) - n * std::log(width) - 0.5 * n * log2pi;
    }

  private:
    PathFamily family_;
    std::size_t dim_;
    PathParams prm_;

    void check_time(double t) const {
        if (!(t >= 0.0 && t <= 1.0))
            throw NumericError("path time " + std::to_string(t) + " outside [0,1]");
    }

    double beta(double s) const { return prm_.beta_min + s * (prm_.beta_max - prm_.beta_min); }
    double big_t(double s) const {
        return prm_.beta_min * s + 0.5 * (prm_.beta_max - prm_.beta_min) * s * s;
    }
    double alpha(double s) const { return std::exp(-0.5 * big_t(s)); }
    double alpha_prime(double s) const { return -0.5 * beta(s) * alpha(s); }

    double ve_sched(double s) const {
        return prm_.ve_sigma_a * std::pow(prm_.ve_sigma_b / prm_.ve_sigma_a, s);
    }
    double ve_sched_prime(double s) const {
        return ve_sched(s) * std::log(prm_.ve_sigma_b / prm_.ve_sigma_a);
    }

    double prior_width() const {
        return family_ == PathFamily::VE ? prm_.ve_sigma_b : 1.0;
    }
};

} // namespace fdm
