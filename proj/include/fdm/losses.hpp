#pragma once

// Training objectives. The flow-matching term regresses the model field onto
// the conditional target; the divergence-matching term additionally aligns
// div v with div u along the path, in one of three forms:
//
//   abs  |div u - div v + (u - v) . score|            exact divergence
//   sq   the same expression squared                   exact divergence
//   eff  Hutchinson form of sq: one probe eps turns the divergence gap into
//        eps.(J_u eps) - eps.(J_v eps) and the score coupling into
//        (u.eps - v.eps)(score.eps), squared, averaged over probes
//
// Exact divergences cost one Jacobian-vector product per state dimension, so
// abs/sq are for low-dimensional targets and eff is the default above that.
// In the eff coupling the v.eps factor is wrapped in stop_gradient: that
// factor exists to estimate the transport error, and letting gradients flow
// through it would push v off the flow-matching target instead of closing
// the divergence gap. The quadratic J_v term stays live; it is the term
// being trained.
//
// All conditional targets are affine in x with isotropic Jacobian a_t I, so
// J_u eps = a_t eps and div u = d a_t come from the path in closed form.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "graph.hpp"
#include "model.hpp"
#include "paths.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace fdm {

enum class CdmVariant { None, Abs, Sq, Eff };

inline const char* variant_name(CdmVariant v) {
    switch (v) {
        case CdmVariant::None: return "none";
        case CdmVariant::Abs: return "abs";
        case CdmVariant::Sq: return "sq";
        case CdmVariant::Eff: return "eff";
    }
    return "?";
}

inline CdmVariant variant_from_name(const std::string& s) {
    if (s == "none") return CdmVariant::None;
    if (s == "abs") return CdmVariant::Abs;
    if (s == "sq") return CdmVariant::Sq;
    if (s == "eff") return CdmVariant::Eff;
    throw ConfigError("unknown divergence variant '" + s + "' (want none|abs|sq|eff)");
}

// Exact divergences are affordable up to a handful of dimensions.
inline CdmVariant default_variant(std::size_t dim) {
    return dim <= 4 ? CdmVariant::Abs : CdmVariant::Eff;
}

struct LossSpec {
    CdmVariant variant = CdmVariant::Abs;
    double lambda_cfm = 1.0;
    double lambda_cdm = 1.0;
};

// One training batch with every conditional target precomputed. Nothing in
// here requires the tape; the same struct feeds graph builders and the plain
// integrand evaluators below.
struct Batch {
    Tensor x;                       // [n,d] path samples
    Tensor x1;                      // [n,d] data endpoints
    std::vector<double> t;          // [n] clipped times
    Tensor u_cond;                  // [n,d] conditional field at (t,x)
    Tensor score_cond;              // [n,d] conditional score at (t,x)
    std::vector<double> div_cond;   // [n] d * a_t
    std::vector<double> a_coef;     // [n] isotropic Jacobian of the target
    std::vector<double> w_cfm;      // [n] per-sample weights, default 1
    std::vector<double> w_cdm;
    Tensor cond;                    // [n,c] conditioning block, may be empty

    std::size_t size() const { return x.rows; }
    std::size_t dim() const { return x.cols; }
};

// Stratified times: one uniform shift for the whole batch, so the grid
// {(i+U)/n} covers [0,1] evenly every step.
inline void shifted_grid_times(std::size_t n, Rng& rng, double* out) {
    const double u = rng.uniform();
    for (std::size_t i = 0; i < n; ++i)
        out[i] = (static_cast<double>(i) + u) / static_cast<double>(n);
}

inline Batch make_batch(const Path& path, const Tensor& x1, Rng& rng) {
    const std::size_t n = x1.rows, d = x1.cols;
    if (d != path.dim())
        throw ShapeError("make_batch: data dim " + std::to_string(d) +
                         " != path dim " + std::to_string(path.dim()));
    Batch b;
    b.x = Tensor(n, d);
    b.x1 = x1;
    b.t.resize(n);
    b.u_cond = Tensor(n, d);
    b.score_cond = Tensor(n, d);
    b.div_cond.resize(n);
    b.a_coef.resize(n);
    b.w_cfm.assign(n, 1.0);
    b.w_cdm.assign(n, 1.0);

    shifted_grid_times(n, rng, b.t.data());
    std::vector<double> z(d);
    for (std::size_t i = 0; i < n; ++i) {
        const double tc = path.clip_time(b.t[i]);
        b.t[i] = tc;
        rng.fill_normal(z.data(), d);
        const double* x1row = b.x1.ptr() + i * d;
        double* xrow = b.x.ptr() + i * d;
        path.sample_point(tc, x1row, z.data(), xrow);
        path.cond_field(tc, xrow, x1row, b.u_cond.ptr() + i * d);
        path.cond_score(tc, xrow, x1row, b.score_cond.ptr() + i * d);
        const FieldCoeffs fc = path.field_coeffs(tc);
        b.a_coef[i] = fc.a;
        b.div_cond[i] = static_cast<double>(d) * fc.a;
    }
    return b;
}

// Trajectory datasets train on a noise-prediction-like scaling: weight the
// flow term by 1/sched'^2 and the divergence term by sched/(sched' * total
// state size), both evaluated at diffusion time 1-t. Keeps the two terms on
// comparable footing across the geometric schedule's many octaves.
inline void apply_dynamics_time_weights(const Path& path, Batch& b, std::size_t steps,
                                        std::size_t dim_per_step) {
    const double denom = static_cast<double>(steps * dim_per_step);
    for (std::size_t i = 0; i < b.size(); ++i) {
        const Schedule sc = path.schedule(b.t[i]);
        if (std::abs(sc.dsigma_diff) < 1e-300)
            throw NumericError("dynamics time weights need a strictly monotone schedule");
        b.w_cfm[i] = 1.0 / (sc.dsigma_diff * sc.dsigma_diff);
        b.w_cdm[i] = sc.sigma / (sc.dsigma_diff * denom);
    }
}

// Rademacher probe block [n, k*d] for the eff variant.
inline Tensor make_probes(std::size_t n, std::size_t d, std::size_t k, Rng& rng) {
    if (k == 0) throw ConfigError("need at least one probe");
    Tensor p(n, k * d);
    for (double& v : p.data) v = rng.uniform() < 0.5 ? -1.0 : 1.0;
    return p;
}

struct LossNodes {
    VectorFieldModel::GraphBind bind;
    ad::NodeId cfm = ad::kNoNode;
    ad::NodeId cdm = ad::kNoNode;   // kNoNode when variant is none
    ad::NodeId total = ad::kNoNode;
};

namespace detail {

inline Tensor column(const std::vector<double>& v) {
    Tensor t(v.size(), 1);
    t.data = v;
    return t;
}

// div v as a graph node: one tangent pass per basis direction, masked down
// to the diagonal entry.
inline ad::NodeId graph_divergence(ad::Graph& g, const VectorFieldModel::GraphBind& bind,
                                   std::size_t n, std::size_t d) {
    ad::NodeId acc = ad::kNoNode;
    for (std::size_t j = 0; j < d; ++j) {
        Tensor basis = Tensor::zeros(n, d);
        for (std::size_t i = 0; i < n; ++i) basis.at(i, j) = 1.0;
        const ad::NodeId e = g.constant(basis);
        const std::pair<ad::NodeId, ad::NodeId> seed{bind.x, e};
        const ad::NodeId col = g.tangent(bind.out, {&seed, 1});
        const ad::NodeId diag = g.row_sum(g.mul(col, e));
        acc = (acc == ad::kNoNode) ? diag : g.add(acc, diag);
    }
    return acc;
}

} // namespace detail

// Assemble the requested objective on g. For the eff variant `probes` must
// be an [n, k*d] block; other variants ignore it.
inline LossNodes build_losses(ad::Graph& g, const VectorFieldModel& model, const Batch& b,
                              const LossSpec& spec, const Tensor* probes = nullptr) {
    const std::size_t n = b.size(), d = b.dim();
    LossNodes out;
    out.bind = model.build_graph(g, b.x, b.t, b.cond.size() > 0 ? &b.cond : nullptr);

    const ad::NodeId u = g.constant(b.u_cond);
    const ad::NodeId wc = g.constant(detail::column(b.w_cfm));
    const ad::NodeId err = g.sub(out.bind.out, u);
    out.cfm = g.mean(g.mul(g.row_sum(g.square(err)), wc));

    if (spec.variant == CdmVariant::None) {
        out.total = g.scale(out.cfm, spec.lambda_cfm);
        return out;
    }

    const ad::NodeId wd = g.constant(detail::column(b.w_cdm));
    const ad::NodeId score = g.constant(b.score_cond);

    if (spec.variant == CdmVariant::Abs || spec.variant == CdmVariant::Sq) {
        const ad::NodeId div_v = detail::graph_divergence(g, out.bind, n, d);
        const ad::NodeId div_u = g.constant(detail::column(b.div_cond));
        const ad::NodeId gap = g.sub(div_u, div_v);
        const ad::NodeId coupling = g.row_sum(g.mul(g.sub(u, out.bind.out), score));
        const ad::NodeId integrand = g.add(gap, coupling);
        const ad::NodeId shaped =
            (spec.variant == CdmVariant::Abs) ? g.abs(integrand) : g.square(integrand);
        out.cdm = g.mean(g.mul(shaped, wd));
    } else {
        if (probes == nullptr || probes->rows != n || probes->cols == 0 ||
            probes->cols % d != 0)
            throw ShapeError("eff variant needs an [n, k*d] probe block");
        const std::size_t k = probes->cols / d;

        ad::NodeId acc = ad::kNoNode;
        for (std::size_t p = 0; p < k; ++p) {
            Tensor eps(n, d);
            std::vector<double> quad_u(n), u_dot(n), s_dot(n);
            for (std::size_t i = 0; i < n; ++i) {
                double e2 = 0.0, ue = 0.0, se = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double e = probes->at(i, p * d + j);
                    eps.at(i, j) = e;
                    e2 += e * e;
                    ue += b.u_cond.at(i, j) * e;
                    se += b.score_cond.at(i, j) * e;
                }
                quad_u[i] = b.a_coef[i] * e2;
                u_dot[i] = ue;
                s_dot[i] = se;
            }
            const ad::NodeId e = g.constant(std::move(eps));
            const std::pair<ad::NodeId, ad::NodeId> seed{out.bind.x, e};
            const ad::NodeId jv = g.tangent(out.bind.out, {&seed, 1});
            const ad::NodeId quad_v = g.row_sum(g.mul(e, jv));
            const ad::NodeId v_dot = g.stop_gradient(g.row_sum(g.mul(out.bind.out, e)));
            const ad::NodeId coupling =
                g.mul(g.sub(g.constant(detail::column(u_dot)), v_dot),
                      g.constant(detail::column(s_dot)));
            const ad::NodeId integrand =
                g.add(g.sub(g.constant(detail::column(quad_u)), quad_v), coupling);
            const ad::NodeId sq = g.square(integrand);
            acc = (acc == ad::kNoNode) ? sq : g.add(acc, sq);
        }
        if (k > 1) acc = g.scale(acc, 1.0 / static_cast<double>(k));
        out.cdm = g.mean(g.mul(acc, wd));
    }

    out.total = g.add(g.scale(out.cfm, spec.lambda_cfm), g.scale(out.cdm, spec.lambda_cdm));
    return out;
}

// --- plain (tape-free) integrand evaluators --------------------------------
// Used for metrics and verification; same math as the graph builders.

// per-sample squared flow-matching error, weight not applied
inline void cfm_integrands(const VectorFieldModel& m, const Batch& b,
                           VectorFieldModel::Workspace& ws, double* out) {
    const std::size_t n = b.size(), d = b.dim();
    std::vector<double> v(d);
    for (std::size_t i = 0; i < n; ++i) {
        const double* c = b.cond.size() > 0 ? b.cond.ptr() + i * b.cond.cols : nullptr;
        m.velocity(b.t[i], b.x.ptr() + i * d, v.data(), ws, c);
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double e = v[j] - b.u_cond.at(i, j);
            s += e * e;
        }
        out[i] = s;
    }
}

// per-sample divergence-matching integrand with the exact divergence:
// div u - div v + (u - v) . score, before abs or square
inline void cdm_integrands_exact(const VectorFieldModel& m, const Batch& b,
                                 VectorFieldModel::Workspace& ws, double* out) {
    const std::size_t n = b.size(), d = b.dim();
    std::vector<double> v(d);
    for (std::size_t i = 0; i < n; ++i) {
        const double* c = b.cond.size() > 0 ? b.cond.ptr() + i * b.cond.cols : nullptr;
        const double* x = b.x.ptr() + i * d;
        m.velocity(b.t[i], x, v.data(), ws, c);
        const double div_v = m.divergence_exact(b.t[i], x, ws, c);
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j)
            dot += (b.u_cond.at(i, j) - v[j]) * b.score_cond.at(i, j);
        out[i] = b.div_cond[i] - div_v + dot;
    }
}

// per-sample eff integrand: mean over k fresh probes of the squared
// single-probe estimate
inline void cdm_integrands_eff(const VectorFieldModel& m, const Batch& b, std::size_t k,
                               Rng& rng, VectorFieldModel::Workspace& ws, double* out) {
    if (k == 0) throw ConfigError("need at least one probe");
    const std::size_t n = b.size(), d = b.dim();
    std::vector<double> v(d), jv(d), eps(d);
    for (std::size_t i = 0; i < n; ++i) {
        const double* c = b.cond.size() > 0 ? b.cond.ptr() + i * b.cond.cols : nullptr;
        const double* x = b.x.ptr() + i * d;
        m.velocity(b.t[i], x, v.data(), ws, c);
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) {
            double e2 = 0.0, ue = 0.0, ve = 0.0, se = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                eps[j] = rng.uniform() < 0.5 ? -1.0 : 1.0;
                e2 += 1.0;
                ue += b.u_cond.at(i, j) * eps[j];
                ve += v[j] * eps[j];
                se += b.score_cond.at(i, j) * eps[j];
            }
            m.jvp_from_cache(eps.data(), jv.data(), ws);
            double quad_v = 0.0;
            for (std::size_t j = 0; j < d; ++j) quad_v += eps[j] * jv[j];
            const double est = b.a_coef[i] * e2 - quad_v + (ue - ve) * se;
            acc += est * est;
        }
        out[i] = acc / static_cast<double>(k);
    }
}

inline double weighted_mean(const double* vals, const std::vector<double>& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += vals[i] * w[i];
    return s / static_cast<double>(w.size());
}

} // namespace fdm
