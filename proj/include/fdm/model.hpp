#pragma once

// Velocity field model: an MLP v(t, x [, cond]) -> R^d with a sinusoidal
// embedding of t concatenated to the state. Two evaluation paths exist on
// purpose. Training builds a tape (build_graph) so losses can differentiate
// through Jacobian-vector products; sampling and likelihood integration use
// plain buffer arithmetic with no tape overhead. Both paths share the same
// matmul kernel and activation scalars, so they agree bit for bit; a test
// pins that.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "graph.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace fdm {

// Analytic divergence sums one JVP per coordinate; past this width the
// Hutchinson estimator is the intended tool.
constexpr std::size_t kExactDivCap = 64;

struct ModelConfig {
    std::size_t dim = 1;
    std::vector<std::size_t> hidden = {64, 64, 64};
    ad::Act activation = ad::Act::Tanh;
    std::size_t time_freqs = 16;
    std::size_t cond_dim = 0;

    std::size_t feature_dim() const { return dim + 2 * time_freqs + cond_dim; }
};

class VectorFieldModel {
  public:
    VectorFieldModel() = default;
    explicit VectorFieldModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.dim == 0) throw ConfigError("model dim must be positive");
        if (cfg_.time_freqs == 0) throw ConfigError("model needs at least one time frequency");
        std::size_t in = cfg_.feature_dim();
        for (std::size_t h : cfg_.hidden) {
            if (h == 0) throw ConfigError("hidden width must be positive");
            weights_.emplace_back(in, h);
            biases_.emplace_back(1, h);
            in = h;
        }
        weights_.emplace_back(in, cfg_.dim);
        biases_.emplace_back(1, cfg_.dim);
    }

    const ModelConfig& config() const { return cfg_; }
    std::size_t layer_count() const { return weights_.size(); }
    const Tensor& weight(std::size_t l) const { return weights_[l]; }
    const Tensor& bias(std::size_t l) const { return biases_[l]; }

    // Scaled-uniform fan-in init, U(-1/sqrt(in), 1/sqrt(in)).
    void init(std::uint64_t seed) {
        Rng rng = Rng::stream(seed, 0x6d6f64656c696e69ULL);  // model-init stream tag
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(weights_[l].rows));
            for (double& w : weights_[l].data) w = rng.uniform(-bound, bound);
            for (double& b : biases_[l].data) b = rng.uniform(-bound, bound);
        }
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l < weights_.size(); ++l)
            n += weights_[l].size() + biases_[l].size();
        return n;
    }

    // Declaration order: W0, b0, W1, b1, ... row-major within each tensor.
    void copy_params_to(std::span<double> out) const {
        std::size_t k = 0;
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            for (double w : weights_[l].data) out[k++] = w;
            for (double b : biases_[l].data) out[k++] = b;
        }
    }

    void set_params_from(std::span<const double> in) {
        std::size_t k = 0;
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            for (double& w : weights_[l].data) w = in[k++];
            for (double& b : biases_[l].data) b = in[k++];
        }
    }

    std::vector<double> params() const {
        std::vector<double> p(param_count());
        copy_params_to(p);
        return p;
    }

    // Sinusoidal time features: [sin(w_k t), cos(w_k t)] with w_k spaced
    // geometrically from 2*pi to 2*pi*1000.
    void embed_time(double t, double* out) const {
        const std::size_t K = cfg_.time_freqs;
        for (std::size_t k = 0; k < K; ++k) {
            const double frac = (K == 1) ? 0.0
                                         : static_cast<double>(k) / static_cast<double>(K - 1);
            const double w = 2.0 * std::numbers::pi * std::pow(1000.0, frac);
            out[2 * k] = std::sin(w * t);
            out[2 * k + 1] = std::cos(w * t);
        }
    }

    // --- plain evaluation -------------------------------------------------

    // Scratch for repeated single-point evaluation (solver inner loops).
    struct Workspace {
        std::vector<double> feat;               // input features
        std::vector<std::vector<double>> pre;   // pre-activations per hidden layer
        std::vector<std::vector<double>> post;  // activations per hidden layer
        std::vector<double> dfeat;              // tangent buffers
        std::vector<std::vector<double>> dpre;
        std::vector<double> out_buf;
    };

    Workspace make_workspace() const {
        Workspace ws;
        ws.feat.resize(cfg_.feature_dim());
        ws.dfeat.resize(cfg_.feature_dim());
        const std::size_t L = cfg_.hidden.size();
        ws.pre.resize(L);
        ws.post.resize(L);
        ws.dpre.resize(L);
        for (std::size_t l = 0; l < L; ++l) {
            ws.pre[l].resize(cfg_.hidden[l]);
            ws.post[l].resize(cfg_.hidden[l]);
            ws.dpre[l].resize(cfg_.hidden[l]);
        }
        ws.out_buf.resize(cfg_.dim);
        return ws;
    }

    void velocity(double t, const double* x, double* out, Workspace& ws,
                  const double* cond = nullptr) const {
        forward_cached(t, x, cond, ws);
        std::copy(ws.out_buf.begin(), ws.out_buf.end(), out);
    }

    // JVP in x on top of the forward pass already stored in ws. Reuses the
    // cached pre-activations, so k probes cost k linear passes, not k
    // forwards.
    void jvp_from_cache(const double* dx, double* out_jvp, Workspace& ws) const {
        const std::size_t F = cfg_.feature_dim();
        std::fill(ws.dfeat.begin(), ws.dfeat.end(), 0.0);
        for (std::size_t i = 0; i < cfg_.dim; ++i) ws.dfeat[i] = dx[i];
        const double* dh = ws.dfeat.data();
        std::size_t dh_len = F;
        for (std::size_t l = 0; l < cfg_.hidden.size(); ++l) {
            std::vector<double>& dz = ws.dpre[l];
            std::fill(dz.begin(), dz.end(), 0.0);
            matmul_accum_kernel(dh, 1, dh_len, weights_[l].ptr(), weights_[l].cols, dz.data());
            for (std::size_t j = 0; j < dz.size(); ++j)
                dz[j] = ad::act_grad(cfg_.activation, ws.pre[l][j]) * dz[j];
            dh = dz.data();
            dh_len = dz.size();
        }
        std::fill(out_jvp, out_jvp + cfg_.dim, 0.0);
        const Tensor& wl = weights_.back();
        matmul_accum_kernel(dh, 1, dh_len, wl.ptr(), wl.cols, out_jvp);
    }

    void velocity_jvp(double t, const double* x, const double* dx, double* out_v,
                      double* out_jvp, Workspace& ws, const double* cond = nullptr) const {
        velocity(t, x, out_v, ws, cond);
        jvp_from_cache(dx, out_jvp, ws);
    }

    double divergence_exact(double t, const double* x, Workspace& ws,
                            const double* cond = nullptr) const {
        if (cfg_.dim > kExactDivCap)
            throw UnsupportedError("divergence_exact: dim " + std::to_string(cfg_.dim) +
                                   " exceeds cap " + std::to_string(kExactDivCap) +
                                   "; use the Hutchinson estimator");
        forward_cached(t, x, cond, ws);
        std::vector<double> e(cfg_.dim, 0.0), jv(cfg_.dim);
        double div = 0.0;
        for (std::size_t i = 0; i < cfg_.dim; ++i) {
            e[i] = 1.0;
            jvp_from_cache(e.data(), jv.data(), ws);
            div += jv[i];
            e[i] = 0.0;
        }
        return div;
    }

    // Mean over the given probes of eps' J eps. Probes are supplied by the
    // caller so they can be held fixed along a trajectory.
    double divergence_hutchinson(double t, const double* x,
                                 std::span<const double> probes, Workspace& ws,
                                 const double* cond = nullptr) const {
        const std::size_t d = cfg_.dim;
        if (probes.empty() || probes.size() % d != 0)
            throw ShapeError("divergence_hutchinson: probe buffer must hold k*dim values");
        const std::size_t k = probes.size() / d;
        forward_cached(t, x, cond, ws);
        std::vector<double> jv(d);
        double acc = 0.0;
        for (std::size_t p = 0; p < k; ++p) {
            const double* eps = probes.data() + p * d;
            jvp_from_cache(eps, jv.data(), ws);
            double dot = 0.0;
            for (std::size_t i = 0; i < d; ++i) dot += eps[i] * jv[i];
            acc += dot;
        }
        return acc / static_cast<double>(k);
    }

    // --- tape construction ------------------------------------------------

    struct GraphBind {
        ad::NodeId x = ad::kNoNode;    // differentiable state input [B,d]
        ad::NodeId out = ad::kNoNode;  // velocity output [B,d]
        std::vector<ad::NodeId> params;  // W0,b0,W1,b1,... as graph inputs
    };

    // Builds the batched forward pass on g. Times enter as per-sample
    // embedding rows (constants; nothing differentiates in t).
    GraphBind build_graph(ad::Graph& g, const Tensor& x, std::span<const double> t,
                          const Tensor* cond = nullptr) const {
        if (x.cols != cfg_.dim)
            throw ShapeError("build_graph: x has " + std::to_string(x.cols) +
                             " cols, model dim is " + std::to_string(cfg_.dim));
        if (t.size() != x.rows)
            throw ShapeError("build_graph: need one time per batch row");
        if (cfg_.cond_dim > 0 && (cond == nullptr || cond->cols != cfg_.cond_dim ||
                                  cond->rows != x.rows))
            throw ShapeError("build_graph: conditioning block missing or mis-shaped");

        GraphBind bind;
        bind.x = g.input(x);
        Tensor emb(x.rows, 2 * cfg_.time_freqs);
        for (std::size_t i = 0; i < x.rows; ++i)
            embed_time(t[i], emb.ptr() + i * emb.cols);
        ad::NodeId h = g.concat_cols(bind.x, g.constant(std::move(emb)));
        if (cfg_.cond_dim > 0) h = g.concat_cols(h, g.constant(*cond));

        for (std::size_t l = 0; l < weights_.size(); ++l) {
            ad::NodeId w = g.input(weights_[l]);
            ad::NodeId b = g.input(biases_[l]);
            bind.params.push_back(w);
            bind.params.push_back(b);
            h = g.add_bias(g.matmul(h, w), b);
            if (l + 1 < weights_.size()) h = g.activation(h, cfg_.activation);
        }
        bind.out = h;
        return bind;
    }

  private:
    ModelConfig cfg_;
    std::vector<Tensor> weights_;
    std::vector<Tensor> biases_;

    void forward_cached(double t, const double* x, const double* cond, Workspace& ws) const {
        const std::size_t F = cfg_.feature_dim();
        double* feat = ws.feat.data();
        for (std::size_t i = 0; i < cfg_.dim; ++i) feat[i] = x[i];
        embed_time(t, feat + cfg_.dim);
        if (cfg_.cond_dim > 0) {
            if (cond == nullptr)
                throw ShapeError("velocity: model expects conditioning features");
            for (std::size_t i = 0; i < cfg_.cond_dim; ++i)
                feat[cfg_.dim + 2 * cfg_.time_freqs + i] = cond[i];
        }
        // matmul into a zeroed buffer, bias added after: the same operation
        // order as the tape, so the two evaluators agree bitwise
        const double* h = feat;
        std::size_t h_len = F;
        for (std::size_t l = 0; l < cfg_.hidden.size(); ++l) {
            std::vector<double>& z = ws.pre[l];
            std::fill(z.begin(), z.end(), 0.0);
            matmul_accum_kernel(h, 1, h_len, weights_[l].ptr(), weights_[l].cols, z.data());
            for (std::size_t j = 0; j < z.size(); ++j) z[j] += biases_[l].at(0, j);
            std::vector<double>& a = ws.post[l];
            for (std::size_t j = 0; j < z.size(); ++j)
                a[j] = ad::act_val(cfg_.activation, z[j]);
            h = a.data();
            h_len = a.size();
        }
        std::fill(ws.out_buf.begin(), ws.out_buf.end(), 0.0);
        matmul_accum_kernel(h, 1, h_len, weights_.back().ptr(), weights_.back().cols,
                            ws.out_buf.data());
        for (std::size_t j = 0; j < cfg_.dim; ++j) ws.out_buf[j] += biases_.back().at(0, j);
    }
};

// Exponential moving average of the parameters, kept as a flat shadow vector.
// decay 0 tracks the raw parameters exactly; decay 1 never moves.
class EmaShadow {
  public:
    EmaShadow() = default;
    EmaShadow(const VectorFieldModel& m, double decay) : decay_(decay) {
        if (!(decay >= 0.0 && decay <= 1.0))
            throw ConfigError("EMA decay must lie in [0,1]");
        shadow_ = m.params();
    }

    double decay() const { return decay_; }
    const std::vector<double>& shadow() const { return shadow_; }
    void set_shadow(std::vector<double> s, double decay) {
        shadow_ = std::move(s);
        decay_ = decay;
    }

    void update(const VectorFieldModel& m) {
        std::vector<double> p = m.params();
        if (p.size() != shadow_.size())
            throw ShapeError("EMA shadow size does not match the model");
        for (std::size_t i = 0; i < p.size(); ++i)
            shadow_[i] = decay_ * shadow_[i] + (1.0 - decay_) * p[i];
    }

    void write_to(VectorFieldModel& m) const { m.set_params_from(shadow_); }

  private:
    double decay_ = 0.999;
    std::vector<double> shadow_;
};

} // namespace fdm
