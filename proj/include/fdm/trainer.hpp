#pragma once

// Training loop. Everything random is derived from (seed, index): epoch
// permutations from the epoch number, batch noise and probes from the global
// step number. Optimizer moments live in the checkpoint trailer. Together
// that makes a resumed run continue bit-for-bit as if it had never stopped,
// which the tests assert on raw parameter bytes.
//
// Steps with non-finite losses or gradients are counted and skipped rather
// than aborted; the step index still advances so the random streams stay
// aligned with an uninterrupted run.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "checkpoint.hpp"
#include "losses.hpp"
#include "model.hpp"
#include "paths.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace fdm {

namespace stream_tag {
// arbitrary fixed 64-bit tags separating the per-purpose random streams
inline constexpr std::uint64_t perm = 0x7065726d75746174ULL;
inline constexpr std::uint64_t batch = 0x626174636873616dULL;
} // namespace stream_tag

class Adam {
  public:
    Adam(std::size_t n, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

    void step(std::span<double> params, std::span<const double> grad, double lr) {
        if (params.size() != m_.size() || grad.size() != m_.size())
            throw ShapeError("optimizer state size mismatch");
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < m_.size(); ++i) {
            m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
            v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
            const double mhat = m_[i] / c1;
            const double vhat = v_[i] / c2;
            params[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
        }
    }

    std::uint64_t t() const { return t_; }
    const std::vector<double>& m() const { return m_; }
    const std::vector<double>& v() const { return v_; }

    void restore(std::uint64_t t, std::vector<double> m, std::vector<double> v) {
        if (m.size() != m_.size() || v.size() != v_.size())
            throw DataError("optimizer state in checkpoint has the wrong size");
        t_ = t;
        m_ = std::move(m);
        v_ = std::move(v);
    }

  private:
    double beta1_, beta2_, eps_;
    std::uint64_t t_ = 0;
    std::vector<double> m_, v_;
};

enum class LrSchedule { Constant, ExpEpoch, Poly };

inline const char* schedule_name(LrSchedule s) {
    switch (s) {
        case LrSchedule::Constant: return "constant";
        case LrSchedule::ExpEpoch: return "exp";
        case LrSchedule::Poly: return "poly";
    }
    return "?";
}

inline LrSchedule schedule_from_name(const std::string& s) {
    if (s == "constant") return LrSchedule::Constant;
    if (s == "exp") return LrSchedule::ExpEpoch;
    if (s == "poly") return LrSchedule::Poly;
    throw ConfigError("unknown lr schedule '" + s + "' (want constant|exp|poly)");
}

// exp decays 0.5% per epoch; poly anneals as sqrt(1 - progress)
inline double lr_at(LrSchedule s, double base, std::size_t step, std::size_t epoch,
                    std::size_t total_steps) {
    switch (s) {
        case LrSchedule::Constant: return base;
        case LrSchedule::ExpEpoch: return base * std::pow(0.995, static_cast<double>(epoch));
        case LrSchedule::Poly: {
            const double left =
                1.0 - static_cast<double>(step) / static_cast<double>(total_steps);
            return base * std::sqrt(left > 0.0 ? left : 0.0);
        }
    }
    return base;
}

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 128;
    double lr = 1e-3;
    LrSchedule schedule = LrSchedule::Constant;
    double ema_decay = 0.999;        // <= 0 disables the shadow
    LossSpec loss;
    std::size_t probes = 1;          // eff variant only
    std::uint64_t seed = 0;
    std::size_t log_every = 10;
    std::size_t checkpoint_every = 0;  // steps; 0 picks 10% of the run
    std::string out_dir;               // empty: no metrics or checkpoints on disk
    std::size_t weight_steps = 0;      // both nonzero: apply trajectory time
    std::size_t weight_dim = 0;        // weights from the path schedule
    nlohmann::json meta;               // merged into checkpoint metadata
};

struct TrainResult {
    VectorFieldModel model;
    EmaShadow ema;                   // tracks raw params when disabled
    std::size_t steps_run = 0;
    std::size_t skipped = 0;
    double final_cfm = 0.0;
    double final_cdm = 0.0;
    double final_fdm = 0.0;
};

// Flattened parameter gradient in declaration order. Returns false if any
// entry is non-finite (the step should then be skipped).
inline bool collect_param_grads(const ad::Graph& g, const VectorFieldModel::GraphBind& bind,
                                std::span<double> out) {
    std::size_t off = 0;
    bool finite = true;
    for (ad::NodeId pid : bind.params) {
        const Tensor& val = g.value(pid);
        if (g.has_grad(pid)) {
            const Tensor& gr = g.grad(pid);
            for (std::size_t i = 0; i < gr.size(); ++i) {
                out[off + i] = gr.data[i];
                if (!std::isfinite(gr.data[i])) finite = false;
            }
        } else {
            std::fill(out.begin() + static_cast<std::ptrdiff_t>(off),
                      out.begin() + static_cast<std::ptrdiff_t>(off + val.size()), 0.0);
        }
        off += val.size();
    }
    if (off != out.size()) throw ShapeError("gradient buffer size mismatch");
    return finite;
}

inline void fisher_yates(std::vector<std::size_t>& idx, Rng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[rng.below(i)]);
}

inline TrainResult train(const ModelConfig& mc, const Path& path, const Tensor& data,
                         const TrainConfig& cfg, const Checkpoint* resume = nullptr) {
    if (cfg.batch_size == 0) throw ConfigError("batch size must be positive");
    if (data.rows < cfg.batch_size)
        throw ConfigError("dataset smaller than one batch (" + std::to_string(data.rows) +
                          " < " + std::to_string(cfg.batch_size) + ")");
    if (data.cols != mc.dim)
        throw ConfigError("data dim " + std::to_string(data.cols) + " != model dim " +
                          std::to_string(mc.dim));
    const std::size_t steps_per_epoch = data.rows / cfg.batch_size;
    const std::size_t total_steps = steps_per_epoch * cfg.epochs;
    if (total_steps == 0) throw ConfigError("training run has zero steps");

    VectorFieldModel model(mc);
    const bool use_ema = cfg.ema_decay > 0.0;
    std::size_t start_step = 0;
    Adam adam(model.param_count());

    if (resume != nullptr) {
        model.set_params_from(resume->params);
        if (!resume->has_trainer)
            throw DataError("checkpoint has no optimizer state to resume from");
        adam.restore(resume->trainer.adam_t, resume->trainer.adam_m, resume->trainer.adam_v);
        start_step = resume->trainer.step;
        if (start_step >= total_steps)
            throw ConfigError("checkpoint is already past the requested run length");
    } else {
        model.init(cfg.seed);
    }

    EmaShadow ema(model, use_ema ? cfg.ema_decay : 0.0);
    if (resume != nullptr && resume->has_ema)
        ema.set_shadow(resume->ema, use_ema ? cfg.ema_decay : 0.0);

    const std::size_t ckpt_every =
        cfg.checkpoint_every > 0 ? cfg.checkpoint_every
                                 : std::max<std::size_t>(1, total_steps / 10);

    std::ofstream metrics;
    if (!cfg.out_dir.empty()) {
        const std::string mpath = cfg.out_dir + "/metrics.csv";
        metrics.open(mpath, resume != nullptr ? std::ios::app : std::ios::trunc);
        if (!metrics) throw IoError("cannot open '" + mpath + "' for writing");
        if (resume == nullptr) metrics << "step,lr,cfm,cdm,fdm,wallclock\n";
        metrics.precision(12);
    }

    const auto t_start = std::chrono::steady_clock::now();
    auto wallclock = [&t_start]() {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
            .count();
    };

    std::vector<std::size_t> perm(data.rows);
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    std::size_t perm_epoch = std::numeric_limits<std::size_t>::max();

    std::vector<double> grad(model.param_count());
    std::vector<double> theta(model.param_count());
    TrainResult res{std::move(model), std::move(ema)};

    auto save_ckpt = [&](std::size_t next_step, const std::string& name) {
        if (cfg.out_dir.empty()) return;
        nlohmann::json meta = cfg.meta;
        meta["train_steps"] = total_steps;
        meta["seed"] = cfg.seed;
        meta["lr_schedule"] = schedule_name(cfg.schedule);
        meta["loss_variant"] = variant_name(cfg.loss.variant);
        TrainerState ts;
        ts.step = next_step;
        ts.adam_t = adam.t();
        ts.adam_m = adam.m();
        ts.adam_v = adam.v();
        save_checkpoint(cfg.out_dir + "/" + name, res.model, meta,
                        use_ema ? &res.ema : nullptr, &ts);
    };

    for (std::size_t step = start_step; step < total_steps; ++step) {
        const std::size_t epoch = step / steps_per_epoch;
        const std::size_t slot = step % steps_per_epoch;

        if (epoch != perm_epoch) {
            for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
            Rng prng = Rng::stream(cfg.seed, stream_tag::perm, epoch);
            fisher_yates(perm, prng);
            perm_epoch = epoch;
        }

        Tensor xb(cfg.batch_size, data.cols);
        for (std::size_t i = 0; i < cfg.batch_size; ++i) {
            const std::size_t src = perm[slot * cfg.batch_size + i];
            for (std::size_t j = 0; j < data.cols; ++j) xb.at(i, j) = data.at(src, j);
        }

        Rng brng = Rng::stream(cfg.seed, stream_tag::batch, step);
        Batch batch = make_batch(path, xb, brng);
        if (cfg.weight_steps > 0 && cfg.weight_dim > 0)
            apply_dynamics_time_weights(path, batch, cfg.weight_steps, cfg.weight_dim);

        Tensor probes;
        const Tensor* probes_ptr = nullptr;
        if (cfg.loss.variant == CdmVariant::Eff) {
            probes = make_probes(cfg.batch_size, data.cols, cfg.probes, brng);
            probes_ptr = &probes;
        }

        ad::Graph g;
        const LossNodes nodes = build_losses(g, res.model, batch, cfg.loss, probes_ptr);
        const double cfm = g.value(nodes.cfm).at(0, 0);
        const double cdm = nodes.cdm != ad::kNoNode ? g.value(nodes.cdm).at(0, 0) : 0.0;
        const double fdm = g.value(nodes.total).at(0, 0);

        const double lr = lr_at(cfg.schedule, cfg.lr, step, epoch, total_steps);

        bool applied = false;
        if (std::isfinite(fdm)) {
            g.backward(nodes.total);
            if (collect_param_grads(g, nodes.bind, grad)) {
                res.model.copy_params_to(theta);
                adam.step(theta, grad, lr);
                res.model.set_params_from(theta);
                res.ema.update(res.model);
                applied = true;
            }
        }
        if (!applied) ++res.skipped;

        res.final_cfm = cfm;
        res.final_cdm = cdm;
        res.final_fdm = fdm;
        ++res.steps_run;

        if (metrics.is_open() &&
            (step % cfg.log_every == 0 || step + 1 == total_steps || !applied)) {
            metrics << step << "," << lr << "," << cfm << "," << cdm << "," << fdm << ","
                    << wallclock() << "\n";
        }
        if ((step + 1) % ckpt_every == 0 && step + 1 < total_steps)
            save_ckpt(step + 1, "checkpoint_" + std::to_string(step + 1) + ".fdm");
    }

    save_ckpt(total_steps, "final.fdm");
    if (metrics.is_open()) metrics.flush();
    return res;
}

} // namespace fdm
