#pragma once

// Model checkpoint container.
//
//   "FDM1"
//   u64  metadata length, then that many bytes of JSON
//   u64  parameter count, then parameters as little-endian f64 in
//        declaration order (W0, b0, W1, b1, ...)
//   u8   EMA flag; if 1, the shadow parameters follow (same count)
//   u8   trainer-state flag; if 1: u64 step, u64 adam step counter,
//        then Adam first and second moments (param count each)
//
// The metadata JSON always carries dim, hidden widths, activation, time
// frequency count, conditioning width, path family, seed and config hash;
// extra keys round-trip untouched. The trainer block is what makes
// resume-from-checkpoint bit-identical to an uninterrupted run.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "model.hpp"
#include "serialize.hpp"

namespace fdm {

struct TrainerState {
    std::uint64_t step = 0;
    std::uint64_t adam_t = 0;
    std::vector<double> adam_m;
    std::vector<double> adam_v;
};

struct Checkpoint {
    nlohmann::json meta;
    std::vector<double> params;
    bool has_ema = false;
    std::vector<double> ema;
    double ema_decay = 0.999;
    bool has_trainer = false;
    TrainerState trainer;

    ModelConfig model_config() const {
        ModelConfig cfg;
        try {
            cfg.dim = meta.at("dim").get<std::size_t>();
            cfg.hidden = meta.at("hidden").get<std::vector<std::size_t>>();
            cfg.activation = ad::act_from_name(meta.at("activation").get<std::string>());
            cfg.time_freqs = meta.at("time_freqs").get<std::size_t>();
            cfg.cond_dim = meta.value("cond_dim", std::size_t{0});
        } catch (const nlohmann::json::exception& e) {
            throw DataError(std::string("checkpoint metadata incomplete: ") + e.what());
        }
        return cfg;
    }

    VectorFieldModel to_model(bool prefer_ema = false) const {
        VectorFieldModel m(model_config());
        if (m.param_count() != params.size())
            throw DataError("checkpoint parameter count does not match its metadata widths");
        if (prefer_ema) {
            if (!has_ema) throw DataError("checkpoint has no EMA block");
            m.set_params_from(ema);
        } else {
            m.set_params_from(params);
        }
        return m;
    }
};

inline void save_checkpoint(const std::string& path, const VectorFieldModel& model,
                            nlohmann::json meta, const EmaShadow* ema = nullptr,
                            const TrainerState* trainer = nullptr) {
    const ModelConfig& cfg = model.config();
    meta["dim"] = cfg.dim;
    meta["hidden"] = cfg.hidden;
    meta["activation"] = ad::act_name(cfg.activation);
    meta["time_freqs"] = cfg.time_freqs;
    meta["cond_dim"] = cfg.cond_dim;
    if (ema) meta["ema_decay"] = ema->decay();

    std::ofstream os = open_out(path);
    write_bytes(os, "FDM1");
    const std::string mstr = meta.dump();
    write_u64(os, mstr.size());
    write_bytes(os, mstr);

    std::vector<double> p = model.params();
    write_u64(os, p.size());
    write_f64_array(os, p.data(), p.size());

    if (ema) {
        if (ema->shadow().size() != p.size())
            throw ShapeError("save_checkpoint: EMA shadow size mismatch");
        write_u8(os, 1);
        write_f64_array(os, ema->shadow().data(), p.size());
    } else {
        write_u8(os, 0);
    }

    if (trainer) {
        if (trainer->adam_m.size() != p.size() || trainer->adam_v.size() != p.size())
            throw ShapeError("save_checkpoint: Adam moment size mismatch");
        write_u8(os, 1);
        write_u64(os, trainer->step);
        write_u64(os, trainer->adam_t);
        write_f64_array(os, trainer->adam_m.data(), p.size());
        write_f64_array(os, trainer->adam_v.data(), p.size());
    } else {
        write_u8(os, 0);
    }
    if (!os) throw IoError("write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is = open_in(path);
    expect_magic(is, "FDM1", "model checkpoint");
    Checkpoint ck;
    const std::uint64_t mlen = read_u64(is, "metadata length");
    if (mlen > (1u << 24)) throw DataError("checkpoint metadata length is implausible");
    const std::string mstr = read_bytes(is, mlen, "metadata");
    ck.meta = nlohmann::json::parse(mstr, nullptr, false);
    if (ck.meta.is_discarded()) throw DataError("checkpoint metadata is not valid JSON");

    const std::uint64_t n = read_u64(is, "parameter count");
    if (n > (1ull << 32)) throw DataError("checkpoint parameter count is implausible");
    ck.params.resize(n);
    read_f64_array(is, ck.params.data(), n, "parameters");

    ck.has_ema = read_u8(is, "EMA flag") != 0;
    if (ck.has_ema) {
        ck.ema.resize(n);
        read_f64_array(is, ck.ema.data(), n, "EMA shadow");
        ck.ema_decay = ck.meta.value("ema_decay", 0.999);
    }

    ck.has_trainer = read_u8(is, "trainer flag") != 0;
    if (ck.has_trainer) {
        ck.trainer.step = read_u64(is, "trainer step");
        ck.trainer.adam_t = read_u64(is, "adam counter");
        ck.trainer.adam_m.resize(n);
        ck.trainer.adam_v.resize(n);
        read_f64_array(is, ck.trainer.adam_m.data(), n, "adam m");
        read_f64_array(is, ck.trainer.adam_v.data(), n, "adam v");
    }
    return ck;
}

} // namespace fdm
