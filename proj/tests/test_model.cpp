// Model module: the plain evaluator and the tape must agree bitwise, the
// divergence operators must agree with finite differences and with each
// other in expectation, and checkpoints must round-trip exactly.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "fdm/checkpoint.hpp"
#include "fdm/model.hpp"
#include "fdm/rng.hpp"

using namespace fdm;

namespace {

ModelConfig small_cfg(std::size_t dim, ad::Act act = ad::Act::Tanh) {
    ModelConfig cfg;
    cfg.dim = dim;
    cfg.hidden = {16, 16};
    cfg.activation = act;
    cfg.time_freqs = 4;
    return cfg;
}

std::filesystem::path temp_file(const char* name) {
    return std::filesystem::temp_directory_path() / name;
}

} // namespace

TEST_CASE("plain velocity equals the tape forward bit for bit") {
    for (ad::Act act : {ad::Act::Tanh, ad::Act::Silu, ad::Act::Softplus}) {
        VectorFieldModel m(small_cfg(3, act));
        m.init(11);
        Rng rng(21);
        const std::size_t B = 5;
        Tensor xb(B, 3);
        std::vector<double> ts(B);
        for (std::size_t i = 0; i < B; ++i) {
            ts[i] = rng.uniform();
            for (std::size_t j = 0; j < 3; ++j) xb.at(i, j) = rng.normal();
        }
        ad::Graph g;
        auto bind = m.build_graph(g, xb, ts);
        const Tensor& out = g.value(bind.out);

        auto ws = m.make_workspace();
        for (std::size_t i = 0; i < B; ++i) {
            double v[3];
            m.velocity(ts[i], xb.ptr() + i * 3, v, ws);
            for (std::size_t j = 0; j < 3; ++j) {
                INFO("act=" << ad::act_name(act) << " row=" << i << " col=" << j);
                CHECK(v[j] == out.at(i, j));
            }
        }
    }
}

TEST_CASE("plain JVP equals the tape tangent bit for bit") {
    VectorFieldModel m(small_cfg(4));
    m.init(3);
    Rng rng(5);
    Tensor xb(3, 4);
    std::vector<double> ts = {0.2, 0.55, 0.9};
    Tensor dx(3, 4);
    for (auto& v : xb.data) v = rng.normal();
    for (auto& v : dx.data) v = rng.normal();

    ad::Graph g;
    auto bind = m.build_graph(g, xb, ts);
    std::pair<ad::NodeId, ad::NodeId> seeds[] = {{bind.x, g.constant(dx)}};
    ad::NodeId jvp_node = g.tangent(bind.out, seeds);
    const Tensor& tape_jvp = g.value(jvp_node);

    auto ws = m.make_workspace();
    for (std::size_t i = 0; i < 3; ++i) {
        double v[4], jv[4];
        m.velocity_jvp(ts[i], xb.ptr() + i * 4, dx.ptr() + i * 4, v, jv, ws);
        for (std::size_t j = 0; j < 4; ++j) CHECK(jv[j] == tape_jvp.at(i, j));
    }
}

TEST_CASE("JVP matches central finite differences") {
    VectorFieldModel m(small_cfg(3, ad::Act::Silu));
    m.init(17);
    Rng rng(18);
    auto ws = m.make_workspace();
    const double t = 0.37;
    double x[3], dx[3], v[3], jv[3];
    for (int i = 0; i < 3; ++i) {
        x[i] = rng.normal();
        dx[i] = rng.normal();
    }
    m.velocity_jvp(t, x, dx, v, jv, ws);
    const double h = 1e-6;
    double xp[3], xm[3], vp[3], vm[3];
    for (int i = 0; i < 3; ++i) {
        xp[i] = x[i] + h * dx[i];
        xm[i] = x[i] - h * dx[i];
    }
    m.velocity(t, xp, vp, ws);
    m.velocity(t, xm, vm, ws);
    for (int i = 0; i < 3; ++i) {
        const double fd = (vp[i] - vm[i]) / (2 * h);
        CHECK(std::abs(jv[i] - fd) <= 1e-6 * std::max(1.0, std::abs(fd)));
    }
}

TEST_CASE("divergence_exact matches finite differences") {
    VectorFieldModel m(small_cfg(5));
    m.init(29);
    Rng rng(30);
    auto ws = m.make_workspace();
    const double t = 0.61;
    double x[5];
    for (int i = 0; i < 5; ++i) x[i] = rng.normal();
    const double dv = m.divergence_exact(t, x, ws);
    const double h = 1e-6;
    double fd = 0.0;
    for (int i = 0; i < 5; ++i) {
        double xp[5], xm[5], vp[5], vm[5];
        std::copy(x, x + 5, xp);
        std::copy(x, x + 5, xm);
        xp[i] += h;
        xm[i] -= h;
        m.velocity(t, xp, vp, ws);
        m.velocity(t, xm, vm, ws);
        fd += (vp[i] - vm[i]) / (2 * h);
    }
    CHECK(std::abs(dv - fd) <= 1e-6 * std::max(1.0, std::abs(fd)));
}

TEST_CASE("divergence_exact refuses dims beyond the cap") {
    ModelConfig cfg;
    cfg.dim = kExactDivCap + 1;
    cfg.hidden = {8};
    cfg.time_freqs = 2;
    VectorFieldModel m(cfg);
    m.init(1);
    auto ws = m.make_workspace();
    std::vector<double> x(cfg.dim, 0.1);
    CHECK_THROWS_AS(m.divergence_exact(0.5, x.data(), ws), UnsupportedError);
}

// A model whose Jacobian has a strong diagonal, the regime trained velocity
// fields live in (contraction toward data). With trace comparable to the
// Frobenius norm, the 1e5-probe estimator is tight in relative terms; for a
// trace near zero only the standard-error check is meaningful.
static VectorFieldModel diagonal_dominant_model() {
    ModelConfig cfg;
    cfg.dim = 8;
    cfg.hidden = {16};
    cfg.time_freqs = 4;
    VectorFieldModel m(cfg);
    m.init(77);
    std::vector<double> p = m.params();
    m.copy_params_to(p);
    // W0 is [feature_dim x 16]: route x_i to hidden unit i with gain 0.3
    const std::size_t F = cfg.feature_dim();
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 16; ++j)
            p[i * 16 + j] = (i == j) ? 0.3 : 0.02 * p[i * 16 + j];
    // W1 is [16 x 8] right after W0 and b0: hidden unit i back to out i, gain 2
    const std::size_t w1_off = F * 16 + 16;
    for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t j = 0; j < 8; ++j)
            p[w1_off + i * 8 + j] = (i == j) ? 2.0 : 0.05 * p[w1_off + i * 8 + j];
    m.set_params_from(p);
    return m;
}

TEST_CASE("Hutchinson estimator is unbiased and tight at 1e5 probes") {
    VectorFieldModel m = diagonal_dominant_model();
    Rng rng(78);
    auto ws = m.make_workspace();
    const double t = 0.44;
    double x[8];
    for (int i = 0; i < 8; ++i) x[i] = rng.normal();
    const double exact = m.divergence_exact(t, x, ws);
    REQUIRE(std::abs(exact) > 1.0);  // diagonal construction guarantees a real trace

    const std::size_t k = 100000;
    std::vector<double> probes(k * 8);
    Rng prng = Rng::stream(4242, 0);
    prng.fill_normal(probes.data(), probes.size());
    const double est = m.divergence_hutchinson(t, x, probes, ws);

    // per-probe spread for the standard-error bound
    double m1 = 0.0, m2 = 0.0;
    std::vector<double> jv(8);
    m.velocity(t, x, jv.data(), ws);  // prime the cache
    for (std::size_t p = 0; p < k; ++p) {
        double single = m.divergence_hutchinson(t, x, {probes.data() + p * 8, 8}, ws);
        m1 += single;
        m2 += single * single;
        if (p == 4096) break;  // spread estimate does not need every probe
    }
    const double nspread = 4097.0;
    const double var = m2 / nspread - (m1 / nspread) * (m1 / nspread);
    const double se = std::sqrt(var / static_cast<double>(k));
    INFO("exact=" << exact << " est=" << est << " se=" << se);
    CHECK(std::abs(est - exact) <= 3 * se);
    CHECK(std::abs(est - exact) <= 0.01 * std::abs(exact));
}

TEST_CASE("tape gradients of a model loss match finite differences") {
    VectorFieldModel m(small_cfg(2));
    m.init(41);
    Rng rng(42);
    const std::size_t B = 4;
    Tensor xb(B, 2);
    std::vector<double> ts(B);
    for (std::size_t i = 0; i < B; ++i) {
        ts[i] = rng.uniform();
        for (std::size_t j = 0; j < 2; ++j) xb.at(i, j) = rng.normal();
    }
    auto loss_value = [&](const VectorFieldModel& model) {
        ad::Graph g;
        auto bind = model.build_graph(g, xb, ts);
        return g.value(g.mean(g.square(bind.out))).data[0];
    };
    ad::Graph g;
    auto bind = m.build_graph(g, xb, ts);
    g.backward(g.mean(g.square(bind.out)));

    // check a few weights in the first and last layer via declaration order
    std::vector<double> p = m.params();
    const double h = 1e-5;
    for (std::size_t k : {std::size_t{0}, std::size_t{7}, p.size() - 3, p.size() - 1}) {
        VectorFieldModel mp = m, mm = m;
        std::vector<double> pp = p, pm = p;
        pp[k] += h;
        pm[k] -= h;
        mp.set_params_from(pp);
        mm.set_params_from(pm);
        const double fd = (loss_value(mp) - loss_value(mm)) / (2 * h);
        // find the tape grad for flat index k by walking the bind params
        double got = 0.0;
        std::size_t off = 0;
        for (ad::NodeId pid : bind.params) {
            const Tensor& pv = g.value(pid);
            if (k < off + pv.size()) {
                got = g.grad(pid).data[k - off];
                break;
            }
            off += pv.size();
        }
        CHECK(std::abs(got - fd) <= 1e-4 * std::max(0.01, std::abs(fd)));
    }
}

TEST_CASE("conditioning features enter the forward pass") {
    ModelConfig cfg = small_cfg(2);
    cfg.cond_dim = 3;
    VectorFieldModel m(cfg);
    m.init(9);
    auto ws = m.make_workspace();
    double x[2] = {0.1, -0.4};
    double c1[3] = {1.0, 0.0, 2.0};
    double c2[3] = {1.0, 0.5, 2.0};
    double v1[2], v2[2];
    m.velocity(0.5, x, v1, ws, c1);
    m.velocity(0.5, x, v2, ws, c2);
    CHECK((v1[0] != v2[0] || v1[1] != v2[1]));
    CHECK_THROWS_AS(m.velocity(0.5, x, v1, ws, nullptr), ShapeError);
    ad::Graph g;
    Tensor xb(1, 2);
    std::vector<double> ts = {0.5};
    CHECK_THROWS_AS(m.build_graph(g, xb, ts, nullptr), ShapeError);
}

TEST_CASE("EMA shadow follows its recurrence and validates decay") {
    VectorFieldModel m(small_cfg(1));
    m.init(2);
    CHECK_THROWS_AS(EmaShadow(m, -0.1), ConfigError);
    CHECK_THROWS_AS(EmaShadow(m, 1.5), ConfigError);

    EmaShadow freeze(m, 1.0);
    std::vector<double> before = freeze.shadow();
    VectorFieldModel m2 = m;
    m2.init(3);
    freeze.update(m2);
    CHECK(freeze.shadow() == before);

    EmaShadow track(m, 0.0);
    track.update(m2);
    CHECK(track.shadow() == m2.params());

    EmaShadow ema(m, 0.75);
    ema.update(m2);
    std::vector<double> p0 = m.params(), p1 = m2.params();
    for (std::size_t i = 0; i < p0.size(); ++i)
        CHECK(ema.shadow()[i] == Catch::Approx(0.75 * p0[i] + 0.25 * p1[i]).epsilon(1e-15));
}

TEST_CASE("checkpoint round-trips parameters, EMA and trainer state exactly") {
    VectorFieldModel m(small_cfg(3, ad::Act::Silu));
    m.init(123);
    EmaShadow ema(m, 0.9);
    VectorFieldModel m2 = m;
    m2.init(124);
    ema.update(m2);

    TrainerState ts;
    ts.step = 420;
    ts.adam_t = 420;
    ts.adam_m.assign(m.param_count(), 0.5);
    ts.adam_v.assign(m.param_count(), 0.25);
    Rng rng(9);
    for (auto& v : ts.adam_m) v = rng.normal();
    for (auto& v : ts.adam_v) v = std::abs(rng.normal());

    nlohmann::json meta;
    meta["path_family"] = "vp";
    meta["seed"] = 77;
    meta["config_hash"] = "deadbeef";
    const auto file = temp_file("fdm_ck_test.bin");
    save_checkpoint(file.string(), m, meta, &ema, &ts);

    Checkpoint ck = load_checkpoint(file.string());
    CHECK(ck.params == m.params());
    CHECK(ck.has_ema);
    CHECK(ck.ema == ema.shadow());
    CHECK(ck.has_trainer);
    CHECK(ck.trainer.step == 420);
    CHECK(ck.trainer.adam_m == ts.adam_m);
    CHECK(ck.trainer.adam_v == ts.adam_v);
    CHECK(ck.meta.at("path_family") == "vp");
    CHECK(ck.meta.at("seed") == 77);
    CHECK(ck.meta.at("activation") == "silu");

    VectorFieldModel restored = ck.to_model();
    CHECK(restored.params() == m.params());
    VectorFieldModel from_ema = ck.to_model(true);
    CHECK(from_ema.params() == ema.shadow());
    std::filesystem::remove(file);
}

TEST_CASE("checkpoint loader rejects garbage") {
    const auto file = temp_file("fdm_ck_garbage.bin");
    {
        std::ofstream os(file, std::ios::binary);
        os << "NOPE this is not a checkpoint";
    }
    CHECK_THROWS_AS(load_checkpoint(file.string()), DataError);
    {
        std::ofstream os(file, std::ios::binary);
        os << "FDM1";  // magic then EOF
    }
    CHECK_THROWS_AS(load_checkpoint(file.string()), DataError);
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/dir/x.bin"), IoError);
    std::filesystem::remove(file);
}

TEST_CASE("init is deterministic in the seed") {
    VectorFieldModel a(small_cfg(2)), b(small_cfg(2));
    a.init(55);
    b.init(55);
    CHECK(a.params() == b.params());
    b.init(56);
    CHECK(a.params() != b.params());
}
