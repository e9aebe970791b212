// Deterministic drift-stage tests: Gaussian-path drift oracles, hand-computed
// loss values, finite-difference gradient checks of both objectives, coupling
// behavior, small-scale training, sampler identities, and checkpoint round
// trips.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mf/checkpoint.hpp"
#include "mf/derode.hpp"
#include "mf/nn.hpp"
#include "mf/rng.hpp"
#include "mf/synth.hpp"
#include "mf/tensor.hpp"

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

using namespace mf;

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("mf_derode_test_" + std::to_string(::getpid()));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

double rel_diff(double a, double b) {
    return std::abs(a - b) / std::max({1e-3, std::abs(a), std::abs(b)});
}

// A drift net that is a pure affine map of z (no time features), so its
// behavior is fully hand-computable: v(z) = W z + b.
derode::DriftModel<double> affine_model(const Tensor<double>& W, const std::vector<double>& b) {
    derode::DriftModel<double> m;
    m.dim = W.shape[0];
    m.spec.input_dim = m.dim;
    m.spec.output_dim = m.dim;
    m.spec.hidden = {};
    m.spec.time_embed_dim = 0;
    m.spec.label_embed_dim = 0;
    m.params.W.push_back(W);
    m.params.b.push_back(Tensor<double>({m.dim}, std::vector<double>(b)));
    m.mean.assign(static_cast<size_t>(m.dim), 0.0);
    m.std.assign(static_cast<size_t>(m.dim), 1.0);
    return m;
}

}  // namespace

// ------------------------------------------------------------ path drifts

TEST_CASE("linear path drift is the endpoint difference everywhere") {
    derode::GaussianPath p = derode::linear_path({2.0}, {1.0});
    for (double t : {0.0, 0.25, 0.9, 1.0}) {
        std::vector<double> mu = p.mu(t);
        std::vector<double> u = derode::drift_from_path(p, mu, t);
        CHECK(u[0] == doctest::Approx(-1.0).epsilon(1e-12));
    }
    CHECK(p.mu(0.0)[0] == doctest::Approx(2.0));
    CHECK(p.mu(1.0)[0] == doctest::Approx(1.0));
    CHECK_THROWS_AS(derode::linear_path({1.0}, {1.0, 2.0}), std::invalid_argument);
}

TEST_CASE("drift hand case on a widening Gaussian path") {
    // mu(t) = (1-t) a with a = 2, sigma(t) = t:
    // u(z, t) = (z - (1-t) a) / t - a.  At z = 3, t = 0.5: 4 - 2 = 2.
    derode::GaussianPath p;
    p.mu = [](double t) { return std::vector<double>{(1.0 - t) * 2.0}; };
    p.mu_dot = [](double) { return std::vector<double>{-2.0}; };
    p.sigma = [](double t) { return t; };
    p.sigma_dot = [](double) { return 1.0; };
    std::vector<double> u = derode::drift_from_path(p, {3.0}, 0.5);
    CHECK(u[0] == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("path drift transports pathwise samples: d/dt (mu + sigma eps)") {
    // For z = mu(t) + sigma(t) eps the transporting drift must equal
    // mu'(t) + sigma'(t) eps exactly.
    derode::GaussianPath p;
    p.mu = [](double t) { return std::vector<double>{std::sin(t), t * t}; };
    p.mu_dot = [](double t) { return std::vector<double>{std::cos(t), 2.0 * t}; };
    p.sigma = [](double t) { return 0.3 + 0.5 * t; };
    p.sigma_dot = [](double) { return 0.5; };
    RngStream rng(3);
    for (int rep = 0; rep < 10; ++rep) {
        double t = rng.uniform01();
        std::vector<double> eps{rng.normal(), rng.normal()};
        std::vector<double> mu = p.mu(t);
        std::vector<double> z{mu[0] + p.sigma(t) * eps[0], mu[1] + p.sigma(t) * eps[1]};
        std::vector<double> u = derode::drift_from_path(p, z, t);
        std::vector<double> md = p.mu_dot(t);
        CHECK(u[0] == doctest::Approx(md[0] + 0.5 * eps[0]).epsilon(1e-12));
        CHECK(u[1] == doctest::Approx(md[1] + 0.5 * eps[1]).epsilon(1e-12));
    }
}

TEST_CASE("degenerate path: off-mean queries are rejected, on-mean allowed") {
    derode::GaussianPath p = derode::linear_path({0.0, 0.0}, {1.0, 1.0});
    CHECK_THROWS_AS(derode::drift_from_path(p, {0.5, 0.9}, 0.5), std::domain_error);
    CHECK_NOTHROW(derode::drift_from_path(p, {0.5, 0.5}, 0.5));
    derode::GaussianPath neg = p;
    neg.sigma = [](double) { return -1.0; };
    CHECK_THROWS_AS(derode::drift_from_path(neg, {0.5, 0.5}, 0.5), std::domain_error);
    CHECK_THROWS_AS(derode::drift_from_path(p, {0.5}, 0.5), std::invalid_argument);
}

TEST_CASE("path samples interpolate linearly with the endpoint-difference target") {
    derode::PathSample s = derode::make_path_sample({1.0, -2.0}, {3.0, 4.0}, 0.25);
    CHECK(s.z_t[0] == doctest::Approx(0.75 * 1.0 + 0.25 * 3.0).epsilon(1e-12));
    CHECK(s.z_t[1] == doctest::Approx(0.75 * -2.0 + 0.25 * 4.0).epsilon(1e-12));
    CHECK(s.target_drift[0] == doctest::Approx(2.0));
    CHECK(s.target_drift[1] == doctest::Approx(6.0));
    derode::PathSample a = derode::make_path_sample({1.0}, {5.0}, 0.0);
    CHECK(a.z_t[0] == 1.0);
    derode::PathSample b = derode::make_path_sample({1.0}, {5.0}, 1.0);
    CHECK(b.z_t[0] == 5.0);
    CHECK_THROWS_AS(derode::make_path_sample({1.0}, {5.0}, -0.1), std::invalid_argument);
    CHECK_THROWS_AS(derode::make_path_sample({1.0}, {5.0}, 1.1), std::invalid_argument);
    CHECK_THROWS_AS(derode::make_path_sample({1.0, 2.0}, {5.0}, 0.5), std::invalid_argument);

    RngStream rng(4);
    derode::PathSample r = derode::make_path_sample({0.0}, {1.0}, rng);
    CHECK(r.t >= 0.0);
    CHECK(r.t <= 1.0);
    CHECK(r.z_t[0] == doctest::Approx(r.t).epsilon(1e-12));
}

// ------------------------------------------------------------------ losses

TEST_CASE("drift loss hand case: constant net against fixed targets") {
    // Single affine layer with W = 0, b = c gives v = c everywhere; the loss
    // is then mean ||c - (z1 - z0)||^2 independent of t.
    Tensor<double> W({2, 2});
    derode::DriftModel<double> m = affine_model(W, {1.0, 0.0});
    Tensor<double> z0({2, 2}, {0, 0, 1, 1});
    Tensor<double> z1({2, 2}, {2, 0, 1, 3});
    // targets: (2,0) and (0,2); residuals: (-1,0) and (1,-2)
    double want = ((1.0 + 0.0) + (1.0 + 4.0)) / 2.0;
    derode::LossResult<double> r = derode::loss_drift(
        m.spec, m.params, z0, z1, {}, std::vector<double>{0.3, 0.8}, false);
    CHECK(r.value == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("drift loss hand case: identity net sees the interpolant") {
    // v(z) = z, so the residual is z_t - (z1 - z0), fully hand-computable.
    Tensor<double> W({1, 1}, {1.0});
    derode::DriftModel<double> m = affine_model(W, {0.0});
    Tensor<double> z0({1, 1}, {2.0});
    Tensor<double> z1({1, 1}, {6.0});
    double t = 0.25;  // z_t = 3, target 4, residual -1
    derode::LossResult<double> r =
        derode::loss_drift(m.spec, m.params, z0, z1, {}, std::vector<double>{t}, false);
    CHECK(r.value == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("consistency loss vanishes for equal times and for constant nets") {
    Tensor<double> W({2, 2});
    derode::DriftModel<double> constant = affine_model(W, {0.7, -0.2});
    RngStream rng(7);
    Tensor<double> z0 = gaussian_sample<double>(rng, {4, 2});
    Tensor<double> z1 = gaussian_sample<double>(rng, {4, 2});
    std::vector<double> ta{0.1, 0.4, 0.6, 0.9};
    std::vector<double> tb{0.8, 0.2, 0.5, 0.3};
    derode::LossResult<double> same = derode::loss_consistency(
        constant.spec, constant.params, z0, z1, {}, ta, ta, true);
    CHECK(same.value == 0.0);
    for (const auto& g : same.grads)
        for (double v : g.data) CHECK(v == 0.0);
    derode::LossResult<double> diff = derode::loss_consistency(
        constant.spec, constant.params, z0, z1, {}, ta, tb, false);
    CHECK(diff.value == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("consistency loss hand case on an identity net") {
    // v(z) = z, so v(z_a) - v(z_b) = (t_a - t_b)(z1 - z0).
    Tensor<double> W({1, 1}, {1.0});
    derode::DriftModel<double> m = affine_model(W, {0.0});
    Tensor<double> z0({1, 1}, {1.0});
    Tensor<double> z1({1, 1}, {4.0});
    derode::LossResult<double> r = derode::loss_consistency(
        m.spec, m.params, z0, z1, {}, std::vector<double>{0.9}, std::vector<double>{0.4}, false);
    CHECK(r.value == doctest::Approx(0.25 * 9.0).epsilon(1e-12));  // (0.5 * 3)^2
}

TEST_CASE("total loss is drift + lambda * consistency with additive gradients") {
    RngStream rng(11);
    derode::DeroDeTrainConfig cfg;
    cfg.hidden = {8};
    cfg.time_embed_dim = 4;
    cfg.act = nn::Act::tanh;
    RngStream init = rng.child("init", 0);
    derode::DriftModel<double> m = derode::init_drift_model<double>(3, false, 0, cfg, init);
    Tensor<double> z0 = gaussian_sample<double>(rng, {5, 3});
    Tensor<double> z1 = gaussian_sample<double>(rng, {5, 3});
    std::vector<double> td{0.1, 0.3, 0.5, 0.7, 0.9};
    std::vector<double> ta{0.2, 0.4, 0.6, 0.8, 0.95};
    std::vector<double> tb{0.15, 0.35, 0.55, 0.75, 0.85};
    double lam = 0.3;

    Tensor<double> z0T = z0, z1T = z1;
    derode::TotalLoss<double> tot = derode::loss_total_at(
        m.spec, m.params, z0T, z1T, {}, lam, td, ta, tb, true);
    derode::LossResult<double> jd =
        derode::loss_drift(m.spec, m.params, z0T, z1T, {}, td, true);
    derode::LossResult<double> jc =
        derode::loss_consistency(m.spec, m.params, z0T, z1T, {}, ta, tb, true);
    CHECK(tot.drift == doctest::Approx(jd.value).epsilon(1e-12));
    CHECK(tot.consistency == doctest::Approx(jc.value).epsilon(1e-12));
    CHECK(tot.total == doctest::Approx(jd.value + lam * jc.value).epsilon(1e-12));
    REQUIRE(tot.grads.size() == jd.grads.size());
    for (size_t k = 0; k < tot.grads.size(); ++k)
        for (int64_t i = 0; i < tot.grads[k].numel(); ++i)
            CHECK(tot.grads[k](i) ==
                  doctest::Approx(jd.grads[k](i) + lam * jc.grads[k](i)).epsilon(1e-10));

    // lambda = 0 drops the consistency gradient but keeps the diagnostic value
    derode::TotalLoss<double> bare = derode::loss_total_at(
        m.spec, m.params, z0T, z1T, {}, 0.0, td, ta, tb, true);
    CHECK(bare.total == doctest::Approx(bare.drift).epsilon(1e-12));
    CHECK(bare.consistency == doctest::Approx(jc.value).epsilon(1e-12));
    for (size_t k = 0; k < bare.grads.size(); ++k)
        for (int64_t i = 0; i < bare.grads[k].numel(); ++i)
            CHECK(bare.grads[k](i) == doctest::Approx(jd.grads[k](i)).epsilon(1e-12));
}

TEST_CASE("both objectives pass a finite-difference gradient check") {
    RngStream rng(13);
    derode::DeroDeTrainConfig cfg;
    cfg.hidden = {6};
    cfg.time_embed_dim = 4;
    cfg.label_embed_dim = 3;
    cfg.act = nn::Act::tanh;
    RngStream init = rng.child("init", 0);
    derode::DriftModel<double> m = derode::init_drift_model<double>(2, true, 2, cfg, init);
    Tensor<double> z0 = gaussian_sample<double>(rng, {4, 2});
    Tensor<double> z1 = gaussian_sample<double>(rng, {4, 2});
    std::vector<int32_t> labels{0, 1, 1, 0};
    std::vector<double> td{0.2, 0.45, 0.6, 0.85};
    std::vector<double> ta{0.1, 0.5, 0.7, 0.9};
    std::vector<double> tb{0.3, 0.25, 0.65, 0.4};

    const double h = 1e-6;
    std::vector<Tensor<double>> flat = nn::params_to_vector(m.params);

    auto value_at = [&](const std::vector<Tensor<double>>& p, int which) {
        nn::MlpParams<double> params = nn::params_from_vector(m.spec, p);
        if (which == 0)
            return derode::loss_drift(m.spec, params, z0, z1, labels, td, false).value;
        return derode::loss_consistency(m.spec, params, z0, z1, labels, ta, tb, false).value;
    };

    for (int which = 0; which < 2; ++which) {
        std::vector<Tensor<double>> grads =
            which == 0 ? derode::loss_drift(m.spec, m.params, z0, z1, labels, td, true).grads
                       : derode::loss_consistency(m.spec, m.params, z0, z1, labels, ta, tb, true)
                             .grads;
        REQUIRE(grads.size() == flat.size());
        double worst = 0.0;
        for (size_t k = 0; k < flat.size(); ++k) {
            for (int64_t i = 0; i < flat[k].numel(); ++i) {
                std::vector<Tensor<double>> p = flat;
                double keep = p[k](i);
                p[k](i) = keep + h;
                double up = value_at(p, which);
                p[k](i) = keep - h;
                double dn = value_at(p, which);
                worst = std::max(worst, rel_diff(grads[k](i), (up - dn) / (2 * h)));
            }
        }
        CHECK(worst < 1e-5);
    }
}

TEST_CASE("loss input validation") {
    Tensor<double> W({1, 1}, {1.0});
    derode::DriftModel<double> m = affine_model(W, {0.0});
    Tensor<double> z0({2, 1});
    Tensor<double> z1({3, 1});
    CHECK_THROWS_AS(derode::loss_drift(m.spec, m.params, z0, z1, {}, {0.5, 0.5}, false),
                    std::invalid_argument);
    Tensor<double> ok({2, 1});
    CHECK_THROWS_AS(derode::loss_drift(m.spec, m.params, z0, ok, {}, {0.5}, false),
                    std::invalid_argument);
}

// ---------------------------------------------------------------- coupling

TEST_CASE("independent coupling passes the batch through with the naive cost") {
    RngStream rng(17);
    Tensor<double> z0 = gaussian_sample<double>(rng, {6, 3});
    RngStream c1 = rng.child("couple", 0);
    derode::CoupledBatch<double> cb =
        derode::couple_batch<double>(z0, {}, "independent", 100, c1);
    for (int64_t i = 0; i < z0.numel(); ++i) CHECK(cb.z0(i) == z0(i));
    double want = 0.0;
    for (int64_t i = 0; i < 6; ++i)
        for (int64_t j = 0; j < 3; ++j) {
            double d = z0(i, j) - cb.z1(i, j);
            want += d * d;
        }
    CHECK(cb.cost == doctest::Approx(want / 6.0).epsilon(1e-12));
    CHECK(cb.fallbacks == 0);
}

TEST_CASE("transport coupling never costs more than independent pairing") {
    RngStream rng(18);
    int strictly_lower = 0;
    for (int rep = 0; rep < 10; ++rep) {
        RngStream data = rng.child("data", static_cast<uint64_t>(rep));
        Tensor<double> z0 = gaussian_sample<double>(rng, {12, 2});
        RngStream ra = data.child("draw", 0);
        RngStream rb = data.child("draw", 0);  // identical Gaussian batch
        derode::CoupledBatch<double> ind =
            derode::couple_batch<double>(z0, {}, "independent", 2000, ra);
        derode::CoupledBatch<double> otc =
            derode::couple_batch<double>(z0, {}, "ot", 2000, rb);
        CHECK(otc.cost <= ind.cost + 1e-9);
        if (otc.cost < ind.cost - 1e-9) ++strictly_lower;
        // the coupled batch is a permutation pairing of the same points
        std::vector<double> a(z0.data.begin(), z0.data.end());
        std::vector<double> b(otc.z0.data.begin(), otc.z0.data.end());
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]));
    }
    CHECK(strictly_lower >= 8);  // random batches are in general position
}

TEST_CASE("conditional coupling keeps labels attached within class blocks") {
    RngStream rng(19);
    // two well-separated classes so any cross-class pairing would be visible
    Tensor<double> z0({8, 2});
    std::vector<int32_t> labels(8);
    for (int64_t i = 0; i < 8; ++i) {
        double base = (i < 4) ? -5.0 : 5.0;
        z0(i, 0) = base + 0.1 * double(i);
        z0(i, 1) = base;
        labels[static_cast<size_t>(i)] = (i < 4) ? 0 : 1;
    }
    RngStream c = rng.child("couple", 0);
    derode::CoupledBatch<double> cb = derode::couple_batch<double>(z0, labels, "ot", 2000, c);
    REQUIRE(cb.labels.size() == 8);
    int count0 = 0;
    for (int64_t i = 0; i < 8; ++i) {
        int32_t l = cb.labels[static_cast<size_t>(i)];
        if (l == 0) ++count0;
        // the data row attached to this label must come from that class block
        bool found = false;
        for (int64_t s = 0; s < 8; ++s)
            if (labels[static_cast<size_t>(s)] == l && cb.z0(i, 0) == z0(s, 0) &&
                cb.z0(i, 1) == z0(s, 1))
                found = true;
        CHECK(found);
    }
    CHECK(count0 == 4);
}

// ---------------------------------------------------------------- training

TEST_CASE("a few epochs of coupled training reduce the drift objective") {
    RngStream data_rng(23);
    synth::ToySet toy = synth::toy2d("eight-gaussians", 64, data_rng);
    derode::LatentSet data;
    data.points = toy.points;
    data.labels = toy.labels;

    derode::DeroDeTrainConfig cfg;
    cfg.batch = 32;
    cfg.epochs = 12;
    cfg.lr = 5e-3;
    cfg.hidden = {16, 16};
    cfg.time_embed_dim = 8;
    cfg.label_embed_dim = 4;
    cfg.lambda_cl = 0.3;
    RngStream rng(24);
    derode::DeroDeTrainResult<double> res = derode::train_derode<double>(data, cfg, rng);
    CHECK_FALSE(res.aborted);
    REQUIRE(res.log.size() == 12);
    CHECK(res.log.back().j_drift < res.log.front().j_drift);
    CHECK(res.log.back().total < res.log.front().total);
    for (const auto& lg : res.log) CHECK(lg.coupling_cost >= 0.0);

    // standardization captured the data statistics
    for (int64_t j = 0; j < 2; ++j) {
        double s = 0, sq = 0;
        for (int64_t i = 0; i < 64; ++i) {
            s += data.points(i, j);
            sq += data.points(i, j) * data.points(i, j);
        }
        double mean = s / 64.0;
        double var = sq / 64.0 - mean * mean;
        CHECK(res.model.mean[static_cast<size_t>(j)] == doctest::Approx(mean).epsilon(1e-9));
        CHECK(res.model.std[static_cast<size_t>(j)] ==
              doctest::Approx(std::sqrt(var)).epsilon(1e-9));
    }
    CHECK(res.model.conditional);
    CHECK_THROWS_AS(derode::train_derode<double>(derode::LatentSet{}, cfg, rng),
                    std::invalid_argument);
}

// ---------------------------------------------------------------- sampling

TEST_CASE("a cheating net that outputs z - a lands one-step samples on a") {
    // v(z) = z - a  =>  z - v(z, 1) = a for every z.
    Tensor<double> W({2, 2}, {1, 0, 0, 1});
    std::vector<double> a{0.7, -1.3};
    derode::DriftModel<double> m = affine_model(W, {-a[0], -a[1]});
    RngStream rng(29);
    Tensor<double> z1 = gaussian_sample<double>(rng, {5, 2});
    Tensor<double> out = derode::sample_one_step(m, z1, {});
    for (int64_t i = 0; i < 5; ++i) {
        CHECK(out(i, 0) == doctest::Approx(a[0]).epsilon(1e-12));
        CHECK(out(i, 1) == doctest::Approx(a[1]).epsilon(1e-12));
    }
}

TEST_CASE("steps=1 integration reproduces the one-step sampler bit for bit") {
    RngStream rng(31);
    derode::DeroDeTrainConfig cfg;
    cfg.hidden = {8};
    cfg.time_embed_dim = 4;
    RngStream init = rng.child("init", 0);
    derode::DriftModel<double> m = derode::init_drift_model<double>(3, false, 0, cfg, init);
    m.mean = {0.5, -0.2, 0.0};
    m.std = {2.0, 1.0, 0.3};
    Tensor<double> z1 = gaussian_sample<double>(rng, {6, 3});
    Tensor<double> a = derode::sample_one_step(m, z1, {});
    Tensor<double> b = derode::sample_ode_multistep(m, z1, {}, 1);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a(i) == b(i));
    CHECK_THROWS_AS(derode::sample_ode_multistep(m, z1, {}, 0), std::invalid_argument);
}

TEST_CASE("multi-step Euler follows the hand recurrence for an affine field") {
    // dz = -(z - a) dt from z(1) with 4 equal steps: z <- z - dt (z - a).
    Tensor<double> W({1, 1}, {1.0});
    derode::DriftModel<double> m = affine_model(W, {-2.0});  // v(z) = z - 2
    Tensor<double> z1({3, 1}, {0.0, 1.0, 5.0});
    Tensor<double> got = derode::sample_ode_multistep(m, z1, {}, 4);
    for (int64_t i = 0; i < 3; ++i) {
        double z = z1(i, 0);
        for (int k = 0; k < 4; ++k) z = z - 0.25 * (z - 2.0);
        CHECK(got(i, 0) == doctest::Approx(z).epsilon(1e-12));
    }
}

TEST_CASE("standardize and destandardize are inverse maps") {
    Tensor<double> W({2, 2}, {1, 0, 0, 1});
    derode::DriftModel<double> m = affine_model(W, {0.0, 0.0});
    m.mean = {1.5, -0.7};
    m.std = {2.0, 0.4};
    RngStream rng(37);
    Tensor<double> x = gaussian_sample<double>(rng, {5, 2});
    Tensor<double> s = derode::standardize(m, x);
    Tensor<double> back = derode::destandardize(m, s);
    for (int64_t i = 0; i < x.numel(); ++i)
        CHECK(back(i) == doctest::Approx(x(i)).epsilon(1e-12));
    CHECK(s(0, 0) == doctest::Approx((x(0, 0) - 1.5) / 2.0).epsilon(1e-12));
}

// ------------------------------------------------------------- persistence

TEST_CASE("drift checkpoint round trip preserves the model bit for bit") {
    TempDir tmp;
    RngStream rng(41);
    derode::DeroDeTrainConfig cfg;
    cfg.hidden = {8, 8};
    cfg.time_embed_dim = 4;
    cfg.label_embed_dim = 3;
    RngStream init = rng.child("init", 0);
    derode::DriftModel<double> m = derode::init_drift_model<double>(4, true, 3, cfg, init);
    m.mean = {0.1, 0.2, 0.3, 0.4};
    m.std = {1.0, 2.0, 3.0, 4.0};

    io::Archive ar;
    derode::drift_to_archive(m, ar);
    ar.save(tmp.file("drift.dsdf"));
    derode::DriftModel<double> back =
        derode::drift_from_archive<double>(io::Archive::load(tmp.file("drift.dsdf")));
    CHECK(back.spec.to_json() == m.spec.to_json());
    CHECK(back.conditional == m.conditional);
    CHECK(back.dim == m.dim);
    CHECK(back.mean == m.mean);
    CHECK(back.std == m.std);
    for (size_t l = 0; l < m.params.W.size(); ++l)
        for (int64_t i = 0; i < m.params.W[l].numel(); ++i)
            CHECK(back.params.W[l](i) == m.params.W[l](i));
    for (int64_t i = 0; i < m.params.label_embed.numel(); ++i)
        CHECK(back.params.label_embed(i) == m.params.label_embed(i));

    RngStream zr(42);
    Tensor<double> z1 = gaussian_sample<double>(zr, {4, 4});
    std::vector<int32_t> labels{0, 1, 2, 0};
    Tensor<double> a = derode::sample_one_step(m, z1, labels);
    Tensor<double> b = derode::sample_one_step(back, z1, labels);
    for (int64_t i = 0; i < a.numel(); ++i) CHECK(a(i) == b(i));

    io::Archive wrong;
    wrong.meta["kind"] = "vq";
    CHECK_THROWS_AS(derode::drift_from_archive<double>(wrong), std::runtime_error);
}

TEST_CASE("train config json round trip and validation") {
    derode::DeroDeTrainConfig cfg;
    cfg.lambda_cl = 0.15;
    cfg.batch = 77;
    cfg.coupling = "independent";
    cfg.hidden = {5, 7};
    cfg.act = nn::Act::relu;
    derode::DeroDeTrainConfig back = derode::DeroDeTrainConfig::from_json(cfg.to_json());
    CHECK(back.to_json() == cfg.to_json());

    derode::DeroDeTrainConfig bad;
    bad.lambda_cl = -0.1;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad.lambda_cl = 0.3;
    bad.coupling = "sinkhorn";
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad.coupling = "ot";
    bad.batch = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
