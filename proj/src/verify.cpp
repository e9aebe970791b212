#include "mf/verify.hpp"

#include "mf/divsde.hpp"
#include "mf/metrics.hpp"
#include "mf/nn.hpp"
#include "mf/ot.hpp"
#include "mf/rng.hpp"
#include "mf/tensor.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>

namespace mf::verify {

json CheckResult::to_json() const {
    return json{{"name", name},
                {"passed", passed},
                {"measured", measured},
                {"tolerance", tolerance},
                {"note", note}};
}

bool SuiteResult::passed() const {
    return std::all_of(checks.begin(), checks.end(),
                       [](const CheckResult& c) { return c.passed; });
}

json SuiteResult::to_json() const {
    json arr = json::array();
    for (const auto& c : checks) arr.push_back(c.to_json());
    return json{{"suite", suite},
                {"passed", passed()},
                {"wall_seconds", wall_seconds},
                {"checks", arr}};
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Exhaustive assignment optimum by dynamic programming over column subsets:
// dp[mask] covers rows 0..popcount(mask)-1 against the column set `mask`.
// Independent of the augmenting-path solver used by the library.
double assignment_dp(const Tensor<double>& C) {
    int n = static_cast<int>(C.shape[0]);
    size_t full = size_t{1} << n;
    std::vector<double> dp(full, std::numeric_limits<double>::infinity());
    dp[0] = 0.0;
    for (size_t mask = 1; mask < full; ++mask) {
        int row = std::popcount(mask) - 1;
        double best = std::numeric_limits<double>::infinity();
        for (int j = 0; j < n; ++j) {
            if (!(mask >> j & 1)) continue;
            double cand = dp[mask ^ (size_t{1} << j)] + C(row, j);
            best = std::min(best, cand);
        }
        dp[mask] = best;
    }
    return dp[full - 1];
}

}  // namespace

SuiteResult verify_ot(uint64_t seed) {
    auto t0 = Clock::now();
    SuiteResult suite;
    suite.suite = "ot";

    RngStream rng(seed);
    const int instances = 200;
    const double scales[] = {0.3, 1.0, 3.0};
    double worst_gap = 0.0;
    int invalid = 0, fallbacks = 0;
    std::string worst_note = "none";

    for (int it = 0; it < instances; ++it) {
        RngStream irng = rng.child("instance", static_cast<uint64_t>(it));
        int64_t n = 1 + static_cast<int64_t>(irng.uniform_int(16));
        int64_t d = 1 + static_cast<int64_t>(irng.uniform_int(8));
        double scale = scales[it % 3];
        Tensor<double> z0({n, d}), z1({n, d});
        for (auto& v : z0.data) v = scale * irng.normal();
        for (auto& v : z1.data) v = scale * irng.normal();
        // every fourth instance: shift one cloud to stress tie structure
        if (it % 4 == 0)
            for (auto& v : z1.data) v += scale;

        ot::TransportPlan plan = ot::solve_coupling(z0, z1);
        if (plan.used_fallback) ++fallbacks;

        // permutation validity: rows listed once each, columns all distinct
        std::vector<char> col_seen(static_cast<size_t>(n), 0);
        bool valid = static_cast<int64_t>(plan.pairs.size()) == n;
        for (int64_t i = 0; valid && i < n; ++i) {
            auto [r, c] = plan.pairs[static_cast<size_t>(i)];
            if (r != i || c < 0 || c >= n || col_seen[static_cast<size_t>(c)]) valid = false;
            else col_seen[static_cast<size_t>(c)] = 1;
        }
        if (!valid) ++invalid;

        Tensor<double> C = ot::build_cost_matrix(z0, z1);
        double opt = assignment_dp(C) / double(n);
        double gap = std::abs(plan.cost - opt);
        if (gap > worst_gap) {
            worst_gap = gap;
            std::ostringstream os;
            os << "instance " << it << " (n=" << n << ", d=" << d << ")";
            worst_note = os.str();
        }
    }

    {
        CheckResult c;
        c.name = "plan cost matches exhaustive-DP optimum";
        c.measured = worst_gap;
        c.tolerance = 1e-6;
        c.passed = worst_gap <= c.tolerance;
        c.note = "200 instances, worst gap at " + worst_note + ", " +
                 std::to_string(fallbacks) + " exact-solver fallbacks";
        suite.checks.push_back(c);
    }
    {
        CheckResult c;
        c.name = "plan is always a valid permutation";
        c.measured = double(invalid);
        c.tolerance = 0.0;
        c.passed = invalid == 0;
        c.note = std::to_string(invalid) + " invalid plans out of 200";
        suite.checks.push_back(c);
    }
    suite.wall_seconds = seconds_since(t0);
    {
        CheckResult c;
        c.name = "runtime under budget";
        c.measured = suite.wall_seconds;
        c.tolerance = 10.0;
        c.passed = suite.wall_seconds < c.tolerance;
        c.note = "seconds for all 200 instances including the DP oracle";
        suite.checks.push_back(c);
    }
    return suite;
}

SuiteResult verify_gradients(uint64_t seed) {
    auto t0 = Clock::now();
    SuiteResult suite;
    suite.suite = "gradients";

    RngStream rng(seed);
    const double h = 1e-5;
    // Relative error floor: central differences cannot resolve below the
    // roundoff floor ~1e-10, so gradients under 1e-5 are compared absolutely.
    const double denom_floor = 1e-5;
    double max_rel = 0.0;
    std::string worst = "none";
    const nn::Act acts[] = {nn::Act::relu, nn::Act::silu, nn::Act::tanh};

    for (int cfg_i = 0; cfg_i < 20; ++cfg_i) {
        RngStream crng = rng.child("config", static_cast<uint64_t>(cfg_i));
        nn::MlpSpec spec;
        spec.input_dim = 1 + static_cast<int64_t>(crng.uniform_int(5));
        int64_t layers = static_cast<int64_t>(crng.uniform_int(3));
        for (int64_t l = 0; l < layers; ++l)
            spec.hidden.push_back(2 + static_cast<int64_t>(crng.uniform_int(6)));
        spec.output_dim = 1 + static_cast<int64_t>(crng.uniform_int(4));
        spec.act = acts[cfg_i % 3];
        spec.time_embed_dim = (cfg_i % 2 == 0) ? 4 : 0;
        if (cfg_i % 3 == 0) {
            spec.label_embed_dim = 3;
            spec.num_labels = 2 + static_cast<int64_t>(crng.uniform_int(3));
        }
        spec.validate();
        nn::MlpParams<double> params = nn::init_mlp<double>(spec, crng);

        int64_t B = 2 + static_cast<int64_t>(crng.uniform_int(3));
        std::vector<double> tv;
        std::vector<int32_t> lv;
        if (spec.time_embed_dim > 0)
            for (int64_t i = 0; i < B; ++i) tv.push_back(crng.uniform01());
        if (spec.label_embed_dim > 0)
            for (int64_t i = 0; i < B; ++i)
                lv.push_back(static_cast<int32_t>(crng.uniform_int(
                    static_cast<uint64_t>(spec.num_labels))));

        auto loss_of = [&](const nn::MlpParams<double>& p, const Tensor<double>& xin) {
            Tensor<double> out = nn::mlp_forward(spec, p, xin, tv, lv);
            double L = 0.0;
            for (double v : out.data) L += 0.5 * v * v;
            return L;
        };

        // Redraw inputs that park a relu pre-activation on the kink, where a
        // central difference straddles the non-differentiable point.
        Tensor<double> x({B, spec.input_dim});
        nn::MlpCache<double> cache;
        Tensor<double> out;
        for (int attempt = 0; attempt < 50; ++attempt) {
            for (auto& v : x.data) v = crng.normal();
            out = nn::mlp_forward_cached(spec, params, x, tv, lv, cache);
            if (spec.act != nn::Act::relu) break;
            double closest = std::numeric_limits<double>::infinity();
            for (const auto& pre : cache.pre)
                for (double p : pre.data) closest = std::min(closest, std::abs(p));
            if (closest > 10.0 * h) break;
        }

        nn::MlpBackward<double> bw = nn::mlp_backward(spec, params, cache, out);
        std::vector<Tensor<double>> slots = nn::params_to_vector(params);
        std::vector<Tensor<double>> gslots = nn::params_to_vector(bw.grads);

        auto record = [&](double analytic, double fd, const char* what, int64_t idx) {
            double rel = std::abs(analytic - fd) /
                         std::max({denom_floor, std::abs(analytic), std::abs(fd)});
            if (rel > max_rel) {
                max_rel = rel;
                std::ostringstream os;
                os << "config " << cfg_i << " " << what << "[" << idx << "]";
                worst = os.str();
            }
        };

        for (size_t s = 0; s < slots.size(); ++s) {
            for (int64_t e = 0; e < slots[s].numel(); ++e) {
                std::vector<Tensor<double>> pert = slots;
                pert[s](e) = slots[s](e) + h;
                double Lp = loss_of(nn::params_from_vector(spec, pert), x);
                pert[s](e) = slots[s](e) - h;
                double Lm = loss_of(nn::params_from_vector(spec, pert), x);
                record(gslots[s](e), (Lp - Lm) / (2.0 * h), "param-slot", e);
            }
        }
        for (int64_t e = 0; e < x.numel(); ++e) {
            Tensor<double> xp = x;
            xp(e) = x(e) + h;
            double Lp = loss_of(params, xp);
            xp(e) = x(e) - h;
            double Lm = loss_of(params, xp);
            record(bw.input_grad(e), (Lp - Lm) / (2.0 * h), "input", e);
        }
    }

    CheckResult c;
    c.name = "analytic vs central-difference gradients";
    c.measured = max_rel;
    c.tolerance = 1e-4;
    c.passed = max_rel < c.tolerance;
    c.note = "20 configs in 64-bit, h=1e-5, worst at " + worst +
             "; relative error floored at |g|=1e-5";
    suite.checks.push_back(c);
    suite.wall_seconds = seconds_since(t0);
    return suite;
}

SuiteResult verify_prop2(uint64_t seed) {
    auto t0 = Clock::now();
    SuiteResult suite;
    suite.suite = "prop2";

    // (a) diversity process: integrated moments vs the closed form
    //     mu(t) = (1-t) z0,  Sigma(t) = eta^2 t^2 I.
    {
        const double eta = 0.1;
        std::vector<double> z0{1.0, -0.7};
        Tensor<double> sigma0({2, 2});
        divsde::SdeSpec sde = divsde::diversity_sde(eta);
        auto traj = divsde::integrate_moment_odes(sde, z0, sigma0, 0.0, 0.75, 5e-4);

        double worst = 0.0;
        for (double t : {0.4, 0.75}) {
            size_t k = static_cast<size_t>(std::llround(t / 5e-4));
            const divsde::MomentState& st = traj.at(k);
            double cov_scale = eta * eta * t * t;
            for (int64_t i = 0; i < 2; ++i) {
                double mu_ref = (1.0 - t) * z0[static_cast<size_t>(i)];
                worst = std::max(worst, std::abs(st.mu[static_cast<size_t>(i)] - mu_ref) /
                                            std::abs(mu_ref));
                for (int64_t j = 0; j < 2; ++j) {
                    double ref = (i == j) ? cov_scale : 0.0;
                    worst = std::max(worst, std::abs(st.sigma(i, j) - ref) / cov_scale);
                }
            }
        }
        CheckResult c;
        c.name = "moment ODE matches closed-form diversity marginal";
        c.measured = worst;
        c.tolerance = 1e-6;
        c.passed = worst < c.tolerance;
        c.note = "RK4 dt=5e-4 to t=0.75, eta=0.1, checked at t in {0.4, 0.75}";
        suite.checks.push_back(c);
    }

    // (b) Ornstein-Uhlenbeck: moment ODE vs closed form, then stationary
    //     variance vs a Monte-Carlo forward run.
    double ode_var = 0.0;
    {
        std::vector<double> z0{1.3};
        Tensor<double> sigma0({1, 1});
        divsde::SdeSpec ou = divsde::ou_sde();
        auto traj = divsde::integrate_moment_odes(ou, z0, sigma0, 0.0, 6.0, 1e-3);
        const divsde::MomentState& last = traj.back();
        ode_var = last.sigma(0, 0);
        double mu_ref = 1.3 * std::exp(-6.0);
        double var_ref = 1.0 - std::exp(-12.0);
        double worst = std::max(std::abs(last.mu[0] - mu_ref) / std::max(1e-3, std::abs(mu_ref)),
                                std::abs(ode_var - var_ref) / var_ref);
        CheckResult c;
        c.name = "moment ODE matches OU closed form";
        c.measured = worst;
        c.tolerance = 1e-6;
        c.passed = worst < c.tolerance;
        c.note = "mean 1.3 e^{-t}, variance 1 - e^{-2t} at t=6";
        suite.checks.push_back(c);
    }
    {
        RngStream rng(seed);
        RngStream mc_rng = rng.child("ou-mc", 0);
        const int64_t paths = 8000;
        Tensor<double> z0({paths, 1});
        for (auto& v : z0.data) v = 1.3;
        divsde::ForwardResult fr =
            divsde::simulate_forward_em(divsde::ou_sde(), z0, 1e-3, 6.0, mc_rng);
        double s = 0.0, sq = 0.0;
        for (double v : fr.final_state.data) {
            s += v;
            sq += v * v;
        }
        double mean = s / double(paths);
        double var = sq / double(paths) - mean * mean;
        double dev = std::abs(var - 1.0);
        CheckResult c;
        c.name = "OU stationary variance vs Monte-Carlo";
        c.measured = dev;
        c.tolerance = 0.05;
        c.passed = dev < c.tolerance && std::abs(var - ode_var) / ode_var < 0.05;
        std::ostringstream os;
        os << "8000 EM paths, dt=1e-3 to t=6: sample var " << var << " vs ODE " << ode_var;
        c.note = os.str();
        suite.checks.push_back(c);
    }

    suite.wall_seconds = seconds_since(t0);
    return suite;
}

SuiteResult verify_prop3(uint64_t seed) {
    auto t0 = Clock::now();
    SuiteResult suite;
    suite.suite = "prop3";

    const double eta = 0.1, dt = 1e-3;
    const int64_t paths = 20000, d = 4;
    const std::vector<double> z0{1.2, -0.8, 0.5, 2.0};
    const std::vector<double> times{0.25, 0.5, 0.75};

    RngStream rng(seed);
    RngStream mc_rng = rng.child("prop3-mc", 0);
    Tensor<double> start({paths, d});
    for (int64_t n = 0; n < paths; ++n)
        for (int64_t j = 0; j < d; ++j) start(n, j) = z0[static_cast<size_t>(j)];

    divsde::ForwardResult fr = divsde::simulate_forward_em(divsde::diversity_sde(eta), start,
                                                           dt, 0.75, mc_rng, times);

    double worst_mean_se = 0.0, worst_cov_rel = 0.0;
    std::string mean_note, cov_note;
    for (size_t s = 0; s < times.size(); ++s) {
        double t = times[s];
        const Tensor<double>& snap = fr.snapshots[s];
        double cov_scale = eta * eta * t * t;
        double se = eta * t / std::sqrt(double(paths));  // exact per-dim std / sqrt(n)

        std::vector<double> mean(static_cast<size_t>(d), 0.0);
        for (int64_t n = 0; n < paths; ++n)
            for (int64_t j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += snap(n, j);
        for (auto& v : mean) v /= double(paths);

        for (int64_t j = 0; j < d; ++j) {
            double ref = (1.0 - t) * z0[static_cast<size_t>(j)];
            double dev_se = std::abs(mean[static_cast<size_t>(j)] - ref) / se;
            if (dev_se > worst_mean_se) {
                worst_mean_se = dev_se;
                mean_note = "t=" + std::to_string(t) + " dim " + std::to_string(j);
            }
        }
        for (int64_t i = 0; i < d; ++i) {
            for (int64_t j = 0; j < d; ++j) {
                double c = 0.0;
                for (int64_t n = 0; n < paths; ++n)
                    c += (snap(n, i) - mean[static_cast<size_t>(i)]) *
                         (snap(n, j) - mean[static_cast<size_t>(j)]);
                c /= double(paths - 1);
                double ref = (i == j) ? cov_scale : 0.0;
                double rel = std::abs(c - ref) / cov_scale;
                if (rel > worst_cov_rel) {
                    worst_cov_rel = rel;
                    cov_note = "t=" + std::to_string(t) + " entry (" + std::to_string(i) +
                               "," + std::to_string(j) + ")";
                }
            }
        }
    }

    {
        CheckResult c;
        c.name = "EM mean matches (1-t) z0";
        c.measured = worst_mean_se;
        c.tolerance = 3.0;
        c.passed = worst_mean_se < c.tolerance;
        c.note = "units of exact standard error eta*t/sqrt(20000); worst at " + mean_note;
        suite.checks.push_back(c);
    }
    {
        CheckResult c;
        c.name = "EM covariance matches eta^2 t^2 I";
        c.measured = worst_cov_rel;
        c.tolerance = 0.05;
        c.passed = worst_cov_rel < c.tolerance;
        c.note = "relative to eta^2 t^2; worst at " + cov_note;
        suite.checks.push_back(c);
    }
    suite.wall_seconds = seconds_since(t0);
    {
        CheckResult c;
        c.name = "runtime under budget";
        c.measured = suite.wall_seconds;
        c.tolerance = 60.0;
        c.passed = suite.wall_seconds < c.tolerance;
        c.note = "seconds for 20000 paths, dt=1e-3 to t=0.75";
        suite.checks.push_back(c);
    }
    return suite;
}

SuiteResult verify_eta_sweep(uint64_t seed) {
    auto t0 = Clock::now();
    SuiteResult suite;
    suite.suite = "eta-sweep";

    const int64_t anchors_n = 16, reps = 32, d = 8;
    const std::vector<double> etas{0.0, 0.1, 0.5};

    RngStream rng(seed);
    RngStream arng = rng.child("anchors", 0);
    Tensor<double> anchors({anchors_n, d});
    for (auto& v : anchors.data) v = 1.5 * arng.normal();

    std::vector<double> spread(etas.size(), 0.0), divers(etas.size(), 0.0);
    for (size_t ei = 0; ei < etas.size(); ++ei) {
        divsde::SamplerConfig cfg = divsde::SamplerConfig::with_steps(100, etas[ei]);
        // rep r reuses the same child stream for every eta: common random
        // numbers make the comparison a pure function of eta
        std::vector<Tensor<double>> outs;
        for (int64_t r = 0; r < reps; ++r) {
            RngStream rrng = rng.child("rep", static_cast<uint64_t>(r));
            outs.push_back(divsde::backward_chain(anchors, cfg, rrng).output);
        }
        double acc = 0.0;
        for (int64_t a = 0; a < anchors_n; ++a) {
            for (int64_t j = 0; j < d; ++j) {
                double s = 0.0;
                for (int64_t r = 0; r < reps; ++r) s += outs[static_cast<size_t>(r)](a, j);
                double mean = s / double(reps);
                // two-pass variance: identical reps (eta = 0) give exactly 0
                double sq = 0.0;
                for (int64_t r = 0; r < reps; ++r) {
                    double v = outs[static_cast<size_t>(r)](a, j) - mean;
                    sq += v * v;
                }
                acc += std::sqrt(sq / double(reps));
            }
        }
        spread[ei] = acc / double(anchors_n * d);

        metrics::FeatureSet fs;
        fs.vectors = Tensor<double>({anchors_n * reps, d});
        for (int64_t r = 0; r < reps; ++r)
            for (int64_t a = 0; a < anchors_n; ++a)
                for (int64_t j = 0; j < d; ++j)
                    fs.vectors(r * anchors_n + a, j) = outs[static_cast<size_t>(r)](a, j);
        RngStream drng = rng.child("diversity-pairs", 0);  // same pairs per eta
        divers[ei] = metrics::diversity(fs, 200, drng);
    }

    {
        CheckResult c;
        c.name = "across-seed output spread strictly increases with eta";
        c.measured = std::min(spread[1] - spread[0], spread[2] - spread[1]);
        c.tolerance = 0.0;
        c.passed = c.measured > 0.0;
        std::ostringstream os;
        os << "spread " << spread[0] << " -> " << spread[1] << " -> " << spread[2]
           << " over eta {0, 0.1, 0.5}";
        c.note = os.str();
        suite.checks.push_back(c);
    }
    {
        CheckResult c;
        c.name = "paired-distance diversity strictly increases with eta";
        c.measured = std::min(divers[1] - divers[0], divers[2] - divers[1]);
        c.tolerance = 0.0;
        c.passed = c.measured > 0.0;
        std::ostringstream os;
        os << "diversity " << divers[0] << " -> " << divers[1] << " -> " << divers[2]
           << " over eta {0, 0.1, 0.5}";
        c.note = os.str();
        suite.checks.push_back(c);
    }
    suite.wall_seconds = seconds_since(t0);
    return suite;
}

SuiteResult run_suite(const std::string& name, uint64_t seed) {
    if (name == "ot") return verify_ot(seed);
    if (name == "gradients") return verify_gradients(seed);
    if (name == "prop2") return verify_prop2(seed);
    if (name == "prop3") return verify_prop3(seed);
    if (name == "eta-sweep") return verify_eta_sweep(seed);
    throw std::invalid_argument("unknown verify suite: " + name);
}

const std::vector<std::string>& suite_names() {
    static const std::vector<std::string> names{"ot", "gradients", "prop2", "prop3",
                                               "eta-sweep"};
    return names;
}

}  // namespace mf::verify
