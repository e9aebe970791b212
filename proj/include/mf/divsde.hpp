#pragma once

// Stochastic diversity stage: the diversity SDE's forward process and its
// closed-form Gaussian marginals, generic Euler-Maruyama simulation, RK4
// moment ODEs for affine drifts, the anchored score, and the discrete
// backward sampler that turns a deterministic one-step anchor into a family
// of diverse outputs.
//
// Forward process (per coordinate, anchor z0):
//     dz = -z/(1-t) dt + eta * sqrt(2t/(1-t)) dw,   z(0) = z0,
// whose marginals are N((1-t) z0, eta^2 t^2 I).

#include "mf/derode.hpp"
#include "mf/rng.hpp"
#include "mf/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace mf::divsde {

// ------------------------------------------------------------------ config

struct SamplerConfig {
    int64_t steps = 100;  // T
    double dt = 0.01;     // 1/T
    double eta = 0.1;     // diversity strength
    bool snap = false;    // divide the final state by (1 - dt); off by default

    void validate() const {
        if (steps < 1) throw std::invalid_argument("sampler needs steps >= 1");
        if (std::abs(dt * double(steps) - 1.0) > 1e-12)
            throw std::invalid_argument("sampler requires dt * steps == 1");
        if (eta < 0) throw std::invalid_argument("eta must be >= 0");
    }

    static SamplerConfig with_steps(int64_t steps, double eta, bool snap = false) {
        SamplerConfig c;
        c.steps = steps;
        c.dt = 1.0 / double(steps);
        c.eta = eta;
        c.snap = snap;
        c.validate();
        return c;
    }
};

// ------------------------------------------------------------ SDE carriers

struct SdeSpec {
    // Batched drift f(z, t): (N x d) -> (N x d).
    std::function<Tensor<double>(const Tensor<double>&, double)> drift;
    std::function<double(double)> diffusion;  // g(t)
    // Right edge of the valid time domain (the diversity SDE diverges at 1).
    double t_max = std::numeric_limits<double>::infinity();
};

inline SdeSpec diversity_sde(double eta) {
    SdeSpec s;
    s.drift = [](const Tensor<double>& z, double t) {
        Tensor<double> f = z;
        double c = -1.0 / (1.0 - t);
        for (auto& v : f.data) v *= c;
        return f;
    };
    s.diffusion = [eta](double t) { return eta * std::sqrt(2.0 * t / (1.0 - t)); };
    s.t_max = 1.0;
    return s;
}

// Ornstein-Uhlenbeck reference process f = -z, g = sqrt(2): stationary N(0, I).
inline SdeSpec ou_sde() {
    SdeSpec s;
    s.drift = [](const Tensor<double>& z, double) {
        Tensor<double> f = z;
        for (auto& v : f.data) v = -v;
        return f;
    };
    s.diffusion = [](double) { return std::sqrt(2.0); };
    return s;
}

// ------------------------------------------------------- closed-form marginal

struct Marginal {
    std::vector<double> mean;
    double cov_scalar = 0.0;  // covariance = cov_scalar * I
};

inline Marginal forward_marginal(const std::vector<double>& z0, double t, double eta) {
    if (t < 0.0 || t >= 1.0) throw std::invalid_argument("marginal defined for t in [0,1)");
    Marginal m;
    m.mean.resize(z0.size());
    for (size_t i = 0; i < z0.size(); ++i) m.mean[i] = (1.0 - t) * z0[i];
    m.cov_scalar = eta * eta * t * t;
    return m;
}

// -------------------------------------------------------- Euler-Maruyama

struct ForwardResult {
    Tensor<double> final_state;             // N x d at t_end
    std::vector<double> snapshot_times;     // realized snapshot times
    std::vector<Tensor<double>> snapshots;  // N x d each
    Tensor<double> trajectory;              // (N, K+1, d) when recorded
};

// z <- z + f(z,t) dt + g(t) sqrt(dt) eps, from t=0 to t_end.  Rejects
// horizons that would evaluate the coefficients inside [t_max - dt, t_max)
// where a singular diffusion blows up.  Noise is drawn per path from a
// derived stream, so results do not depend on batch size or order.
inline ForwardResult simulate_forward_em(const SdeSpec& spec, const Tensor<double>& z0,
                                         double dt, double t_end, RngStream& rng,
                                         const std::vector<double>& snapshot_times = {},
                                         bool record_full = false) {
    if (z0.rank() != 2) throw std::invalid_argument("expected N x d start batch");
    if (dt <= 0 || t_end <= 0) throw std::invalid_argument("dt and t_end must be positive");
    if (t_end > spec.t_max - dt + 1e-12)
        throw std::invalid_argument(
            "t_end steps into the diffusion singularity region (t >= t_max - dt)");
    int64_t N = z0.shape[0], d = z0.shape[1];
    int64_t K = static_cast<int64_t>(std::llround(t_end / dt));
    if (std::abs(double(K) * dt - t_end) > 1e-9)
        throw std::invalid_argument("t_end must be a multiple of dt");

    ForwardResult out;
    out.final_state = Tensor<double>({N, d});
    for (double st : snapshot_times) {
        int64_t k = static_cast<int64_t>(std::llround(st / dt));
        if (k < 0 || k > K || std::abs(double(k) * dt - st) > 1e-9)
            throw std::invalid_argument("snapshot time off the step grid");
        out.snapshot_times.push_back(double(k) * dt);
        out.snapshots.emplace_back(std::vector<int64_t>{N, d});
    }
    if (record_full) out.trajectory = Tensor<double>({N, K + 1, d});

    Tensor<double> row({1, d});
    for (int64_t n = 0; n < N; ++n) {
        RngStream path_rng = rng.child("em-path", static_cast<uint64_t>(n));
        for (int64_t j = 0; j < d; ++j) row(0, j) = z0(n, j);
        if (record_full)
            for (int64_t j = 0; j < d; ++j) out.trajectory.at3(n, 0, j) = row(0, j);
        for (size_t s = 0; s < out.snapshot_times.size(); ++s)
            if (out.snapshot_times[s] == 0.0)
                for (int64_t j = 0; j < d; ++j) out.snapshots[s](n, j) = row(0, j);

        for (int64_t k = 0; k < K; ++k) {
            double t = double(k) * dt;
            Tensor<double> f = spec.drift(row, t);
            double g = spec.diffusion(t);
            if (!std::isfinite(g)) throw std::runtime_error("diffusion not finite at t=" + std::to_string(t));
            for (int64_t j = 0; j < d; ++j)
                row(0, j) += f(0, j) * dt + g * std::sqrt(dt) * path_rng.normal();
            require_finite(row, "EM state (path " + std::to_string(n) + ")");
            if (record_full)
                for (int64_t j = 0; j < d; ++j) out.trajectory.at3(n, k + 1, j) = row(0, j);
            double tk1 = double(k + 1) * dt;
            for (size_t s = 0; s < out.snapshot_times.size(); ++s)
                if (std::abs(out.snapshot_times[s] - tk1) < dt * 0.5)
                    for (int64_t j = 0; j < d; ++j) out.snapshots[s](n, j) = row(0, j);
        }
        for (int64_t j = 0; j < d; ++j) out.final_state(n, j) = row(0, j);
    }
    return out;
}

// ------------------------------------------------------------ moment ODEs

struct MomentState {
    std::vector<double> mu;
    Tensor<double> sigma;  // d x d
    double t = 0.0;
};

namespace detail {

struct AffineDrift {
    Tensor<double> A;        // d x d
    std::vector<double> b;   // d
};

// Recover A, b from the batched drift via unit-vector probes, then verify
// affinity on random affine combinations; rejects non-affine drifts.
inline AffineDrift probe_affine(const SdeSpec& spec, int64_t d, double t) {
    Tensor<double> probes({d + 1, d});
    for (int64_t j = 0; j < d; ++j) probes(1 + j, j) = 1.0;
    Tensor<double> f = spec.drift(probes, t);
    AffineDrift ad;
    ad.A = Tensor<double>({d, d});
    ad.b.resize(static_cast<size_t>(d));
    for (int64_t i = 0; i < d; ++i) ad.b[static_cast<size_t>(i)] = f(0, i);
    for (int64_t j = 0; j < d; ++j)
        for (int64_t i = 0; i < d; ++i) ad.A(i, j) = f(1 + j, i) - f(0, i);

    // Affinity check: f(alpha x + (1-alpha) y) == alpha f(x) + (1-alpha) f(y).
    RngStream probe_rng(0xAFF17E5EEDull);
    Tensor<double> xy({3, d});
    const double alpha = 0.37;
    for (int64_t j = 0; j < d; ++j) {
        xy(0, j) = probe_rng.normal();
        xy(1, j) = probe_rng.normal();
        xy(2, j) = alpha * xy(0, j) + (1.0 - alpha) * xy(1, j);
    }
    Tensor<double> fx = spec.drift(xy, t);
    for (int64_t i = 0; i < d; ++i) {
        double expect = alpha * fx(0, i) + (1.0 - alpha) * fx(1, i);
        double scale = std::max({1.0, std::abs(expect), std::abs(fx(2, i))});
        if (std::abs(fx(2, i) - expect) > 1e-8 * scale)
            throw std::invalid_argument("moment ODEs require an affine drift");
    }
    return ad;
}

}  // namespace detail

// RK4 on d(mu)/dt = A mu + b,  d(Sigma)/dt = A Sigma + Sigma A^T + g^2 I
// from (mu0, Sigma0) at t0 to t_end.  Returns the state at every grid point
// (first entry is the initial condition).
inline std::vector<MomentState> integrate_moment_odes(const SdeSpec& spec,
                                                      const std::vector<double>& mu0,
                                                      const Tensor<double>& sigma0, double t0,
                                                      double t_end, double dt) {
    int64_t d = static_cast<int64_t>(mu0.size());
    if (sigma0.rank() != 2 || sigma0.shape[0] != d || sigma0.shape[1] != d)
        throw std::invalid_argument("sigma0 must be d x d");
    if (dt <= 0 || t_end <= t0) throw std::invalid_argument("need dt > 0 and t_end > t0");
    if (t_end > spec.t_max - dt + 1e-12)
        throw std::invalid_argument("moment integration enters the singular region");
    int64_t K = static_cast<int64_t>(std::llround((t_end - t0) / dt));
    if (std::abs(t0 + double(K) * dt - t_end) > 1e-9)
        throw std::invalid_argument("t_end must sit on the dt grid");

    // One affinity rejection pass up front (start, middle, last interior time).
    detail::probe_affine(spec, d, t0);
    detail::probe_affine(spec, d, t0 + dt * double(K / 2));
    detail::probe_affine(spec, d, t0 + dt * double(K - 1));

    auto deriv = [&](const std::vector<double>& mu, const Tensor<double>& sig, double t,
                     std::vector<double>& dmu, Tensor<double>& dsig) {
        detail::AffineDrift ad = detail::probe_affine(spec, d, t);
        double g = spec.diffusion(t);
        dmu.assign(static_cast<size_t>(d), 0.0);
        for (int64_t i = 0; i < d; ++i) {
            double s = ad.b[static_cast<size_t>(i)];
            for (int64_t j = 0; j < d; ++j) s += ad.A(i, j) * mu[static_cast<size_t>(j)];
            dmu[static_cast<size_t>(i)] = s;
        }
        dsig = Tensor<double>({d, d});
        dsig.mat(d, d).noalias() = ad.A.mat(d, d) * sig.mat(d, d);
        dsig.mat(d, d).noalias() += sig.mat(d, d) * ad.A.mat(d, d).transpose();
        for (int64_t i = 0; i < d; ++i) dsig(i, i) += g * g;
    };

    std::vector<MomentState> traj;
    MomentState st;
    st.mu = mu0;
    st.sigma = sigma0;
    st.t = t0;
    traj.push_back(st);

    std::vector<double> k1m, k2m, k3m, k4m, tmp_m(static_cast<size_t>(d));
    Tensor<double> k1s, k2s, k3s, k4s, tmp_s;
    for (int64_t k = 0; k < K; ++k) {
        double t = st.t;
        deriv(st.mu, st.sigma, t, k1m, k1s);
        tmp_s = st.sigma;
        for (int64_t i = 0; i < d; ++i) tmp_m[static_cast<size_t>(i)] = st.mu[static_cast<size_t>(i)] + 0.5 * dt * k1m[static_cast<size_t>(i)];
        for (int64_t i = 0; i < d * d; ++i) tmp_s(i) = st.sigma(i) + 0.5 * dt * k1s(i);
        deriv(tmp_m, tmp_s, t + 0.5 * dt, k2m, k2s);
        for (int64_t i = 0; i < d; ++i) tmp_m[static_cast<size_t>(i)] = st.mu[static_cast<size_t>(i)] + 0.5 * dt * k2m[static_cast<size_t>(i)];
        for (int64_t i = 0; i < d * d; ++i) tmp_s(i) = st.sigma(i) + 0.5 * dt * k2s(i);
        deriv(tmp_m, tmp_s, t + 0.5 * dt, k3m, k3s);
        for (int64_t i = 0; i < d; ++i) tmp_m[static_cast<size_t>(i)] = st.mu[static_cast<size_t>(i)] + dt * k3m[static_cast<size_t>(i)];
        for (int64_t i = 0; i < d * d; ++i) tmp_s(i) = st.sigma(i) + dt * k3s(i);
        deriv(tmp_m, tmp_s, t + dt, k4m, k4s);

        for (int64_t i = 0; i < d; ++i)
            st.mu[static_cast<size_t>(i)] += dt / 6.0 *
                (k1m[static_cast<size_t>(i)] + 2.0 * k2m[static_cast<size_t>(i)] +
                 2.0 * k3m[static_cast<size_t>(i)] + k4m[static_cast<size_t>(i)]);
        for (int64_t i = 0; i < d * d; ++i)
            st.sigma(i) += dt / 6.0 * (k1s(i) + 2.0 * k2s(i) + 2.0 * k3s(i) + k4s(i));
        // keep Sigma exactly symmetric against roundoff drift
        for (int64_t i = 0; i < d; ++i)
            for (int64_t j = i + 1; j < d; ++j) {
                double v = 0.5 * (st.sigma(i, j) + st.sigma(j, i));
                st.sigma(i, j) = v;
                st.sigma(j, i) = v;
            }
        st.t = t0 + double(k + 1) * dt;
        traj.push_back(st);
    }
    return traj;
}

// ------------------------------------------------------------------ score

// Anchored score of the forward marginal as the backward sampler uses it:
//     ((1-t) z0 - z) / t^2.
// The true Gaussian score of N((1-t) z0, eta^2 t^2 I) is this divided by
// eta^2; the sampler's g^2 factor restores the eta^2, so eta never appears
// here.
inline std::vector<double> score_fn(const std::vector<double>& z, double t,
                                    const std::vector<double>& z0_anchor) {
    if (t <= 0.0) throw std::invalid_argument("score undefined at t <= 0");
    if (z.size() != z0_anchor.size()) throw std::invalid_argument("score: dim mismatch");
    std::vector<double> s(z.size());
    for (size_t i = 0; i < z.size(); ++i) s[i] = ((1.0 - t) * z0_anchor[i] - z[i]) / (t * t);
    return s;
}

// ---------------------------------------------------------- backward step

// One step of the discrete backward process, landing on time t from t + dt:
//   z_t = z' + (dt/(1-t)) z' + (2 t dt/(1-t)) * score(z', t) + eta * eps * sqrt(2t/(1-t)) * sqrt(dt)
// with z' = z_{t+dt} and `eps` one standard normal per coordinate.
inline std::vector<double> backward_step(const std::vector<double>& z_next, double t,
                                         const std::vector<double>& z0_anchor, double eta,
                                         double dt, const std::vector<double>& eps) {
    if (t <= 0.0 || t > 1.0 - dt + 1e-12)
        throw std::invalid_argument("backward step requires t in (0, 1 - dt]");
    if (eps.size() != z_next.size()) throw std::invalid_argument("backward step: eps size");
    std::vector<double> sc = score_fn(z_next, t, z0_anchor);
    std::vector<double> z(z_next.size());
    double c_drift = dt / (1.0 - t);
    double c_score = 2.0 * t * dt / (1.0 - t);
    double c_noise = eta * std::sqrt(2.0 * t / (1.0 - t)) * std::sqrt(dt);
    for (size_t i = 0; i < z.size(); ++i)
        z[i] = z_next[i] + c_drift * z_next[i] + c_score * sc[i] + c_noise * eps[i];
    return z;
}

inline std::vector<double> backward_step(const std::vector<double>& z_next, double t,
                                         const std::vector<double>& z0_anchor, double eta,
                                         double dt, RngStream& rng) {
    std::vector<double> eps(z_next.size());
    for (auto& e : eps) e = rng.normal();
    return backward_step(z_next, t, z0_anchor, eta, dt, eps);
}

// ---------------------------------------------------------- backward chain

struct ChainResult {
    Tensor<double> output;  // N x d at t = dt (optionally snapped to t = 0)
    // optional per-step trace: time and mean ||z|| across the batch
    std::vector<double> trace_t;
    std::vector<double> trace_mean_norm;
    // optional recorded intermediate state
    Tensor<double> state_at;  // N x d
    double state_at_t = -1.0;
};

// Run the backward chain for every anchor row.  Per-sample streams make the
// result independent of batch composition; the noise draw count per sample
// does not depend on eta, so runs with different eta share their normals
// (common random numbers).  The chain starts at t = 1 - dt from the
// closed-form marginal N(dt * anchor, eta^2 (1-dt)^2 I) and steps down to
// t = dt.
inline ChainResult backward_chain(const Tensor<double>& anchors, const SamplerConfig& cfg,
                                  RngStream& rng, bool record_trace = false,
                                  double record_state_time = -1.0) {
    cfg.validate();
    if (anchors.rank() != 2) throw std::invalid_argument("expected N x d anchors");
    if (cfg.steps < 2) throw std::invalid_argument("backward chain needs steps >= 2");
    int64_t N = anchors.shape[0], d = anchors.shape[1];
    const double dt = cfg.dt;
    const int64_t T = cfg.steps;

    ChainResult out;
    out.output = Tensor<double>({N, d});
    int64_t record_k = -1;
    if (record_state_time > 0) {
        record_k = static_cast<int64_t>(std::llround(record_state_time / dt));
        if (record_k < 1 || record_k > T - 1)
            throw std::invalid_argument("record time outside the chain grid");
        out.state_at = Tensor<double>({N, d});
        out.state_at_t = double(record_k) * dt;
    }
    if (record_trace) {
        for (int64_t k = T - 1; k >= 1; --k) out.trace_t.push_back(double(k) * dt);
        out.trace_mean_norm.assign(out.trace_t.size(), 0.0);
    }

    std::vector<double> z(static_cast<size_t>(d)), anchor(static_cast<size_t>(d)),
        eps(static_cast<size_t>(d));
    for (int64_t n = 0; n < N; ++n) {
        RngStream srng = rng.child("divsde-sample", static_cast<uint64_t>(n));
        for (int64_t j = 0; j < d; ++j) anchor[static_cast<size_t>(j)] = anchors(n, j);

        // init at k = T-1  (t = 1 - dt)
        for (int64_t j = 0; j < d; ++j) {
            double e = srng.normal();
            z[static_cast<size_t>(j)] =
                dt * anchor[static_cast<size_t>(j)] + cfg.eta * (1.0 - dt) * e;
        }
        size_t trace_i = 0;
        if (record_trace) {
            double norm = 0;
            for (double v : z) norm += v * v;
            out.trace_mean_norm[trace_i] += std::sqrt(norm) / double(N);
        }
        trace_i++;
        if (record_k == T - 1)
            for (int64_t j = 0; j < d; ++j) out.state_at(n, j) = z[static_cast<size_t>(j)];

        // steps to k = T-2 ... 1
        for (int64_t k = T - 2; k >= 1; --k) {
            double t = double(k) * dt;
            for (auto& e : eps) e = srng.normal();
            z = backward_step(z, t, anchor, cfg.eta, dt, eps);
            for (double v : z)
                if (!std::isfinite(v))
                    throw std::runtime_error("backward chain diverged at sample " +
                                             std::to_string(n) + ", t=" + std::to_string(t));
            if (record_trace) {
                double norm = 0;
                for (double v : z) norm += v * v;
                out.trace_mean_norm[trace_i] += std::sqrt(norm) / double(N);
            }
            trace_i++;
            if (k == record_k)
                for (int64_t j = 0; j < d; ++j) out.state_at(n, j) = z[static_cast<size_t>(j)];
        }

        for (int64_t j = 0; j < d; ++j) {
            double v = z[static_cast<size_t>(j)];
            out.output(n, j) = cfg.snap ? v / (1.0 - dt) : v;
        }
    }
    return out;
}

// Full stochastic sampler: deterministic one-step anchors from the drift net,
// then the diversity chain around each anchor.  `z1` lives in the net's
// internal (standardized) space; outputs are raw latent coordinates.
template <class T>
Tensor<double> sample_diverse(const derode::DriftModel<T>& net, const Tensor<double>& z1,
                              const std::vector<int32_t>& labels, const SamplerConfig& cfg,
                              RngStream& rng, ChainResult* detail_out = nullptr) {
    Tensor<double> anchors = derode::sample_one_step(net, z1, labels);
    ChainResult chain = backward_chain(anchors, cfg, rng, detail_out != nullptr);
    if (detail_out) *detail_out = chain;
    return detail_out ? detail_out->output : chain.output;
}

}  // namespace mf::divsde
