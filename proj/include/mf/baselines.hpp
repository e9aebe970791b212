#pragma once

// Reference diffusion baselines for the runtime/quality comparison grid:
// variance-preserving and variance-exploding SDEs with a noise-prediction
// network trained by denoising score matching, sampled by reverse-time
// Euler-Maruyama.  Unconditional, toy scale; these exist to populate the
// sweep table next to the one-step and diversity samplers, not to compete.

#include "mf/checkpoint.hpp"
#include "mf/derode.hpp"  // LatentSet
#include "mf/nn.hpp"
#include "mf/rng.hpp"
#include "mf/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mf::baselines {

enum class Kind { vpsde, vesde };

inline const char* kind_name(Kind k) { return k == Kind::vpsde ? "vpsde" : "vesde"; }
inline Kind kind_from_name(const std::string& s) {
    if (s == "vpsde") return Kind::vpsde;
    if (s == "vesde") return Kind::vesde;
    throw std::invalid_argument("unknown baseline kind: " + s);
}

struct BaselineConfig {
    Kind kind = Kind::vpsde;
    double beta_min = 0.1, beta_max = 20.0;    // variance-preserving schedule
    double sigma_min = 0.01, sigma_max = 5.0;  // variance-exploding schedule
    int64_t epochs = 200;
    int64_t batch = 128;
    double lr = 1e-2, lr_decay = 0.98;
    int64_t lr_decay_every = 10;
    std::vector<int64_t> hidden{96, 96};
    int64_t time_embed_dim = 16;
    nn::Act act = nn::Act::silu;
    double t_eps = 1e-3;  // training times drawn from [t_eps, 1]
};

// --- schedules -------------------------------------------------------------

inline double vp_beta(const BaselineConfig& c, double t) {
    return c.beta_min + t * (c.beta_max - c.beta_min);
}
// alpha(t) = exp(-1/2 int_0^t beta) ; the forward marginal is
// z_t = alpha z0 + sqrt(1 - alpha^2) eps.
inline double vp_alpha(const BaselineConfig& c, double t) {
    return std::exp(-0.25 * t * t * (c.beta_max - c.beta_min) - 0.5 * c.beta_min * t);
}
inline double ve_sigma(const BaselineConfig& c, double t) {
    return c.sigma_min * std::pow(c.sigma_max / c.sigma_min, t);
}

template <class T>
struct BaselineModel {
    Kind kind = Kind::vpsde;
    BaselineConfig cfg;
    nn::MlpSpec spec;
    nn::MlpParams<T> params;  // noise-prediction net eps(z, t)
    int64_t dim = 0;
    std::vector<double> mean, std;  // latent standardization (as in the drift stage)
};

struct BaselineEpochLog {
    int64_t epoch = 0;
    double loss = 0;
    double lr = 0;
};

template <class T>
struct BaselineTrainResult {
    BaselineModel<T> model;
    std::vector<BaselineEpochLog> log;
    bool aborted = false;
    int64_t aborted_epoch = -1;
};

template <class T>
BaselineTrainResult<T> train_baseline(const derode::LatentSet& data, const BaselineConfig& cfg,
                                      RngStream& rng) {
    if (data.size() == 0) throw std::invalid_argument("empty dataset for baseline");
    int64_t n = data.size(), d = data.dim();

    BaselineTrainResult<T> res;
    BaselineModel<T>& m = res.model;
    m.kind = cfg.kind;
    m.cfg = cfg;
    m.dim = d;
    m.spec.input_dim = d;
    m.spec.output_dim = d;
    m.spec.hidden = cfg.hidden;
    m.spec.act = cfg.act;
    m.spec.time_embed_dim = cfg.time_embed_dim;
    m.spec.validate();
    RngStream init_rng = rng.child("baseline-init", 0);
    m.params = nn::init_mlp<T>(m.spec, init_rng);

    m.mean.assign(static_cast<size_t>(d), 0.0);
    m.std.assign(static_cast<size_t>(d), 1.0);
    for (int64_t j = 0; j < d; ++j) {
        double s = 0, sq = 0;
        for (int64_t i = 0; i < n; ++i) {
            s += data.points(i, j);
            sq += data.points(i, j) * data.points(i, j);
        }
        double mean = s / double(n);
        m.mean[static_cast<size_t>(j)] = mean;
        m.std[static_cast<size_t>(j)] = std::sqrt(std::max(sq / double(n) - mean * mean, 1e-12));
    }

    std::vector<Tensor<T>> params = nn::params_to_vector(m.params);
    nn::AdamState<T> adam = nn::adam_init(params);
    std::vector<Tensor<T>> snapshot = params;

    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        RngStream erng = rng.child("baseline-epoch", static_cast<uint64_t>(epoch));
        shuffle(order, erng);
        double lr = nn::step_decay_lr(cfg.lr, cfg.lr_decay, cfg.lr_decay_every, epoch);
        BaselineEpochLog lg;
        lg.epoch = epoch;
        lg.lr = lr;
        int64_t batches = 0;
        bool bad = false;

        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch)) {
            size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch));
            int64_t B = static_cast<int64_t>(stop - start);
            Tensor<T> zt({B, d}), target({B, d});
            std::vector<double> ts(static_cast<size_t>(B));
            for (int64_t i = 0; i < B; ++i) {
                int64_t src = order[start + static_cast<size_t>(i)];
                double t = cfg.t_eps + (1.0 - cfg.t_eps) * erng.uniform01();
                ts[static_cast<size_t>(i)] = t;
                double a = cfg.kind == Kind::vpsde ? vp_alpha(cfg, t) : 1.0;
                double s = cfg.kind == Kind::vpsde
                               ? std::sqrt(std::max(1.0 - a * a, 1e-12))
                               : ve_sigma(cfg, t);
                for (int64_t j = 0; j < d; ++j) {
                    double z0 = (data.points(src, j) - m.mean[static_cast<size_t>(j)]) /
                                m.std[static_cast<size_t>(j)];
                    double eps = erng.normal();
                    zt(i, j) = static_cast<T>(a * z0 + s * eps);
                    target(i, j) = static_cast<T>(eps);
                }
            }
            try {
                nn::MlpCache<T> cache;
                Tensor<T> pred = nn::mlp_forward_cached(m.spec, m.params, zt, ts, {}, cache);
                double loss = 0;
                Tensor<T> gout({B, d});
                for (int64_t i = 0; i < B * d; ++i) {
                    double r = double(pred(i)) - double(target(i));
                    loss += r * r;
                    gout(i) = static_cast<T>(2.0 * r / double(B));
                }
                loss /= double(B);
                if (!std::isfinite(loss)) throw std::runtime_error("non-finite baseline loss");
                nn::MlpBackward<T> bw = nn::mlp_backward(m.spec, m.params, cache, gout);
                auto [np, ns] = nn::adam_step(adam, params, nn::params_to_vector(bw.grads), lr);
                params = std::move(np);
                adam = std::move(ns);
                m.params = nn::params_from_vector(m.spec, params);
                lg.loss += loss;
                ++batches;
            } catch (const std::runtime_error&) {
                bad = true;
                break;
            }
        }
        if (bad) {
            res.aborted = true;
            res.aborted_epoch = epoch;
            params = snapshot;
            m.params = nn::params_from_vector(m.spec, params);
            break;
        }
        lg.loss /= double(batches);
        res.log.push_back(lg);
        snapshot = params;
    }
    return res;
}

// Reverse-time Euler-Maruyama from the prior down to t_eps; returns raw
// (destandardized) coordinates.  Per-sample derived streams.
template <class T>
Tensor<double> sample_baseline(const BaselineModel<T>& m, int64_t count, int64_t steps,
                               RngStream& rng) {
    if (steps < 1) throw std::invalid_argument("baseline sampling needs steps >= 1");
    int64_t d = m.dim;
    const BaselineConfig& c = m.cfg;
    Tensor<double> out({count, d});
    double t_lo = c.t_eps;
    double dt = (1.0 - t_lo) / double(steps);

    Tensor<T> z({1, d});
    for (int64_t i = 0; i < count; ++i) {
        RngStream srng = rng.child("baseline-sample", static_cast<uint64_t>(i));
        double prior_scale = c.kind == Kind::vpsde ? 1.0 : c.sigma_max;
        for (int64_t j = 0; j < d; ++j) z(0, j) = static_cast<T>(prior_scale * srng.normal());
        for (int64_t k = 0; k < steps; ++k) {
            double t = 1.0 - double(k) * dt;
            std::vector<double> ts{t};
            Tensor<T> eps_hat = nn::mlp_forward(m.spec, m.params, z, ts, {});
            if (c.kind == Kind::vpsde) {
                double beta = vp_beta(c, t);
                double a = vp_alpha(c, t);
                double sigma = std::sqrt(std::max(1.0 - a * a, 1e-12));
                double g = std::sqrt(beta);
                for (int64_t j = 0; j < d; ++j) {
                    double zz = double(z(0, j));
                    double drift = 0.5 * beta * zz - beta * double(eps_hat(0, j)) / sigma;
                    z(0, j) = static_cast<T>(zz + drift * dt + g * std::sqrt(dt) * srng.normal());
                }
            } else {
                double sigma = ve_sigma(c, t);
                double g2 = 2.0 * sigma * sigma * std::log(c.sigma_max / c.sigma_min);
                double g = std::sqrt(g2);
                for (int64_t j = 0; j < d; ++j) {
                    double zz = double(z(0, j));
                    double drift = -g2 * double(eps_hat(0, j)) / sigma;
                    z(0, j) = static_cast<T>(zz + drift * dt + g * std::sqrt(dt) * srng.normal());
                }
            }
            require_finite(z, "baseline sampler state");
        }
        for (int64_t j = 0; j < d; ++j)
            out(i, j) = double(z(0, j)) * m.std[static_cast<size_t>(j)] +
                        m.mean[static_cast<size_t>(j)];
    }
    return out;
}

template <class T>
void baseline_to_archive(const BaselineModel<T>& m, io::Archive& ar) {
    ar.meta["kind"] = kind_name(m.kind);
    ar.meta["spec"] = m.spec.to_json();
    ar.meta["dim"] = m.dim;
    ar.meta["beta_min"] = m.cfg.beta_min;
    ar.meta["beta_max"] = m.cfg.beta_max;
    ar.meta["sigma_min"] = m.cfg.sigma_min;
    ar.meta["sigma_max"] = m.cfg.sigma_max;
    ar.meta["t_eps"] = m.cfg.t_eps;
    for (size_t l = 0; l < m.params.W.size(); ++l) {
        ar.add("W" + std::to_string(l), m.params.W[l]);
        ar.add("b" + std::to_string(l), m.params.b[l]);
    }
    Tensor<double> mean({m.dim}), sd({m.dim});
    for (int64_t j = 0; j < m.dim; ++j) {
        mean(j) = m.mean[static_cast<size_t>(j)];
        sd(j) = m.std[static_cast<size_t>(j)];
    }
    ar.add("latent_mean", mean);
    ar.add("latent_std", sd);
}

template <class T>
BaselineModel<T> baseline_from_archive(const io::Archive& ar) {
    BaselineModel<T> m;
    m.kind = kind_from_name(ar.meta.at("kind").get<std::string>());
    m.cfg.kind = m.kind;
    m.cfg.beta_min = ar.meta.value("beta_min", m.cfg.beta_min);
    m.cfg.beta_max = ar.meta.value("beta_max", m.cfg.beta_max);
    m.cfg.sigma_min = ar.meta.value("sigma_min", m.cfg.sigma_min);
    m.cfg.sigma_max = ar.meta.value("sigma_max", m.cfg.sigma_max);
    m.cfg.t_eps = ar.meta.value("t_eps", m.cfg.t_eps);
    m.spec = nn::MlpSpec::from_json(ar.meta.at("spec"));
    m.dim = ar.meta.at("dim").get<int64_t>();
    for (int64_t l = 0; l < m.spec.num_layers(); ++l) {
        m.params.W.push_back(ar.get_as<T>("W" + std::to_string(l)));
        m.params.b.push_back(ar.get_as<T>("b" + std::to_string(l)));
    }
    Tensor<double> mean = ar.get_as<double>("latent_mean");
    Tensor<double> sd = ar.get_as<double>("latent_std");
    m.mean.assign(mean.data.begin(), mean.data.end());
    m.std.assign(sd.data.begin(), sd.data.end());
    return m;
}

}  // namespace mf::baselines
