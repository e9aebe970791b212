#pragma once

// Deterministic drift stage: Gaussian-path drift targets, the drift-estimate
// and drift-consistency objectives, minibatch-OT coupled training, and the
// one-step / multi-step deterministic samplers.
//
// Convention throughout: t = 0 is the data end, t = 1 the Gaussian end, with
// interpolant z_t = (1-t) z0 + t z1 and drift target u = z1 - z0.

#include "mf/checkpoint.hpp"
#include "mf/nn.hpp"
#include "mf/ot.hpp"
#include "mf/rng.hpp"
#include "mf/tensor.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mf::derode {

using nlohmann::json;

// ---------------------------------------------------------- Gaussian paths

// A path of Gaussian marginals N(mu(t), sigma(t)^2 I) with vector mean and
// scalar deviation, carried with its derivatives.
struct GaussianPath {
    std::function<std::vector<double>(double)> mu;
    std::function<double(double)> sigma;
    std::function<std::vector<double>(double)> mu_dot;
    std::function<double(double)> sigma_dot;
};

// Drift transporting the path's marginals:
//   u(z, t) = sigma'(t) * (z - mu(t)) / sigma(t) + mu'(t).
// On a degenerate path (sigma(t) = 0) the first term is defined as 0 for z on
// the mean path and undefined otherwise.
inline std::vector<double> drift_from_path(const GaussianPath& path, const std::vector<double>& z,
                                           double t) {
    std::vector<double> m = path.mu(t);
    if (m.size() != z.size()) throw std::invalid_argument("drift_from_path: dim mismatch");
    std::vector<double> md = path.mu_dot(t);
    double s = path.sigma(t);
    if (s < 0) throw std::domain_error("drift_from_path: negative sigma");
    std::vector<double> u(z.size());
    if (s == 0.0) {
        for (size_t i = 0; i < z.size(); ++i)
            if (std::abs(z[i] - m[i]) > 1e-9)
                throw std::domain_error(
                    "drift_from_path: sigma(t)=0 with z off the mean path is undefined");
        for (size_t i = 0; i < z.size(); ++i) u[i] = md[i];
        return u;
    }
    double sd = path.sigma_dot(t);
    for (size_t i = 0; i < z.size(); ++i) u[i] = sd * (z[i] - m[i]) / s + md[i];
    return u;
}

// The degenerate straight-line path between two endpoints:
// mu(t) = t z1 + (1-t) z0, sigma = 0.  Its drift is z1 - z0 at every t.
inline GaussianPath linear_path(std::vector<double> z0, std::vector<double> z1) {
    if (z0.size() != z1.size()) throw std::invalid_argument("linear_path: dim mismatch");
    GaussianPath p;
    p.mu = [z0, z1](double t) {
        std::vector<double> m(z0.size());
        for (size_t i = 0; i < m.size(); ++i) m[i] = t * z1[i] + (1.0 - t) * z0[i];
        return m;
    };
    p.mu_dot = [z0, z1](double) {
        std::vector<double> d(z0.size());
        for (size_t i = 0; i < d.size(); ++i) d[i] = z1[i] - z0[i];
        return d;
    };
    p.sigma = [](double) { return 0.0; };
    p.sigma_dot = [](double) { return 0.0; };
    return p;
}

struct PathSample {
    std::vector<double> z0, z1;
    double t = 0.0;
    std::vector<double> z_t;
    std::vector<double> target_drift;  // z1 - z0
};

inline PathSample make_path_sample(std::vector<double> z0, std::vector<double> z1, double t) {
    if (z0.size() != z1.size()) throw std::invalid_argument("make_path_sample: dim mismatch");
    if (t < 0.0 || t > 1.0) throw std::invalid_argument("make_path_sample: t outside [0,1]");
    PathSample s;
    s.t = t;
    s.z_t.resize(z0.size());
    s.target_drift.resize(z0.size());
    for (size_t i = 0; i < z0.size(); ++i) {
        s.z_t[i] = (1.0 - t) * z0[i] + t * z1[i];
        s.target_drift[i] = z1[i] - z0[i];
    }
    s.z0 = std::move(z0);
    s.z1 = std::move(z1);
    return s;
}

// Convenience overload drawing t ~ U[0,1].
inline PathSample make_path_sample(std::vector<double> z0, std::vector<double> z1,
                                   RngStream& rng) {
    return make_path_sample(std::move(z0), std::move(z1), rng.uniform01());
}

// ------------------------------------------------------------------- data

struct LatentSet {
    Tensor<double> points;        // N x dim
    std::vector<int32_t> labels;  // empty => unconditional

    int64_t size() const { return points.shape.empty() ? 0 : points.shape[0]; }
    int64_t dim() const { return points.rank() == 2 ? points.shape[1] : 0; }
};

// ------------------------------------------------------------------ model

struct DeroDeTrainConfig {
    double lambda_cl = 0.3;       // consistency weight
    int64_t batch = 128;
    int64_t epochs = 200;
    double lr = 1e-2;
    double lr_decay = 0.98;
    int64_t lr_decay_every = 10;
    std::string coupling = "ot";  // "ot" | "independent"
    bool conditional = true;      // honored only when the dataset has labels
    int64_t ot_dual_iterations = 300;  // per-minibatch budget before the exact fallback
    std::vector<int64_t> hidden{96, 96};
    int64_t time_embed_dim = 16;
    int64_t label_embed_dim = 8;
    nn::Act act = nn::Act::silu;

    void validate() const {
        if (lambda_cl < 0) throw std::invalid_argument("lambda_cl must be >= 0");
        if (batch <= 0 || epochs < 0) throw std::invalid_argument("bad batch/epochs");
        if (coupling != "ot" && coupling != "independent")
            throw std::invalid_argument("coupling must be 'ot' or 'independent'");
    }

    json to_json() const {
        return json{{"lambda_cl", lambda_cl},
                    {"batch", batch},
                    {"epochs", epochs},
                    {"lr", lr},
                    {"lr_decay", lr_decay},
                    {"lr_decay_every", lr_decay_every},
                    {"coupling", coupling},
                    {"conditional", conditional},
                    {"ot_dual_iterations", ot_dual_iterations},
                    {"hidden", hidden},
                    {"time_embed_dim", time_embed_dim},
                    {"label_embed_dim", label_embed_dim},
                    {"act", nn::act_name(act)}};
    }
    static DeroDeTrainConfig from_json(const json& j) {
        DeroDeTrainConfig c;
        c.lambda_cl = j.value("lambda_cl", c.lambda_cl);
        c.batch = j.value("batch", c.batch);
        c.epochs = j.value("epochs", c.epochs);
        c.lr = j.value("lr", c.lr);
        c.lr_decay = j.value("lr_decay", c.lr_decay);
        c.lr_decay_every = j.value("lr_decay_every", c.lr_decay_every);
        c.coupling = j.value("coupling", c.coupling);
        c.conditional = j.value("conditional", c.conditional);
        c.ot_dual_iterations = j.value("ot_dual_iterations", c.ot_dual_iterations);
        c.hidden = j.value("hidden", c.hidden);
        c.time_embed_dim = j.value("time_embed_dim", c.time_embed_dim);
        c.label_embed_dim = j.value("label_embed_dim", c.label_embed_dim);
        if (j.contains("act")) c.act = nn::act_from_name(j.at("act").get<std::string>());
        c.validate();
        return c;
    }
};

// Drift field v_theta(z, t [, label]).  The net operates on standardized
// coordinates; `mean`/`std` map between raw latent space and that internal
// space (identity by default).
template <class T>
struct DriftModel {
    nn::MlpSpec spec;
    nn::MlpParams<T> params;
    bool conditional = false;
    int64_t dim = 0;
    std::vector<double> mean, std;

    template <class U>
    DriftModel<U> cast() const {
        DriftModel<U> o;
        o.spec = spec;
        o.params = params.template cast<U>();
        o.conditional = conditional;
        o.dim = dim;
        o.mean = mean;
        o.std = std;
        return o;
    }
};

template <class T>
DriftModel<T> init_drift_model(int64_t dim, bool conditional, int64_t num_labels,
                               const DeroDeTrainConfig& cfg, RngStream& rng) {
    DriftModel<T> m;
    m.dim = dim;
    m.conditional = conditional;
    m.spec.input_dim = dim;
    m.spec.output_dim = dim;
    m.spec.hidden = cfg.hidden;
    m.spec.act = cfg.act;
    m.spec.time_embed_dim = cfg.time_embed_dim;
    m.spec.label_embed_dim = conditional ? cfg.label_embed_dim : 0;
    m.spec.num_labels = conditional ? num_labels : 0;
    m.spec.validate();
    m.params = nn::init_mlp<T>(m.spec, rng);
    m.mean.assign(static_cast<size_t>(dim), 0.0);
    m.std.assign(static_cast<size_t>(dim), 1.0);
    return m;
}

template <class T>
Tensor<T> standardize(const DriftModel<T>& m, const Tensor<double>& x) {
    Tensor<T> out({x.shape[0], m.dim});
    for (int64_t i = 0; i < x.shape[0]; ++i)
        for (int64_t j = 0; j < m.dim; ++j)
            out(i, j) = static_cast<T>((x(i, j) - m.mean[static_cast<size_t>(j)]) /
                                       m.std[static_cast<size_t>(j)]);
    return out;
}

template <class T>
Tensor<double> destandardize(const DriftModel<T>& m, const Tensor<T>& x) {
    Tensor<double> out({x.shape[0], m.dim});
    for (int64_t i = 0; i < x.shape[0]; ++i)
        for (int64_t j = 0; j < m.dim; ++j)
            out(i, j) = double(x(i, j)) * m.std[static_cast<size_t>(j)] +
                        m.mean[static_cast<size_t>(j)];
    return out;
}

// ------------------------------------------------------------------ losses

template <class T>
struct LossResult {
    double value = 0.0;
    std::vector<Tensor<T>> grads;  // slot order of nn::params_to_vector
};

namespace detail {

// Interpolants z_t = (1-t) z0 + t z1 for per-row times.
template <class T>
Tensor<T> interpolate_batch(const Tensor<T>& z0, const Tensor<T>& z1,
                            const std::vector<double>& ts) {
    int64_t n = z0.shape[0], d = z0.shape[1];
    Tensor<T> zt({n, d});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j)
            zt(i, j) = static_cast<T>((1.0 - ts[static_cast<size_t>(i)]) * double(z0(i, j)) +
                                      ts[static_cast<size_t>(i)] * double(z1(i, j)));
    return zt;
}

template <class T>
void accumulate(std::vector<Tensor<T>>& into, const std::vector<Tensor<T>>& add, double scale) {
    if (into.empty()) {
        into = add;
        for (auto& t : into)
            for (auto& v : t.data) v = static_cast<T>(double(v) * scale);
        return;
    }
    for (size_t k = 0; k < into.size(); ++k)
        for (int64_t i = 0; i < into[k].numel(); ++i)
            into[k](i) = static_cast<T>(double(into[k](i)) + scale * double(add[k](i)));
}

}  // namespace detail

// Mean squared drift-estimate residual E ||v(z_t, t) - (z1 - z0)||^2 over the
// coupled batch, with per-couple times `ts`.
template <class T>
LossResult<T> loss_drift(const nn::MlpSpec& spec, const nn::MlpParams<T>& params,
                         const Tensor<T>& z0, const Tensor<T>& z1,
                         const std::vector<int32_t>& labels, const std::vector<double>& ts,
                         bool with_grads = true) {
    int64_t n = z0.shape[0], d = z0.shape[1];
    if (z1.shape != z0.shape) throw std::invalid_argument("loss_drift: batch shapes differ");
    if (static_cast<int64_t>(ts.size()) != n) throw std::invalid_argument("loss_drift: ts size");
    Tensor<T> zt = detail::interpolate_batch(z0, z1, ts);
    nn::MlpCache<T> cache;
    Tensor<T> v = nn::mlp_forward_cached(spec, params, zt, ts, labels, cache);

    LossResult<T> res;
    Tensor<T> gout({n, d});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) {
            double r = double(v(i, j)) - (double(z1(i, j)) - double(z0(i, j)));
            res.value += r * r;
            gout(i, j) = static_cast<T>(2.0 * r / double(n));
        }
    res.value /= double(n);
    if (!std::isfinite(res.value)) throw std::runtime_error("non-finite drift loss");
    if (with_grads) {
        nn::MlpBackward<T> bw = nn::mlp_backward(spec, params, cache, gout);
        res.grads = nn::params_to_vector(bw.grads);
    }
    return res;
}

// Mean squared drift-consistency residual E ||v(z_t, t) - v(z_{t'}, t')||^2
// over the coupled batch, with independent per-couple times `ta`, `tb`.
template <class T>
LossResult<T> loss_consistency(const nn::MlpSpec& spec, const nn::MlpParams<T>& params,
                               const Tensor<T>& z0, const Tensor<T>& z1,
                               const std::vector<int32_t>& labels,
                               const std::vector<double>& ta, const std::vector<double>& tb,
                               bool with_grads = true) {
    int64_t n = z0.shape[0], d = z0.shape[1];
    if (z1.shape != z0.shape) throw std::invalid_argument("loss_consistency: batch shapes differ");
    Tensor<T> za = detail::interpolate_batch(z0, z1, ta);
    Tensor<T> zb = detail::interpolate_batch(z0, z1, tb);
    nn::MlpCache<T> ca, cb;
    Tensor<T> va = nn::mlp_forward_cached(spec, params, za, ta, labels, ca);
    Tensor<T> vb = nn::mlp_forward_cached(spec, params, zb, tb, labels, cb);

    LossResult<T> res;
    Tensor<T> ga({n, d}), gb({n, d});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) {
            double r = double(va(i, j)) - double(vb(i, j));
            res.value += r * r;
            ga(i, j) = static_cast<T>(2.0 * r / double(n));
            gb(i, j) = static_cast<T>(-2.0 * r / double(n));
        }
    res.value /= double(n);
    if (!std::isfinite(res.value)) throw std::runtime_error("non-finite consistency loss");
    if (with_grads) {
        nn::MlpBackward<T> bwa = nn::mlp_backward(spec, params, ca, ga);
        nn::MlpBackward<T> bwb = nn::mlp_backward(spec, params, cb, gb);
        res.grads = nn::params_to_vector(bwa.grads);
        detail::accumulate(res.grads, nn::params_to_vector(bwb.grads), 1.0);
    }
    return res;
}

template <class T>
struct TotalLoss {
    double drift = 0.0, consistency = 0.0, total = 0.0;
    std::vector<Tensor<T>> grads;
};

// J = J_drift + lambda_cl * J_CL with explicit times (deterministic for tests).
template <class T>
TotalLoss<T> loss_total_at(const nn::MlpSpec& spec, const nn::MlpParams<T>& params,
                           const Tensor<T>& z0, const Tensor<T>& z1,
                           const std::vector<int32_t>& labels, double lambda_cl,
                           const std::vector<double>& t_drift, const std::vector<double>& ta,
                           const std::vector<double>& tb, bool with_grads = true) {
    TotalLoss<T> out;
    LossResult<T> jd = loss_drift(spec, params, z0, z1, labels, t_drift, with_grads);
    out.drift = jd.value;
    out.grads = std::move(jd.grads);
    if (lambda_cl > 0.0) {
        LossResult<T> jc = loss_consistency(spec, params, z0, z1, labels, ta, tb, with_grads);
        out.consistency = jc.value;
        if (with_grads) detail::accumulate(out.grads, jc.grads, lambda_cl);
    } else {
        // still report the diagnostic value, without its gradient cost
        out.consistency =
            loss_consistency(spec, params, z0, z1, labels, ta, tb, false).value;
    }
    out.total = out.drift + lambda_cl * out.consistency;
    return out;
}

// Random-times variant: three uniforms per couple, drawn array-major
// (all drift times, then all t, then all t').
template <class T>
TotalLoss<T> loss_total(const nn::MlpSpec& spec, const nn::MlpParams<T>& params,
                        const Tensor<T>& z0, const Tensor<T>& z1,
                        const std::vector<int32_t>& labels, double lambda_cl, RngStream& rng,
                        bool with_grads = true) {
    size_t n = static_cast<size_t>(z0.shape[0]);
    std::vector<double> td(n), ta(n), tb(n);
    for (auto& t : td) t = rng.uniform01();
    for (auto& t : ta) t = rng.uniform01();
    for (auto& t : tb) t = rng.uniform01();
    return loss_total_at(spec, params, z0, z1, labels, lambda_cl, td, ta, tb, with_grads);
}

// ---------------------------------------------------------------- training

struct DeroDeEpochLog {
    int64_t epoch = 0;
    double j_drift = 0, j_cl = 0, total = 0;
    double coupling_cost = 0;  // mean transport cost of the epoch's plans
    double lr = 0;
    double wall_s = 0;
    int64_t ot_fallbacks = 0;  // minibatches that needed the exact solver
};

template <class T>
struct DeroDeTrainResult {
    DriftModel<T> model;
    std::vector<DeroDeEpochLog> log;
    bool aborted = false;
    int64_t aborted_epoch = -1;
};

// Couple a standardized data batch with a Gaussian batch.  Conditional mode
// couples within class blocks so labels stay attached to their data latents.
// Returns (z0, z1, labels, mean plan cost, fallback count).
template <class T>
struct CoupledBatch {
    Tensor<T> z0, z1;
    std::vector<int32_t> labels;
    double cost = 0.0;
    int64_t fallbacks = 0;
};

template <class T>
CoupledBatch<T> couple_batch(const Tensor<double>& z0_std, const std::vector<int32_t>& labels,
                             const std::string& coupling, int64_t dual_iterations,
                             RngStream& rng) {
    int64_t n = z0_std.shape[0], d = z0_std.shape[1];
    Tensor<double> z1 = gaussian_sample<double>(rng, {n, d});
    CoupledBatch<T> out;
    out.labels = labels;
    if (coupling == "independent") {
        out.z0 = z0_std.cast<T>();
        out.z1 = z1.cast<T>();
        double c = 0.0;
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j) {
                double diff = z0_std(i, j) - z1(i, j);
                c += diff * diff;
            }
        out.cost = c / double(n);
        return out;
    }

    // Class blocks (or one block when unconditional).
    std::vector<std::vector<int64_t>> blocks;
    if (labels.empty()) {
        blocks.emplace_back();
        for (int64_t i = 0; i < n; ++i) blocks.back().push_back(i);
    } else {
        int32_t maxl = 0;
        for (int32_t l : labels) maxl = std::max(maxl, l);
        blocks.assign(static_cast<size_t>(maxl) + 1, {});
        for (int64_t i = 0; i < n; ++i) blocks[static_cast<size_t>(labels[static_cast<size_t>(i)])].push_back(i);
    }

    Tensor<double> z0_out({n, d}), z1_out({n, d});
    std::vector<int32_t> labels_out(labels.empty() ? 0 : static_cast<size_t>(n));
    int64_t row = 0;
    double total_cost = 0.0;
    for (const auto& blk : blocks) {
        if (blk.empty()) continue;
        int64_t bn = static_cast<int64_t>(blk.size());
        Tensor<double> a({bn, d}), b({bn, d});
        for (int64_t i = 0; i < bn; ++i)
            for (int64_t j = 0; j < d; ++j) {
                a(i, j) = z0_std(blk[static_cast<size_t>(i)], j);
                b(i, j) = z1(blk[static_cast<size_t>(i)], j);
            }
        ot::TransportPlan plan = ot::solve_coupling(a, b, dual_iterations);
        if (plan.used_fallback) out.fallbacks++;
        ot::MatchedPairs mp = ot::match_pairs(plan, a, b);
        for (int64_t i = 0; i < bn; ++i) {
            for (int64_t j = 0; j < d; ++j) {
                z0_out(row, j) = mp.z0(i, j);
                z1_out(row, j) = mp.z1(i, j);
            }
            if (!labels.empty())
                labels_out[static_cast<size_t>(row)] =
                    labels[static_cast<size_t>(blk[static_cast<size_t>(i)])];
            ++row;
        }
        total_cost += plan.cost * double(bn);
    }
    out.z0 = z0_out.cast<T>();
    out.z1 = z1_out.cast<T>();
    out.labels = std::move(labels_out);
    out.cost = total_cost / double(n);
    return out;
}

template <class T>
DeroDeTrainResult<T> train_derode(const LatentSet& data, const DeroDeTrainConfig& cfg,
                                  RngStream& rng) {
    cfg.validate();
    if (data.size() == 0) throw std::invalid_argument("empty latent dataset");
    int64_t n = data.size(), d = data.dim();
    bool conditional = cfg.conditional && !data.labels.empty();
    int32_t num_labels = 0;
    for (int32_t l : data.labels) num_labels = std::max(num_labels, l + 1);

    DeroDeTrainResult<T> res;
    RngStream init_rng = rng.child("derode-init", 0);
    res.model = init_drift_model<T>(d, conditional, num_labels, cfg, init_rng);
    DriftModel<T>& m = res.model;

    // Standardize the latent space so the Gaussian end matches the data scale.
    for (int64_t j = 0; j < d; ++j) {
        double s = 0, sq = 0;
        for (int64_t i = 0; i < n; ++i) {
            s += data.points(i, j);
            sq += data.points(i, j) * data.points(i, j);
        }
        double mean = s / double(n);
        double var = sq / double(n) - mean * mean;
        m.mean[static_cast<size_t>(j)] = mean;
        m.std[static_cast<size_t>(j)] = std::sqrt(std::max(var, 1e-12));
    }

    std::vector<Tensor<T>> params = nn::params_to_vector(m.params);
    nn::AdamState<T> adam = nn::adam_init(params);
    std::vector<Tensor<T>> snapshot = params;

    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto t_start = std::chrono::steady_clock::now();
        RngStream erng = rng.child("derode-epoch", static_cast<uint64_t>(epoch));
        shuffle(order, erng);
        double lr = nn::step_decay_lr(cfg.lr, cfg.lr_decay, cfg.lr_decay_every, epoch);

        DeroDeEpochLog lg;
        lg.epoch = epoch;
        lg.lr = lr;
        int64_t batches = 0;
        bool bad = false;

        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch)) {
            size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch));
            int64_t B = static_cast<int64_t>(stop - start);
            Tensor<double> z0_raw({B, d});
            std::vector<int32_t> labels(conditional ? static_cast<size_t>(B) : 0);
            for (int64_t i = 0; i < B; ++i) {
                int64_t src = order[start + static_cast<size_t>(i)];
                for (int64_t j = 0; j < d; ++j) z0_raw(i, j) = data.points(src, j);
                if (conditional) labels[static_cast<size_t>(i)] = data.labels[static_cast<size_t>(src)];
            }
            Tensor<double> z0_std({B, d});
            for (int64_t i = 0; i < B; ++i)
                for (int64_t j = 0; j < d; ++j)
                    z0_std(i, j) = (z0_raw(i, j) - m.mean[static_cast<size_t>(j)]) /
                                   m.std[static_cast<size_t>(j)];

            RngStream brng = erng.child("batch", start / static_cast<size_t>(cfg.batch));
            try {
                CoupledBatch<T> cb = couple_batch<T>(z0_std, labels, cfg.coupling,
                                                     cfg.ot_dual_iterations, brng);
                TotalLoss<T> loss = loss_total(m.spec, m.params, cb.z0, cb.z1, cb.labels,
                                               cfg.lambda_cl, brng);
                auto [np, ns] = nn::adam_step(adam, params, loss.grads, lr);
                params = std::move(np);
                adam = std::move(ns);
                m.params = nn::params_from_vector(m.spec, params);
                lg.j_drift += loss.drift;
                lg.j_cl += loss.consistency;
                lg.total += loss.total;
                lg.coupling_cost += cb.cost;
                lg.ot_fallbacks += cb.fallbacks;
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
        lg.j_drift /= double(batches);
        lg.j_cl /= double(batches);
        lg.total /= double(batches);
        lg.coupling_cost /= double(batches);
        lg.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
        res.log.push_back(lg);
        snapshot = params;
    }
    return res;
}

// --------------------------------------------------------------- sampling

// Drift evaluation in the model's internal space: v(z, t [, labels]).
template <class T>
Tensor<T> eval_drift(const DriftModel<T>& m, const Tensor<T>& z, double t,
                     const std::vector<int32_t>& labels) {
    std::vector<double> ts(static_cast<size_t>(z.shape[0]), t);
    return nn::mlp_forward(m.spec, m.params, z, ts,
                           m.conditional ? labels : std::vector<int32_t>{});
}

// One-step generation z0 = z1 - v(z1, t=1).  `z1` lives in the internal
// (standardized) space; the result is mapped back to raw latent coordinates.
template <class T>
Tensor<double> sample_one_step(const DriftModel<T>& m, const Tensor<double>& z1,
                               const std::vector<int32_t>& labels) {
    Tensor<T> z = z1.cast<T>();
    Tensor<T> v = eval_drift(m, z, 1.0, labels);
    for (int64_t i = 0; i < z.numel(); ++i) z(i) = z(i) - T(1.0) * v(i);
    require_finite(z, "one-step sample");
    return destandardize(m, z);
}

// Euler integration of dz = -v(z, t) dt from t=1 down to 0 in `steps` equal
// steps.  steps=1 reproduces sample_one_step bit for bit.
template <class T>
Tensor<double> sample_ode_multistep(const DriftModel<T>& m, const Tensor<double>& z1,
                                    const std::vector<int32_t>& labels, int64_t steps) {
    if (steps < 1) throw std::invalid_argument("steps must be >= 1");
    Tensor<T> z = z1.cast<T>();
    const T dt = T(1.0) / T(double(steps));
    for (int64_t k = 0; k < steps; ++k) {
        double t = 1.0 - double(k) / double(steps);
        Tensor<T> v = eval_drift(m, z, t, labels);
        for (int64_t i = 0; i < z.numel(); ++i) z(i) = z(i) - dt * v(i);
        require_finite(z, "multi-step sample");
    }
    return destandardize(m, z);
}

// ------------------------------------------------------------- persistence

template <class T>
void drift_to_archive(const DriftModel<T>& m, io::Archive& ar) {
    ar.meta["kind"] = "derode";
    ar.meta["spec"] = m.spec.to_json();
    ar.meta["conditional"] = m.conditional;
    ar.meta["dim"] = m.dim;
    for (size_t l = 0; l < m.params.W.size(); ++l) {
        ar.add("W" + std::to_string(l), m.params.W[l]);
        ar.add("b" + std::to_string(l), m.params.b[l]);
    }
    if (m.params.label_embed.numel() > 0) ar.add("label_embed", m.params.label_embed);
    Tensor<double> mean({m.dim}), sd({m.dim});
    for (int64_t j = 0; j < m.dim; ++j) {
        mean(j) = m.mean[static_cast<size_t>(j)];
        sd(j) = m.std[static_cast<size_t>(j)];
    }
    ar.add("latent_mean", mean);
    ar.add("latent_std", sd);
}

template <class T>
DriftModel<T> drift_from_archive(const io::Archive& ar) {
    if (ar.meta.value("kind", "") != "derode")
        throw std::runtime_error("archive does not hold a drift checkpoint");
    DriftModel<T> m;
    m.spec = nn::MlpSpec::from_json(ar.meta.at("spec"));
    m.conditional = ar.meta.at("conditional").get<bool>();
    m.dim = ar.meta.at("dim").get<int64_t>();
    for (int64_t l = 0; l < m.spec.num_layers(); ++l) {
        m.params.W.push_back(ar.get_as<T>("W" + std::to_string(l)));
        m.params.b.push_back(ar.get_as<T>("b" + std::to_string(l)));
    }
    if (m.spec.label_embed_dim > 0) m.params.label_embed = ar.get_as<T>("label_embed");
    Tensor<double> mean = ar.get_as<double>("latent_mean");
    Tensor<double> sd = ar.get_as<double>("latent_std");
    m.mean.assign(mean.data.begin(), mean.data.end());
    m.std.assign(sd.data.begin(), sd.data.end());
    return m;
}

}  // namespace mf::derode
