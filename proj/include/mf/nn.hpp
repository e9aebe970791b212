// Minimal MLP stack: spec, parameters, batched forward/backward, Adam.
//
// The nets here are small enough that a hand-rolled reverse pass is simpler
// and easier to verify than an autodiff dependency; every gradient path is
// covered by central-difference checks in the test suite.  Matrix products go
// through Eigen views of the flat tensors.
#pragma once

#include "mf/rng.hpp"
#include "mf/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace mf::nn {

using nlohmann::json;

enum class Act { relu, silu, tanh };

inline std::string act_name(Act a) {
    switch (a) {
        case Act::relu: return "relu";
        case Act::silu: return "silu";
        case Act::tanh: return "tanh";
    }
    return "silu";
}
inline Act act_from_name(const std::string& s) {
    if (s == "relu") return Act::relu;
    if (s == "silu") return Act::silu;
    if (s == "tanh") return Act::tanh;
    throw std::invalid_argument("unknown activation: " + s);
}

template <class T>
inline T act_value(Act a, T x) {
    switch (a) {
        case Act::relu: return x > T(0) ? x : T(0);
        case Act::silu: return x / (T(1) + std::exp(-x));
        case Act::tanh: return std::tanh(x);
    }
    return x;
}
// Derivative as a function of the pre-activation.
template <class T>
inline T act_deriv(Act a, T x) {
    switch (a) {
        case Act::relu: return x > T(0) ? T(1) : T(0);
        case Act::silu: {
            T s = T(1) / (T(1) + std::exp(-x));
            return s * (T(1) + x * (T(1) - s));
        }
        case Act::tanh: {
            T th = std::tanh(x);
            return T(1) - th * th;
        }
    }
    return T(1);
}

struct MlpSpec {
    int64_t input_dim = 0;
    std::vector<int64_t> hidden;
    int64_t output_dim = 0;
    Act act = Act::silu;
    int64_t time_embed_dim = 0;   // even; 0 disables the time input
    int64_t label_embed_dim = 0;  // 0 disables label conditioning
    int64_t num_labels = 0;       // embedding table rows when conditioned

    int64_t first_in() const { return input_dim + time_embed_dim + label_embed_dim; }

    // [first_in, hidden..., output_dim]
    std::vector<int64_t> layer_dims() const {
        std::vector<int64_t> d;
        d.push_back(first_in());
        for (int64_t h : hidden) d.push_back(h);
        d.push_back(output_dim);
        return d;
    }
    int64_t num_layers() const { return static_cast<int64_t>(hidden.size()) + 1; }

    void validate() const {
        if (input_dim <= 0 || output_dim <= 0)
            throw std::invalid_argument("mlp spec needs positive input/output dims");
        for (int64_t h : hidden)
            if (h <= 0) throw std::invalid_argument("mlp hidden dims must be positive");
        if (time_embed_dim < 0 || time_embed_dim % 2 != 0)
            throw std::invalid_argument("time embedding dim must be even and >= 0");
        if (label_embed_dim < 0) throw std::invalid_argument("negative label embedding dim");
        if (label_embed_dim > 0 && num_labels <= 0)
            throw std::invalid_argument("label conditioning needs num_labels > 0");
    }

    json to_json() const {
        return json{{"input_dim", input_dim},   {"hidden", hidden},
                    {"output_dim", output_dim}, {"act", act_name(act)},
                    {"time_embed_dim", time_embed_dim},
                    {"label_embed_dim", label_embed_dim},
                    {"num_labels", num_labels}};
    }
    static MlpSpec from_json(const json& j) {
        MlpSpec s;
        s.input_dim = j.at("input_dim").get<int64_t>();
        s.hidden = j.at("hidden").get<std::vector<int64_t>>();
        s.output_dim = j.at("output_dim").get<int64_t>();
        s.act = act_from_name(j.at("act").get<std::string>());
        s.time_embed_dim = j.at("time_embed_dim").get<int64_t>();
        s.label_embed_dim = j.at("label_embed_dim").get<int64_t>();
        s.num_labels = j.at("num_labels").get<int64_t>();
        s.validate();
        return s;
    }
};

template <class T>
struct MlpParams {
    std::vector<Tensor<T>> W;  // per layer, (out x in)
    std::vector<Tensor<T>> b;  // per layer, (out)
    Tensor<T> label_embed;     // (num_labels x label_embed_dim), possibly empty

    template <class U>
    MlpParams<U> cast() const {
        MlpParams<U> o;
        for (auto& w : W) o.W.push_back(w.template cast<U>());
        for (auto& bb : b) o.b.push_back(bb.template cast<U>());
        o.label_embed = label_embed.template cast<U>();
        return o;
    }
};

// He init for relu/silu, Xavier for tanh; biases zero; embeddings N(0, 0.5^2).
template <class T>
MlpParams<T> init_mlp(const MlpSpec& spec, RngStream& rng) {
    spec.validate();
    MlpParams<T> p;
    auto dims = spec.layer_dims();
    for (size_t l = 0; l + 1 < dims.size(); ++l) {
        int64_t in = dims[l], out = dims[l + 1];
        double scale = (spec.act == Act::tanh) ? std::sqrt(1.0 / double(in))
                                               : std::sqrt(2.0 / double(in));
        Tensor<T> w({out, in});
        for (auto& v : w.data) v = static_cast<T>(rng.normal() * scale);
        p.W.push_back(std::move(w));
        p.b.push_back(Tensor<T>({out}));
    }
    if (spec.label_embed_dim > 0) {
        p.label_embed = Tensor<T>({spec.num_labels, spec.label_embed_dim});
        for (auto& v : p.label_embed.data) v = static_cast<T>(rng.normal() * 0.5);
    }
    return p;
}

// Deterministic sinusoidal features of t in [0,1]: [sin(w_i t)..., cos(w_i t)...],
// w_i = 2*pi*2^i.
template <class T>
Tensor<T> time_embedding(const std::vector<double>& t, int64_t dim) {
    int64_t half = dim / 2;
    Tensor<T> e({static_cast<int64_t>(t.size()), dim});
    for (size_t n = 0; n < t.size(); ++n) {
        for (int64_t i = 0; i < half; ++i) {
            double w = 2.0 * std::numbers::pi * std::pow(2.0, double(i));
            e(static_cast<int64_t>(n), i) = static_cast<T>(std::sin(w * t[n]));
            e(static_cast<int64_t>(n), half + i) = static_cast<T>(std::cos(w * t[n]));
        }
    }
    return e;
}

template <class T>
struct MlpCache {
    Tensor<T> input_cat;            // N x first_in
    std::vector<Tensor<T>> pre;     // pre-activation per hidden layer
    std::vector<int32_t> labels;    // copied when conditioned
    int64_t batch = 0;
};

// Batched forward. `t` must have N entries when the spec has a time input;
// `labels` likewise for label conditioning.  Returns N x output_dim.
template <class T>
Tensor<T> mlp_forward_cached(const MlpSpec& spec, const MlpParams<T>& params,
                             const Tensor<T>& x, const std::vector<double>& t,
                             const std::vector<int32_t>& labels, MlpCache<T>& cache) {
    int64_t n = x.shape.at(0);
    if (x.numel() != n * spec.input_dim) throw std::invalid_argument("mlp input shape mismatch");
    if (spec.time_embed_dim > 0 && static_cast<int64_t>(t.size()) != n)
        throw std::invalid_argument("mlp forward: t batch mismatch");
    if (spec.label_embed_dim > 0 && static_cast<int64_t>(labels.size()) != n)
        throw std::invalid_argument("mlp forward: label batch mismatch");

    cache.batch = n;
    cache.input_cat = Tensor<T>({n, spec.first_in()});
    auto xc = cache.input_cat.mat(n, spec.first_in());
    xc.block(0, 0, n, spec.input_dim) = x.mat(n, spec.input_dim);
    if (spec.time_embed_dim > 0) {
        Tensor<T> te = time_embedding<T>(t, spec.time_embed_dim);
        xc.block(0, spec.input_dim, n, spec.time_embed_dim) = te.mat(n, spec.time_embed_dim);
    }
    if (spec.label_embed_dim > 0) {
        cache.labels = labels;
        auto emb = params.label_embed.mat(spec.num_labels, spec.label_embed_dim);
        for (int64_t i = 0; i < n; ++i) {
            int32_t lb = labels[static_cast<size_t>(i)];
            if (lb < 0 || lb >= spec.num_labels)
                throw std::invalid_argument("label id out of range");
            xc.block(i, spec.input_dim + spec.time_embed_dim, 1, spec.label_embed_dim) =
                emb.row(lb);
        }
    }

    auto dims = spec.layer_dims();
    cache.pre.clear();
    Tensor<T> h = cache.input_cat;
    for (int64_t l = 0; l < spec.num_layers(); ++l) {
        int64_t in = dims[static_cast<size_t>(l)], out = dims[static_cast<size_t>(l) + 1];
        Tensor<T> z({n, out});
        z.mat(n, out).noalias() = h.mat(n, in) * params.W[static_cast<size_t>(l)].mat(out, in).transpose();
        z.mat(n, out).rowwise() += params.b[static_cast<size_t>(l)].vec().transpose();
        if (l + 1 < spec.num_layers()) {
            cache.pre.push_back(z);
            Tensor<T> a({n, out});
            for (int64_t i = 0; i < z.numel(); ++i) a(i) = act_value(spec.act, z(i));
            h = std::move(a);
        } else {
            h = std::move(z);
        }
    }
    require_finite(h, "mlp forward output");
    return h;
}

template <class T>
Tensor<T> mlp_forward(const MlpSpec& spec, const MlpParams<T>& params, const Tensor<T>& x,
                      const std::vector<double>& t = {}, const std::vector<int32_t>& labels = {}) {
    MlpCache<T> cache;
    return mlp_forward_cached(spec, params, x, t, labels, cache);
}

// Single-point convenience.
template <class T>
std::vector<T> mlp_forward_one(const MlpSpec& spec, const MlpParams<T>& params,
                               const std::vector<T>& z, double t = 0.0,
                               std::optional<int32_t> label = std::nullopt) {
    Tensor<T> x({1, static_cast<int64_t>(z.size())}, std::vector<T>(z));
    std::vector<double> tv = spec.time_embed_dim > 0 ? std::vector<double>{t} : std::vector<double>{};
    std::vector<int32_t> lv;
    if (spec.label_embed_dim > 0) {
        if (!label) throw std::invalid_argument("conditioned net needs a label");
        lv.push_back(*label);
    }
    Tensor<T> out = mlp_forward(spec, params, x, tv, lv);
    return out.data;
}

template <class T>
struct MlpBackward {
    MlpParams<T> grads;     // same shapes as the parameters
    Tensor<T> input_grad;   // N x input_dim (raw input block only)
};

// Reverse pass for a cached forward; `grad_out` is dLoss/dOutput (N x out).
// Gradients flow into weights, biases, the label embedding rows that were
// used, and the raw input block (time features carry no parameters).
template <class T>
MlpBackward<T> mlp_backward(const MlpSpec& spec, const MlpParams<T>& params,
                            const MlpCache<T>& cache, const Tensor<T>& grad_out) {
    int64_t n = cache.batch;
    auto dims = spec.layer_dims();
    MlpBackward<T> res;
    res.grads.W.resize(params.W.size());
    res.grads.b.resize(params.b.size());

    Tensor<T> g = grad_out;  // N x dims[l+1]
    for (int64_t l = spec.num_layers() - 1; l >= 0; --l) {
        int64_t in = dims[static_cast<size_t>(l)], out = dims[static_cast<size_t>(l) + 1];
        // activations that fed layer l
        Tensor<T> hin;
        if (l == 0) {
            hin = cache.input_cat;
        } else {
            const Tensor<T>& pre = cache.pre[static_cast<size_t>(l) - 1];
            hin = Tensor<T>({n, in});
            for (int64_t i = 0; i < pre.numel(); ++i) hin(i) = act_value(spec.act, pre(i));
        }
        Tensor<T> gw({out, in});
        gw.mat(out, in).noalias() = g.mat(n, out).transpose() * hin.mat(n, in);
        Tensor<T> gb({out});
        gb.vec() = g.mat(n, out).colwise().sum().transpose();
        res.grads.W[static_cast<size_t>(l)] = std::move(gw);
        res.grads.b[static_cast<size_t>(l)] = std::move(gb);

        Tensor<T> gprev({n, in});
        gprev.mat(n, in).noalias() = g.mat(n, out) * params.W[static_cast<size_t>(l)].mat(out, in);
        if (l > 0) {
            const Tensor<T>& pre = cache.pre[static_cast<size_t>(l) - 1];
            for (int64_t i = 0; i < gprev.numel(); ++i)
                gprev(i) *= act_deriv(spec.act, pre(i));
            if (!all_finite(gprev))
                throw std::runtime_error("non-finite gradient at layer " + std::to_string(l));
        }
        g = std::move(gprev);
    }

    res.input_grad = Tensor<T>({n, spec.input_dim});
    res.input_grad.mat(n, spec.input_dim) = g.mat(n, spec.first_in()).block(0, 0, n, spec.input_dim);

    if (spec.label_embed_dim > 0) {
        res.grads.label_embed = Tensor<T>({spec.num_labels, spec.label_embed_dim});
        auto ge = res.grads.label_embed.mat(spec.num_labels, spec.label_embed_dim);
        auto gc = g.mat(n, spec.first_in());
        for (int64_t i = 0; i < n; ++i)
            ge.row(cache.labels[static_cast<size_t>(i)]) +=
                gc.block(i, spec.input_dim + spec.time_embed_dim, 1, spec.label_embed_dim);
    }
    return res;
}

// ------------------------------------------------------------------ Adam

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <class T>
struct AdamState {
    std::vector<Tensor<T>> m, v;
    int64_t step = 0;
};

template <class T>
AdamState<T> adam_init(const std::vector<Tensor<T>>& params) {
    AdamState<T> s;
    for (const auto& p : params) {
        s.m.push_back(Tensor<T>(p.shape));
        s.v.push_back(Tensor<T>(p.shape));
    }
    return s;
}

// Pure update: returns the new parameters and state, inputs untouched.
template <class T>
std::pair<std::vector<Tensor<T>>, AdamState<T>> adam_step(const AdamState<T>& state,
                                                          const std::vector<Tensor<T>>& params,
                                                          const std::vector<Tensor<T>>& grads,
                                                          double lr,
                                                          const AdamConfig& cfg = {}) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw std::invalid_argument("adam: mismatched parameter/gradient/state sizes");
    AdamState<T> ns = state;
    ns.step = state.step + 1;
    std::vector<Tensor<T>> np = params;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(ns.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(ns.step));
    for (size_t k = 0; k < params.size(); ++k) {
        if (params[k].shape != grads[k].shape)
            throw std::invalid_argument("adam: gradient shape mismatch at slot " + std::to_string(k));
        auto& m = ns.m[k];
        auto& v = ns.v[k];
        for (int64_t i = 0; i < params[k].numel(); ++i) {
            double g = static_cast<double>(grads[k](i));
            double mm = cfg.beta1 * static_cast<double>(m(i)) + (1.0 - cfg.beta1) * g;
            double vv = cfg.beta2 * static_cast<double>(v(i)) + (1.0 - cfg.beta2) * g * g;
            m(i) = static_cast<T>(mm);
            v(i) = static_cast<T>(vv);
            double upd = lr * (mm / bc1) / (std::sqrt(vv / bc2) + cfg.eps);
            np[k](i) = static_cast<T>(static_cast<double>(params[k](i)) - upd);
        }
        require_finite(np[k], "adam-updated parameter slot " + std::to_string(k));
    }
    return {std::move(np), std::move(ns)};
}

// Stepwise decay: lr(epoch) = base * decay^(epoch / every)  (integer division).
inline double step_decay_lr(double base, double decay, int64_t every, int64_t epoch) {
    return base * std::pow(decay, double(epoch / every));
}

// Flattened views used by the optimizers and checkpoints; order is fixed:
// W0..Wn, b0..bn, then the label embedding when present.
template <class T>
std::vector<Tensor<T>> params_to_vector(const MlpParams<T>& p) {
    std::vector<Tensor<T>> v;
    for (const auto& w : p.W) v.push_back(w);
    for (const auto& b : p.b) v.push_back(b);
    if (p.label_embed.numel() > 0) v.push_back(p.label_embed);
    return v;
}

template <class T>
MlpParams<T> params_from_vector(const MlpSpec& spec, const std::vector<Tensor<T>>& v) {
    MlpParams<T> p;
    size_t nl = static_cast<size_t>(spec.num_layers());
    size_t expect = 2 * nl + (spec.label_embed_dim > 0 ? 1 : 0);
    if (v.size() != expect) throw std::invalid_argument("params_from_vector: wrong slot count");
    for (size_t l = 0; l < nl; ++l) p.W.push_back(v[l]);
    for (size_t l = 0; l < nl; ++l) p.b.push_back(v[nl + l]);
    if (spec.label_embed_dim > 0) p.label_embed = v[2 * nl];
    return p;
}

}  // namespace mf::nn
