#pragma once

// Vector-quantized autoencoder over windowed motion sequences.
//
// The encoder walks a sequence window by window carrying a small learned
// recurrent state; each window yields one latent point, which is snapped to
// its nearest codebook vector (straight-through gradient).  The decoder
// mirrors the walk.  Loss: per-(frame, joint) unsquared L2 reconstruction
// plus squared codebook and commitment terms (commitment scaled by beta).

#include "mf/checkpoint.hpp"
#include "mf/nn.hpp"
#include "mf/rng.hpp"
#include "mf/tensor.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mf::vq {

using nlohmann::json;

struct VqConfig {
    int64_t codebook_size = 64;  // K
    int64_t latent_dim = 16;     // D
    int64_t window = 8;          // frames per latent point
    int64_t state_dim = 16;      // recurrent carry between windows
    double beta = 0.25;          // commitment weight
    bool squared_recon = false;  // true swaps the L2-sum reconstruction for squared error
    std::vector<int64_t> enc_hidden{128, 128};
    std::vector<int64_t> dec_hidden{128, 128};
    nn::Act act = nn::Act::silu;

    void validate(int64_t frames, int64_t joints) const {
        if (codebook_size <= 0 || latent_dim <= 0) throw std::invalid_argument("vq: K, D must be positive");
        if (beta <= 0) throw std::invalid_argument("vq: beta must be positive");
        if (window <= 0 || frames % window != 0)
            throw std::invalid_argument("vq: window must divide the frame count");
        if (state_dim < 0 || joints <= 0) throw std::invalid_argument("vq: bad state/joint dims");
    }

    int64_t window_flat(int64_t joints) const { return window * joints * 3; }

    nn::MlpSpec encoder_spec(int64_t joints) const {
        nn::MlpSpec s;
        s.input_dim = window_flat(joints) + state_dim;
        s.hidden = enc_hidden;
        s.output_dim = latent_dim + state_dim;
        s.act = act;
        return s;
    }
    nn::MlpSpec decoder_spec(int64_t joints) const {
        nn::MlpSpec s;
        s.input_dim = latent_dim + state_dim;
        s.hidden = dec_hidden;
        s.output_dim = window_flat(joints) + state_dim;
        s.act = act;
        return s;
    }

    json to_json() const {
        return json{{"codebook_size", codebook_size}, {"latent_dim", latent_dim},
                    {"window", window},               {"state_dim", state_dim},
                    {"beta", beta},                   {"squared_recon", squared_recon},
                    {"enc_hidden", enc_hidden},       {"dec_hidden", dec_hidden},
                    {"act", nn::act_name(act)}};
    }
    static VqConfig from_json(const json& j) {
        VqConfig c;
        c.codebook_size = j.value("codebook_size", c.codebook_size);
        c.latent_dim = j.value("latent_dim", c.latent_dim);
        c.window = j.value("window", c.window);
        c.state_dim = j.value("state_dim", c.state_dim);
        c.beta = j.value("beta", c.beta);
        c.squared_recon = j.value("squared_recon", c.squared_recon);
        c.enc_hidden = j.value("enc_hidden", c.enc_hidden);
        c.dec_hidden = j.value("dec_hidden", c.dec_hidden);
        if (j.contains("act")) c.act = nn::act_from_name(j.at("act").get<std::string>());
        return c;
    }
};

template <class T>
struct VqModel {
    VqConfig cfg;
    int64_t Tf = 0;  // frames per sequence
    int64_t V = 0;  // joints
    nn::MlpSpec enc_spec, dec_spec;
    nn::MlpParams<T> enc, dec;
    Tensor<T> codebook;  // K x D

    int64_t windows() const { return Tf / cfg.window; }

    template <class U>
    VqModel<U> cast() const {
        VqModel<U> o;
        o.cfg = cfg;
        o.Tf = Tf;
        o.V = V;
        o.enc_spec = enc_spec;
        o.dec_spec = dec_spec;
        o.enc = enc.template cast<U>();
        o.dec = dec.template cast<U>();
        o.codebook = codebook.template cast<U>();
        return o;
    }
};

template <class T>
VqModel<T> init_vq(const VqConfig& cfg, int64_t frames, int64_t joints, RngStream& rng) {
    cfg.validate(frames, joints);
    VqModel<T> m;
    m.cfg = cfg;
    m.Tf = frames;
    m.V = joints;
    m.enc_spec = cfg.encoder_spec(joints);
    m.dec_spec = cfg.decoder_spec(joints);
    RngStream enc_rng = rng.child("vq-encoder", 0);
    RngStream dec_rng = rng.child("vq-decoder", 0);
    RngStream cb_rng = rng.child("vq-codebook", 0);
    m.enc = nn::init_mlp<T>(m.enc_spec, enc_rng);
    m.dec = nn::init_mlp<T>(m.dec_spec, dec_rng);
    m.codebook = Tensor<T>({cfg.codebook_size, cfg.latent_dim});
    for (auto& v : m.codebook.data) v = static_cast<T>(cb_rng.normal() * 0.5);
    return m;
}

// (N, T, V, 3) -> (N, W, F) flattened windows, F = window * V * 3.  Row-major
// layout means each window is already contiguous; this is a reshape.
template <class T>
Tensor<T> to_windows(const Tensor<T>& frames, int64_t window) {
    if (frames.rank() != 4) throw std::invalid_argument("expected N x T x V x 3 frames");
    int64_t N = frames.shape[0], Tf = frames.shape[1], V = frames.shape[2];
    if (Tf % window != 0) throw std::invalid_argument("window must divide frame count");
    return frames.reshaped({N, Tf / window, window * V * 3});
}

template <class T>
Tensor<T> from_windows(const Tensor<T>& wins, int64_t frames, int64_t joints) {
    if (wins.rank() != 3) throw std::invalid_argument("expected N x W x F windows");
    return wins.reshaped({wins.shape[0], frames, joints, 3});
}

// Encoder pass: frames (N, T, V, 3) -> pre-quantization latents (N, W, D).
template <class T>
Tensor<T> encode_windows(const VqModel<T>& m, const Tensor<T>& frames) {
    Tensor<T> X = to_windows(frames, m.cfg.window);
    int64_t N = X.shape[0], W = X.shape[1], F = X.shape[2];
    int64_t D = m.cfg.latent_dim, R = m.cfg.state_dim;
    Tensor<T> z({N, W, D});
    Tensor<T> h({N, R});
    Tensor<T> in({N, F + R});
    for (int64_t w = 0; w < W; ++w) {
        for (int64_t n = 0; n < N; ++n) {
            std::copy_n(X.data.data() + (n * W + w) * F, F, in.data.data() + n * (F + R));
            std::copy_n(h.data.data() + n * R, R, in.data.data() + n * (F + R) + F);
        }
        Tensor<T> out = nn::mlp_forward(m.enc_spec, m.enc, in);
        for (int64_t n = 0; n < N; ++n) {
            std::copy_n(out.data.data() + n * (D + R), D, z.data.data() + (n * W + w) * D);
            std::copy_n(out.data.data() + n * (D + R) + D, R, h.data.data() + n * R);
        }
    }
    return z;
}

template <class T>
struct QuantizeResult {
    Tensor<T> quantized;           // same shape as input
    std::vector<int64_t> indices;  // one code id per latent point
    double codebook_term = 0.0;    // sum ||zq - z||^2
    double commit_term = 0.0;      // beta * sum ||zq - z||^2
};

// Snap each D-dim point of `z` (last axis D) to its nearest code; ties go to
// the lowest code index.
template <class T>
QuantizeResult<T> quantize(const Tensor<T>& z, const Tensor<T>& codebook, double beta) {
    if (codebook.rank() != 2 || codebook.shape[0] == 0)
        throw std::invalid_argument("empty or malformed codebook");
    int64_t K = codebook.shape[0], D = codebook.shape[1];
    if (z.numel() % D != 0 || z.shape.back() != D)
        throw std::invalid_argument("latent dim does not match codebook");
    int64_t M = z.numel() / D;
    QuantizeResult<T> res;
    res.quantized = z;
    res.indices.resize(static_cast<size_t>(M));
    for (int64_t i = 0; i < M; ++i) {
        const T* p = z.data.data() + i * D;
        double best = std::numeric_limits<double>::infinity();
        int64_t bk = 0;
        for (int64_t k = 0; k < K; ++k) {
            const T* c = codebook.data.data() + k * D;
            double d2 = 0.0;
            for (int64_t j = 0; j < D; ++j) {
                double diff = double(p[j]) - double(c[j]);
                d2 += diff * diff;
            }
            if (d2 < best) {  // strict keeps the lowest index on ties
                best = d2;
                bk = k;
            }
        }
        res.indices[static_cast<size_t>(i)] = bk;
        std::copy_n(codebook.data.data() + bk * D, D, res.quantized.data.data() + i * D);
        res.codebook_term += best;
    }
    res.commit_term = beta * res.codebook_term;
    return res;
}

// Decoder pass: quantized latents (N, W, D) -> frames (N, T, V, 3).
template <class T>
Tensor<T> decode_windows(const VqModel<T>& m, const Tensor<T>& zq) {
    if (zq.rank() != 3) throw std::invalid_argument("expected N x W x D latents");
    int64_t N = zq.shape[0], W = zq.shape[1];
    if (W != m.windows() || zq.shape[2] != m.cfg.latent_dim)
        throw std::invalid_argument("latent geometry does not match the model");
    int64_t D = m.cfg.latent_dim, R = m.cfg.state_dim, F = m.cfg.window_flat(m.V);
    Tensor<T> X({N, W, F});
    Tensor<T> h({N, R});
    Tensor<T> in({N, D + R});
    for (int64_t w = 0; w < W; ++w) {
        for (int64_t n = 0; n < N; ++n) {
            std::copy_n(zq.data.data() + (n * W + w) * D, D, in.data.data() + n * (D + R));
            std::copy_n(h.data.data() + n * R, R, in.data.data() + n * (D + R) + D);
        }
        Tensor<T> out = nn::mlp_forward(m.dec_spec, m.dec, in);
        for (int64_t n = 0; n < N; ++n) {
            std::copy_n(out.data.data() + n * (F + R), F, X.data.data() + (n * W + w) * F);
            std::copy_n(out.data.data() + n * (F + R) + F, R, h.data.data() + n * R);
        }
    }
    return from_windows(X, m.Tf, m.V);
}

struct VqLossTerms {
    double total = 0, recon = 0, codebook = 0, commit = 0;
};

// Three-term objective.  E/Ehat share any shape whose last axis is the
// coordinate axis; reconstruction sums the per-(…, joint) L2 norms over that
// axis (or squared error when squared_recon).  z/zhat share any shape; the
// quantization terms are plain squared sums, the commitment one scaled by beta.
template <class T>
VqLossTerms vq_loss(const Tensor<T>& E, const Tensor<T>& Ehat, const Tensor<T>& z,
                    const Tensor<T>& zhat, double beta, bool squared_recon = false) {
    if (E.shape != Ehat.shape) throw std::invalid_argument("vq_loss: frame shapes differ");
    if (z.shape != zhat.shape) throw std::invalid_argument("vq_loss: latent shapes differ");
    VqLossTerms out;
    int64_t C = E.shape.empty() ? 1 : E.shape.back();
    int64_t groups = E.numel() / std::max<int64_t>(C, 1);
    for (int64_t g = 0; g < groups; ++g) {
        double s = 0.0;
        for (int64_t c = 0; c < C; ++c) {
            double d = double(E(g * C + c)) - double(Ehat(g * C + c));
            s += d * d;
        }
        out.recon += squared_recon ? s : std::sqrt(s);
    }
    for (int64_t i = 0; i < z.numel(); ++i) {
        double d = double(zhat(i)) - double(z(i));
        out.codebook += d * d;
    }
    out.commit = beta * out.codebook;
    out.total = out.recon + out.codebook + out.commit;
    if (!std::isfinite(out.total)) throw std::runtime_error("non-finite vq loss");
    return out;
}

struct VqTrainOptions {
    int64_t epochs = 500;
    int64_t batch = 128;
    double lr = 1e-2;
    double lr_decay = 0.98;
    int64_t lr_decay_every = 10;
    int64_t dead_code_epochs = 50;  // reseed codes unused this many epochs in a row
};

struct VqEpochLog {
    int64_t epoch = 0;
    double recon = 0, codebook = 0, commit = 0, total = 0;
    double usage_frac = 0;  // fraction of codes hit during the epoch
    double lr = 0;
};

template <class T>
struct VqTrainResult {
    VqModel<T> model;
    std::vector<VqEpochLog> log;
    bool aborted = false;       // loss went non-finite; model is the last good state
    int64_t aborted_epoch = -1;
    std::vector<int64_t> final_usage;  // per-code counts from the last epoch
};

namespace detail {

// One minibatch forward/backward.  Returns loss terms (batch means) and fills
// `grads` in the slot order enc(W,b) | dec(W,b) | codebook.
template <class T>
VqLossTerms vq_batch_step(const VqModel<T>& m, const Tensor<T>& X /* B,W,F */,
                          std::vector<Tensor<T>>& grads, std::vector<int64_t>& usage) {
    int64_t B = X.shape[0], W = X.shape[1], F = X.shape[2];
    int64_t D = m.cfg.latent_dim, R = m.cfg.state_dim;

    // --- encoder forward with caches
    std::vector<nn::MlpCache<T>> enc_caches(static_cast<size_t>(W));
    Tensor<T> z({B, W, D});
    {
        Tensor<T> h({B, R});
        Tensor<T> in({B, F + R});
        for (int64_t w = 0; w < W; ++w) {
            for (int64_t n = 0; n < B; ++n) {
                std::copy_n(X.data.data() + (n * W + w) * F, F, in.data.data() + n * (F + R));
                std::copy_n(h.data.data() + n * R, R, in.data.data() + n * (F + R) + F);
            }
            Tensor<T> out = nn::mlp_forward_cached(m.enc_spec, m.enc, in, {}, {},
                                                   enc_caches[static_cast<size_t>(w)]);
            for (int64_t n = 0; n < B; ++n) {
                std::copy_n(out.data.data() + n * (D + R), D, z.data.data() + (n * W + w) * D);
                std::copy_n(out.data.data() + n * (D + R) + D, R, h.data.data() + n * R);
            }
        }
    }

    // --- quantize
    QuantizeResult<T> q = quantize(z, m.codebook, m.cfg.beta);
    for (int64_t idx : q.indices) usage[static_cast<size_t>(idx)]++;

    // --- decoder forward with caches
    std::vector<nn::MlpCache<T>> dec_caches(static_cast<size_t>(W));
    Tensor<T> Xhat({B, W, F});
    {
        Tensor<T> h({B, R});
        Tensor<T> in({B, D + R});
        for (int64_t w = 0; w < W; ++w) {
            for (int64_t n = 0; n < B; ++n) {
                std::copy_n(q.quantized.data.data() + (n * W + w) * D, D,
                            in.data.data() + n * (D + R));
                std::copy_n(h.data.data() + n * R, R, in.data.data() + n * (D + R) + D);
            }
            Tensor<T> out = nn::mlp_forward_cached(m.dec_spec, m.dec, in, {}, {},
                                                   dec_caches[static_cast<size_t>(w)]);
            for (int64_t n = 0; n < B; ++n) {
                std::copy_n(out.data.data() + n * (F + R), F, Xhat.data.data() + (n * W + w) * F);
                std::copy_n(out.data.data() + n * (F + R) + F, R, h.data.data() + n * R);
            }
        }
    }

    // --- loss (batch mean) and output-side gradients
    VqLossTerms terms;
    Tensor<T> gXhat({B, W, F});
    const double inv_b = 1.0 / double(B);
    for (int64_t i = 0; i < X.numel(); i += 3) {
        double d0 = double(Xhat(i)) - double(X(i));
        double d1 = double(Xhat(i + 1)) - double(X(i + 1));
        double d2 = double(Xhat(i + 2)) - double(X(i + 2));
        double s = d0 * d0 + d1 * d1 + d2 * d2;
        if (m.cfg.squared_recon) {
            terms.recon += s * inv_b;
            gXhat(i) = static_cast<T>(2.0 * d0 * inv_b);
            gXhat(i + 1) = static_cast<T>(2.0 * d1 * inv_b);
            gXhat(i + 2) = static_cast<T>(2.0 * d2 * inv_b);
        } else {
            double norm = std::sqrt(s);
            terms.recon += norm * inv_b;
            double coef = norm > 1e-12 ? inv_b / norm : 0.0;
            gXhat(i) = static_cast<T>(d0 * coef);
            gXhat(i + 1) = static_cast<T>(d1 * coef);
            gXhat(i + 2) = static_cast<T>(d2 * coef);
        }
    }
    terms.codebook = q.codebook_term * inv_b;
    terms.commit = q.commit_term * inv_b;
    terms.total = terms.recon + terms.codebook + terms.commit;

    // --- decoder BPTT
    nn::MlpParams<T> dec_acc;  // accumulated over windows
    Tensor<T> g_zq({B, W, D});
    {
        Tensor<T> gh({B, R});  // dLoss/d(state fed forward), zero at the last window
        Tensor<T> gout({B, F + R});
        for (int64_t w = W - 1; w >= 0; --w) {
            for (int64_t n = 0; n < B; ++n) {
                std::copy_n(gXhat.data.data() + (n * W + w) * F, F, gout.data.data() + n * (F + R));
                std::copy_n(gh.data.data() + n * R, R, gout.data.data() + n * (F + R) + F);
            }
            nn::MlpBackward<T> bw =
                nn::mlp_backward(m.dec_spec, m.dec, dec_caches[static_cast<size_t>(w)], gout);
            if (dec_acc.W.empty()) {
                dec_acc = std::move(bw.grads);
            } else {
                for (size_t l = 0; l < dec_acc.W.size(); ++l) {
                    dec_acc.W[l].vec() += bw.grads.W[l].vec();
                    dec_acc.b[l].vec() += bw.grads.b[l].vec();
                }
            }
            for (int64_t n = 0; n < B; ++n) {
                std::copy_n(bw.input_grad.data.data() + n * (D + R), D,
                            g_zq.data.data() + (n * W + w) * D);
                std::copy_n(bw.input_grad.data.data() + n * (D + R) + D, R,
                            gh.data.data() + n * R);
            }
        }
    }

    // --- straight-through + commitment into the encoder latents; codebook grad
    Tensor<T> g_z = g_zq;  // straight-through copy
    Tensor<T> g_codebook({m.cfg.codebook_size, D});
    for (int64_t i = 0; i < z.numel() / D; ++i) {
        int64_t k = q.indices[static_cast<size_t>(i)];
        for (int64_t j = 0; j < D; ++j) {
            double diff = double(q.quantized(i * D + j)) - double(z(i * D + j));
            // commitment beta*||sg(zq) - z||^2 pulls z toward the code...
            g_z(i * D + j) = static_cast<T>(double(g_z(i * D + j)) -
                                            2.0 * m.cfg.beta * diff * inv_b);
            // ...and the codebook term ||zq - sg(z)||^2 pulls the code toward z.
            g_codebook(k * D + j) = static_cast<T>(double(g_codebook(k * D + j)) +
                                                   2.0 * diff * inv_b);
        }
    }

    // --- encoder BPTT
    nn::MlpParams<T> enc_acc;
    {
        Tensor<T> gh({B, R});
        Tensor<T> gout({B, D + R});
        for (int64_t w = W - 1; w >= 0; --w) {
            for (int64_t n = 0; n < B; ++n) {
                std::copy_n(g_z.data.data() + (n * W + w) * D, D, gout.data.data() + n * (D + R));
                std::copy_n(gh.data.data() + n * R, R, gout.data.data() + n * (D + R) + D);
            }
            nn::MlpBackward<T> bw =
                nn::mlp_backward(m.enc_spec, m.enc, enc_caches[static_cast<size_t>(w)], gout);
            if (enc_acc.W.empty()) {
                enc_acc = std::move(bw.grads);
            } else {
                for (size_t l = 0; l < enc_acc.W.size(); ++l) {
                    enc_acc.W[l].vec() += bw.grads.W[l].vec();
                    enc_acc.b[l].vec() += bw.grads.b[l].vec();
                }
            }
            // input block is [window | state]; only the state part flows back
            for (int64_t n = 0; n < B; ++n)
                std::copy_n(bw.input_grad.data.data() + n * (F + R) + F, R,
                            gh.data.data() + n * R);
        }
    }

    grads.clear();
    for (auto& w : enc_acc.W) grads.push_back(std::move(w));
    for (auto& b : enc_acc.b) grads.push_back(std::move(b));
    for (auto& w : dec_acc.W) grads.push_back(std::move(w));
    for (auto& b : dec_acc.b) grads.push_back(std::move(b));
    grads.push_back(std::move(g_codebook));
    return terms;
}

template <class T>
std::vector<Tensor<T>> vq_params_vector(const VqModel<T>& m) {
    std::vector<Tensor<T>> v;
    for (const auto& w : m.enc.W) v.push_back(w);
    for (const auto& b : m.enc.b) v.push_back(b);
    for (const auto& w : m.dec.W) v.push_back(w);
    for (const auto& b : m.dec.b) v.push_back(b);
    v.push_back(m.codebook);
    return v;
}

template <class T>
void vq_params_assign(VqModel<T>& m, const std::vector<Tensor<T>>& v) {
    size_t i = 0;
    for (auto& w : m.enc.W) w = v[i++];
    for (auto& b : m.enc.b) b = v[i++];
    for (auto& w : m.dec.W) w = v[i++];
    for (auto& b : m.dec.b) b = v[i++];
    m.codebook = v[i++];
}

}  // namespace detail

// Full training loop (Adam, stepped learning-rate decay, dead-code reseeding,
// divergence abort that restores the last finite epoch).
template <class T>
VqTrainResult<T> train_vq(const Tensor<double>& frames_norm, const std::vector<int64_t>& train_idx,
                          const VqConfig& cfg, const VqTrainOptions& opt, RngStream& rng) {
    if (frames_norm.rank() != 4) throw std::invalid_argument("expected N x T x V x 3 frames");
    if (train_idx.empty()) throw std::invalid_argument("empty training set");
    int64_t Tf = frames_norm.shape[1], V = frames_norm.shape[2];

    VqTrainResult<T> res;
    RngStream init_rng = rng.child("vq-init", 0);
    res.model = init_vq<T>(cfg, Tf, V, init_rng);
    VqModel<T>& m = res.model;
    int64_t W = m.windows(), F = cfg.window_flat(V);
    int64_t K = cfg.codebook_size, D = cfg.latent_dim;

    std::vector<Tensor<T>> params = detail::vq_params_vector(m);
    nn::AdamState<T> adam = nn::adam_init(params);
    const size_t codebook_slot = params.size() - 1;

    std::vector<Tensor<T>> snapshot = params;  // last finite epoch
    std::vector<int64_t> unused_epochs(static_cast<size_t>(K), 0);
    std::vector<int64_t> order(train_idx.begin(), train_idx.end());
    Tensor<T> last_z;  // donor latents for dead-code reseeding

    for (int64_t epoch = 0; epoch < opt.epochs; ++epoch) {
        RngStream erng = rng.child("vq-epoch", static_cast<uint64_t>(epoch));
        shuffle(order, erng);
        double lr = nn::step_decay_lr(opt.lr, opt.lr_decay, opt.lr_decay_every, epoch);

        VqEpochLog lg;
        lg.epoch = epoch;
        lg.lr = lr;
        std::vector<int64_t> usage(static_cast<size_t>(K), 0);
        int64_t batches = 0;
        bool bad = false;

        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(opt.batch)) {
            size_t stop = std::min(order.size(), start + static_cast<size_t>(opt.batch));
            int64_t B = static_cast<int64_t>(stop - start);
            Tensor<T> X({B, W, F});
            for (int64_t n = 0; n < B; ++n) {
                int64_t src = order[start + static_cast<size_t>(n)];
                for (int64_t i = 0; i < Tf * V * 3; ++i)
                    X(n * W * F + i) =
                        static_cast<T>(frames_norm.data[static_cast<size_t>(src * Tf * V * 3 + i)]);
            }
            try {
                std::vector<Tensor<T>> grads;
                VqLossTerms terms = detail::vq_batch_step(m, X, grads, usage);
                auto [np, ns] = nn::adam_step(adam, params, grads, lr);
                params = std::move(np);
                adam = std::move(ns);
                detail::vq_params_assign(m, params);
                lg.recon += terms.recon;
                lg.codebook += terms.codebook;
                lg.commit += terms.commit;
                lg.total += terms.total;
                ++batches;
                if (stop == order.size()) last_z = encode_windows(m, X.reshaped({B, Tf, V, 3}));
            } catch (const std::runtime_error&) {
                bad = true;  // non-finite loss/gradient/update
                break;
            }
        }

        if (bad) {
            res.aborted = true;
            res.aborted_epoch = epoch;
            params = snapshot;
            detail::vq_params_assign(m, params);
            break;
        }

        lg.recon /= double(batches);
        lg.codebook /= double(batches);
        lg.commit /= double(batches);
        lg.total /= double(batches);
        int64_t used = 0;
        for (int64_t c : usage) used += (c > 0) ? 1 : 0;
        lg.usage_frac = double(used) / double(K);
        res.log.push_back(lg);
        res.final_usage = usage;
        snapshot = params;

        // Dead-code bookkeeping and reseeding from recent encoder outputs.
        RngStream drng = rng.child("vq-reseed", static_cast<uint64_t>(epoch));
        for (int64_t k = 0; k < K; ++k) {
            auto ku = static_cast<size_t>(k);
            unused_epochs[ku] = usage[ku] == 0 ? unused_epochs[ku] + 1 : 0;
            if (unused_epochs[ku] >= opt.dead_code_epochs && last_z.numel() > 0) {
                int64_t donor = static_cast<int64_t>(drng.uniform_int(
                    static_cast<uint64_t>(last_z.numel() / D)));
                for (int64_t j = 0; j < D; ++j)
                    params[codebook_slot](k * D + j) = static_cast<T>(
                        double(last_z(donor * D + j)) + 0.01 * drng.normal());
                // fresh optimizer moments for the reseeded row
                for (int64_t j = 0; j < D; ++j) {
                    adam.m[codebook_slot](k * D + j) = T(0);
                    adam.v[codebook_slot](k * D + j) = T(0);
                }
                unused_epochs[ku] = 0;
            }
        }
        detail::vq_params_assign(m, params);
    }
    return res;
}

// Mean squared reconstruction error per element (normalized units).
template <class T>
double reconstruction_mse(const VqModel<T>& m, const Tensor<double>& frames_norm,
                          const std::vector<int64_t>& idx) {
    if (idx.empty()) throw std::invalid_argument("no sequences to evaluate");
    int64_t Tf = frames_norm.shape[1], V = frames_norm.shape[2];
    int64_t per = Tf * V * 3;
    double se = 0.0;
    constexpr int64_t kChunk = 256;
    for (size_t start = 0; start < idx.size(); start += kChunk) {
        size_t stop = std::min(idx.size(), start + kChunk);
        int64_t B = static_cast<int64_t>(stop - start);
        Tensor<T> X({B, Tf, V, 3});
        for (int64_t n = 0; n < B; ++n)
            for (int64_t i = 0; i < per; ++i)
                X(n * per + i) = static_cast<T>(
                    frames_norm.data[static_cast<size_t>(idx[start + static_cast<size_t>(n)] * per + i)]);
        Tensor<T> z = encode_windows(m, X);
        QuantizeResult<T> q = quantize(z, m.codebook, m.cfg.beta);
        Tensor<T> Xhat = decode_windows(m, q.quantized);
        for (int64_t i = 0; i < X.numel(); ++i) {
            double d = double(Xhat(i)) - double(X(i));
            se += d * d;
        }
    }
    return se / (double(idx.size()) * double(per));
}

// Pre-quantization latents for the listed sequences, as double (n, W, D).
template <class T>
Tensor<double> encode_dataset(const VqModel<T>& m, const Tensor<double>& frames_norm,
                              const std::vector<int64_t>& idx) {
    int64_t Tf = frames_norm.shape[1], V = frames_norm.shape[2];
    int64_t per = Tf * V * 3;
    int64_t n = static_cast<int64_t>(idx.size());
    Tensor<double> out({n, m.windows(), m.cfg.latent_dim});
    constexpr int64_t kChunk = 256;
    for (int64_t start = 0; start < n; start += kChunk) {
        int64_t stop = std::min(n, start + kChunk);
        int64_t B = stop - start;
        Tensor<T> X({B, Tf, V, 3});
        for (int64_t b = 0; b < B; ++b)
            for (int64_t i = 0; i < per; ++i)
                X(b * per + i) = static_cast<T>(
                    frames_norm.data[static_cast<size_t>(idx[static_cast<size_t>(start + b)] * per + i)]);
        Tensor<T> z = encode_windows(m, X);
        for (int64_t i = 0; i < z.numel(); ++i)
            out(start * m.windows() * m.cfg.latent_dim + i) = double(z(i));
    }
    return out;
}

// Decode latents (n, W, D), optionally snapping to the codebook first.
// Returns normalized-unit frames (n, T, V, 3) as double.
template <class T>
Tensor<double> decode_latents(const VqModel<T>& m, const Tensor<double>& latents,
                              bool quantize_first) {
    Tensor<T> z = latents.template cast<T>();
    if (quantize_first) z = quantize(z, m.codebook, m.cfg.beta).quantized;
    return decode_windows(m, z).template cast<double>();
}

// Fraction of codes hit over the listed sequences, plus per-code counts.
template <class T>
std::pair<double, std::vector<int64_t>> codebook_usage(const VqModel<T>& m,
                                                       const Tensor<double>& frames_norm,
                                                       const std::vector<int64_t>& idx) {
    Tensor<double> z = encode_dataset(m, frames_norm, idx);
    QuantizeResult<T> q = quantize(z.template cast<T>(), m.codebook, m.cfg.beta);
    std::vector<int64_t> counts(static_cast<size_t>(m.cfg.codebook_size), 0);
    for (int64_t k : q.indices) counts[static_cast<size_t>(k)]++;
    int64_t used = 0;
    for (int64_t c : counts) used += (c > 0) ? 1 : 0;
    return {double(used) / double(m.cfg.codebook_size), counts};
}

// ------------------------------------------------------------- persistence

template <class T>
void vq_to_archive(const VqModel<T>& m, io::Archive& ar) {
    ar.meta["kind"] = "vq";
    ar.meta["config"] = m.cfg.to_json();
    ar.meta["frames"] = m.Tf;
    ar.meta["joints"] = m.V;
    ar.meta["enc_spec"] = m.enc_spec.to_json();
    ar.meta["dec_spec"] = m.dec_spec.to_json();
    for (size_t l = 0; l < m.enc.W.size(); ++l) {
        ar.add("enc.W" + std::to_string(l), m.enc.W[l]);
        ar.add("enc.b" + std::to_string(l), m.enc.b[l]);
    }
    for (size_t l = 0; l < m.dec.W.size(); ++l) {
        ar.add("dec.W" + std::to_string(l), m.dec.W[l]);
        ar.add("dec.b" + std::to_string(l), m.dec.b[l]);
    }
    ar.add("codebook", m.codebook);
}

template <class T>
VqModel<T> vq_from_archive(const io::Archive& ar) {
    if (ar.meta.value("kind", "") != "vq")
        throw std::runtime_error("archive does not hold a vq checkpoint");
    VqModel<T> m;
    m.cfg = VqConfig::from_json(ar.meta.at("config"));
    m.Tf = ar.meta.at("frames").get<int64_t>();
    m.V = ar.meta.at("joints").get<int64_t>();
    m.enc_spec = nn::MlpSpec::from_json(ar.meta.at("enc_spec"));
    m.dec_spec = nn::MlpSpec::from_json(ar.meta.at("dec_spec"));
    for (int64_t l = 0; l < m.enc_spec.num_layers(); ++l) {
        m.enc.W.push_back(ar.get_as<T>("enc.W" + std::to_string(l)));
        m.enc.b.push_back(ar.get_as<T>("enc.b" + std::to_string(l)));
    }
    for (int64_t l = 0; l < m.dec_spec.num_layers(); ++l) {
        m.dec.W.push_back(ar.get_as<T>("dec.W" + std::to_string(l)));
        m.dec.b.push_back(ar.get_as<T>("dec.b" + std::to_string(l)));
    }
    m.codebook = ar.get_as<T>("codebook");
    return m;
}

}  // namespace mf::vq
