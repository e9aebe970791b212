#include "mf/metrics.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <sstream>

namespace mf::metrics {

Moments compute_moments(const FeatureSet& fs) {
    int64_t n = fs.size(), f = fs.dim();
    if (n < 2) throw std::invalid_argument("moments need at least 2 vectors");
    require_finite(fs.vectors, "feature vectors");
    Moments m;
    m.mean.assign(static_cast<size_t>(f), 0.0);
    auto X = fs.vectors.mat(n, f);
    Eigen::VectorXd mu = X.colwise().mean().transpose();
    for (int64_t j = 0; j < f; ++j) m.mean[static_cast<size_t>(j)] = mu(j);
    Eigen::MatrixXd centered = X.rowwise() - mu.transpose();
    Eigen::MatrixXd cov = (centered.transpose() * centered) / double(n);
    m.cov = Tensor<double>({f, f});
    for (int64_t i = 0; i < f; ++i)
        for (int64_t j = 0; j < f; ++j) m.cov(i, j) = cov(i, j);
    return m;
}

namespace {

// Symmetric PSD square root with the clamping policy: eigenvalues below
// -1e-8 * max(1, lambda_max) are an error, small negatives clamp to zero.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& M, const char* what) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(M);
    if (es.info() != Eigen::Success)
        throw std::runtime_error(std::string("eigendecomposition failed for ") + what);
    Eigen::VectorXd ev = es.eigenvalues();
    double lmax = ev.size() ? ev.maxCoeff() : 0.0;
    double tol = 1e-8 * std::max(1.0, lmax);
    Eigen::VectorXd root(ev.size());
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (ev(i) < -tol)
            throw std::runtime_error(std::string("matrix square root failed for ") + what +
                                     ": eigenvalue " + std::to_string(ev(i)) +
                                     " below tolerance");
        root(i) = std::sqrt(std::max(ev(i), 0.0));
    }
    return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

Eigen::MatrixXd to_eigen(const Tensor<double>& t) {
    int64_t r = t.shape[0], c = t.shape[1];
    Eigen::MatrixXd m(r, c);
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) m(i, j) = t(i, j);
    return m;
}

}  // namespace

double fid_from_moments(const Moments& a, const Moments& b) {
    if (a.mean.size() != b.mean.size()) throw std::invalid_argument("fid: dim mismatch");
    double mean_term = 0.0;
    for (size_t i = 0; i < a.mean.size(); ++i) {
        double d = a.mean[i] - b.mean[i];
        mean_term += d * d;
    }
    Eigen::MatrixXd Ca = to_eigen(a.cov), Cb = to_eigen(b.cov);
    Eigen::MatrixXd Ra = psd_sqrt(Ca, "first covariance");
    Eigen::MatrixXd inner = Ra * Cb * Ra;
    inner = 0.5 * (inner + inner.transpose().eval());  // symmetrize roundoff
    Eigen::MatrixXd Rm = psd_sqrt(inner, "cross term");
    double tr = Ca.trace() + Cb.trace() - 2.0 * Rm.trace();
    double v = mean_term + tr;
    // tiny negative from cancellation on identical inputs
    return v < 0 && v > -1e-9 ? 0.0 : v;
}

double fid(const FeatureSet& real, const FeatureSet& gen) {
    int64_t f = real.dim();
    if (gen.dim() != f) throw std::invalid_argument("fid: feature dims differ");
    if (real.size() < f + 1 || gen.size() < f + 1)
        std::cerr << "[warn] fid: fewer samples than feature dim + 1; "
                     "covariances are rank-deficient\n";
    return fid_from_moments(compute_moments(real), compute_moments(gen));
}

namespace {

double cubic_kernel(const double* x, const double* y, int64_t f) {
    double dot = 0.0;
    for (int64_t i = 0; i < f; ++i) dot += x[i] * y[i];
    double base = dot / double(f) + 1.0;
    return base * base * base;
}

// Unbiased MMD^2 between two point blocks.
double mmd2_unbiased(const double* X, int64_t m, const double* Y, int64_t n, int64_t f) {
    double kxx = 0.0, kyy = 0.0, kxy = 0.0;
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < m; ++j)
            if (i != j) kxx += cubic_kernel(X + i * f, X + j * f, f);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j)
            if (i != j) kyy += cubic_kernel(Y + i * f, Y + j * f, f);
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) kxy += cubic_kernel(X + i * f, Y + j * f, f);
    return kxx / double(m * (m - 1)) + kyy / double(n * (n - 1)) -
           2.0 * kxy / double(m * n);
}

}  // namespace

KidResult kid(const FeatureSet& real, const FeatureSet& gen, int64_t blocks) {
    int64_t m = real.size(), n = gen.size(), f = real.dim();
    if (gen.dim() != f) throw std::invalid_argument("kid: feature dims differ");
    if (m < 2 || n < 2) throw std::invalid_argument("kid needs at least 2 points per set");
    int64_t b = std::min({blocks, m / 2, n / 2});
    b = std::max<int64_t>(b, 1);

    KidResult res;
    res.blocks = b;
    std::vector<double> vals;
    for (int64_t k = 0; k < b; ++k) {
        int64_t m0 = k * m / b, m1 = (k + 1) * m / b;
        int64_t n0 = k * n / b, n1 = (k + 1) * n / b;
        vals.push_back(mmd2_unbiased(real.vectors.data.data() + m0 * f, m1 - m0,
                                     gen.vectors.data.data() + n0 * f, n1 - n0, f));
    }
    double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / double(b);
    res.value = mean;
    if (b > 1) {
        double ss = 0.0;
        for (double v : vals) ss += (v - mean) * (v - mean);
        res.se = std::sqrt(ss / double(b - 1)) / std::sqrt(double(b));
    }
    return res;
}

namespace {

// Pairwise squared distances via the Gram expansion; clamped at zero.
Eigen::MatrixXd sq_dists(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
    Eigen::VectorXd a2 = A.rowwise().squaredNorm();
    Eigen::VectorXd b2 = B.rowwise().squaredNorm();
    Eigen::MatrixXd D = a2.replicate(1, B.rows());
    D += b2.transpose().replicate(A.rows(), 1);
    D.noalias() -= 2.0 * A * B.transpose();
    return D.cwiseMax(0.0);
}

// Squared k-th-neighbor radius per row (self excluded).
Eigen::VectorXd knn_radii_sq(const Eigen::MatrixXd& X, int64_t k) {
    Eigen::MatrixXd D = sq_dists(X, X);
    Eigen::VectorXd r(X.rows());
    std::vector<double> row(static_cast<size_t>(X.rows()) - 1);
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        size_t w = 0;
        for (Eigen::Index j = 0; j < X.rows(); ++j)
            if (j != i) row[w++] = D(i, j);
        std::nth_element(row.begin(), row.begin() + (k - 1), row.end());
        r(i) = row[static_cast<size_t>(k - 1)];
    }
    return r;
}

// Fraction of query points inside some reference point's k-NN ball.
double support_coverage(const Eigen::MatrixXd& queries, const Eigen::MatrixXd& refs,
                        const Eigen::VectorXd& radii_sq) {
    Eigen::MatrixXd D = sq_dists(queries, refs);
    int64_t covered = 0;
    for (Eigen::Index i = 0; i < queries.rows(); ++i) {
        for (Eigen::Index j = 0; j < refs.rows(); ++j) {
            if (D(i, j) <= radii_sq(j) + 1e-12) {
                ++covered;
                break;
            }
        }
    }
    return double(covered) / double(queries.rows());
}

}  // namespace

PrecisionRecall precision_recall(const FeatureSet& real, const FeatureSet& gen, int64_t k) {
    if (k < 1) throw std::invalid_argument("precision_recall: k must be >= 1");
    if (real.size() <= k || gen.size() <= k)
        throw std::invalid_argument("precision_recall: need more than k points per set");
    if (real.dim() != gen.dim()) throw std::invalid_argument("precision_recall: dim mismatch");
    Eigen::MatrixXd R = to_eigen(real.vectors), G = to_eigen(gen.vectors);
    PrecisionRecall pr;
    pr.precision = support_coverage(G, R, knn_radii_sq(R, k));
    pr.recall = support_coverage(R, G, knn_radii_sq(G, k));
    return pr;
}

namespace {

// Mean L2 over `pairs` disjoint random pairs drawn from rows [idx].
double paired_distance(const Tensor<double>& vectors, std::vector<int64_t> idx, int64_t pairs,
                       RngStream& rng) {
    shuffle(idx, rng);
    int64_t f = vectors.shape[1];
    double acc = 0.0;
    for (int64_t p = 0; p < pairs; ++p) {
        const double* a = vectors.data.data() + idx[static_cast<size_t>(p)] * f;
        const double* b = vectors.data.data() + idx[static_cast<size_t>(pairs + p)] * f;
        double s = 0.0;
        for (int64_t j = 0; j < f; ++j) {
            double d = a[j] - b[j];
            s += d * d;
        }
        acc += std::sqrt(s);
    }
    return acc / double(pairs);
}

}  // namespace

double diversity(const FeatureSet& fs, int64_t S_d, RngStream& rng) {
    int64_t n = fs.size();
    if (n < 2) throw std::invalid_argument("diversity needs at least 2 vectors");
    if (S_d < 1) throw std::invalid_argument("diversity subset size must be >= 1");
    if (n < 2 * S_d) {
        S_d = n / 2;
        std::cerr << "[warn] diversity: set too small, lowering pair count to " << S_d << "\n";
    }
    std::vector<int64_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    return paired_distance(fs.vectors, std::move(idx), S_d, rng);
}

double multimodality(const FeatureSet& fs, int64_t S_l, RngStream& rng) {
    if (fs.labels.empty()) throw std::invalid_argument("multimodality needs labels");
    if (static_cast<int64_t>(fs.labels.size()) != fs.size())
        throw std::invalid_argument("multimodality: label count mismatch");
    std::vector<int32_t> classes;
    for (int32_t l : fs.labels)
        if (std::find(classes.begin(), classes.end(), l) == classes.end()) classes.push_back(l);
    std::sort(classes.begin(), classes.end());

    double acc = 0.0;
    for (int32_t c : classes) {
        std::vector<int64_t> idx;
        for (int64_t i = 0; i < fs.size(); ++i)
            if (fs.labels[static_cast<size_t>(i)] == c) idx.push_back(i);
        if (idx.size() < 2)
            throw std::invalid_argument("multimodality: class " + std::to_string(c) +
                                        " has fewer than 2 samples");
        int64_t pairs = S_l;
        if (static_cast<int64_t>(idx.size()) < 2 * S_l) {
            pairs = static_cast<int64_t>(idx.size()) / 2;
            std::cerr << "[warn] multimodality: class " << c << " small, lowering pairs to "
                      << pairs << "\n";
        }
        RngStream crng = rng.child("class", static_cast<uint64_t>(c));
        acc += paired_distance(fs.vectors, std::move(idx), pairs, crng);
    }
    return acc / double(classes.size());
}

// ---------------------------------------------------------------- classifier

ClassifierModel train_classifier(const FeatureSet& train, int64_t num_classes,
                                 const ClassifierConfig& cfg, RngStream& rng) {
    if (train.labels.empty()) throw std::invalid_argument("classifier needs labels");
    int64_t n = train.size(), f = train.dim();
    ClassifierModel m;
    m.num_classes = num_classes;
    m.spec.input_dim = f;
    m.spec.output_dim = num_classes;
    m.spec.hidden = cfg.hidden;
    m.spec.act = nn::Act::silu;
    m.spec.validate();
    RngStream init_rng = rng.child("classifier-init", 0);
    m.params = nn::init_mlp<float>(m.spec, init_rng);

    std::vector<Tensor<float>> params = nn::params_to_vector(m.params);
    nn::AdamState<float> adam = nn::adam_init(params);
    std::vector<int64_t> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        RngStream erng = rng.child("classifier-epoch", static_cast<uint64_t>(epoch));
        shuffle(order, erng);
        double lr = nn::step_decay_lr(cfg.lr, cfg.lr_decay, cfg.lr_decay_every, epoch);
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch)) {
            size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch));
            int64_t B = static_cast<int64_t>(stop - start);
            Tensor<float> X({B, f});
            std::vector<int32_t> y(static_cast<size_t>(B));
            for (int64_t i = 0; i < B; ++i) {
                int64_t src = order[start + static_cast<size_t>(i)];
                for (int64_t j = 0; j < f; ++j)
                    X(i, j) = static_cast<float>(train.vectors(src, j));
                y[static_cast<size_t>(i)] = train.labels[static_cast<size_t>(src)];
            }
            nn::MlpCache<float> cache;
            Tensor<float> logits = nn::mlp_forward_cached(m.spec, m.params, X, {}, {}, cache);
            // softmax cross-entropy gradient
            Tensor<float> gout({B, num_classes});
            for (int64_t i = 0; i < B; ++i) {
                double mx = -1e300;
                for (int64_t c = 0; c < num_classes; ++c) mx = std::max(mx, double(logits(i, c)));
                double Z = 0.0;
                for (int64_t c = 0; c < num_classes; ++c) Z += std::exp(double(logits(i, c)) - mx);
                for (int64_t c = 0; c < num_classes; ++c) {
                    double p = std::exp(double(logits(i, c)) - mx) / Z;
                    double onehot = (c == y[static_cast<size_t>(i)]) ? 1.0 : 0.0;
                    gout(i, c) = static_cast<float>((p - onehot) / double(B));
                }
            }
            nn::MlpBackward<float> bw = nn::mlp_backward(m.spec, m.params, cache, gout);
            auto [np, ns] = nn::adam_step(adam, params, nn::params_to_vector(bw.grads), lr);
            params = std::move(np);
            adam = std::move(ns);
            m.params = nn::params_from_vector(m.spec, params);
        }
    }
    m.trained = true;
    return m;
}

std::vector<int32_t> classify(const ClassifierModel& m, const Tensor<double>& vectors) {
    if (!m.trained) throw std::runtime_error("classifier has not been trained");
    int64_t n = vectors.shape[0];
    Tensor<float> X = vectors.cast<float>();
    Tensor<float> logits = nn::mlp_forward(m.spec, m.params, X);
    std::vector<int32_t> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        int32_t best = 0;
        for (int64_t c = 1; c < m.num_classes; ++c)
            if (logits(i, c) > logits(i, best)) best = static_cast<int32_t>(c);
        out[static_cast<size_t>(i)] = best;
    }
    return out;
}

double accuracy(const ClassifierModel& m, const FeatureSet& fs) {
    if (!m.trained) throw std::runtime_error("classifier has not been trained");
    if (fs.labels.empty())
        throw std::invalid_argument("accuracy needs conditioning labels on the feature set");
    std::vector<int32_t> pred = classify(m, fs.vectors);
    int64_t hit = 0;
    for (size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == fs.labels[i]) ++hit;
    return double(hit) / double(pred.size());
}

// -------------------------------------------------------------------- report

json MetricReport::to_json() const {
    json j{{"fid", fid},
           {"kid", kid},
           {"kid_se", kid_se},
           {"precision", precision},
           {"recall", recall},
           {"diversity_gen", diversity_gen},
           {"diversity_real", diversity_real},
           {"diversity_gap", diversity_gap},
           {"n_real", n_real},
           {"n_gen", n_gen},
           {"config", config_echo}};
    if (multimodality >= 0) j["multimodality"] = multimodality;
    if (accuracy >= 0) j["accuracy"] = accuracy;
    return j;
}

std::string MetricReport::csv_header() {
    return "fid,kid,kid_se,precision,recall,diversity_gen,diversity_real,diversity_gap,"
           "multimodality,accuracy,n_real,n_gen";
}

std::string MetricReport::csv_row() const {
    std::ostringstream os;
    os.precision(10);
    os << fid << ',' << kid << ',' << kid_se << ',' << precision << ',' << recall << ','
       << diversity_gen << ',' << diversity_real << ',' << diversity_gap << ','
       << multimodality << ',' << accuracy << ',' << n_real << ',' << n_gen;
    return os.str();
}

MetricReport compute_metrics(const FeatureSet& real, const FeatureSet& gen,
                             const MetricOptions& opt, RngStream& rng) {
    MetricReport r;
    r.n_real = real.size();
    r.n_gen = gen.size();
    r.fid = fid(real, gen);
    KidResult k = kid(real, gen, opt.kid_blocks);
    r.kid = k.value;
    r.kid_se = k.se;
    PrecisionRecall pr = precision_recall(real, gen, opt.knn_k);
    r.precision = pr.precision;
    r.recall = pr.recall;
    RngStream dg = rng.child("diversity-gen", 0);
    RngStream dr = rng.child("diversity-real", 0);
    r.diversity_gen = diversity(gen, opt.S_d, dg);
    r.diversity_real = diversity(real, opt.S_d, dr);
    r.diversity_gap = std::abs(r.diversity_gen - r.diversity_real);
    if (opt.with_multimodality) {
        RngStream mm = rng.child("multimodality", 0);
        r.multimodality = multimodality(gen, opt.S_l, mm);
    }
    json cfg{{"knn_k", opt.knn_k}, {"S_d", opt.S_d}, {"S_l", opt.S_l},
             {"kid_blocks", opt.kid_blocks}};
    r.config_echo = cfg;
    return r;
}

}  // namespace mf::metrics
