#pragma once

// Distribution-level generation metrics over feature vectors: Gaussian
// Fréchet distance, unbiased kernel distance with block standard errors,
// k-NN-support precision/recall, paired-subset diversity and per-class
// multimodality, and a small label classifier for conditional accuracy.
//
// Features here are raw flattened sequences or latents; values are
// comparable between runs of this code only.

#include "mf/nn.hpp"
#include "mf/rng.hpp"
#include "mf/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace mf::metrics {

using nlohmann::json;

struct FeatureSet {
    Tensor<double> vectors;       // N x F
    std::vector<int32_t> labels;  // optional; empty when unlabeled

    int64_t size() const { return vectors.shape.empty() ? 0 : vectors.shape[0]; }
    int64_t dim() const { return vectors.rank() == 2 ? vectors.shape[1] : 0; }
};

// Population moments (1/N covariance normalization).
struct Moments {
    std::vector<double> mean;
    Tensor<double> cov;  // F x F
};

Moments compute_moments(const FeatureSet& fs);

// Gaussian Fréchet distance:
//   ||mu_a - mu_b||^2 + Tr(Ca + Cb - 2 (Ca^1/2 Cb Ca^1/2)^1/2).
// Symmetric eigendecomposition square roots; eigenvalues in [-1e-8, 0)
// (relative to the largest) clamp to 0, anything more negative throws.
double fid(const FeatureSet& real, const FeatureSet& gen);
double fid_from_moments(const Moments& a, const Moments& b);

struct KidResult {
    double value = 0.0;  // mean of per-block unbiased MMD^2 estimates
    double se = 0.0;     // standard error over blocks (0 with a single block)
    int64_t blocks = 0;
};

// Unbiased squared MMD with the cubic kernel k(x,y) = (x.y/F + 1)^3,
// estimated over `blocks` contiguous blocks (reduced when the sets are small).
KidResult kid(const FeatureSet& real, const FeatureSet& gen, int64_t blocks = 10);

struct PrecisionRecall {
    double precision = 0.0;
    double recall = 0.0;
};

// k-NN support estimate: a point counts as covered when it lies within the
// k-th-neighbor radius of any reference point.
PrecisionRecall precision_recall(const FeatureSet& real, const FeatureSet& gen, int64_t k = 3);

// Mean L2 distance over S_d random disjoint pairs.  S_d is lowered (with a
// warning on stderr) when the set has fewer than 2*S_d points.
double diversity(const FeatureSet& fs, int64_t S_d, RngStream& rng);

// Mean within-class paired distance, averaged over classes; per-class pair
// count S_l, lowered per class when needed.  Uses rng.child("class", label)
// per class, so a single-class set reproduces diversity() run on that
// derived stream.
double multimodality(const FeatureSet& fs, int64_t S_l, RngStream& rng);

// ------------------------------------------------------------- classifier

struct ClassifierConfig {
    std::vector<int64_t> hidden{64};
    int64_t epochs = 150;
    int64_t batch = 128;
    double lr = 3e-3;
    double lr_decay = 0.98;
    int64_t lr_decay_every = 10;
};

struct ClassifierModel {
    nn::MlpSpec spec;
    nn::MlpParams<float> params;
    int64_t num_classes = 0;
    bool trained = false;
};

ClassifierModel train_classifier(const FeatureSet& train, int64_t num_classes,
                                 const ClassifierConfig& cfg, RngStream& rng);

std::vector<int32_t> classify(const ClassifierModel& m, const Tensor<double>& vectors);

// Fraction of `fs` whose predicted class matches its label.  Throws on an
// untrained classifier or an unlabeled set.
double accuracy(const ClassifierModel& m, const FeatureSet& fs);

// ----------------------------------------------------------------- report

struct MetricReport {
    double fid = 0.0;
    double kid = 0.0;
    double kid_se = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double diversity_gen = 0.0;
    double diversity_real = 0.0;
    double diversity_gap = 0.0;  // |gen - real|, the closer-to-real view
    double multimodality = -1.0;  // -1 when not computed (unlabeled)
    double accuracy = -1.0;       // -1 when not computed
    int64_t n_real = 0, n_gen = 0;
    json config_echo = json::object();

    json to_json() const;
    static std::string csv_header();
    std::string csv_row() const;
};

struct MetricOptions {
    int64_t knn_k = 3;
    int64_t S_d = 200;
    int64_t S_l = 20;
    int64_t kid_blocks = 10;
    bool with_multimodality = false;
};

// Convenience bundle over the distribution metrics (accuracy is attached by
// the caller, which owns the classifier).
MetricReport compute_metrics(const FeatureSet& real, const FeatureSet& gen,
                             const MetricOptions& opt, RngStream& rng);

}  // namespace mf::metrics
