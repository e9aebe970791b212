// Synthetic motion-like sequence families and 2-D toy point sets.
//
// A family is a fixed superposition of two sinusoid components per joint with
// class-specific frequencies; the only per-sequence randomness is Gaussian
// jitter scaled by noise_scale.  Classes occupy disjoint frequency bands, so a
// spectral peak read-off labels them perfectly -- that property is what the
// dataset-separability checks lean on.
#pragma once

#include "mf/rng.hpp"
#include "mf/tensor.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace mf::synth {

using nlohmann::json;

struct FamilySpec {
    int32_t class_id = 0;
    double base_freq = 1.5;        // cycles per sequence, primary component
    double second_ratio = 2.0;     // second component at base_freq * ratio
    double second_scale = 0.35;    // amplitude of the second component relative to amp
    std::vector<double> amp;       // per joint
    std::vector<double> phase;     // per joint, radians
    double noise_scale = 0.03;

    void validate(int64_t joints) const;
    json to_json() const;
    static FamilySpec from_json(const json& j);
};

struct SynthConfig {
    int64_t frames = 32;        // T
    int64_t joints = 8;         // V  (3 coordinates per joint)
    int64_t per_class = 512;
    double train_fraction = 0.8;
};

struct MotionDataset {
    Tensor<double> frames;          // N x T x V x 3, raw units
    std::vector<int32_t> labels;    // N
    std::vector<int64_t> train_idx;
    std::vector<int64_t> test_idx;
    std::vector<FamilySpec> families;
    int64_t T = 0, V = 0;

    int64_t size() const { return frames.shape.empty() ? 0 : frames.shape[0]; }
};

// Deterministic default family bank: primary frequencies 1.5 + 2c (disjoint
// bands), fixed per-joint amplitude/phase patterns.
std::vector<FamilySpec> make_default_families(int64_t classes, int64_t joints,
                                              double noise_scale);

// One sequence of a family with explicit jitter draws from `rng`.
Tensor<double> generate_sequence(const FamilySpec& fam, int64_t T, int64_t V, RngStream& rng);

// Full dataset with a disjoint train/test split (per-class stratified).
MotionDataset generate_dataset(const std::vector<FamilySpec>& families, const SynthConfig& cfg,
                               RngStream& rng);

// Analytic bound on the per-joint, per-frame step displacement of the
// noise-free signal: sum_m amp_m * w_m / T (w = angular frequency).
double max_step_bound(const FamilySpec& fam, int64_t T);

struct NormStats {
    Tensor<double> mean;  // V x 3
    Tensor<double> std;   // V x 3
    bool clamped = false; // some channel had (near-)zero variance
    json to_json() const;
    static NormStats from_json(const json& j);
};

// Per-(joint, coordinate) stats over the training split only.
NormStats compute_norm_stats(const MotionDataset& ds);
Tensor<double> apply_normalize(const Tensor<double>& frames, const NormStats& s);
Tensor<double> apply_denormalize(const Tensor<double>& frames, const NormStats& s);

// Frequency of the dominant spectral peak (naive DFT over all channels).
double spectral_peak(const Tensor<double>& seq /* T x V x 3 */);
// Classify by nearest family primary frequency; the dataset-level oracle.
int32_t spectral_classify(const Tensor<double>& seq, const std::vector<FamilySpec>& families);

// ------------------------------------------------------------------ 2-D toys
// Names accepted: "two-moons", "eight-gaussians", "two-gaussians".
struct ToySet {
    Tensor<double> points;        // n x 2
    std::vector<int32_t> labels;  // mode / branch index
};
ToySet toy2d(const std::string& name, int64_t n, RngStream& rng);

}  // namespace mf::synth
