#include "mf/synth.hpp"

#include <cmath>
#include <numbers>

namespace mf::synth {

using std::numbers::pi;

void FamilySpec::validate(int64_t joints) const {
    if (static_cast<int64_t>(amp.size()) != joints ||
        static_cast<int64_t>(phase.size()) != joints)
        throw std::invalid_argument("family amp/phase vectors must have one entry per joint");
    if (base_freq <= 0 || second_ratio <= 0)
        throw std::invalid_argument("family frequencies must be positive");
    if (noise_scale < 0) throw std::invalid_argument("negative noise scale");
}

json FamilySpec::to_json() const {
    return json{{"class_id", class_id},       {"base_freq", base_freq},
                {"second_ratio", second_ratio}, {"second_scale", second_scale},
                {"amp", amp},                 {"phase", phase},
                {"noise_scale", noise_scale}};
}

FamilySpec FamilySpec::from_json(const json& j) {
    FamilySpec f;
    f.class_id = j.at("class_id").get<int32_t>();
    f.base_freq = j.at("base_freq").get<double>();
    f.second_ratio = j.at("second_ratio").get<double>();
    f.second_scale = j.at("second_scale").get<double>();
    f.amp = j.at("amp").get<std::vector<double>>();
    f.phase = j.at("phase").get<std::vector<double>>();
    f.noise_scale = j.at("noise_scale").get<double>();
    return f;
}

std::vector<FamilySpec> make_default_families(int64_t classes, int64_t joints,
                                              double noise_scale) {
    std::vector<FamilySpec> out;
    for (int64_t c = 0; c < classes; ++c) {
        FamilySpec f;
        f.class_id = static_cast<int32_t>(c);
        f.base_freq = 1.5 + 2.0 * double(c);
        f.second_ratio = 2.0;
        f.second_scale = 0.35;
        f.noise_scale = noise_scale;
        for (int64_t v = 0; v < joints; ++v) {
            f.amp.push_back(0.6 + 0.4 * std::cos(2.0 * pi * double(v) / double(joints) + double(c)));
            f.phase.push_back(2.0 * pi * double(v) / double(joints) + 0.5 * double(c));
        }
        out.push_back(std::move(f));
    }
    return out;
}

namespace {
// Fixed per-coordinate phase offsets so the 3 coordinates of a joint trace
// different but phase-locked curves.
constexpr double kCoordOffset[3] = {0.0, 2.0 * pi / 3.0, 4.0 * pi / 3.0};

double clean_value(const FamilySpec& f, int64_t T, int64_t t, int64_t v, int64_t c) {
    double tau = double(t) / double(T);
    double p = f.phase[static_cast<size_t>(v)] + kCoordOffset[c];
    double a = f.amp[static_cast<size_t>(v)];
    double w1 = 2.0 * pi * f.base_freq;
    double w2 = 2.0 * pi * f.base_freq * f.second_ratio;
    return a * std::sin(w1 * tau + p) + a * f.second_scale * std::sin(w2 * tau + 0.7 * p);
}
}  // namespace

Tensor<double> generate_sequence(const FamilySpec& fam, int64_t T, int64_t V, RngStream& rng) {
    fam.validate(V);
    Tensor<double> seq({T, V, 3});
    for (int64_t t = 0; t < T; ++t)
        for (int64_t v = 0; v < V; ++v)
            for (int64_t c = 0; c < 3; ++c)
                seq.at3(t, v, c) = clean_value(fam, T, t, v, c) + fam.noise_scale * rng.normal();
    return seq;
}

MotionDataset generate_dataset(const std::vector<FamilySpec>& families, const SynthConfig& cfg,
                               RngStream& rng) {
    if (families.empty()) throw std::invalid_argument("no families given");
    if (cfg.train_fraction <= 0.0 || cfg.train_fraction >= 1.0)
        throw std::invalid_argument("train fraction must lie in (0,1)");
    MotionDataset ds;
    ds.T = cfg.frames;
    ds.V = cfg.joints;
    ds.families = families;
    int64_t n = static_cast<int64_t>(families.size()) * cfg.per_class;
    ds.frames = Tensor<double>({n, cfg.frames, cfg.joints, 3});
    ds.labels.resize(static_cast<size_t>(n));

    int64_t idx = 0;
    for (size_t fi = 0; fi < families.size(); ++fi) {
        // One derived stream per family so adding classes never reshuffles
        // earlier ones.
        RngStream fam_rng = rng.child("family", fi);
        for (int64_t i = 0; i < cfg.per_class; ++i) {
            RngStream seq_rng = fam_rng.child("sequence", static_cast<uint64_t>(i));
            Tensor<double> seq = generate_sequence(families[fi], cfg.frames, cfg.joints, seq_rng);
            std::copy(seq.data.begin(), seq.data.end(),
                      ds.frames.data.begin() + idx * cfg.frames * cfg.joints * 3);
            ds.labels[static_cast<size_t>(idx)] = families[fi].class_id;
            ++idx;
        }
    }

    // Stratified split with disjoint indices: the first ceil(train_fraction *
    // per_class) of each class go to train (sequence order is already random
    // given the per-sequence jitter; no need to shuffle for balance).
    int64_t per_train = static_cast<int64_t>(std::llround(cfg.train_fraction * double(cfg.per_class)));
    per_train = std::min(std::max<int64_t>(per_train, 1), cfg.per_class - 1);
    for (size_t fi = 0; fi < families.size(); ++fi) {
        int64_t base = static_cast<int64_t>(fi) * cfg.per_class;
        for (int64_t i = 0; i < cfg.per_class; ++i)
            (i < per_train ? ds.train_idx : ds.test_idx).push_back(base + i);
    }
    return ds;
}

double max_step_bound(const FamilySpec& fam, int64_t T) {
    // |x(t+1/T) - x(t)| <= max|x'| / T; per component max|d/dtau| = amp * w.
    double worst = 0.0;
    for (double a : fam.amp) {
        double w1 = 2.0 * pi * fam.base_freq;
        double w2 = 2.0 * pi * fam.base_freq * fam.second_ratio;
        worst = std::max(worst, a * w1 + a * fam.second_scale * w2);
    }
    return worst / double(T);
}

json NormStats::to_json() const {
    return json{{"mean", mean.data}, {"std", std.data}, {"shape", mean.shape}, {"clamped", clamped}};
}

NormStats NormStats::from_json(const json& j) {
    NormStats s;
    auto shape = j.at("shape").get<std::vector<int64_t>>();
    s.mean = Tensor<double>(shape, j.at("mean").get<std::vector<double>>());
    s.std = Tensor<double>(shape, j.at("std").get<std::vector<double>>());
    s.clamped = j.at("clamped").get<bool>();
    return s;
}

NormStats compute_norm_stats(const MotionDataset& ds) {
    if (ds.train_idx.empty()) throw std::invalid_argument("empty training split");
    NormStats s;
    s.mean = Tensor<double>({ds.V, 3});
    s.std = Tensor<double>({ds.V, 3});
    int64_t count = static_cast<int64_t>(ds.train_idx.size()) * ds.T;
    for (int64_t v = 0; v < ds.V; ++v) {
        for (int64_t c = 0; c < 3; ++c) {
            double sum = 0.0, sq = 0.0;
            for (int64_t n : ds.train_idx)
                for (int64_t t = 0; t < ds.T; ++t) {
                    double x = ds.frames.at4(n, t, v, c);
                    sum += x;
                    sq += x * x;
                }
            double m = sum / double(count);
            double var = sq / double(count) - m * m;
            double sd = std::sqrt(std::max(var, 0.0));
            if (sd < 1e-8) {
                sd = 1.0;  // constant channel: pass through unscaled
                s.clamped = true;
            }
            s.mean(v, c) = m;
            s.std(v, c) = sd;
        }
    }
    return s;
}

namespace {
Tensor<double> affine_per_channel(const Tensor<double>& frames, const NormStats& s, bool fwd) {
    if (frames.rank() != 4) throw std::invalid_argument("expected N x T x V x 3 frames");
    int64_t N = frames.shape[0], T = frames.shape[1], V = frames.shape[2];
    Tensor<double> out = frames;
    for (int64_t n = 0; n < N; ++n)
        for (int64_t t = 0; t < T; ++t)
            for (int64_t v = 0; v < V; ++v)
                for (int64_t c = 0; c < 3; ++c) {
                    double& x = out.at4(n, t, v, c);
                    x = fwd ? (x - s.mean(v, c)) / s.std(v, c)
                            : x * s.std(v, c) + s.mean(v, c);
                }
    return out;
}
}  // namespace

Tensor<double> apply_normalize(const Tensor<double>& frames, const NormStats& s) {
    return affine_per_channel(frames, s, true);
}
Tensor<double> apply_denormalize(const Tensor<double>& frames, const NormStats& s) {
    return affine_per_channel(frames, s, false);
}

double spectral_peak(const Tensor<double>& seq) {
    if (seq.rank() != 3) throw std::invalid_argument("expected T x V x 3 sequence");
    int64_t T = seq.shape[0], V = seq.shape[1];
    double best_mag = -1.0, best_f = 0.0;
    // Half-integer frequency grid up to Nyquist; naive DFT, magnitude summed
    // over channels.
    for (double f = 0.5; f <= double(T) / 2.0; f += 0.5) {
        double mag = 0.0;
        for (int64_t v = 0; v < V; ++v)
            for (int64_t c = 0; c < 3; ++c) {
                double re = 0.0, im = 0.0;
                for (int64_t t = 0; t < T; ++t) {
                    double ang = 2.0 * pi * f * double(t) / double(T);
                    double x = seq.at3(t, v, c);
                    re += x * std::cos(ang);
                    im -= x * std::sin(ang);
                }
                mag += std::sqrt(re * re + im * im);
            }
        if (mag > best_mag) {
            best_mag = mag;
            best_f = f;
        }
    }
    return best_f;
}

int32_t spectral_classify(const Tensor<double>& seq, const std::vector<FamilySpec>& families) {
    double peak = spectral_peak(seq);
    int32_t best = families.front().class_id;
    double bd = 1e300;
    for (const auto& f : families) {
        double d = std::abs(f.base_freq - peak);
        if (d < bd) {
            bd = d;
            best = f.class_id;
        }
    }
    return best;
}

ToySet toy2d(const std::string& name, int64_t n, RngStream& rng) {
    ToySet set;
    set.points = Tensor<double>({n, 2});
    set.labels.resize(static_cast<size_t>(n));
    if (name == "two-moons") {
        for (int64_t i = 0; i < n; ++i) {
            int32_t branch = static_cast<int32_t>(rng.uniform_int(2));
            double a = pi * rng.uniform01();
            double x, y;
            if (branch == 0) {
                x = std::cos(a);
                y = std::sin(a);
            } else {
                x = 1.0 - std::cos(a);
                y = 0.5 - std::sin(a);
            }
            set.points(i, 0) = 2.0 * x + 0.1 * rng.normal();
            set.points(i, 1) = 2.0 * y + 0.1 * rng.normal();
            set.labels[static_cast<size_t>(i)] = branch;
        }
    } else if (name == "eight-gaussians") {
        for (int64_t i = 0; i < n; ++i) {
            int32_t k = static_cast<int32_t>(rng.uniform_int(8));
            double a = 2.0 * pi * double(k) / 8.0;
            set.points(i, 0) = 2.0 * std::cos(a) + 0.1 * rng.normal();
            set.points(i, 1) = 2.0 * std::sin(a) + 0.1 * rng.normal();
            set.labels[static_cast<size_t>(i)] = k;
        }
    } else if (name == "two-gaussians") {
        for (int64_t i = 0; i < n; ++i) {
            int32_t k = static_cast<int32_t>(rng.uniform_int(2));
            set.points(i, 0) = (k == 0 ? -2.0 : 2.0) + 0.3 * rng.normal();
            set.points(i, 1) = 0.3 * rng.normal();
            set.labels[static_cast<size_t>(i)] = k;
        }
    } else {
        throw std::invalid_argument("unknown toy set: " + name);
    }
    return set;
}

}  // namespace mf::synth
