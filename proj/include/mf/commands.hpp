#pragma once

// Experiment orchestration: the JSON configuration schema, run manifests
// with content hashes, and the CLI commands (train-vq, train-drift, sample,
// verify, eval, sweep).  Every command is a pure function of its config file
// and seed: rerunning with identical inputs reproduces identical artifact
// bytes, which the manifests certify with SHA-256 hashes.

#include "mf/baselines.hpp"
#include "mf/derode.hpp"
#include "mf/divsde.hpp"
#include "mf/metrics.hpp"
#include "mf/synth.hpp"
#include "mf/vq.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace mf::commands {

using nlohmann::json;

// Either a synthetic motion dataset (family bank + generator settings) or a
// named 2-D toy point set.
struct DatasetSpec {
    std::string kind = "motion";  // "motion" | "toy"

    // motion: explicit family list wins; otherwise `num_classes` default
    // families are built with the given noise scale.
    std::vector<synth::FamilySpec> families;
    int64_t num_classes = 4;
    double noise_scale = 0.03;
    synth::SynthConfig synth;

    // toy
    std::string toy = "eight-gaussians";
    int64_t toy_count = 4096;
    double toy_train_fraction = 0.8;

    void validate() const;
    json to_json() const;
    static DatasetSpec from_json(const json& j);
};

struct ExperimentConfig {
    DatasetSpec dataset;
    vq::VqConfig vq;
    vq::VqTrainOptions vq_train;
    derode::DeroDeTrainConfig drift;
    baselines::BaselineConfig baseline;
    divsde::SamplerConfig sampler;
    metrics::MetricOptions metric_options;
    metrics::ClassifierConfig classifier;

    uint64_t seed = 0;
    bool has_seed = false;  // seeds are explicit; commands reject a missing one
    std::string out_dir = "run-out";
    std::string dtype = "f32";  // "f32" | "f64" working precision
    int64_t sample_count = 256;
    int64_t sweep_count = 256;

    void validate() const;
    json to_json() const;
    static ExperimentConfig from_json(const json& j);
    static ExperimentConfig load(const std::string& path);
};

// Parsed command line, normalized by the binary's argument parser.
struct CliOptions {
    std::string command;
    std::string config_path;
    std::string out_dir;  // overrides the config's out_dir when non-empty
    std::optional<uint64_t> seed;
    std::string mode;
    std::optional<int64_t> steps;
    std::optional<double> eta;
    std::optional<int64_t> count;
    std::optional<int32_t> label;
    std::vector<std::string> positional;
};

// Provenance record: written with status "running" before the work starts
// and finalized with artifact hashes after it ends.
struct RunManifest {
    std::string command;
    std::string config_hash;
    json config_echo = json::object();
    json invocation = json::object();              // effective flag overrides
    uint64_t seed = 0;
    std::map<std::string, std::string> inputs;     // path -> sha256
    std::map<std::string, std::string> artifacts;  // path -> sha256
    json timings = json::object();                 // seconds per phase
    std::string started_at, finished_at;
    std::string status = "running";

    json to_json() const;
    void write(const std::string& path) const;
};

// Exit codes shared with the binary: 0 success, 1 usage/config error,
// 2 verification failure, 3 numerical failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitVerify = 2;
inline constexpr int kExitNumeric = 3;

int cmd_train_vq(const CliOptions& opt);
int cmd_train_drift(const CliOptions& opt);
int cmd_sample(const CliOptions& opt);
int cmd_verify(const CliOptions& opt);
int cmd_eval(const CliOptions& opt);
int cmd_sweep(const CliOptions& opt);

// Dispatch by opt.command; maps exceptions onto the exit-code taxonomy
// (std::invalid_argument -> 1, verification failure -> 2, numeric -> 3).
int dispatch(const CliOptions& opt);

}  // namespace mf::commands
