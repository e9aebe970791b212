#pragma once

// Self-contained numerical verification suites.  Each suite builds its own
// inputs from an explicit seed, checks a family of analytic facts against an
// independent oracle (exhaustive search, finite differences, Monte Carlo, or
// a closed form), and reports every measured value with its tolerance.  The
// CLI `verify` command and the acceptance runner both consume these.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace mf::verify {

using nlohmann::json;

struct CheckResult {
    std::string name;
    bool passed = false;
    double measured = 0.0;
    double tolerance = 0.0;
    std::string note;  // brief context: counts, worst offender, units

    json to_json() const;
};

struct SuiteResult {
    std::string suite;
    std::vector<CheckResult> checks;
    double wall_seconds = 0.0;

    bool passed() const;
    json to_json() const;
};

// Minibatch coupling vs an exhaustive bitmask-DP assignment oracle over 200
// random instances (N <= 16, dim <= 8): cost within 1e-6 of the optimum and
// a valid permutation every time.
SuiteResult verify_ot(uint64_t seed);

// Analytic MLP gradients (parameters and inputs) vs central finite
// differences on 20 random configurations in 64-bit: max relative error
// below 1e-4.
SuiteResult verify_gradients(uint64_t seed);

// Mean/covariance ODE integration vs the closed-form diversity marginal
// ((1-t) z0, eta^2 t^2 I) at 1e-6 relative, and the Ornstein-Uhlenbeck
// stationary variance 1 vs an Euler-Maruyama Monte-Carlo run at 5%.
SuiteResult verify_prop2(uint64_t seed);

// Forward Euler-Maruyama marginals at t in {0.25, 0.5, 0.75} over 20k paths:
// per-dimension mean within 3 standard errors of (1-t) z0, covariance within
// 5% relative of eta^2 t^2 I.
SuiteResult verify_prop3(uint64_t seed);

// Diversity grows with the noise scale: across-seed output spread and the
// paired-distance diversity of the backward-chain outputs both strictly
// increase over eta in {0, 0.1, 0.5} under common random numbers.
SuiteResult verify_eta_sweep(uint64_t seed);

// Runs the suite with the given name ("ot", "gradients", "prop2", "prop3",
// "eta-sweep"); throws std::invalid_argument for unknown names.
SuiteResult run_suite(const std::string& name, uint64_t seed);

const std::vector<std::string>& suite_names();

}  // namespace mf::verify
