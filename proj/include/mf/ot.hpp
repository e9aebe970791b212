#pragma once

// Exact minibatch optimal transport between two equal-size batches with
// uniform weights 1/N: squared-Euclidean cost matrix, dual solve by
// subgradient ascent on the c-transformed objective, plan extraction from
// zero-slack entries, and an exact assignment fallback that guarantees a
// valid permutation plan regardless of dual convergence.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mf/tensor.hpp"

namespace mf::ot {

// C_ij = ||z0_i - z1_j||^2 for row batch z0 (N x d) and column batch z1 (N x d).
Tensor<double> build_cost_matrix(const Tensor<double>& z0, const Tensor<double>& z1);

struct DualPotentials {
    std::vector<double> f;   // row potentials
    std::vector<double> g;   // column potentials, g_j = min_k (C_kj - f_k)
    double dual_value = 0.0; // (1/N) (sum f + sum g)
    bool converged = false;  // argmin rows formed a permutation before the cap
    int64_t iterations = 0;
};

// g_j = min_k (C_kj - f_k); argmin_row[j] = lowest row index attaining it.
void c_transform(const Tensor<double>& C, const std::vector<double>& f,
                 std::vector<double>& g, std::vector<int64_t>& argmin_row);

// Maximize (1/N)(sum_i f_i + sum_j min_k (C_kj - f_k)) by subgradient ascent
// with an adaptive step. Stops early when the per-column argmin rows form a
// permutation (the dual value then equals that permutation's primal cost, so
// both are optimal). Non-convergence returns best-so-far with converged=false.
DualPotentials solve_dual(const Tensor<double>& C, int64_t max_iterations = 20000,
                          double tolerance = 1e-9);

struct TransportPlan {
    // pairs[i] = (i, j): row i matched to column j, listed in row order.
    std::vector<std::pair<int64_t, int64_t>> pairs;
    double mass = 0.0;        // 1/N per pair
    double cost = 0.0;        // sum C[i][j] / N over pairs
    Tensor<double> slack;     // s_ij = C_ij - f_i - g_j (diagnostic)
    bool used_fallback = false;
    std::string diagnostics;  // JSON dump of (C, f, s, plan) when fallback fired
};

// Match each column to its minimal-slack row (ties: lowest row index). If any
// column's best slack exceeds eps_slack or the greedy match is not a
// permutation, re-solve with the exact assignment solver and flag it.
// eps_slack < 0 selects the default 1e-6 * max(C).
TransportPlan extract_plan(const Tensor<double>& C, const DualPotentials& pot,
                           double eps_slack = -1.0);

// Exact minimum-cost assignment (shortest augmenting paths with potentials,
// O(N^3)). Returns row_for_col: column j is served by row row_for_col[j].
std::vector<int64_t> assignment_exact(const Tensor<double>& C);

// Full pipeline: cost matrix, dual solve, plan extraction.
TransportPlan solve_coupling(const Tensor<double>& z0, const Tensor<double>& z1,
                             int64_t max_iterations = 20000);

struct MatchedPairs {
    Tensor<double> z0;  // N x d, row i of the input z0 batch
    Tensor<double> z1;  // N x d, its transport match
};

// Gather the coupled rows in plan order.
MatchedPairs match_pairs(const TransportPlan& plan, const Tensor<double>& Z0,
                         const Tensor<double>& Z1);

}  // namespace mf::ot
