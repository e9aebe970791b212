#include "mf/ot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace mf::ot {

using json = nlohmann::json;

Tensor<double> build_cost_matrix(const Tensor<double>& z0, const Tensor<double>& z1) {
    if (z0.rank() != 2 || z1.rank() != 2)
        throw std::invalid_argument("cost matrix expects rank-2 batches");
    if (z0.shape[0] == 0) throw std::invalid_argument("empty batch");
    if (z0.shape[0] != z1.shape[0] || z0.shape[1] != z1.shape[1])
        throw std::invalid_argument("batch shapes differ");
    int64_t n = z0.shape[0], d = z0.shape[1];
    Tensor<double> C({n, n});
    for (int64_t i = 0; i < n; ++i) {
        const double* a = z0.data.data() + i * d;
        for (int64_t j = 0; j < n; ++j) {
            const double* b = z1.data.data() + j * d;
            double s = 0.0;
            for (int64_t k = 0; k < d; ++k) {
                double diff = a[k] - b[k];
                s += diff * diff;
            }
            C(i, j) = s;
        }
    }
    return C;
}

void c_transform(const Tensor<double>& C, const std::vector<double>& f,
                 std::vector<double>& g, std::vector<int64_t>& argmin_row) {
    int64_t n = C.shape[0];
    g.assign(static_cast<size_t>(n), 0.0);
    argmin_row.assign(static_cast<size_t>(n), 0);
    for (int64_t j = 0; j < n; ++j) {
        double best = std::numeric_limits<double>::infinity();
        int64_t bi = 0;
        for (int64_t i = 0; i < n; ++i) {
            double v = C(i, j) - f[static_cast<size_t>(i)];
            if (v < best) {  // strict: ties keep the lowest row index
                best = v;
                bi = i;
            }
        }
        g[static_cast<size_t>(j)] = best;
        argmin_row[static_cast<size_t>(j)] = bi;
    }
}

namespace {

double dual_value_of(const std::vector<double>& f, const std::vector<double>& g) {
    double s = 0.0;
    for (double v : f) s += v;
    for (double v : g) s += v;
    return s / double(f.size());
}

bool is_permutation(const std::vector<int64_t>& rows) {
    std::vector<char> seen(rows.size(), 0);
    for (int64_t r : rows) {
        if (r < 0 || r >= static_cast<int64_t>(rows.size())) return false;
        if (seen[static_cast<size_t>(r)]) return false;
        seen[static_cast<size_t>(r)] = 1;
    }
    return true;
}

}  // namespace

DualPotentials solve_dual(const Tensor<double>& C, int64_t max_iterations, double tolerance) {
    if (C.rank() != 2 || C.shape[0] != C.shape[1])
        throw std::invalid_argument("cost matrix must be square");
    require_finite(C, "cost matrix");
    int64_t n = C.shape[0];

    DualPotentials pot;
    pot.f.assign(static_cast<size_t>(n), 0.0);
    std::vector<double> g;
    std::vector<int64_t> argmin;
    c_transform(C, pot.f, g, argmin);
    double best_value = dual_value_of(pot.f, g);
    std::vector<double> best_f = pot.f;

    double cmax = 0.0;
    for (double v : C.data) cmax = std::max(cmax, std::abs(v));
    double step = std::max(cmax / double(n), 1e-12);

    std::vector<int64_t> count(static_cast<size_t>(n), 0);
    std::vector<double> trial(static_cast<size_t>(n), 0.0);
    int64_t it = 0;
    for (; it < max_iterations; ++it) {
        // Optimality certificate: when each row serves exactly one column the
        // dual value telescopes to the primal cost of that permutation.
        if (is_permutation(argmin)) {
            pot.converged = true;
            break;
        }
        std::fill(count.begin(), count.end(), 0);
        for (int64_t r : argmin) count[static_cast<size_t>(r)]++;
        // Subgradient of the dual objective in f_i is (1 - count_i)/n.
        for (int64_t i = 0; i < n; ++i)
            trial[static_cast<size_t>(i)] =
                pot.f[static_cast<size_t>(i)] +
                step * (1.0 - double(count[static_cast<size_t>(i)])) / double(n);
        std::vector<double> g_trial;
        std::vector<int64_t> argmin_trial;
        c_transform(C, trial, g_trial, argmin_trial);
        double v = dual_value_of(trial, g_trial);
        if (v > best_value + tolerance * std::max(1.0, std::abs(best_value))) {
            best_value = v;
            best_f = trial;
            step *= 1.05;
        } else {
            step *= 0.7;
        }
        pot.f = trial;
        g = std::move(g_trial);
        argmin = std::move(argmin_trial);
        if (step < 1e-15 * std::max(1.0, cmax)) break;
    }
    pot.iterations = it;
    if (!pot.converged) {
        // Report the best certified point rather than the last trial.
        pot.f = best_f;
        c_transform(C, pot.f, g, argmin);
        pot.converged = is_permutation(argmin);
    }
    pot.g = g;
    pot.dual_value = dual_value_of(pot.f, pot.g);
    return pot;
}

std::vector<int64_t> assignment_exact(const Tensor<double>& C) {
    if (C.rank() != 2 || C.shape[0] != C.shape[1])
        throw std::invalid_argument("cost matrix must be square");
    int64_t n = C.shape[0];
    const double INF = std::numeric_limits<double>::infinity();
    // Shortest augmenting paths with row/column potentials, 1-based with a
    // virtual column 0.
    std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(n) + 1, 0.0);
    std::vector<int64_t> p(static_cast<size_t>(n) + 1, 0), way(static_cast<size_t>(n) + 1, 0);
    for (int64_t i = 1; i <= n; ++i) {
        p[0] = i;
        int64_t j0 = 0;
        std::vector<double> minv(static_cast<size_t>(n) + 1, INF);
        std::vector<char> used(static_cast<size_t>(n) + 1, 0);
        do {
            used[static_cast<size_t>(j0)] = 1;
            int64_t i0 = p[static_cast<size_t>(j0)], j1 = 0;
            double delta = INF;
            for (int64_t j = 1; j <= n; ++j) {
                if (used[static_cast<size_t>(j)]) continue;
                double cur = C(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
                if (cur < minv[static_cast<size_t>(j)]) {
                    minv[static_cast<size_t>(j)] = cur;
                    way[static_cast<size_t>(j)] = j0;
                }
                if (minv[static_cast<size_t>(j)] < delta) {
                    delta = minv[static_cast<size_t>(j)];
                    j1 = j;
                }
            }
            for (int64_t j = 0; j <= n; ++j) {
                if (used[static_cast<size_t>(j)]) {
                    u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
                    v[static_cast<size_t>(j)] -= delta;
                } else {
                    minv[static_cast<size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<size_t>(j0)] != 0);
        do {
            int64_t j1 = way[static_cast<size_t>(j0)];
            p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
            j0 = j1;
        } while (j0);
    }
    std::vector<int64_t> row_for_col(static_cast<size_t>(n));
    for (int64_t j = 1; j <= n; ++j) row_for_col[static_cast<size_t>(j - 1)] = p[static_cast<size_t>(j)] - 1;
    return row_for_col;
}

TransportPlan extract_plan(const Tensor<double>& C, const DualPotentials& pot,
                           double eps_slack) {
    int64_t n = C.shape[0];
    if (static_cast<int64_t>(pot.f.size()) != n || static_cast<int64_t>(pot.g.size()) != n)
        throw std::invalid_argument("potential length does not match cost matrix");
    double cmax = 0.0;
    for (double v : C.data) cmax = std::max(cmax, std::abs(v));
    if (eps_slack < 0) eps_slack = 1e-6 * std::max(cmax, 1.0);

    TransportPlan plan;
    plan.mass = 1.0 / double(n);
    plan.slack = Tensor<double>({n, n});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < n; ++j)
            plan.slack(i, j) = C(i, j) - pot.f[static_cast<size_t>(i)] - pot.g[static_cast<size_t>(j)];

    std::vector<int64_t> row_for_col(static_cast<size_t>(n), -1);
    bool ok = true;
    for (int64_t j = 0; j < n && ok; ++j) {
        double best = std::numeric_limits<double>::infinity();
        int64_t bi = -1;
        for (int64_t i = 0; i < n; ++i) {
            double s = plan.slack(i, j);
            if (s < best) {
                best = s;
                bi = i;
            }
        }
        if (best > eps_slack) ok = false;
        row_for_col[static_cast<size_t>(j)] = bi;
    }
    if (ok) ok = is_permutation(row_for_col);

    if (!ok) {
        row_for_col = assignment_exact(C);
        plan.used_fallback = true;
        json dump;
        dump["cost"] = C.data;
        dump["n"] = n;
        dump["f"] = pot.f;
        dump["g"] = pot.g;
        dump["slack"] = plan.slack.data;
        dump["row_for_col"] = row_for_col;
        plan.diagnostics = dump.dump();
    }

    plan.pairs.resize(static_cast<size_t>(n));
    for (int64_t j = 0; j < n; ++j) {
        int64_t i = row_for_col[static_cast<size_t>(j)];
        plan.pairs[static_cast<size_t>(i)] = {i, j};
    }
    plan.cost = 0.0;
    for (auto [i, j] : plan.pairs) plan.cost += C(i, j);
    plan.cost /= double(n);
    return plan;
}

TransportPlan solve_coupling(const Tensor<double>& z0, const Tensor<double>& z1,
                             int64_t max_iterations) {
    Tensor<double> C = build_cost_matrix(z0, z1);
    DualPotentials pot = solve_dual(C, max_iterations);
    return extract_plan(C, pot);
}

MatchedPairs match_pairs(const TransportPlan& plan, const Tensor<double>& Z0,
                         const Tensor<double>& Z1) {
    int64_t n = static_cast<int64_t>(plan.pairs.size());
    if (Z0.rank() != 2 || Z1.rank() != 2 || Z0.shape[0] != n || Z1.shape[0] != n ||
        Z0.shape[1] != Z1.shape[1])
        throw std::invalid_argument("plan does not match batch shapes");
    int64_t d = Z0.shape[1];
    MatchedPairs out;
    out.z0 = Tensor<double>({n, d});
    out.z1 = Tensor<double>({n, d});
    for (int64_t k = 0; k < n; ++k) {
        auto [i, j] = plan.pairs[static_cast<size_t>(k)];
        std::copy_n(Z0.data.data() + i * d, d, out.z0.data.data() + k * d);
        std::copy_n(Z1.data.data() + j * d, d, out.z1.data.data() + k * d);
    }
    return out;
}

}  // namespace mf::ot
