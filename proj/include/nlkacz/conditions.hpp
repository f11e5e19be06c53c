#pragma once

// Checks for the hypotheses behind the convergence guarantees: sampled
// relative-gradient-discrepancy constants, scaled condition numbers, the
// determinant-sign test for spectral models, contraction factors and the
// mean-curvature test that rules out the tangential cone condition.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "nlkacz/nkm.hpp"

namespace nlkacz {

/// Axis-aligned box [lower, upper].
struct Box {
    Vector lower;
    Vector upper;

    Index dimension() const { return lower.size(); }
    void validate() const;
};

/// Sampled supremum of ||grad F_j(x1) - grad F_j(x2)|| / ||grad F_j(x1)||.
/// Always a lower bound on the true supremum over the region.
struct RgdcEstimate {
    double gamma_hat = 0.0;
    Index samples = 0;
    Box region;
    Vector worst_x1;
    Vector worst_x2;
    Index worst_component = 0;
    bool lower_bound = true;
};

/// Ratio for one component and one ordered pair of points.
double rgdc_ratio(const ComponentSystem& system, Index j, const Vector& x1, const Vector& x2);

/// Latin-hypercube pairs followed by a pattern search around the worst pair.
RgdcEstimate estimate_gamma(const ComponentSystem& system, const Box& region, Index samples,
                            std::uint64_t seed);

/// Tensor-grid variant: every ordered pair of grid nodes. A grid on a sub-box
/// whose nodes are a subset of a larger grid never reports a larger value.
RgdcEstimate estimate_gamma_grid(const ComponentSystem& system, const Box& region,
                                 Index points_per_axis, Index max_points = 20000);

struct GradientPair {
    Vector first;
    Vector second;
};

/// True when every pair satisfies the angle and length bounds implied by a
/// discrepancy constant gamma in [0, 1).
bool rgdc_consequences_check(std::span<const GradientPair> pairs, double gamma);

/// ||A||_F / sigma_min(A) for a full-column-rank matrix.
double kappa_f(const Matrix& a, Index size_cap = 2000);

/// gamma + gamma^2/2 - gamma^3/2, the per-step residual contraction factor.
double c_of_gamma(double gamma);

/// Right-hand side theta(1-tau) / (2 + theta(1-tau)) of the rate hypothesis.
double rate_hypothesis_bound(double theta, double tau);

struct RateBound {
    double rho = 1.0;
    double gamma_kappa = 0.0;
    double hypothesis_bound = 0.0;
    bool hypothesis_holds = false;
};

/// sqrt(1 - tau theta^2 (1 - gamma kappa)^2 / ((1 + gamma)^2 kappa^2)).
/// Throws HypothesisViolated when gamma*kappa exceeds the admissible bound.
RateBound rate_bound(double theta, double tau, double gamma, double kappa);

struct DetSignResult {
    bool holds = true;
    /// One entry per P-column subset, in lexicographic order.
    std::vector<std::vector<Index>> subsets;
    std::vector<double> products;
    /// Subsets whose product has the minority sign when the test fails.
    std::vector<std::vector<Index>> violating;
    double tolerance = 1e-14;
};

/// det(S[:, a]) * det(B[:, a]) over all column subsets a of size P.
DetSignResult det_sign_condition(const Matrix& s, const Matrix& b);

/// Determinant used by det_sign_condition: cofactor expansion up to 3x3,
/// partial-pivot LU above.
double small_determinant(const Matrix& m);

/// Mean curvature of the level set through x: (tr H - n^T H n) / ||g||.
double mean_curvature(const Vector& gradient, const Matrix& hessian);

enum class Verdict { Holds, Fails, NotChecked };

std::string_view to_string(Verdict v);

struct HypothesisVerdict {
    std::string name;
    Verdict verdict = Verdict::NotChecked;
    std::string evidence;
};

struct ConditionReport {
    std::vector<double> kappa_f;
    std::optional<double> gamma_hat;
    std::optional<double> gamma_b;
    std::optional<double> gamma_b_lower;
    std::optional<double> gamma_b_tilde;
    Verdict det_sign = Verdict::NotChecked;
    std::vector<std::vector<Index>> det_sign_violations;
    std::optional<double> rate_bound;
    std::vector<double> curvature_samples;
    std::vector<HypothesisVerdict> verdicts;

    nlohmann::json to_json() const;
    std::string to_text() const;
};

}  // namespace nlkacz
