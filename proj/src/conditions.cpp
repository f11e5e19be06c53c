#include "nlkacz/conditions.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include <Eigen/LU>
#include <Eigen/SVD>

namespace nlkacz {

namespace {

constexpr double kGradientFloor = 1e-14;

Vector dense_gradient(const ComponentSystem& system, Index j, const Vector& x, SparseVector& scratch) {
    system.gradient(j, x, scratch);
    return scratch.to_dense(system.dimension());
}

struct PairScan {
    double best = 0.0;
    Index s1 = 0;
    Index s2 = 0;
    Index component = 0;
};

// Max ratio over all ordered pairs of the given points, every component.
PairScan scan_pairs(const ComponentSystem& system, const std::vector<Vector>& points) {
    const Index count = system.size();
    const auto npts = static_cast<Index>(points.size());
    SparseVector scratch;
    PairScan scan;
    std::vector<Vector> grads(points.size());
    std::vector<double> norms(points.size());
    for (Index j = 0; j < count; ++j) {
        for (Index s = 0; s < npts; ++s) {
            grads[s] = dense_gradient(system, j, points[s], scratch);
            norms[s] = grads[s].norm();
            if (!(norms[s] >= kGradientFloor)) {
                throw Error(Errc::GradientVanished,
                            "sampled gradient of component " + std::to_string(j) + " vanished");
            }
        }
        for (Index a = 0; a < npts; ++a) {
            for (Index b = 0; b < npts; ++b) {
                if (a == b) continue;
                const double r = (grads[a] - grads[b]).norm() / norms[a];
                if (r > scan.best) scan = {r, a, b, j};
            }
        }
    }
    return scan;
}

}  // namespace

void Box::validate() const {
    if (lower.size() == 0 || lower.size() != upper.size())
        throw Error(Errc::DimensionMismatch, "box bounds must be nonempty and equal length");
    for (Index i = 0; i < lower.size(); ++i) {
        if (!std::isfinite(lower[i]) || !std::isfinite(upper[i]) || !(upper[i] > lower[i]))
            throw Error(Errc::InvalidArgument, "box is degenerate along axis " + std::to_string(i));
    }
}

double rgdc_ratio(const ComponentSystem& system, Index j, const Vector& x1, const Vector& x2) {
    SparseVector scratch;
    const Vector g1 = dense_gradient(system, j, x1, scratch);
    const Vector g2 = dense_gradient(system, j, x2, scratch);
    const double n1 = g1.norm();
    if (!(n1 >= kGradientFloor)) throw Error(Errc::GradientVanished, "gradient vanished at x1");
    return (g1 - g2).norm() / n1;
}

RgdcEstimate estimate_gamma(const ComponentSystem& system, const Box& region, Index samples,
                            std::uint64_t seed) {
    region.validate();
    const Index n = system.dimension();
    if (region.dimension() != n) throw Error(Errc::DimensionMismatch, "box dimension differs from system");
    if (samples < 2) throw Error(Errc::InvalidArgument, "need at least two samples");

    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<Vector> points(samples, Vector(n));
    std::vector<Index> perm(samples);
    for (Index i = 0; i < n; ++i) {
        std::iota(perm.begin(), perm.end(), Index{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        const double width = region.upper[i] - region.lower[i];
        for (Index s = 0; s < samples; ++s) {
            const double u = (static_cast<double>(perm[s]) + unit(rng)) / static_cast<double>(samples);
            points[s][i] = region.lower[i] + u * width;
        }
    }
    const PairScan scan = scan_pairs(system, points);

    RgdcEstimate est;
    est.samples = samples;
    est.region = region;
    est.worst_component = scan.component;
    Vector x1 = points[scan.s1];
    Vector x2 = points[scan.s2];
    double best = scan.best;

    // Pattern search over (x1, x2) with the component fixed.
    const Index j = scan.component;
    auto objective = [&](const Vector& a, const Vector& b) {
        SparseVector scratch;
        const Vector ga = dense_gradient(system, j, a, scratch);
        const double na = ga.norm();
        if (!(na >= kGradientFloor)) return -1.0;
        return (ga - dense_gradient(system, j, b, scratch)).norm() / na;
    };
    Vector step = 0.25 * (region.upper - region.lower);
    const Vector min_step = 1e-7 * (region.upper - region.lower);
    for (int round = 0; round < 400; ++round) {
        bool improved = false;
        for (int which = 0; which < 2; ++which) {
            for (Index i = 0; i < n; ++i) {
                for (double sign : {1.0, -1.0}) {
                    Vector a = x1;
                    Vector b = x2;
                    Vector& moved = which == 0 ? a : b;
                    moved[i] = std::clamp(moved[i] + sign * step[i], region.lower[i], region.upper[i]);
                    const double r = objective(a, b);
                    if (r > best) {
                        best = r;
                        x1 = std::move(a);
                        x2 = std::move(b);
                        improved = true;
                    }
                }
            }
        }
        if (!improved) {
            step *= 0.5;
            if ((step.array() < min_step.array()).all()) break;
        }
    }
    est.gamma_hat = best;
    est.worst_x1 = std::move(x1);
    est.worst_x2 = std::move(x2);
    return est;
}

RgdcEstimate estimate_gamma_grid(const ComponentSystem& system, const Box& region,
                                 Index points_per_axis, Index max_points) {
    region.validate();
    const Index n = system.dimension();
    if (region.dimension() != n) throw Error(Errc::DimensionMismatch, "box dimension differs from system");
    if (points_per_axis < 2) throw Error(Errc::InvalidArgument, "need at least two points per axis");
    double total = 1.0;
    for (Index i = 0; i < n; ++i) total *= static_cast<double>(points_per_axis);
    if (total > static_cast<double>(max_points))
        throw Error(Errc::SizeCapExceeded, "grid has too many nodes");

    std::vector<Vector> points;
    points.reserve(static_cast<std::size_t>(total));
    std::vector<Index> digit(n, 0);
    for (;;) {
        Vector p(n);
        for (Index i = 0; i < n; ++i) {
            const double t = static_cast<double>(digit[i]) / static_cast<double>(points_per_axis - 1);
            p[i] = region.lower[i] + t * (region.upper[i] - region.lower[i]);
        }
        points.push_back(std::move(p));
        Index i = 0;
        while (i < n && ++digit[i] == points_per_axis) digit[i++] = 0;
        if (i == n) break;
    }
    const PairScan scan = scan_pairs(system, points);
    RgdcEstimate est;
    est.gamma_hat = scan.best;
    est.samples = static_cast<Index>(points.size());
    est.region = region;
    est.worst_component = scan.component;
    est.worst_x1 = points[scan.s1];
    est.worst_x2 = points[scan.s2];
    return est;
}

bool rgdc_consequences_check(std::span<const GradientPair> pairs, double gamma) {
    if (!(gamma >= 0.0 && gamma < 1.0)) throw Error(Errc::OutOfDomain, "gamma must lie in [0, 1)");
    constexpr double slack = 1e-12;
    for (const auto& p : pairs) {
        const double n1 = p.first.norm();
        const double n2 = p.second.norm();
        if (!(n1 > 0.0) || !(n2 > 0.0)) throw Error(Errc::GradientVanished, "zero gradient in pair");
        const double cosine = p.first.dot(p.second) / (n1 * n2);
        if (cosine < 1.0 - gamma * gamma / 2.0 - slack) return false;
        const double scale = std::max(n1, n2);
        if ((1.0 - gamma) * n2 > n1 + slack * scale) return false;
        if (n1 > (1.0 + gamma) * n2 + slack * scale) return false;
    }
    return true;
}

double kappa_f(const Matrix& a, Index size_cap) {
    const Index rows = a.rows();
    const Index cols = a.cols();
    if (rows == 0 || cols == 0) throw Error(Errc::DimensionMismatch, "empty matrix");
    if (std::min(rows, cols) > size_cap || std::max(rows, cols) > size_cap) {
        throw Error(Errc::SizeCapExceeded, std::to_string(rows) + "x" + std::to_string(cols) +
                                               " exceeds dense SVD cap " + std::to_string(size_cap));
    }
    if (rows < cols) throw Error(Errc::RankDeficient, "fewer rows than columns");
    Eigen::BDCSVD<Matrix> svd(a);
    const auto& sv = svd.singularValues();
    const double smax = sv[0];
    const double smin = sv[sv.size() - 1];
    if (!(smax > 0.0) || smin < 1e-12 * smax) throw Error(Errc::RankDeficient, "matrix is rank deficient");
    return a.norm() / smin;
}

double c_of_gamma(double gamma) {
    if (!(gamma >= 0.0 && gamma < 1.0)) throw Error(Errc::OutOfDomain, "gamma must lie in [0, 1)");
    return gamma + gamma * gamma / 2.0 - gamma * gamma * gamma / 2.0;
}

double rate_hypothesis_bound(double theta, double tau) {
    const double t = theta * (1.0 - tau);
    return t / (2.0 + t);
}

RateBound rate_bound(double theta, double tau, double gamma, double kappa) {
    if (!(theta > 0.0 && theta <= 1.0)) throw Error(Errc::OutOfDomain, "theta must lie in (0, 1]");
    if (!(tau > 0.0 && tau < 1.0)) throw Error(Errc::OutOfDomain, "tau must lie in (0, 1)");
    if (!(gamma >= 0.0 && gamma < 1.0)) throw Error(Errc::OutOfDomain, "gamma must lie in [0, 1)");
    if (!(kappa >= 1.0)) throw Error(Errc::OutOfDomain, "kappa must be >= 1");
    RateBound out;
    out.gamma_kappa = gamma * kappa;
    out.hypothesis_bound = rate_hypothesis_bound(theta, tau);
    out.hypothesis_holds = out.gamma_kappa <= out.hypothesis_bound;
    if (!out.hypothesis_holds) {
        std::ostringstream msg;
        msg << "gamma*kappa = " << out.gamma_kappa << " exceeds " << out.hypothesis_bound;
        throw Error(Errc::HypothesisViolated, msg.str());
    }
    const double lin = 1.0 - out.gamma_kappa;
    const double q = tau * theta * theta * lin * lin / ((1.0 + gamma) * (1.0 + gamma) * kappa * kappa);
    out.rho = std::sqrt(std::max(0.0, 1.0 - q));
    return out;
}

double small_determinant(const Matrix& m) {
    if (m.rows() != m.cols()) throw Error(Errc::DimensionMismatch, "determinant needs a square matrix");
    switch (m.rows()) {
        case 0: return 1.0;
        case 1: return m(0, 0);
        case 2: return m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
        case 3:
            return m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1)) -
                   m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0)) +
                   m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0));
        default: return Eigen::PartialPivLU<Matrix>(m).determinant();
    }
}

DetSignResult det_sign_condition(const Matrix& s, const Matrix& b) {
    const Index p = s.rows();
    const Index m = s.cols();
    if (p != b.rows()) throw Error(Errc::DimensionMismatch, "spectrum count P must equal basis count D");
    if (m != b.cols()) throw Error(Errc::DimensionMismatch, "S and B must share the energy bins");
    if (m < p) throw Error(Errc::DimensionMismatch, "need at least P energy bins");

    DetSignResult out;
    std::vector<Index> alpha(p);
    std::iota(alpha.begin(), alpha.end(), Index{0});
    Matrix sa(p, p);
    Matrix ba(p, p);
    bool all_nonneg = true;
    bool all_nonpos = true;
    for (;;) {
        for (Index c = 0; c < p; ++c) {
            sa.col(c) = s.col(alpha[c]);
            ba.col(c) = b.col(alpha[c]);
        }
        const double prod = small_determinant(sa) * small_determinant(ba);
        out.subsets.push_back(alpha);
        out.products.push_back(prod);
        if (prod < -out.tolerance) all_nonneg = false;
        if (prod > out.tolerance) all_nonpos = false;
        // Next combination in lexicographic order.
        Index i = p - 1;
        while (i >= 0 && alpha[i] == m - p + i) --i;
        if (i < 0) break;
        ++alpha[i];
        for (Index k = i + 1; k < p; ++k) alpha[k] = alpha[k - 1] + 1;
    }
    out.holds = all_nonneg || all_nonpos;
    if (!out.holds) {
        std::size_t neg = 0;
        std::size_t pos = 0;
        for (double v : out.products) {
            if (v < -out.tolerance) ++neg;
            if (v > out.tolerance) ++pos;
        }
        const bool flag_negative = neg <= pos;
        for (std::size_t k = 0; k < out.products.size(); ++k) {
            const double v = out.products[k];
            if ((flag_negative && v < -out.tolerance) || (!flag_negative && v > out.tolerance))
                out.violating.push_back(out.subsets[k]);
        }
    }
    return out;
}

double mean_curvature(const Vector& gradient, const Matrix& hessian) {
    const Index n = gradient.size();
    if (hessian.rows() != n || hessian.cols() != n)
        throw Error(Errc::DimensionMismatch, "hessian must be N x N");
    const double gn = gradient.norm();
    if (!(gn >= 1e-14)) throw Error(Errc::GradientVanished, "gradient norm below 1e-14");
    const double scale = std::max(1.0, hessian.cwiseAbs().maxCoeff());
    if ((hessian - hessian.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale)
        throw Error(Errc::InvalidArgument, "hessian is not symmetric");
    const Vector unit = gradient / gn;
    return (hessian.trace() - unit.dot(hessian * unit)) / gn;
}

std::string_view to_string(Verdict v) {
    switch (v) {
        case Verdict::Holds: return "holds";
        case Verdict::Fails: return "fails";
        case Verdict::NotChecked: return "not-checked";
    }
    return "not-checked";
}

namespace {

nlohmann::json optional_json(const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

nlohmann::json ConditionReport::to_json() const {
    nlohmann::json j;
    j["kappa_f"] = kappa_f;
    j["gamma_hat"] = optional_json(gamma_hat);
    j["gamma_b"] = {{"upper", optional_json(gamma_b)},
                    {"sampled_lower", optional_json(gamma_b_lower)},
                    {"tilde", optional_json(gamma_b_tilde)}};
    j["det_sign"] = {{"verdict", std::string(to_string(det_sign))},
                     {"violating_subsets", det_sign_violations}};
    j["rate_bound"] = optional_json(rate_bound);
    j["curvature_samples"] = curvature_samples;
    nlohmann::json verdict_obj = nlohmann::json::object();
    for (const auto& v : verdicts)
        verdict_obj[v.name] = {{"verdict", std::string(to_string(v.verdict))}, {"evidence", v.evidence}};
    j["verdicts"] = verdict_obj;
    return j;
}

std::string ConditionReport::to_text() const {
    std::ostringstream out;
    out.precision(8);
    auto opt = [&](const char* label, const std::optional<double>& v) {
        out << "  " << label << ": ";
        if (v) out << *v;
        else out << "n/a";
        out << '\n';
    };
    out << "condition report\n";
    opt("gamma_hat (sampled lower bound)", gamma_hat);
    opt("gamma_B upper bound", gamma_b);
    opt("gamma_B sampled lower bound", gamma_b_lower);
    opt("gamma_B tilde", gamma_b_tilde);
    out << "  det-sign: " << to_string(det_sign);
    if (!det_sign_violations.empty()) {
        out << " (violating subsets:";
        for (const auto& s : det_sign_violations) {
            out << " {";
            for (std::size_t k = 0; k < s.size(); ++k) out << (k ? "," : "") << s[k];
            out << "}";
        }
        out << ")";
    }
    out << '\n';
    if (!kappa_f.empty()) {
        const auto [lo, hi] = std::minmax_element(kappa_f.begin(), kappa_f.end());
        out << "  kappa_F: " << kappa_f.size() << " samples, min " << *lo << ", max " << *hi << '\n';
    }
    opt("rate bound", rate_bound);
    if (!curvature_samples.empty()) {
        const auto positive = std::count_if(curvature_samples.begin(), curvature_samples.end(),
                                            [](double c) { return c > 0.0; });
        out << "  mean curvature: " << positive << "/" << curvature_samples.size()
            << " samples positive\n";
    }
    for (const auto& v : verdicts)
        out << "  [" << to_string(v.verdict) << "] " << v.name << ": " << v.evidence << '\n';
    return out.str();
}

}  // namespace nlkacz
