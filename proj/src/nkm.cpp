#include "nlkacz/nkm.hpp"

#include <cmath>
#include <string>

#include "nlkacz/log.hpp"

namespace nlkacz {

double SparseVector::squared_norm() const {
    double s = 0.0;
    for (double v : value) s += v * v;
    return s;
}

double SparseVector::dot(const Vector& x) const {
    double s = 0.0;
    for (std::size_t k = 0; k < index.size(); ++k) s += value[k] * x[index[k]];
    return s;
}

Vector SparseVector::to_dense(Index n) const {
    Vector out = Vector::Zero(n);
    for (std::size_t k = 0; k < index.size(); ++k) out[index[k]] += value[k];
    return out;
}

void ComponentSystem::residuals(const Vector& x, Vector& out) const {
    out.resize(size());
    for (Index j = 0; j < size(); ++j) out[j] = value(j, x);
}

void ComponentSystem::refresh_residuals(const Vector& x, std::span<const Index>,
                                        Vector& out) const {
    residuals(x, out);
}

CallbackSystem::CallbackSystem(Index dimension, Index size, Callback fn)
    : n_(dimension), j_(size), fn_(std::move(fn)) {
    if (n_ < 1 || j_ < 1) throw Error(Errc::InvalidArgument, "system needs N >= 1 and J >= 1");
}

double CallbackSystem::value(Index j, const Vector& x) const { return fn_(j, x, nullptr); }

void CallbackSystem::gradient(Index j, const Vector& x, SparseVector& out) const {
    Vector g(n_);
    fn_(j, x, &g);
    out.clear();
    for (Index i = 0; i < n_; ++i) out.push(i, g[i]);
}

AffineSystem::AffineSystem(Matrix a, Vector b) : a_(std::move(a)), b_(std::move(b)) {
    if (a_.rows() != b_.size()) throw Error(Errc::DimensionMismatch, "A rows must equal b size");
}

double AffineSystem::value(Index j, const Vector& x) const { return a_.row(j).dot(x) - b_[j]; }

void AffineSystem::gradient(Index j, const Vector&, SparseVector& out) const {
    out.clear();
    for (Index i = 0; i < a_.cols(); ++i) out.push(i, a_(j, i));
}

std::string_view to_string(StrategyKind kind) {
    switch (kind) {
        case StrategyKind::Cyclic: return "cyclic";
        case StrategyKind::MaxResidual: return "max_residual";
        case StrategyKind::ThetaResidual: return "theta_residual";
        case StrategyKind::PositiveCyclic: return "positive_cyclic";
    }
    return "unknown";
}

StrategyKind strategy_from_string(std::string_view name) {
    if (name == "cyclic") return StrategyKind::Cyclic;
    if (name == "max_residual") return StrategyKind::MaxResidual;
    if (name == "theta_residual") return StrategyKind::ThetaResidual;
    if (name == "positive_cyclic") return StrategyKind::PositiveCyclic;
    throw Error(Errc::InvalidArgument, "unknown strategy '" + std::string(name) + "'");
}

std::string_view to_string(Termination t) {
    switch (t) {
        case Termination::Converged: return "converged";
        case Termination::MaxEpochs: return "max_epochs";
        case Termination::Stopped: return "stopped";
    }
    return "unknown";
}

Index IterationTrace::epochs_started() const {
    if (component_count == 0) return 0;
    return (iterations + component_count - 1) / component_count;
}

namespace {

void check_index(const ComponentSystem& system, Index j) {
    if (j < 0 || j >= system.size()) {
        throw Error(Errc::IndexOutOfRange,
                    "component " + std::to_string(j) + " outside [0, " +
                        std::to_string(system.size()) + ")");
    }
}

}  // namespace

Vector nkm_step(const ComponentSystem& system, const Vector& x, Index j, double gradient_floor) {
    check_index(system, j);
    if (x.size() != system.dimension())
        throw Error(Errc::DimensionMismatch, "point length differs from system dimension");
    SparseVector g;
    system.gradient(j, x, g);
    const double gn2 = g.squared_norm();
    if (!(std::sqrt(gn2) >= gradient_floor)) {
        throw Error(Errc::GradientVanished,
                    "gradient norm of component " + std::to_string(j) + " below floor");
    }
    const double coef = system.value(j, x) / gn2;
    Vector out = x;
    for (std::size_t k = 0; k < g.nnz(); ++k) out[g.index[k]] -= coef * g.value[k];
    return out;
}

Index select_cyclic(Index k, Index count) {
    if (k < 0 || count < 1) throw Error(Errc::InvalidArgument, "cyclic selection needs k >= 0, J >= 1");
    return k % count;
}

Index select_max_residual(const Vector& residuals) {
    if (residuals.size() < 1) throw Error(Errc::InvalidArgument, "empty residual vector");
    Index best = 0;
    double best_abs = std::abs(residuals[0]);
    for (Index j = 1; j < residuals.size(); ++j) {
        const double a = std::abs(residuals[j]);
        if (a > best_abs) {
            best_abs = a;
            best = j;
        }
    }
    return best;
}

Index select_theta_residual(const Vector& residuals, double theta) {
    const Index count = residuals.size();
    if (count < 1) throw Error(Errc::InvalidArgument, "empty residual vector");
    const double theta_max = 1.0 / std::sqrt(static_cast<double>(count));
    if (!(theta > 0.0) || theta > theta_max * (1.0 + 1e-15))
        throw Error(Errc::InvalidArgument, "theta must lie in (0, 1/sqrt(J)]");
    const double norm = residuals.norm();
    if (norm == 0.0) throw Error(Errc::ZeroResidual, "residual vector is zero");
    const double threshold = theta * norm;
    for (Index j = 0; j < count; ++j) {
        if (std::abs(residuals[j]) >= threshold) return j;
    }
    // Only reachable through rounding when theta = 1/sqrt(J) and all |r_j| tie.
    return select_max_residual(residuals);
}

PositiveCyclicPick select_positive_cyclic(Index cursor, const Vector& residuals, double epsilon) {
    const Index count = residuals.size();
    if (count < 1) throw Error(Errc::InvalidArgument, "empty residual vector");
    if (!(epsilon >= 0.0)) throw Error(Errc::InvalidArgument, "epsilon must be >= 0");
    if (cursor < 0 || cursor >= count) throw Error(Errc::IndexOutOfRange, "cursor out of range");
    if (residuals.cwiseAbs().maxCoeff() <= epsilon)
        throw Error(Errc::ZeroResidual, "all residuals within epsilon");
    for (Index step = 1; step <= count; ++step) {
        const Index j = (cursor + step) % count;
        if (residuals[j] > epsilon) return {j, j, false};
    }
    const Index j = select_max_residual(residuals);
    return {j, j, true};
}

IterationTrace run(const ComponentSystem& system, const Vector& x0,
                   const SelectionStrategy& strategy, const StopRule& stop,
                   const RunOptions& options) {
    const Index n = system.dimension();
    const Index count = system.size();
    if (x0.size() != n) throw Error(Errc::DimensionMismatch, "x0 length differs from system dimension");
    if (stop.max_epochs < 1) throw Error(Errc::InvalidArgument, "max_epochs must be positive");
    if (!(stop.gradient_floor > 0.0) || !std::isfinite(stop.gradient_floor) ||
        !(stop.residual_tolerance >= 0.0) || !std::isfinite(stop.residual_tolerance))
        throw Error(Errc::InvalidArgument, "stop tolerances must be finite, gradient floor > 0");

    double theta = strategy.theta;
    if (strategy.kind == StrategyKind::ThetaResidual) {
        const double theta_max = 1.0 / std::sqrt(static_cast<double>(count));
        if (theta == 0.0) theta = theta_max;
        if (!(theta > 0.0) || theta > theta_max * (1.0 + 1e-15))
            throw Error(Errc::InvalidArgument, "theta must lie in (0, 1/sqrt(J)]");
    }

    const auto& solution = system.known_solution();
    if (solution && solution->size() != n)
        throw Error(Errc::DimensionMismatch, "known solution length differs from dimension");

    IterationTrace trace;
    trace.component_count = count;
    Vector x = x0;
    Vector r(count);
    system.residuals(x, r);

    const Index max_iterations = stop.max_epochs * count;
    Index cursor = count - 1;
    SparseVector g;
    auto log = logger();

    Index k = 0;
    for (;; ++k) {
        const double rn = r.norm();
        const double dist = solution ? (x - *solution).norm()
                                     : std::numeric_limits<double>::quiet_NaN();
        if (!std::isfinite(rn))
            throw IterationError(Errc::NonFinite, k, -1, "residual norm is not finite");
        if (rn <= stop.residual_tolerance) {
            trace.reason = Termination::Converged;
            trace.final_residual_norm = rn;
            trace.final_distance = dist;
            break;
        }
        if (options.on_epoch && k > 0 && k % count == 0 && options.on_epoch(k / count, rn, dist)) {
            trace.reason = Termination::Stopped;
            trace.final_residual_norm = rn;
            trace.final_distance = dist;
            break;
        }
        if (k >= max_iterations) {
            trace.reason = Termination::MaxEpochs;
            trace.final_residual_norm = rn;
            trace.final_distance = dist;
            break;
        }

        Index j = 0;
        try {
            switch (strategy.kind) {
                case StrategyKind::Cyclic: j = select_cyclic(k, count); break;
                case StrategyKind::MaxResidual: j = select_max_residual(r); break;
                case StrategyKind::ThetaResidual: j = select_theta_residual(r, theta); break;
                case StrategyKind::PositiveCyclic: {
                    const auto pick = select_positive_cyclic(cursor, r, strategy.positive_epsilon);
                    j = pick.index;
                    cursor = pick.cursor;
                    if (pick.fallback) {
                        ++trace.fallback_count;
                        log->debug("iteration {}: no positive residual, max-residual fallback to {}", k, j);
                    }
                    break;
                }
            }
        } catch (const Error& e) {
            if (e.code() != Errc::ZeroResidual) throw;
            trace.reason = Termination::Converged;
            trace.final_residual_norm = rn;
            trace.final_distance = dist;
            break;
        }

        system.gradient(j, x, g);
        const double gn2 = g.squared_norm();
        if (!(std::sqrt(gn2) >= stop.gradient_floor)) {
            throw IterationError(Errc::GradientVanished, k, j,
                                 "gradient of component " + std::to_string(j) +
                                     " vanished at iteration " + std::to_string(k));
        }
        if (options.record) trace.records.push_back({k, j, r[j], rn, dist});

        const double coef = r[j] / gn2;
        for (std::size_t q = 0; q < g.nnz(); ++q) x[g.index[q]] -= coef * g.value[q];
        system.refresh_residuals(x, g.index, r);
    }
    trace.iterations = k;
    trace.final_point = std::move(x);
    return trace;
}

}  // namespace nlkacz
