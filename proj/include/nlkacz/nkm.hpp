#pragma once

// Nonlinear Kaczmarz engine: component systems, the projection step,
// index-selection strategies and the iteration driver.

#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "nlkacz/error.hpp"

namespace nlkacz {

using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Gradient in coordinate form. Dense systems list every coordinate.
struct SparseVector {
    std::vector<Index> index;
    std::vector<double> value;

    void clear() {
        index.clear();
        value.clear();
    }
    void push(Index i, double v) {
        index.push_back(i);
        value.push_back(v);
    }
    std::size_t nnz() const { return index.size(); }
    double squared_norm() const;
    double dot(const Vector& x) const;
    Vector to_dense(Index n) const;
};

/// F(x) = 0 with scalar components F_j : R^N -> R, j = 0..J-1.
///
/// Evaluations must be deterministic and free of side effects so one system
/// can be shared by several engines.
class ComponentSystem {
public:
    virtual ~ComponentSystem() = default;

    virtual Index dimension() const = 0;
    virtual Index size() const = 0;

    virtual double value(Index j, const Vector& x) const = 0;
    virtual void gradient(Index j, const Vector& x, SparseVector& out) const = 0;

    /// All J residuals at x. Entry j must equal value(j, x) bit for bit.
    virtual void residuals(const Vector& x, Vector& out) const;

    /// Refresh `out` after x changed only in the `touched` coordinates.
    /// The result must be bit-identical to residuals(x, out); systems with
    /// sparse coupling override this to skip components that cannot change.
    virtual void refresh_residuals(const Vector& x, std::span<const Index> touched,
                                   Vector& out) const;

    /// Optional known solution, used for distance diagnostics only.
    const std::optional<Vector>& known_solution() const { return solution_; }
    void set_known_solution(Vector x) { solution_ = std::move(x); }

private:
    std::optional<Vector> solution_;
};

/// System built from a callback returning F_j(x) and, when `grad` is non-null,
/// writing the dense gradient into it.
class CallbackSystem final : public ComponentSystem {
public:
    using Callback = std::function<double(Index j, const Vector& x, Vector* grad)>;

    CallbackSystem(Index dimension, Index size, Callback fn);

    Index dimension() const override { return n_; }
    Index size() const override { return j_; }
    double value(Index j, const Vector& x) const override;
    void gradient(Index j, const Vector& x, SparseVector& out) const override;

private:
    Index n_;
    Index j_;
    Callback fn_;
};

/// Dense affine system F(x) = A x - b.
class AffineSystem final : public ComponentSystem {
public:
    AffineSystem(Matrix a, Vector b);

    Index dimension() const override { return a_.cols(); }
    Index size() const override { return a_.rows(); }
    double value(Index j, const Vector& x) const override;
    void gradient(Index j, const Vector& x, SparseVector& out) const override;

    const Matrix& matrix() const { return a_; }
    const Vector& rhs() const { return b_; }

private:
    Matrix a_;
    Vector b_;
};

enum class StrategyKind { Cyclic, MaxResidual, ThetaResidual, PositiveCyclic };

std::string_view to_string(StrategyKind kind);
StrategyKind strategy_from_string(std::string_view name);

struct SelectionStrategy {
    StrategyKind kind = StrategyKind::MaxResidual;
    /// ThetaResidual only; 0 selects 1/sqrt(J).
    double theta = 0.0;
    /// PositiveCyclic only: a component is eligible when its residual exceeds this.
    double positive_epsilon = 0.0;
};

struct StopRule {
    Index max_epochs = 100;
    double residual_tolerance = 0.0;
    double gradient_floor = 1e-14;
};

enum class Termination { Converged, MaxEpochs, Stopped };

std::string_view to_string(Termination t);

struct TraceRecord {
    Index iteration = 0;
    Index selected = 0;
    double residual = 0.0;       ///< F_{j_k}(x^k)
    double residual_norm = 0.0;  ///< ||F(x^k)||
    double distance = std::numeric_limits<double>::quiet_NaN();  ///< ||x^k - x*||
};

struct IterationTrace {
    std::vector<TraceRecord> records;
    Vector final_point;
    double final_residual_norm = 0.0;
    double final_distance = std::numeric_limits<double>::quiet_NaN();
    Index iterations = 0;
    Index component_count = 0;
    /// Steps where the positive-cyclic scan found no positive residual.
    Index fallback_count = 0;
    Termination reason = Termination::Converged;

    Index epochs_started() const;
};

/// Raised when a step fails mid-run; carries the iteration and component.
class IterationError : public Error {
public:
    IterationError(Errc code, Index iteration, Index component, const std::string& what)
        : Error(code, what), iteration_(iteration), component_(component) {}

    Index iteration() const noexcept { return iteration_; }
    Index component() const noexcept { return component_; }

private:
    Index iteration_;
    Index component_;
};

/// One projection of x onto the linearization of F_j at x.
Vector nkm_step(const ComponentSystem& system, const Vector& x, Index j,
                double gradient_floor = 1e-14);

Index select_cyclic(Index k, Index count);
Index select_max_residual(const Vector& residuals);
Index select_theta_residual(const Vector& residuals, double theta);

struct PositiveCyclicPick {
    Index index = 0;
    Index cursor = 0;
    bool fallback = false;
};

/// Scan cyclically from cursor + 1 for a residual above epsilon; fall back to
/// the max-|residual| index when a full sweep finds none.
PositiveCyclicPick select_positive_cyclic(Index cursor, const Vector& residuals, double epsilon);

struct RunOptions {
    bool record = true;
    /// Called at every epoch boundary after the first with (epoch, ||F||,
    /// distance to the known solution or NaN). Returning true ends the run
    /// with Termination::Stopped.
    std::function<bool(Index, double, double)> on_epoch;
};

/// Iterate the projection step from x0 until the stop rule fires.
IterationTrace run(const ComponentSystem& system, const Vector& x0,
                   const SelectionStrategy& strategy, const StopRule& stop,
                   const RunOptions& options = {});

}  // namespace nlkacz
