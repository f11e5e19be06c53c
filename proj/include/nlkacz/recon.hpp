#pragma once

// Multispectral CT pipelines: noiseless data simulation, the two-step
// per-ray decomposition followed by linear reconstruction, and the one-step
// reconstruction over every ray of every spectrum.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nlkacz/conditions.hpp"
#include "nlkacz/nkm.hpp"
#include "nlkacz/phantom.hpp"
#include "nlkacz/projector.hpp"
#include "nlkacz/spectral.hpp"

namespace nlkacz {

/// Log-data g^{[p]}, one sinogram per spectrum.
struct MeasuredData {
    std::vector<Vector> sinograms;
};

/// g_j = H_p(a_j^T f_1, ..., a_j^T f_D) for every ray of every spectrum.
MeasuredData simulate_data(const SpectralModel& model, std::span<const SparseProjection> projections,
                           const BasisImages& truth, Index threads = 1);

/// H(z) = g for a single ray: P equations in D unknowns.
class RaySystem final : public ComponentSystem {
public:
    RaySystem(const SpectralModel& model, Vector g);

    Index dimension() const override { return model_.basis_count(); }
    Index size() const override { return model_.spectrum_count(); }
    double value(Index j, const Vector& z) const override;
    void gradient(Index j, const Vector& z, SparseVector& out) const override;

private:
    const SpectralModel& model_;
    Vector g_;
};

struct RaySolve {
    Vector z;
    IterationTrace trace;
};

RaySolve solve_ray_dd(const SpectralModel& model, const Vector& g_ray, const Vector& z0,
                      const SelectionStrategy& strategy, const StopRule& stop,
                      const std::optional<Vector>& z_true = std::nullopt);

/// F(x) = A x - b over the rows of a sparse matrix. Residual refreshes only
/// revisit rows that share a column with the step.
class SparseAffineSystem final : public ComponentSystem {
public:
    SparseAffineSystem(const SparseProjection& a, Vector b, std::vector<Index> rows);

    Index dimension() const override { return a_.cols(); }
    Index size() const override { return static_cast<Index>(rows_.size()); }
    double value(Index j, const Vector& x) const override;
    void gradient(Index j, const Vector& x, SparseVector& out) const override;
    void refresh_residuals(const Vector& x, std::span<const Index> touched, Vector& out) const override;

private:
    const SparseProjection& a_;
    SparseProjection at_;
    Vector b_;
    std::vector<Index> rows_;
    std::vector<Index> slot_;  // matrix row -> equation, -1 when unused
};

/// K(f) - g over every nonempty ray of every spectrum. Equation order is
/// spectrum-major, ray order within a spectrum.
class OneStepSystem final : public ComponentSystem {
public:
    OneStepSystem(const SpectralModel& model, std::span<const SparseProjection> projections,
                  const MeasuredData& data);

    Index dimension() const override { return model_.basis_count() * pixels_; }
    Index size() const override { return static_cast<Index>(spectrum_.size()); }
    double value(Index j, const Vector& f) const override;
    void gradient(Index j, const Vector& f, SparseVector& out) const override;
    void refresh_residuals(const Vector& f, std::span<const Index> touched, Vector& out) const override;

    Index dropped_rays() const { return dropped_; }
    /// (spectrum, ray) of equation j.
    std::pair<Index, Index> origin(Index j) const { return {spectrum_[j], ray_[j]}; }
    /// sum over equations of g_j^2
    double data_norm() const { return data_norm_; }
    /// ||a_j||^2 for equation j.
    double ray_norm_squared(Index j) const;

private:
    void project(Index j, const Vector& f, Vector& z) const;

    const SpectralModel& model_;
    Index pixels_ = 0;
    Index dropped_ = 0;
    double data_norm_ = 0.0;
    std::vector<Index> spectrum_;
    std::vector<Index> ray_;
    std::vector<double> g_;
    std::vector<std::size_t> ptr_{0};
    std::vector<Index> pix_;
    std::vector<double> len_;
    std::vector<std::size_t> pix_ptr_;
    std::vector<Index> pix_eq_;
};

struct EpochMetric {
    Index epoch = 0;
    double re_f = 0.0;
    double re_g = 0.0;
};

struct RateFit {
    double contraction = 1.0;
    double r_squared = 0.0;
};

struct SolveReport {
    IterationTrace trace;
    /// Per-iteration relative error (RE_f for one-step, aggregate RE_z for
    /// the two-step pipeline); empty when no truth is known.
    std::vector<double> re_curve;
    std::vector<EpochMetric> epochs;
    std::optional<RateFit> rate;
    double wall_seconds = 0.0;
};

struct DddOptions {
    SelectionStrategy ray_strategy{StrategyKind::MaxResidual};
    StopRule ray_stop{2000, 1e-13, 1e-14};
    StopRule image_stop{50, 1e-10, 1e-14};
    Index threads = 1;
    Index burn_in = 10;
    /// The RE_z rate fit stops at the first iteration reaching this value.
    double fit_target = 1e-8;
};

struct RayOutcome {
    Index iterations = 0;
    double relative_error = 0.0;  ///< ||z - z*|| / ||z*||, 0 when z* = 0
    Termination reason = Termination::Converged;
};

struct DddResult {
    Matrix basis_sinograms;  ///< rays x D
    BasisImages images;
    SolveReport report;
    std::vector<RayOutcome> rays;
    Index dropped_rays = 0;
    std::vector<IterationTrace> ray_traces;    ///< one per ray; empty rays hold no records
    std::vector<IterationTrace> image_traces;  ///< one per basis, records omitted
};

/// Two-step pipeline on a single shared projection. Ray solves run in
/// parallel; the linear step uses the cyclic engine per basis image.
DddResult ddd_pipeline(const SpectralModel& model, const SparseProjection& projection, const MeasuredData& data,
                       const PixelGrid& grid, const DddOptions& options,
                       const std::optional<BasisImages>& truth = std::nullopt);

struct OneStepOptions {
    SelectionStrategy strategy{StrategyKind::MaxResidual};
    StopRule stop{200, 0.0, 1e-14};
    Index burn_in = 10;
    bool record = true;
    /// When positive and the truth is known, stop at the first epoch whose
    /// RE_f is at or below this value.
    double target_re_f = 0.0;
};

struct OneStepResult {
    BasisImages images;
    SolveReport report;
    Index dropped_rays = 0;
};

OneStepResult solve_onestep(const SpectralModel& model, std::span<const SparseProjection> projections,
                            const MeasuredData& data, const BasisImages& f0, const OneStepOptions& options,
                            const std::optional<BasisImages>& truth = std::nullopt);

struct MsctCheckOptions {
    double tau = 0.5;
    Index mc_samples = 10000;
    Index gamma_samples = 200;
    std::uint64_t seed = 0;
    /// Dense K'(f*) for the one-step rank check; unset when too large to form.
    std::optional<Matrix> onestep_jacobian;
    std::string onestep_note;
    Index kappa_cap = 2000;
};

/// Runtime checks of the hypotheses behind both pipelines, evaluated at
/// sampled exact line integrals z* of rays with lengths ||a||.
ConditionReport check_msct(const SpectralModel& model, std::span<const Vector> z_star,
                           std::span<const double> ray_norms, const MsctCheckOptions& options);

/// Jacobian of H at z: row p is grad H_p(z)^T.
Matrix h_jacobian(const SpectralModel& model, const Vector& z);

/// ||current - truth|| / ||truth||
double metrics_re(const Vector& current, const Vector& truth);

/// Least squares of log(curve[k]) against k for k >= burn_in. Returns the
/// per-iteration factor exp(slope) and the coefficient of determination.
RateFit rate_fit(std::span<const double> curve, Index burn_in);

/// `iteration,selected_index,residual,res_norm,re_metric`
void write_trace_csv(const std::filesystem::path& path, const SolveReport& report);
/// `epoch,re_f,re_g`
void write_epoch_csv(const std::filesystem::path& path, const SolveReport& report);

/// Shortest round-trip decimal form, used by every CSV writer.
std::string format_double(double v);

}  // namespace nlkacz
