#pragma once

// Polychromatic log-attenuation model
//
//   H_p(z) = ln sum_m s_pm exp(-sum_d b_dm z_d)
//
// and its ray composition K(f) = H_p(a^T f_1, ..., a^T f_D). All
// exponentials are evaluated in max-shifted form so large optical depths do
// not overflow.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nlkacz/nkm.hpp"

namespace nlkacz {

/// Sparse nonnegative intersection lengths of one ray over the pixels.
using RayVector = SparseVector;

class SpectralModel {
public:
    /// spectra: P x M normalized rows; basis: D x M, entrywise > 0;
    /// energies: M bin centers in keV.
    SpectralModel(Matrix spectra, Matrix basis, Vector energies);

    Index spectrum_count() const { return s_.rows(); }
    Index basis_count() const { return b_.rows(); }
    Index bins() const { return s_.cols(); }

    const Matrix& spectra() const { return s_; }
    const Matrix& basis() const { return b_; }
    const Vector& energies() const { return energies_; }

    /// Spectral weights w = s (.) zeta(z) / s^T zeta(z); a point of the simplex.
    Vector weights(Index p, const Vector& z) const;
    double value(Index p, const Vector& z) const;
    /// -B w
    Vector gradient(Index p, const Vector& z) const;
    /// B (diag(w) - w w^T) B^T
    Matrix hessian(Index p, const Vector& z) const;

    /// Basis line integrals z_d = a^T f_d for stacked images f = [f_1; ...; f_D].
    Vector project(const RayVector& ray, const Vector& f) const;
    double k_value(Index p, const RayVector& ray, const Vector& f) const;
    /// grad H_p(z) (x) a, with f-index d * I + i.
    void k_gradient(Index p, const RayVector& ray, const Vector& f, SparseVector& out) const;

    /// Value plus, when `bw` is non-null, B w written into it. Hot path for
    /// the solvers.
    double value_and_bw(Index p, const Vector& z, Vector* bw) const;

private:
    void check_spectrum(Index p) const;
    void check_point(const Vector& z) const;
    // Shifted exponents a_m = ln s_m - b_m^T z over the support of s_p.
    double shifted_exponents(Index p, const Vector& z, std::vector<double>& e) const;

    Matrix s_;
    Matrix b_;
    Vector energies_;
    std::vector<std::vector<Index>> support_;
    std::vector<std::vector<double>> log_s_;
    std::vector<double> h0_;
};

struct GammaBBound {
    double upper = 0.0;          ///< certified upper bound
    double sampled_lower = 0.0;  ///< Monte-Carlo lower bound
    double numerator = 0.0;      ///< max vertex distance ||B e_m1 - B e_m2||
    double min_norm = 0.0;       ///< certified lower bound on min over simplex of ||B w||
    Vector argmin;               ///< simplex point attaining the min norm
};

/// Upper bound on max over simplex pairs of ||B w1 - B w2|| / ||B w1||.
GammaBBound gamma_b_upper(const Matrix& basis, Index mc_samples = 10000, std::uint64_t seed = 0);

/// Monte-Carlo ratio over uniformly drawn simplex pairs.
double gamma_b_sampled(const Matrix& basis, Index pairs, std::uint64_t seed);

/// Closed-form constant for bases whose rows share a strict min column and a
/// strict max column.
double gamma_b_tilde(const Matrix& basis);

/// min over the unit simplex of ||B w||^2 by pairwise Frank-Wolfe.
struct SimplexMin {
    double value = 0.0;
    double gap = 0.0;
    Vector w;
    Index iterations = 0;
};
SimplexMin simplex_min_norm_squared(const Matrix& basis, double gap_tolerance = 1e-10);

/// M evenly spaced bin centers on [emin, emax].
Vector energy_grid(double emin_kev, double emax_kev, Index bins);

/// Exponential-decay attenuation curve mu(E) = baseline + amplitude exp(-(E - ref) / decay).
struct AttenuationCurve {
    double baseline = 0.0;
    double amplitude = 0.0;
    double reference_kev = 20.0;
    double decay_kev = 10.0;
};
Vector synth_attenuation(const AttenuationCurve& curve, const Vector& energies);

struct Filtration {
    Vector mu;  ///< attenuation on the spectrum grid, cm^-1
    double thickness_cm = 0.0;
};

/// Kramers-shaped spectrum max(peak/E - 1, 0), filtered and normalized to sum 1.
Vector synth_spectrum(double peak_kvp, const Vector& energies, std::span<const Filtration> filters = {});

/// Tabulated function of energy as read from or written to CSV.
struct EnergyTable {
    Vector energies;
    Vector values;
};

/// `energy_kev,<column>` CSV; energies strictly increasing.
EnergyTable read_energy_csv(const std::filesystem::path& path, const std::string& column);
void write_energy_csv(const std::filesystem::path& path, const std::string& column, const EnergyTable& table);

/// Linear interpolation onto `grid`. Outside the table: zero when
/// zero_outside, otherwise GridError.
Vector interpolate(const EnergyTable& table, const Vector& grid, bool zero_outside);

/// Build a validated model from spectrum CSVs (`energy_kev,weight`) and basis
/// material CSVs (`energy_kev,mu`). The model grid is `grid` when nonempty,
/// else the first spectrum's energies. Rows off by more than 1e-9 from unit
/// sum are renormalized with a warning.
SpectralModel load_tables(std::span<const std::filesystem::path> spectra,
                          std::span<const std::filesystem::path> materials, const Vector& grid = {});

/// Same validation on in-memory tables.
SpectralModel model_from_tables(std::span<const EnergyTable> spectra,
                                std::span<const EnergyTable> materials, const Vector& grid);

}  // namespace nlkacz
