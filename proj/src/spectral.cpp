#include "nlkacz/spectral.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "nlkacz/log.hpp"

namespace nlkacz {

SpectralModel::SpectralModel(Matrix spectra, Matrix basis, Vector energies)
    : s_(std::move(spectra)), b_(std::move(basis)), energies_(std::move(energies)) {
    const Index m = s_.cols();
    if (s_.rows() < 1 || b_.rows() < 1 || m < 1)
        throw Error(Errc::DimensionMismatch, "model needs P, D, M >= 1");
    if (b_.cols() != m || energies_.size() != m)
        throw Error(Errc::DimensionMismatch, "S, B and the energy grid must share M bins");
    if (!s_.allFinite() || !b_.allFinite() || !energies_.allFinite())
        throw Error(Errc::NonFinite, "model tables contain non-finite entries");
    if ((s_.array() < 0.0).any()) throw Error(Errc::PositivityError, "spectrum weights must be >= 0");
    if ((b_.array() <= 0.0).any()) throw Error(Errc::PositivityError, "basis coefficients must be > 0");
    for (Index p = 0; p < s_.rows(); ++p) {
        const double sum = s_.row(p).sum();
        if (std::abs(sum - 1.0) > 1e-12)
            throw Error(Errc::InvalidArgument, "spectrum " + std::to_string(p) + " does not sum to 1");
    }
    support_.resize(s_.rows());
    log_s_.resize(s_.rows());
    for (Index p = 0; p < s_.rows(); ++p) {
        for (Index k = 0; k < m; ++k) {
            if (s_(p, k) > 0.0) {
                support_[p].push_back(k);
                log_s_[p].push_back(std::log(s_(p, k)));
            }
        }
    }
    // Rows sum to 1 only up to rounding; pin H_p(0) to exactly zero.
    h0_.assign(static_cast<std::size_t>(s_.rows()), 0.0);
    const Vector zero = Vector::Zero(b_.rows());
    for (Index p = 0; p < s_.rows(); ++p) h0_[p] = value_and_bw(p, zero, nullptr);
}

void SpectralModel::check_spectrum(Index p) const {
    if (p < 0 || p >= s_.rows()) throw Error(Errc::IndexOutOfRange, "spectrum index out of range");
}

void SpectralModel::check_point(const Vector& z) const {
    if (z.size() != b_.rows()) throw Error(Errc::DimensionMismatch, "z must have D entries");
    if (!z.allFinite()) throw Error(Errc::NonFinite, "z contains NaN or infinity");
}

double SpectralModel::shifted_exponents(Index p, const Vector& z, std::vector<double>& e) const {
    const auto& sup = support_[p];
    const auto& ls = log_s_[p];
    const Index d_count = b_.rows();
    e.resize(sup.size());
    double amax = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < sup.size(); ++k) {
        const double* bm = b_.data() + sup[k] * d_count;
        double a = ls[k];
        for (Index d = 0; d < d_count; ++d) a -= bm[d] * z[d];
        e[k] = a;
        amax = std::max(amax, a);
    }
    return amax;
}

double SpectralModel::value_and_bw(Index p, const Vector& z, Vector* bw) const {
    thread_local std::vector<double> e;
    const double amax = shifted_exponents(p, z, e);
    double sum = 0.0;
    for (double& v : e) {
        v = std::exp(v - amax);
        sum += v;
    }
    if (bw != nullptr) {
        const Index d_count = b_.rows();
        bw->setZero(d_count);
        const auto& sup = support_[p];
        for (std::size_t k = 0; k < sup.size(); ++k) {
            const double wk = e[k] / sum;
            const double* bm = b_.data() + sup[k] * d_count;
            for (Index d = 0; d < d_count; ++d) (*bw)[d] += bm[d] * wk;
        }
    }
    return amax + std::log(sum) - h0_[p];
}

Vector SpectralModel::weights(Index p, const Vector& z) const {
    check_spectrum(p);
    check_point(z);
    std::vector<double> e;
    const double amax = shifted_exponents(p, z, e);
    double sum = 0.0;
    for (double& v : e) {
        v = std::exp(v - amax);
        sum += v;
    }
    Vector w = Vector::Zero(bins());
    const auto& sup = support_[p];
    for (std::size_t k = 0; k < sup.size(); ++k) w[sup[k]] = e[k] / sum;
    return w;
}

double SpectralModel::value(Index p, const Vector& z) const {
    check_spectrum(p);
    check_point(z);
    return value_and_bw(p, z, nullptr);
}

Vector SpectralModel::gradient(Index p, const Vector& z) const {
    check_spectrum(p);
    check_point(z);
    Vector bw;
    value_and_bw(p, z, &bw);
    return -bw;
}

Matrix SpectralModel::hessian(Index p, const Vector& z) const {
    const Vector w = weights(p, z);
    const Vector bw = b_ * w;
    return b_ * w.asDiagonal() * b_.transpose() - bw * bw.transpose();
}

Vector SpectralModel::project(const RayVector& ray, const Vector& f) const {
    const Index d_count = b_.rows();
    if (f.size() % d_count != 0) throw Error(Errc::DimensionMismatch, "f length must be a multiple of D");
    const Index pixels = f.size() / d_count;
    Vector z = Vector::Zero(d_count);
    for (std::size_t k = 0; k < ray.nnz(); ++k) {
        const Index i = ray.index[k];
        if (i < 0 || i >= pixels) throw Error(Errc::IndexOutOfRange, "ray pixel index out of range");
        for (Index d = 0; d < d_count; ++d) z[d] += ray.value[k] * f[d * pixels + i];
    }
    return z;
}

double SpectralModel::k_value(Index p, const RayVector& ray, const Vector& f) const {
    check_spectrum(p);
    const Vector z = project(ray, f);
    check_point(z);
    return value_and_bw(p, z, nullptr);
}

void SpectralModel::k_gradient(Index p, const RayVector& ray, const Vector& f, SparseVector& out) const {
    check_spectrum(p);
    const Vector z = project(ray, f);
    check_point(z);
    Vector bw;
    value_and_bw(p, z, &bw);
    const Index d_count = b_.rows();
    const Index pixels = f.size() / d_count;
    out.clear();
    for (Index d = 0; d < d_count; ++d) {
        for (std::size_t k = 0; k < ray.nnz(); ++k) out.push(d * pixels + ray.index[k], -bw[d] * ray.value[k]);
    }
}

SimplexMin simplex_min_norm_squared(const Matrix& basis, double gap_tolerance) {
    const Index m = basis.cols();
    if (m < 1) throw Error(Errc::DimensionMismatch, "basis has no columns");
    SimplexMin out;
    out.w = Vector::Zero(m);
    Index start = 0;
    basis.colwise().squaredNorm().minCoeff(&start);
    out.w[start] = 1.0;
    Vector bw = basis.col(start);
    constexpr Index max_iterations = 200000;
    for (Index it = 0; it < max_iterations; ++it) {
        const Vector grad = 2.0 * basis.transpose() * bw;
        Index fw = 0;
        grad.minCoeff(&fw);
        Index away = -1;
        double away_val = -std::numeric_limits<double>::infinity();
        for (Index k = 0; k < m; ++k) {
            if (out.w[k] > 0.0 && grad[k] > away_val) {
                away_val = grad[k];
                away = k;
            }
        }
        const double f = bw.squaredNorm();
        out.gap = grad.dot(out.w) - grad[fw];
        out.iterations = it;
        if (out.gap <= gap_tolerance * std::max(1.0, f) || fw == away) break;
        const Vector dir = basis.col(fw) - basis.col(away);
        const double dd = dir.squaredNorm();
        if (dd == 0.0) break;
        const double step = std::clamp(-bw.dot(dir) / dd, 0.0, out.w[away]);
        if (step == 0.0) break;
        out.w[fw] += step;
        out.w[away] -= step;
        if (out.w[away] < 1e-300) out.w[away] = 0.0;
        bw = basis * out.w;
    }
    out.value = bw.squaredNorm();
    return out;
}

double gamma_b_sampled(const Matrix& basis, Index pairs, std::uint64_t seed) {
    const Index m = basis.cols();
    std::mt19937_64 rng(seed);
    std::exponential_distribution<double> expo(1.0);
    auto draw = [&]() {
        Vector w(m);
        for (Index k = 0; k < m; ++k) w[k] = expo(rng);
        return Vector(w / w.sum());
    };
    double best = 0.0;
    for (Index k = 0; k < pairs; ++k) {
        const Vector b1 = basis * draw();
        const Vector b2 = basis * draw();
        best = std::max(best, (b1 - b2).norm() / b1.norm());
    }
    return best;
}

GammaBBound gamma_b_upper(const Matrix& basis, Index mc_samples, std::uint64_t seed) {
    if (basis.size() == 0) throw Error(Errc::DimensionMismatch, "empty basis");
    if ((basis.array() <= 0.0).any()) throw Error(Errc::NotPositive, "basis entries must be > 0");
    GammaBBound out;
    const Index m = basis.cols();
    for (Index a = 0; a < m; ++a)
        for (Index b = a + 1; b < m; ++b)
            out.numerator = std::max(out.numerator, (basis.col(a) - basis.col(b)).norm());
    const SimplexMin smin = simplex_min_norm_squared(basis);
    // f(w) - gap lower-bounds the true minimum of the convex objective.
    out.min_norm = std::sqrt(std::max(smin.value - smin.gap, 0.0));
    out.argmin = smin.w;
    out.upper = out.numerator / out.min_norm;
    out.sampled_lower = mc_samples > 0 ? gamma_b_sampled(basis, mc_samples, seed) : 0.0;
    return out;
}

double gamma_b_tilde(const Matrix& basis) {
    const Index d_count = basis.rows();
    const Index m = basis.cols();
    if (d_count < 1 || m < 2) throw Error(Errc::DominanceViolated, "need at least two columns");
    Index min_col = -1;
    Index max_col = -1;
    for (Index d = 0; d < d_count; ++d) {
        Index lo = 0;
        Index hi = 0;
        basis.row(d).minCoeff(&lo);
        basis.row(d).maxCoeff(&hi);
        for (Index k = 0; k < m; ++k) {
            if (k != lo && !(basis(d, k) > basis(d, lo)))
                throw Error(Errc::DominanceViolated, "row " + std::to_string(d) + " has no strict minimum");
            if (k != hi && !(basis(d, k) < basis(d, hi)))
                throw Error(Errc::DominanceViolated, "row " + std::to_string(d) + " has no strict maximum");
        }
        if (d == 0) {
            min_col = lo;
            max_col = hi;
        } else if (lo != min_col || hi != max_col) {
            throw Error(Errc::DominanceViolated, "rows disagree on the extreme columns");
        }
    }
    const Vector lo = basis.col(min_col);
    const Vector hi = basis.col(max_col);
    return std::sqrt((lo - hi).squaredNorm() / lo.squaredNorm());
}

Vector energy_grid(double emin_kev, double emax_kev, Index bins) {
    if (bins < 1) throw Error(Errc::InvalidArgument, "need at least one bin");
    if (!(emax_kev >= emin_kev) || !(emin_kev > 0.0)) throw Error(Errc::InvalidArgument, "bad energy range");
    if (bins == 1) return Vector::Constant(1, emin_kev);
    return Vector::LinSpaced(bins, emin_kev, emax_kev);
}

Vector synth_attenuation(const AttenuationCurve& curve, const Vector& energies) {
    Vector mu(energies.size());
    for (Index k = 0; k < energies.size(); ++k)
        mu[k] = curve.baseline + curve.amplitude * std::exp(-(energies[k] - curve.reference_kev) / curve.decay_kev);
    return mu;
}

Vector synth_spectrum(double peak_kvp, const Vector& energies, std::span<const Filtration> filters) {
    const Index m = energies.size();
    if (m < 1) throw Error(Errc::InvalidArgument, "empty energy grid");
    if (!(peak_kvp > 0.0)) throw Error(Errc::InvalidArgument, "peak must be positive");
    Vector s(m);
    for (Index k = 0; k < m; ++k) s[k] = std::max(peak_kvp / energies[k] - 1.0, 0.0);
    for (const auto& f : filters) {
        if (f.mu.size() != m) throw Error(Errc::DimensionMismatch, "filter attenuation must match the grid");
        s.array() *= (-f.mu.array() * f.thickness_cm).exp();
    }
    const double sum = s.sum();
    if (!(sum > 0.0)) throw Error(Errc::EmptySupport, "no energy bin below the peak voltage");
    return s / sum;
}

namespace {

std::string trim(std::string s) {
    const auto not_space = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    return s;
}

double parse_double(const std::string& text, const std::filesystem::path& path, std::size_t line) {
    const std::string t = trim(text);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size() || t.empty()) {
        throw Error(Errc::SchemaError,
                    path.string() + ":" + std::to_string(line) + ": cannot parse '" + t + "'");
    }
    return v;
}

}  // namespace

EnergyTable read_energy_csv(const std::filesystem::path& path, const std::string& column) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || trim(line) != "energy_kev," + column)
        throw Error(Errc::SchemaError, path.string() + ": expected header 'energy_kev," + column + "'");
    std::vector<double> e;
    std::vector<double> v;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos || line.find(',', comma + 1) != std::string::npos)
            throw Error(Errc::SchemaError, path.string() + ":" + std::to_string(lineno) + ": expected two fields");
        e.push_back(parse_double(line.substr(0, comma), path, lineno));
        v.push_back(parse_double(line.substr(comma + 1), path, lineno));
    }
    if (e.empty()) throw Error(Errc::SchemaError, path.string() + ": no data rows");
    for (std::size_t k = 1; k < e.size(); ++k) {
        if (!(e[k] > e[k - 1])) throw Error(Errc::GridError, path.string() + ": energies not strictly increasing");
    }
    EnergyTable t;
    t.energies = Eigen::Map<Vector>(e.data(), static_cast<Index>(e.size()));
    t.values = Eigen::Map<Vector>(v.data(), static_cast<Index>(v.size()));
    return t;
}

void write_energy_csv(const std::filesystem::path& path, const std::string& column, const EnergyTable& table) {
    std::ofstream out(path);
    if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
    out << "energy_kev," << column << '\n';
    out.precision(17);
    for (Index k = 0; k < table.energies.size(); ++k) out << table.energies[k] << ',' << table.values[k] << '\n';
}

Vector interpolate(const EnergyTable& table, const Vector& grid, bool zero_outside) {
    const Index n = table.energies.size();
    Vector out(grid.size());
    for (Index k = 0; k < grid.size(); ++k) {
        const double e = grid[k];
        if (e < table.energies[0] || e > table.energies[n - 1]) {
            if (zero_outside) {
                out[k] = 0.0;
                continue;
            }
            throw Error(Errc::GridError, "energy " + std::to_string(e) + " keV outside tabulated range");
        }
        const auto* begin = table.energies.data();
        const auto* it = std::upper_bound(begin, begin + n, e);
        Index hi = static_cast<Index>(it - begin);
        if (hi >= n) {
            out[k] = table.values[n - 1];
            continue;
        }
        const Index lo = hi - 1;
        const double t = (e - table.energies[lo]) / (table.energies[hi] - table.energies[lo]);
        out[k] = (1.0 - t) * table.values[lo] + t * table.values[hi];
    }
    return out;
}

SpectralModel model_from_tables(std::span<const EnergyTable> spectra, std::span<const EnergyTable> materials,
                                const Vector& grid_in) {
    if (spectra.empty() || materials.empty()) throw Error(Errc::SchemaError, "need spectra and materials");
    const Vector grid = grid_in.size() > 0 ? grid_in : spectra.front().energies;
    for (Index k = 1; k < grid.size(); ++k)
        if (!(grid[k] > grid[k - 1])) throw Error(Errc::GridError, "model grid not strictly increasing");
    const auto p_count = static_cast<Index>(spectra.size());
    const auto d_count = static_cast<Index>(materials.size());
    Matrix s(p_count, grid.size());
    Matrix b(d_count, grid.size());
    for (Index p = 0; p < p_count; ++p) {
        if ((spectra[p].values.array() < 0.0).any())
            throw Error(Errc::PositivityError, "spectrum " + std::to_string(p) + " has negative weights");
        Vector row = interpolate(spectra[p], grid, true);
        const double sum = row.sum();
        if (!(sum > 0.0)) throw Error(Errc::EmptySupport, "spectrum " + std::to_string(p) + " is empty on the grid");
        if (std::abs(sum - 1.0) > 1e-9)
            logger()->warn("spectrum {} sums to {} on the model grid; renormalized", p, sum);
        s.row(p) = row / sum;
    }
    for (Index d = 0; d < d_count; ++d) {
        if ((materials[d].values.array() <= 0.0).any())
            throw Error(Errc::PositivityError, "material " + std::to_string(d) + " has attenuation <= 0");
        b.row(d) = interpolate(materials[d], grid, false);
    }
    return SpectralModel(std::move(s), std::move(b), grid);
}

SpectralModel load_tables(std::span<const std::filesystem::path> spectra,
                          std::span<const std::filesystem::path> materials, const Vector& grid) {
    std::vector<EnergyTable> st;
    std::vector<EnergyTable> mt;
    for (const auto& p : spectra) st.push_back(read_energy_csv(p, "weight"));
    for (const auto& p : materials) mt.push_back(read_energy_csv(p, "mu"));
    return model_from_tables(st, mt, grid);
}

}  // namespace nlkacz
