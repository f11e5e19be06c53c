#include "nlkacz/projector.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>

#include "nlkacz/parallel.hpp"

namespace nlkacz {

PixelGrid PixelGrid::centered(Index width, Index height, double pixel_size) {
    PixelGrid g;
    g.width = width;
    g.height = height;
    g.h = pixel_size;
    g.x_min = -0.5 * static_cast<double>(width) * pixel_size;
    g.y_min = -0.5 * static_cast<double>(height) * pixel_size;
    g.validate();
    return g;
}

double PixelGrid::diagonal() const { return std::hypot(extent_x(), extent_y()); }

void PixelGrid::validate() const {
    if (width < 1 || height < 1) throw Error(Errc::InvalidArgument, "grid needs at least one pixel per axis");
    if (!(h > 0.0) || !std::isfinite(h)) throw Error(Errc::InvalidArgument, "pixel size must be positive");
    if (!std::isfinite(x_min) || !std::isfinite(y_min)) throw Error(Errc::NonFinite, "grid origin not finite");
}

ParallelGeometry build_parallel_geometry(Index n_views, double angle_offset, Index n_dets, double det_extent) {
    if (n_views < 1 || n_dets < 1) throw Error(Errc::InvalidArgument, "need at least one view and one detector");
    if (!(det_extent > 0.0) || !std::isfinite(angle_offset))
        throw Error(Errc::InvalidArgument, "detector extent must be positive");
    constexpr double two_pi = 2.0 * std::numbers::pi;
    ParallelGeometry g;
    g.angles.resize(n_views);
    for (Index k = 0; k < n_views; ++k) {
        double a = std::fmod(angle_offset + static_cast<double>(k) * std::numbers::pi / n_views, two_pi);
        if (a < 0.0) a += two_pi;
        if (a >= two_pi) a = 0.0;
        g.angles[k] = a;
    }
    g.offsets.resize(n_dets);
    if (n_dets == 1) {
        g.offsets[0] = 0.0;
    } else {
        const double step = det_extent / static_cast<double>(n_dets - 1);
        for (Index k = 0; k < n_dets; ++k) g.offsets[k] = -0.5 * det_extent + static_cast<double>(k) * step;
    }
    return g;
}

namespace {

// Parameter interval of the line inside [lo, hi) along one axis, or false if
// the line is parallel to the axis and outside the half-open slab.
bool slab(double p, double d, double lo, double hi, double& t0, double& t1) {
    if (d == 0.0) {
        if (p < lo || p >= hi) return false;
        return true;
    }
    double a = (lo - p) / d;
    double b = (hi - p) / d;
    if (a > b) std::swap(a, b);
    t0 = std::max(t0, a);
    t1 = std::min(t1, b);
    return true;
}

}  // namespace

RayVector trace_ray(const PixelGrid& grid, double angle, double offset) {
    grid.validate();
    RayVector out;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double px = offset * c;
    const double py = offset * s;
    const double dx = -s;
    const double dy = c;
    const double x_max = grid.x_min + grid.extent_x();
    const double y_max = grid.y_min + grid.extent_y();

    double t0 = -std::numeric_limits<double>::infinity();
    double t1 = std::numeric_limits<double>::infinity();
    if (!slab(px, dx, grid.x_min, x_max, t0, t1) || !slab(py, dy, grid.y_min, y_max, t0, t1)) return out;
    if (!(t1 > t0)) return out;

    // Parameters of every grid-line crossing strictly inside (t0, t1).
    std::vector<double> ts;
    ts.reserve(static_cast<std::size_t>(grid.width + grid.height + 2));
    ts.push_back(t0);
    if (dx != 0.0) {
        for (Index k = 0; k <= grid.width; ++k) {
            const double t = (grid.x_min + static_cast<double>(k) * grid.h - px) / dx;
            if (t > t0 && t < t1) ts.push_back(t);
        }
    }
    if (dy != 0.0) {
        for (Index k = 0; k <= grid.height; ++k) {
            const double t = (grid.y_min + static_cast<double>(k) * grid.h - py) / dy;
            if (t > t0 && t < t1) ts.push_back(t);
        }
    }
    ts.push_back(t1);
    std::sort(ts.begin(), ts.end());

    std::vector<std::pair<Index, double>> cells;
    cells.reserve(ts.size());
    for (std::size_t k = 0; k + 1 < ts.size(); ++k) {
        const double len = ts[k + 1] - ts[k];
        if (!(len > 0.0)) continue;
        const double tm = 0.5 * (ts[k] + ts[k + 1]);
        const double x = px + tm * dx;
        const double y = py + tm * dy;
        const Index col = std::clamp<Index>(static_cast<Index>(std::floor((x - grid.x_min) / grid.h)), 0, grid.width - 1);
        const Index row = std::clamp<Index>(static_cast<Index>(std::floor((y - grid.y_min) / grid.h)), 0, grid.height - 1);
        cells.emplace_back(row * grid.width + col, len);
    }
    std::sort(cells.begin(), cells.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [idx, len] : cells) {
        if (!out.index.empty() && out.index.back() == idx) {
            out.value.back() += len;
        } else {
            out.push(idx, len);
        }
    }
    return out;
}

SparseProjection::SparseProjection(Index rows, Index cols, std::vector<std::uint64_t> row_ptr,
                                   std::vector<std::uint64_t> col_idx, std::vector<double> values)
    : rows_(rows), cols_(cols), row_ptr_(std::move(row_ptr)), col_idx_(std::move(col_idx)),
      values_(std::move(values)) {
    if (rows_ < 0 || cols_ < 0 || row_ptr_.size() != static_cast<std::size_t>(rows_) + 1 || row_ptr_.front() != 0 ||
        row_ptr_.back() != col_idx_.size() || col_idx_.size() != values_.size())
        throw Error(Errc::DimensionMismatch, "inconsistent CSR arrays");
    for (std::size_t k = 0; k + 1 < row_ptr_.size(); ++k)
        if (row_ptr_[k] > row_ptr_[k + 1]) throw Error(Errc::DimensionMismatch, "row offsets decrease");
    for (auto c : col_idx_)
        if (c >= static_cast<std::uint64_t>(cols_)) throw Error(Errc::IndexOutOfRange, "column index out of range");
}

RayVector SparseProjection::row(Index j) const {
    if (j < 0 || j >= rows_) throw Error(Errc::IndexOutOfRange, "ray index out of range");
    RayVector r;
    for (auto k = row_ptr_[j]; k < row_ptr_[j + 1]; ++k) r.push(static_cast<Index>(col_idx_[k]), values_[k]);
    return r;
}

Index SparseProjection::row_nnz(Index j) const { return static_cast<Index>(row_ptr_[j + 1] - row_ptr_[j]); }

double SparseProjection::row_dot(Index j, const double* x) const {
    double s = 0.0;
    for (auto k = row_ptr_[j]; k < row_ptr_[j + 1]; ++k) s += values_[k] * x[col_idx_[k]];
    return s;
}

Vector SparseProjection::forward(const Vector& f) const {
    if (f.size() != cols_) throw Error(Errc::DimensionMismatch, "image length differs from projection columns");
    Vector g(rows_);
    for (Index j = 0; j < rows_; ++j) g[j] = row_dot(j, f.data());
    return g;
}

Vector SparseProjection::adjoint(const Vector& g) const {
    if (g.size() != rows_) throw Error(Errc::DimensionMismatch, "sinogram length differs from projection rows");
    Vector f = Vector::Zero(cols_);
    for (Index j = 0; j < rows_; ++j)
        for (auto k = row_ptr_[j]; k < row_ptr_[j + 1]; ++k) f[static_cast<Index>(col_idx_[k])] += values_[k] * g[j];
    return f;
}

SparseProjection SparseProjection::transposed() const {
    std::vector<std::uint64_t> ptr(static_cast<std::size_t>(cols_) + 1, 0);
    for (auto c : col_idx_) ++ptr[c + 1];
    for (std::size_t k = 1; k < ptr.size(); ++k) ptr[k] += ptr[k - 1];
    std::vector<std::uint64_t> idx(col_idx_.size());
    std::vector<double> val(values_.size());
    std::vector<std::uint64_t> fill(ptr.begin(), ptr.end() - 1);
    for (Index j = 0; j < rows_; ++j) {
        for (auto k = row_ptr_[j]; k < row_ptr_[j + 1]; ++k) {
            const auto pos = fill[col_idx_[k]]++;
            idx[pos] = static_cast<std::uint64_t>(j);
            val[pos] = values_[k];
        }
    }
    return SparseProjection(cols_, rows_, std::move(ptr), std::move(idx), std::move(val));
}

SparseProjection build_projection(const PixelGrid& grid, const ParallelGeometry& geometry, Index threads) {
    grid.validate();
    for (std::size_t k = 1; k < geometry.offsets.size(); ++k)
        if (!(geometry.offsets[k] > geometry.offsets[k - 1]))
            throw Error(Errc::InvalidArgument, "detector offsets must be strictly increasing");
    const Index n_rays = geometry.rays();
    const std::size_t n_dets = geometry.offsets.size();
    std::vector<RayVector> rows(static_cast<std::size_t>(n_rays));
    parallel_for(rows.size(), static_cast<std::size_t>(std::max<Index>(threads, 1)), [&](std::size_t j) {
        rows[j] = trace_ray(grid, geometry.angles[j / n_dets], geometry.offsets[j % n_dets]);
    });
    std::vector<std::uint64_t> ptr{0};
    std::vector<std::uint64_t> idx;
    std::vector<double> val;
    for (const auto& r : rows) {
        for (std::size_t k = 0; k < r.nnz(); ++k) {
            idx.push_back(static_cast<std::uint64_t>(r.index[k]));
            val.push_back(r.value[k]);
        }
        ptr.push_back(idx.size());
    }
    return SparseProjection(n_rays, grid.pixels(), std::move(ptr), std::move(idx), std::move(val));
}

namespace {

constexpr std::array<char, 5> kMagic{'S', 'P', 'R', 'J', '1'};

void put_u64(std::ostream& out, std::uint64_t v) {
    std::array<char, 8> b{};
    for (int k = 0; k < 8; ++k) b[k] = static_cast<char>((v >> (8 * k)) & 0xffu);
    out.write(b.data(), 8);
}

std::uint64_t get_u64(std::istream& in) {
    std::array<unsigned char, 8> b{};
    if (!in.read(reinterpret_cast<char*>(b.data()), 8)) throw Error(Errc::IoError, "projection file truncated");
    std::uint64_t v = 0;
    for (int k = 7; k >= 0; --k) v = (v << 8) | b[k];
    return v;
}

}  // namespace

void write_projection(const std::filesystem::path& path, const SparseProjection& proj) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
    out.write(kMagic.data(), kMagic.size());
    put_u64(out, static_cast<std::uint64_t>(proj.rows()));
    put_u64(out, static_cast<std::uint64_t>(proj.cols()));
    put_u64(out, proj.nnz());
    for (auto v : proj.row_ptr()) put_u64(out, v);
    for (auto v : proj.col_idx()) put_u64(out, v);
    for (double v : proj.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
    if (!out) throw Error(Errc::IoError, "write failed for " + path.string());
}

SparseProjection read_projection(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
    std::array<char, 5> magic{};
    if (!in.read(magic.data(), magic.size()) || magic != kMagic)
        throw Error(Errc::SchemaError, path.string() + ": not an SPRJ1 file");
    const auto rows = get_u64(in);
    const auto cols = get_u64(in);
    const auto nnz = get_u64(in);
    constexpr std::uint64_t limit = std::uint64_t{1} << 40;
    if (rows > limit || cols > limit || nnz > limit) throw Error(Errc::SchemaError, "implausible header sizes");
    std::vector<std::uint64_t> ptr(rows + 1);
    for (auto& v : ptr) v = get_u64(in);
    std::vector<std::uint64_t> idx(nnz);
    for (auto& v : idx) v = get_u64(in);
    std::vector<double> val(nnz);
    for (auto& v : val) v = std::bit_cast<double>(get_u64(in));
    return SparseProjection(static_cast<Index>(rows), static_cast<Index>(cols), std::move(ptr), std::move(idx),
                            std::move(val));
}

}  // namespace nlkacz
