#pragma once

// Parallel-beam discrete X-ray transform. Rays are traced through a square
// pixel grid with Siddon's incremental method; the result is a CSR matrix of
// intersection lengths (cm).

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "nlkacz/nkm.hpp"
#include "nlkacz/spectral.hpp"

namespace nlkacz {

/// Pixel (r, c) covers [x_min + c h, x_min + (c+1) h) x [y_min + r h, y_min + (r+1) h)
/// and has index r * width + c.
struct PixelGrid {
    Index width = 0;
    Index height = 0;
    double h = 1.0;
    double x_min = 0.0;
    double y_min = 0.0;

    /// Grid of the given size centered on the origin.
    static PixelGrid centered(Index width, Index height, double pixel_size);

    Index pixels() const { return width * height; }
    double extent_x() const { return static_cast<double>(width) * h; }
    double extent_y() const { return static_cast<double>(height) * h; }
    double diagonal() const;
    void validate() const;
};

/// Rays are ordered view-major: ray = view * offsets.size() + detector.
struct ParallelGeometry {
    std::vector<double> angles;   ///< radians in [0, 2 pi)
    std::vector<double> offsets;  ///< signed detector positions, cm

    Index rays() const { return static_cast<Index>(angles.size() * offsets.size()); }
};

/// Views at angle_offset + k pi / n_views; detectors uniform on [-E/2, E/2].
ParallelGeometry build_parallel_geometry(Index n_views, double angle_offset, Index n_dets,
                                         double det_extent);

/// Lengths of the line u (cos t, sin t) + s (-sin t, cos t) inside each
/// crossed pixel, sorted by pixel index. Empty when the line misses the grid.
RayVector trace_ray(const PixelGrid& grid, double angle, double offset);

/// Row-compressed sparse matrix of intersection lengths.
class SparseProjection {
public:
    SparseProjection() = default;
    SparseProjection(Index rows, Index cols, std::vector<std::uint64_t> row_ptr,
                     std::vector<std::uint64_t> col_idx, std::vector<double> values);

    Index rows() const { return rows_; }
    Index cols() const { return cols_; }
    std::size_t nnz() const { return values_.size(); }

    const std::vector<std::uint64_t>& row_ptr() const { return row_ptr_; }
    const std::vector<std::uint64_t>& col_idx() const { return col_idx_; }
    const std::vector<double>& values() const { return values_; }

    RayVector row(Index j) const;
    Index row_nnz(Index j) const;
    double row_dot(Index j, const double* x) const;

    Vector forward(const Vector& f) const;
    Vector adjoint(const Vector& g) const;

    /// Column-compressed copy, i.e. the CSR form of the transpose.
    SparseProjection transposed() const;

    bool operator==(const SparseProjection& other) const = default;

private:
    Index rows_ = 0;
    Index cols_ = 0;
    std::vector<std::uint64_t> row_ptr_{0};
    std::vector<std::uint64_t> col_idx_;
    std::vector<double> values_;
};

SparseProjection build_projection(const PixelGrid& grid, const ParallelGeometry& geometry,
                                  Index threads = 1);

/// Little-endian `SPRJ1` container.
void write_projection(const std::filesystem::path& path, const SparseProjection& proj);
SparseProjection read_projection(const std::filesystem::path& path);

}  // namespace nlkacz
