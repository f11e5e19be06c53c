#pragma once

// Ellipse phantoms rasterized into stacked basis images.

#include <filesystem>
#include <vector>

#include <json.hpp>

#include "nlkacz/projector.hpp"

namespace nlkacz {

struct Ellipse {
    Index basis = 0;
    double cx = 0.0;
    double cy = 0.0;
    double a = 1.0;  ///< semi-axis along the rotated x direction, cm
    double b = 1.0;
    double theta = 0.0;
    double value = 0.0;

    bool contains(double x, double y) const;
};

struct EllipseSpec {
    Index basis_count = 2;
    std::vector<Ellipse> ellipses;

    void validate() const;
};

/// D images of I pixels stacked as f = [f_0; ...; f_{D-1}].
struct BasisImages {
    Index width = 0;
    Index height = 0;
    Index basis_count = 0;
    Vector data;

    Index pixels() const { return width * height; }
    auto basis(Index d) { return data.segment(d * pixels(), pixels()); }
    auto basis(Index d) const { return data.segment(d * pixels(), pixels()); }
};

/// Sum of value x covered fraction of supersample^2 points per pixel, clamped
/// to [0, 1].
BasisImages rasterize(const EllipseSpec& spec, const PixelGrid& grid, int supersample = 4);

EllipseSpec ellipses_from_json(const nlohmann::json& j, Index basis_count);
nlohmann::json ellipses_to_json(const EllipseSpec& spec);
EllipseSpec read_ellipse_spec(const std::filesystem::path& path, Index basis_count);

/// Raw little-endian f64 image stack plus `<path>.json` sidecar.
void write_images(const std::filesystem::path& raw_path, const BasisImages& images);
BasisImages read_images(const std::filesystem::path& raw_path);

/// 8-bit binary PGM of one basis image, min-max scaled, top row first.
void write_pgm(const std::filesystem::path& path, const BasisImages& images, Index basis);

}  // namespace nlkacz
