#pragma once

// Experiment configuration. A TOML document and the JSON manifest written by
// `simulate` share one schema; both are parsed through the same JSON tree.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "nlkacz/phantom.hpp"
#include "nlkacz/projector.hpp"
#include "nlkacz/recon.hpp"
#include "nlkacz/spectral.hpp"

namespace nlkacz::cli {

struct GeometryConfig {
    Index views = 1;
    Index detectors = 1;
    double angle_offset_rad = 0.0;
    double detector_extent_cm = 1.0;

    bool operator==(const GeometryConfig&) const = default;
};

struct FilterLayer {
    std::string material;
    double thickness_cm = 0.0;
};

struct SpectrumConfig {
    double peak_kvp = 0.0;
    std::vector<FilterLayer> filters;
};

struct MaterialConfig {
    std::string name;
    AttenuationCurve curve;
};

struct ModelConfig {
    std::string source = "synthetic";  ///< "synthetic" or "tables"
    double energy_min_kev = 20.0;
    double energy_max_kev = 140.0;
    Index bins = 13;
    std::vector<SpectrumConfig> spectra;
    std::vector<MaterialConfig> materials;         ///< basis materials, in basis order
    std::vector<MaterialConfig> filter_materials;  ///< looked up by name from filters
    std::vector<std::filesystem::path> spectrum_files;
    std::vector<std::filesystem::path> material_files;
};

struct VerifyConfig {
    Index ray_samples = 100;
    Index mc_samples = 10000;
    Index gamma_samples = 200;
};

struct ExperimentConfig {
    std::string preset = "desk";
    std::uint64_t seed = 0;
    Index grid_width = 32;
    Index grid_height = 32;
    double pixel_cm = 0.09375;
    std::vector<GeometryConfig> geometry;
    std::filesystem::path phantom_file;  ///< empty when the ellipses came inline
    EllipseSpec phantom;
    int supersample = 4;
    ModelConfig model;
    SelectionStrategy strategy{StrategyKind::MaxResidual};
    double tau = 0.5;
    Index burn_in = 10;
    StopRule dd_ray_stop{2000, 1e-13, 1e-14};
    StopRule dd_image_stop{50, 1e-10, 1e-14};
    StopRule onestep_stop{200, 0.0, 1e-14};
    double onestep_target_re_f = 0.0;  ///< 0 runs the full epoch budget
    VerifyConfig verify;
    std::filesystem::path out_dir;  ///< not part of the manifest
};

/// Parse a `.toml` config or a `.json` manifest. Relative paths resolve
/// against the file's directory. Errors are ConfigError naming the key.
ExperimentConfig load_config(const std::filesystem::path& path);

/// Parse an already-loaded tree; `base` resolves relative paths.
ExperimentConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base);

/// Every numerics-affecting parameter, with absolute paths and the phantom
/// inline. Feeding it back to config_from_json reproduces the config.
nlohmann::json manifest_json(const ExperimentConfig& config);

/// Built experiment objects.
SpectralModel build_model(const ExperimentConfig& config);
PixelGrid build_grid(const ExperimentConfig& config);
std::vector<ParallelGeometry> build_geometries(const ExperimentConfig& config);

}  // namespace nlkacz::cli
