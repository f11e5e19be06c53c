#include "nlkacz/cli/config.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <toml.hpp>

#include "nlkacz/log.hpp"

namespace nlkacz::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& key, const std::string& what) {
    throw Error(Errc::ConfigError, "'" + key + "': " + what);
}

json toml_to_json(const toml::node& node) {
    if (const auto* t = node.as_table()) {
        json out = json::object();
        for (const auto& [k, v] : *t) out[std::string(k.str())] = toml_to_json(v);
        return out;
    }
    if (const auto* a = node.as_array()) {
        json out = json::array();
        for (const auto& v : *a) out.push_back(toml_to_json(v));
        return out;
    }
    if (const auto* v = node.as_string()) return v->get();
    if (const auto* v = node.as_integer()) return v->get();
    if (const auto* v = node.as_floating_point()) return v->get();
    if (const auto* v = node.as_boolean()) return v->get();
    throw Error(Errc::ConfigError, "dates and times are not supported in configs");
}

// Typed access to one JSON object, with dotted key names in errors and a
// check for keys nobody asked about.
class Table {
public:
    Table(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) fail(path_.empty() ? "<root>" : path_, "expected a table");
    }

    std::string key(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }
    bool has(const std::string& k) const {
        seen_.insert(k);
        return j_.contains(k);
    }
    const json& raw(const std::string& k) const {
        seen_.insert(k);
        if (!j_.contains(k)) fail(key(k), "missing required key");
        return j_.at(k);
    }
    Table table(const std::string& k) const { return Table(raw(k), key(k)); }

    double number(const std::string& k) const {
        const auto& v = raw(k);
        if (!v.is_number()) fail(key(k), "expected a number");
        const double d = v.get<double>();
        if (!std::isfinite(d)) fail(key(k), "must be finite");
        return d;
    }
    double number(const std::string& k, double def) const { return has(k) ? number(k) : def; }

    Index integer(const std::string& k) const {
        const auto& v = raw(k);
        if (!v.is_number_integer()) fail(key(k), "expected an integer");
        return v.get<Index>();
    }
    Index integer(const std::string& k, Index def) const { return has(k) ? integer(k) : def; }

    std::uint64_t u64(const std::string& k, std::uint64_t def) const {
        if (!has(k)) return def;
        const auto& v = raw(k);
        if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0))
            fail(key(k), "expected a non-negative integer");
        return v.get<std::uint64_t>();
    }

    std::string string(const std::string& k) const {
        const auto& v = raw(k);
        if (!v.is_string()) fail(key(k), "expected a string");
        return v.get<std::string>();
    }
    std::string string(const std::string& k, const std::string& def) const { return has(k) ? string(k) : def; }

    const json& array(const std::string& k) const {
        const auto& v = raw(k);
        if (!v.is_array()) fail(key(k), "expected an array");
        return v;
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) fail(key(k), "unknown key");
    }

private:
    const json& j_;
    std::string path_;
    mutable std::set<std::string> seen_;
};

fs::path resolve(const fs::path& base, const std::string& p) {
    fs::path path(p);
    if (path.is_relative()) path = base / path;
    return fs::absolute(path).lexically_normal();
}

fs::path existing(const fs::path& base, const std::string& p, const std::string& key) {
    const fs::path path = resolve(base, p);
    if (!fs::exists(path)) fail(key, "file not found: " + path.string());
    return path;
}

MaterialConfig read_material(const Table& t) {
    MaterialConfig m;
    m.name = t.string("name");
    m.curve.baseline = t.number("baseline");
    m.curve.amplitude = t.number("amplitude");
    m.curve.reference_kev = t.number("reference_kev", 20.0);
    m.curve.decay_kev = t.number("decay_kev");
    if (!(m.curve.decay_kev > 0.0)) fail(t.key("decay_kev"), "must be > 0");
    t.finish();
    return m;
}

StopRule read_stop(const Table& t, const std::string& prefix, StopRule def, double floor) {
    StopRule s = def;
    s.max_epochs = t.integer(prefix + "max_epochs", def.max_epochs);
    s.residual_tolerance = t.number(prefix + "residual_tolerance", def.residual_tolerance);
    s.gradient_floor = floor;
    if (s.max_epochs < 1) fail(t.key(prefix + "max_epochs"), "must be positive");
    if (s.residual_tolerance < 0.0) fail(t.key(prefix + "residual_tolerance"), "must be >= 0");
    return s;
}

json material_json(const MaterialConfig& m) {
    return {{"name", m.name},
            {"baseline", m.curve.baseline},
            {"amplitude", m.curve.amplitude},
            {"reference_kev", m.curve.reference_kev},
            {"decay_kev", m.curve.decay_kev}};
}

}  // namespace

ExperimentConfig config_from_json(const json& j, const fs::path& base) {
    ExperimentConfig c;
    const Table root(j, "");
    c.preset = root.string("preset", "desk");
    if (c.preset != "desk" && c.preset != "paper") fail("preset", "must be 'desk' or 'paper'");
    c.seed = root.u64("seed", 0);

    const Table grid = root.table("grid");
    c.grid_width = grid.integer("width");
    c.grid_height = grid.integer("height");
    c.pixel_cm = grid.number("pixel_cm");
    if (c.grid_width < 1 || c.grid_height < 1) fail("grid", "width and height must be positive");
    if (!(c.pixel_cm > 0.0)) fail("grid.pixel_cm", "must be > 0");
    grid.finish();

    // Model first: the basis count sizes the phantom.
    const Table model = root.table("model");
    auto& m = c.model;
    m.source = model.string("source", "synthetic");
    if (m.source == "synthetic") {
        m.energy_min_kev = model.number("energy_min_kev");
        m.energy_max_kev = model.number("energy_max_kev");
        m.bins = model.integer("bins");
        if (m.bins < 1) fail("model.bins", "must be positive");
        if (!(m.energy_min_kev > 0.0) || !(m.energy_max_kev >= m.energy_min_kev))
            fail("model.energy_min_kev", "need 0 < energy_min_kev <= energy_max_kev");
        const auto& spectra = model.array("spectrum");
        for (std::size_t k = 0; k < spectra.size(); ++k) {
            const Table s(spectra[k], "model.spectrum[" + std::to_string(k) + "]");
            SpectrumConfig sc;
            sc.peak_kvp = s.number("peak_kvp");
            if (s.has("filters")) {
                const auto& filters = s.array("filters");
                for (std::size_t q = 0; q < filters.size(); ++q) {
                    const Table f(filters[q], s.key("filters[" + std::to_string(q) + "]"));
                    FilterLayer layer{f.string("material"), f.number("thickness_cm")};
                    if (layer.thickness_cm < 0.0) fail(f.key("thickness_cm"), "must be >= 0");
                    f.finish();
                    sc.filters.push_back(layer);
                }
            }
            s.finish();
            m.spectra.push_back(sc);
        }
        const auto& mats = model.array("material");
        for (std::size_t k = 0; k < mats.size(); ++k)
            m.materials.push_back(read_material(Table(mats[k], "model.material[" + std::to_string(k) + "]")));
        if (model.has("filter_material")) {
            const auto& fm = model.array("filter_material");
            for (std::size_t k = 0; k < fm.size(); ++k)
                m.filter_materials.push_back(
                    read_material(Table(fm[k], "model.filter_material[" + std::to_string(k) + "]")));
        }
        for (std::size_t k = 0; k < m.spectra.size(); ++k) {
            for (const auto& f : m.spectra[k].filters) {
                bool found = false;
                for (const auto& fm : m.filter_materials) found = found || fm.name == f.material;
                if (!found)
                    fail("model.spectrum[" + std::to_string(k) + "].filters",
                         "unknown filter material '" + f.material + "'");
            }
        }
    } else if (m.source == "tables") {
        const auto& sf = model.array("spectrum_files");
        for (std::size_t k = 0; k < sf.size(); ++k)
            m.spectrum_files.push_back(existing(base, sf[k].get<std::string>(), "model.spectrum_files"));
        const auto& mf = model.array("material_files");
        for (std::size_t k = 0; k < mf.size(); ++k)
            m.material_files.push_back(existing(base, mf[k].get<std::string>(), "model.material_files"));
        m.bins = model.integer("bins", 0);
        if (m.bins > 0) {
            m.energy_min_kev = model.number("energy_min_kev");
            m.energy_max_kev = model.number("energy_max_kev");
        }
    } else {
        fail("model.source", "must be 'synthetic' or 'tables'");
    }
    model.finish();
    const Index p_count = static_cast<Index>(m.source == "synthetic" ? m.spectra.size() : m.spectrum_files.size());
    const Index d_count = static_cast<Index>(m.source == "synthetic" ? m.materials.size() : m.material_files.size());
    if (p_count < 1) fail("model", "needs at least one spectrum");
    if (d_count < 1) fail("model", "needs at least one basis material");

    const auto& geo = root.array("geometry");
    for (std::size_t k = 0; k < geo.size(); ++k) {
        const Table g(geo[k], "geometry[" + std::to_string(k) + "]");
        GeometryConfig gc;
        gc.views = g.integer("views");
        gc.detectors = g.integer("detectors");
        gc.detector_extent_cm = g.number("detector_extent_cm");
        if (g.has("angle_offset_rad") && g.has("angle_offset_deg"))
            fail(g.key("angle_offset_rad"), "give the offset in degrees or radians, not both");
        if (g.has("angle_offset_rad")) gc.angle_offset_rad = g.number("angle_offset_rad");
        if (g.has("angle_offset_deg")) gc.angle_offset_rad = g.number("angle_offset_deg") * std::numbers::pi / 180.0;
        if (gc.views < 1 || gc.detectors < 1) fail(g.key("views"), "views and detectors must be positive");
        if (!(gc.detector_extent_cm > 0.0)) fail(g.key("detector_extent_cm"), "must be > 0");
        g.finish();
        c.geometry.push_back(gc);
    }
    if (c.geometry.size() == 1) c.geometry.resize(static_cast<std::size_t>(p_count), c.geometry.front());
    if (static_cast<Index>(c.geometry.size()) != p_count)
        fail("geometry", "give one entry, or one per spectrum (" + std::to_string(p_count) + ")");

    const Table ph = root.table("phantom");
    c.supersample = static_cast<int>(ph.integer("supersample", 4));
    if (ph.has("file") == ph.has("ellipses")) fail("phantom", "give exactly one of 'file' or 'ellipses'");
    try {
        if (ph.has("file")) {
            c.phantom_file = existing(base, ph.string("file"), "phantom.file");
            c.phantom = read_ellipse_spec(c.phantom_file, d_count);
        } else {
            c.phantom = ellipses_from_json(ph.array("ellipses"), d_count);
        }
    } catch (const Error& e) {
        if (e.code() == Errc::ConfigError) throw;
        fail("phantom", e.what());
    }
    if (c.supersample != 1 && c.supersample != 2 && c.supersample != 4 && c.supersample != 8)
        fail("phantom.supersample", "must be 1, 2, 4 or 8");
    ph.finish();

    if (root.has("solve")) {
        const Table s = root.table("solve");
        try {
            c.strategy.kind = strategy_from_string(s.string("strategy", "max_residual"));
        } catch (const Error& e) {
            fail("solve.strategy", e.what());
        }
        c.strategy.theta = s.number("theta", 0.0);
        c.strategy.positive_epsilon = s.number("positive_epsilon", 0.0);
        c.tau = s.number("tau", 0.5);
        c.burn_in = s.integer("burn_in", 10);
        const double floor = s.number("gradient_floor", 1e-14);
        if (!(floor > 0.0)) fail("solve.gradient_floor", "must be > 0");
        if (!(c.tau > 0.0 && c.tau < 1.0)) fail("solve.tau", "must lie in (0, 1)");
        if (c.strategy.theta < 0.0) fail("solve.theta", "must be >= 0 (0 selects 1/sqrt(J))");
        if (c.burn_in < 0) fail("solve.burn_in", "must be >= 0");
        c.dd_ray_stop.gradient_floor = c.dd_image_stop.gradient_floor = c.onestep_stop.gradient_floor = floor;
        if (s.has("dd")) {
            const Table dd = s.table("dd");
            c.dd_ray_stop = read_stop(dd, "", c.dd_ray_stop, floor);
            c.dd_image_stop = read_stop(dd, "image_", c.dd_image_stop, floor);
            dd.finish();
        }
        if (s.has("onestep")) {
            const Table os = s.table("onestep");
            c.onestep_stop = read_stop(os, "", c.onestep_stop, floor);
            c.onestep_target_re_f = os.number("target_re_f", 0.0);
            if (!(c.onestep_target_re_f >= 0.0)) fail("solve.onestep.target_re_f", "must be >= 0");
            os.finish();
        }
        s.finish();
    }
    if (root.has("verify")) {
        const Table v = root.table("verify");
        c.verify.ray_samples = v.integer("ray_samples", c.verify.ray_samples);
        c.verify.mc_samples = v.integer("mc_samples", c.verify.mc_samples);
        c.verify.gamma_samples = v.integer("gamma_samples", c.verify.gamma_samples);
        if (c.verify.ray_samples < 1 || c.verify.mc_samples < 0 || c.verify.gamma_samples < 2)
            fail("verify", "sample counts out of range");
        v.finish();
    }
    if (root.has("output")) {
        const Table o = root.table("output");
        c.out_dir = resolve(base, o.string("dir"));
        o.finish();
    }
    root.finish();

    if (c.preset == "paper")
        logger()->warn("paper-scale preset: a full run takes hours on a single workstation");
    return c;
}

ExperimentConfig load_config(const fs::path& path) {
    if (!fs::exists(path)) throw Error(Errc::ConfigError, "config file not found: " + path.string());
    const fs::path base = fs::absolute(path).parent_path();
    json tree;
    if (path.extension() == ".json") {
        std::ifstream in(path);
        try {
            in >> tree;
        } catch (const json::exception& e) {
            throw Error(Errc::ConfigError, path.string() + ": " + e.what());
        }
    } else {
        try {
            tree = toml_to_json(toml::parse_file(path.string()));
        } catch (const toml::parse_error& e) {
            std::ostringstream msg;
            msg << path.string() << ":" << e.source().begin.line << ": " << e.description();
            throw Error(Errc::ConfigError, msg.str());
        }
    }
    return config_from_json(tree, base);
}

json manifest_json(const ExperimentConfig& c) {
    json j;
    j["preset"] = c.preset;
    j["seed"] = c.seed;
    j["grid"] = {{"width", c.grid_width}, {"height", c.grid_height}, {"pixel_cm", c.pixel_cm}};
    j["geometry"] = json::array();
    for (const auto& g : c.geometry) {
        j["geometry"].push_back({{"views", g.views},
                                 {"detectors", g.detectors},
                                 {"angle_offset_rad", g.angle_offset_rad},
                                 {"detector_extent_cm", g.detector_extent_cm}});
    }
    j["phantom"] = {{"supersample", c.supersample}, {"ellipses", ellipses_to_json(c.phantom)}};
    json model;
    model["source"] = c.model.source;
    if (c.model.source == "synthetic") {
        model["energy_min_kev"] = c.model.energy_min_kev;
        model["energy_max_kev"] = c.model.energy_max_kev;
        model["bins"] = c.model.bins;
        model["spectrum"] = json::array();
        for (const auto& s : c.model.spectra) {
            json filters = json::array();
            for (const auto& f : s.filters) filters.push_back({{"material", f.material}, {"thickness_cm", f.thickness_cm}});
            model["spectrum"].push_back({{"peak_kvp", s.peak_kvp}, {"filters", filters}});
        }
        model["material"] = json::array();
        for (const auto& mat : c.model.materials) model["material"].push_back(material_json(mat));
        model["filter_material"] = json::array();
        for (const auto& mat : c.model.filter_materials) model["filter_material"].push_back(material_json(mat));
    } else {
        model["spectrum_files"] = json::array();
        for (const auto& p : c.model.spectrum_files) model["spectrum_files"].push_back(p.string());
        model["material_files"] = json::array();
        for (const auto& p : c.model.material_files) model["material_files"].push_back(p.string());
        if (c.model.bins > 0) {
            model["bins"] = c.model.bins;
            model["energy_min_kev"] = c.model.energy_min_kev;
            model["energy_max_kev"] = c.model.energy_max_kev;
        }
    }
    j["model"] = model;
    j["solve"] = {{"strategy", std::string(to_string(c.strategy.kind))},
                  {"theta", c.strategy.theta},
                  {"positive_epsilon", c.strategy.positive_epsilon},
                  {"tau", c.tau},
                  {"burn_in", c.burn_in},
                  {"gradient_floor", c.onestep_stop.gradient_floor},
                  {"dd",
                   {{"max_epochs", c.dd_ray_stop.max_epochs},
                    {"residual_tolerance", c.dd_ray_stop.residual_tolerance},
                    {"image_max_epochs", c.dd_image_stop.max_epochs},
                    {"image_residual_tolerance", c.dd_image_stop.residual_tolerance}}},
                  {"onestep",
                   {{"max_epochs", c.onestep_stop.max_epochs},
                    {"residual_tolerance", c.onestep_stop.residual_tolerance},
                    {"target_re_f", c.onestep_target_re_f}}}};
    j["verify"] = {{"ray_samples", c.verify.ray_samples},
                   {"mc_samples", c.verify.mc_samples},
                   {"gamma_samples", c.verify.gamma_samples}};
    return j;
}

SpectralModel build_model(const ExperimentConfig& c) {
    const auto& m = c.model;
    if (m.source == "tables") {
        const Vector grid = m.bins > 0 ? energy_grid(m.energy_min_kev, m.energy_max_kev, m.bins) : Vector();
        return load_tables(m.spectrum_files, m.material_files, grid);
    }
    const Vector energies = energy_grid(m.energy_min_kev, m.energy_max_kev, m.bins);
    Matrix s(static_cast<Index>(m.spectra.size()), m.bins);
    for (std::size_t p = 0; p < m.spectra.size(); ++p) {
        std::vector<Filtration> filters;
        for (const auto& layer : m.spectra[p].filters) {
            for (const auto& fm : m.filter_materials) {
                if (fm.name == layer.material) {
                    filters.push_back({synth_attenuation(fm.curve, energies), layer.thickness_cm});
                    break;
                }
            }
        }
        s.row(static_cast<Index>(p)) = synth_spectrum(m.spectra[p].peak_kvp, energies, filters).transpose();
    }
    Matrix b(static_cast<Index>(m.materials.size()), m.bins);
    for (std::size_t d = 0; d < m.materials.size(); ++d)
        b.row(static_cast<Index>(d)) = synth_attenuation(m.materials[d].curve, energies).transpose();
    return SpectralModel(std::move(s), std::move(b), energies);
}

PixelGrid build_grid(const ExperimentConfig& c) { return PixelGrid::centered(c.grid_width, c.grid_height, c.pixel_cm); }

std::vector<ParallelGeometry> build_geometries(const ExperimentConfig& c) {
    std::vector<ParallelGeometry> out;
    for (const auto& g : c.geometry)
        out.push_back(build_parallel_geometry(g.views, g.angle_offset_rad, g.detectors, g.detector_extent_cm));
    return out;
}

}  // namespace nlkacz::cli
