#include "nlkacz/phantom.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <fstream>

namespace nlkacz {

bool Ellipse::contains(double x, double y) const {
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    const double dx = x - cx;
    const double dy = y - cy;
    const double u = (dx * c + dy * s) / a;
    const double v = (-dx * s + dy * c) / b;
    return u * u + v * v <= 1.0;
}

void EllipseSpec::validate() const {
    if (basis_count < 1) throw Error(Errc::InvalidArgument, "basis_count must be positive");
    for (std::size_t k = 0; k < ellipses.size(); ++k) {
        const auto& e = ellipses[k];
        const std::string where = "ellipse " + std::to_string(k) + ": ";
        if (e.basis < 0 || e.basis >= basis_count) throw Error(Errc::IndexOutOfRange, where + "basis out of range");
        if (!(e.a > 0.0) || !(e.b > 0.0)) throw Error(Errc::InvalidArgument, where + "semi-axes must be > 0");
        if (!std::isfinite(e.cx) || !std::isfinite(e.cy) || !std::isfinite(e.theta) || !std::isfinite(e.a) ||
            !std::isfinite(e.b))
            throw Error(Errc::NonFinite, where + "non-finite geometry");
        if (!(e.value >= -1.0 && e.value <= 1.0)) throw Error(Errc::InvalidArgument, where + "value outside [-1, 1]");
    }
}

BasisImages rasterize(const EllipseSpec& spec, const PixelGrid& grid, int supersample) {
    if (supersample != 1 && supersample != 2 && supersample != 4 && supersample != 8)
        throw Error(Errc::InvalidArgument, "supersample must be 1, 2, 4 or 8");
    spec.validate();
    grid.validate();
    BasisImages out;
    out.width = grid.width;
    out.height = grid.height;
    out.basis_count = spec.basis_count;
    out.data = Vector::Zero(spec.basis_count * grid.pixels());
    const double inv = 1.0 / static_cast<double>(supersample * supersample);
    for (Index r = 0; r < grid.height; ++r) {
        for (Index c = 0; c < grid.width; ++c) {
            const Index pix = r * grid.width + c;
            for (const auto& e : spec.ellipses) {
                int hits = 0;
                for (int sy = 0; sy < supersample; ++sy) {
                    const double y = grid.y_min + (static_cast<double>(r) + (sy + 0.5) / supersample) * grid.h;
                    for (int sx = 0; sx < supersample; ++sx) {
                        const double x = grid.x_min + (static_cast<double>(c) + (sx + 0.5) / supersample) * grid.h;
                        if (e.contains(x, y)) ++hits;
                    }
                }
                if (hits > 0) out.data[e.basis * grid.pixels() + pix] += e.value * hits * inv;
            }
        }
    }
    out.data = out.data.cwiseMax(0.0).cwiseMin(1.0);
    return out;
}

EllipseSpec ellipses_from_json(const nlohmann::json& j, Index basis_count) {
    if (!j.is_array()) throw Error(Errc::SchemaError, "phantom spec must be a JSON array");
    EllipseSpec spec;
    spec.basis_count = basis_count;
    for (std::size_t k = 0; k < j.size(); ++k) {
        const auto& item = j[k];
        Ellipse e;
        try {
            e.basis = item.at("basis").get<Index>();
            e.cx = item.at("cx").get<double>();
            e.cy = item.at("cy").get<double>();
            e.a = item.at("a").get<double>();
            e.b = item.at("b").get<double>();
            e.theta = item.at("theta").get<double>();
            e.value = item.at("value").get<double>();
        } catch (const nlohmann::json::exception& ex) {
            throw Error(Errc::SchemaError, "ellipse " + std::to_string(k) + ": " + ex.what());
        }
        spec.ellipses.push_back(e);
    }
    spec.validate();
    return spec;
}

nlohmann::json ellipses_to_json(const EllipseSpec& spec) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : spec.ellipses) {
        arr.push_back({{"basis", e.basis}, {"cx", e.cx}, {"cy", e.cy}, {"a", e.a},
                       {"b", e.b}, {"theta", e.theta}, {"value", e.value}});
    }
    return arr;
}

EllipseSpec read_ellipse_spec(const std::filesystem::path& path, Index basis_count) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::IoError, "cannot open phantom file " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& ex) {
        throw Error(Errc::SchemaError, path.string() + ": " + ex.what());
    }
    return ellipses_from_json(j, basis_count);
}

namespace {

std::filesystem::path sidecar(const std::filesystem::path& raw) {
    auto p = raw;
    p += ".json";
    return p;
}

}  // namespace

void write_images(const std::filesystem::path& raw_path, const BasisImages& images) {
    std::ofstream out(raw_path, std::ios::binary);
    if (!out) throw Error(Errc::IoError, "cannot write " + raw_path.string());
    for (Index k = 0; k < images.data.size(); ++k) {
        const auto bits = std::bit_cast<std::uint64_t>(images.data[k]);
        std::array<char, 8> b{};
        for (int q = 0; q < 8; ++q) b[q] = static_cast<char>((bits >> (8 * q)) & 0xffu);
        out.write(b.data(), 8);
    }
    const nlohmann::json meta = {{"width", images.width},
                                 {"height", images.height},
                                 {"dtype", "f64le"},
                                 {"basis_count", images.basis_count}};
    std::ofstream side(sidecar(raw_path));
    side << meta.dump(2) << '\n';
    if (!out || !side) throw Error(Errc::IoError, "write failed for " + raw_path.string());
}

BasisImages read_images(const std::filesystem::path& raw_path) {
    std::ifstream side(sidecar(raw_path));
    if (!side) throw Error(Errc::IoError, "missing image sidecar " + sidecar(raw_path).string());
    nlohmann::json meta;
    BasisImages img;
    try {
        side >> meta;
        if (meta.at("dtype").get<std::string>() != "f64le") throw Error(Errc::SchemaError, "dtype must be f64le");
        img.width = meta.at("width").get<Index>();
        img.height = meta.at("height").get<Index>();
        img.basis_count = meta.at("basis_count").get<Index>();
    } catch (const nlohmann::json::exception& ex) {
        throw Error(Errc::SchemaError, sidecar(raw_path).string() + ": " + ex.what());
    }
    if (img.width < 1 || img.height < 1 || img.basis_count < 1) throw Error(Errc::SchemaError, "bad image sizes");
    std::ifstream in(raw_path, std::ios::binary);
    if (!in) throw Error(Errc::IoError, "cannot open " + raw_path.string());
    img.data.resize(img.basis_count * img.pixels());
    for (Index k = 0; k < img.data.size(); ++k) {
        std::array<unsigned char, 8> b{};
        if (!in.read(reinterpret_cast<char*>(b.data()), 8)) throw Error(Errc::IoError, "image file truncated");
        std::uint64_t bits = 0;
        for (int q = 7; q >= 0; --q) bits = (bits << 8) | b[q];
        img.data[k] = std::bit_cast<double>(bits);
    }
    return img;
}

void write_pgm(const std::filesystem::path& path, const BasisImages& images, Index basis) {
    if (basis < 0 || basis >= images.basis_count) throw Error(Errc::IndexOutOfRange, "basis out of range");
    const auto img = images.basis(basis);
    const double lo = img.minCoeff();
    const double hi = img.maxCoeff();
    const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
    out << "P5\n" << images.width << ' ' << images.height << "\n255\n";
    // Row 0 sits at the bottom of the grid, so emit rows in reverse.
    for (Index r = images.height - 1; r >= 0; --r) {
        for (Index c = 0; c < images.width; ++c) {
            const double v = (img[r * images.width + c] - lo) * scale;
            out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 255.0)))));
        }
    }
}

}  // namespace nlkacz
