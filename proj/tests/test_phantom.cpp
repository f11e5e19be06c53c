#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "nlkacz/phantom.hpp"
#include "oracles.hpp"

using namespace nlkacz;

namespace {

Ellipse ellipse(Index basis, double cx, double cy, double a, double b, double theta, double value) {
    Ellipse e;
    e.basis = basis;
    e.cx = cx;
    e.cy = cy;
    e.a = a;
    e.b = b;
    e.theta = theta;
    e.value = value;
    return e;
}

std::filesystem::path scratch(const char* name) {
    auto dir = std::filesystem::temp_directory_path() / "nlkacz_phantom_test";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("covering and empty specs") {
    const auto g = PixelGrid::centered(6, 5, 0.5);
    EllipseSpec spec;
    spec.basis_count = 2;
    auto img = rasterize(spec, g);
    CHECK(img.data.size() == 2 * 30);
    CHECK(img.data.cwiseAbs().maxCoeff() == 0.0);

    spec.ellipses.push_back(ellipse(1, 0.0, 0.0, 10.0, 10.0, 0.0, 1.0));
    img = rasterize(spec, g);
    CHECK(img.basis(0).cwiseAbs().maxCoeff() == 0.0);
    CHECK(img.basis(1).minCoeff() == 1.0);
    CHECK(img.basis(1).maxCoeff() == 1.0);

    // overlapping values clamp into [0, 1]
    spec.ellipses.push_back(ellipse(1, 0.0, 0.0, 10.0, 10.0, 0.0, 0.7));
    spec.ellipses.push_back(ellipse(0, 0.0, 0.0, 10.0, 10.0, 0.0, -0.4));
    img = rasterize(spec, g);
    CHECK(img.basis(1).maxCoeff() == 1.0);
    CHECK(img.basis(0).maxCoeff() == 0.0);
}

TEST_CASE("half-covered pixel") {
    // a huge circle whose edge runs through the middle of the single pixel
    PixelGrid g;
    g.width = g.height = 1;
    g.h = 1.0;
    g.x_min = -0.5;
    g.y_min = -0.5;
    EllipseSpec spec;
    spec.basis_count = 1;
    spec.ellipses.push_back(ellipse(0, -1e4, 0.0, 1e4 + 0.01, 1e4 + 0.01, 0.0, 1.0));
    const double v = rasterize(spec, g, 4).data[0];
    CHECK(std::abs(v * 16 - std::round(v * 16)) < 1e-12);
    CHECK(std::abs(v - 0.5) <= 0.125);
    const double exact = oracle::ellipse_rect_area(-1e4, 0.0, 1e4 + 0.01, 1e4 + 0.01, 0.0, -0.5, 0.5, -0.5, 0.5);
    CHECK(exact == doctest::Approx(0.51).epsilon(1e-4));
}

TEST_CASE("area oracle sanity") {
    // ellipse fully inside the rectangle
    CHECK(oracle::ellipse_rect_area(0.1, -0.2, 0.3, 0.2, 0.4, -1, 1, -1, 1) ==
          doctest::Approx(std::numbers::pi * 0.06).epsilon(1e-12));
    // rectangle fully inside the ellipse
    CHECK(oracle::ellipse_rect_area(0, 0, 5, 3, 0.3, -0.5, 0.5, -0.2, 0.2) == doctest::Approx(0.4).epsilon(1e-12));
    // quarter disk
    CHECK(oracle::ellipse_rect_area(0, 0, 1, 1, 0, 0, 2, 0, 2) == doctest::Approx(std::numbers::pi / 4).epsilon(1e-12));
}

TEST_CASE("finer supersampling is closer to the exact area") {
    std::mt19937_64 rng(20261016);
    std::uniform_real_distribution<double> pos(-0.8, 0.8);
    std::uniform_real_distribution<double> axis(0.2, 1.2);
    std::uniform_real_distribution<double> rot(0.0, std::numbers::pi);
    PixelGrid g;
    g.width = g.height = 1;
    g.h = 1.0;
    g.x_min = -0.5;
    g.y_min = -0.5;
    // A coarse midpoint sample can land near the exact area by luck, so
    // single pairs are not ordered; the error statistics are.
    int partial = 0;
    double sum_fine = 0.0, sum_coarse = 0.0, max_fine = 0.0, max_coarse = 0.0;
    for (int t = 0; t < 50; ++t) {
        const auto e = ellipse(0, pos(rng), pos(rng), axis(rng), axis(rng), rot(rng), 1.0);
        EllipseSpec spec;
        spec.basis_count = 1;
        spec.ellipses.push_back(e);
        const double exact = oracle::ellipse_rect_area(e.cx, e.cy, e.a, e.b, e.theta, -0.5, 0.5, -0.5, 0.5);
        if (exact > 0.0 && exact < 1.0) ++partial;
        const double fine = rasterize(spec, g, 8).data[0];
        const double coarse = rasterize(spec, g, 2).data[0];
        sum_fine += std::abs(fine - exact);
        sum_coarse += std::abs(coarse - exact);
        max_fine = std::max(max_fine, std::abs(fine - exact));
        max_coarse = std::max(max_coarse, std::abs(coarse - exact));
    }
    CHECK(partial >= 25);
    CHECK(sum_fine <= sum_coarse + 1e-12);
    CHECK(max_fine <= max_coarse + 1e-12);
}

TEST_CASE("shifting spec and grid by whole pixels") {
    EllipseSpec spec;
    spec.basis_count = 2;
    spec.ellipses.push_back(ellipse(0, 0.375, -0.25, 1.5, 0.75, 0.3, 0.8));
    spec.ellipses.push_back(ellipse(1, -0.5, 0.125, 0.5, 1.25, -1.1, 0.5));
    spec.ellipses.push_back(ellipse(1, 0.25, 0.25, 0.25, 0.25, 0.0, 0.25));
    const auto g = PixelGrid::centered(16, 12, 0.25);
    const auto base = rasterize(spec, g);
    for (auto [sx, sy] : {std::pair{3, 0}, std::pair{-2, 5}, std::pair{7, -4}}) {
        auto moved = spec;
        for (auto& e : moved.ellipses) {
            e.cx += sx * g.h;
            e.cy += sy * g.h;
        }
        auto g2 = g;
        g2.x_min += sx * g.h;
        g2.y_min += sy * g.h;
        CHECK(rasterize(moved, g2).data == base.data);
    }
}

TEST_CASE("spec validation and JSON") {
    const auto g = PixelGrid::centered(4, 4, 0.5);
    EllipseSpec spec;
    spec.basis_count = 2;
    spec.ellipses.push_back(ellipse(2, 0, 0, 1, 1, 0, 1));
    CHECK_THROWS_AS(rasterize(spec, g), Error);
    spec.ellipses[0] = ellipse(0, 0, 0, 0.0, 1, 0, 1);
    CHECK_THROWS_AS(rasterize(spec, g), Error);
    spec.ellipses[0] = ellipse(0, 0, 0, 1, 1, 0, 1.5);
    CHECK_THROWS_AS(rasterize(spec, g), Error);
    spec.ellipses[0] = ellipse(0, 0, 0, 1, 1, 0, 1);
    CHECK_THROWS_AS(rasterize(spec, g, 3), Error);

    spec.ellipses.push_back(ellipse(1, 0.2, -0.1, 0.7, 0.4, 0.5, -0.3));
    const auto j = ellipses_to_json(spec);
    REQUIRE(j.is_array());
    CHECK(j.size() == 2);
    const auto back = ellipses_from_json(j, 2);
    REQUIRE(back.ellipses.size() == 2);
    CHECK(back.ellipses[1].theta == 0.5);
    CHECK(back.ellipses[1].value == -0.3);
    CHECK(back.ellipses[1].basis == 1);

    try {
        ellipses_from_json(nlohmann::json::parse(R"([{"basis":0,"cx":0}])"), 2);
        FAIL("expected SchemaError");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::SchemaError);
    }
    CHECK_THROWS_AS(ellipses_from_json(nlohmann::json::object(), 2), Error);
}

TEST_CASE("image files") {
    EllipseSpec spec;
    spec.basis_count = 2;
    spec.ellipses.push_back(ellipse(0, 0.1, 0.0, 0.8, 0.6, 0.2, 0.9));
    spec.ellipses.push_back(ellipse(1, -0.2, 0.1, 0.3, 0.5, 0.0, 0.4));
    const auto g = PixelGrid::centered(9, 7, 0.25);
    const auto img = rasterize(spec, g);

    const auto raw = scratch("img.raw");
    write_images(raw, img);
    CHECK(std::filesystem::file_size(raw) == static_cast<std::uintmax_t>(8 * img.data.size()));
    {
        std::ifstream side(raw.string() + ".json");
        REQUIRE(side);
        const auto meta = nlohmann::json::parse(side);
        CHECK(meta["width"] == 9);
        CHECK(meta["height"] == 7);
        CHECK(meta["basis_count"] == 2);
        CHECK(meta["dtype"] == "f64le");
    }
    const auto back = read_images(raw);
    CHECK(back.width == 9);
    CHECK(back.height == 7);
    CHECK(back.data == img.data);

    const auto pgm = scratch("img.pgm");
    write_pgm(pgm, img, 0);
    std::ifstream in(pgm, std::ios::binary);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    CHECK(magic == "P5");
    CHECK(w == 9);
    CHECK(h == 7);
    CHECK(maxval == 255);
    in.get();
    std::vector<unsigned char> px(63);
    in.read(reinterpret_cast<char*>(px.data()), 63);
    CHECK(in.gcount() == 63);
    CHECK(*std::max_element(px.begin(), px.end()) == 255);
    CHECK(*std::min_element(px.begin(), px.end()) == 0);
    CHECK_THROWS_AS(write_pgm(pgm, img, 2), Error);

    std::filesystem::remove(raw.string() + ".json");
    CHECK_THROWS_AS(read_images(raw), Error);
    std::filesystem::remove_all(raw.parent_path());
}
