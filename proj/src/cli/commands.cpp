#include "nlkacz/cli/commands.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "nlkacz/log.hpp"

namespace nlkacz::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
    out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void write_sinogram(const fs::path& path, const Vector& g) {
    std::ostringstream s;
    s << "ray,g\n";
    for (Index j = 0; j < g.size(); ++j) s << j << ',' << format_double(g[j]) << '\n';
    write_text(path, s.str());
}

Vector read_sinogram(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::IoError, "missing data file " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "ray,g") throw Error(Errc::SchemaError, path.string() + ": bad header");
    std::vector<double> vals;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        double v = 0.0;
        Index j = 0;
        const auto r1 = std::from_chars(line.data(), line.data() + comma, j);
        const auto r2 = std::from_chars(line.data() + comma + 1, line.data() + line.size(), v);
        if (comma == std::string::npos || r1.ec != std::errc() || r2.ec != std::errc() ||
            j != static_cast<Index>(vals.size()))
            throw Error(Errc::SchemaError, path.string() + ": malformed row '" + line + "'");
        vals.push_back(v);
    }
    return Eigen::Map<Vector>(vals.data(), static_cast<Index>(vals.size()));
}

fs::path sinogram_path(const fs::path& dir, const std::string& stem, Index p) {
    return dir / (stem + "_" + std::to_string(p) + ".csv");
}

void write_images_with_previews(const fs::path& dir, const std::string& stem, const BasisImages& img) {
    write_images(dir / (stem + ".f64"), img);
    for (Index d = 0; d < img.basis_count; ++d)
        write_pgm(dir / (stem + "_" + std::to_string(d) + ".pgm"), img, d);
}

bool geometries_differ(const ExperimentConfig& c) {
    for (const auto& g : c.geometry)
        if (!(g == c.geometry.front())) return true;
    return false;
}

std::vector<SparseProjection> load_projections(const fs::path& dir, Index count) {
    std::vector<SparseProjection> out;
    for (Index p = 0; p < count; ++p) {
        const fs::path path = dir / ("projection_" + std::to_string(p) + ".sprj");
        if (!fs::exists(path)) throw Error(Errc::IoError, "missing projection file " + path.string());
        out.push_back(read_projection(path));
    }
    return out;
}

std::optional<BasisImages> load_truth(const fs::path& dir) {
    const fs::path path = dir / "phantom.f64";
    if (!fs::exists(path)) return std::nullopt;
    return read_images(path);
}

json rate_json(const std::optional<RateFit>& r) {
    if (!r) return nullptr;
    return {{"contraction", r->contraction}, {"r_squared", r->r_squared}};
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(Errc::IoError, "cannot create " + dir.string() + ": " + ec.message());
}

}  // namespace

void cmd_simulate(const ExperimentConfig& config, const RunContext& ctx, std::ostream& out) {
    ensure_dir(ctx.out_dir);
    const SpectralModel model = build_model(config);
    const PixelGrid grid = build_grid(config);
    const auto geometries = build_geometries(config);
    const BasisImages truth = rasterize(config.phantom, grid, config.supersample);

    std::vector<SparseProjection> proj;
    for (const auto& g : geometries) proj.push_back(build_projection(grid, g, ctx.threads));
    const MeasuredData data = simulate_data(model, proj, truth, ctx.threads);

    write_json(ctx.out_dir / "manifest.json", manifest_json(config));
    write_images_with_previews(ctx.out_dir, "phantom", truth);
    for (std::size_t p = 0; p < proj.size(); ++p) {
        write_projection(ctx.out_dir / ("projection_" + std::to_string(p) + ".sprj"), proj[p]);
        write_sinogram(sinogram_path(ctx.out_dir, "sinogram", static_cast<Index>(p)), data.sinograms[p]);
    }
    if (geometries_differ(config)) {
        // The two-step pipeline needs every spectrum on one ray set.
        std::vector<SparseProjection> shared(proj.size(), proj.front());
        const MeasuredData sd = simulate_data(model, shared, truth, ctx.threads);
        for (std::size_t p = 0; p < sd.sinograms.size(); ++p)
            write_sinogram(sinogram_path(ctx.out_dir, "sinogram_shared", static_cast<Index>(p)), sd.sinograms[p]);
    }
    for (Index p = 0; p < model.spectrum_count(); ++p)
        write_energy_csv(ctx.out_dir / ("spectrum_" + std::to_string(p) + ".csv"), "weight",
                         {model.energies(), model.spectra().row(p).transpose()});
    for (Index d = 0; d < model.basis_count(); ++d)
        write_energy_csv(ctx.out_dir / ("material_" + std::to_string(d) + ".csv"), "mu",
                         {model.energies(), model.basis().row(d).transpose()});

    Index rays = 0;
    for (const auto& p : proj) rays += p.rows();
    out << "simulated " << model.spectrum_count() << " spectra, " << rays << " rays, " << grid.width << "x"
        << grid.height << " grid -> " << ctx.out_dir.string() << '\n';
}

void cmd_solve(const ExperimentConfig& config, SolveMode mode, const RunContext& ctx, std::ostream& out) {
    const SpectralModel model = build_model(config);
    const PixelGrid grid = build_grid(config);
    const Index p_count = model.spectrum_count();
    const auto truth = load_truth(ctx.out_dir);
    if (truth && (truth->width != grid.width || truth->height != grid.height))
        throw Error(Errc::InconsistentGeometry, "phantom.f64 does not match the configured grid");

    if (mode == SolveMode::Dd) {
        const auto proj = load_projections(ctx.out_dir, 1);
        const std::string stem =
            fs::exists(sinogram_path(ctx.out_dir, "sinogram_shared", 0)) ? "sinogram_shared" : "sinogram";
        MeasuredData data;
        for (Index p = 0; p < p_count; ++p) data.sinograms.push_back(read_sinogram(sinogram_path(ctx.out_dir, stem, p)));

        DddOptions opt;
        opt.ray_strategy = config.strategy;
        opt.ray_stop = config.dd_ray_stop;
        opt.image_stop = config.dd_image_stop;
        opt.threads = ctx.threads;
        opt.burn_in = config.burn_in;
        const DddResult res = ddd_pipeline(model, proj[0], data, grid, opt, truth);

        std::ostringstream re;
        re << "iteration,re_z\n";
        for (std::size_t k = 0; k < res.report.re_curve.size(); ++k)
            re << k << ',' << format_double(res.report.re_curve[k]) << '\n';
        write_text(ctx.out_dir / "dd_re_z.csv", re.str());

        std::ostringstream tr;
        tr << "ray,iteration,selected_index,residual,res_norm,re_metric\n";
        for (std::size_t j = 0; j < res.ray_traces.size(); ++j) {
            const auto& t = res.ray_traces[j];
            double zn = 0.0;
            if (truth) {
                for (Index d = 0; d < model.basis_count(); ++d) {
                    const double z = proj[0].row_dot(static_cast<Index>(j), truth->data.data() + d * grid.pixels());
                    zn += z * z;
                }
            }
            zn = std::sqrt(zn);
            for (const auto& r : t.records) {
                tr << j << ',' << r.iteration << ',' << r.selected << ',' << format_double(r.residual) << ','
                   << format_double(r.residual_norm) << ','
                   << format_double(zn > 0.0 ? r.distance / zn : std::numeric_limits<double>::quiet_NaN()) << '\n';
            }
        }
        write_text(ctx.out_dir / "dd_trace.csv", tr.str());

        std::ostringstream zs;
        zs << "ray";
        for (Index d = 0; d < model.basis_count(); ++d) zs << ",z_" << d;
        zs << '\n';
        for (Index j = 0; j < res.basis_sinograms.rows(); ++j) {
            zs << j;
            for (Index d = 0; d < model.basis_count(); ++d) zs << ',' << format_double(res.basis_sinograms(j, d));
            zs << '\n';
        }
        write_text(ctx.out_dir / "dd_basis_sinograms.csv", zs.str());
        write_images_with_previews(ctx.out_dir, "dd_recon", res.images);

        Index max_iter = 0;
        double worst = 0.0;
        Index not_converged = 0;
        for (const auto& r : res.rays) {
            max_iter = std::max(max_iter, r.iterations);
            worst = std::max(worst, r.relative_error);
            if (r.reason != Termination::Converged) ++not_converged;
        }
        json summary;
        summary["mode"] = "dd";
        summary["rays"] = res.rays.size();
        summary["dropped_rays"] = res.dropped_rays;
        summary["max_ray_iterations"] = max_iter;
        summary["rays_not_converged"] = not_converged;
        summary["worst_ray_re_z"] = truth ? finite_or_null(worst) : json(nullptr);
        summary["final_re_z"] = res.report.re_curve.empty() ? json(nullptr) : json(res.report.re_curve.back());
        summary["rate"] = rate_json(res.report.rate);
        summary["final_re_f"] = res.report.epochs.empty() ? json(nullptr) : finite_or_null(res.report.epochs[0].re_f);
        json images = json::array();
        for (const auto& t : res.image_traces)
            images.push_back({{"iterations", t.iterations},
                              {"epochs", t.epochs_started()},
                              {"residual_norm", t.final_residual_norm},
                              {"termination", std::string(to_string(t.reason))}});
        summary["image_step"] = images;
        write_json(ctx.out_dir / "dd_summary.json", summary);
        if (ctx.json) {
            out << summary.dump(2) << '\n';
        } else {
            out << "solve-dd: " << res.rays.size() << " rays, max " << max_iter << " iterations per ray";
            if (!res.report.re_curve.empty()) out << ", final RE_z " << res.report.re_curve.back();
            out << ", " << std::fixed << std::setprecision(2) << res.report.wall_seconds << " s\n";
        }
        return;
    }

    const auto proj = load_projections(ctx.out_dir, p_count);
    MeasuredData data;
    for (Index p = 0; p < p_count; ++p) data.sinograms.push_back(read_sinogram(sinogram_path(ctx.out_dir, "sinogram", p)));
    OneStepOptions opt;
    opt.strategy = config.strategy;
    opt.stop = config.onestep_stop;
    opt.target_re_f = config.onestep_target_re_f;
    opt.burn_in = config.burn_in;
    BasisImages f0;
    f0.width = grid.width;
    f0.height = grid.height;
    f0.basis_count = model.basis_count();
    f0.data = Vector::Zero(model.basis_count() * grid.pixels());
    const OneStepResult res = solve_onestep(model, proj, data, f0, opt, truth);

    write_trace_csv(ctx.out_dir / "onestep_trace.csv", res.report);
    write_epoch_csv(ctx.out_dir / "onestep_epochs.csv", res.report);
    write_images_with_previews(ctx.out_dir, "onestep_recon", res.images);
    const auto& last = res.report.epochs.back();
    json summary;
    summary["mode"] = "onestep";
    summary["equations"] = res.report.trace.component_count;
    summary["dropped_rays"] = res.dropped_rays;
    summary["iterations"] = res.report.trace.iterations;
    summary["epochs_used"] = res.report.trace.epochs_started();
    summary["termination"] = std::string(to_string(res.report.trace.reason));
    summary["fallback_steps"] = res.report.trace.fallback_count;
    summary["final_re_f"] = finite_or_null(last.re_f);
    summary["final_re_g"] = finite_or_null(last.re_g);
    summary["rate"] = rate_json(res.report.rate);
    write_json(ctx.out_dir / "onestep_summary.json", summary);
    if (ctx.json) {
        out << summary.dump(2) << '\n';
    } else {
        out << "solve-onestep: " << res.report.trace.iterations << " iterations (" << res.report.trace.epochs_started()
            << " epochs), RE_f " << last.re_f << ", RE_g " << last.re_g << ", " << std::fixed << std::setprecision(2)
            << res.report.wall_seconds << " s\n";
    }
}

ConditionReport cmd_verify(const ExperimentConfig& config, const RunContext& ctx, std::ostream& out) {
    const SpectralModel model = build_model(config);
    const PixelGrid grid = build_grid(config);
    const auto geometries = build_geometries(config);
    const BasisImages truth = rasterize(config.phantom, grid, config.supersample);
    const SparseProjection proj = build_projection(grid, geometries.front(), ctx.threads);

    std::vector<Index> usable;
    for (Index j = 0; j < proj.rows(); ++j)
        if (proj.row_nnz(j) > 0) usable.push_back(j);
    if (usable.empty()) throw Error(Errc::InconsistentGeometry, "no ray intersects the grid");
    std::mt19937_64 rng(config.seed);
    std::uniform_int_distribution<std::size_t> pick(0, usable.size() - 1);
    std::vector<Vector> z_star;
    std::vector<double> norms;
    for (Index k = 0; k < config.verify.ray_samples; ++k) {
        const Index j = usable[pick(rng)];
        Vector z(model.basis_count());
        for (Index d = 0; d < model.basis_count(); ++d) z[d] = proj.row_dot(j, truth.data.data() + d * grid.pixels());
        z_star.push_back(z);
        const RayVector a = proj.row(j);
        norms.push_back(std::sqrt(a.squared_norm()));
    }

    MsctCheckOptions opt;
    opt.tau = config.tau;
    opt.mc_samples = config.verify.mc_samples;
    opt.gamma_samples = config.verify.gamma_samples;
    opt.seed = config.seed;
    Index equations = 0;
    for (const auto& g : geometries) equations += g.rays();
    const Index unknowns = model.basis_count() * grid.pixels();
    if (std::max(equations, unknowns) <= opt.kappa_cap) {
        std::vector<SparseProjection> projs;
        for (const auto& g : geometries) projs.push_back(build_projection(grid, g, ctx.threads));
        const MeasuredData data = simulate_data(model, projs, truth, ctx.threads);
        OneStepSystem sys(model, projs, data);
        Matrix jac = Matrix::Zero(sys.size(), sys.dimension());
        SparseVector g;
        for (Index j = 0; j < sys.size(); ++j) {
            sys.gradient(j, truth.data, g);
            for (std::size_t q = 0; q < g.nnz(); ++q) jac(j, g.index[q]) = g.value[q];
        }
        opt.onestep_jacobian = std::move(jac);
    } else {
        opt.onestep_note = "K'(f*) is " + std::to_string(equations) + "x" + std::to_string(unknowns) +
                           ", above the dense SVD cap of " + std::to_string(opt.kappa_cap);
    }
    const ConditionReport rep = check_msct(model, z_star, norms, opt);
    ensure_dir(ctx.out_dir);
    write_json(ctx.out_dir / "verify.json", rep.to_json());
    if (ctx.json) {
        out << rep.to_json().dump(2) << '\n';
    } else {
        out << rep.to_text();
    }
    return rep;
}

json cmd_demo(const RunContext& ctx, std::ostream& out) {
    // Unit circles centered at (0, 0) and (1, 0); they meet at (1/2, sqrt(3)/2).
    CallbackSystem circles(2, 2, [](Index j, const Vector& x, Vector* grad) {
        const double cx = j == 0 ? 0.0 : 1.0;
        if (grad) *grad = Vector{{2.0 * (x[0] - cx), 2.0 * x[1]}};
        return (x[0] - cx) * (x[0] - cx) + x[1] * x[1] - 1.0;
    });
    const Vector solution{{0.5, std::sqrt(3.0) / 2.0}};
    circles.set_known_solution(solution);
    const Vector x0{{0.6, 0.9}};
    const StopRule stop{1000, 1e-15, 1e-14};

    json rows = json::array();
    for (auto kind : {StrategyKind::Cyclic, StrategyKind::MaxResidual, StrategyKind::ThetaResidual,
                      StrategyKind::PositiveCyclic}) {
        const IterationTrace t = run(circles, x0, SelectionStrategy{kind}, stop);
        Index hit = -1;
        for (const auto& r : t.records) {
            if (r.distance <= 1e-8) {
                hit = r.iteration;
                break;
            }
        }
        if (hit < 0 && t.final_distance <= 1e-8) hit = t.iterations;
        rows.push_back({{"strategy", std::string(to_string(kind))},
                        {"iterations_to_1e-8", hit >= 0 ? json(hit) : json(nullptr)},
                        {"final_distance", t.final_distance},
                        {"final_point", {t.final_point[0], t.final_point[1]}},
                        {"fallback_steps", t.fallback_count},
                        {"converged", hit >= 0}});
    }
    if (ctx.json) {
        out << json{{"system", "two unit circles centered at (0,0) and (1,0)"}, {"x0", {0.6, 0.9}}, {"rows", rows}}
                   .dump(2)
            << '\n';
    } else {
        out << "two unit circles, x0 = (0.6, 0.9), target (0.5, 0.8660254)\n";
        out << std::left << std::setw(18) << "strategy" << std::setw(14) << "iterations" << "final distance\n";
        for (const auto& r : rows) {
            const auto& it = r["iterations_to_1e-8"];
            out << std::setw(18) << r["strategy"].get<std::string>() << std::setw(14)
                << (it.is_null() ? std::string("-") : std::to_string(it.get<Index>()))
                << r["final_distance"].get<double>() << '\n';
        }
    }
    return rows;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Nonlinear Kaczmarz solvers for spectral CT", "nlkacz"};
    app.require_subcommand(1, 1);

    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    Index threads = 1;
    bool as_json = false;

    auto add_common = [&](CLI::App* sub, bool needs_config) {
        auto* c = sub->add_option("--config", config_path, "experiment config (.toml) or manifest (.json)");
        if (needs_config) c->required();
        sub->add_option("--out", out_dir, "output directory (overrides output.dir)");
        sub->add_option("--seed", seed, "seed for sampled diagnostics");
        sub->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
        sub->add_flag("--json", as_json, "machine-readable console output");
    };
    auto* sim = app.add_subcommand("simulate", "rasterize the phantom and simulate noiseless data");
    auto* sdd = app.add_subcommand("solve-dd", "per-ray decomposition, then linear reconstruction");
    auto* sos = app.add_subcommand("solve-onestep", "one-step reconstruction over all rays");
    auto* ver = app.add_subcommand("verify", "check the convergence hypotheses for a model");
    auto* demo = app.add_subcommand("demo", "circle-intersection showcase of the selection strategies");
    for (auto* s : {sim, sdd, sos, ver}) add_common(s, true);
    add_common(demo, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return 0;
        }
        err << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        RunContext ctx;
        ctx.threads = threads;
        ctx.json = as_json;
        if (demo->parsed()) {
            cmd_demo(ctx, out);
            return 0;
        }
        ExperimentConfig config = load_config(config_path);
        if (sim->parsed() || sdd->parsed() || sos->parsed() || ver->parsed()) {
            for (auto* s : {sim, sdd, sos, ver})
                if (s->parsed() && s->count("--seed") > 0) config.seed = seed;
        }
        if (!out_dir.empty()) config.out_dir = fs::absolute(out_dir);
        if (config.out_dir.empty()) throw Error(Errc::ConfigError, "'output.dir': not set and no --out given");
        ctx.out_dir = config.out_dir;
        if (sim->parsed()) cmd_simulate(config, ctx, out);
        if (sdd->parsed()) cmd_solve(config, SolveMode::Dd, ctx, out);
        if (sos->parsed()) cmd_solve(config, SolveMode::OneStep, ctx, out);
        if (ver->parsed()) cmd_verify(config, ctx, out);
        return 0;
    } catch (const IterationError& e) {
        err << "error: " << e.what() << " (iteration " << e.iteration() << ", equation " << e.component() << ")\n";
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace nlkacz::cli
