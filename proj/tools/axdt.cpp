// SPDX-License-Identifier: Apache-2.0
// axdt command-line tool: phase-stepping simulation, dark-field
// reconstruction, fiber extraction, statistics, and Lipschitz benchmarking.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <axdt/fiber.hpp>
#include <axdt/io.hpp>
#include <axdt/models.hpp>
#include <axdt/optim.hpp>
#include <axdt/simulate.hpp>

namespace fs = std::filesystem;
using namespace axdt;

namespace {

/// Runtime failure distinct from configuration/validation problems.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

constexpr int kQuadTheta = 16;

WeightTable cached_weights(const AcquisitionGeometry& geom, int degree, const fs::path& dir) {
    return load_or_compute_weights(geom, degree, gauss_legendre_sphere_grid(kQuadTheta), kQuadTheta,
                                   dir / "weights");
}

struct SimulateOpts {
    std::string out;
    int size = 32;
    double spacing = 1.0;
    double rod_radius = 0.0;  // 0 = auto
    double angle = 90.0;
    double eps_iso = 0.01;
    double eps_aniso = 0.1;
    double mu = 0.02;
    int poses = 60;
    int det_size = 0;  // 0 = auto
    double pitch = 0.0;  // 0 = spacing
    int n_steps = 8;
    double a0 = 1e4;
    double alpha0 = 0.3;
    bool no_noise = false;
    std::uint64_t seed = 0;
    int degree = 4;
};

void run_simulate(const SimulateOpts& o) {
    const fs::path out(o.out);
    fs::create_directories(out);
    const VolumeGrid grid =
        VolumeGrid::centered({o.size, o.size, o.size}, Vec3::Constant(o.spacing));
    const double radius = o.rod_radius > 0.0 ? o.rod_radius : 0.14 * o.size * o.spacing;
    const Phantom phantom =
        make_crossed_rods_phantom(grid, radius, o.angle, o.eps_iso, o.eps_aniso, o.mu, o.degree);
    const int n_det =
        o.det_size > 0 ? o.det_size : static_cast<int>(std::ceil(std::sqrt(3.0) * o.size)) + 2;
    DetectorSpec det;
    det.rows = n_det;
    det.cols = n_det;
    det.pitch = o.pitch > 0.0 ? o.pitch : o.spacing;
    const AcquisitionGeometry geom = sphere_covering_geometry(o.poses, det, grid);
    const WeightTable weights = cached_weights(geom, o.degree, out);
    const SimulationResult sim = simulate_measurements(phantom, geom, weights, o.a0, o.alpha0,
                                                       o.n_steps, !o.no_noise, o.seed);
    write_geometry(out / "geometry.txt", geom);
    write_measurement_set(out / "meas", sim.measurements);
    write_scalar_volume(out / "gt_mu", phantom.mu_gt);
    write_coefficient_volume(out / "gt_eta", phantom.eta_gt);
    std::printf("simulate: %d poses x %dx%d pixels = %zu rays, N = %d, noise %s\n",
                static_cast<int>(geom.poses.size()), det.rows, det.cols, geom.n_rays(), o.n_steps,
                o.no_noise ? "off" : "on");
    if (sim.measurements.clamped_count > 0)
        std::printf("simulate: clamped %zu nonpositive amplitude draws\n",
                    sim.measurements.clamped_count);
    std::printf("simulate: wrote %s\n", out.string().c_str());
}

struct ReconstructOpts {
    std::string data;
    std::string out;
    std::string model = "m1";
    std::string algorithm;  // empty = cgls for m1, lbfgs otherwise
    std::string line_search = "nr";
    int iters = 100;
    double grad_tol = 1e-8;
    int ls_iters = 1;
    int memory = 10;
    double step = 0.0;  // fgm step; 0 = 1/L when a bound exists
    int mu_iters = 50;
    int degree = 4;
    std::uint64_t seed = 0;
};

void run_reconstruct(const ReconstructOpts& o) {
    const fs::path data(o.data);
    const fs::path out(o.out.empty() ? o.data : o.out);
    fs::create_directories(out);
    const AcquisitionGeometry geom = read_geometry(data / "geometry.txt");
    const MeasurementSet meas = read_measurement_set(data / "meas");
    if (meas.n_rays() != geom.n_rays())
        throw std::invalid_argument("reconstruct: measurements do not match geometry");
    const WeightTable weights = cached_weights(geom, o.degree, data);

    const ModelKind kind = parse_model_kind(o.model);
    const std::string algo_name =
        o.algorithm.empty() ? (kind == ModelKind::m1 ? "cgls" : "lbfgs") : o.algorithm;
    const Algorithm algo = parse_algorithm(algo_name);
    if (algo == Algorithm::cgls && kind != ModelKind::m1)
        throw std::invalid_argument("reconstruct: cgls solves the linear model only (--model m1)");

    OptimizerConfig cfg;
    cfg.algorithm = algo;
    cfg.max_iters = o.iters;
    cfg.grad_tol = o.grad_tol;
    cfg.line_search = parse_line_search(o.line_search);
    cfg.ls_iters = o.ls_iters;
    cfg.lbfgs_memory = o.memory;
    cfg.seed = o.seed;
    if (o.step > 0.0) cfg.fgm_step = o.step;

    // Gradient-Lipschitz report (m1/m3; no bound is known for m2).
    std::optional<double> safe_cb;
    if (kind != ModelKind::m2) {
        const double anorm = power_iteration(make_projection_operator(geom), 50, o.seed);
        const BNormBounds bounds = bnorm_bound(geom, weights, 1.05 * anorm, o.degree);
        safe_cb = bounds.safe_bound;
        std::printf("lipschitz: |A| ~ %.6g, |B| bounds paper %.6g / safe %.6g\n", anorm,
                    bounds.paper_bound, bounds.safe_bound);
    }
    const std::unique_ptr<ObjectiveModel> model =
        make_model(kind, geom, weights, meas, safe_cb, o.degree);
    if (const auto L = model->lipschitz_bound()) {
        std::printf("lipschitz: L_%s = %.6g (FGM step 1/L = %.6g, cap 2/L = %.6g)\n",
                    o.model.c_str(), *L, 1.0 / *L, 2.0 / *L);
        if (algo == Algorithm::fgm && !cfg.fgm_step) cfg.fgm_step = 1.0 / *L;
    }
    if (algo == Algorithm::fgm && !cfg.fgm_step)
        throw std::invalid_argument(
            "reconstruct: fgm on this model has no Lipschitz bound; pass --step explicitly");

    const auto [T, d] = compute_transmission_darkfield(meas.a_s, meas.b_s, meas.a_r, meas.b_r);

    OptimResult res;
    const std::string tag = o.model + "_" + algo_name;
    if (algo == Algorithm::cgls) {
        std::vector<double> rhs(d.size());
        for (std::size_t i = 0; i < d.size(); ++i) rhs[i] = -std::log(d[i]);
        res = cgls(make_axdt_operator(geom, weights, o.degree), rhs, cfg);
    } else {
        std::vector<double> x0(model->dim(), 0.0);
        if (kind == ModelKind::m2) {
            // Attenuation warm start from the transmission channel.
            std::vector<double> rhs_mu(T.size());
            for (std::size_t i = 0; i < T.size(); ++i) rhs_mu[i] = -std::log(T[i]);
            OptimizerConfig mu_cfg;
            mu_cfg.algorithm = Algorithm::cgls;
            mu_cfg.max_iters = o.mu_iters;
            const OptimResult mu_res = cgls(make_projection_operator(geom), rhs_mu, mu_cfg);
            std::copy(mu_res.x.begin(), mu_res.x.end(), x0.begin());
            std::printf("reconstruct: attenuation warm start, %d cgls iterations, loss %.6g\n",
                        o.mu_iters, mu_res.final_loss);
        }
        res = run_optimizer(*model, x0, cfg);
    }

    write_convergence_csv(out / ("convergence_" + tag + ".csv"), res.log);
    const std::size_t nv = geom.grid.voxel_count();
    CoefficientVolume eta(geom.grid, o.degree);
    if (kind == ModelKind::m2) {
        ScalarVolume mu(geom.grid);
        std::copy(res.x.begin(), res.x.begin() + static_cast<std::ptrdiff_t>(nv),
                  mu.values.begin());
        std::copy(res.x.begin() + static_cast<std::ptrdiff_t>(nv), res.x.end(),
                  eta.values.begin());
        write_scalar_volume(out / ("mu_" + tag), mu);
    } else {
        std::copy(res.x.begin(), res.x.end(), eta.values.begin());
    }
    write_coefficient_volume(out / ("eta_" + tag), eta);
    std::printf("reconstruct: %s, %zu iterations, loss %.9g -> %.9g, status %s\n", tag.c_str(),
                res.log.records.size(), res.initial_loss, res.final_loss,
                to_string(res.log.status));
    if (!res.log.message.empty()) std::printf("reconstruct: %s\n", res.log.message.c_str());
    if (res.log.status == RunStatus::diverged || res.log.status == RunStatus::aborted)
        throw DivergenceError("reconstruct: optimizer failed (" + res.log.message +
                              "); partial outputs were written");
}

struct ExtractOpts {
    std::string eta;
    std::string out;
    double threshold = 0.0;
    int level = 4;
};

void run_extract(const ExtractOpts& o) {
    const fs::path stem(o.eta);
    const CoefficientVolume eta = read_coefficient_volume(stem);
    const SphereGrid eval_grid = sphere_grid(o.level);
    const FiberField field = extract_fiber_field(eta, eval_grid, o.threshold);
    const ScalarVolume strength = strength_volume(eta);
    const fs::path outdir = o.out.empty() ? stem.parent_path() : fs::path(o.out);
    fs::create_directories(outdir);
    const std::string tag = stem.filename().string();
    write_scalar_volume(outdir / ("strength_" + tag), strength);
    const fs::path csv = outdir / ("fibers_" + tag + ".csv");
    write_fiber_csv(csv, field);

    const VolumeStats all = volume_stats(strength.values);
    std::printf("extract: %zu/%zu voxels masked in (threshold %.6g, sphere level %d)\n",
                field.n_masked_in(), field.mask.size(), o.threshold, o.level);
    std::printf("stats: region=full count=%zu mean=%.9g variance=%.9g q95=%.9g\n", all.count,
                all.mean, all.variance, all.q95);
    std::ofstream app(csv, std::ios::app);
    app << "# region,count,mean,variance,q95\n";
    char buf[256];
    std::snprintf(buf, sizeof buf, "# full,%zu,%.17g,%.17g,%.17g\n", all.count, all.mean,
                  all.variance, all.q95);
    app << buf;
    if (field.n_masked_in() == 0) {
        std::fprintf(stderr, "warning: fiber mask is empty (threshold too high?)\n");
    } else {
        const VolumeStats sel = volume_stats(strength.values, field.mask);
        std::printf("stats: region=mask count=%zu mean=%.9g variance=%.9g q95=%.9g\n", sel.count,
                    sel.mean, sel.variance, sel.q95);
        std::snprintf(buf, sizeof buf, "# mask,%zu,%.17g,%.17g,%.17g\n", sel.count, sel.mean,
                      sel.variance, sel.q95);
        app << buf;
    }
    std::printf("extract: wrote %s\n", csv.string().c_str());
}

struct StatsOpts {
    std::string volume;
    std::string mask;
    std::string out;
};

void run_stats(const StatsOpts& o) {
    const ScalarVolume vol = read_scalar_volume(o.volume);
    std::vector<std::pair<std::string, VolumeStats>> rows;
    rows.emplace_back("full", volume_stats(vol.values));
    if (!o.mask.empty()) {
        const ScalarVolume mask = read_scalar_volume(o.mask);
        if (!(mask.grid == vol.grid))
            throw std::invalid_argument("stats: mask grid does not match volume grid");
        std::vector<std::uint8_t> sel(mask.values.size());
        std::size_t n_sel = 0;
        for (std::size_t i = 0; i < sel.size(); ++i) n_sel += sel[i] = mask.values[i] != 0.0;
        if (n_sel == 0) throw std::invalid_argument("stats: segmentation mask is empty");
        rows.emplace_back("mask", volume_stats(vol.values, sel));
    }
    std::string report = "region,count,mean,variance,q95\n";
    char buf[256];
    for (const auto& [name, st] : rows) {
        std::snprintf(buf, sizeof buf, "%s,%zu,%.17g,%.17g,%.17g\n", name.c_str(), st.count,
                      st.mean, st.variance, st.q95);
        report += buf;
    }
    std::fputs(report.c_str(), stdout);
    if (!o.out.empty()) {
        std::ofstream f(o.out);
        if (!f) throw std::runtime_error("stats: cannot open " + o.out);
        f << report;
    }
}

struct BenchOpts {
    std::string data;
    int iters = 50;
    int degree = 4;
    std::uint64_t seed = 0;
    std::string out;
};

void run_bench(const BenchOpts& o) {
    const fs::path data(o.data);
    const AcquisitionGeometry geom = read_geometry(data / "geometry.txt");
    if (!fs::exists(data / "meas.json"))
        throw std::invalid_argument("bench-lipschitz: no measurements in " + o.data +
                                    " (run simulate first)");
    const MeasurementSet meas = read_measurement_set(data / "meas");
    const WeightTable weights = cached_weights(geom, o.degree, data);
    const double anorm = power_iteration(make_projection_operator(geom), o.iters, o.seed);
    const double bnorm =
        power_iteration(make_axdt_operator(geom, weights, o.degree), o.iters, o.seed);
    const BNormBounds bounds = bnorm_bound(geom, weights, 1.05 * anorm, o.degree);
    const M3Objective m3(geom, weights, meas, bounds.safe_bound, o.degree);
    const double l_m1 = bounds.safe_bound * bounds.safe_bound;
    const double l_m3 = m3.lipschitz_bound().value();
    std::string report;
    char buf[160];
    const auto line = [&](const char* key, double v, const char* note) {
        std::snprintf(buf, sizeof buf, "%-22s %.9g%s\n", key, v, note);
        report += buf;
    };
    line("|A| estimate", anorm, "  (power iteration)");
    line("|B| estimate", bnorm, "  (power iteration)");
    line("|B| paper bound", bounds.paper_bound,
         bnorm <= bounds.paper_bound ? "  (holds)" : "  (VIOLATED by estimate)");
    line("|B| safe bound", bounds.safe_bound,
         bnorm <= bounds.safe_bound ? "  (holds)" : "  (VIOLATED by estimate)");
    line("L_m1", l_m1, "  (safe bound squared)");
    line("L_m3", l_m3, "");
    line("fgm step 1/L_m1", 1.0 / l_m1, "");
    line("fgm step 1/L_m3", 1.0 / l_m3, "");
    std::fputs(report.c_str(), stdout);
    if (!o.out.empty()) {
        std::ofstream f(o.out);
        if (!f) throw std::runtime_error("bench-lipschitz: cannot open " + o.out);
        f << report;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "Anisotropic dark-field tomography toolkit.\n"
        "Thread count is capped by the AXDT_THREADS environment variable."};
    app.set_config("--config", "", "Read options from an INI file ([section] per subcommand)");
    app.require_subcommand(1);

    SimulateOpts so;
    CLI::App* sim = app.add_subcommand("simulate", "Generate a phantom and phase-stepping data");
    sim->add_option("--out", so.out, "Output directory")->required();
    sim->add_option("--size", so.size, "Cubic volume size in voxels");
    sim->add_option("--spacing", so.spacing, "Voxel spacing");
    sim->add_option("--rod-radius", so.rod_radius, "Rod radius (0 = 0.14 x volume extent)");
    sim->add_option("--angle", so.angle, "Crossing angle between the rods, degrees");
    sim->add_option("--eps-iso", so.eps_iso, "Isotropic scattering level");
    sim->add_option("--eps-aniso", so.eps_aniso, "Anisotropic scattering level");
    sim->add_option("--mu", so.mu, "Attenuation inside the rods");
    sim->add_option("--poses", so.poses, "Number of acquisition poses");
    sim->add_option("--det-size", so.det_size, "Detector rows = cols (0 = cover the volume)");
    sim->add_option("--pitch", so.pitch, "Detector pixel pitch (0 = voxel spacing)");
    sim->add_option("--n-steps", so.n_steps, "Phase steps per scan");
    sim->add_option("--a0", so.a0, "Reference mean intensity");
    sim->add_option("--alpha0", so.alpha0, "Reference visibility, in (0, 1)");
    sim->add_flag("--no-noise", so.no_noise, "Disable measurement noise");
    sim->add_option("--seed", so.seed, "Noise seed");
    sim->add_option("--degree", so.degree, "Maximum even harmonic degree");
    sim->callback([&] { run_simulate(so); });

    ReconstructOpts ro;
    CLI::App* rec = app.add_subcommand("reconstruct", "Reconstruct scattering coefficients");
    rec->add_option("--data", ro.data, "Directory with geometry.txt and meas.{json,raw}")
        ->required();
    rec->add_option("--out", ro.out, "Output directory (default: the data directory)");
    rec->add_option("--model", ro.model, "Objective: m1, m2, or m3");
    rec->add_option("--algorithm", ro.algorithm,
                    "cgls, nlcg, lbfgs, or fgm (default: cgls for m1, lbfgs otherwise)");
    rec->add_option("--line-search", ro.line_search, "nr or bb");
    rec->add_option("--iters", ro.iters, "Iteration budget");
    rec->add_option("--grad-tol", ro.grad_tol, "Relative gradient-norm stop");
    rec->add_option("--ls-iters", ro.ls_iters, "Newton-Raphson line-search iterations");
    rec->add_option("--memory", ro.memory, "L-BFGS history size");
    rec->add_option("--step", ro.step, "FGM step size (0 = 1/L when a bound exists)");
    rec->add_option("--mu-iters", ro.mu_iters, "CGLS iterations for the m2 attenuation start");
    rec->add_option("--degree", ro.degree, "Maximum even harmonic degree");
    rec->add_option("--seed", ro.seed, "Seed for spectral-norm estimation");
    rec->callback([&] { run_reconstruct(ro); });

    ExtractOpts eo;
    CLI::App* ext = app.add_subcommand("extract", "Extract fiber directions from coefficients");
    ext->add_option("--eta", eo.eta, "Coefficient volume stem (e.g. out/eta_m1_cgls)")->required();
    ext->add_option("--out", eo.out, "Output directory (default: next to the input)");
    ext->add_option("--threshold", eo.threshold, "Scattering-strength mask threshold");
    ext->add_option("--level", eo.level, "Icosphere subdivision level for maxima search");
    ext->callback([&] { run_extract(eo); });

    StatsOpts to;
    CLI::App* sta = app.add_subcommand("stats", "Mean/variance/q95 of a scalar volume");
    sta->add_option("--volume", to.volume, "Scalar volume stem")->required();
    sta->add_option("--mask", to.mask, "Segmentation volume stem (nonzero = included)");
    sta->add_option("--out", to.out, "Also write the report CSV here");
    sta->callback([&] { run_stats(to); });

    BenchOpts bo;
    CLI::App* ben = app.add_subcommand("bench-lipschitz", "Operator norms and gradient bounds");
    ben->add_option("--data", bo.data, "Directory with geometry.txt and meas.{json,raw}")
        ->required();
    ben->add_option("--iters", bo.iters, "Power iterations");
    ben->add_option("--degree", bo.degree, "Maximum even harmonic degree");
    ben->add_option("--seed", bo.seed, "Seed for spectral-norm estimation");
    ben->add_option("--out", bo.out, "Also write the report here");
    ben->callback([&] { run_bench(bo); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const DivergenceError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::domain_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 0;
}
