// SPDX-License-Identifier: Apache-2.0
//
// Release gate. Runs ten self-contained checks that exercise the toolkit end
// to end: operator adjoints, analytic gradients, special functions, Lipschitz
// bounds, the frozen-attenuation model identity, noiseless reconstruction,
// noise robustness, optimizer ranking, Funk-Radon factors and the simulator
// statistics. Prints one [PASS]/[FAIL] line per check and exits nonzero if
// any check fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <axdt/fiber.hpp>
#include <axdt/models.hpp>
#include <axdt/optim.hpp>
#include <axdt/projector.hpp>
#include <axdt/simulate.hpp>
#include <axdt/specfun.hpp>
#include <axdt/sphharm.hpp>

#include "support/oracles.hpp"

using axdt::Vec3;

namespace {

struct Outcome {
    bool ok = false;
    std::string detail;
};

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list args;
    va_start(args, f);
    std::vsnprintf(buf, sizeof buf, f, args);
    va_end(args);
    return buf;
}

double now_s() {
    using clock = std::chrono::steady_clock;
    static const clock::time_point t0 = clock::now();
    return std::chrono::duration<double>(clock::now() - t0).count();
}

std::vector<double> random_vector(std::size_t n, double scale, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-scale, scale);
    std::vector<double> v(n);
    for (double& x : v) x = u(rng);
    return v;
}

std::vector<double> random_unit(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    std::vector<double> v(n);
    double nn = 0.0;
    for (double& x : v) {
        x = g(rng);
        nn += x * x;
    }
    nn = std::sqrt(nn);
    for (double& x : v) x /= nn;
    return v;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

struct Scene {
    axdt::VolumeGrid grid;
    axdt::AcquisitionGeometry geom;
    axdt::WeightTable weights;
};

// Cubic volume of `size` voxels per edge at unit spacing, `n_poses` poses on
// the covering sphere and a square detector wide enough for the diagonal.
Scene make_scene(int size, int n_poses) {
    Scene s;
    s.grid = axdt::VolumeGrid::centered({size, size, size}, Vec3::Constant(1.0));
    const int det = static_cast<int>(std::ceil(std::sqrt(3.0) * size)) + 2;
    axdt::DetectorSpec spec;
    spec.rows = det;
    spec.cols = det;
    spec.pitch = 1.0;
    s.geom = axdt::sphere_covering_geometry(n_poses, spec, s.grid);
    s.weights = axdt::compute_all_pose_weights(s.geom, axdt::gauss_legendre_sphere_grid(16), 4);
    return s;
}

axdt::LinearOperator hessian_operator(const axdt::ObjectiveModel& model,
                                      std::vector<double> point) {
    axdt::LinearOperator op;
    op.domain_dim = model.dim();
    op.range_dim = model.dim();
    auto x = std::make_shared<std::vector<double>>(std::move(point));
    op.apply = [&model, x](std::span<const double> v, std::span<double> y) {
        model.hessvec(*x, v, y);
    };
    op.apply_adjoint = op.apply;  // the Hessian is symmetric
    return op;
}

std::vector<double> neg_log_darkfield(const axdt::MeasurementSet& meas) {
    std::vector<double> rhs(meas.n_rays());
    for (std::size_t i = 0; i < rhs.size(); ++i) {
        const double d = (meas.b_s[i] * meas.a_r[i]) / (meas.a_s[i] * meas.b_r[i]);
        rhs[i] = -std::log(d);
    }
    return rhs;
}

std::vector<double> neg_log_transmission(const axdt::MeasurementSet& meas) {
    std::vector<double> rhs(meas.n_rays());
    for (std::size_t i = 0; i < rhs.size(); ++i) rhs[i] = -std::log(meas.a_s[i] / meas.a_r[i]);
    return rhs;
}

// --- check 1: adjoint identities --------------------------------------------

Outcome check_adjoints() {
    const Scene s = make_scene(16, 20);
    const axdt::LinearOperator A = axdt::make_projection_operator(s.geom);
    const axdt::LinearOperator B = axdt::make_axdt_operator(s.geom, s.weights, 4);
    double worst_a = 0.0, worst_b = 0.0;
    for (int t = 0; t < 20; ++t) {
        for (const auto* op : {&A, &B}) {
            const std::uint64_t seed = 1000 + 10 * static_cast<std::uint64_t>(t) +
                                       (op == &B ? 5 : 0);
            const std::vector<double> x = random_vector(op->domain_dim, 1.0, seed);
            const std::vector<double> y = random_vector(op->range_dim, 1.0, seed + 1);
            std::vector<double> ax(op->range_dim), aty(op->domain_dim);
            op->apply(x, ax);
            op->apply_adjoint(y, aty);
            const double lhs = dot(ax, y);
            const double rhs = dot(x, aty);
            const double rel = std::abs(lhs - rhs) / std::max({std::abs(lhs), std::abs(rhs), 1e-30});
            (op == &B ? worst_b : worst_a) = std::max(op == &B ? worst_b : worst_a, rel);
        }
    }
    Outcome o;
    o.ok = worst_a <= 1e-10 && worst_b <= 1e-10;
    o.detail = fmt("worst rel mismatch: attenuation %.3g, dark-field %.3g (tol 1e-10)", worst_a,
                   worst_b);
    return o;
}

// --- check 2: gradients vs central finite differences ------------------------

Outcome check_gradients() {
    const Scene s = make_scene(6, 6);
    const axdt::Phantom ph = axdt::make_crossed_rods_phantom(s.grid, 1.1, 60.0, 0.02, 0.2, 0.02);
    const axdt::MeasurementSet meas =
        axdt::simulate_measurements(ph, s.geom, s.weights, 1e4, 0.3, 8, true, 101).measurements;
    const auto m1 = axdt::make_model(axdt::ModelKind::m1, s.geom, s.weights, meas);
    const auto m2 = axdt::make_model(axdt::ModelKind::m2, s.geom, s.weights, meas);
    const auto m3 = axdt::make_model(axdt::ModelKind::m3, s.geom, s.weights, meas);

    const std::size_t n_mu = s.grid.voxel_count();
    double worst_m1 = 0.0, worst_m2 = 0.0, worst_m3 = 0.0, worst_h3 = 0.0;
    for (int t = 0; t < 10; ++t) {
        const std::uint64_t seed = 4000 + 100 * static_cast<std::uint64_t>(t);
        const std::vector<double> eta = random_vector(m1->dim(), 0.02, seed);
        std::vector<double> x2(m2->dim());
        {
            std::mt19937_64 rng(seed + 1);
            std::uniform_real_distribution<double> umu(0.0, 0.008);
            for (std::size_t i = 0; i < n_mu; ++i) x2[i] = umu(rng);
            std::copy(eta.begin(), eta.end(), x2.begin() + static_cast<std::ptrdiff_t>(n_mu));
        }
        const auto fd_dir = [&](const axdt::ObjectiveModel& m, const std::vector<double>& x,
                                double h, std::uint64_t dseed) {
            const std::vector<double> v = random_unit(m.dim(), dseed);
            std::vector<double> g(m.dim());
            if (!std::isfinite(m.loss_grad(x, g).loss)) return std::numeric_limits<double>::infinity();
            const auto f = [&](const std::vector<double>& p) { return m.loss(p).loss; };
            const double fd = oracle::directional_diff(f, x, v, h);
            return std::abs(dot(g, v) - fd) / std::max(1.0, std::abs(fd));
        };
        worst_m1 = std::max(worst_m1, fd_dir(*m1, eta, 1e-5, seed + 2));
        worst_m2 = std::max(worst_m2, fd_dir(*m2, x2, 1e-4, seed + 3));
        worst_m3 = std::max(worst_m3, fd_dir(*m3, eta, 1e-4, seed + 4));

        // m3 Hessian-vector product against the gradient difference quotient.
        {
            const std::vector<double> v = random_unit(m3->dim(), seed + 5);
            std::vector<double> hv(m3->dim()), gp(m3->dim()), gm(m3->dim());
            m3->hessvec(eta, v, hv);
            const double h = 1e-4;
            std::vector<double> xp = eta, xm = eta;
            for (std::size_t i = 0; i < eta.size(); ++i) {
                xp[i] += h * v[i];
                xm[i] -= h * v[i];
            }
            m3->loss_grad(xp, gp);
            m3->loss_grad(xm, gm);
            double num = 0.0, den = 1.0;
            for (std::size_t i = 0; i < hv.size(); ++i) {
                num = std::max(num, std::abs(hv[i] - (gp[i] - gm[i]) / (2.0 * h)));
                den = std::max(den, std::abs(hv[i]));
            }
            worst_h3 = std::max(worst_h3, num / den);
        }
    }
    Outcome o;
    o.ok = worst_m1 < 1e-6 && worst_m2 < 1e-5 && worst_m3 < 1e-5 && worst_h3 < 1e-5;
    o.detail = fmt("worst rel err: m1 %.3g (tol 1e-6), m2 %.3g, m3 %.3g, m3 hessvec %.3g (tol 1e-5)",
                   worst_m1, worst_m2, worst_m3, worst_h3);
    return o;
}

// --- check 3: special functions and overflow-safe losses ---------------------

Outcome check_specfun() {
    double worst_i0 = 0.0, worst_r = 0.0;
    if (axdt::log_i0(0.0) != 0.0 || axdt::bessel_ratio(0.0) != 0.0)
        return {false, "nonzero value at x = 0"};
    const int n = 9999;
    for (int i = 0; i < n; ++i) {
        const double x = std::pow(10.0, -6.0 + 12.0 * i / (n - 1.0));
        worst_i0 = std::max(worst_i0, oracle::rel_err(axdt::log_i0(x), oracle::log_i0(x)));
        worst_r = std::max(worst_r, oracle::rel_err(axdt::bessel_ratio(x), oracle::bessel_ratio(x)));
    }

    // Loss and gradient stay finite when the Bessel argument is huge.
    const axdt::VolumeGrid grid = axdt::VolumeGrid::centered({1, 1, 1}, Vec3::Constant(1.0));
    axdt::DetectorSpec det;
    det.rows = 1;
    det.cols = 1;
    det.pitch = 2.0;
    const axdt::AcquisitionGeometry geom = axdt::sphere_covering_geometry(1, det, grid);
    const axdt::WeightTable weights =
        axdt::compute_all_pose_weights(geom, axdt::gauss_legendre_sphere_grid(16), 4);
    axdt::MeasurementSet meas;
    meas.n_poses = 1;
    meas.rows = 1;
    meas.cols = 1;
    meas.n_steps = 16;
    meas.a_r = {1e8};
    meas.b_r = {3e7};
    meas.a_s = {9e7};
    meas.b_s = {2.5e7};
    const double alpha = meas.b_r[0] / meas.a_r[0];
    const double z = 0.5 * 16 * meas.b_s[0] * alpha;  // dark-field forward is 0 at x = 0
    const auto m2 = axdt::make_model(axdt::ModelKind::m2, geom, weights, meas);
    const auto m3 = axdt::make_model(axdt::ModelKind::m3, geom, weights, meas);
    bool finite = true;
    for (const auto* m : {m2.get(), m3.get()}) {
        std::vector<double> x(m->dim(), 0.0), g(m->dim());
        const axdt::EvalResult ev = m->loss_grad(x, g);
        finite = finite && std::isfinite(ev.loss);
        for (double v : g) finite = finite && std::isfinite(v);
    }
    Outcome o;
    o.ok = worst_i0 <= 1e-10 && worst_r <= 1e-10 && finite && z >= 1e3;
    o.detail = fmt("worst rel err: log I0 %.3g, I1/I0 %.3g (tol 1e-10); losses finite at z = %.3g: %s",
                   worst_i0, worst_r, z, finite ? "yes" : "NO");
    return o;
}

// --- check 4: operator norm and curvature bounds ------------------------------

Outcome check_lipschitz() {
    const Scene s = make_scene(12, 12);
    const axdt::LinearOperator A = axdt::make_projection_operator(s.geom);
    const axdt::LinearOperator B = axdt::make_axdt_operator(s.geom, s.weights, 4);
    const double anorm_est = axdt::power_iteration(A, 100, 5);
    const axdt::BNormBounds bounds = axdt::bnorm_bound(s.geom, s.weights, 1.05 * anorm_est, 4);
    const double bnorm_est = axdt::power_iteration(B, 100, 6);
    const bool b_safe = bnorm_est <= bounds.safe_bound;
    const bool b_paper = bnorm_est <= bounds.paper_bound;

    const axdt::Phantom ph = axdt::make_crossed_rods_phantom(s.grid, 1.6, 60.0, 0.02, 0.2, 0.02);
    const axdt::MeasurementSet meas =
        axdt::simulate_measurements(ph, s.geom, s.weights, 1e4, 0.3, 8, false, 0).measurements;
    const auto m1 = axdt::make_model(axdt::ModelKind::m1, s.geom, s.weights, meas,
                                     bounds.safe_bound);
    const auto m3 = axdt::make_model(axdt::ModelKind::m3, s.geom, s.weights, meas,
                                     bounds.safe_bound);
    const double l_m1 = m1->lipschitz_bound().value();
    const double l_m3 = m3->lipschitz_bound().value();

    const double h1 = axdt::power_iteration(hessian_operator(*m1, std::vector<double>(m1->dim())),
                                            60, 7);
    bool m3_ok = true;
    double worst_ratio = 0.0;
    for (int t = 0; t < 20; ++t) {
        const std::vector<double> eta = random_vector(m3->dim(), 0.02,
                                                      7000 + static_cast<std::uint64_t>(t));
        const double h3 = axdt::power_iteration(hessian_operator(*m3, eta), 40,
                                                900 + static_cast<std::uint64_t>(t));
        worst_ratio = std::max(worst_ratio, h3 / l_m3);
        m3_ok = m3_ok && h3 <= l_m3;
    }
    Outcome o;
    o.ok = b_safe && h1 <= l_m1 && m3_ok;
    o.detail = fmt("|B| %.4g vs safe %.4g; paper bound %.4g %s; |H_m1|/L_m1 %.3f; "
                   "max |H_m3|/L_m3 %.3f over 20 points",
                   bnorm_est, bounds.safe_bound, bounds.paper_bound,
                   b_paper ? "holds" : "VIOLATED", h1 / l_m1, worst_ratio);
    return o;
}

// --- check 5: frozen-attenuation identity -------------------------------------

Outcome check_identity() {
    const Scene s = make_scene(8, 8);
    const axdt::Phantom ph = axdt::make_crossed_rods_phantom(s.grid, 1.1, 60.0, 0.01, 0.1, 0.0);
    const axdt::MeasurementSet meas =
        axdt::simulate_measurements(ph, s.geom, s.weights, 1e4, 0.3, 10, false, 3).measurements;
    const auto m2 = axdt::make_model(axdt::ModelKind::m2, s.geom, s.weights, meas);
    const auto m3 = axdt::make_model(axdt::ModelKind::m3, s.geom, s.weights, meas);
    const std::size_t n_mu = s.grid.voxel_count();

    // With zero attenuation the measured amplitude equals the reference, so
    // the frozen attenuation block is exactly zero and a_mu == a_s per ray.
    double offset = 0.0;
    const double n_steps = meas.n_steps;
    for (std::size_t i = 0; i < meas.n_rays(); ++i) {
        const double a = meas.a_s[i];
        const double b = meas.b_s[i];
        offset += 1.5 * std::log(a) + 0.25 * n_steps * (4.0 * a * a + b * b) / a;
    }

    double worst_grad = 0.0, worst_const = 0.0;
    for (int t = 0; t < 5; ++t) {
        const std::vector<double> eta = random_vector(m3->dim(), 0.05,
                                                      5000 + static_cast<std::uint64_t>(t));
        std::vector<double> x2(m2->dim(), 0.0);
        std::copy(eta.begin(), eta.end(), x2.begin() + static_cast<std::ptrdiff_t>(n_mu));
        std::vector<double> g2(m2->dim()), g3(m3->dim());
        const double f2 = m2->loss_grad(x2, g2).loss;
        const double f3 = m3->loss_grad(eta, g3).loss;
        double num = 0.0, den = 1.0;
        for (std::size_t i = 0; i < g3.size(); ++i) {
            num = std::max(num, std::abs(g2[n_mu + i] - g3[i]));
            den = std::max(den, std::abs(g3[i]));
        }
        worst_grad = std::max(worst_grad, num / den);
        worst_const = std::max(worst_const, std::abs((f2 - f3) - offset) / std::abs(offset));
    }
    Outcome o;
    o.ok = worst_grad <= 1e-12 && worst_const <= 1e-10;
    o.detail = fmt("eta-gradient rel gap %.3g (tol 1e-12); loss offset drift %.3g rel (tol 1e-10)",
                   worst_grad, worst_const);
    return o;
}

// --- check 6: noiseless reconstruction recovers the rods ----------------------

Outcome check_noiseless_recon() {
    const double t0 = now_s();
    const Scene s = make_scene(32, 60);
    const axdt::Phantom ph =
        axdt::make_crossed_rods_phantom(s.grid, 0.14 * 32.0, 60.0, 0.05, 0.5, 0.02);
    const axdt::MeasurementSet meas =
        axdt::simulate_measurements(ph, s.geom, s.weights, 1e4, 0.3, 8, false, 1).measurements;

    const axdt::LinearOperator B = axdt::make_axdt_operator(s.geom, s.weights, 4);
    const std::vector<double> rhs = neg_log_darkfield(meas);
    axdt::OptimizerConfig cfg;
    cfg.algorithm = axdt::Algorithm::cgls;
    cfg.max_iters = 500;
    cfg.grad_tol = 0.0;
    const axdt::OptimResult res = axdt::cgls(B, rhs, cfg, 1e-3);

    std::vector<double> bx(B.range_dim);
    B.apply(res.x, bx);
    double rr = 0.0;
    for (std::size_t i = 0; i < bx.size(); ++i) rr += (bx[i] - rhs[i]) * (bx[i] - rhs[i]);
    const double rel_res = std::sqrt(rr) / norm2(rhs);

    axdt::CoefficientVolume eta(s.grid, 4);
    std::copy(res.x.begin(), res.x.end(), eta.values.begin());
    const axdt::FiberField field = axdt::extract_fiber_field(eta, axdt::sphere_grid(4));

    // Core rod voxels: inside the rods with the full 26-neighbourhood inside.
    const auto& dims = s.grid.dims;
    const auto idx = [&](int x, int y, int z) {
        return (static_cast<std::size_t>(z) * dims[1] + y) * dims[0] + x;
    };
    std::size_t n_core = 0, n_good = 0;
    const double cos_tol = std::cos(10.0 * std::numbers::pi / 180.0);
    for (int z = 1; z + 1 < dims[2]; ++z)
        for (int y = 1; y + 1 < dims[1]; ++y)
            for (int x = 1; x + 1 < dims[0]; ++x) {
                if (!ph.has_fiber[idx(x, y, z)]) continue;
                bool core = true;
                for (int dz = -1; dz <= 1 && core; ++dz)
                    for (int dy = -1; dy <= 1 && core; ++dy)
                        for (int dx = -1; dx <= 1 && core; ++dx)
                            core = ph.has_fiber[idx(x + dx, y + dy, z + dz)];
                if (!core) continue;
                ++n_core;
                const std::size_t v = idx(x, y, z);
                const double align = std::abs(field.direction[v].dot(ph.fiber_gt[v]));
                if (align >= cos_tol) ++n_good;
            }
    const double frac = n_core ? static_cast<double>(n_good) / static_cast<double>(n_core) : 0.0;
    const double elapsed = now_s() - t0;
    Outcome o;
    o.ok = rel_res < 1e-3 && static_cast<int>(res.log.records.size()) <= 500 && n_core > 0 &&
           frac >= 0.90 && elapsed < 1800.0;
    o.detail = fmt("rel residual %.3g in %zu iters; %zu/%zu core voxels within 10 deg (%.1f%%); "
                   "%.0f s",
                   rel_res, res.log.records.size(), n_good, n_core, 100.0 * frac, elapsed);
    return o;
}

// --- checks 7 and 8 share the noisy mid-size problem --------------------------

struct NoisySetup {
    Scene scene;
    axdt::Phantom phantom;
    double bnorm_safe = 0.0;
};

NoisySetup make_noisy_setup() {
    NoisySetup n{make_scene(20, 40),
                 axdt::make_crossed_rods_phantom(
                     axdt::VolumeGrid::centered({20, 20, 20}, Vec3::Constant(1.0)), 0.14 * 20.0,
                     60.0, 0.2, 2.0, 0.02),
                 0.0};
    const double anorm = axdt::power_iteration(axdt::make_projection_operator(n.scene.geom), 60, 11);
    n.bnorm_safe = axdt::bnorm_bound(n.scene.geom, n.scene.weights, 1.05 * anorm, 4).safe_bound;
    return n;
}

axdt::MeasurementSet simulate_noisy(const NoisySetup& n, std::uint64_t seed) {
    return axdt::simulate_measurements(n.phantom, n.scene.geom, n.scene.weights, 1e4, 0.3, 8, true,
                                       seed)
        .measurements;
}

std::vector<double> warm_start_mu(const NoisySetup& n, const axdt::MeasurementSet& meas) {
    const axdt::LinearOperator A = axdt::make_projection_operator(n.scene.geom);
    axdt::OptimizerConfig cfg;
    cfg.algorithm = axdt::Algorithm::cgls;
    cfg.max_iters = 50;
    cfg.grad_tol = 1e-10;
    return axdt::cgls(A, neg_log_transmission(meas), cfg).x;
}

axdt::OptimizerConfig smooth_config(axdt::Algorithm alg, axdt::LineSearch ls, int iters,
                                    std::optional<double> step = std::nullopt) {
    axdt::OptimizerConfig cfg;
    cfg.algorithm = alg;
    cfg.line_search = ls;
    cfg.max_iters = iters;
    cfg.grad_tol = 0.0;
    cfg.fgm_step = step;
    return cfg;
}

double background_strength_variance(const NoisySetup& n, const axdt::CoefficientVolume& eta) {
    const axdt::ScalarVolume strength = axdt::strength_volume(eta);
    std::vector<std::uint8_t> bg(n.phantom.has_fiber.size());
    for (std::size_t i = 0; i < bg.size(); ++i) bg[i] = n.phantom.has_fiber[i] ? 0 : 1;
    return axdt::volume_stats(strength.values, bg).variance;
}

Outcome check_noise_robustness(const NoisySetup& n) {
    const int iters = 100;
    std::string detail;
    bool ok = true;
    for (std::uint64_t seed : {1, 2, 3}) {
        const axdt::MeasurementSet meas = simulate_noisy(n, seed);

        axdt::OptimizerConfig c1;
        c1.algorithm = axdt::Algorithm::cgls;
        c1.max_iters = iters;
        c1.grad_tol = 1e-12;
        const axdt::LinearOperator B = axdt::make_axdt_operator(n.scene.geom, n.scene.weights, 4);
        const axdt::OptimResult r1 = axdt::cgls(B, neg_log_darkfield(meas), c1);
        axdt::CoefficientVolume eta1(n.scene.grid, 4);
        std::copy(r1.x.begin(), r1.x.end(), eta1.values.begin());
        const double v1 = background_strength_variance(n, eta1);

        const auto m2 = axdt::make_model(axdt::ModelKind::m2, n.scene.geom, n.scene.weights, meas);
        std::vector<double> x2(m2->dim(), 0.0);
        const std::vector<double> mu0 = warm_start_mu(n, meas);
        std::copy(mu0.begin(), mu0.end(), x2.begin());
        const axdt::OptimResult r2 = axdt::run_optimizer(
            *m2, x2, smooth_config(axdt::Algorithm::lbfgs, axdt::LineSearch::newton_raphson, iters));
        axdt::CoefficientVolume eta2(n.scene.grid, 4);
        std::copy(r2.x.begin() + static_cast<std::ptrdiff_t>(n.scene.grid.voxel_count()),
                  r2.x.end(), eta2.values.begin());
        const double v2 = background_strength_variance(n, eta2);

        const auto m3 = axdt::make_model(axdt::ModelKind::m3, n.scene.geom, n.scene.weights, meas,
                                         n.bnorm_safe);
        const std::vector<double> x3(m3->dim(), 0.0);
        const axdt::OptimResult r3 = axdt::run_optimizer(
            *m3, x3, smooth_config(axdt::Algorithm::lbfgs, axdt::LineSearch::newton_raphson, iters));
        axdt::CoefficientVolume eta3(n.scene.grid, 4);
        std::copy(r3.x.begin(), r3.x.end(), eta3.values.begin());
        const double v3 = background_strength_variance(n, eta3);

        const bool seed_ok = v2 < 0.8 * v1 && v3 < 0.8 * v1;
        ok = ok && seed_ok;
        detail += fmt("%sseed %llu: var m1 %.3g, m2 %.3g (%.0f%%), m3 %.3g (%.0f%%)",
                      detail.empty() ? "" : "; ", static_cast<unsigned long long>(seed), v1, v2,
                      100.0 * v2 / v1, v3, 100.0 * v3 / v1);
    }
    return {ok, detail + " (need < 80%)"};
}

Outcome check_optimizers(const NoisySetup& n) {
    const int iters = 40;
    const axdt::MeasurementSet meas = simulate_noisy(n, 1);
    const auto m2 = axdt::make_model(axdt::ModelKind::m2, n.scene.geom, n.scene.weights, meas);
    const auto m3 = axdt::make_model(axdt::ModelKind::m3, n.scene.geom, n.scene.weights, meas,
                                     n.bnorm_safe);
    const double l_m3 = m3->lipschitz_bound().value();

    const auto finite_or_inf = [](double v) {
        return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
    };
    std::string detail;
    bool ok = true;
    for (const auto* m : {m2.get(), m3.get()}) {
        std::vector<double> x0(m->dim(), 0.0);
        if (m == m2.get()) {
            const std::vector<double> mu0 = warm_start_mu(n, meas);
            std::copy(mu0.begin(), mu0.end(), x0.begin());
        }
        // The statistical model carries no curvature bound; reuse the
        // simplified model's step for its gradient method run.
        const double lb = finite_or_inf(
            axdt::run_optimizer(*m, x0,
                                smooth_config(axdt::Algorithm::lbfgs,
                                              axdt::LineSearch::newton_raphson, iters))
                .final_loss);
        const double nr = finite_or_inf(
            axdt::run_optimizer(*m, x0,
                                smooth_config(axdt::Algorithm::nlcg,
                                              axdt::LineSearch::newton_raphson, iters))
                .final_loss);
        const double bb = finite_or_inf(
            axdt::run_optimizer(*m, x0,
                                smooth_config(axdt::Algorithm::nlcg,
                                              axdt::LineSearch::barzilai_borwein, iters))
                .final_loss);
        const double fg = finite_or_inf(
            axdt::run_optimizer(*m, x0,
                                smooth_config(axdt::Algorithm::fgm, axdt::LineSearch::none, iters,
                                              1.0 / l_m3))
                .final_loss);
        const bool lowest = lb < nr && lb < bb && lb < fg;
        ok = ok && lowest;
        detail += fmt("%s%s: lbfgs %.6g vs nlcg-nr %.6g, nlcg-bb %.6g, fgm %.6g%s",
                      detail.empty() ? "" : "; ", m->kind().c_str(), lb, nr, bb, fg,
                      lowest ? "" : " (NOT lowest)");
    }

    // The linear solver must decrease its quadratic loss monotonically.
    axdt::OptimizerConfig c1;
    c1.algorithm = axdt::Algorithm::cgls;
    c1.max_iters = 100;
    c1.grad_tol = 1e-12;
    const axdt::LinearOperator B = axdt::make_axdt_operator(n.scene.geom, n.scene.weights, 4);
    const axdt::OptimResult r1 = axdt::cgls(B, neg_log_darkfield(meas), c1);
    bool monotone = true;
    for (std::size_t k = 1; k < r1.log.records.size(); ++k)
        monotone = monotone && r1.log.records[k].loss <=
                                   r1.log.records[k - 1].loss +
                                       1e-12 * std::max(1.0, std::abs(r1.log.records[k - 1].loss));
    ok = ok && monotone;

    // An oversized gradient step must be caught by the divergence detector.
    // The certified bound overestimates the curvature by orders of magnitude,
    // so steps just above 2/L stay stable in practice; size the probe against
    // the measured curvature at the start point instead.
    std::vector<double> x3(m3->dim(), 0.0);
    const double h3 = axdt::power_iteration(hessian_operator(*m3, x3), 60, 3);
    const double probe = 1e4 / h3;
    const axdt::OptimResult rdiv = axdt::run_optimizer(
        *m3, x3, smooth_config(axdt::Algorithm::fgm, axdt::LineSearch::none, 500, probe));
    const bool diverged = rdiv.log.status == axdt::RunStatus::diverged;
    ok = ok && diverged;
    detail += fmt("; cgls monotone: %s; fgm step %.3g (vs 2/L %.3g, 2/|H| %.3g) diverged: %s",
                  monotone ? "yes" : "NO", probe, 2.0 / l_m3, 2.0 / h3, diverged ? "yes" : "NO");
    return {ok, detail};
}

// --- check 9: Funk-Radon factors vs great-circle quadrature -------------------

Outcome check_funk_radon() {
    double worst = 0.0;
    std::mt19937_64 rng(99);
    std::normal_distribution<double> g;
    for (int t = 0; t < 10; ++t) {
        Vec3 pole(g(rng), g(rng), g(rng));
        pole.normalize();
        int c = 0;
        for (int k = 0; k <= 4; k += 2)
            for (int m = -k; m <= k; ++m, ++c) {
                std::vector<double> coeffs(15, 0.0);
                coeffs[static_cast<std::size_t>(c)] = 1.0;
                const std::vector<double> fr = axdt::funk_radon(coeffs, 4);
                const double got = fr[static_cast<std::size_t>(c)] * oracle::real_sh(k, m, pole);
                const double want = oracle::great_circle_integral(k, m, pole, 64);
                worst = std::max(worst, std::abs(got - want));
            }
    }
    Outcome o;
    o.ok = worst <= 1e-8;
    o.detail = fmt("worst abs gap %.3g over degrees 0/2/4 at 10 poles (tol 1e-8)", worst);
    return o;
}

// --- check 10: simulator statistics -------------------------------------------

Outcome check_noise_stats() {
    const axdt::VolumeGrid grid = axdt::VolumeGrid::centered({1, 1, 1}, Vec3::Constant(1.0));
    axdt::DetectorSpec det;
    det.rows = 320;
    det.cols = 320;
    det.pitch = 0.05;
    const axdt::AcquisitionGeometry geom = axdt::sphere_covering_geometry(1, det, grid);
    const axdt::WeightTable weights =
        axdt::compute_all_pose_weights(geom, axdt::gauss_legendre_sphere_grid(16), 4);
    axdt::Phantom empty;
    empty.mu_gt = axdt::ScalarVolume(grid);
    empty.eta_gt = axdt::CoefficientVolume(grid, 4);
    empty.fiber_gt.assign(grid.voxel_count(), Vec3::Zero());
    empty.has_fiber.assign(grid.voxel_count(), 0);

    const double a0 = 1e4, alpha0 = 0.3;
    const int n_steps = 8;
    const axdt::MeasurementSet meas =
        axdt::simulate_measurements(empty, geom, weights, a0, alpha0, n_steps, true, 2026)
            .measurements;
    const std::size_t n = meas.n_rays();

    double mean_a = 0.0;
    for (double v : meas.a_s) mean_a += v;
    mean_a /= static_cast<double>(n);
    double var_a = 0.0;
    for (double v : meas.a_s) var_a += (v - mean_a) * (v - mean_a);
    var_a /= static_cast<double>(n);
    const double var_want = a0 / n_steps;

    double mean_half_b = 0.0;
    for (double v : meas.b_s) mean_half_b += 0.5 * v;
    mean_half_b /= static_cast<double>(n);
    const double nu = 0.5 * a0 * alpha0;
    const double sigma = std::sqrt(a0 / (2.0 * n_steps));
    const double mean_want = oracle::rician_mean_quadrature(nu, sigma);

    const double var_gap = std::abs(var_a - var_want) / var_want;
    const double mean_gap = std::abs(mean_half_b - mean_want) / mean_want;
    Outcome o;
    o.ok = n >= 100000 && var_gap <= 0.02 && mean_gap <= 0.005;
    o.detail = fmt("n %zu; var(a_s) %.1f vs %.1f (gap %.2f%%, tol 2%%); Rician mean %.3f vs %.3f "
                   "(gap %.3f%%, tol 0.5%%)",
                   n, var_a, var_want, 100.0 * var_gap, mean_half_b, mean_want, 100.0 * mean_gap);
    return o;
}

}  // namespace

int main() {
    bool all_ok = true;
    int idx = 0;
    const auto report = [&](const char* name, const Outcome& o) {
        ++idx;
        std::printf("[%s] %2d. %s: %s\n", o.ok ? "PASS" : "FAIL", idx, name, o.detail.c_str());
        std::fflush(stdout);
        all_ok = all_ok && o.ok;
    };
    const auto guarded = [&](const char* name, auto&& fn) {
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        report(name, o);
    };

    guarded("adjoint identities", check_adjoints);
    guarded("analytic gradients vs finite differences", check_gradients);
    guarded("special functions and overflow safety", check_specfun);
    guarded("operator norm and curvature bounds", check_lipschitz);
    guarded("frozen-attenuation model identity", check_identity);
    guarded("noiseless reconstruction and fiber recovery", check_noiseless_recon);
    const NoisySetup noisy = make_noisy_setup();
    guarded("noise robustness of the statistical models", [&] { return check_noise_robustness(noisy); });
    guarded("optimizer ranking and divergence detection", [&] { return check_optimizers(noisy); });
    guarded("Funk-Radon factors vs great-circle quadrature", check_funk_radon);
    guarded("noise simulator statistics", check_noise_stats);

    std::printf("%s\n", all_ok ? "acceptance: all checks passed"
                               : "acceptance: FAILURES detected");
    return all_ok ? 0 : 1;
}
