// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <vector>

#include "geometry.hpp"
#include "models.hpp"
#include "parallel.hpp"
#include "projector.hpp"
#include "sphharm.hpp"

namespace axdt {

/// Ground truth for synthetic experiments: attenuation, scattering
/// coefficients, and the per-voxel fiber axis where one exists.
struct Phantom {
    ScalarVolume mu_gt;
    CoefficientVolume eta_gt;
    std::vector<Vec3> fiber_gt;
    std::vector<std::uint8_t> has_fiber;
};

namespace detail {

/// Projects s(u) = eps_iso + eps_aniso (1 - (u.f)^2) onto the even harmonics
/// <= max_degree. The integrand is a degree-2 polynomial, so Gauss-Legendre
/// quadrature captures it exactly.
inline std::vector<double> project_axis_function(const Vec3& axis, double eps_iso,
                                                 double eps_aniso, int max_degree,
                                                 const SphereGrid& quad) {
    const int nc = n_even_coeffs(max_degree);
    std::vector<double> coeffs(static_cast<std::size_t>(nc), 0.0);
    std::vector<double> basis(static_cast<std::size_t>(nc));
    for (std::size_t i = 0; i < quad.n_nodes(); ++i) {
        const double uf = quad.nodes[i].dot(axis);
        const double s = quad.weights[i] * (eps_iso + eps_aniso * (1.0 - uf * uf));
        eval_even_basis(max_degree, quad.nodes[i], basis.data());
        for (int c = 0; c < nc; ++c) coeffs[static_cast<std::size_t>(c)] += s * basis[static_cast<std::size_t>(c)];
    }
    return coeffs;
}

}  // namespace detail

/// Two crossed cylindrical rods with anisotropic scattering
/// s(u) = eps_iso + eps_aniso (1 - (u.f)^2) along each rod axis f; rod 1 runs
/// along +x below the grid center, rod 2 is rotated by angle_deg about z and
/// sits above it, so the rods never intersect. mu is constant inside the
/// rods. Throws if the rods do not fit inside the grid.
inline Phantom make_crossed_rods_phantom(const VolumeGrid& grid, double rod_radius,
                                         double angle_deg, double eps_iso, double eps_aniso,
                                         double mu_inside = 0.02, int max_degree = 4) {
    if (!(rod_radius > 0.0)) throw std::invalid_argument("phantom: rod_radius must be > 0");
    if (eps_iso < 0.0 || eps_aniso < 0.0)
        throw std::invalid_argument("phantom: eps_iso and eps_aniso must be >= 0");
    const Vec3 ext = grid.extent();
    const double z_off = 1.25 * rod_radius;
    if (2.0 * (z_off + rod_radius) > ext[2])
        throw std::invalid_argument("phantom: rods do not fit in the grid (z extent)");
    const double half_len = 0.4 * std::min(ext[0], ext[1]);
    if (!(half_len > rod_radius))
        throw std::invalid_argument("phantom: rods do not fit in the grid (xy extent)");
    const double ang = angle_deg * std::numbers::pi / 180.0;
    const Vec3 center = grid.center();
    struct Rod {
        Vec3 center, axis;
    };
    const Rod rods[2] = {{center + Vec3(0, 0, -z_off), Vec3(1, 0, 0)},
                         {center + Vec3(0, 0, z_off), Vec3(std::cos(ang), std::sin(ang), 0)}};

    const SphereGrid quad = gauss_legendre_sphere_grid(16);
    std::vector<double> rod_coeffs[2];
    for (int r = 0; r < 2; ++r)
        rod_coeffs[r] =
            detail::project_axis_function(rods[r].axis, eps_iso, eps_aniso, max_degree, quad);

    // Nonnegativity of the represented scattering function, checked on the
    // evaluation sphere.
    {
        const SphereGrid check = sphere_grid(3);
        std::vector<double> basis(static_cast<std::size_t>(n_even_coeffs(max_degree)));
        for (int r = 0; r < 2; ++r)
            for (const Vec3& u : check.nodes) {
                eval_even_basis(max_degree, u, basis.data());
                double s = 0.0;
                for (std::size_t c = 0; c < basis.size(); ++c) s += rod_coeffs[r][c] * basis[c];
                if (s < -1e-9)
                    throw std::invalid_argument("phantom: scattering function goes negative");
            }
    }

    Phantom ph;
    ph.mu_gt = ScalarVolume(grid);
    ph.eta_gt = CoefficientVolume(grid, max_degree);
    ph.fiber_gt.assign(grid.voxel_count(), Vec3::Zero());
    ph.has_fiber.assign(grid.voxel_count(), 0);
    const int nc = ph.eta_gt.n_coeffs();
    for (int k = 0; k < grid.dims[2]; ++k)
        for (int j = 0; j < grid.dims[1]; ++j)
            for (int i = 0; i < grid.dims[0]; ++i) {
                const Vec3 p = grid.voxel_center(i, j, k);
                for (int r = 0; r < 2; ++r) {
                    const Vec3 q = p - rods[r].center;
                    const double axial = q.dot(rods[r].axis);
                    if (std::abs(axial) > half_len) continue;
                    if ((q - axial * rods[r].axis).norm() > rod_radius) continue;
                    const std::size_t v = grid.index(i, j, k);
                    ph.mu_gt.values[v] = mu_inside;
                    for (int c = 0; c < nc; ++c)
                        ph.eta_gt.at(c, v) = rod_coeffs[r][static_cast<std::size_t>(c)];
                    ph.fiber_gt[v] = rods[r].axis;
                    ph.has_fiber[v] = 1;
                    break;
                }
            }
    return ph;
}

/// One phase-stepping scan: N intensity samples per ray over one grating
/// period, [ray][step] layout.
struct SteppingSeries {
    int n_steps = 0;
    std::size_t n_rays = 0;
    std::vector<double> samples;

    double at(std::size_t ray, int step) const {
        return samples[ray * static_cast<std::size_t>(n_steps) + static_cast<std::size_t>(step)];
    }
};

/// Noiseless stepping curves I_j = a + b cos(2 pi j / N + phi); negative
/// samples (only possible for b > a) are clamped to zero.
inline SteppingSeries synthesize_stepping_series(const std::vector<double>& a,
                                                 const std::vector<double>& b,
                                                 const std::vector<double>& phi, int n_steps) {
    if (n_steps < 3) throw std::invalid_argument("synthesize_stepping_series: need N >= 3");
    if (a.size() != b.size() || a.size() != phi.size())
        throw std::invalid_argument("synthesize_stepping_series: size mismatch");
    SteppingSeries s;
    s.n_steps = n_steps;
    s.n_rays = a.size();
    s.samples.resize(s.n_rays * static_cast<std::size_t>(n_steps));
    const double w = 2.0 * std::numbers::pi / n_steps;
    for (std::size_t r = 0; r < s.n_rays; ++r)
        for (int j = 0; j < n_steps; ++j)
            s.samples[r * static_cast<std::size_t>(n_steps) + static_cast<std::size_t>(j)] =
                std::max(0.0, a[r] + b[r] * std::cos(w * j + phi[r]));
    return s;
}

struct FourierAmplitudes {
    std::vector<double> a, b, phi;
};

/// Per-ray truncated Fourier analysis of a stepping series: a is the mean,
/// b the amplitude of the first harmonic (2/N x first DFT bin magnitude),
/// phi its phase.
inline FourierAmplitudes extract_fourier(const SteppingSeries& series) {
    if (series.n_steps < 3) throw std::invalid_argument("extract_fourier: need N >= 3");
    FourierAmplitudes out;
    out.a.resize(series.n_rays);
    out.b.resize(series.n_rays);
    out.phi.resize(series.n_rays);
    const double w = 2.0 * std::numbers::pi / series.n_steps;
    for (std::size_t r = 0; r < series.n_rays; ++r) {
        double mean = 0.0;
        std::complex<double> f1 = 0.0;
        for (int j = 0; j < series.n_steps; ++j) {
            const double v = series.at(r, j);
            mean += v;
            f1 += v * std::polar(1.0, -w * j);
        }
        out.a[r] = mean / series.n_steps;
        out.b[r] = 2.0 * std::abs(f1) / series.n_steps;
        out.phi[r] = std::arg(f1);
    }
    return out;
}

/// Transmission T = a_s/a_r and dark-field signal d = (b_s a_r)/(a_s b_r),
/// elementwise.
inline std::pair<std::vector<double>, std::vector<double>> compute_transmission_darkfield(
    const std::vector<double>& a_s, const std::vector<double>& b_s, const std::vector<double>& a_r,
    const std::vector<double>& b_r) {
    const std::size_t n = a_s.size();
    if (b_s.size() != n || a_r.size() != n || b_r.size() != n)
        throw std::invalid_argument("compute_transmission_darkfield: size mismatch");
    std::vector<double> T(n), d(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!(a_r[i] > 0.0) || !(b_r[i] > 0.0) || !(a_s[i] > 0.0))
            throw std::domain_error("compute_transmission_darkfield: nonpositive denominator");
        T[i] = a_s[i] / a_r[i];
        d[i] = (b_s[i] * a_r[i]) / (a_s[i] * b_r[i]);
    }
    return {std::move(T), std::move(d)};
}

namespace detail {

/// Counter-based per-ray normal sampler: the stream depends only on
/// (seed, ray index), never on thread scheduling.
class RayRng {
public:
    RayRng(std::uint64_t seed, std::uint64_t ray) {
        state_ = seed ^ 0x6a09e667f3bcc909ULL;
        state_ = mix(state_ + 0x9e3779b97f4a7c15ULL * (ray + 1));
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        // Box-Muller on uniforms in (0, 1].
        const double u1 = (static_cast<double>(next() >> 11) + 1.0) * 0x1.0p-53;
        const double u2 = static_cast<double>(next() >> 11) * 0x1.0p-53;
        const double rad = std::sqrt(-2.0 * std::log(u1));
        const double ang = 2.0 * std::numbers::pi * u2;
        spare_ = rad * std::sin(ang);
        have_spare_ = true;
        return rad * std::cos(ang);
    }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
    std::uint64_t next() {
        state_ += 0x9e3779b97f4a7c15ULL;
        return mix(state_);
    }
    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace detail

struct SimulationResult {
    MeasurementSet measurements;
    std::optional<SteppingSeries> series;
};

/// Simulates a phase-stepping acquisition of the phantom. True amplitudes are
/// a = a0 exp(-A mu) and b = a alpha0 exp(-B eta); the reference scan is
/// (a0, a0 alpha0). With noise on, a_s ~ Normal(a, a/N) (variance) and
/// b_s/2 ~ Rician(b/2, sqrt(a/(2N))), drawn from per-ray seeded streams;
/// nonpositive draws are clamped and counted by MeasurementSet sanitation.
inline SimulationResult simulate_measurements(const Phantom& phantom,
                                              const AcquisitionGeometry& geom,
                                              const WeightTable& weights, double a0, double alpha0,
                                              int n_steps, bool noise, std::uint64_t seed,
                                              bool emit_series = false) {
    geom.validate();
    if (!(a0 > 0.0)) throw std::invalid_argument("simulate_measurements: a0 must be > 0");
    if (!(alpha0 > 0.0 && alpha0 < 1.0))
        throw std::invalid_argument("simulate_measurements: alpha0 must lie in (0, 1)");
    if (n_steps < 3) throw std::invalid_argument("simulate_measurements: n_steps must be >= 3");
    const Sinogram P = project(phantom.mu_gt, geom);
    const Sinogram Q = axdt_forward(phantom.eta_gt, geom, weights);
    const std::size_t n = P.values.size();
    MeasurementSet meas;
    meas.n_poses = P.n_poses;
    meas.rows = P.rows;
    meas.cols = P.cols;
    meas.n_steps = n_steps;
    meas.a_r.assign(n, a0);
    meas.b_r.assign(n, a0 * alpha0);
    meas.a_s.resize(n);
    meas.b_s.resize(n);
    parallel_for(n, [&](std::size_t i) {
        const double a = a0 * std::exp(-P.values[i]);
        const double b = a * alpha0 * std::exp(-Q.values[i]);
        if (!noise) {
            meas.a_s[i] = a;
            meas.b_s[i] = b;
            return;
        }
        detail::RayRng rng(seed, i);
        meas.a_s[i] = a + std::sqrt(a / n_steps) * rng.normal();
        const double sigma = std::sqrt(a / (2.0 * n_steps));
        const double re = 0.5 * b + sigma * rng.normal();
        const double im = sigma * rng.normal();
        meas.b_s[i] = 2.0 * std::hypot(re, im);
    });
    meas.sanitize();
    SimulationResult out;
    if (emit_series) {
        const std::vector<double> phi(n, 0.0);
        out.series = synthesize_stepping_series(meas.a_s, meas.b_s, phi, n_steps);
    }
    out.measurements = std::move(meas);
    return out;
}

}  // namespace axdt
