// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "geometry.hpp"
#include "parallel.hpp"

namespace axdt {

/// Stack of projection images, one rows x cols image per pose, stored
/// [pose][row][col] with col fastest.
struct Sinogram {
    int n_poses = 0;
    int rows = 0;
    int cols = 0;
    std::vector<double> values;

    Sinogram() = default;
    Sinogram(int p, int r, int c)
        : n_poses(p), rows(r), cols(c),
          values(static_cast<std::size_t>(p) * r * c, 0.0) {
        if (p < 1 || r < 1 || c < 1) throw std::invalid_argument("Sinogram: shape must be positive");
    }
    static Sinogram for_geometry(const AcquisitionGeometry& geom) {
        return Sinogram(static_cast<int>(geom.poses.size()), geom.poses.front().detector.rows,
                        geom.poses.front().detector.cols);
    }
    std::size_t size() const { return values.size(); }
    std::size_t index(int p, int r, int c) const {
        return (static_cast<std::size_t>(p) * rows + r) * cols + c;
    }
    double& at(int p, int r, int c) { return values[index(p, r, c)]; }
    double at(int p, int r, int c) const { return values[index(p, r, c)]; }
    std::span<double> pose_view(int p) {
        return {values.data() + static_cast<std::size_t>(p) * rows * cols,
                static_cast<std::size_t>(rows) * cols};
    }
    std::span<const double> pose_view(int p) const {
        return {values.data() + static_cast<std::size_t>(p) * rows * cols,
                static_cast<std::size_t>(rows) * cols};
    }
};

namespace detail {

// Eight corner indices and trilinear weights for a world-space point, in
// voxel-center coordinates with clamp-to-edge boundary handling. Shared by
// the forward and adjoint paths so the two stay exact transposes.
struct TrilinearCell {
    std::size_t idx[8];
    double w[8];
};

inline TrilinearCell trilinear_cell(const VolumeGrid& g, double px, double py, double pz) {
    const double fx = (px - g.origin[0]) / g.spacing[0] - 0.5;
    const double fy = (py - g.origin[1]) / g.spacing[1] - 0.5;
    const double fz = (pz - g.origin[2]) / g.spacing[2] - 0.5;
    const double bx = std::floor(fx), by = std::floor(fy), bz = std::floor(fz);
    const double tx = fx - bx, ty = fy - by, tz = fz - bz;
    const auto cl = [](double b, int n) {
        const int i = static_cast<int>(b);
        return std::clamp(i, 0, n - 1);
    };
    const int x0 = cl(bx, g.dims[0]), y0 = cl(by, g.dims[1]), z0 = cl(bz, g.dims[2]);
    const int x1 = cl(bx + 1.0, g.dims[0]);
    const int y1 = cl(by + 1.0, g.dims[1]);
    const int z1 = cl(bz + 1.0, g.dims[2]);
    // Out-of-range samples clamp both corners to the same voxel; the weights
    // still sum to 1.
    TrilinearCell c;
    const double wx0 = 1.0 - tx, wy0 = 1.0 - ty, wz0 = 1.0 - tz;
    c.idx[0] = g.index(x0, y0, z0); c.w[0] = wx0 * wy0 * wz0;
    c.idx[1] = g.index(x1, y0, z0); c.w[1] = tx * wy0 * wz0;
    c.idx[2] = g.index(x0, y1, z0); c.w[2] = wx0 * ty * wz0;
    c.idx[3] = g.index(x1, y1, z0); c.w[3] = tx * ty * wz0;
    c.idx[4] = g.index(x0, y0, z1); c.w[4] = wx0 * wy0 * tz;
    c.idx[5] = g.index(x1, y0, z1); c.w[5] = tx * wy0 * tz;
    c.idx[6] = g.index(x0, y1, z1); c.w[6] = wx0 * ty * tz;
    c.idx[7] = g.index(x1, y1, z1); c.w[7] = tx * ty * tz;
    return c;
}

struct RaySegment {
    double t0 = 0.0;   // entry parameter
    double h = 0.0;    // step length
    int n = 0;         // midpoint samples
};

// Clips the ray q0 + t*dir against the grid bounding box and picks the
// adaptive midpoint sampling: n = ceil(span / h_max) with
// h_max = 0.5 * min spacing.
inline RaySegment clip_ray(const VolumeGrid& g, const Vec3& q0, const Vec3& dir) {
    double tmin = -std::numeric_limits<double>::infinity();
    double tmax = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        const double lo = g.origin[a];
        const double hi = g.origin[a] + g.dims[a] * g.spacing[a];
        if (std::abs(dir[a]) < 1e-12) {
            if (q0[a] < lo || q0[a] > hi) return {};
            continue;
        }
        double u = (lo - q0[a]) / dir[a];
        double v = (hi - q0[a]) / dir[a];
        if (u > v) std::swap(u, v);
        tmin = std::max(tmin, u);
        tmax = std::min(tmax, v);
    }
    if (!(tmax > tmin) || !std::isfinite(tmax - tmin)) return {};
    const double span = tmax - tmin;
    const double h_max = 0.5 * std::min({g.spacing[0], g.spacing[1], g.spacing[2]});
    RaySegment seg;
    seg.n = std::max(1, static_cast<int>(std::ceil(span / h_max)));
    seg.h = span / seg.n;
    seg.t0 = tmin;
    return seg;
}

// Ray reference point in the sample frame for detector pixel (r, c): the
// detector center axis passes through the world origin.
inline Vec3 ray_origin(const Pose& pose, int r, int c) {
    const double du = (c - 0.5 * (pose.detector.cols - 1)) * pose.detector.pitch;
    const double dv = (r - 0.5 * (pose.detector.rows - 1)) * pose.detector.pitch;
    return du * pose.sens_dir + dv * pose.row_dir();
}

inline double integrate_ray(const std::vector<double>& vol, const VolumeGrid& g, const Vec3& q0,
                            const Vec3& dir) {
    const RaySegment seg = clip_ray(g, q0, dir);
    double acc = 0.0;
    for (int i = 0; i < seg.n; ++i) {
        const double t = seg.t0 + (i + 0.5) * seg.h;
        const TrilinearCell c =
            trilinear_cell(g, q0[0] + t * dir[0], q0[1] + t * dir[1], q0[2] + t * dir[2]);
        double s = 0.0;
        for (int j = 0; j < 8; ++j) s += c.w[j] * vol[c.idx[j]];
        acc += s;
    }
    return acc * seg.h;
}

inline void smear_ray(std::vector<double>& vol, const VolumeGrid& g, const Vec3& q0,
                      const Vec3& dir, double value) {
    const RaySegment seg = clip_ray(g, q0, dir);
    const double vh = value * seg.h;
    for (int i = 0; i < seg.n; ++i) {
        const double t = seg.t0 + (i + 0.5) * seg.h;
        const TrilinearCell c =
            trilinear_cell(g, q0[0] + t * dir[0], q0[1] + t * dir[1], q0[2] + t * dir[2]);
        for (int j = 0; j < 8; ++j) vol[c.idx[j]] += c.w[j] * vh;
    }
}

inline void project_one_pose(const ScalarVolume& vol, const Pose& pose, std::span<double> out) {
    const int rows = pose.detector.rows, cols = pose.detector.cols;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            out[static_cast<std::size_t>(r) * cols + c] =
                integrate_ray(vol.values, vol.grid, ray_origin(pose, r, c), pose.beam_dir);
}

inline void backproject_one_pose(std::span<const double> img, const Pose& pose, ScalarVolume& accum) {
    const int rows = pose.detector.rows, cols = pose.detector.cols;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            smear_ray(accum.values, accum.grid, ray_origin(pose, r, c), pose.beam_dir,
                      img[static_cast<std::size_t>(r) * cols + c]);
}

}  // namespace detail

/// Parallel-beam X-ray transform of a scalar volume (line integrals including
/// path length). Deterministic for any thread count.
inline Sinogram project(const ScalarVolume& vol, const AcquisitionGeometry& geom) {
    geom.validate();
    if (!(vol.grid == geom.grid)) throw std::invalid_argument("project: volume grid mismatch");
    Sinogram sino = Sinogram::for_geometry(geom);
    const int rows = sino.rows, cols = sino.cols;
    parallel_for(static_cast<std::size_t>(sino.n_poses) * rows, [&](std::size_t pr) {
        const int p = static_cast<int>(pr / rows);
        const int r = static_cast<int>(pr % rows);
        const Pose& pose = geom.poses[static_cast<std::size_t>(p)];
        for (int c = 0; c < cols; ++c)
            sino.at(p, r, c) =
                detail::integrate_ray(vol.values, vol.grid, detail::ray_origin(pose, r, c), pose.beam_dir);
    });
    return sino;
}

/// Exact adjoint of project(): same ray enumeration and weights, scattered
/// instead of gathered. Per-pose partial volumes are grouped in fixed blocks
/// of 8 poses and reduced in pose order, so the result is bit-identical for
/// any thread count.
inline ScalarVolume backproject(const Sinogram& sino, const AcquisitionGeometry& geom) {
    geom.validate();
    if (sino.n_poses != static_cast<int>(geom.poses.size()) ||
        sino.rows != geom.poses.front().detector.rows ||
        sino.cols != geom.poses.front().detector.cols)
        throw std::invalid_argument("backproject: sinogram shape does not match geometry");
    constexpr int kBlock = 8;
    const int n_blocks = (sino.n_poses + kBlock - 1) / kBlock;
    std::vector<ScalarVolume> partial(static_cast<std::size_t>(n_blocks));
    parallel_for(static_cast<std::size_t>(n_blocks), [&](std::size_t b) {
        ScalarVolume acc(geom.grid);
        const int lo = static_cast<int>(b) * kBlock;
        const int hi = std::min(sino.n_poses, lo + kBlock);
        for (int p = lo; p < hi; ++p)
            detail::backproject_one_pose(sino.pose_view(p), geom.poses[static_cast<std::size_t>(p)], acc);
        partial[b] = std::move(acc);
    });
    ScalarVolume out(geom.grid);
    for (const ScalarVolume& acc : partial)
        for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += acc.values[i];
    return out;
}

/// A linear map together with its adjoint, acting on flat vectors.
struct LinearOperator {
    std::size_t domain_dim = 0;
    std::size_t range_dim = 0;
    std::function<void(std::span<const double>, std::span<double>)> apply;
    std::function<void(std::span<const double>, std::span<double>)> apply_adjoint;
};

/// project()/backproject() wrapped as a LinearOperator over flat vectors.
inline LinearOperator make_projection_operator(const AcquisitionGeometry& geom) {
    geom.validate();
    LinearOperator op;
    op.domain_dim = geom.grid.voxel_count();
    op.range_dim = geom.n_rays();
    op.apply = [geom](std::span<const double> x, std::span<double> y) {
        ScalarVolume v(geom.grid);
        std::copy(x.begin(), x.end(), v.values.begin());
        Sinogram s = project(v, geom);
        std::copy(s.values.begin(), s.values.end(), y.begin());
    };
    op.apply_adjoint = [geom](std::span<const double> y, std::span<double> x) {
        Sinogram s = Sinogram::for_geometry(geom);
        std::copy(y.begin(), y.end(), s.values.begin());
        ScalarVolume v = backproject(s, geom);
        std::copy(v.values.begin(), v.values.end(), x.begin());
    };
    return op;
}

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}
/// Uniform double in [0, 1) from 53 random bits.
inline double uniform01(std::uint64_t bits) { return static_cast<double>(bits >> 11) * 0x1.0p-53; }
}  // namespace detail

/// Largest-singular-value estimate of op by power iteration on op* op,
/// started from a seeded deterministic vector. The estimate sequence
/// ||op* op x_k|| is non-decreasing in k and converges to sigma_max^2 from
/// below; the returned value is its square root.
inline double power_iteration(const LinearOperator& op, int n_iters = 50, std::uint64_t seed = 0) {
    if (n_iters < 1) throw std::invalid_argument("power_iteration: n_iters must be >= 1");
    if (op.domain_dim == 0 || op.range_dim == 0)
        throw std::invalid_argument("power_iteration: operator dims must be set");
    std::vector<double> x(op.domain_dim), y(op.range_dim), z(op.domain_dim);
    std::uint64_t state = seed ^ 0xa0761d6478bd642fULL;
    for (double& v : x) v = 2.0 * detail::uniform01(detail::splitmix64(state)) - 1.0;
    auto norm = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double a : v) s += a * a;
        return std::sqrt(s);
    };
    double nx = norm(x);
    if (nx == 0.0) return 0.0;
    for (double& v : x) v /= nx;
    double est = 0.0;
    for (int it = 0; it < n_iters; ++it) {
        op.apply(x, y);
        op.apply_adjoint(y, z);
        const double nz = norm(z);
        if (nz == 0.0) return 0.0;
        est = nz;
        for (std::size_t i = 0; i < x.size(); ++i) x[i] = z[i] / nz;
    }
    return std::sqrt(est);
}

}  // namespace axdt
