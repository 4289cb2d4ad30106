// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace axdt {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Regular voxel grid. Values attached to it are stored x-fastest
/// (index = (k*ny + j)*nx + i); voxel centers sit at
/// origin + (i+1/2)*spacing elementwise.
struct VolumeGrid {
    std::array<int, 3> dims{0, 0, 0};
    Vec3 spacing{1.0, 1.0, 1.0};
    Vec3 origin{0.0, 0.0, 0.0};

    VolumeGrid() = default;
    VolumeGrid(std::array<int, 3> d, const Vec3& sp, const Vec3& org)
        : dims(d), spacing(sp), origin(org) {
        for (int a = 0; a < 3; ++a) {
            if (dims[a] < 1) throw std::invalid_argument("VolumeGrid: dims must be >= 1");
            if (!(spacing[a] > 0.0)) throw std::invalid_argument("VolumeGrid: spacing must be > 0");
        }
    }

    /// Grid of the given size with its geometric center at the world origin.
    static VolumeGrid centered(std::array<int, 3> d, const Vec3& sp) {
        Vec3 ext(d[0] * sp[0], d[1] * sp[1], d[2] * sp[2]);
        return VolumeGrid(d, sp, -0.5 * ext);
    }

    std::size_t voxel_count() const {
        return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
               static_cast<std::size_t>(dims[2]);
    }
    Vec3 extent() const { return Vec3(dims[0] * spacing[0], dims[1] * spacing[1], dims[2] * spacing[2]); }
    Vec3 center() const { return origin + 0.5 * extent(); }
    Vec3 voxel_center(int i, int j, int k) const {
        return origin + Vec3((i + 0.5) * spacing[0], (j + 0.5) * spacing[1], (k + 0.5) * spacing[2]);
    }
    std::size_t index(int i, int j, int k) const {
        return (static_cast<std::size_t>(k) * dims[1] + static_cast<std::size_t>(j)) * dims[0] +
               static_cast<std::size_t>(i);
    }

    friend bool operator==(const VolumeGrid& a, const VolumeGrid& b) {
        return a.dims == b.dims && a.spacing == b.spacing && a.origin == b.origin;
    }
};

/// Scalar field on a VolumeGrid, x-fastest layout.
struct ScalarVolume {
    VolumeGrid grid;
    std::vector<double> values;

    ScalarVolume() = default;
    explicit ScalarVolume(const VolumeGrid& g, double fill = 0.0) : grid(g), values(g.voxel_count(), fill) {}

    double& at(int i, int j, int k) { return values[grid.index(i, j, k)]; }
    double at(int i, int j, int k) const { return values[grid.index(i, j, k)]; }
};

/// Number of real even-degree spherical-harmonic coefficients with degree <= K.
inline int n_even_coeffs(int max_degree) {
    if (max_degree < 0 || max_degree % 2 != 0)
        throw std::invalid_argument("n_even_coeffs: max_degree must be even and >= 0");
    int n = 0;
    for (int k = 0; k <= max_degree; k += 2) n += 2 * k + 1;
    return n;
}

/// Flat position of (k, m) in the (k, m)-lexicographic even-degree ordering:
/// (0,0), (2,-2)..(2,2), (4,-4)..(4,4), ...
inline int coeff_index(int k, int m) {
    if (k < 0 || k % 2 != 0 || m < -k || m > k)
        throw std::invalid_argument("coeff_index: need even k >= 0 and |m| <= k");
    int base = 0;
    for (int kk = 0; kk < k; kk += 2) base += 2 * kk + 1;
    return base + (m + k);
}

/// Even-degree spherical-harmonic coefficient field on a VolumeGrid.
/// Storage is coefficient-major: values[c * voxel_count + voxel], each
/// coefficient plane x-fastest.
struct CoefficientVolume {
    VolumeGrid grid;
    int max_degree = 4;
    std::vector<double> values;

    CoefficientVolume() = default;
    CoefficientVolume(const VolumeGrid& g, int K, double fill = 0.0)
        : grid(g), max_degree(K),
          values(static_cast<std::size_t>(n_even_coeffs(K)) * g.voxel_count(), fill) {}

    int n_coeffs() const { return n_even_coeffs(max_degree); }
    double* plane(int c) { return values.data() + static_cast<std::size_t>(c) * grid.voxel_count(); }
    const double* plane(int c) const {
        return values.data() + static_cast<std::size_t>(c) * grid.voxel_count();
    }
    double& at(int c, std::size_t voxel) { return values[static_cast<std::size_t>(c) * grid.voxel_count() + voxel]; }
    double at(int c, std::size_t voxel) const {
        return values[static_cast<std::size_t>(c) * grid.voxel_count() + voxel];
    }
};

/// Flat-panel detector: rows x cols square pixels of the given pitch, centered
/// on the beam axis.
struct DetectorSpec {
    int rows = 0;
    int cols = 0;
    double pitch = 0.0;

    void validate() const {
        if (rows < 1 || cols < 1) throw std::invalid_argument("DetectorSpec: rows/cols must be >= 1");
        if (!(pitch > 0.0)) throw std::invalid_argument("DetectorSpec: pitch must be > 0");
    }
    std::size_t n_pixels() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
    friend bool operator==(const DetectorSpec&, const DetectorSpec&) = default;
};

namespace detail {
inline Mat3 rot_z(double a) {
    Mat3 r;
    r << std::cos(a), -std::sin(a), 0.0, std::sin(a), std::cos(a), 0.0, 0.0, 0.0, 1.0;
    return r;
}
inline Mat3 rot_x(double a) {
    Mat3 r;
    r << 1.0, 0.0, 0.0, 0.0, std::cos(a), -std::sin(a), 0.0, std::sin(a), std::cos(a);
    return r;
}
}  // namespace detail

/// One tomographic view. `rotation` maps sample-frame vectors to the world
/// frame where the beam travels along +z and the grating sensitivity axis is
/// +x. `beam_dir` / `sens_dir` are those two axes pulled back into the sample
/// frame; the detector row axis in the sample frame is beam_dir x sens_dir.
struct Pose {
    Mat3 rotation = Mat3::Identity();
    DetectorSpec detector;
    Vec3 beam_dir{0.0, 0.0, 1.0};
    Vec3 sens_dir{1.0, 0.0, 0.0};

    void validate() const {
        detector.validate();
        if (std::abs(beam_dir.norm() - 1.0) > 1e-9 || std::abs(sens_dir.norm() - 1.0) > 1e-9)
            throw std::invalid_argument("Pose: beam_dir and sens_dir must be unit vectors");
        if (std::abs(beam_dir.dot(sens_dir)) > 1e-9)
            throw std::invalid_argument("Pose: beam_dir and sens_dir must be orthogonal");
        if (std::abs(rotation.determinant() - 1.0) > 1e-9)
            throw std::invalid_argument("Pose: rotation must be a proper rotation");
    }
    /// Detector row axis in the sample frame.
    Vec3 row_dir() const { return beam_dir.cross(sens_dir); }
};

/// Pose from intrinsic Z-X'-Z'' Euler angles: rotation = Rz(psi)*Rx(theta)*Rz(phi).
inline Pose make_pose(double psi, double theta, double phi, const DetectorSpec& det) {
    det.validate();
    Pose p;
    p.rotation = detail::rot_z(psi) * detail::rot_x(theta) * detail::rot_z(phi);
    p.detector = det;
    p.beam_dir = p.rotation.transpose() * Vec3(0.0, 0.0, 1.0);
    p.sens_dir = p.rotation.transpose() * Vec3(1.0, 0.0, 0.0);
    return p;
}

/// Recovers (psi, theta, phi) with theta in [0, pi] such that
/// make_pose(psi, theta, phi, det).rotation reproduces R. At the theta = 0 or
/// pi degeneracy phi is fixed to 0.
inline std::array<double, 3> euler_from_rotation(const Mat3& R) {
    const double c = std::clamp(R(2, 2), -1.0, 1.0);
    const double theta = std::acos(c);
    const double st = std::sin(theta);
    if (st > 1e-10) {
        const double psi = std::atan2(R(0, 2), -R(1, 2));
        const double phi = std::atan2(R(2, 0), R(2, 1));
        return {psi, theta, phi};
    }
    // R = Rz(psi +/- phi); attribute everything to psi.
    const double psi = std::atan2(R(1, 0), R(0, 0));
    return {c > 0.0 ? psi : -psi, theta, 0.0};
}

/// A full acquisition: the poses plus the reconstruction grid. All poses must
/// share one detector shape.
struct AcquisitionGeometry {
    std::vector<Pose> poses;
    VolumeGrid grid;

    void validate() const {
        if (poses.empty()) throw std::invalid_argument("AcquisitionGeometry: need at least one pose");
        for (const Pose& p : poses) {
            p.validate();
            if (!(p.detector == poses.front().detector))
                throw std::invalid_argument("AcquisitionGeometry: all poses must share one detector spec");
        }
    }
    std::size_t n_rays() const { return poses.size() * poses.front().detector.n_pixels(); }
};

/// n_poses views whose beam directions cover the sphere quasi-uniformly
/// (Fibonacci lattice) with the in-plane sensitivity axis decorrelated by a
/// golden-angle spin. n_poses = 1 yields the identity pose.
inline AcquisitionGeometry sphere_covering_geometry(int n_poses, const DetectorSpec& det,
                                                    const VolumeGrid& grid) {
    if (n_poses < 1) throw std::invalid_argument("sphere_covering_geometry: n_poses must be >= 1");
    det.validate();
    AcquisitionGeometry geom;
    geom.grid = grid;
    geom.poses.reserve(static_cast<std::size_t>(n_poses));
    if (n_poses == 1) {
        geom.poses.push_back(make_pose(0.0, 0.0, 0.0, det));
        return geom;
    }
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < n_poses; ++i) {
        const double z = 1.0 - (2.0 * i + 1.0) / n_poses;
        const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double az = golden * i;
        const Vec3 l(r * std::cos(az), r * std::sin(az), z);
        // Deterministic in-plane frame: start from the world axis least
        // aligned with l, then spin by the golden angle per pose index.
        int ax = 0;
        for (int a = 1; a < 3; ++a)
            if (std::abs(l[a]) < std::abs(l[ax])) ax = a;
        Vec3 e = Vec3::Zero();
        e[ax] = 1.0;
        const Vec3 t0 = (e - e.dot(l) * l).normalized();
        const Vec3 t1 = l.cross(t0);
        const double spin = golden * i;
        const Vec3 t = std::cos(spin) * t0 + std::sin(spin) * t1;
        Pose p;
        p.detector = det;
        p.beam_dir = l;
        p.sens_dir = t;
        Mat3 rt;  // columns: sample-frame images of world x, y, z
        rt.col(0) = t;
        rt.col(1) = l.cross(t);
        rt.col(2) = l;
        p.rotation = rt.transpose();
        geom.poses.push_back(p);
    }
    return geom;
}

}  // namespace axdt
