// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numbers>
#include <set>
#include <stdexcept>
#include <utility>
#include <vector>

#include "geometry.hpp"
#include "parallel.hpp"
#include "projector.hpp"

namespace axdt {

/// Real orthonormal spherical harmonic Y_k^m at the unit vector u, in the
/// convention without the Condon-Shortley phase:
///   m = 0:  N_k^0 P_k^0(cos th)
///   m > 0:  sqrt(2) N_k^m P_k^m(cos th) cos(m ph)
///   m < 0:  sqrt(2) N_k^|m| P_k^|m|(cos th) sin(|m| ph)
/// Only even degrees are admitted (the dark-field signal is antipodally
/// symmetric).
inline double eval_real_sh(int k, int m, const Vec3& u) {
    if (k < 0 || k % 2 != 0 || m < -k || m > k)
        throw std::invalid_argument("eval_real_sh: need even k >= 0 and |m| <= k");
    if (std::abs(u.squaredNorm() - 1.0) > 1e-8)
        throw std::invalid_argument("eval_real_sh: u must be a unit vector");
    const int am = std::abs(m);
    const double z = std::clamp(u[2], -1.0, 1.0);
    const double s2 = std::max(0.0, 1.0 - z * z);

    // P_am^am = (2 am - 1)!! (1 - z^2)^(am/2), then upward in degree.
    double pmm = 1.0;
    if (am > 0) {
        double dfact = 1.0;
        for (int i = 1; i <= am; ++i) dfact *= 2.0 * i - 1.0;
        pmm = dfact * std::pow(s2, 0.5 * am);
    }
    double p = pmm;
    if (k > am) {
        double pm1 = pmm;
        double pcur = z * (2.0 * am + 1.0) * pmm;
        for (int kk = am + 2; kk <= k; ++kk) {
            const double pnext =
                ((2.0 * kk - 1.0) * z * pcur - (kk + am - 1.0) * pm1) / (kk - am);
            pm1 = pcur;
            pcur = pnext;
        }
        p = pcur;
    }

    double ratio = 1.0;  // (k - am)! / (k + am)!
    for (int i = k - am + 1; i <= k + am; ++i) ratio /= static_cast<double>(i);
    const double norm = std::sqrt((2.0 * k + 1.0) / (4.0 * std::numbers::pi) * ratio);

    if (m == 0) return norm * p;
    const double phi = std::atan2(u[1], u[0]);
    const double az = (m > 0) ? std::cos(am * phi) : std::sin(am * phi);
    return std::numbers::sqrt2 * norm * p * az;
}

/// All even-degree harmonics with k <= max_degree at u, in (k, m)
/// lexicographic order. out must hold n_even_coeffs(max_degree) values.
inline void eval_even_basis(int max_degree, const Vec3& u, double* out) {
    int c = 0;
    for (int k = 0; k <= max_degree; k += 2)
        for (int m = -k; m <= k; ++m) out[c++] = eval_real_sh(k, m, u);
}

/// Quadrature/evaluation node set on the unit sphere. Weights sum to 4 pi.
/// Icosphere grids also carry the mesh adjacency (CSR); product grids do not.
struct SphereGrid {
    std::vector<Vec3> nodes;
    std::vector<double> weights;
    std::vector<int> adj_offsets;
    std::vector<int> adj;

    std::size_t n_nodes() const { return nodes.size(); }
    bool has_adjacency() const { return !adj_offsets.empty(); }
    std::span<const int> neighbors(std::size_t i) const {
        return {adj.data() + adj_offsets[i], adj.data() + adj_offsets[i + 1]};
    }
};

/// Subdivided-icosahedron grid with 10*4^level + 2 nodes, equal weights and
/// mesh adjacency. Equal-weight quadrature on this grid is exact for
/// polynomial degree <= 5 but does not converge beyond (the symmetrized node
/// measure keeps a fixed degree-6 moment of order 1e-3), so it serves
/// evaluation and neighborhood queries, not harmonic quadrature.
inline SphereGrid sphere_grid(int level) {
    if (level < 0 || level > 7) throw std::invalid_argument("sphere_grid: level must be in [0, 7]");
    const double g = (1.0 + std::sqrt(5.0)) / 2.0;
    std::vector<Vec3> verts = {
        {-1, g, 0}, {1, g, 0}, {-1, -g, 0}, {1, -g, 0},
        {0, -1, g}, {0, 1, g}, {0, -1, -g}, {0, 1, -g},
        {g, 0, -1}, {g, 0, 1}, {-g, 0, -1}, {-g, 0, 1}};
    for (Vec3& v : verts) v.normalize();
    std::vector<std::array<int, 3>> faces = {
        {0, 11, 5}, {0, 5, 1}, {0, 1, 7}, {0, 7, 10}, {0, 10, 11},
        {1, 5, 9}, {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
        {3, 9, 4}, {3, 4, 2}, {3, 2, 6}, {3, 6, 8}, {3, 8, 9},
        {4, 9, 5}, {2, 4, 11}, {6, 2, 10}, {8, 6, 7}, {9, 8, 1}};
    for (int l = 0; l < level; ++l) {
        std::map<std::pair<int, int>, int> midpoint;
        auto mid = [&](int a, int b) {
            const auto key = std::minmax(a, b);
            auto it = midpoint.find(key);
            if (it != midpoint.end()) return it->second;
            const int idx = static_cast<int>(verts.size());
            verts.push_back((verts[a] + verts[b]).normalized());
            midpoint.emplace(key, idx);
            return idx;
        };
        std::vector<std::array<int, 3>> next;
        next.reserve(faces.size() * 4);
        for (const auto& f : faces) {
            const int m01 = mid(f[0], f[1]), m12 = mid(f[1], f[2]), m02 = mid(f[0], f[2]);
            next.push_back({f[0], m01, m02});
            next.push_back({f[1], m12, m01});
            next.push_back({f[2], m02, m12});
            next.push_back({m01, m12, m02});
        }
        faces = std::move(next);
    }
    SphereGrid grid;
    grid.nodes = std::move(verts);
    grid.weights.assign(grid.nodes.size(), 4.0 * std::numbers::pi / grid.nodes.size());
    std::vector<std::set<int>> nb(grid.nodes.size());
    for (const auto& f : faces) {
        nb[f[0]].insert(f[1]); nb[f[1]].insert(f[0]);
        nb[f[1]].insert(f[2]); nb[f[2]].insert(f[1]);
        nb[f[0]].insert(f[2]); nb[f[2]].insert(f[0]);
    }
    grid.adj_offsets.reserve(grid.nodes.size() + 1);
    grid.adj_offsets.push_back(0);
    for (const auto& s : nb) {
        grid.adj.insert(grid.adj.end(), s.begin(), s.end());
        grid.adj_offsets.push_back(static_cast<int>(grid.adj.size()));
    }
    return grid;
}

namespace detail {

/// Gauss-Legendre nodes/weights on [-1, 1] by Newton iteration.
inline void gauss_legendre(int n, std::vector<double>& x, std::vector<double>& w) {
    x.resize(n);
    w.resize(n);
    for (int i = 0; i < n; ++i) {
        double z = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
        double pp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = 0.0;
            for (int j = 0; j < n; ++j) {
                const double p2 = p1;
                p1 = p0;
                p0 = ((2.0 * j + 1.0) * z * p1 - j * p2) / (j + 1.0);
            }
            pp = n * (z * p0 - p1) / (z * z - 1.0);
            const double dz = p0 / pp;
            z -= dz;
            if (std::abs(dz) < 1e-15) break;
        }
        x[i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
    }
}

}  // namespace detail

/// Gauss-Legendre (polar) x uniform (azimuth) product grid with
/// n_theta * 2 n_theta nodes; integrates spherical polynomials of degree
/// <= 2 n_theta - 1 exactly. No adjacency.
inline SphereGrid gauss_legendre_sphere_grid(int n_theta) {
    if (n_theta < 1) throw std::invalid_argument("gauss_legendre_sphere_grid: n_theta must be >= 1");
    std::vector<double> gx, gw;
    detail::gauss_legendre(n_theta, gx, gw);
    const int n_phi = 2 * n_theta;
    SphereGrid grid;
    grid.nodes.reserve(static_cast<std::size_t>(n_theta) * n_phi);
    grid.weights.reserve(grid.nodes.capacity());
    for (int i = 0; i < n_theta; ++i) {
        const double z = gx[i];
        const double s = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double wz = gw[i] * 2.0 * std::numbers::pi / n_phi;
        for (int j = 0; j < n_phi; ++j) {
            const double phi = 2.0 * std::numbers::pi * j / n_phi;
            grid.nodes.emplace_back(s * std::cos(phi), s * std::sin(phi), z);
            grid.weights.push_back(wz);
        }
    }
    return grid;
}

/// Anisotropy kernel of one view: h(u) = |l x u|^2 <u, t>^2, the squared
/// small-angle scattering cross-talk between a scatterer axis u, the beam l
/// and the grating sensitivity t. An even polynomial of exact degree 4.
inline double scatter_kernel(const Vec3& u, const Vec3& sens, const Vec3& beam) {
    const double lu = beam.dot(u);
    const double ut = u.dot(sens);
    return (1.0 - lu * lu) * (ut * ut);
}

/// Per-pose coupling weights w_k^m = (1/4pi) integral h(u) Y_k^m(u) du in
/// (k, m) lexicographic order.
struct PoseWeights {
    std::vector<double> w;
};
using WeightTable = std::vector<PoseWeights>;

/// Computes one pose's coupling weights on the given quadrature grid.
inline PoseWeights compute_pose_weights(const Pose& pose, const SphereGrid& quad, int max_degree) {
    const int nc = n_even_coeffs(max_degree);
    PoseWeights pw;
    pw.w.assign(static_cast<std::size_t>(nc), 0.0);
    std::vector<double> basis(static_cast<std::size_t>(nc));
    for (std::size_t i = 0; i < quad.n_nodes(); ++i) {
        const double hw = quad.weights[i] * scatter_kernel(quad.nodes[i], pose.sens_dir, pose.beam_dir);
        if (hw == 0.0) continue;
        eval_even_basis(max_degree, quad.nodes[i], basis.data());
        for (int c = 0; c < nc; ++c) pw.w[static_cast<std::size_t>(c)] += hw * basis[static_cast<std::size_t>(c)];
    }
    const double inv4pi = 1.0 / (4.0 * std::numbers::pi);
    for (double& v : pw.w) v *= inv4pi;
    return pw;
}

/// Coupling weights for every pose. h(u) <= 1 and |Y| <= sqrt((2k+1)/4pi)
/// make |w_k^m| < 1; that bound is asserted here.
inline WeightTable compute_all_pose_weights(const AcquisitionGeometry& geom, const SphereGrid& quad,
                                            int max_degree) {
    geom.validate();
    WeightTable wt(geom.poses.size());
    parallel_for(geom.poses.size(), [&](std::size_t p) {
        wt[p] = compute_pose_weights(geom.poses[p], quad, max_degree);
    });
    for (const PoseWeights& pw : wt)
        for (double v : pw.w)
            if (!(std::abs(v) < 1.0)) throw std::runtime_error("pose weights out of bounds");
    return wt;
}

/// Dark-field forward operator: sino = sum_(k,m) w_k^m(pose) * Xray(eta_k^m).
/// Linear in eta; approximately the negative log dark-field signal.
inline Sinogram axdt_forward(const CoefficientVolume& eta, const AcquisitionGeometry& geom,
                             const WeightTable& weights) {
    geom.validate();
    if (!(eta.grid == geom.grid)) throw std::invalid_argument("axdt_forward: grid mismatch");
    if (weights.size() != geom.poses.size())
        throw std::invalid_argument("axdt_forward: weight table size mismatch");
    const int nc = eta.n_coeffs();
    for (const PoseWeights& pw : weights)
        if (static_cast<int>(pw.w.size()) != nc)
            throw std::invalid_argument("axdt_forward: weight count mismatch");
    Sinogram sino = Sinogram::for_geometry(geom);
    const std::size_t nvox = eta.grid.voxel_count();
    parallel_for(geom.poses.size(), [&](std::size_t p) {
        ScalarVolume comb(eta.grid);
        for (int c = 0; c < nc; ++c) {
            const double w = weights[p].w[static_cast<std::size_t>(c)];
            if (w == 0.0) continue;
            const double* plane = eta.plane(c);
            for (std::size_t i = 0; i < nvox; ++i) comb.values[i] += w * plane[i];
        }
        detail::project_one_pose(comb, geom.poses[p], sino.pose_view(static_cast<int>(p)));
    });
    return sino;
}

/// Exact adjoint of axdt_forward: eta_k^m = sum_p w_k^m(p) * Xray^T(s_p).
/// Pose backprojections are buffered in fixed batches and combined in pose
/// order, so results are bit-identical for any thread count.
inline CoefficientVolume axdt_adjoint(const Sinogram& sino, const AcquisitionGeometry& geom,
                                      const WeightTable& weights) {
    geom.validate();
    if (sino.n_poses != static_cast<int>(geom.poses.size()))
        throw std::invalid_argument("axdt_adjoint: pose count mismatch");
    if (weights.size() != geom.poses.size())
        throw std::invalid_argument("axdt_adjoint: weight table size mismatch");
    const int nc = static_cast<int>(weights.front().w.size());
    int max_degree = -1;
    for (int k = 0; k <= 64; k += 2)
        if (n_even_coeffs(k) == nc) {
            max_degree = k;
            break;
        }
    if (max_degree < 0) throw std::invalid_argument("axdt_adjoint: weight count is not a full band");
    CoefficientVolume out(geom.grid, max_degree);
    const std::size_t nvox = geom.grid.voxel_count();
    constexpr int kBatch = 32;
    const int n_poses = sino.n_poses;
    std::vector<ScalarVolume> buf;
    for (int lo = 0; lo < n_poses; lo += kBatch) {
        const int hi = std::min(n_poses, lo + kBatch);
        buf.assign(static_cast<std::size_t>(hi - lo), ScalarVolume());
        parallel_for(static_cast<std::size_t>(hi - lo), [&](std::size_t b) {
            ScalarVolume acc(geom.grid);
            detail::backproject_one_pose(sino.pose_view(lo + static_cast<int>(b)),
                                         geom.poses[static_cast<std::size_t>(lo) + b], acc);
            buf[b] = std::move(acc);
        });
        parallel_for(static_cast<std::size_t>(nc), [&](std::size_t c) {
            double* plane = out.plane(static_cast<int>(c));
            for (int p = lo; p < hi; ++p) {
                const double w = weights[static_cast<std::size_t>(p)].w[c];
                if (w == 0.0) continue;
                const double* src = buf[static_cast<std::size_t>(p - lo)].values.data();
                for (std::size_t i = 0; i < nvox; ++i) plane[i] += w * src[i];
            }
        });
    }
    return out;
}

/// axdt_forward/axdt_adjoint wrapped as a LinearOperator over flat vectors.
inline LinearOperator make_axdt_operator(const AcquisitionGeometry& geom, const WeightTable& weights,
                                         int max_degree = 4) {
    geom.validate();
    LinearOperator op;
    op.domain_dim = static_cast<std::size_t>(n_even_coeffs(max_degree)) * geom.grid.voxel_count();
    op.range_dim = geom.n_rays();
    op.apply = [geom, weights, max_degree](std::span<const double> x, std::span<double> y) {
        CoefficientVolume eta(geom.grid, max_degree);
        std::copy(x.begin(), x.end(), eta.values.begin());
        Sinogram s = axdt_forward(eta, geom, weights);
        std::copy(s.values.begin(), s.values.end(), y.begin());
    };
    op.apply_adjoint = [geom, weights](std::span<const double> y, std::span<double> x) {
        Sinogram s = Sinogram::for_geometry(geom);
        std::copy(y.begin(), y.end(), s.values.begin());
        CoefficientVolume eta = axdt_adjoint(s, geom, weights);
        std::copy(eta.values.begin(), eta.values.end(), x.begin());
    };
    return op;
}

/// Operator-norm bounds for the dark-field operator in terms of the X-ray
/// transform norm: the per-coefficient bound |w_k^m| < 1 gives
/// ||B|| <= sqrt(n_coeffs) ||A||; weighting instead by the number of degrees
/// gives the tighter but unproven K/(4pi)-style estimate.
struct BNormBounds {
    double paper_bound = 0.0;  // K / (4 pi) * anorm
    double safe_bound = 0.0;   // n_even_coeffs(K) / (4 pi) * anorm
};

inline BNormBounds bnorm_bound(const AcquisitionGeometry& geom, const WeightTable& weights,
                               double anorm, int max_degree) {
    geom.validate();
    if (!(anorm > 0.0)) throw std::invalid_argument("bnorm_bound: anorm must be > 0");
    if (weights.size() != geom.poses.size() ||
        static_cast<int>(weights.front().w.size()) != n_even_coeffs(max_degree))
        throw std::invalid_argument("bnorm_bound: weight table does not match geometry/degree");
    BNormBounds b;
    b.paper_bound = max_degree / (4.0 * std::numbers::pi) * anorm;
    b.safe_bound = n_even_coeffs(max_degree) / (4.0 * std::numbers::pi) * anorm;
    return b;
}

}  // namespace axdt
