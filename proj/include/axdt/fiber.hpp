// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "geometry.hpp"
#include "parallel.hpp"
#include "sphharm.hpp"

namespace axdt {

/// Legendre polynomial at the origin, P_k(0) = (-1)^(k/2) (k-1)!!/k!! for
/// even k (zero for odd k).
inline double legendre_at_zero(int k) {
    if (k < 0) throw std::invalid_argument("legendre_at_zero: negative degree");
    if (k % 2 != 0) return 0.0;
    double v = 1.0;
    for (int j = 2; j <= k; j += 2) v *= -static_cast<double>(j - 1) / j;
    return v;
}

/// Funk-Radon transform in the harmonic domain: coefficients of degree k are
/// scaled by 2 pi P_k(0). Maps scattering coefficients to an orientation
/// distribution whose maxima sit along fiber axes.
inline std::vector<double> funk_radon(std::span<const double> coeffs, int max_degree) {
    if (static_cast<int>(coeffs.size()) != n_even_coeffs(max_degree))
        throw std::invalid_argument("funk_radon: coefficient count does not match degree");
    std::vector<double> out(coeffs.size());
    std::size_t c = 0;
    for (int k = 0; k <= max_degree; k += 2) {
        const double scale = 2.0 * std::numbers::pi * legendre_at_zero(k);
        for (int m = -k; m <= k; ++m) out[c] = scale * coeffs[c], ++c;
    }
    return out;
}

/// Mean of the scattering function over the sphere: eta_0^0 / (2 sqrt(pi)).
inline double scattering_strength(std::span<const double> coeffs) {
    if (coeffs.empty()) throw std::invalid_argument("scattering_strength: empty coefficients");
    return coeffs[0] / (2.0 * std::sqrt(std::numbers::pi));
}

/// Per-voxel scattering strength map.
inline ScalarVolume strength_volume(const CoefficientVolume& eta) {
    ScalarVolume out(eta.grid);
    const double* c0 = eta.plane(0);
    const double scale = 1.0 / (2.0 * std::sqrt(std::numbers::pi));
    for (std::size_t v = 0; v < out.values.size(); ++v) out.values[v] = scale * c0[v];
    return out;
}

/// Precomputed even-harmonic basis on an evaluation sphere, for repeated
/// function evaluation across voxels.
class OdfSampler {
public:
    OdfSampler(const SphereGrid& grid, int max_degree)
        : grid_(&grid), n_coeffs_(n_even_coeffs(max_degree)) {
        if (!grid.has_adjacency())
            throw std::invalid_argument("OdfSampler: evaluation grid needs adjacency");
        basis_.resize(grid.n_nodes() * static_cast<std::size_t>(n_coeffs_));
        for (std::size_t i = 0; i < grid.n_nodes(); ++i)
            eval_even_basis(max_degree, grid.nodes[i],
                            basis_.data() + i * static_cast<std::size_t>(n_coeffs_));
    }

    const SphereGrid& grid() const { return *grid_; }
    int n_coeffs() const { return n_coeffs_; }

    void eval(std::span<const double> coeffs, std::span<double> values) const {
        for (std::size_t i = 0; i < grid_->n_nodes(); ++i) {
            const double* row = basis_.data() + i * static_cast<std::size_t>(n_coeffs_);
            double s = 0.0;
            for (int c = 0; c < n_coeffs_; ++c) s += row[c] * coeffs[static_cast<std::size_t>(c)];
            values[i] = s;
        }
    }

private:
    const SphereGrid* grid_;
    int n_coeffs_;
    std::vector<double> basis_;
};

namespace detail {

/// Flips u into the canonical hemisphere: z > 0, ties broken by y > 0, then
/// x > 0.
inline Vec3 canonical_direction(const Vec3& u) {
    constexpr double tol = 1e-12;
    double key = u[2];
    if (std::abs(key) < tol) key = u[1];
    if (std::abs(key) < tol) key = u[0];
    return key < 0.0 ? Vec3(-u) : u;
}

}  // namespace detail

/// Strict local maximum of the sampled function with the largest value; ties
/// pick the lowest node index. Returns nullopt when no strict local maximum
/// exists (constant or all-zero functions).
inline std::optional<Vec3> odf_maximum(std::span<const double> values, const SphereGrid& grid) {
    if (!grid.has_adjacency()) throw std::invalid_argument("odf_maximum: grid needs adjacency");
    if (values.size() != grid.n_nodes())
        throw std::invalid_argument("odf_maximum: value count does not match grid");
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < grid.n_nodes(); ++i) {
        bool strict = true;
        for (std::uint32_t j : grid.neighbors(i))
            if (!(values[i] > values[j])) {
                strict = false;
                break;
            }
        if (strict && (!best || values[i] > values[*best])) best = i;
    }
    if (!best) return std::nullopt;
    return detail::canonical_direction(grid.nodes[*best]);
}

/// Evaluates the harmonic expansion on the sampler grid and returns its
/// strict maximum direction.
inline std::optional<Vec3> odf_maximum(std::span<const double> odf_coeffs,
                                       const OdfSampler& sampler) {
    std::vector<double> values(sampler.grid().n_nodes());
    sampler.eval(odf_coeffs, values);
    return odf_maximum(values, sampler.grid());
}

/// Extracted fiber directions with per-voxel strength and inclusion mask.
/// Masked-out voxels carry a zero direction.
struct FiberField {
    VolumeGrid grid;
    std::vector<Vec3> direction;
    std::vector<double> strength;
    std::vector<std::uint8_t> mask;

    std::size_t n_masked_in() const {
        std::size_t n = 0;
        for (std::uint8_t m : mask) n += m;
        return n;
    }
};

/// Keeps only voxels at or above the strength threshold; directions of
/// excluded voxels are zeroed.
inline FiberField threshold_mask(FiberField field, double threshold) {
    for (std::size_t v = 0; v < field.mask.size(); ++v)
        if (field.mask[v] && field.strength[v] < threshold) {
            field.mask[v] = 0;
            field.direction[v] = Vec3::Zero();
        }
    return field;
}

/// Funk-Radon fiber extraction: per voxel, transform the scattering
/// coefficients, locate the strict maximum on the evaluation sphere, and mask
/// voxels with no maximum or with strength below the threshold.
inline FiberField extract_fiber_field(const CoefficientVolume& eta, const SphereGrid& eval_grid,
                                      double threshold = 0.0) {
    const OdfSampler sampler(eval_grid, eta.max_degree);
    FiberField field;
    field.grid = eta.grid;
    const std::size_t nv = eta.grid.voxel_count();
    field.direction.assign(nv, Vec3::Zero());
    field.strength.assign(nv, 0.0);
    field.mask.assign(nv, 0);
    const int nc = eta.n_coeffs();
    parallel_for(nv, [&](std::size_t v) {
        std::vector<double> coeffs(static_cast<std::size_t>(nc));
        for (int c = 0; c < nc; ++c) coeffs[static_cast<std::size_t>(c)] = eta.at(c, v);
        field.strength[v] = scattering_strength(coeffs);
        const std::vector<double> odf = funk_radon(coeffs, eta.max_degree);
        if (const auto dir = odf_maximum(odf, sampler)) {
            field.direction[v] = *dir;
            field.mask[v] = 1;
        }
    });
    return threshold_mask(std::move(field), threshold);
}

struct VolumeStats {
    std::size_t count = 0;
    double mean = 0.0;
    double variance = 0.0;
    double q95 = 0.0;
};

/// Population statistics of the selected values. q95 interpolates linearly
/// between order statistics at rank 0.95 (n - 1). An optional mask selects
/// the voxels (nonzero = included). Throws when the selection is empty.
inline VolumeStats volume_stats(std::span<const double> values,
                                std::span<const std::uint8_t> mask = {}) {
    if (!mask.empty() && mask.size() != values.size())
        throw std::invalid_argument("volume_stats: mask size mismatch");
    std::vector<double> sel;
    sel.reserve(values.size());
    for (std::size_t i = 0; i < values.size(); ++i)
        if (mask.empty() || mask[i]) sel.push_back(values[i]);
    if (sel.empty()) throw std::invalid_argument("volume_stats: empty selection");
    VolumeStats st;
    st.count = sel.size();
    for (double v : sel) st.mean += v;
    st.mean /= static_cast<double>(sel.size());
    for (double v : sel) st.variance += (v - st.mean) * (v - st.mean);
    st.variance /= static_cast<double>(sel.size());
    std::sort(sel.begin(), sel.end());
    const double pos = 0.95 * static_cast<double>(sel.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(lo);
    st.q95 = lo + 1 < sel.size() ? sel[lo] * (1.0 - frac) + sel[lo + 1] * frac : sel[lo];
    return st;
}

/// One row per voxel: world coordinates of the voxel center, fiber direction
/// (zero when masked out), scattering strength, and masked = 1 when the voxel
/// was excluded.
inline void write_fiber_csv(const std::filesystem::path& path, const FiberField& field) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_fiber_csv: cannot open " + path.string());
    out << "x,y,z,dx,dy,dz,strength,masked\n";
    char buf[320];
    for (int k = 0; k < field.grid.dims[2]; ++k)
        for (int j = 0; j < field.grid.dims[1]; ++j)
            for (int i = 0; i < field.grid.dims[0]; ++i) {
                const std::size_t v = field.grid.index(i, j, k);
                const Vec3 p = field.grid.voxel_center(i, j, k);
                const Vec3& d = field.direction[v];
                std::snprintf(buf, sizeof buf,
                              "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d\n", p[0], p[1], p[2],
                              d[0], d[1], d[2], field.strength[v], field.mask[v] ? 0 : 1);
                out << buf;
            }
    if (!out) throw std::runtime_error("write_fiber_csv: write failed");
}

}  // namespace axdt
