// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "geometry.hpp"
#include "models.hpp"
#include "projector.hpp"
#include "sphharm.hpp"

// On-disk containers: every gridded dataset is a pair of files sharing one
// stem, <stem>.json (metadata) and <stem>.raw (little-endian float64
// payload, x-fastest). Geometry travels as a plain text file of Euler-angle
// poses. Readers validate metadata before touching the payload.

static_assert(std::endian::native == std::endian::little,
              "raw payloads are little-endian; big-endian hosts unsupported");

namespace axdt {

namespace detail {

inline void write_raw(const std::filesystem::path& path, const std::vector<double>& values) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    f.write(reinterpret_cast<const char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!f) throw std::runtime_error("short write: " + path.string());
}

inline std::vector<double> read_raw(const std::filesystem::path& path, std::size_t count) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for read: " + path.string());
    std::vector<double> values(count);
    f.read(reinterpret_cast<char*>(values.data()),
           static_cast<std::streamsize>(count * sizeof(double)));
    if (f.gcount() != static_cast<std::streamsize>(count * sizeof(double)))
        throw std::runtime_error("payload size mismatch: " + path.string());
    return values;
}

inline nlohmann::json read_meta(const std::filesystem::path& stem, const std::string& kind) {
    std::ifstream f(stem.string() + ".json");
    if (!f) throw std::runtime_error("cannot open metadata: " + stem.string() + ".json");
    nlohmann::json meta = nlohmann::json::parse(f);
    if (meta.value("kind", "") != kind)
        throw std::runtime_error("metadata kind mismatch in " + stem.string() + ".json (expected " +
                                 kind + ")");
    if (meta.value("dtype", "") != "float64" || meta.value("order", "") != "x-fastest")
        throw std::runtime_error("unsupported payload encoding in " + stem.string() + ".json");
    return meta;
}

inline void write_meta(const std::filesystem::path& stem, const nlohmann::json& meta) {
    std::ofstream f(stem.string() + ".json");
    if (!f) throw std::runtime_error("cannot open metadata for write: " + stem.string() + ".json");
    f << meta.dump(2) << "\n";
}

inline nlohmann::json grid_meta(const VolumeGrid& g) {
    return {{"dims", g.dims},
            {"spacing", {g.spacing[0], g.spacing[1], g.spacing[2]}},
            {"origin", {g.origin[0], g.origin[1], g.origin[2]}}};
}

inline VolumeGrid grid_from_meta(const nlohmann::json& meta) {
    const auto d = meta.at("dims");
    const auto s = meta.at("spacing");
    const auto o = meta.at("origin");
    return VolumeGrid({d.at(0).get<int>(), d.at(1).get<int>(), d.at(2).get<int>()},
                      Vec3(s.at(0).get<double>(), s.at(1).get<double>(), s.at(2).get<double>()),
                      Vec3(o.at(0).get<double>(), o.at(1).get<double>(), o.at(2).get<double>()));
}

}  // namespace detail

inline void write_scalar_volume(const std::filesystem::path& stem, const ScalarVolume& vol) {
    nlohmann::json meta = detail::grid_meta(vol.grid);
    meta["kind"] = "scalar_volume";
    meta["dtype"] = "float64";
    meta["order"] = "x-fastest";
    detail::write_meta(stem, meta);
    detail::write_raw(stem.string() + ".raw", vol.values);
}

inline ScalarVolume read_scalar_volume(const std::filesystem::path& stem) {
    const nlohmann::json meta = detail::read_meta(stem, "scalar_volume");
    ScalarVolume vol(detail::grid_from_meta(meta));
    vol.values = detail::read_raw(stem.string() + ".raw", vol.grid.voxel_count());
    return vol;
}

inline void write_coefficient_volume(const std::filesystem::path& stem, const CoefficientVolume& vol) {
    nlohmann::json meta = detail::grid_meta(vol.grid);
    meta["kind"] = "coefficient_volume";
    meta["dtype"] = "float64";
    meta["order"] = "x-fastest";
    meta["max_degree"] = vol.max_degree;
    meta["coeff_count"] = vol.n_coeffs();
    meta["coeff_ordering"] = "(k,m) lexicographic, even k only, m = -k..k";
    detail::write_meta(stem, meta);
    detail::write_raw(stem.string() + ".raw", vol.values);
}

inline CoefficientVolume read_coefficient_volume(const std::filesystem::path& stem) {
    const nlohmann::json meta = detail::read_meta(stem, "coefficient_volume");
    CoefficientVolume vol(detail::grid_from_meta(meta), meta.at("max_degree").get<int>());
    if (meta.at("coeff_count").get<int>() != vol.n_coeffs())
        throw std::runtime_error("coefficient count mismatch: " + stem.string());
    vol.values = detail::read_raw(stem.string() + ".raw", vol.values.size());
    return vol;
}

inline void write_sinogram(const std::filesystem::path& stem, const Sinogram& sino) {
    nlohmann::json meta = {{"kind", "sinogram"}, {"dtype", "float64"}, {"order", "x-fastest"},
                           {"n_poses", sino.n_poses}, {"rows", sino.rows}, {"cols", sino.cols}};
    detail::write_meta(stem, meta);
    detail::write_raw(stem.string() + ".raw", sino.values);
}

inline Sinogram read_sinogram(const std::filesystem::path& stem) {
    const nlohmann::json meta = detail::read_meta(stem, "sinogram");
    Sinogram sino(meta.at("n_poses").get<int>(), meta.at("rows").get<int>(),
                  meta.at("cols").get<int>());
    sino.values = detail::read_raw(stem.string() + ".raw", sino.size());
    return sino;
}

/// The four amplitude channels are stored back to back in one raw file, in
/// the order a_s, b_s, a_r, b_r.
inline void write_measurement_set(const std::filesystem::path& stem, const MeasurementSet& meas) {
    meas.validate();
    nlohmann::json meta = {{"kind", "measurements"}, {"dtype", "float64"},
                           {"order", "x-fastest"},  {"n_poses", meas.n_poses},
                           {"rows", meas.rows},     {"cols", meas.cols},
                           {"n_steps", meas.n_steps}, {"clamped_count", meas.clamped_count},
                           {"channels", {"a_s", "b_s", "a_r", "b_r"}}};
    detail::write_meta(stem, meta);
    std::vector<double> all;
    all.reserve(4 * meas.n_rays());
    for (const auto* ch : {&meas.a_s, &meas.b_s, &meas.a_r, &meas.b_r})
        all.insert(all.end(), ch->begin(), ch->end());
    detail::write_raw(stem.string() + ".raw", all);
}

inline MeasurementSet read_measurement_set(const std::filesystem::path& stem) {
    const nlohmann::json meta = detail::read_meta(stem, "measurements");
    MeasurementSet meas;
    meas.n_poses = meta.at("n_poses").get<int>();
    meas.rows = meta.at("rows").get<int>();
    meas.cols = meta.at("cols").get<int>();
    meas.n_steps = meta.at("n_steps").get<int>();
    meas.clamped_count = meta.value("clamped_count", std::size_t{0});
    const std::size_t n = meas.n_rays();
    const std::vector<double> all = detail::read_raw(stem.string() + ".raw", 4 * n);
    const auto channel = [&](std::size_t c) {
        return std::vector<double>(all.begin() + static_cast<std::ptrdiff_t>(c * n),
                                   all.begin() + static_cast<std::ptrdiff_t>((c + 1) * n));
    };
    meas.a_s = channel(0);
    meas.b_s = channel(1);
    meas.a_r = channel(2);
    meas.b_r = channel(3);
    meas.validate();
    return meas;
}

/// Geometry text format, one record per line:
///   grid nx ny nz sx sy sz ox oy oz
///   detector rows cols pitch
///   pose psi theta phi          (one line per pose, Z-X'-Z'' Euler angles)
/// Angles and lengths are printed with 17 significant digits so a write-read
/// round trip is value-exact.
inline void write_geometry(const std::filesystem::path& path, const AcquisitionGeometry& geom) {
    geom.validate();
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    char buf[512];
    const VolumeGrid& g = geom.grid;
    std::snprintf(buf, sizeof buf, "grid %d %d %d %.17g %.17g %.17g %.17g %.17g %.17g\n", g.dims[0],
                  g.dims[1], g.dims[2], g.spacing[0], g.spacing[1], g.spacing[2], g.origin[0],
                  g.origin[1], g.origin[2]);
    f << buf;
    const DetectorSpec& det = geom.poses.front().detector;
    std::snprintf(buf, sizeof buf, "detector %d %d %.17g\n", det.rows, det.cols, det.pitch);
    f << buf;
    for (const Pose& p : geom.poses) {
        const auto e = euler_from_rotation(p.rotation);
        std::snprintf(buf, sizeof buf, "pose %.17g %.17g %.17g\n", e[0], e[1], e[2]);
        f << buf;
    }
    if (!f) throw std::runtime_error("short write: " + path.string());
}

inline AcquisitionGeometry read_geometry(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open for read: " + path.string());
    AcquisitionGeometry geom;
    std::optional<DetectorSpec> det;
    bool have_grid = false;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        std::string tag;
        ss >> tag;
        const auto fail = [&](const char* why) {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + why);
        };
        if (tag == "grid") {
            std::array<int, 3> d{};
            Vec3 sp, org;
            if (!(ss >> d[0] >> d[1] >> d[2] >> sp[0] >> sp[1] >> sp[2] >> org[0] >> org[1] >> org[2]))
                fail("malformed grid line");
            geom.grid = VolumeGrid(d, sp, org);
            have_grid = true;
        } else if (tag == "detector") {
            DetectorSpec ds;
            if (!(ss >> ds.rows >> ds.cols >> ds.pitch)) fail("malformed detector line");
            ds.validate();
            det = ds;
        } else if (tag == "pose") {
            if (!det) fail("pose before detector line");
            double psi, theta, phi;
            if (!(ss >> psi >> theta >> phi)) fail("malformed pose line");
            geom.poses.push_back(make_pose(psi, theta, phi, *det));
        } else {
            fail("unknown record tag");
        }
    }
    if (!have_grid) throw std::runtime_error(path.string() + ": missing grid line");
    geom.validate();
    return geom;
}

inline void write_convergence_csv(const std::filesystem::path& path, const auto& log) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open for write: " + path.string());
    f << "iter,loss,grad_norm,step,time_s,violations\n";
    char buf[256];
    for (const auto& rec : log.records) {
        std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.6f,%zu\n", rec.iter, rec.loss,
                      rec.grad_norm, rec.step, rec.time_s, rec.violations);
        f << buf;
    }
}

/// Content hash for caching pose weights: FNV-1a over the exact bytes of the
/// geometry parameters, the degree and a quadrature tag.
inline std::uint64_t geometry_hash(const AcquisitionGeometry& geom, int max_degree,
                                   std::uint64_t quad_tag) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    const auto mix = [&h](const void* p, std::size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    const auto mix_d = [&](double v) { mix(&v, sizeof v); };
    const auto mix_i = [&](std::int64_t v) { mix(&v, sizeof v); };
    mix_i(max_degree);
    mix_i(static_cast<std::int64_t>(quad_tag));
    for (int a = 0; a < 3; ++a) mix_i(geom.grid.dims[a]);
    for (int a = 0; a < 3; ++a) mix_d(geom.grid.spacing[a]);
    for (int a = 0; a < 3; ++a) mix_d(geom.grid.origin[a]);
    mix_i(static_cast<std::int64_t>(geom.poses.size()));
    for (const Pose& p : geom.poses) {
        mix_i(p.detector.rows);
        mix_i(p.detector.cols);
        mix_d(p.detector.pitch);
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) mix_d(p.rotation(r, c));
    }
    return h;
}

inline void write_weight_table(const std::filesystem::path& stem, const WeightTable& weights,
                               std::uint64_t hash, int max_degree) {
    const int nc = static_cast<int>(weights.front().w.size());
    std::vector<double> flat;
    flat.reserve(weights.size() * static_cast<std::size_t>(nc));
    for (const PoseWeights& pw : weights) flat.insert(flat.end(), pw.w.begin(), pw.w.end());
    nlohmann::json meta = {{"kind", "weight_table"},
                           {"dtype", "float64"},
                           {"order", "x-fastest"},
                           {"n_poses", weights.size()},
                           {"coeff_count", nc},
                           {"max_degree", max_degree},
                           {"geometry_hash", hash}};
    detail::write_meta(stem, meta);
    detail::write_raw(stem.string() + ".raw", flat);
}

inline std::optional<WeightTable> try_read_weight_table(const std::filesystem::path& stem,
                                                        std::uint64_t hash) {
    if (!std::filesystem::exists(stem.string() + ".json")) return std::nullopt;
    const nlohmann::json meta = detail::read_meta(stem, "weight_table");
    if (meta.at("geometry_hash").get<std::uint64_t>() != hash) return std::nullopt;
    const std::size_t n_poses = meta.at("n_poses").get<std::size_t>();
    const int nc = meta.at("coeff_count").get<int>();
    const std::vector<double> flat =
        detail::read_raw(stem.string() + ".raw", n_poses * static_cast<std::size_t>(nc));
    WeightTable wt(n_poses);
    for (std::size_t p = 0; p < n_poses; ++p)
        wt[p].w.assign(flat.begin() + static_cast<std::ptrdiff_t>(p * nc),
                       flat.begin() + static_cast<std::ptrdiff_t>((p + 1) * nc));
    return wt;
}

/// Loads the cached weight table for this geometry/degree if present and
/// hash-matching, otherwise computes and caches it. The quadrature grid is
/// identified by a tag mixed into the hash.
inline WeightTable load_or_compute_weights(const AcquisitionGeometry& geom, int max_degree,
                                           const SphereGrid& quad, std::uint64_t quad_tag,
                                           const std::optional<std::filesystem::path>& cache_stem) {
    const std::uint64_t hash = geometry_hash(geom, max_degree, quad_tag);
    if (cache_stem) {
        if (auto cached = try_read_weight_table(*cache_stem, hash)) return *cached;
    }
    WeightTable wt = compute_all_pose_weights(geom, quad, max_degree);
    if (cache_stem) write_weight_table(*cache_stem, wt, hash, max_degree);
    return wt;
}

}  // namespace axdt
