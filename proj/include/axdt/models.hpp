// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "geometry.hpp"
#include "parallel.hpp"
#include "projector.hpp"
#include "specfun.hpp"
#include "sphharm.hpp"

namespace axdt {

/// Phase-stepping Fourier amplitudes per ray: sample scan (a_s, b_s) and
/// reference scan (a_r, b_r), plus the step count N. Derived quantities:
/// visibility alpha = b_r/a_r, transmission T = a_s/a_r, dark-field signal
/// d = (b_s a_r)/(a_s b_r).
struct MeasurementSet {
    int n_poses = 0;
    int rows = 0;
    int cols = 0;
    int n_steps = 0;
    std::vector<double> a_s, b_s, a_r, b_r;
    std::size_t clamped_count = 0;

    std::size_t n_rays() const {
        return static_cast<std::size_t>(n_poses) * rows * cols;
    }

    void validate() const {
        if (n_poses < 1 || rows < 1 || cols < 1)
            throw std::invalid_argument("MeasurementSet: shape must be positive");
        if (n_steps < 3) throw std::invalid_argument("MeasurementSet: n_steps must be >= 3");
        const std::size_t n = n_rays();
        if (a_s.size() != n || b_s.size() != n || a_r.size() != n || b_r.size() != n)
            throw std::invalid_argument("MeasurementSet: channel size mismatch");
        for (std::size_t i = 0; i < n; ++i) {
            if (!(a_r[i] > 0.0) || !(b_r[i] > 0.0))
                throw std::invalid_argument("MeasurementSet: reference amplitudes must be positive");
            if (!(b_r[i] < a_r[i]))
                throw std::invalid_argument("MeasurementSet: visibility must lie in (0,1)");
            if (!(a_s[i] > 0.0) || !(b_s[i] >= 0.0) || !std::isfinite(a_s[i]) || !std::isfinite(b_s[i]))
                throw std::invalid_argument("MeasurementSet: sample amplitudes not sanitized");
        }
    }

    /// Clamps nonpositive sample amplitudes (possible under simulated noise)
    /// to 1e-12 * a_r and counts the affected rays; then validates.
    void sanitize() {
        clamped_count = 0;
        const std::size_t n = n_rays();
        for (std::size_t i = 0; i < n; ++i) {
            const double floor_v = 1e-12 * a_r[i];
            bool touched = false;
            if (!(a_s[i] > 0.0)) { a_s[i] = floor_v; touched = true; }
            if (!(b_s[i] > 0.0)) { b_s[i] = floor_v; touched = true; }
            if (touched) ++clamped_count;
        }
        validate();
    }
};

/// Loss value plus the feasibility-violation count observed during the same
/// evaluation (rays where a forward value that should be nonnegative is
/// below -1e-12).
struct EvalResult {
    double loss = 0.0;
    std::size_t violations = 0;
};

/// Uniform objective interface consumed by the optimizers. Implementations
/// are immutable after construction; evaluation is reentrant (an internal
/// forward-value cache is mutex-guarded).
class ObjectiveModel {
public:
    virtual ~ObjectiveModel() = default;
    virtual std::string kind() const = 0;
    virtual std::size_t dim() const = 0;
    virtual EvalResult loss(std::span<const double> x) const = 0;
    virtual EvalResult loss_grad(std::span<const double> x, std::span<double> grad) const = 0;
    virtual bool has_hessvec() const = 0;
    virtual void hessvec(std::span<const double> x, std::span<const double> v,
                         std::span<double> out) const = 0;
    /// Gradient-Lipschitz bound on the feasible set, when one is known.
    virtual std::optional<double> lipschitz_bound() const = 0;
};

namespace detail {

constexpr double kFeasTol = 1e-12;
// exp(-Q) overflows double well before Q = -kExpGuard; such rays get an
// infinite loss contribution instead of NaN arithmetic.
constexpr double kExpGuard = -300.0;

inline std::size_t count_negative(const std::vector<double>& v) {
    const std::size_t n = v.size();
    const double s = blocked_sum(n, [&](std::size_t i) { return v[i] < -kFeasTol ? 1.0 : 0.0; });
    return static_cast<std::size_t>(s);
}

inline CoefficientVolume wrap_coeffs(std::span<const double> x, const VolumeGrid& grid, int K) {
    CoefficientVolume eta(grid, K);
    if (x.size() != eta.values.size()) throw std::invalid_argument("coefficient vector size mismatch");
    std::copy(x.begin(), x.end(), eta.values.begin());
    return eta;
}

inline ScalarVolume wrap_scalar(std::span<const double> x, const VolumeGrid& grid) {
    ScalarVolume v(grid);
    if (x.size() != v.values.size()) throw std::invalid_argument("scalar vector size mismatch");
    std::copy(x.begin(), x.end(), v.values.begin());
    return v;
}

// Cache of the forward values at the most recently evaluated point, so a
// Hessian-vector product at the same point (the common line-search pattern)
// skips the forward solves. Guarded for concurrent evaluation.
struct ForwardCache {
    mutable std::mutex mtx;
    std::vector<double> x;
    std::vector<std::vector<double>> forwards;
    bool valid = false;
};

}  // namespace detail

/// Linearized least-squares model: f(eta) = 1/2 ||B eta + ln d||^2.
class M1Objective final : public ObjectiveModel {
public:
    M1Objective(AcquisitionGeometry geom, WeightTable weights, const MeasurementSet& data,
                std::optional<double> bnorm_safe = std::nullopt, int max_degree = 4)
        : geom_(std::move(geom)), weights_(std::move(weights)), max_degree_(max_degree),
          bnorm_safe_(bnorm_safe) {
        geom_.validate();
        data.validate();
        const std::size_t n = data.n_rays();
        if (n != geom_.n_rays()) throw std::invalid_argument("M1Objective: ray count mismatch");
        lnd_.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double d = (data.b_s[i] * data.a_r[i]) / (data.a_s[i] * data.b_r[i]);
            if (!(d > 0.0)) throw std::domain_error("M1Objective: dark-field signal must be > 0");
            lnd_[i] = std::log(d);
        }
    }

    std::string kind() const override { return "m1"; }
    std::size_t dim() const override {
        return static_cast<std::size_t>(n_even_coeffs(max_degree_)) * geom_.grid.voxel_count();
    }

    EvalResult loss(std::span<const double> x) const override {
        const Sinogram q = forward(x);
        return eval_on(q.values);
    }

    EvalResult loss_grad(std::span<const double> x, std::span<double> grad) const override {
        const Sinogram q = forward(x);
        const EvalResult ev = eval_on(q.values);
        Sinogram resid = q;
        for (std::size_t i = 0; i < resid.values.size(); ++i) resid.values[i] += lnd_[i];
        const CoefficientVolume g = axdt_adjoint(resid, geom_, weights_);
        std::copy(g.values.begin(), g.values.end(), grad.begin());
        return ev;
    }

    bool has_hessvec() const override { return true; }

    void hessvec(std::span<const double>, std::span<const double> v,
                 std::span<double> out) const override {
        const CoefficientVolume vv = detail::wrap_coeffs(v, geom_.grid, max_degree_);
        const Sinogram bv = axdt_forward(vv, geom_, weights_);
        const CoefficientVolume hv = axdt_adjoint(bv, geom_, weights_);
        std::copy(hv.values.begin(), hv.values.end(), out.begin());
    }

    std::optional<double> lipschitz_bound() const override {
        if (!bnorm_safe_) return std::nullopt;
        return (*bnorm_safe_) * (*bnorm_safe_);
    }

private:
    Sinogram forward(std::span<const double> x) const {
        return axdt_forward(detail::wrap_coeffs(x, geom_.grid, max_degree_), geom_, weights_);
    }
    EvalResult eval_on(const std::vector<double>& q) const {
        EvalResult ev;
        ev.loss = 0.5 * blocked_sum(q.size(), [&](std::size_t i) {
            const double r = q[i] + lnd_[i];
            return r * r;
        });
        ev.violations = detail::count_negative(q);
        return ev;
    }

    AcquisitionGeometry geom_;
    WeightTable weights_;
    int max_degree_;
    std::optional<double> bnorm_safe_;
    std::vector<double> lnd_;
};

/// Simplified Rician model, eta only:
/// f(eta) = sum_rays [ (N/4) a alpha^2 d^2 - ln I0((N/2) b alpha d) ],
/// d = exp(-B eta), with the measured sample amplitudes a = a_s, b = b_s
/// treated as known constants.
class M3Objective final : public ObjectiveModel {
public:
    M3Objective(AcquisitionGeometry geom, WeightTable weights, const MeasurementSet& data,
                std::optional<double> bnorm_safe = std::nullopt, int max_degree = 4)
        : geom_(std::move(geom)), weights_(std::move(weights)), max_degree_(max_degree),
          bnorm_safe_(bnorm_safe) {
        geom_.validate();
        data.validate();
        const std::size_t n = data.n_rays();
        if (n != geom_.n_rays()) throw std::invalid_argument("M3Objective: ray count mismatch");
        n_steps_ = data.n_steps;
        quad_coef_.resize(n);
        zeta_.resize(n);
        curv_coef_.resize(n);
        double lmax = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double alpha = data.b_r[i] / data.a_r[i];
            const double a = data.a_s[i];
            const double b = data.b_s[i];
            quad_coef_[i] = 0.25 * n_steps_ * a * alpha * alpha;
            zeta_[i] = 0.5 * n_steps_ * b * alpha;
            curv_coef_[i] = static_cast<double>(n_steps_) * a * alpha * alpha;
            lmax = std::max(lmax, n_steps_ * (a * alpha * alpha + b * alpha));
        }
        curv_max_ = lmax;
    }

    std::string kind() const override { return "m3"; }
    std::size_t dim() const override {
        return static_cast<std::size_t>(n_even_coeffs(max_degree_)) * geom_.grid.voxel_count();
    }

    EvalResult loss(std::span<const double> x) const override {
        std::vector<double> q = forward_cached(x);
        return eval_on(q);
    }

    EvalResult loss_grad(std::span<const double> x, std::span<double> grad) const override {
        const std::vector<double> q = forward_cached(x);
        const EvalResult ev = eval_on(q);
        Sinogram s = Sinogram::for_geometry(geom_);
        parallel_for(q.size(), [&](std::size_t i) {
            const double d = std::exp(-q[i]);
            const double z = zeta_[i] * d;
            s.values[i] = z * bessel_ratio(z) - 2.0 * quad_coef_[i] * d * d;
        });
        const CoefficientVolume g = axdt_adjoint(s, geom_, weights_);
        std::copy(g.values.begin(), g.values.end(), grad.begin());
        return ev;
    }

    bool has_hessvec() const override { return true; }

    void hessvec(std::span<const double> x, std::span<const double> v,
                 std::span<double> out) const override {
        const std::vector<double> q = forward_cached(x);
        const CoefficientVolume vv = detail::wrap_coeffs(v, geom_.grid, max_degree_);
        Sinogram bv = axdt_forward(vv, geom_, weights_);
        parallel_for(q.size(), [&](std::size_t i) {
            bv.values[i] *= curvature(q[i], i);
        });
        const CoefficientVolume hv = axdt_adjoint(bv, geom_, weights_);
        std::copy(hv.values.begin(), hv.values.end(), out.begin());
    }

    std::optional<double> lipschitz_bound() const override {
        if (!bnorm_safe_) return std::nullopt;
        return curv_max_ * (*bnorm_safe_) * (*bnorm_safe_);
    }

    /// Hessian diagonal factor per ray: N a alpha^2 d^2 + z^2 (r(z)^2 - 1).
    double curvature(double q, std::size_t ray) const {
        const double d = std::exp(-q);
        const double z = zeta_[ray] * d;
        const double r = bessel_ratio(z);
        return curv_coef_[ray] * d * d + z * z * (r * r - 1.0);
    }

private:
    std::vector<double> forward_cached(std::span<const double> x) const {
        std::lock_guard<std::mutex> lk(cache_.mtx);
        if (cache_.valid && cache_.x.size() == x.size() &&
            std::memcmp(cache_.x.data(), x.data(), x.size() * sizeof(double)) == 0)
            return cache_.forwards[0];
        Sinogram q = axdt_forward(detail::wrap_coeffs(x, geom_.grid, max_degree_), geom_, weights_);
        cache_.x.assign(x.begin(), x.end());
        cache_.forwards.clear();
        cache_.forwards.push_back(std::move(q.values));
        cache_.valid = true;
        return cache_.forwards[0];
    }

    EvalResult eval_on(const std::vector<double>& q) const {
        EvalResult ev;
        ev.loss = blocked_sum(q.size(), [&](std::size_t i) {
            if (q[i] < detail::kExpGuard) return std::numeric_limits<double>::infinity();
            const double d = std::exp(-q[i]);
            return quad_coef_[i] * d * d - log_i0(zeta_[i] * d);
        });
        ev.violations = detail::count_negative(q);
        return ev;
    }

    AcquisitionGeometry geom_;
    WeightTable weights_;
    int max_degree_;
    std::optional<double> bnorm_safe_;
    int n_steps_ = 0;
    std::vector<double> quad_coef_;  // (N/4) a alpha^2
    std::vector<double> zeta_;       // (N/2) b alpha
    std::vector<double> curv_coef_;  // N a alpha^2
    double curv_max_ = 0.0;
    mutable detail::ForwardCache cache_;
};

/// Full statistical model, joint unknown x = [mu | eta]:
/// f(mu, eta) = sum_rays [ 3/2 ln a_mu
///                         + N (2 a^2 + 2 a_mu^2 + b^2 + (alpha a_mu d)^2) / (4 a_mu)
///                         - ln I0((N/2) b alpha d) ],
/// a_mu = a_r exp(-A mu), d = exp(-B eta). No gradient-Lipschitz bound is
/// known for this model.
class M2Objective final : public ObjectiveModel {
public:
    M2Objective(AcquisitionGeometry geom, WeightTable weights, const MeasurementSet& data,
                int max_degree = 4)
        : geom_(std::move(geom)), weights_(std::move(weights)), max_degree_(max_degree) {
        geom_.validate();
        data.validate();
        const std::size_t n = data.n_rays();
        if (n != geom_.n_rays()) throw std::invalid_argument("M2Objective: ray count mismatch");
        n_steps_ = data.n_steps;
        a_ = data.a_s;
        b_ = data.b_s;
        a_r_ = data.a_r;
        alpha_.resize(n);
        for (std::size_t i = 0; i < n; ++i) alpha_[i] = data.b_r[i] / data.a_r[i];
    }

    std::string kind() const override { return "m2"; }
    std::size_t n_mu() const { return geom_.grid.voxel_count(); }
    std::size_t n_eta() const {
        return static_cast<std::size_t>(n_even_coeffs(max_degree_)) * geom_.grid.voxel_count();
    }
    std::size_t dim() const override { return n_mu() + n_eta(); }

    EvalResult loss(std::span<const double> x) const override {
        const auto [p, q] = forward_cached(x);
        return eval_on(p, q);
    }

    EvalResult loss_grad(std::span<const double> x, std::span<double> grad) const override {
        const auto [p, q] = forward_cached(x);
        const EvalResult ev = eval_on(p, q);
        Sinogram sp = Sinogram::for_geometry(geom_);
        Sinogram sq = Sinogram::for_geometry(geom_);
        const double N = n_steps_;
        parallel_for(p.size(), [&](std::size_t i) {
            const double amu = std::max(a_r_[i] * std::exp(-p[i]), 1e-300);
            const double d = std::exp(-q[i]);
            const double al2d2 = alpha_[i] * alpha_[i] * d * d;
            sp.values[i] = -1.5 + 0.25 * N *
                ((2.0 * a_[i] * a_[i] + b_[i] * b_[i]) / amu - (2.0 + al2d2) * amu);
            const double z = 0.5 * N * b_[i] * alpha_[i] * d;
            sq.values[i] = z * bessel_ratio(z) - 0.5 * N * al2d2 * amu;
        });
        const ScalarVolume gmu = backproject(sp, geom_);
        const CoefficientVolume geta = axdt_adjoint(sq, geom_, weights_);
        std::copy(gmu.values.begin(), gmu.values.end(), grad.begin());
        std::copy(geta.values.begin(), geta.values.end(), grad.begin() + static_cast<std::ptrdiff_t>(n_mu()));
        return ev;
    }

    bool has_hessvec() const override { return true; }

    void hessvec(std::span<const double> x, std::span<const double> v,
                 std::span<double> out) const override {
        const auto [p, q] = forward_cached(x);
        const ScalarVolume vmu = detail::wrap_scalar(v.first(n_mu()), geom_.grid);
        const CoefficientVolume veta =
            detail::wrap_coeffs(v.subspan(n_mu()), geom_.grid, max_degree_);
        Sinogram ap = project(vmu, geom_);
        Sinogram bq = axdt_forward(veta, geom_, weights_);
        Sinogram rp = Sinogram::for_geometry(geom_);
        Sinogram rq = Sinogram::for_geometry(geom_);
        const double N = n_steps_;
        parallel_for(p.size(), [&](std::size_t i) {
            const double amu = std::max(a_r_[i] * std::exp(-p[i]), 1e-300);
            const double d = std::exp(-q[i]);
            const double al2d2 = alpha_[i] * alpha_[i] * d * d;
            const double z = 0.5 * N * b_[i] * alpha_[i] * d;
            const double r = bessel_ratio(z);
            const double h_pp = 0.25 * N *
                ((2.0 * a_[i] * a_[i] + b_[i] * b_[i]) / amu + (2.0 + al2d2) * amu);
            const double h_pq = 0.5 * N * al2d2 * amu;
            const double h_qq = N * amu * al2d2 + z * z * (r * r - 1.0);
            rp.values[i] = h_pp * ap.values[i] + h_pq * bq.values[i];
            rq.values[i] = h_pq * ap.values[i] + h_qq * bq.values[i];
        });
        const ScalarVolume omu = backproject(rp, geom_);
        const CoefficientVolume oeta = axdt_adjoint(rq, geom_, weights_);
        std::copy(omu.values.begin(), omu.values.end(), out.begin());
        std::copy(oeta.values.begin(), oeta.values.end(), out.begin() + static_cast<std::ptrdiff_t>(n_mu()));
    }

    std::optional<double> lipschitz_bound() const override { return std::nullopt; }

private:
    std::pair<std::vector<double>, std::vector<double>> forward_cached(
        std::span<const double> x) const {
        std::lock_guard<std::mutex> lk(cache_.mtx);
        if (cache_.valid && cache_.x.size() == x.size() &&
            std::memcmp(cache_.x.data(), x.data(), x.size() * sizeof(double)) == 0)
            return {cache_.forwards[0], cache_.forwards[1]};
        Sinogram p = project(detail::wrap_scalar(x.first(n_mu()), geom_.grid), geom_);
        Sinogram q = axdt_forward(detail::wrap_coeffs(x.subspan(n_mu()), geom_.grid, max_degree_),
                                  geom_, weights_);
        cache_.x.assign(x.begin(), x.end());
        cache_.forwards.clear();
        cache_.forwards.push_back(std::move(p.values));
        cache_.forwards.push_back(std::move(q.values));
        cache_.valid = true;
        return {cache_.forwards[0], cache_.forwards[1]};
    }

    EvalResult eval_on(const std::vector<double>& p, const std::vector<double>& q) const {
        EvalResult ev;
        const double N = n_steps_;
        ev.loss = blocked_sum(p.size(), [&](std::size_t i) {
            if (p[i] < detail::kExpGuard || q[i] < detail::kExpGuard)
                return std::numeric_limits<double>::infinity();
            const double amu = std::max(a_r_[i] * std::exp(-p[i]), 1e-300);
            const double d = std::exp(-q[i]);
            const double admu = alpha_[i] * amu * d;
            return 1.5 * std::log(amu) +
                   0.25 * N *
                       (2.0 * a_[i] * a_[i] + 2.0 * amu * amu + b_[i] * b_[i] + admu * admu) / amu -
                   log_i0(0.5 * N * b_[i] * alpha_[i] * d);
        });
        ev.violations = detail::count_negative(p) + detail::count_negative(q);
        return ev;
    }

    AcquisitionGeometry geom_;
    WeightTable weights_;
    int max_degree_;
    int n_steps_ = 0;
    std::vector<double> a_, b_, a_r_, alpha_;
    mutable detail::ForwardCache cache_;
};

enum class ModelKind { m1, m2, m3 };

inline ModelKind parse_model_kind(const std::string& s) {
    if (s == "m1") return ModelKind::m1;
    if (s == "m2") return ModelKind::m2;
    if (s == "m3") return ModelKind::m3;
    throw std::invalid_argument("unknown model kind: " + s);
}

inline std::unique_ptr<ObjectiveModel> make_model(ModelKind kind, const AcquisitionGeometry& geom,
                                                  const WeightTable& weights,
                                                  const MeasurementSet& data,
                                                  std::optional<double> bnorm_safe = std::nullopt,
                                                  int max_degree = 4) {
    switch (kind) {
        case ModelKind::m1:
            return std::make_unique<M1Objective>(geom, weights, data, bnorm_safe, max_degree);
        case ModelKind::m2:
            return std::make_unique<M2Objective>(geom, weights, data, max_degree);
        case ModelKind::m3:
            return std::make_unique<M3Objective>(geom, weights, data, bnorm_safe, max_degree);
    }
    throw std::logic_error("unreachable");
}

// Volume-typed convenience entry points used by tests and tools.

inline std::pair<double, CoefficientVolume> m1_loss_grad(const CoefficientVolume& eta,
                                                         const MeasurementSet& data,
                                                         const AcquisitionGeometry& geom,
                                                         const WeightTable& weights) {
    const M1Objective model(geom, weights, data, std::nullopt, eta.max_degree);
    CoefficientVolume grad(eta.grid, eta.max_degree);
    const EvalResult ev = model.loss_grad(eta.values, grad.values);
    return {ev.loss, std::move(grad)};
}

inline double m2_loss(const ScalarVolume& mu, const CoefficientVolume& eta,
                      const MeasurementSet& data, const AcquisitionGeometry& geom,
                      const WeightTable& weights) {
    const M2Objective model(geom, weights, data, eta.max_degree);
    std::vector<double> x(model.dim());
    std::copy(mu.values.begin(), mu.values.end(), x.begin());
    std::copy(eta.values.begin(), eta.values.end(), x.begin() + static_cast<std::ptrdiff_t>(model.n_mu()));
    return model.loss(x).loss;
}

inline std::pair<ScalarVolume, CoefficientVolume> m2_grad(const ScalarVolume& mu,
                                                          const CoefficientVolume& eta,
                                                          const MeasurementSet& data,
                                                          const AcquisitionGeometry& geom,
                                                          const WeightTable& weights) {
    const M2Objective model(geom, weights, data, eta.max_degree);
    std::vector<double> x(model.dim()), g(model.dim());
    std::copy(mu.values.begin(), mu.values.end(), x.begin());
    std::copy(eta.values.begin(), eta.values.end(), x.begin() + static_cast<std::ptrdiff_t>(model.n_mu()));
    model.loss_grad(x, g);
    ScalarVolume gmu(mu.grid);
    CoefficientVolume geta(eta.grid, eta.max_degree);
    std::copy(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(model.n_mu()), gmu.values.begin());
    std::copy(g.begin() + static_cast<std::ptrdiff_t>(model.n_mu()), g.end(), geta.values.begin());
    return {std::move(gmu), std::move(geta)};
}

inline double m3_loss(const CoefficientVolume& eta, const MeasurementSet& data,
                      const AcquisitionGeometry& geom, const WeightTable& weights) {
    const M3Objective model(geom, weights, data, std::nullopt, eta.max_degree);
    return model.loss(eta.values).loss;
}

inline CoefficientVolume m3_grad(const CoefficientVolume& eta, const MeasurementSet& data,
                                 const AcquisitionGeometry& geom, const WeightTable& weights) {
    const M3Objective model(geom, weights, data, std::nullopt, eta.max_degree);
    CoefficientVolume grad(eta.grid, eta.max_degree);
    model.loss_grad(eta.values, grad.values);
    return grad;
}

inline CoefficientVolume m3_hessvec(const CoefficientVolume& eta, const MeasurementSet& data,
                                    const CoefficientVolume& v, const AcquisitionGeometry& geom,
                                    const WeightTable& weights) {
    const M3Objective model(geom, weights, data, std::nullopt, eta.max_degree);
    CoefficientVolume out(eta.grid, eta.max_degree);
    model.hessvec(eta.values, v.values, out.values);
    return out;
}

}  // namespace axdt
