// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "models.hpp"
#include "projector.hpp"

namespace axdt {

enum class Algorithm { cgls, nlcg, lbfgs, fgm };
enum class LineSearch { newton_raphson, barzilai_borwein, none };

inline Algorithm parse_algorithm(const std::string& s) {
    if (s == "cgls") return Algorithm::cgls;
    if (s == "nlcg") return Algorithm::nlcg;
    if (s == "lbfgs") return Algorithm::lbfgs;
    if (s == "fgm") return Algorithm::fgm;
    throw std::invalid_argument("unknown algorithm: " + s);
}

inline LineSearch parse_line_search(const std::string& s) {
    if (s == "newton_raphson" || s == "nr") return LineSearch::newton_raphson;
    if (s == "barzilai_borwein" || s == "bb") return LineSearch::barzilai_borwein;
    if (s == "none") return LineSearch::none;
    throw std::invalid_argument("unknown line search: " + s);
}

struct OptimizerConfig {
    Algorithm algorithm = Algorithm::lbfgs;
    int max_iters = 100;
    double grad_tol = 1e-8;  // relative to the gradient norm at the start
    LineSearch line_search = LineSearch::newton_raphson;
    int ls_iters = 1;
    int lbfgs_memory = 10;
    std::optional<double> fgm_step;
    std::uint64_t seed = 0;

    void validate() const {
        if (max_iters < 0) throw std::invalid_argument("OptimizerConfig: max_iters must be >= 0");
        if (!(grad_tol >= 0.0)) throw std::invalid_argument("OptimizerConfig: grad_tol must be >= 0");
        if (ls_iters < 1) throw std::invalid_argument("OptimizerConfig: ls_iters must be >= 1");
        if (lbfgs_memory < 1) throw std::invalid_argument("OptimizerConfig: lbfgs_memory must be >= 1");
        if (algorithm == Algorithm::fgm && (!fgm_step || !(*fgm_step > 0.0)))
            throw std::invalid_argument("OptimizerConfig: fgm requires a positive fgm_step");
        if (fgm_step && !(*fgm_step > 0.0))
            throw std::invalid_argument("OptimizerConfig: fgm_step must be > 0");
    }
};

enum class RunStatus { converged, max_iters, diverged, aborted, breakdown };

inline const char* to_string(RunStatus s) {
    switch (s) {
        case RunStatus::converged: return "converged";
        case RunStatus::max_iters: return "max_iters";
        case RunStatus::diverged: return "diverged";
        case RunStatus::aborted: return "aborted";
        case RunStatus::breakdown: return "breakdown";
    }
    return "?";
}

struct IterationRecord {
    int iter = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
    double step = 0.0;
    double time_s = 0.0;
    std::size_t violations = 0;
};

/// One record per completed iteration; wall time nondecreasing. For fgm the
/// per-iteration loss is evaluated at the momentum point y_k (where the
/// gradient is taken); the returned final loss is always f at the final
/// iterate.
struct ConvergenceLog {
    std::vector<IterationRecord> records;
    RunStatus status = RunStatus::max_iters;
    std::string message;
};

struct OptimResult {
    std::vector<double> x;
    ConvergenceLog log;
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline bool all_finite(std::span<const double> a) {
    for (double v : a)
        if (!std::isfinite(v)) return false;
    return true;
}

class StopWatch {
public:
    StopWatch() : start_(std::chrono::steady_clock::now()) {}
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_;
};

}  // namespace detail

struct LineSearchResult {
    double step = 0.0;
    bool fell_back = false;  // nonpositive curvature met; fixed small step used
};

/// Newton-Raphson line search on phi(t) = f(x + t dir): n_iters steps of
/// t <- t - phi'(t)/phi''(t) from t = 0, using Hessian-vector products for
/// phi''. Requires a descent direction. Nonpositive curvature falls back to
/// the fixed step 1e-3; the returned step is never below 1e-12.
inline LineSearchResult newton_raphson_ls(const ObjectiveModel& model, std::span<const double> x,
                                          std::span<const double> dir, std::span<const double> g0,
                                          int n_iters) {
    if (n_iters < 1) throw std::invalid_argument("newton_raphson_ls: n_iters must be >= 1");
    if (!model.has_hessvec())
        throw std::invalid_argument("newton_raphson_ls: model lacks Hessian-vector products");
    double phip = detail::dot(g0, dir);
    if (!(phip < 0.0))
        throw std::invalid_argument("newton_raphson_ls: direction is not a descent direction");
    const std::size_t n = x.size();
    double t = 0.0;
    std::vector<double> hd(n), xt, gt;
    for (int it = 0; it < n_iters; ++it) {
        std::span<const double> at = x;
        if (it > 0) {
            xt.assign(x.begin(), x.end());
            for (std::size_t i = 0; i < n; ++i) xt[i] += t * dir[i];
            gt.resize(n);
            model.loss_grad(xt, gt);
            phip = detail::dot(gt, dir);
            at = xt;
        }
        model.hessvec(at, dir, hd);
        const double phipp = detail::dot(dir, hd);
        if (!(phipp > 0.0) || !std::isfinite(phipp)) return {1e-3, true};
        t -= phip / phipp;
    }
    if (!std::isfinite(t)) return {1e-3, true};
    return {std::max(t, 1e-12), false};
}

/// BB1 step <s,s>/<s,y> from consecutive (x, gradient) pairs. Nonpositive or
/// non-finite denominators fall back to the bootstrap step (also used on the
/// first iteration, when no previous pair exists).
inline double barzilai_borwein_step(std::span<const double> prev_x, std::span<const double> prev_g,
                                    std::span<const double> x, std::span<const double> g,
                                    double bootstrap = 1e-6) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double s = x[i] - prev_x[i];
        const double y = g[i] - prev_g[i];
        num += s * s;
        den += s * y;
    }
    if (!std::isfinite(den) || den <= 0.0 || num == 0.0) return bootstrap;
    const double step = num / den;
    return (std::isfinite(step) && step > 0.0) ? step : bootstrap;
}

/// CGLS on min 1/2 ||op x - rhs||^2 from x = 0. Stops on max_iters, relative
/// gradient norm <= grad_tol, or (optionally) relative residual norm <=
/// residual_tol. The logged loss 1/2 ||r||^2 is monotone nonincreasing.
inline OptimResult cgls(const LinearOperator& op, std::span<const double> rhs,
                        const OptimizerConfig& config,
                        std::optional<double> residual_tol = std::nullopt) {
    config.validate();
    if (rhs.size() != op.range_dim) throw std::invalid_argument("cgls: rhs size mismatch");
    detail::StopWatch clock;
    OptimResult res;
    res.x.assign(op.domain_dim, 0.0);
    std::vector<double> r(rhs.begin(), rhs.end());
    std::vector<double> s(op.domain_dim), p(op.domain_dim), q(op.range_dim);
    op.apply_adjoint(r, s);
    const double rhs_norm = detail::norm(rhs);
    const double ref_grad = detail::norm(s);
    res.initial_loss = 0.5 * rhs_norm * rhs_norm;
    res.final_loss = res.initial_loss;
    if (ref_grad == 0.0) {
        res.log.status = RunStatus::converged;
        res.log.message = "normal-equations residual already zero";
        return res;
    }
    p = s;
    double gamma = ref_grad * ref_grad;
    res.log.status = RunStatus::max_iters;
    for (int k = 1; k <= config.max_iters; ++k) {
        op.apply(p, q);
        const double qq = detail::dot(q, q);
        if (!(qq > 0.0) || !std::isfinite(qq)) {
            res.log.status = RunStatus::breakdown;
            res.log.message = "search direction annihilated by the operator";
            break;
        }
        const double alpha = gamma / qq;
        for (std::size_t i = 0; i < res.x.size(); ++i) res.x[i] += alpha * p[i];
        for (std::size_t i = 0; i < r.size(); ++i) r[i] -= alpha * q[i];
        op.apply_adjoint(r, s);
        const double gamma_new = detail::dot(s, s);
        const double rnorm = detail::norm(r);
        std::size_t viol = 0;
        for (std::size_t i = 0; i < r.size(); ++i)
            if (rhs[i] - r[i] < -detail::kFeasTol) ++viol;
        res.final_loss = 0.5 * rnorm * rnorm;
        res.log.records.push_back(
            {k, res.final_loss, std::sqrt(gamma_new), alpha, clock.seconds(), viol});
        if (std::sqrt(gamma_new) <= config.grad_tol * ref_grad) {
            res.log.status = RunStatus::converged;
            break;
        }
        if (residual_tol && rnorm <= *residual_tol * rhs_norm) {
            res.log.status = RunStatus::converged;
            res.log.message = "relative residual below tolerance";
            break;
        }
        const double beta = gamma_new / gamma;
        gamma = gamma_new;
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = s[i] + beta * p[i];
    }
    return res;
}

namespace detail {

inline double pick_step(const ObjectiveModel& model, const OptimizerConfig& config,
                        std::span<const double> x, std::span<const double> dir,
                        std::span<const double> g, const std::vector<double>& prev_x,
                        const std::vector<double>& prev_g, bool have_prev, bool* fell_back) {
    switch (config.line_search) {
        case LineSearch::newton_raphson: {
            const LineSearchResult ls = newton_raphson_ls(model, x, dir, g, config.ls_iters);
            if (fell_back) *fell_back = ls.fell_back;
            return ls.step;
        }
        case LineSearch::barzilai_borwein:
            return have_prev ? barzilai_borwein_step(prev_x, prev_g, x, g) : 1e-6;
        case LineSearch::none:
            return config.fgm_step.value_or(1.0);
    }
    throw std::logic_error("unreachable");
}

}  // namespace detail

/// Nonlinear conjugate gradient, Polak-Ribiere+ flavor with automatic restart
/// to steepest descent whenever the combined direction fails the descent
/// test. Aborts cleanly on non-finite values.
inline OptimResult nlcg(const ObjectiveModel& model, std::span<const double> x0,
                        const OptimizerConfig& config) {
    config.validate();
    if (x0.size() != model.dim()) throw std::invalid_argument("nlcg: x0 size mismatch");
    detail::StopWatch clock;
    const std::size_t n = x0.size();
    OptimResult res;
    res.x.assign(x0.begin(), x0.end());
    std::vector<double> g(n), g_new(n), d(n), prev_x, prev_g;
    EvalResult ev = model.loss_grad(res.x, g);
    res.initial_loss = ev.loss;
    res.final_loss = ev.loss;
    const double ref_grad = detail::norm(g);
    if (ref_grad == 0.0) {
        res.log.status = RunStatus::converged;
        return res;
    }
    for (std::size_t i = 0; i < n; ++i) d[i] = -g[i];
    res.log.status = RunStatus::max_iters;
    bool have_prev = false;
    for (int k = 1; k <= config.max_iters; ++k) {
        const double step =
            detail::pick_step(model, config, res.x, d, g, prev_x, prev_g, have_prev, nullptr);
        prev_x = res.x;
        prev_g = g;
        have_prev = true;
        for (std::size_t i = 0; i < n; ++i) res.x[i] += step * d[i];
        ev = model.loss_grad(res.x, g_new);
        if (!std::isfinite(ev.loss) || !detail::all_finite(g_new)) {
            res.x = prev_x;
            res.log.status = RunStatus::aborted;
            res.log.message = "non-finite loss or gradient at iteration " + std::to_string(k);
            break;
        }
        const double gg = detail::dot(g, g);
        double beta = (detail::dot(g_new, g_new) - detail::dot(g_new, g)) / gg;
        beta = std::max(0.0, beta);
        for (std::size_t i = 0; i < n; ++i) d[i] = -g_new[i] + beta * d[i];
        if (detail::dot(d, g_new) >= 0.0)
            for (std::size_t i = 0; i < n; ++i) d[i] = -g_new[i];
        g = g_new;
        res.final_loss = ev.loss;
        const double gn = detail::norm(g);
        res.log.records.push_back({k, ev.loss, gn, step, clock.seconds(), ev.violations});
        if (gn <= config.grad_tol * ref_grad) {
            res.log.status = RunStatus::converged;
            break;
        }
    }
    return res;
}

/// Limited-memory BFGS with the two-loop recursion, initial scaling
/// gamma = <s,y>/<y,y> from the newest pair, and skipping of curvature pairs
/// with <y,s> <= 1e-12 ||y|| ||s||.
inline OptimResult lbfgs(const ObjectiveModel& model, std::span<const double> x0,
                         const OptimizerConfig& config) {
    config.validate();
    if (x0.size() != model.dim()) throw std::invalid_argument("lbfgs: x0 size mismatch");
    detail::StopWatch clock;
    const std::size_t n = x0.size();
    OptimResult res;
    res.x.assign(x0.begin(), x0.end());
    std::vector<double> g(n), g_new(n), d(n), prev_x, prev_g;
    EvalResult ev = model.loss_grad(res.x, g);
    res.initial_loss = ev.loss;
    res.final_loss = ev.loss;
    const double ref_grad = detail::norm(g);
    if (ref_grad == 0.0) {
        res.log.status = RunStatus::converged;
        return res;
    }
    struct Pair {
        std::vector<double> s, y;
        double rho;
    };
    std::deque<Pair> pairs;
    std::vector<double> alpha_buf;
    res.log.status = RunStatus::max_iters;
    bool have_prev = false;
    for (int k = 1; k <= config.max_iters; ++k) {
        // Two-loop recursion for d = -H g.
        d.assign(g.begin(), g.end());
        alpha_buf.assign(pairs.size(), 0.0);
        for (std::size_t i = pairs.size(); i-- > 0;) {
            const Pair& pr = pairs[i];
            const double a = pr.rho * detail::dot(pr.s, d);
            alpha_buf[i] = a;
            for (std::size_t j = 0; j < n; ++j) d[j] -= a * pr.y[j];
        }
        if (!pairs.empty()) {
            const Pair& last = pairs.back();
            const double gamma = 1.0 / (last.rho * detail::dot(last.y, last.y));
            for (std::size_t j = 0; j < n; ++j) d[j] *= gamma;
        }
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            const Pair& pr = pairs[i];
            const double b = pr.rho * detail::dot(pr.y, d);
            for (std::size_t j = 0; j < n; ++j) d[j] += (alpha_buf[i] - b) * pr.s[j];
        }
        for (std::size_t j = 0; j < n; ++j) d[j] = -d[j];
        if (detail::dot(d, g) >= 0.0)
            for (std::size_t j = 0; j < n; ++j) d[j] = -g[j];

        const double step =
            detail::pick_step(model, config, res.x, d, g, prev_x, prev_g, have_prev, nullptr);
        prev_x = res.x;
        prev_g = g;
        have_prev = true;
        for (std::size_t j = 0; j < n; ++j) res.x[j] += step * d[j];
        ev = model.loss_grad(res.x, g_new);
        if (!std::isfinite(ev.loss) || !detail::all_finite(g_new)) {
            res.x = prev_x;
            res.log.status = RunStatus::aborted;
            res.log.message = "non-finite loss or gradient at iteration " + std::to_string(k);
            break;
        }
        Pair pr;
        pr.s.resize(n);
        pr.y.resize(n);
        for (std::size_t j = 0; j < n; ++j) {
            pr.s[j] = res.x[j] - prev_x[j];
            pr.y[j] = g_new[j] - prev_g[j];
        }
        const double ys = detail::dot(pr.y, pr.s);
        if (ys > 1e-12 * detail::norm(pr.y) * detail::norm(pr.s)) {
            pr.rho = 1.0 / ys;
            pairs.push_back(std::move(pr));
            if (static_cast<int>(pairs.size()) > config.lbfgs_memory) pairs.pop_front();
        }
        g = g_new;
        res.final_loss = ev.loss;
        const double gn = detail::norm(g);
        res.log.records.push_back({k, ev.loss, gn, step, clock.seconds(), ev.violations});
        if (gn <= config.grad_tol * ref_grad) {
            res.log.status = RunStatus::converged;
            break;
        }
    }
    return res;
}

/// Nesterov's fast gradient method with a fixed step and momentum sequence
/// t_{k+1} = (1 + sqrt(1 + 4 t_k^2))/2, no projection and no restart. When
/// the model carries a Lipschitz bound the step is checked against (0, 2/L);
/// a step outside the interval is reported in the log message but the run
/// proceeds, relying on divergence detection (loss above 1e3 x the starting
/// loss, or non-finite) to halt.
inline OptimResult fgm(const ObjectiveModel& model, std::span<const double> x0,
                       const OptimizerConfig& config) {
    config.validate();
    if (!config.fgm_step) throw std::invalid_argument("fgm: fgm_step is required");
    if (x0.size() != model.dim()) throw std::invalid_argument("fgm: x0 size mismatch");
    const double step = *config.fgm_step;
    detail::StopWatch clock;
    const std::size_t n = x0.size();
    OptimResult res;
    res.x.assign(x0.begin(), x0.end());
    if (const std::optional<double> L = model.lipschitz_bound()) {
        if (!(step < 2.0 / *L))
            res.log.message = "step outside the guaranteed interval (0, 2/L)";
    }
    std::vector<double> y(res.x), g(n), x_new(n);
    double t = 1.0;
    EvalResult ev = model.loss_grad(y, g);
    res.initial_loss = ev.loss;
    res.final_loss = ev.loss;
    const double ref_grad = detail::norm(g);
    if (ref_grad == 0.0) {
        res.log.status = RunStatus::converged;
        return res;
    }
    const double diverge_at = 1e3 * std::max(std::abs(res.initial_loss), 1e-12);
    res.log.status = RunStatus::max_iters;
    for (int k = 1; k <= config.max_iters; ++k) {
        if (k > 1) ev = model.loss_grad(y, g);
        const double gn = detail::norm(g);
        if (!std::isfinite(ev.loss) || !detail::all_finite(g) || ev.loss > diverge_at) {
            res.log.status = RunStatus::diverged;
            res.log.message = "divergence detected at iteration " + std::to_string(k) +
                              (res.log.message.empty() ? "" : "; " + res.log.message);
            res.log.records.push_back({k, ev.loss, gn, step, clock.seconds(), ev.violations});
            break;
        }
        for (std::size_t i = 0; i < n; ++i) x_new[i] = y[i] - step * g[i];
        if (!detail::all_finite(x_new)) {
            res.log.status = RunStatus::diverged;
            res.log.message = "divergence detected at iteration " + std::to_string(k) +
                              (res.log.message.empty() ? "" : "; " + res.log.message);
            res.log.records.push_back({k, ev.loss, gn, step, clock.seconds(), ev.violations});
            break;
        }
        const double t_new = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
        const double mom = (t - 1.0) / t_new;
        for (std::size_t i = 0; i < n; ++i) y[i] = x_new[i] + mom * (x_new[i] - res.x[i]);
        res.x = x_new;
        t = t_new;
        res.log.records.push_back({k, ev.loss, gn, step, clock.seconds(), ev.violations});
        if (gn <= config.grad_tol * ref_grad) {
            res.log.status = RunStatus::converged;
            break;
        }
    }
    res.final_loss = model.loss(res.x).loss;
    return res;
}

/// Dispatch on config.algorithm for the model-driven algorithms (cgls has its
/// own linear-operator entry point).
inline OptimResult run_optimizer(const ObjectiveModel& model, std::span<const double> x0,
                                 const OptimizerConfig& config) {
    switch (config.algorithm) {
        case Algorithm::nlcg: return nlcg(model, x0, config);
        case Algorithm::lbfgs: return lbfgs(model, x0, config);
        case Algorithm::fgm: return fgm(model, x0, config);
        case Algorithm::cgls:
            throw std::invalid_argument("cgls requires the linear-operator entry point");
    }
    throw std::logic_error("unreachable");
}

}  // namespace axdt
