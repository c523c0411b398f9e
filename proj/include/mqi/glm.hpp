#pragma once

// Logistic regression by iteratively reweighted least squares, for the
// small fixed-effect designs used here (at most a handful of columns).
// Also provides the shared Bernoulli log-likelihood and the Cholesky solve
// reused by the mixed-model fitter.

#include <cmath>
#include <stdexcept>
#include <vector>

#include "mqi/dgp.hpp"
#include "mqi/math.hpp"

namespace mqi {

inline double bernoulli_loglik(double eta, int y) {
    return y * eta - log1pexp(eta);
}

namespace detail {

// In-place Cholesky solve of A x = b for small dense SPD A (row-major k*k).
// Returns false if a pivot collapses.
inline bool cholesky_solve(std::vector<double>& a, std::vector<double>& b, int k) {
    for (int i = 0; i < k; ++i) {
        for (int j = i; j < k; ++j) {
            double s = a[i * k + j];
            for (int m = 0; m < i; ++m) s -= a[i * k + m] * a[j * k + m];
            if (i == j) {
                if (s <= 1e-300) return false;
                a[i * k + i] = std::sqrt(s);
            } else {
                a[j * k + i] = s / a[i * k + i];
            }
        }
    }
    for (int i = 0; i < k; ++i) {
        double s = b[i];
        for (int m = 0; m < i; ++m) s -= a[i * k + m] * b[m];
        b[i] = s / a[i * k + i];
    }
    for (int i = k - 1; i >= 0; --i) {
        double s = b[i];
        for (int m = i + 1; m < k; ++m) s -= a[m * k + i] * b[m];
        b[i] = s / a[i * k + i];
    }
    return true;
}

}  // namespace detail

struct GlmFit {
    std::vector<double> coef;          // one entry per design column
    bool converged = false;
    bool separation = false;           // quasi-complete separation (|b| > 30)
    bool x_dropped = false;            // constant risk factor removed
    int iterations = 0;
    double loglik = 0.0;
    std::vector<double> loglik_trace;

    bool usable() const { return converged && !separation; }
};

// ML fit of logit(p_i) = x_i'beta on a row-major n*k design.
inline GlmFit fit_logistic(const std::vector<double>& design,
                           const std::vector<int>& y, int k,
                           int max_iterations = 100) {
    const int n = static_cast<int>(y.size());
    GlmFit fit;
    fit.coef.assign(k, 0.0);

    int events = 0;
    for (int i = 0; i < n; ++i) events += y[i];
    if (events == 0 || events == n) {
        fit.separation = true;  // ML estimate diverges
        return fit;
    }
    const double ybar = static_cast<double>(events) / n;
    fit.coef[0] = logit(ybar);  // assumes column 0 is the intercept

    std::vector<double> eta(n), p(n);
    std::vector<double> xtwx(k * k), grad(k), step(k);

    auto loglik_at = [&](const std::vector<double>& beta) {
        double ll = 0.0;
        for (int i = 0; i < n; ++i) {
            double e = 0.0;
            for (int j = 0; j < k; ++j) e += design[i * k + j] * beta[j];
            eta[i] = e;
            ll += bernoulli_loglik(e, y[i]);
        }
        return ll;
    };

    double ll = loglik_at(fit.coef);
    fit.loglik_trace.push_back(ll);

    for (int it = 1; it <= max_iterations; ++it) {
        fit.iterations = it;
        std::fill(xtwx.begin(), xtwx.end(), 0.0);
        std::fill(grad.begin(), grad.end(), 0.0);
        double gmax = 0.0;
        for (int i = 0; i < n; ++i) {
            p[i] = inv_logit(eta[i]);
            const double w = p[i] * (1.0 - p[i]);
            const double res = y[i] - p[i];
            for (int a = 0; a < k; ++a) {
                grad[a] += design[i * k + a] * res;
                for (int b = a; b < k; ++b)
                    xtwx[a * k + b] += w * design[i * k + a] * design[i * k + b];
            }
        }
        for (int a = 0; a < k; ++a)
            for (int b = 0; b < a; ++b) xtwx[a * k + b] = xtwx[b * k + a];
        for (int a = 0; a < k; ++a) gmax = std::max(gmax, std::fabs(grad[a]));

        if (gmax < 1e-8) {
            fit.converged = true;
            break;
        }

        step = grad;
        std::vector<double> chol = xtwx;
        if (!detail::cholesky_solve(chol, step, k)) {
            fit.separation = true;
            break;
        }

        // Newton step with halving so the log-likelihood never decreases.
        std::vector<double> trial(k);
        double ll_new = -HUGE_VAL;
        double scale = 1.0;
        for (int half = 0; half < 30; ++half) {
            for (int a = 0; a < k; ++a) trial[a] = fit.coef[a] + scale * step[a];
            ll_new = loglik_at(trial);
            if (ll_new >= ll || half == 29) break;
            scale *= 0.5;
        }
        fit.coef = trial;
        fit.loglik_trace.push_back(ll_new);

        for (int a = 0; a < k; ++a) {
            if (std::fabs(fit.coef[a]) > 30.0) fit.separation = true;
        }
        if (fit.separation) break;

        const double rel = std::fabs(ll_new - ll) / (1.0 + std::fabs(ll_new));
        ll = ll_new;
        if (rel < 1e-10) {
            fit.converged = true;
            break;
        }
    }
    fit.loglik = ll;
    if (fit.separation) fit.converged = false;
    return fit;
}

// The two-parameter patient model logit(p) = b0 + b1 * x. A constant risk
// factor is dropped, leaving the closed-form intercept-only solution.
inline GlmFit fit_glm(const Dataset& ds) {
    const int n = ds.n_patients();
    if (n == 0) throw std::invalid_argument("fit_glm: empty dataset");

    double xmin = ds.patients[0].x, xmax = ds.patients[0].x;
    for (const Patient& p : ds.patients) {
        xmin = std::min(xmin, p.x);
        xmax = std::max(xmax, p.x);
    }

    std::vector<int> y(n);
    for (int i = 0; i < n; ++i) y[i] = ds.patients[i].y;

    if (xmin == xmax) {
        GlmFit fit;
        fit.coef = {0.0, 0.0};
        fit.x_dropped = true;
        int events = 0;
        for (int v : y) events += v;
        if (events == 0 || events == n) {
            fit.separation = true;
            return fit;
        }
        const double ybar = static_cast<double>(events) / n;
        fit.coef[0] = logit(ybar);
        fit.converged = true;
        double ll = 0.0;
        for (int v : y) ll += bernoulli_loglik(fit.coef[0], v);
        fit.loglik = ll;
        return fit;
    }

    std::vector<double> design(static_cast<size_t>(n) * 2);
    for (int i = 0; i < n; ++i) {
        design[i * 2] = 1.0;
        design[i * 2 + 1] = ds.patients[i].x;
    }
    return fit_logistic(design, y, 2);
}

inline double predict_probability(const GlmFit& fit, double x) {
    return inv_logit(fit.coef[0] + (fit.x_dropped ? 0.0 : fit.coef[1] * x));
}

}  // namespace mqi
