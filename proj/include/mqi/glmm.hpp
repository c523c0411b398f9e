#pragma once

// Mixed-model estimation core.
//
// Fits the random-effects logistic models by maximizing the Laplace
// approximation of the marginal log-likelihood: an outer BFGS loop over the
// fixed effects and log-scale variance components, with an inner Newton
// optimization of the joint log-density over the random effects. The joint
// Hessian is block-diagonal by region; inside a region it is an arrowhead
// (hospital intercepts couple only through the shared region intercept), so
// every inner solve, log-determinant, and gradient trace costs O(n).
//
// Empirical-Bayes predictions are the posterior modes at the optimum.
// Analytic gradients account for the dependence of the modes on the outer
// parameters (implicit differentiation through the stationarity condition).

#include <cmath>
#include <cstdlib>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mqi/dgp.hpp"
#include "mqi/glm.hpp"
#include "mqi/math.hpp"

namespace mqi {

enum class ModelForm {
    GlmPatient,   // logit(p) = b0 + b1 x (no random effects; see fit_glm)
    RiHospital,   // logit(p) = a_bar + b x + u_h,            u_h ~ N(0, s2_a)
    MqiFull,      // logit(p) = b0 + b1 x + g n_h + d w_r + u_h + v_r
    MqiNoRegion,  // logit(p) = b0 + b1 x + g n_h + u_h
};

struct ModelSpec {
    ModelForm form = ModelForm::MqiFull;
};

inline const char* model_form_name(ModelForm f) {
    switch (f) {
        case ModelForm::GlmPatient: return "glm_patient";
        case ModelForm::RiHospital: return "ri_hospital";
        case ModelForm::MqiFull: return "mqi_full";
        case ModelForm::MqiNoRegion: return "mqi_noregion";
    }
    return "?";
}

struct GlmmFit {
    ModelForm form = ModelForm::MqiFull;
    // Fixed effects in design order:
    //   RiHospital:  (a_bar, b)
    //   MqiFull:     (intercept, beta_x, gamma, delta)
    //   MqiNoRegion: (intercept, beta_x, gamma)
    std::vector<double> fixed;
    double sigma_u_sq = 0.0;  // hospital variance component (s2_a for RI form)
    double sigma_v_sq = 0.0;  // region variance component (MqiFull only)
    std::vector<double> u;    // empirical-Bayes modes per hospital
    std::vector<double> v;    // empirical-Bayes modes per region
    bool converged = false;
    bool separation = false;
    bool boundary_u = false;  // hospital variance collapsed to ~0
    bool boundary_v = false;
    int iterations = 0;
    double laplace_loglik = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> loglik_trace;

    // Total estimated effects as used by the indicators.
    std::vector<double> hospital_effect;  // gamma*n_h + u_h (RI: u_h)
    std::vector<double> region_effect;    // delta*w_r + v_r

    bool usable() const { return converged && !separation; }
};

namespace detail {

// Flattened nested layout: patients contiguous by hospital, hospitals
// contiguous by region (as produced by the generator).
struct MixedDesign {
    int n = 0;
    int n_fixed = 0;
    int n_hospitals = 0;
    int n_regions = 0;  // 0 when the form has no region level
    bool has_region = false;
    std::vector<double> X;        // row-major n * n_fixed
    std::vector<int> y;
    std::vector<int> hosp;        // per patient
    std::vector<int> reg;         // per patient
    std::vector<int> hosp_begin, hosp_end;        // patient ranges
    std::vector<int> reg_hosp_begin, reg_hosp_end;  // hospital ranges
    std::vector<int> hosp_region;  // region of each hospital
};

inline MixedDesign build_design(const Dataset& ds, ModelForm form) {
    if (form == ModelForm::GlmPatient)
        throw std::invalid_argument("fit_glmm: use fit_glm for the patient-only model");
    MixedDesign md;
    md.n = ds.n_patients();
    md.n_hospitals = ds.n_hospitals();
    md.has_region = form == ModelForm::MqiFull;
    md.n_regions = md.has_region ? ds.n_regions() : 0;
    md.n_fixed = form == ModelForm::RiHospital ? 2
               : form == ModelForm::MqiFull    ? 4
                                               : 3;

    md.X.resize(static_cast<size_t>(md.n) * md.n_fixed);
    md.y.resize(md.n);
    md.hosp.resize(md.n);
    md.reg.resize(md.n);
    md.hosp_begin.assign(md.n_hospitals, -1);
    md.hosp_end.assign(md.n_hospitals, -1);
    md.hosp_region.resize(md.n_hospitals);
    for (int h = 0; h < md.n_hospitals; ++h)
        md.hosp_region[h] = ds.hospitals[h].region;

    for (int i = 0; i < md.n; ++i) {
        const Patient& p = ds.patients[i];
        const Hospital& h = ds.hospitals[p.hospital];
        md.y[i] = p.y;
        md.hosp[i] = p.hospital;
        md.reg[i] = p.region;
        double* row = &md.X[static_cast<size_t>(i) * md.n_fixed];
        row[0] = 1.0;
        row[1] = p.x;
        if (form != ModelForm::RiHospital) row[2] = static_cast<double>(h.volume);
        if (form == ModelForm::MqiFull)
            row[3] = static_cast<double>(ds.regions[p.region].w);
        if (md.hosp_begin[p.hospital] < 0) md.hosp_begin[p.hospital] = i;
        md.hosp_end[p.hospital] = i + 1;
        if (i > 0 && md.hosp[i - 1] != p.hospital &&
            md.hosp_end[p.hospital] - md.hosp_begin[p.hospital] != i + 1 - md.hosp_begin[p.hospital])
            throw std::invalid_argument("fit_glmm: patients must be contiguous by hospital");
    }
    for (int h = 0; h < md.n_hospitals; ++h)
        if (md.hosp_begin[h] < 0)
            throw std::invalid_argument("fit_glmm: hospital without patients");

    if (md.has_region) {
        md.reg_hosp_begin.assign(md.n_regions, -1);
        md.reg_hosp_end.assign(md.n_regions, -1);
        for (int h = 0; h < md.n_hospitals; ++h) {
            const int r = md.hosp_region[h];
            if (r < 0 || r >= md.n_regions)
                throw std::invalid_argument("fit_glmm: hospital region out of range");
            if (md.reg_hosp_begin[r] < 0) md.reg_hosp_begin[r] = h;
            md.reg_hosp_end[r] = h + 1;
        }
        for (int r = 0; r < md.n_regions; ++r)
            if (md.reg_hosp_begin[r] < 0)
                throw std::invalid_argument("fit_glmm: region without hospitals");
    }
    return md;
}

}  // namespace detail

// Laplace objective for one model form on one dataset. Public because the
// tests probe the objective and its gradient directly.
class LaplaceProblem {
public:
    LaplaceProblem(const Dataset& ds, ModelForm form)
        : form_(form), md_(detail::build_design(ds, form)) {
        u_.assign(md_.n_hospitals, 0.0);
        v_.assign(std::max(md_.n_regions, 0), 0.0);
        eta_.resize(md_.n);
        p_.resize(md_.n);
        w_.resize(md_.n);
        D_.resize(md_.n_hospitals);
        B_.resize(md_.n_hospitals);
        gu_.resize(md_.n_hospitals);
        if (md_.has_region) {
            C_.resize(md_.n_regions);
            s_.resize(md_.n_regions);
            gv_.resize(md_.n_regions);
        }
    }

    int fixed_dim() const { return md_.n_fixed; }
    int variance_dim() const { return md_.has_region ? 2 : 1; }
    int dim() const { return fixed_dim() + variance_dim(); }
    const detail::MixedDesign& design() const { return md_; }

    // theta = (fixed effects..., log sigma_u^2 [, log sigma_v^2]).
    // Returns the Laplace-approximated marginal log-likelihood; if grad is
    // non-null it receives the analytic gradient. Random-effect modes are
    // warm-started across calls (the joint density is strictly concave, so
    // the mode is unique and the result is a pure function of theta).
    double objective(const std::vector<double>& theta, std::vector<double>* grad) {
        const int kf = md_.n_fixed;
        const double tau_u = theta[kf];
        const double tau_v = md_.has_region ? theta[kf + 1] : 0.0;
        const double lam_u = std::exp(-tau_u);
        const double lam_v = md_.has_region ? std::exp(-tau_v) : 0.0;

        // Fixed-effect part of the linear predictor.
        xb_.resize(md_.n);
        for (int i = 0; i < md_.n; ++i) {
            const double* row = &md_.X[static_cast<size_t>(i) * kf];
            double e = 0.0;
            for (int j = 0; j < kf; ++j) e += row[j] * theta[j];
            xb_[i] = e;
        }

        const double joint = solve_modes(lam_u, lam_v);

        double logdet = 0.0;
        for (int h = 0; h < md_.n_hospitals; ++h) logdet += std::log(D_[h]);
        if (md_.has_region)
            for (int r = 0; r < md_.n_regions; ++r) logdet += std::log(s_[r]);

        double L = joint - 0.5 * md_.n_hospitals * tau_u - 0.5 * logdet;
        if (md_.has_region) L -= 0.5 * md_.n_regions * tau_v;

        if (grad) assemble_gradient(theta, lam_u, lam_v, *grad);
        return L;
    }

    const std::vector<double>& modes_u() const { return u_; }
    const std::vector<double>& modes_v() const { return v_; }
    void reset_modes() {
        std::fill(u_.begin(), u_.end(), 0.0);
        std::fill(v_.begin(), v_.end(), 0.0);
    }

private:
    // Inner Newton for the joint mode. Returns the joint log-density
    // (Bernoulli log-likelihood plus Gaussian penalties, without the
    // log(2*pi) constants, which cancel against the Laplace volume factor).
    double solve_modes(double lam_u, double lam_v) {
        const double tol = std::max(1e-10, md_.n * 1e-15);
        double obj = joint_value(lam_u, lam_v);
        for (int it = 0; it < 60; ++it) {
            // Gradient and curvature blocks at the current point.
            std::fill(gu_.begin(), gu_.end(), 0.0);
            for (int h = 0; h < md_.n_hospitals; ++h) {
                D_[h] = lam_u;
                B_[h] = 0.0;
            }
            if (md_.has_region) {
                std::fill(gv_.begin(), gv_.end(), 0.0);
                for (int r = 0; r < md_.n_regions; ++r) C_[r] = lam_v;
            }
            for (int i = 0; i < md_.n; ++i) {
                const int h = md_.hosp[i];
                p_[i] = inv_logit(eta_[i]);
                w_[i] = p_[i] * (1.0 - p_[i]);
                const double res = md_.y[i] - p_[i];
                gu_[h] += res;
                D_[h] += w_[i];
                B_[h] += w_[i];
                if (md_.has_region) {
                    gv_[md_.reg[i]] += res;
                    C_[md_.reg[i]] += w_[i];
                }
            }
            double gmax = 0.0;
            for (int h = 0; h < md_.n_hospitals; ++h) {
                gu_[h] -= lam_u * u_[h];
                gmax = std::max(gmax, std::fabs(gu_[h]));
            }
            if (md_.has_region) {
                for (int r = 0; r < md_.n_regions; ++r) {
                    gv_[r] -= lam_v * v_[r];
                    gmax = std::max(gmax, std::fabs(gv_[r]));
                }
                for (int r = 0; r < md_.n_regions; ++r) {
                    double sr = C_[r];
                    for (int h = md_.reg_hosp_begin[r]; h < md_.reg_hosp_end[r]; ++h)
                        sr -= B_[h] * B_[h] / D_[h];
                    s_[r] = sr;
                }
            }
            if (gmax < tol) break;

            // Newton direction via the per-region arrowhead solve.
            du_.assign(md_.n_hospitals, 0.0);
            dv_.assign(std::max(md_.n_regions, 0), 0.0);
            solve_hessian(gu_, gv_, du_, dv_);

            // Step halving on the joint log-density.
            double step = 1.0;
            std::vector<double> u_old = u_, v_old = v_;
            for (int half = 0; half < 40; ++half) {
                for (int h = 0; h < md_.n_hospitals; ++h)
                    u_[h] = u_old[h] + step * du_[h];
                if (md_.has_region)
                    for (int r = 0; r < md_.n_regions; ++r)
                        v_[r] = v_old[r] + step * dv_[r];
                const double cand = joint_value(lam_u, lam_v);
                if (cand >= obj - 1e-14 * std::fabs(obj) || half == 39) {
                    obj = cand;
                    break;
                }
                step *= 0.5;
            }
        }
        // Refresh curvature blocks at the final mode.
        refresh_curvature(lam_u, lam_v);
        return obj;
    }

    double joint_value(double lam_u, double lam_v) {
        double ll = 0.0;
        for (int i = 0; i < md_.n; ++i) {
            double e = xb_[i] + u_[md_.hosp[i]];
            if (md_.has_region) e += v_[md_.reg[i]];
            eta_[i] = e;
            ll += bernoulli_loglik(e, md_.y[i]);
        }
        double pen = 0.0;
        for (double uh : u_) pen += uh * uh;
        ll -= 0.5 * lam_u * pen;
        if (md_.has_region) {
            pen = 0.0;
            for (double vr : v_) pen += vr * vr;
            ll -= 0.5 * lam_v * pen;
        }
        return ll;
    }

    void refresh_curvature(double lam_u, double lam_v) {
        for (int h = 0; h < md_.n_hospitals; ++h) {
            D_[h] = lam_u;
            B_[h] = 0.0;
        }
        if (md_.has_region)
            for (int r = 0; r < md_.n_regions; ++r) C_[r] = lam_v;
        for (int i = 0; i < md_.n; ++i) {
            p_[i] = inv_logit(eta_[i]);
            w_[i] = p_[i] * (1.0 - p_[i]);
            const int h = md_.hosp[i];
            D_[h] += w_[i];
            B_[h] += w_[i];
            if (md_.has_region) C_[md_.reg[i]] += w_[i];
        }
        if (md_.has_region) {
            for (int r = 0; r < md_.n_regions; ++r) {
                double sr = C_[r];
                for (int h = md_.reg_hosp_begin[r]; h < md_.reg_hosp_end[r]; ++h)
                    sr -= B_[h] * B_[h] / D_[h];
                s_[r] = sr;
            }
        }
    }

    // Solve H z = g with the current curvature blocks (D, B, C, s).
    void solve_hessian(const std::vector<double>& g_u, const std::vector<double>& g_v,
                       std::vector<double>& z_u, std::vector<double>& z_v) const {
        if (!md_.has_region) {
            for (int h = 0; h < md_.n_hospitals; ++h) z_u[h] = g_u[h] / D_[h];
            return;
        }
        for (int r = 0; r < md_.n_regions; ++r) {
            double t = g_v[r];
            for (int h = md_.reg_hosp_begin[r]; h < md_.reg_hosp_end[r]; ++h)
                t -= B_[h] * g_u[h] / D_[h];
            const double zv = t / s_[r];
            z_v[r] = zv;
            for (int h = md_.reg_hosp_begin[r]; h < md_.reg_hosp_end[r]; ++h)
                z_u[h] = (g_u[h] - B_[h] * zv) / D_[h];
        }
    }

    void assemble_gradient(const std::vector<double>& theta, double lam_u,
                           double lam_v, std::vector<double>& grad) {
        const int kf = md_.n_fixed;
        const int K = dim();
        grad.assign(K, 0.0);

        // Diagonal of Z H^{-1} Z' per patient (the "hat" values), from the
        // arrowhead inverse.
        hinv_uu_.resize(md_.n_hospitals);
        hinv_uv_.assign(md_.n_hospitals, 0.0);
        if (md_.has_region) {
            hinv_vv_.resize(md_.n_regions);
            for (int r = 0; r < md_.n_regions; ++r) hinv_vv_[r] = 1.0 / s_[r];
            for (int h = 0; h < md_.n_hospitals; ++h) {
                const int r = md_.hosp_region[h];
                hinv_uv_[h] = -B_[h] / (D_[h] * s_[r]);
                hinv_uu_[h] = 1.0 / D_[h] + B_[h] * B_[h] / (D_[h] * D_[h] * s_[r]);
            }
        } else {
            for (int h = 0; h < md_.n_hospitals; ++h) hinv_uu_[h] = 1.0 / D_[h];
        }

        // Right-hand sides d(grad_b f)/d(theta_k), one per outer parameter.
        rhs_u_.assign(static_cast<size_t>(K) * md_.n_hospitals, 0.0);
        rhs_v_.assign(md_.has_region ? static_cast<size_t>(K) * md_.n_regions : 0, 0.0);
        for (int i = 0; i < md_.n; ++i) {
            const int h = md_.hosp[i];
            const double* row = &md_.X[static_cast<size_t>(i) * kf];
            for (int m = 0; m < kf; ++m) {
                const double wx = w_[i] * row[m];
                rhs_u_[static_cast<size_t>(m) * md_.n_hospitals + h] += wx;
                if (md_.has_region)
                    rhs_v_[static_cast<size_t>(m) * md_.n_regions + md_.reg[i]] += wx;
            }
        }
        for (int h = 0; h < md_.n_hospitals; ++h)
            rhs_u_[static_cast<size_t>(kf) * md_.n_hospitals + h] = lam_u * u_[h];
        if (md_.has_region)
            for (int r = 0; r < md_.n_regions; ++r)
                rhs_v_[static_cast<size_t>(kf + 1) * md_.n_regions + r] = lam_v * v_[r];

        // d(mode)/d(theta_k) = +-H^{-1} rhs_k.
        dmode_u_.assign(rhs_u_.size(), 0.0);
        dmode_v_.assign(rhs_v_.size(), 0.0);
        scratch_u_.resize(md_.n_hospitals);
        scratch_v_.resize(std::max(md_.n_regions, 0));
        for (int k = 0; k < K; ++k) {
            const double sgn = k < kf ? -1.0 : 1.0;
            const double* ru = &rhs_u_[static_cast<size_t>(k) * md_.n_hospitals];
            std::vector<double> gu(ru, ru + md_.n_hospitals);
            std::vector<double> gv;
            if (md_.has_region) {
                const double* rv = &rhs_v_[static_cast<size_t>(k) * md_.n_regions];
                gv.assign(rv, rv + md_.n_regions);
            }
            solve_hessian(gu, gv, scratch_u_, scratch_v_);
            for (int h = 0; h < md_.n_hospitals; ++h)
                dmode_u_[static_cast<size_t>(k) * md_.n_hospitals + h] = sgn * scratch_u_[h];
            if (md_.has_region)
                for (int r = 0; r < md_.n_regions; ++r)
                    dmode_v_[static_cast<size_t>(k) * md_.n_regions + r] = sgn * scratch_v_[r];
        }

        // Trace terms: -(1/2) sum_i w'_i * dpsi_i/dtheta_k * hat_i, plus the
        // explicit prior blocks for the variance parameters.
        std::vector<double> trace(K, 0.0);
        for (int i = 0; i < md_.n; ++i) {
            const int h = md_.hosp[i];
            const int r = md_.has_region ? md_.reg[i] : -1;
            const double hat = md_.has_region
                                   ? hinv_uu_[h] + 2.0 * hinv_uv_[h] + hinv_vv_[r]
                                   : hinv_uu_[h];
            const double wp = w_[i] * (1.0 - 2.0 * p_[i]) * hat;
            const double* row = &md_.X[static_cast<size_t>(i) * kf];
            const double res = md_.y[i] - p_[i];
            for (int k = 0; k < K; ++k) {
                double dpsi = dmode_u_[static_cast<size_t>(k) * md_.n_hospitals + h];
                if (md_.has_region)
                    dpsi += dmode_v_[static_cast<size_t>(k) * md_.n_regions + r];
                if (k < kf) {
                    dpsi += row[k];
                    grad[k] += res * row[k];  // envelope part
                }
                trace[k] += wp * dpsi;
            }
        }

        double usq = 0.0;
        for (double uh : u_) usq += uh * uh;
        grad[kf] += 0.5 * lam_u * usq - 0.5 * md_.n_hospitals;
        double pr_u = 0.0;
        for (int h = 0; h < md_.n_hospitals; ++h) pr_u += hinv_uu_[h];
        trace[kf] += -lam_u * pr_u;

        if (md_.has_region) {
            double vsq = 0.0;
            for (double vr : v_) vsq += vr * vr;
            grad[kf + 1] += 0.5 * lam_v * vsq - 0.5 * md_.n_regions;
            double pr_v = 0.0;
            for (int r = 0; r < md_.n_regions; ++r) pr_v += hinv_vv_[r];
            trace[kf + 1] += -lam_v * pr_v;
        }

        for (int k = 0; k < K; ++k) grad[k] -= 0.5 * trace[k];
    }

    ModelForm form_;
    detail::MixedDesign md_;
    std::vector<double> u_, v_;
    std::vector<double> xb_, eta_, p_, w_;
    std::vector<double> D_, B_, gu_, du_;
    std::vector<double> C_, s_, gv_, dv_;
    std::vector<double> hinv_uu_, hinv_uv_, hinv_vv_;
    std::vector<double> rhs_u_, rhs_v_, dmode_u_, dmode_v_;
    std::vector<double> scratch_u_, scratch_v_;
};

namespace detail {

constexpr double kTauMin = -30.0;  // sigma^2 = e^-30; below 1e-10 is boundary
constexpr double kTauMax = 10.0;

inline void clamp_tau(std::vector<double>& theta, int kf) {
    for (size_t j = kf; j < theta.size(); ++j) {
        if (theta[j] < kTauMin) theta[j] = kTauMin;
        if (theta[j] > kTauMax) theta[j] = kTauMax;
    }
}

}  // namespace detail

// Maximize the Laplace objective. Deterministic: fixed-effect start from the
// covariates-only GLM, variance components at 0.25, modes at zero.
inline GlmmFit fit_glmm(const Dataset& ds, const ModelSpec& spec,
                        int max_iterations = 100) {
    LaplaceProblem prob(ds, spec.form);
    const detail::MixedDesign& md = prob.design();
    const int kf = prob.fixed_dim();
    const int K = prob.dim();

    GlmmFit fit;
    fit.form = spec.form;

    // Starting point: GLM ignoring the random effects.
    GlmFit init = fit_logistic(md.X, md.y, kf);
    if (init.separation) {
        fit.separation = true;
        fit.fixed.assign(kf, 0.0);
        fit.u.assign(md.n_hospitals, 0.0);
        fit.v.assign(std::max(md.n_regions, 0), 0.0);
        return fit;
    }

    std::vector<double> theta(K, std::log(0.25));
    for (int j = 0; j < kf; ++j) theta[j] = init.coef[j];

    std::vector<double> grad(K), grad_new(K);
    double f = -prob.objective(theta, &grad);
    for (double& g : grad) g = -g;
    fit.loglik_trace.push_back(-f);

    // Dense BFGS on the negative objective; curvature pairs that fail the
    // positivity check are skipped.
    std::vector<double> hinv(static_cast<size_t>(K) * K, 0.0);
    for (int j = 0; j < K; ++j) hinv[static_cast<size_t>(j) * K + j] = 1.0;

    bool converged = false;
    int it = 0;
    for (it = 1; it <= max_iterations; ++it) {
        double gmax = 0.0;
        for (double g : grad) gmax = std::max(gmax, std::fabs(g));
        if (gmax < 1e-8) {
            converged = true;
            break;
        }

        std::vector<double> dir(K, 0.0);
        for (int a = 0; a < K; ++a)
            for (int b = 0; b < K; ++b)
                dir[a] -= hinv[static_cast<size_t>(a) * K + b] * grad[b];
        double descent = 0.0;
        for (int a = 0; a < K; ++a) descent += dir[a] * grad[a];
        if (descent >= 0.0) {
            // Reset to steepest descent if the approximation went bad.
            for (int a = 0; a < K; ++a) dir[a] = -grad[a];
            descent = -1.0;
            for (size_t j = 0; j < hinv.size(); ++j) hinv[j] = 0.0;
            for (int j = 0; j < K; ++j) hinv[static_cast<size_t>(j) * K + j] = 1.0;
        }

        double step = 1.0;
        std::vector<double> theta_new(K);
        double f_new = f;
        bool moved = false;
        for (int half = 0; half < 40; ++half) {
            for (int a = 0; a < K; ++a) theta_new[a] = theta[a] + step * dir[a];
            detail::clamp_tau(theta_new, kf);
            f_new = -prob.objective(theta_new, &grad_new);
            if (f_new <= f + 1e-4 * step * descent || f_new < f) {
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if (!moved) {
            converged = gmax < 1e-5;  // stuck: accept only if nearly stationary
            break;
        }
        for (double& g : grad_new) g = -g;

        const double rel = std::fabs(f_new - f) / (1.0 + std::fabs(f_new));

        // BFGS update.
        std::vector<double> sv(K), yv(K);
        double sy = 0.0;
        for (int a = 0; a < K; ++a) {
            sv[a] = theta_new[a] - theta[a];
            yv[a] = grad_new[a] - grad[a];
            sy += sv[a] * yv[a];
        }
        if (sy > 1e-12) {
            std::vector<double> hy(K, 0.0);
            for (int a = 0; a < K; ++a)
                for (int b = 0; b < K; ++b)
                    hy[a] += hinv[static_cast<size_t>(a) * K + b] * yv[b];
            double yhy = 0.0;
            for (int a = 0; a < K; ++a) yhy += yv[a] * hy[a];
            const double c1 = (sy + yhy) / (sy * sy);
            for (int a = 0; a < K; ++a)
                for (int b = 0; b < K; ++b)
                    hinv[static_cast<size_t>(a) * K + b] +=
                        c1 * sv[a] * sv[b] -
                        (hy[a] * sv[b] + sv[a] * hy[b]) / sy;
        }

        theta = theta_new;
        grad = grad_new;
        f = f_new;
        fit.loglik_trace.push_back(-f);

        bool diverged = false;
        for (int j = 0; j < kf; ++j)
            if (std::fabs(theta[j]) > 30.0) diverged = true;
        if (diverged) {
            fit.separation = true;
            break;
        }
        if (rel < 1e-10) {
            converged = true;
            break;
        }
    }

    fit.iterations = it;
    fit.converged = converged && !fit.separation;
    fit.laplace_loglik = -f;
    fit.fixed.assign(theta.begin(), theta.begin() + kf);
    fit.sigma_u_sq = std::exp(theta[kf]);
    fit.u = prob.modes_u();
    if (md.has_region) {
        fit.sigma_v_sq = std::exp(theta[kf + 1]);
        fit.v = prob.modes_v();
    }

    if (fit.sigma_u_sq < 1e-10) {
        fit.boundary_u = true;
        fit.sigma_u_sq = 0.0;
        std::fill(fit.u.begin(), fit.u.end(), 0.0);
    }
    if (md.has_region && fit.sigma_v_sq < 1e-10) {
        fit.boundary_v = true;
        fit.sigma_v_sq = 0.0;
        std::fill(fit.v.begin(), fit.v.end(), 0.0);
    }

    // Total per-unit effects for downstream indicator work.
    fit.hospital_effect.resize(md.n_hospitals);
    for (int h = 0; h < md.n_hospitals; ++h) {
        double e = fit.u[h];
        if (spec.form != ModelForm::RiHospital)
            e += fit.fixed[2] * ds.hospitals[h].volume;
        fit.hospital_effect[h] = e;
    }
    if (md.has_region) {
        fit.region_effect.resize(md.n_regions);
        for (int r = 0; r < md.n_regions; ++r)
            fit.region_effect[r] = fit.fixed[3] * ds.regions[r].w + fit.v[r];
    }
    return fit;
}

// logit^{-1} of the requested linear predictor; hospital/region effects are
// included exactly when ids are supplied. Unknown ids are an error.
inline double predict_probability(const GlmmFit& fit, double x,
                                  std::optional<int> hospital = std::nullopt,
                                  std::optional<int> region = std::nullopt) {
    double eta = fit.fixed[0] + fit.fixed[1] * x;
    if (hospital) {
        if (*hospital < 0 || *hospital >= static_cast<int>(fit.hospital_effect.size()))
            throw std::out_of_range("predict_probability: unknown hospital id " +
                                    std::to_string(*hospital));
        eta += fit.hospital_effect[*hospital];
    }
    if (region) {
        if (fit.form != ModelForm::MqiFull)
            throw std::invalid_argument(
                "predict_probability: model form has no region effects");
        if (*region < 0 || *region >= static_cast<int>(fit.region_effect.size()))
            throw std::out_of_range("predict_probability: unknown region id " +
                                    std::to_string(*region));
        eta += fit.region_effect[*region];
    }
    return inv_logit(eta);
}

}  // namespace mqi
