#pragma once

// Simulation scenarios and their algebraic completion.
//
// A Scenario holds the free parameters of a simulation design; all remaining
// constants of the data generation process (effect coefficients, variance
// splits, volume-law bounds, the calibrated intercept) follow in closed form
// and are collected in DerivedParams before any sampling happens.

#include <cmath>
#include <stdexcept>
#include <string>

#include "mqi/math.hpp"

namespace mqi {

struct Scenario {
    int regions = 20;                    // R
    int hospitals_per_region = 10;       // H_bar
    int mean_volume = 10;                // n_bar
    double target_rate = 0.3;            // p_y_bar
    int volume_gap = 0;                  // delta_n, even
    double casemix_volume_corr = 0.0;    // rho
    double region_explained_share = 0.5; // xi_w_eta
    double hospital_explained_share = 0.5; // xi_n_theta
    double casemix_variance_ratio = 1.0; // xi_theta_mux
    double sd_region = 0.5;              // sigma_eta
    double sd_hospital = 0.5;            // sigma_theta
    double sd_patient = 0.2;             // sigma_x

    int total_hospitals() const { return regions * hospitals_per_region; }
};

struct ScenarioError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Constants fixed by the binary region covariate w_r ~ Ber(0.5), plus every
// quantity derived from the Scenario. Variance totals are preserved:
// delta^2*sigma_w^2 + sigma_v^2 = sigma_eta^2 and
// gamma^2*sigma_n^2 + sigma_u^2 = sigma_theta^2.
struct DerivedParams {
    double p_w = 0.5;
    double sigma_w_sq = 0.25;

    double delta = 0.0;        // region covariate coefficient, >= 0
    double sigma_v_sq = 0.0;   // unexplained region variance
    double gamma = 0.0;        // volume coefficient, <= 0
    double sigma_u_sq = 0.0;   // unexplained hospital variance
    int lambda_r0 = 0;         // max volume in w=0 regions
    int lambda_r1 = 0;         // max volume in w=1 regions
    double sigma_n_sq = 0.0;   // hospital-level variance of n^h
    double chi = 0.0;          // case-mix / volume slope
    double sigma_eps_sq = 0.0; // case-mix residual variance
    double zeta = 0.0;         // patient-level P(w_r = 1)
    double en_patient = 0.0;   // patient-level E[n^h]
    double alpha = 0.0;        // calibrated intercept
};

inline const Scenario& validate_scenario(const Scenario& s) {
    if (s.regions < 1) throw ScenarioError("R must be >= 1");
    if (s.hospitals_per_region < 1) throw ScenarioError("H_bar must be >= 1");
    if (s.mean_volume < 2) throw ScenarioError("n_bar must be >= 2");
    if (!(s.target_rate > 0.0 && s.target_rate < 1.0))
        throw ScenarioError("p_y_bar must lie strictly inside (0,1)");
    if (s.volume_gap % 2 != 0)
        throw ScenarioError("delta_n must be even");
    if (std::abs(s.volume_gap) > 4 * (s.mean_volume - 1))
        throw ScenarioError("|delta_n| must not exceed 4*(n_bar-1) = " +
                            std::to_string(4 * (s.mean_volume - 1)));
    if (!(s.casemix_volume_corr > -1.0 && s.casemix_volume_corr < 1.0))
        throw ScenarioError("rho must lie strictly inside (-1,1)");
    if (!(s.region_explained_share >= 0.0 && s.region_explained_share < 1.0))
        throw ScenarioError("xi_w_eta must lie in [0,1)");
    if (!(s.hospital_explained_share >= 0.0 && s.hospital_explained_share < 1.0))
        throw ScenarioError("xi_n_theta must lie in [0,1)");
    if (!(s.casemix_variance_ratio >= 0.0))
        throw ScenarioError("xi_theta_mux must be >= 0");
    if (!(s.sd_region >= 0.0)) throw ScenarioError("sigma_eta must be >= 0");
    if (!(s.sd_hospital > 0.0)) throw ScenarioError("sigma_theta must be > 0");
    if (!(s.sd_patient >= 0.0)) throw ScenarioError("sigma_x must be >= 0");
    return s;
}

inline DerivedParams derive_parameters(const Scenario& s) {
    validate_scenario(s);
    DerivedParams d;

    // Region level: split sigma_eta^2 into the w_r share and the residual.
    const double sigma_eta_sq = s.sd_region * s.sd_region;
    d.sigma_v_sq = (1.0 - s.region_explained_share) * sigma_eta_sq;
    if (s.sd_region == 0.0) {
        d.delta = 0.0;
        d.sigma_v_sq = 0.0;
    } else {
        d.delta = (std::sqrt(d.sigma_v_sq) / std::sqrt(d.sigma_w_sq)) *
                  std::sqrt(s.region_explained_share / (1.0 - s.region_explained_share));
    }

    // Volume law: conditional discrete uniform on {1,...,lambda_r}.
    d.lambda_r0 = 2 * s.mean_volume - 1 - s.volume_gap / 2;
    d.lambda_r1 = 2 * s.mean_volume - 1 + s.volume_gap / 2;
    const double l0 = d.lambda_r0, l1 = d.lambda_r1;
    d.sigma_n_sq = (l1 * l1 + l0 * l0 - 2.0) / 24.0 + (l1 - l0) * (l1 - l0) / 16.0;

    // Hospital level: same construction on sigma_theta^2.
    const double sigma_theta_sq = s.sd_hospital * s.sd_hospital;
    d.sigma_u_sq = (1.0 - s.hospital_explained_share) * sigma_theta_sq;
    d.gamma = -(std::sqrt(d.sigma_u_sq) / std::sqrt(d.sigma_n_sq)) *
              std::sqrt(s.hospital_explained_share / (1.0 - s.hospital_explained_share));

    // Case mix: keep V[mu_x]/V[theta] at the requested ratio for any rho.
    const double rho = s.casemix_volume_corr;
    d.sigma_eps_sq = s.casemix_variance_ratio * (1.0 - rho * rho) * sigma_theta_sq;
    d.chi = sign(rho) * (std::sqrt(d.sigma_eps_sq) / std::sqrt(d.sigma_n_sq)) *
            std::sqrt(rho * rho / (1.0 - rho * rho));

    // Patient-level (size-biased) moments: a volume-n hospital appears with
    // n patient rows, so n^h is not uniform at the patient level.
    d.zeta = (l1 + 1.0) / (l0 + l1 + 2.0);
    d.en_patient =
        (d.zeta * (2.0 * l1 + 1.0) + (1.0 - d.zeta) * (2.0 * l0 + 1.0)) / 3.0;

    // First-order Taylor calibration of the intercept around logit(p_y_bar).
    d.alpha = logit(s.target_rate) - (d.chi + d.gamma) * d.en_patient -
              d.zeta * d.delta;
    return d;
}

}  // namespace mqi
