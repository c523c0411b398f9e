#pragma once

// Sampling of complete synthetic datasets: regions, hospitals nested in
// regions, patients nested in hospitals, binary outcomes. Latent truths
// (theta^h, eta_r, p_y) are stored alongside the observables because the
// evaluation layer scores estimators against them.
//
// All patients of a hospital live in the hospital's region, and a dataset
// is a pure function of (scenario, seed).

#include <cstdint>
#include <ostream>
#include <vector>

#include "mqi/csv.hpp"
#include "mqi/math.hpp"
#include "mqi/rng.hpp"
#include "mqi/scenario.hpp"

namespace mqi {

struct Region {
    int id = 0;
    int w = 0;          // binary observed covariate
    double v = 0.0;     // unexplained effect
    double eta = 0.0;   // total effect delta*w + v
};

struct Hospital {
    int id = 0;
    int region = 0;
    int volume = 0;     // n^h, 1 <= n^h <= lambda_{r}
    double u = 0.0;     // unexplained effect
    double theta = 0.0; // total effect gamma*n^h + u
    double mu_x = 0.0;  // case-mix mean chi*n^h + eps^h
};

struct Patient {
    int region = 0;
    int hospital = 0;
    double x = 0.0;     // risk factor, unit coefficient in the outcome model
    double p_y = 0.0;   // true outcome probability
    int y = 0;
};

struct Dataset {
    Scenario scenario;
    DerivedParams derived;
    std::vector<Region> regions;
    std::vector<Hospital> hospitals;   // grouped contiguously by region
    std::vector<Patient> patients;     // grouped contiguously by hospital
    uint64_t seed = 0;

    int n_regions() const { return static_cast<int>(regions.size()); }
    int n_hospitals() const { return static_cast<int>(hospitals.size()); }
    int n_patients() const { return static_cast<int>(patients.size()); }
};

inline std::vector<Region> generate_regions(const Scenario& s,
                                            const DerivedParams& d,
                                            RngStream& rng) {
    std::vector<Region> regions(s.regions);
    const double sigma_v = std::sqrt(d.sigma_v_sq);
    for (int r = 0; r < s.regions; ++r) {
        Region& reg = regions[r];
        reg.id = r;
        reg.w = rng.bernoulli(d.p_w) ? 1 : 0;
        reg.v = rng.normal(0.0, sigma_v);
        reg.eta = d.delta * reg.w + reg.v;
    }
    return regions;
}

inline std::vector<Hospital> generate_hospitals(const Scenario& s,
                                                const DerivedParams& d,
                                                const std::vector<Region>& regions,
                                                RngStream& rng) {
    std::vector<Hospital> hospitals;
    hospitals.reserve(static_cast<size_t>(s.regions) * s.hospitals_per_region);
    const double sigma_u = std::sqrt(d.sigma_u_sq);
    const double sigma_eps = std::sqrt(d.sigma_eps_sq);
    int id = 0;
    for (const Region& reg : regions) {
        const int lambda = reg.w == 1 ? d.lambda_r1 : d.lambda_r0;
        for (int j = 0; j < s.hospitals_per_region; ++j, ++id) {
            Hospital h;
            h.id = id;
            h.region = reg.id;
            h.volume = rng.uniform_int(1, lambda);
            h.u = rng.normal(0.0, sigma_u);
            h.theta = d.gamma * h.volume + h.u;
            h.mu_x = d.chi * h.volume + rng.normal(0.0, sigma_eps);
            hospitals.push_back(h);
        }
    }
    return hospitals;
}

inline std::vector<Patient> generate_patients(const Scenario& s,
                                              const DerivedParams& d,
                                              const std::vector<Hospital>& hospitals,
                                              const std::vector<Region>& regions,
                                              RngStream& rng) {
    std::vector<Patient> patients;
    patients.reserve(static_cast<size_t>(s.regions) * s.hospitals_per_region *
                     s.mean_volume);
    for (const Hospital& h : hospitals) {
        const Region& reg = regions[h.region];
        for (int i = 0; i < h.volume; ++i) {
            Patient p;
            p.region = h.region;
            p.hospital = h.id;
            p.x = rng.normal(h.mu_x, s.sd_patient);
            p.p_y = inv_logit(d.alpha + p.x + h.theta + reg.eta);
            p.y = rng.bernoulli(p.p_y) ? 1 : 0;
            patients.push_back(p);
        }
    }
    return patients;
}

// Stream ids: the harness passes (point, replication); standalone callers
// use generate_dataset(s, seed) which runs on stream (0, 0) of that seed.
inline Dataset generate_dataset(const Scenario& s, uint64_t seed,
                                uint64_t stream_hi = 0, uint64_t stream_lo = 0) {
    validate_scenario(s);
    Dataset ds;
    ds.scenario = s;
    ds.derived = derive_parameters(s);
    ds.seed = seed;
    RngStream rng(seed, stream_hi, stream_lo);
    ds.regions = generate_regions(s, ds.derived, rng);
    ds.hospitals = generate_hospitals(s, ds.derived, ds.regions, rng);
    ds.patients = generate_patients(s, ds.derived, ds.hospitals, ds.regions, rng);
    return ds;
}

// Flat per-patient dump; repeats the region and hospital fields on each row.
inline void write_dataset_csv_header(std::ostream& os) {
    os << "replication,region,w_r,v_r,eta_r,hospital,n_h,u_h,theta_h,mu_x_h,"
          "patient,x,p_y,y\n";
}

inline void write_dataset_csv_rows(std::ostream& os, const Dataset& ds,
                                   int replication) {
    int patient_in_hospital = 0;
    int last_hospital = -1;
    for (const Patient& p : ds.patients) {
        if (p.hospital != last_hospital) {
            patient_in_hospital = 0;
            last_hospital = p.hospital;
        }
        const Hospital& h = ds.hospitals[p.hospital];
        const Region& reg = ds.regions[p.region];
        os << replication << ',' << reg.id << ',' << reg.w << ',';
        format_number(os, reg.v);
        os << ',';
        format_number(os, reg.eta);
        os << ',' << h.id << ',' << h.volume << ',';
        format_number(os, h.u);
        os << ',';
        format_number(os, h.theta);
        os << ',';
        format_number(os, h.mu_x);
        os << ',' << patient_in_hospital << ',';
        format_number(os, p.x);
        os << ',';
        format_number(os, p.p_y);
        os << ',' << p.y << '\n';
        ++patient_in_hospital;
    }
}

}  // namespace mqi
