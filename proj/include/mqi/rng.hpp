#pragma once

// Counter-based random number streams (Philox4x32-10).
//
// Every replication draws from its own stream, keyed by
// (master seed, point index, replication index), so results do not depend
// on scheduling order or worker count. Normal variates use the inverse-CDF
// (Wichura AS 241) so each variate consumes exactly one uniform; the same
// holds for the discrete distributions. With a fixed libm this makes
// generated data a pure function of (scenario, seed).

#include <cstdint>
#include <cmath>

namespace mqi {

namespace detail {

inline void philox_round(uint32_t c[4], uint32_t k0, uint32_t k1) {
    const uint64_t p0 = 0xD2511F53ull * c[0];
    const uint64_t p1 = 0xCD9E8D57ull * c[2];
    const uint32_t hi0 = static_cast<uint32_t>(p0 >> 32);
    const uint32_t lo0 = static_cast<uint32_t>(p0);
    const uint32_t hi1 = static_cast<uint32_t>(p1 >> 32);
    const uint32_t lo1 = static_cast<uint32_t>(p1);
    const uint32_t n0 = hi1 ^ c[1] ^ k0;
    const uint32_t n2 = hi0 ^ c[3] ^ k1;
    c[0] = n0;
    c[1] = lo1;
    c[2] = n2;
    c[3] = lo0;
}

inline void philox10(uint32_t c[4], uint32_t k0, uint32_t k1) {
    for (int r = 0; r < 10; ++r) {
        philox_round(c, k0, k1);
        k0 += 0x9E3779B9u;
        k1 += 0xBB67AE85u;
    }
}

// Wichura (1988), algorithm AS 241, PPND16: double-precision normal quantile.
inline double norm_quantile(double p) {
    const double q = p - 0.5;
    double r;
    if (std::fabs(q) <= 0.425) {
        r = 0.180625 - q * q;
        const double num =
            (((((((2.5090809287301226727e3 * r + 3.3430575583588128105e4) * r +
                  6.7265770927008700853e4) * r + 4.5921953931549871457e4) * r +
                1.3731693765509461125e4) * r + 1.9715909503065514427e3) * r +
              1.3314166789178437745e2) * r + 3.3871328727963666080e0);
        const double den =
            (((((((5.2264952788528545610e3 * r + 2.8729085735721942674e4) * r +
                  3.9307895800092710610e4) * r + 2.1213794301586595867e4) * r +
                5.3941960214247511077e3) * r + 6.8718700749205790830e2) * r +
              4.2313330701600911252e1) * r + 1.0);
        return q * num / den;
    }
    r = q < 0.0 ? p : 1.0 - p;
    r = std::sqrt(-std::log(r));
    double val;
    if (r <= 5.0) {
        r -= 1.6;
        const double num =
            (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
                  2.41780725177450611770e-1) * r + 1.27045825245236838258e0) * r +
                3.64784832476320460504e0) * r + 5.76949722146069140550e0) * r +
              4.63033784615654529590e0) * r + 1.42343711074968357734e0);
        const double den =
            (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
                  1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r +
                6.89767334985100004550e-1) * r + 1.67638483018380384940e0) * r +
              2.05319162663775882187e0) * r + 1.0);
        val = num / den;
    } else {
        r -= 5.0;
        const double num =
            (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
                  1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r +
                2.96560571828504891230e-1) * r + 1.78482653991729133580e0) * r +
              5.46378491116411436990e0) * r + 6.65790464350110377720e0);
        const double den =
            (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
                  1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r +
                1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
              5.99832206555887937690e-1) * r + 1.0);
        val = num / den;
    }
    return q < 0.0 ? -val : val;
}

}  // namespace detail

class RngStream {
public:
    // stream_hi/stream_lo identify the stream within a master seed;
    // the harness uses (point index, replication index).
    RngStream(uint64_t master_seed, uint64_t stream_hi, uint64_t stream_lo)
        : key0_(static_cast<uint32_t>(master_seed)),
          key1_(static_cast<uint32_t>(master_seed >> 32)),
          sid_lo_(static_cast<uint32_t>(stream_lo ^ (stream_lo >> 32))),
          sid_hi_(static_cast<uint32_t>(stream_hi ^ (stream_hi >> 32))) {}

    uint64_t next_u64() {
        if (have_ == 0) refill();
        --have_;
        const uint64_t w = buf_[have_];
        return w;
    }

    // Strictly inside (0,1); 53-bit resolution.
    double uniform01() {
        const uint64_t x = next_u64();
        return (static_cast<double>(x >> 11) + 0.5) * 0x1.0p-53;
    }

    double normal(double mean, double sd) {
        return mean + sd * detail::norm_quantile(uniform01());
    }

    bool bernoulli(double p) { return uniform01() < p; }

    // Inverse transform on {lo, ..., hi}; one uniform per draw.
    int uniform_int(int lo, int hi) {
        const int m = hi - lo + 1;
        int k = static_cast<int>(uniform01() * m);
        if (k >= m) k = m - 1;
        return lo + k;
    }

private:
    void refill() {
        uint32_t c[4] = {static_cast<uint32_t>(block_),
                         static_cast<uint32_t>(block_ >> 32), sid_lo_, sid_hi_};
        detail::philox10(c, key0_, key1_);
        buf_[0] = (static_cast<uint64_t>(c[0]) << 32) | c[1];
        buf_[1] = (static_cast<uint64_t>(c[2]) << 32) | c[3];
        have_ = 2;
        ++block_;
    }

    uint32_t key0_, key1_;
    uint32_t sid_lo_, sid_hi_;
    uint64_t block_ = 0;
    uint64_t buf_[2] = {0, 0};
    int have_ = 0;
};

}  // namespace mqi
