#pragma once

// Scalar helpers shared across the library: stable logistic transforms
// and the sign convention used by the scenario algebra.

#include <cmath>

namespace mqi {

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// logit^{-1}, computed on the side that avoids overflow of exp().
inline double inv_logit(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// log(1 + exp(x)) without overflow for large x.
inline double log1pexp(double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

// sign(0) = 0, so a zero correlation propagates to a zero slope exactly.
inline double sign(double x) {
    if (x > 0.0) return 1.0;
    if (x < 0.0) return -1.0;
    return 0.0;
}

}  // namespace mqi
