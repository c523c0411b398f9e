#pragma once

// Numeric formatting for CSV and console output. Everything user-visible is
// printed with 6 significant digits so golden files diff cleanly across
// platforms; checkpoint files use 17 digits so doubles round-trip exactly.

#include <cstdio>
#include <ostream>
#include <string>

namespace mqi {

inline std::string format_sig6(double value) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", value);
    return buf;
}

inline std::string format_roundtrip(double value) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    return buf;
}

inline void format_number(std::ostream& os, double value) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", value);
    os << buf;
}

}  // namespace mqi
