#include "histotype/stats.hpp"

#include "histotype/common.hpp"

#include <algorithm>
#include <cmath>

namespace histotype {

double percentile(std::vector<double>& values, double p) {
    if (values.empty()) throw ValidationError("percentile of an empty sample");
    const double pos = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(lo), values.end());
    const double v_lo = values[lo];
    if (lo + 1 >= values.size()) return v_lo;
    const double v_hi = *std::min_element(values.begin() + static_cast<std::ptrdiff_t>(lo) + 1, values.end());
    return v_lo + (pos - static_cast<double>(lo)) * (v_hi - v_lo);
}

}  // namespace histotype
