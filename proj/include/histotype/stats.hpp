#pragma once

#include <vector>

namespace histotype {

/// Linear-interpolated percentile, p in [0, 100]. `values` is reordered.
double percentile(std::vector<double>& values, double p);

}  // namespace histotype
