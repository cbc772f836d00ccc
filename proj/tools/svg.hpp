#pragma once

#include <ostream>

#include "tag/experiments.hpp"

namespace tag {

/// Minimal SVG line chart: one polyline per series, linear axes, legend.
void write_svg(std::ostream& out, const Plot& plot);

} // namespace tag
