#pragma once

#include <filesystem>
#include <optional>

#include "kinflow/core.hpp"

namespace kinflow::viz {

/// Middlebury colour-wheel rendering, uint8 RGB [H, W, 3]: hue encodes
/// direction, saturation magnitude. Magnitudes are divided by `max_magnitude`
/// when given, otherwise by the largest valid magnitude in the image.
/// Pixels outside the valid mask are black.
Tensor flow_to_color(const FlowField& flow, std::optional<double> max_magnitude = std::nullopt);

void write_flow_png(const FlowField& flow, const std::filesystem::path& path,
                    std::optional<double> max_magnitude = std::nullopt);

}  // namespace kinflow::viz
