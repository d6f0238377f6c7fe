#pragma once

#include "ddn/volume.hpp"

namespace ddn {

/// Backward ("pull") warping: out(p) = trilinear(vol, p + u(p)), sample
/// coordinates clamped to the volume border. Not differentiable; the graph op
/// Graph::warp_trilinear provides the differentiable counterpart with the
/// same sampling rule.
Volume3 warp_volume(const Volume3& vol, const DisplacementField& field);

} // namespace ddn
