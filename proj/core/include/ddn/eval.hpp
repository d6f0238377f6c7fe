#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ddn/image.hpp"
#include "ddn/model.hpp"
#include "ddn/volume.hpp"

namespace ddn {

/// Pearson correlation over all voxels. Throws numeric_error on constant
/// input (the metric is undefined there).
double global_ncc(const Volume3& a, const Volume3& b);

/// Histogram mutual information in nats over [0,1]^2 with bins^2 uniform
/// cells; the value 1.0 falls in the last bin. Throws config_error when
/// values leave [0,1].
double mutual_information(const Volume3& a, const Volume3& b, int bins = 32);

/// Smooth random displacement: i.i.d. Normal(0, sigma) 3-vectors on a coarse
/// control grid (spacing grid_spacing, plus boundary nodes), trilinearly
/// interpolated to full resolution. Control nodes on the volume boundary are
/// zeroed so the field vanishes on the boundary faces.
DisplacementField gaussian_deformation(int dx, int dy, int dz, int grid_spacing, double sigma,
                                       std::uint64_t seed);

/// pixel = round(255 * (1 - |a-b|)): white where aligned, black at |d| = 1.
GrayImage8 difference_image(const std::vector<float>& a, const std::vector<float>& b, int width,
                            int height);

/// R = tgt, G = reg, B = 0: target in red, registered in green, overlap in
/// yellow.
RgbImage8 overlay_rg(const std::vector<float>& tgt, const std::vector<float>& reg, int width,
                     int height);

struct ValidationReport {
    double cc_before = 0.0;
    double mi_before = 0.0;
    double cc_after = 0.0;
    double mi_after = 0.0;

    std::string csv() const; // single line: cc_before,mi_before,cc_after,mi_after
};

/// Deform `vol` with a seeded Gaussian field, register the deformed copy back
/// to the original, and report CC/MI before and after.
ValidationReport validation_run(DdnModel<float>& model, const Volume3& vol, int grid_spacing,
                                double sigma, std::uint64_t seed, double overlap = 0.5,
                                int mi_bins = 32);

} // namespace ddn
