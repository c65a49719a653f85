#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "lasq/distance.hpp"
#include "lasq/volume.hpp"

namespace lasq {

enum class MaskKind { hard_gt, soft_predicted };

// Attention mask over the LA boundary. hard_gt is the indicator of the
// boundary set S; soft_predicted is the normalized gradient magnitude of a
// probability field (max value 1).
struct SurfaceMask {
    Volume3 mask;
    MaskKind kind = MaskKind::hard_gt;
    std::string source;
};

// Surface points with a {normal, scar} class each, sorted by linear index.
struct LabeledSurface {
    std::vector<std::array<int, 3>> points;
    std::vector<std::uint8_t> classes; // 0 = normal, 1 = scar
    Dims dims;
    Spacing spacing;

    std::size_t size() const { return points.size(); }
    std::size_t scar_count() const;
};

SurfaceMask hard_boundary_mask(const LabelVolume& la_label);

// |grad| by central differences (one-sided at the grid faces), divided by its
// grid maximum. Errors on a field whose gradient vanishes everywhere.
SurfaceMask soft_boundary_mask(const Volume3& la_prob);

// Vector-Jacobian product of soft_boundary_mask: pulls a gradient w.r.t. the
// mask values back to a gradient w.r.t. the probability field. The max is
// treated as the first attaining voxel in linear order.
Volume3 soft_boundary_mask_vjp(const Volume3& la_prob, const Volume3& grad_mask);

// argmax decision rule over the two DPM channels at hard-surface voxels;
// ties classify as normal.
LabeledSurface classify_surface(const DistanceProbabilityMap& dpm_pred, const SurfaceMask& surface);

// Each reference-surface voxel takes the class of the nearest wall-or-scar
// voxel within `radius` (voxel-unit Euclidean; equidistant candidates resolve
// to the smaller linear index; no candidate means normal).
LabeledSurface project_volume_labels(const LabelVolume& scar_label, const SurfaceMask& reference_surface,
                                     double radius = 3.0);

// ASCII PLY point cloud, coordinates in mm, scar red / normal white.
void export_labeled_surface_ply(const LabeledSurface& surface, const std::string& path);

} // namespace lasq
