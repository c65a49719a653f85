#pragma once

#include <span>
#include <string>
#include <vector>

#include "lasq/surface.hpp"
#include "lasq/volume.hpp"

namespace lasq {

struct MetricsReport {
    std::string case_id;
    double dice_la = 0.0;
    double asd_mm = 0.0;
    double hd_mm = 0.0;
    double accuracy = 0.0;
    double dice_s = 0.0;
    double dice_g = 0.0;
    double sensitivity = 0.0;
    double specificity = 0.0;
};

// 2|A∩B| / (|A|+|B|); defined as 1 when both sets are empty.
double dice_overlap(const LabelVolume& a, const LabelVolume& b);

struct SurfaceDistances {
    double asd_mm = 0.0;
    double hd_mm = 0.0;
};

// Boundary point sets of both labels scaled by spacing. ASD is the mean of
// the two directed means; HD the max of the two directed maxima. An optional
// percentile (e.g. 95) replaces each directed max by the nearest-rank
// percentile of the directed distances; 100 is the plain HD.
SurfaceDistances surface_distances(const LabelVolume& a, const LabelVolume& b, double hd_percentile = 100.0);

struct SurfaceScarMetrics {
    double accuracy = 0.0;
    double dice_s = 0.0;
    double dice_g = 0.0;
    double sensitivity = 0.0;
    double specificity = 0.0;
};

// Both surfaces must cover the same point set; scar is the positive class.
SurfaceScarMetrics surface_scar_metrics(const LabeledSurface& pred, const LabeledSurface& gt);

// 256-bin histogram threshold maximizing between-class variance. The maximal
// plateau resolves to its middle cut before mapping back to sample units.
double otsu_threshold(std::span<const double> samples);

// Baseline scar classifier: per surface voxel, take the maximum intensity in
// a ball of `radius` voxels, Otsu-threshold those features, call scar above.
LabeledSurface otsu_surface_baseline(const Volume3& intensity, const SurfaceMask& reference_surface,
                                     double radius = 2.0);

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsReport& r);

} // namespace lasq
