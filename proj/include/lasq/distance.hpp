#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lasq/volume.hpp"

namespace lasq {

// Per-voxel signed distance, already exponentiated: values hold
// sign * min(d, clip)^beta with d the exact Euclidean distance to the
// nearest boundary voxel center. Negative strictly inside, zero on the
// boundary set, positive outside.
struct SignedDistanceMap {
    Volume3 values;
    double beta = 1.0;
    double clip = 50.0;
    bool spacing_aware = false;
};

enum class DpmVariant { exp, expit, exp_normalized, expit_normalized };

const char* to_string(DpmVariant v);
DpmVariant dpm_variant_from_string(const std::string& s);

// Paired per-voxel class probabilities for normal wall and scar. The
// unnormalized variants leave the background class out on purpose.
struct DistanceProbabilityMap {
    Volume3 p_normal;
    Volume3 p_scar;
    DpmVariant variant = DpmVariant::exp;
};

// Boundary set S: foreground voxels with at least one background 6-neighbor.
std::vector<std::uint8_t> boundary_set(const LabelVolume& label);

// Exact squared Euclidean distance from every voxel center to the nearest
// seed voxel center (separable lower-envelope transform, one pass per axis
// in x,y,z order). `weights` are the per-axis squared center spacings.
// Seeds must be nonempty. Equals the all-pairs scan bit-for-bit when the
// squared per-axis terms are exactly representable.
std::vector<double> edt_squared(const std::vector<std::uint8_t>& seed, const Dims& dims,
                                double wx, double wy, double wz, unsigned jobs = 1);

// Accumulation step shared with test oracles so both routes round alike.
inline double edt_axis_term(double delta, double weight, double carried) {
    return delta * delta * weight + carried;
}

double apply_beta_clip(double squared_distance, double beta, double clip);

SignedDistanceMap signed_edt(const LabelVolume& label, double beta, double clip,
                             bool spacing_aware = false, unsigned jobs = 1);

// Unsigned-magnitude DTMs of the normal wall (class 1) and scar (class 2)
// sets of a {0,1,2} label: distance-to-nearest class voxel, zero on the
// class itself.
std::pair<SignedDistanceMap, SignedDistanceMap>
dual_class_dtm(const LabelVolume& scar_label, double beta = 1.0, double clip = 50.0,
               bool spacing_aware = false, unsigned jobs = 1);

// Magnitude DTM of an arbitrary voxel set given as a mask.
SignedDistanceMap class_dtm(const Volume3& grid_like, const std::vector<std::uint8_t>& members,
                            double beta, double clip, bool spacing_aware, unsigned jobs = 1);

// The normalized variants need the background-class DTM for the third
// softmax/renormalization term.
DistanceProbabilityMap build_dpm(const SignedDistanceMap& wall_dtm, const SignedDistanceMap& scar_dtm,
                                 DpmVariant variant,
                                 const std::optional<SignedDistanceMap>& background_dtm = std::nullopt);

// Convenience: DTMs of all needed classes from a {0,1,2} label, then build.
DistanceProbabilityMap build_dpm_from_label(const LabelVolume& scar_label, DpmVariant variant,
                                            double beta = 1.0, double clip = 50.0,
                                            bool spacing_aware = false, unsigned jobs = 1);

} // namespace lasq
