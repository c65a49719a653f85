#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lasq/volume.hpp"

namespace lasq {

struct GaussianModel {
    double mean = 0.0;
    double stddev = 1.0;
};

// Ellipsoidal blood cavity with tubular PV-like protrusions, a dilation-ring
// wall, scar arcs on an equatorial wall band, and per-class Gaussian
// intensities (scar brightest). Distractor blobs share the blood-pool
// intensity so voxelwise classifiers have something to get wrong.
struct PhantomSpec {
    Dims dims = {32, 32, 32};
    Spacing spacing = {1.0, 1.0, 1.0};
    double semi_axis_x_mm = 9.0;
    double semi_axis_y_mm = 7.5;
    double semi_axis_z_mm = 8.0;
    int protrusion_count = 2;
    double protrusion_length_mm = 5.0;
    double protrusion_radius_mm = 1.6;
    int wall_thickness_vox = 2;
    int scar_arc_count = 1;
    std::vector<double> scar_arc_widths_deg = {135.0};
    double scar_band_half_mm = 9.5;
    int distractor_count = 1;
    double distractor_radius_mm = 2.2;
    std::uint64_t seed = 42;
    GaussianModel background = {0.20, 0.05};
    GaussianModel blood_pool = {0.45, 0.05};
    GaussianModel wall = {0.55, 0.07};
    GaussianModel scar = {0.68, 0.09};

    void validate() const;
};

struct PhantomCase {
    Volume3 intensity;
    LabelVolume la_label;       // {0,1}
    LabelVolume wall_scar_label; // {0 background, 1 normal wall, 2 scar}
    PhantomSpec spec;
    std::string intensity_checksum;
    std::string la_checksum;
    std::string wall_scar_checksum;
};

PhantomCase generate(const PhantomSpec& spec);

// Wall voxels inside the equatorial band the scar arcs are drawn on.
std::vector<std::uint8_t> equatorial_band(const PhantomCase& c);

struct SuiteManifest {
    struct Case {
        std::string id;
        std::string role; // "train" | "test"
        std::string dir;
        std::uint64_t seed = 0;
        std::string intensity_checksum;
        std::string la_checksum;
        std::string wall_scar_checksum;
    };
    std::uint64_t seed = 0;
    PhantomSpec base_spec;
    std::vector<Case> cases;
};

// Writes case_###/{intensity,la_label,wall_scar_label}.mvol plus
// manifest.json under out_dir. Per-case geometry is jittered from streams
// derived from (seed, case index).
SuiteManifest generate_suite(int n_train, int n_test, const PhantomSpec& base_spec,
                             std::uint64_t seed, const std::string& out_dir, unsigned jobs = 1);

SuiteManifest read_manifest(const std::string& path);
std::string manifest_path(const std::string& suite_dir);

PhantomCase load_case(const std::string& suite_dir, const SuiteManifest::Case& entry);

} // namespace lasq
