#include "lasq/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "lasq/distance.hpp"
#include "lasq/util.hpp"
#include "json.hpp"

namespace lasq {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct Vec3 {
    double x = 0, y = 0, z = 0;
};

double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
Vec3 sub(const Vec3& a, const Vec3& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

} // namespace

void PhantomSpec::validate() const {
    if (dims.nx < 8 || dims.ny < 8 || dims.nz < 8)
        fail(errc::infeasible_spec, "phantom grid must be at least 8 voxels per axis");
    if (wall_thickness_vox < 1) fail(errc::infeasible_spec, "wall thickness must be >= 1 voxel");
    const double margin = 2.0; // voxels
    const double budget_x = (dims.nx / 2.0 - margin - wall_thickness_vox) * spacing.sx;
    const double budget_y = (dims.ny / 2.0 - margin - wall_thickness_vox) * spacing.sy;
    const double budget_z = (dims.nz / 2.0 - margin - wall_thickness_vox) * spacing.sz;
    if (semi_axis_x_mm <= 0 || semi_axis_y_mm <= 0 || semi_axis_z_mm <= 0)
        fail(errc::infeasible_spec, "semi-axes must be positive");
    if (semi_axis_x_mm > budget_x || semi_axis_y_mm > budget_y || semi_axis_z_mm > budget_z)
        fail(errc::infeasible_spec, "ellipsoid does not fit inside the grid with a 2-voxel margin");
    if (scar_arc_count < 0 || static_cast<std::size_t>(scar_arc_count) > scar_arc_widths_deg.size())
        fail(errc::infeasible_spec, "scar arc count exceeds provided widths");
    double total = 0.0;
    for (int a = 0; a < scar_arc_count; ++a) {
        if (scar_arc_widths_deg[a] <= 0.0) fail(errc::infeasible_spec, "scar arc width must be positive");
        total += scar_arc_widths_deg[a];
    }
    if (total > 360.0) fail(errc::infeasible_spec, "scar arcs overlap beyond the wall capacity (total > 360 deg)");
    if (!(scar.mean > wall.mean) || !(scar.mean > blood_pool.mean) || !(scar.mean > background.mean))
        fail(errc::infeasible_spec, "scar intensity mean must be strictly highest");
}

std::vector<std::uint8_t> equatorial_band(const PhantomCase& c) {
    const Volume3& v = c.wall_scar_label.vol();
    const double cz = (c.spec.dims.nz - 1) * c.spec.spacing.sz / 2.0;
    std::vector<std::uint8_t> band(v.size(), 0);
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (c.wall_scar_label.label_at(i) == 0) continue;
        const auto co = v.coords(i);
        if (std::abs(co[2] * c.spec.spacing.sz - cz) <= c.spec.scar_band_half_mm) band[i] = 1;
    }
    return band;
}

PhantomCase generate(const PhantomSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);

    const Dims d = spec.dims;
    const Spacing sp = spec.spacing;
    const Vec3 center = {(d.nx - 1) * sp.sx / 2.0, (d.ny - 1) * sp.sy / 2.0, (d.nz - 1) * sp.sz / 2.0};

    auto pos = [&](int i, int j, int k) { return Vec3{i * sp.sx, j * sp.sy, k * sp.sz}; };

    // cavity: ellipsoid plus tubular protrusions
    struct Tube {
        Vec3 base, dir;
        double length, radius;
    };
    std::vector<Tube> tubes;
    for (int t = 0; t < spec.protrusion_count; ++t) {
        const double theta = rng.uniform(0.0, 2.0 * kPi);
        const double phi = std::acos(rng.uniform(-1.0, 1.0));
        const Vec3 dir = {std::sin(phi) * std::cos(theta), std::sin(phi) * std::sin(theta), std::cos(phi)};
        // start on the ellipsoid surface along dir
        const double scale = 1.0 / std::sqrt(dir.x * dir.x / (spec.semi_axis_x_mm * spec.semi_axis_x_mm) +
                                             dir.y * dir.y / (spec.semi_axis_y_mm * spec.semi_axis_y_mm) +
                                             dir.z * dir.z / (spec.semi_axis_z_mm * spec.semi_axis_z_mm));
        const Vec3 base = {center.x + dir.x * scale * 0.85, center.y + dir.y * scale * 0.85, center.z + dir.z * scale * 0.85};
        tubes.push_back({base, dir, spec.protrusion_length_mm, spec.protrusion_radius_mm});
    }

    const double margin_vox = 2.0;
    auto inside_margin = [&](int i, int j, int k) {
        return i >= margin_vox && j >= margin_vox && k >= margin_vox &&
               i < d.nx - margin_vox && j < d.ny - margin_vox && k < d.nz - margin_vox;
    };

    Volume3 la(d, sp);
    for (int k = 0; k < d.nz; ++k)
        for (int j = 0; j < d.ny; ++j)
            for (int i = 0; i < d.nx; ++i) {
                const Vec3 p = pos(i, j, k);
                const Vec3 q = sub(p, center);
                const double e = q.x * q.x / (spec.semi_axis_x_mm * spec.semi_axis_x_mm) +
                                 q.y * q.y / (spec.semi_axis_y_mm * spec.semi_axis_y_mm) +
                                 q.z * q.z / (spec.semi_axis_z_mm * spec.semi_axis_z_mm);
                bool in = e <= 1.0;
                for (const Tube& t : tubes) {
                    if (in) break;
                    const Vec3 rel = sub(p, t.base);
                    const double along = dot(rel, t.dir);
                    if (along < 0.0 || along > t.length) continue;
                    const Vec3 axial = {t.dir.x * along, t.dir.y * along, t.dir.z * along};
                    if (norm(sub(rel, axial)) <= t.radius) in = true;
                }
                if (in && inside_margin(i, j, k)) la.at(i, j, k) = 1.0;
            }
    LabelVolume la_label(la, {0, 1});
    if (la_label.count(1) == 0) fail(errc::infeasible_spec, "phantom cavity is empty");

    // wall: voxels outside the cavity within wall_thickness voxels of it
    std::vector<std::uint8_t> cavity(la.size(), 0);
    for (std::size_t i = 0; i < la.size(); ++i) cavity[i] = la[i] != 0.0 ? 1 : 0;
    const std::vector<double> d2 = edt_squared(cavity, d, 1.0, 1.0, 1.0);
    const double wall_r2 = static_cast<double>(spec.wall_thickness_vox) * spec.wall_thickness_vox;
    std::vector<std::uint8_t> wall(la.size(), 0);
    for (std::size_t i = 0; i < la.size(); ++i)
        if (!cavity[i] && d2[i] <= wall_r2) wall[i] = 1;

    // scar arcs: azimuthal intervals on the equatorial wall band
    std::vector<std::pair<double, double>> arcs;
    {
        double used = 0.0;
        for (int a = 0; a < spec.scar_arc_count; ++a) used += spec.scar_arc_widths_deg[a];
        double cursor = rng.uniform(0.0, 2.0 * kPi);
        const double gap_total = 2.0 * kPi - used * kPi / 180.0;
        for (int a = 0; a < spec.scar_arc_count; ++a) {
            const double width = spec.scar_arc_widths_deg[a] * kPi / 180.0;
            arcs.emplace_back(cursor, cursor + width);
            const double gap = spec.scar_arc_count > 0 ? gap_total / spec.scar_arc_count : 0.0;
            cursor += width + gap;
        }
    }
    auto in_arc = [&](double angle) {
        for (const auto& [lo, hi] : arcs) {
            double a = angle;
            while (a < lo) a += 2.0 * kPi;
            if (a <= hi) return true;
        }
        return false;
    };

    Volume3 ws(d, sp);
    for (std::size_t i = 0; i < ws.size(); ++i) {
        if (!wall[i]) continue;
        ws[i] = 1.0;
        const auto co = la.coords(i);
        const Vec3 p = pos(co[0], co[1], co[2]);
        if (std::abs(p.z - center.z) > spec.scar_band_half_mm) continue;
        const double angle = std::atan2(p.y - center.y, p.x - center.x) + kPi; // [0, 2pi]
        if (in_arc(angle)) ws[i] = 2.0;
    }
    LabelVolume wall_scar(ws, {0, 1, 2});

    // distractor blobs: blood-pool intensity, far from the cavity
    std::vector<std::uint8_t> distractor(la.size(), 0);
    for (int b = 0; b < spec.distractor_count; ++b) {
        // corner picked per blob; pushed inside the margin
        const int corner = static_cast<int>(rng.below(8));
        const double off = margin_vox + spec.distractor_radius_mm / std::min({sp.sx, sp.sy, sp.sz}) + 1.0;
        const Vec3 c = {(corner & 1) ? (d.nx - 1 - off) * sp.sx : off * sp.sx,
                        (corner & 2) ? (d.ny - 1 - off) * sp.sy : off * sp.sy,
                        (corner & 4) ? (d.nz - 1 - off) * sp.sz : off * sp.sz};
        for (int k = 0; k < d.nz; ++k)
            for (int j = 0; j < d.ny; ++j)
                for (int i = 0; i < d.nx; ++i) {
                    if (!inside_margin(i, j, k)) continue;
                    const std::size_t idx = la.index(i, j, k);
                    if (cavity[idx] || wall[idx]) continue;
                    if (norm(sub(pos(i, j, k), c)) <= spec.distractor_radius_mm) distractor[idx] = 1;
                }
    }

    // intensity: one normal draw per voxel in linear order
    Volume3 intensity(d, sp);
    for (std::size_t i = 0; i < intensity.size(); ++i) {
        GaussianModel g = spec.background;
        const int lab = wall_scar.label_at(i);
        if (cavity[i]) g = spec.blood_pool;
        else if (lab == 2) g = spec.scar;
        else if (lab == 1) g = spec.wall;
        else if (distractor[i]) g = spec.blood_pool;
        intensity[i] = rng.normal(g.mean, g.stddev);
    }

    PhantomCase out{std::move(intensity), std::move(la_label), std::move(wall_scar), spec, "", "", ""};
    out.intensity_checksum = payload_checksum(out.intensity);
    out.la_checksum = payload_checksum(out.la_label.vol());
    out.wall_scar_checksum = payload_checksum(out.wall_scar_label.vol());
    return out;
}

namespace {

nlohmann::json spec_to_json(const PhantomSpec& s) {
    nlohmann::json j;
    j["dims"] = {s.dims.nx, s.dims.ny, s.dims.nz};
    j["spacing"] = {s.spacing.sx, s.spacing.sy, s.spacing.sz};
    j["semi_axes_mm"] = {s.semi_axis_x_mm, s.semi_axis_y_mm, s.semi_axis_z_mm};
    j["protrusion_count"] = s.protrusion_count;
    j["protrusion_length_mm"] = s.protrusion_length_mm;
    j["protrusion_radius_mm"] = s.protrusion_radius_mm;
    j["wall_thickness_vox"] = s.wall_thickness_vox;
    j["scar_arc_count"] = s.scar_arc_count;
    j["scar_arc_widths_deg"] = s.scar_arc_widths_deg;
    j["scar_band_half_mm"] = s.scar_band_half_mm;
    j["distractor_count"] = s.distractor_count;
    j["distractor_radius_mm"] = s.distractor_radius_mm;
    j["seed"] = s.seed;
    j["intensity"] = {
        {"background", {s.background.mean, s.background.stddev}},
        {"blood_pool", {s.blood_pool.mean, s.blood_pool.stddev}},
        {"wall", {s.wall.mean, s.wall.stddev}},
        {"scar", {s.scar.mean, s.scar.stddev}},
    };
    return j;
}

PhantomSpec spec_from_json(const nlohmann::json& j) {
    PhantomSpec s;
    s.dims = {j.at("dims")[0].get<int>(), j.at("dims")[1].get<int>(), j.at("dims")[2].get<int>()};
    s.spacing = {j.at("spacing")[0].get<double>(), j.at("spacing")[1].get<double>(), j.at("spacing")[2].get<double>()};
    s.semi_axis_x_mm = j.at("semi_axes_mm")[0].get<double>();
    s.semi_axis_y_mm = j.at("semi_axes_mm")[1].get<double>();
    s.semi_axis_z_mm = j.at("semi_axes_mm")[2].get<double>();
    s.protrusion_count = j.at("protrusion_count").get<int>();
    s.protrusion_length_mm = j.at("protrusion_length_mm").get<double>();
    s.protrusion_radius_mm = j.at("protrusion_radius_mm").get<double>();
    s.wall_thickness_vox = j.at("wall_thickness_vox").get<int>();
    s.scar_arc_count = j.at("scar_arc_count").get<int>();
    s.scar_arc_widths_deg = j.at("scar_arc_widths_deg").get<std::vector<double>>();
    s.scar_band_half_mm = j.at("scar_band_half_mm").get<double>();
    s.distractor_count = j.at("distractor_count").get<int>();
    s.distractor_radius_mm = j.at("distractor_radius_mm").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
    auto g = [&](const char* name) {
        const auto& a = j.at("intensity").at(name);
        return GaussianModel{a[0].get<double>(), a[1].get<double>()};
    };
    s.background = g("background");
    s.blood_pool = g("blood_pool");
    s.wall = g("wall");
    s.scar = g("scar");
    return s;
}

void write_case(const std::string& dir, const PhantomCase& c) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir + "/spec.json", std::ios::binary | std::ios::trunc);
        if (!out) fail(errc::io, "cannot write " + dir + "/spec.json");
        out << spec_to_json(c.spec).dump(2) << '\n';
    }
    VolumeHeader h;
    h.dims = c.intensity.dims();
    h.spacing = c.intensity.spacing();

    h.kind = ValueKind::intensity;
    h.checksum = c.intensity_checksum;
    write_mvol(dir + "/intensity.mvol", h, c.intensity);

    h.kind = ValueKind::label;
    h.alphabet = std::vector<int>{0, 1};
    h.checksum = c.la_checksum;
    write_mvol(dir + "/la_label.mvol", h, c.la_label.vol());

    h.alphabet = std::vector<int>{0, 1, 2};
    h.checksum = c.wall_scar_checksum;
    write_mvol(dir + "/wall_scar_label.mvol", h, c.wall_scar_label.vol());
}

} // namespace

std::string manifest_path(const std::string& suite_dir) { return suite_dir + "/manifest.json"; }

SuiteManifest generate_suite(int n_train, int n_test, const PhantomSpec& base_spec,
                             std::uint64_t seed, const std::string& out_dir, unsigned jobs) {
    if (n_train < 1 || n_test < 1) fail(errc::bad_argument, "suite needs at least one train and one test case");
    base_spec.validate();
    std::filesystem::create_directories(out_dir);

    const int total = n_train + n_test;
    SuiteManifest manifest;
    manifest.seed = seed;
    manifest.base_spec = base_spec;
    manifest.cases.resize(total);

    parallel_for(static_cast<std::size_t>(total), jobs, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t ci = lo; ci < hi; ++ci) {
            const std::uint64_t case_seed = derive_seed(seed, ci);
            Rng jitter(case_seed);
            PhantomSpec s = base_spec;
            s.seed = derive_seed(case_seed, 1);
            s.semi_axis_x_mm *= jitter.uniform(0.9, 1.1);
            s.semi_axis_y_mm *= jitter.uniform(0.9, 1.1);
            s.semi_axis_z_mm *= jitter.uniform(0.9, 1.1);

            char id[32];
            std::snprintf(id, sizeof id, "case_%03zu", ci);
            const PhantomCase c = generate(s);
            write_case(out_dir + "/" + id, c);

            SuiteManifest::Case& e = manifest.cases[ci];
            e.id = id;
            e.role = ci < static_cast<std::size_t>(n_train) ? "train" : "test";
            e.dir = id;
            e.seed = s.seed;
            e.intensity_checksum = c.intensity_checksum;
            e.la_checksum = c.la_checksum;
            e.wall_scar_checksum = c.wall_scar_checksum;
        }
    });

    nlohmann::json j;
    j["seed"] = seed;
    j["n_train"] = n_train;
    j["n_test"] = n_test;
    j["base_spec"] = spec_to_json(base_spec);
    j["cases"] = nlohmann::json::array();
    for (const auto& e : manifest.cases) {
        j["cases"].push_back({{"id", e.id},
                              {"role", e.role},
                              {"dir", e.dir},
                              {"seed", e.seed},
                              {"checksums",
                               {{"intensity", e.intensity_checksum},
                                {"la_label", e.la_checksum},
                                {"wall_scar_label", e.wall_scar_checksum}}}});
    }
    std::ofstream out(manifest_path(out_dir), std::ios::binary | std::ios::trunc);
    if (!out) fail(errc::io, "cannot write manifest under " + out_dir);
    out << j.dump(2) << '\n';
    return manifest;
}

SuiteManifest read_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(errc::io, "cannot open " + path);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) fail(errc::malformed_header, path + ": manifest is not valid JSON");
    SuiteManifest m;
    try {
        m.seed = j.at("seed").get<std::uint64_t>();
        m.base_spec = spec_from_json(j.at("base_spec"));
        for (const auto& e : j.at("cases")) {
            SuiteManifest::Case c;
            c.id = e.at("id").get<std::string>();
            c.role = e.at("role").get<std::string>();
            c.dir = e.at("dir").get<std::string>();
            c.seed = e.at("seed").get<std::uint64_t>();
            c.intensity_checksum = e.at("checksums").at("intensity").get<std::string>();
            c.la_checksum = e.at("checksums").at("la_label").get<std::string>();
            c.wall_scar_checksum = e.at("checksums").at("wall_scar_label").get<std::string>();
            m.cases.push_back(std::move(c));
        }
    } catch (const std::exception& e) {
        fail(errc::malformed_header, path + ": " + e.what());
    }
    return m;
}

PhantomCase load_case(const std::string& suite_dir, const SuiteManifest::Case& entry) {
    const std::string dir = suite_dir + "/" + entry.dir;
    PhantomCase c;
    {
        std::ifstream in(dir + "/spec.json", std::ios::binary);
        if (!in) fail(errc::io, "cannot open " + dir + "/spec.json");
        nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded()) fail(errc::malformed_header, dir + "/spec.json: not valid JSON");
        c.spec = spec_from_json(j);
    }
    c.intensity = read_mvol_volume(dir + "/intensity.mvol");
    c.la_label = read_mvol_label(dir + "/la_label.mvol", {0, 1});
    c.wall_scar_label = read_mvol_label(dir + "/wall_scar_label.mvol", {0, 1, 2});
    c.intensity_checksum = payload_checksum(c.intensity);
    c.la_checksum = payload_checksum(c.la_label.vol());
    c.wall_scar_checksum = payload_checksum(c.wall_scar_label.vol());
    if (c.intensity_checksum != entry.intensity_checksum || c.la_checksum != entry.la_checksum ||
        c.wall_scar_checksum != entry.wall_scar_checksum)
        fail(errc::checksum_mismatch, entry.id + ": case payloads do not match the manifest");
    return c;
}

} // namespace lasq
