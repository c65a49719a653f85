#include "lasq/distance.hpp"

#include <cmath>
#include <limits>

#include "lasq/util.hpp"

namespace lasq {

const char* to_string(DpmVariant v) {
    switch (v) {
        case DpmVariant::exp: return "exp";
        case DpmVariant::expit: return "expit";
        case DpmVariant::exp_normalized: return "exp-norm";
        case DpmVariant::expit_normalized: return "expit-norm";
    }
    return "exp";
}

DpmVariant dpm_variant_from_string(const std::string& s) {
    if (s == "exp") return DpmVariant::exp;
    if (s == "expit") return DpmVariant::expit;
    if (s == "exp-norm" || s == "exp_normalized") return DpmVariant::exp_normalized;
    if (s == "expit-norm" || s == "expit_normalized") return DpmVariant::expit_normalized;
    fail(errc::bad_argument, "unknown DPM variant \"" + s + "\"");
}

std::vector<std::uint8_t> boundary_set(const LabelVolume& label) {
    const Volume3& v = label.vol();
    const Dims d = v.dims();
    std::vector<std::uint8_t> s(v.size(), 0);
    for (int k = 0; k < d.nz; ++k)
        for (int j = 0; j < d.ny; ++j)
            for (int i = 0; i < d.nx; ++i) {
                if (label.label_at(i, j, k) == 0) continue;
                const bool edge =
                    (i > 0 && label.label_at(i - 1, j, k) == 0) || (i + 1 < d.nx && label.label_at(i + 1, j, k) == 0) ||
                    (j > 0 && label.label_at(i, j - 1, k) == 0) || (j + 1 < d.ny && label.label_at(i, j + 1, k) == 0) ||
                    (k > 0 && label.label_at(i, j, k - 1) == 0) || (k + 1 < d.nz && label.label_at(i, j, k + 1) == 0);
                if (edge) s[v.index(i, j, k)] = 1;
            }
    return s;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// 1-D lower envelope of parabolas f(p) + w*(q-p)^2, Felzenszwalb-Huttenlocher.
// Scratch buffers are caller-owned so line sweeps do not allocate.
struct EnvelopeScratch {
    std::vector<int> v;      // parabola sites
    std::vector<double> z;   // envelope breakpoints
    std::vector<double> f;   // line input
    std::vector<double> out; // line output

    void resize(std::size_t n) {
        v.resize(n);
        z.resize(n + 1);
        f.resize(n);
        out.resize(n);
    }
};

void envelope_line(EnvelopeScratch& s, int n, double w) {
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (s.f[q] == kInf) continue;
        if (k < 0) {
            k = 0;
            s.v[0] = q;
            s.z[0] = -kInf;
            s.z[1] = kInf;
            continue;
        }
        double inter;
        for (;;) {
            const int p = s.v[k];
            inter = ((s.f[q] + w * q * q) - (s.f[p] + w * p * p)) / (2.0 * w * (q - p));
            if (inter > s.z[k]) break;
            --k;
            if (k < 0) break;
        }
        ++k;
        s.v[k] = q;
        s.z[k] = inter;
        s.z[k + 1] = kInf;
    }
    if (k < 0) {
        for (int q = 0; q < n; ++q) s.out[q] = kInf;
        return;
    }
    int j = 0;
    for (int q = 0; q < n; ++q) {
        while (s.z[j + 1] < q) ++j;
        const double dq = q - s.v[j];
        s.out[q] = edt_axis_term(dq, w, s.f[s.v[j]]);
    }
}

} // namespace

std::vector<double> edt_squared(const std::vector<std::uint8_t>& seed, const Dims& dims,
                                double wx, double wy, double wz, unsigned jobs) {
    const std::size_t n = dims.count();
    if (seed.size() != n) fail(errc::bad_argument, "seed mask size does not match dims");

    std::vector<double> g(n);
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
        g[i] = seed[i] ? 0.0 : kInf;
        any = any || seed[i];
    }
    if (!any) fail(errc::empty_class, "distance transform requires a nonempty seed set");

    const std::size_t strides[3] = {1, static_cast<std::size_t>(dims.nx), static_cast<std::size_t>(dims.nx) * dims.ny};
    const int counts[3] = {dims.nx, dims.ny, dims.nz};
    const double weights[3] = {wx, wy, wz};

    for (int axis = 0; axis < 3; ++axis) {
        const int len = counts[axis];
        const std::size_t stride = strides[axis];
        const std::size_t lines = n / static_cast<std::size_t>(len);
        // enumerate line origins: all voxels with coordinate 0 along `axis`
        std::vector<std::size_t> origins;
        origins.reserve(lines);
        for (std::size_t idx = 0; idx < n; ++idx) {
            std::size_t c;
            if (axis == 0) c = idx % strides[1];
            else if (axis == 1) c = (idx / strides[1]) % static_cast<std::size_t>(dims.ny);
            else c = idx / strides[2];
            if (c == 0) origins.push_back(idx);
        }
        parallel_for(origins.size(), jobs, [&](std::size_t lo, std::size_t hi) {
            EnvelopeScratch scratch;
            scratch.resize(static_cast<std::size_t>(len));
            for (std::size_t li = lo; li < hi; ++li) {
                const std::size_t base = origins[li];
                for (int q = 0; q < len; ++q) scratch.f[q] = g[base + stride * q];
                envelope_line(scratch, len, weights[axis]);
                for (int q = 0; q < len; ++q) g[base + stride * q] = scratch.out[q];
            }
        });
    }
    return g;
}

double apply_beta_clip(double squared_distance, double beta, double clip) {
    double d = std::sqrt(squared_distance);
    if (d > clip) d = clip;
    if (beta == 1.0) return d;
    if (beta == 2.0) return d * d;
    return std::pow(d, beta);
}

SignedDistanceMap signed_edt(const LabelVolume& label, double beta, double clip,
                             bool spacing_aware, unsigned jobs) {
    if (!(beta > 0.0)) fail(errc::bad_argument, "beta must be positive");
    if (!(clip > 0.0)) fail(errc::bad_argument, "clip must be positive");
    if (label.alphabet() != std::vector<int>{0, 1})
        fail(errc::alphabet, "signed_edt expects a binary {0,1} label");
    const Volume3& v = label.vol();
    if (label.count(1) == 0) fail(errc::empty_class, "label has no foreground voxels");
    if (label.count(0) == 0) fail(errc::empty_class, "label has no background voxels");

    const std::vector<std::uint8_t> s = boundary_set(label);
    const Spacing sp = v.spacing();
    const double wx = spacing_aware ? sp.sx * sp.sx : 1.0;
    const double wy = spacing_aware ? sp.sy * sp.sy : 1.0;
    const double wz = spacing_aware ? sp.sz * sp.sz : 1.0;
    const std::vector<double> d2 = edt_squared(s, v.dims(), wx, wy, wz, jobs);

    Volume3 phi(v.dims(), sp);
    for (std::size_t i = 0; i < phi.size(); ++i) {
        const double mag = apply_beta_clip(d2[i], beta, clip);
        if (s[i]) phi[i] = 0.0;
        else if (label.label_at(i) == 1) phi[i] = -mag;
        else phi[i] = mag;
    }
    return {std::move(phi), beta, clip, spacing_aware};
}

SignedDistanceMap class_dtm(const Volume3& grid_like, const std::vector<std::uint8_t>& members,
                            double beta, double clip, bool spacing_aware, unsigned jobs) {
    const Spacing sp = grid_like.spacing();
    const double wx = spacing_aware ? sp.sx * sp.sx : 1.0;
    const double wy = spacing_aware ? sp.sy * sp.sy : 1.0;
    const double wz = spacing_aware ? sp.sz * sp.sz : 1.0;
    const std::vector<double> d2 = edt_squared(members, grid_like.dims(), wx, wy, wz, jobs);
    Volume3 mag(grid_like.dims(), sp);
    for (std::size_t i = 0; i < mag.size(); ++i) mag[i] = apply_beta_clip(d2[i], beta, clip);
    return {std::move(mag), beta, clip, spacing_aware};
}

std::pair<SignedDistanceMap, SignedDistanceMap>
dual_class_dtm(const LabelVolume& scar_label, double beta, double clip, bool spacing_aware, unsigned jobs) {
    if (scar_label.alphabet() != std::vector<int>{0, 1, 2})
        fail(errc::alphabet, "dual_class_dtm expects a {0,1,2} label");
    const Volume3& v = scar_label.vol();
    std::vector<std::uint8_t> wall(v.size(), 0), scar(v.size(), 0);
    std::size_t n_wall = 0, n_scar = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        const int lab = scar_label.label_at(i);
        if (lab == 1) { wall[i] = 1; ++n_wall; }
        else if (lab == 2) { scar[i] = 1; ++n_scar; }
    }
    if (n_wall == 0) fail(errc::empty_class, "normal-wall class (1) is empty");
    if (n_scar == 0) fail(errc::empty_class, "scar class (2) is empty");
    return {class_dtm(v, wall, beta, clip, spacing_aware, jobs),
            class_dtm(v, scar, beta, clip, spacing_aware, jobs)};
}

static double expit(double x) { return 1.0 / (1.0 + std::exp(-x)); }

DistanceProbabilityMap build_dpm(const SignedDistanceMap& wall_dtm, const SignedDistanceMap& scar_dtm,
                                 DpmVariant variant,
                                 const std::optional<SignedDistanceMap>& background_dtm) {
    require_same_grid(wall_dtm.values, scar_dtm.values, "build_dpm");
    const bool normalized = variant == DpmVariant::exp_normalized || variant == DpmVariant::expit_normalized;
    if (normalized) {
        if (!background_dtm)
            fail(errc::bad_argument, "normalized DPM variants need the background DTM");
        require_same_grid(wall_dtm.values, background_dtm->values, "build_dpm");
    }

    const bool use_exp = variant == DpmVariant::exp || variant == DpmVariant::exp_normalized;
    auto convert = [use_exp](double mag) { return use_exp ? std::exp(-mag) : expit(-mag); };

    DistanceProbabilityMap dpm;
    dpm.variant = variant;
    dpm.p_normal = Volume3(wall_dtm.values.dims(), wall_dtm.values.spacing());
    dpm.p_scar = Volume3(wall_dtm.values.dims(), wall_dtm.values.spacing());
    for (std::size_t i = 0; i < dpm.p_normal.size(); ++i) {
        double pn = convert(std::abs(wall_dtm.values[i]));
        double ps = convert(std::abs(scar_dtm.values[i]));
        if (normalized) {
            const double pb = convert(std::abs(background_dtm->values[i]));
            const double z = pn + ps + pb;
            pn /= z;
            ps /= z;
        }
        dpm.p_normal[i] = pn;
        dpm.p_scar[i] = ps;
    }
    return dpm;
}

DistanceProbabilityMap build_dpm_from_label(const LabelVolume& scar_label, DpmVariant variant,
                                            double beta, double clip, bool spacing_aware, unsigned jobs) {
    auto [wall, scar] = dual_class_dtm(scar_label, beta, clip, spacing_aware, jobs);
    std::optional<SignedDistanceMap> bg;
    if (variant == DpmVariant::exp_normalized || variant == DpmVariant::expit_normalized) {
        const Volume3& v = scar_label.vol();
        std::vector<std::uint8_t> members(v.size(), 0);
        std::size_t n_bg = 0;
        for (std::size_t i = 0; i < v.size(); ++i)
            if (scar_label.label_at(i) == 0) { members[i] = 1; ++n_bg; }
        if (n_bg == 0) fail(errc::empty_class, "background class (0) is empty");
        bg = class_dtm(v, members, beta, clip, spacing_aware, jobs);
    }
    return build_dpm(wall, scar, variant, bg);
}

} // namespace lasq
