#include "lasq/surface.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace lasq {

std::size_t LabeledSurface::scar_count() const {
    std::size_t n = 0;
    for (auto c : classes) n += c;
    return n;
}

SurfaceMask hard_boundary_mask(const LabelVolume& la_label) {
    if (la_label.alphabet() != std::vector<int>{0, 1})
        fail(errc::alphabet, "hard_boundary_mask expects a binary {0,1} label");
    if (la_label.count(1) == 0 || la_label.count(0) == 0)
        fail(errc::empty_class, "hard_boundary_mask needs nonempty foreground and background");
    const std::vector<std::uint8_t> s = boundary_set(la_label);
    Volume3 m(la_label.vol().dims(), la_label.vol().spacing());
    bool any = false;
    for (std::size_t i = 0; i < m.size(); ++i) {
        m[i] = s[i] ? 1.0 : 0.0;
        any = any || s[i];
    }
    if (!any) fail(errc::empty_surface, "boundary set is empty");
    return {std::move(m), MaskKind::hard_gt, "hard_boundary_mask"};
}

namespace {

// Central differences with one-sided stencils at the faces, per axis.
// Returns the three component fields.
std::array<Volume3, 3> central_gradient(const Volume3& f) {
    const Dims d = f.dims();
    std::array<Volume3, 3> g = {Volume3(d, f.spacing()), Volume3(d, f.spacing()), Volume3(d, f.spacing())};
    const int n[3] = {d.nx, d.ny, d.nz};
    for (int k = 0; k < d.nz; ++k)
        for (int j = 0; j < d.ny; ++j)
            for (int i = 0; i < d.nx; ++i) {
                const int c[3] = {i, j, k};
                for (int a = 0; a < 3; ++a) {
                    if (n[a] == 1) { g[a].at(i, j, k) = 0.0; continue; }
                    int lo[3] = {i, j, k}, hi[3] = {i, j, k};
                    double scale = 0.5;
                    if (c[a] == 0) { hi[a] += 1; scale = 1.0; }
                    else if (c[a] == n[a] - 1) { lo[a] -= 1; scale = 1.0; }
                    else { lo[a] -= 1; hi[a] += 1; }
                    g[a].at(i, j, k) = (f.at(hi[0], hi[1], hi[2]) - f.at(lo[0], lo[1], lo[2])) * scale;
                }
            }
    return g;
}

// Adjoint of central_gradient for one axis component (scatter form).
void central_gradient_adjoint_accum(const Volume3& b, int axis, Volume3& acc) {
    const Dims d = b.dims();
    const int n[3] = {d.nx, d.ny, d.nz};
    if (n[axis] == 1) return;
    for (int k = 0; k < d.nz; ++k)
        for (int j = 0; j < d.ny; ++j)
            for (int i = 0; i < d.nx; ++i) {
                const int c[3] = {i, j, k};
                const double v = b.at(i, j, k);
                if (v == 0.0) continue;
                int lo[3] = {i, j, k}, hi[3] = {i, j, k};
                double scale = 0.5;
                if (c[axis] == 0) { hi[axis] += 1; scale = 1.0; }
                else if (c[axis] == n[axis] - 1) { lo[axis] -= 1; scale = 1.0; }
                else { lo[axis] -= 1; hi[axis] += 1; }
                acc.at(hi[0], hi[1], hi[2]) += v * scale;
                acc.at(lo[0], lo[1], lo[2]) -= v * scale;
            }
}

struct SoftMaskState {
    std::array<Volume3, 3> g;
    Volume3 r; // gradient magnitude
    std::size_t argmax = 0;
    double max = 0.0;
};

SoftMaskState soft_mask_state(const Volume3& la_prob) {
    SoftMaskState st{central_gradient(la_prob), Volume3(la_prob.dims(), la_prob.spacing()), 0, 0.0};
    for (std::size_t i = 0; i < st.r.size(); ++i) {
        const double gx = st.g[0][i], gy = st.g[1][i], gz = st.g[2][i];
        st.r[i] = std::sqrt(gx * gx + gy * gy + gz * gz);
        if (st.r[i] > st.max) {
            st.max = st.r[i];
            st.argmax = i;
        }
    }
    if (st.max == 0.0)
        fail(errc::degenerate_field, "field has zero gradient everywhere; soft boundary mask is undefined");
    return st;
}

} // namespace

SurfaceMask soft_boundary_mask(const Volume3& la_prob) {
    for (std::size_t i = 0; i < la_prob.size(); ++i)
        if (la_prob[i] < 0.0 || la_prob[i] > 1.0)
            fail(errc::out_of_range, "probability field has values outside [0,1]");
    SoftMaskState st = soft_mask_state(la_prob);
    Volume3 m(la_prob.dims(), la_prob.spacing());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = st.r[i] / st.max;
    return {std::move(m), MaskKind::soft_predicted, "soft_boundary_mask"};
}

Volume3 soft_boundary_mask_vjp(const Volume3& la_prob, const Volume3& grad_mask) {
    require_same_grid(la_prob, grad_mask, "soft_boundary_mask_vjp");
    SoftMaskState st = soft_mask_state(la_prob);
    const double m = st.max;

    // mask_i = r_i / m, m = r_{i*}:
    //   dL/dr_i = u_i/m - [i == i*] * (sum_j u_j r_j) / m^2
    double s1 = 0.0;
    for (std::size_t i = 0; i < grad_mask.size(); ++i) s1 += grad_mask[i] * st.r[i];
    Volume3 dr(la_prob.dims(), la_prob.spacing());
    for (std::size_t i = 0; i < dr.size(); ++i) dr[i] = grad_mask[i] / m;
    dr[st.argmax] -= s1 / (m * m);

    // dL/dg_a = dL/dr * g_a / r (zero where the magnitude vanishes)
    std::array<Volume3, 3> db = {Volume3(la_prob.dims(), la_prob.spacing()),
                                 Volume3(la_prob.dims(), la_prob.spacing()),
                                 Volume3(la_prob.dims(), la_prob.spacing())};
    for (std::size_t i = 0; i < dr.size(); ++i) {
        if (st.r[i] == 0.0) continue;
        const double c = dr[i] / st.r[i];
        db[0][i] = c * st.g[0][i];
        db[1][i] = c * st.g[1][i];
        db[2][i] = c * st.g[2][i];
    }

    Volume3 out(la_prob.dims(), la_prob.spacing());
    for (int a = 0; a < 3; ++a) central_gradient_adjoint_accum(db[a], a, out);
    return out;
}

static void require_hard(const SurfaceMask& surface, const char* context) {
    if (surface.kind != MaskKind::hard_gt)
        fail(errc::bad_argument, std::string(context) + " expects a hard surface mask");
}

LabeledSurface classify_surface(const DistanceProbabilityMap& dpm_pred, const SurfaceMask& surface) {
    require_hard(surface, "classify_surface");
    require_same_grid(dpm_pred.p_normal, surface.mask, "classify_surface");
    require_same_grid(dpm_pred.p_normal, dpm_pred.p_scar, "classify_surface");

    LabeledSurface out;
    out.dims = surface.mask.dims();
    out.spacing = surface.mask.spacing();
    for (std::size_t i = 0; i < surface.mask.size(); ++i) {
        if (surface.mask[i] == 0.0) continue;
        const auto c = surface.mask.coords(i);
        out.points.push_back(c);
        out.classes.push_back(dpm_pred.p_scar[i] > dpm_pred.p_normal[i] ? 1 : 0);
    }
    if (out.points.empty()) fail(errc::empty_surface, "surface mask has no voxels");
    return out;
}

LabeledSurface project_volume_labels(const LabelVolume& scar_label, const SurfaceMask& reference_surface,
                                     double radius) {
    require_hard(reference_surface, "project_volume_labels");
    require_same_grid(scar_label.vol(), reference_surface.mask, "project_volume_labels");
    if (radius < 0.0) fail(errc::bad_argument, "radius must be nonnegative");

    // Ball offsets ordered by squared distance; within a shell the absolute
    // linear index breaks ties, so offsets are scanned in index order too.
    struct Offset { int di, dj, dk, d2; };
    std::vector<Offset> offsets;
    const int r = static_cast<int>(std::floor(radius));
    const double r2 = radius * radius;
    for (int dk = -r; dk <= r; ++dk)
        for (int dj = -r; dj <= r; ++dj)
            for (int di = -r; di <= r; ++di) {
                const int d2 = di * di + dj * dj + dk * dk;
                if (static_cast<double>(d2) <= r2) offsets.push_back({di, dj, dk, d2});
            }
    std::stable_sort(offsets.begin(), offsets.end(), [](const Offset& a, const Offset& b) { return a.d2 < b.d2; });

    const Volume3& lv = scar_label.vol();
    LabeledSurface out;
    out.dims = lv.dims();
    out.spacing = lv.spacing();
    for (std::size_t idx = 0; idx < reference_surface.mask.size(); ++idx) {
        if (reference_surface.mask[idx] == 0.0) continue;
        const auto c = reference_surface.mask.coords(idx);
        int cls = 0;
        std::size_t o = 0;
        while (o < offsets.size()) {
            const int d2 = offsets[o].d2;
            int best_label = -1;
            std::size_t best_index = 0;
            for (; o < offsets.size() && offsets[o].d2 == d2; ++o) {
                const int i = c[0] + offsets[o].di, j = c[1] + offsets[o].dj, k = c[2] + offsets[o].dk;
                if (!lv.in_bounds(i, j, k)) continue;
                const int lab = scar_label.label_at(i, j, k);
                if (lab == 0) continue;
                const std::size_t li = lv.index(i, j, k);
                if (best_label < 0 || li < best_index) {
                    best_label = lab;
                    best_index = li;
                }
            }
            if (best_label >= 0) {
                cls = best_label == 2 ? 1 : 0;
                break;
            }
        }
        out.points.push_back(c);
        out.classes.push_back(static_cast<std::uint8_t>(cls));
    }
    if (out.points.empty()) fail(errc::empty_surface, "reference surface has no voxels");
    return out;
}

void export_labeled_surface_ply(const LabeledSurface& surface, const std::string& path) {
    if (surface.points.empty()) fail(errc::empty_surface, "cannot export an empty surface");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(errc::io, "cannot open " + path + " for writing");
    out << "ply\nformat ascii 1.0\nelement vertex " << surface.points.size()
        << "\nproperty float x\nproperty float y\nproperty float z\n"
           "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
    char line[128];
    for (std::size_t p = 0; p < surface.points.size(); ++p) {
        const auto& c = surface.points[p];
        const bool scar = surface.classes[p] != 0;
        std::snprintf(line, sizeof line, "%.9g %.9g %.9g %d %d %d\n",
                      c[0] * surface.spacing.sx, c[1] * surface.spacing.sy, c[2] * surface.spacing.sz,
                      255, scar ? 0 : 255, scar ? 0 : 255);
        out << line;
    }
    if (!out) fail(errc::io, "short write to " + path);
}

} // namespace lasq
