#include "lasq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "lasq/distance.hpp"
#include "lasq/util.hpp"

namespace lasq {

double dice_overlap(const LabelVolume& a, const LabelVolume& b) {
    require_same_grid(a.vol(), b.vol(), "dice_overlap");
    std::size_t na = 0, nb = 0, inter = 0;
    for (std::size_t i = 0; i < a.vol().size(); ++i) {
        const bool fa = a.label_at(i) != 0, fb = b.label_at(i) != 0;
        na += fa;
        nb += fb;
        inter += fa && fb;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

namespace {

// Directed distances from every boundary voxel of `from` to the boundary set
// of `to`, in mm, via the exact transform.
std::vector<double> directed_boundary_distances(const LabelVolume& from, const LabelVolume& to) {
    const std::vector<std::uint8_t> sf = boundary_set(from);
    const std::vector<std::uint8_t> st = boundary_set(to);
    const Spacing sp = from.vol().spacing();
    const std::vector<double> d2 = edt_squared(st, from.vol().dims(), sp.sx * sp.sx, sp.sy * sp.sy, sp.sz * sp.sz);
    std::vector<double> out;
    for (std::size_t i = 0; i < sf.size(); ++i)
        if (sf[i]) out.push_back(std::sqrt(d2[i]));
    if (out.empty()) fail(errc::empty_surface, "label has an empty boundary set");
    return out;
}

double directed_max(std::vector<double> d, double percentile) {
    if (percentile >= 100.0) return *std::max_element(d.begin(), d.end());
    std::sort(d.begin(), d.end());
    const std::size_t rank = static_cast<std::size_t>(std::ceil(percentile / 100.0 * static_cast<double>(d.size())));
    return d[rank == 0 ? 0 : rank - 1];
}

} // namespace

SurfaceDistances surface_distances(const LabelVolume& a, const LabelVolume& b, double hd_percentile) {
    require_same_grid(a.vol(), b.vol(), "surface_distances");
    if (a.count(1) == 0 || b.count(1) == 0) fail(errc::empty_class, "surface_distances needs nonempty labels");
    if (!(hd_percentile > 0.0) || hd_percentile > 100.0) fail(errc::bad_argument, "hd percentile must be in (0,100]");

    const std::vector<double> dab = directed_boundary_distances(a, b);
    const std::vector<double> dba = directed_boundary_distances(b, a);
    const double mean_ab = pairwise_sum(dab) / static_cast<double>(dab.size());
    const double mean_ba = pairwise_sum(dba) / static_cast<double>(dba.size());
    SurfaceDistances out;
    out.asd_mm = 0.5 * (mean_ab + mean_ba);
    out.hd_mm = std::max(directed_max(dab, hd_percentile), directed_max(dba, hd_percentile));
    return out;
}

SurfaceScarMetrics surface_scar_metrics(const LabeledSurface& pred, const LabeledSurface& gt) {
    if (pred.points != gt.points)
        fail(errc::grid_mismatch, "pred and gt surfaces cover different point sets");
    const std::size_t n = pred.size();
    if (n == 0) fail(errc::empty_surface, "empty surfaces");

    std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const bool p = pred.classes[i] != 0, g = gt.classes[i] != 0;
        if (p && g) ++tp;
        else if (!p && !g) ++tn;
        else if (p) ++fp;
        else ++fn;
    }
    auto ratio = [](std::size_t num, std::size_t den) {
        return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
    };
    SurfaceScarMetrics m;
    m.accuracy = static_cast<double>(tp + tn) / static_cast<double>(n);
    m.dice_s = ratio(2 * tp, 2 * tp + fp + fn);
    // generalized Dice over {scar, normal}: normal intersections are the tn
    m.dice_g = ratio(2 * (tp + tn), (tp + fp) + (tp + fn) + (tn + fn) + (tn + fp));
    m.sensitivity = ratio(tp, tp + fn);
    m.specificity = ratio(tn, tn + fp);
    return m;
}

double otsu_threshold(std::span<const double> samples) {
    if (samples.size() < 2) fail(errc::constant_input, "otsu needs at least two samples");
    double lo = samples[0], hi = samples[0];
    for (double v : samples) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (!(hi > lo)) fail(errc::constant_input, "otsu needs at least two distinct values");

    constexpr int kBins = 256;
    long long hist[kBins] = {};
    const double scale = kBins / (hi - lo);
    for (double v : samples) {
        int b = static_cast<int>((v - lo) * scale);
        b = std::clamp(b, 0, kBins - 1);
        ++hist[b];
    }

    long long w_total = 0, m_total = 0;
    for (int b = 0; b < kBins; ++b) {
        w_total += hist[b];
        m_total += hist[b] * b;
    }

    double best = -1.0;
    int first = -1, last = -1;
    long long w0 = 0, m0 = 0;
    for (int cut = 1; cut < kBins; ++cut) {
        w0 += hist[cut - 1];
        m0 += hist[cut - 1] * (cut - 1);
        const long long w1 = w_total - w0;
        if (w0 == 0) continue;
        if (w1 == 0) break;
        const double mu0 = static_cast<double>(m0) / static_cast<double>(w0);
        const double mu1 = static_cast<double>(m_total - m0) / static_cast<double>(w1);
        const double between = static_cast<double>(w0) * static_cast<double>(w1) * (mu0 - mu1) * (mu0 - mu1);
        if (between > best) {
            best = between;
            first = last = cut;
        } else if (between == best) {
            last = cut;
        }
    }
    if (first < 0) fail(errc::constant_input, "otsu found no valid split");
    const double cut_mid = 0.5 * (first + last);
    return lo + cut_mid * (hi - lo) / kBins;
}

LabeledSurface otsu_surface_baseline(const Volume3& intensity, const SurfaceMask& reference_surface,
                                     double radius) {
    require_same_grid(intensity, reference_surface.mask, "otsu_surface_baseline");
    if (reference_surface.kind != MaskKind::hard_gt)
        fail(errc::bad_argument, "otsu_surface_baseline expects a hard surface mask");

    const int r = static_cast<int>(std::floor(radius));
    const double r2 = radius * radius;
    LabeledSurface out;
    out.dims = intensity.dims();
    out.spacing = intensity.spacing();
    std::vector<double> features;
    for (std::size_t idx = 0; idx < reference_surface.mask.size(); ++idx) {
        if (reference_surface.mask[idx] == 0.0) continue;
        const auto c = reference_surface.mask.coords(idx);
        double feat = intensity[idx];
        for (int dk = -r; dk <= r; ++dk)
            for (int dj = -r; dj <= r; ++dj)
                for (int di = -r; di <= r; ++di) {
                    if (di * di + dj * dj + dk * dk > r2) continue;
                    const int i = c[0] + di, j = c[1] + dj, k = c[2] + dk;
                    if (!intensity.in_bounds(i, j, k)) continue;
                    feat = std::max(feat, intensity.at(i, j, k));
                }
        out.points.push_back(c);
        features.push_back(feat);
    }
    if (out.points.empty()) fail(errc::empty_surface, "reference surface has no voxels");
    const double thr = otsu_threshold(features);
    out.classes.resize(out.points.size());
    for (std::size_t i = 0; i < features.size(); ++i)
        out.classes[i] = features[i] > thr ? 1 : 0;
    return out;
}

std::string metrics_csv_header() {
    return "case_id,dice_la,asd_mm,hd_mm,accuracy,dice_s,dice_g,sensitivity,specificity";
}

std::string metrics_csv_row(const MetricsReport& r) {
    char buf[320];
    std::snprintf(buf, sizeof buf, "%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g",
                  r.case_id.c_str(), r.dice_la, r.asd_mm, r.hd_mm, r.accuracy, r.dice_s, r.dice_g,
                  r.sensitivity, r.specificity);
    return buf;
}

} // namespace lasq
