#include "lasq/losses.hpp"

#include <cmath>

#include "lasq/util.hpp"

namespace lasq {

Weights Weights::at_iteration(int iter) const {
    validate();
    if (iter < 0) fail(errc::bad_argument, "iteration must be nonnegative");
    Weights w = *this;
    const int steps = growth_period > 0 ? iter / growth_period : 0;
    const double f = std::pow(growth_factor, steps);
    w.lambda_la *= f;
    w.lambda_m2 *= f;
    return w;
}

void Weights::validate() const {
    if (lambda_la < 0 || lambda_scar < 0 || lambda_m1 < 0 || lambda_m2 < 0)
        fail(errc::bad_argument, "loss weights must be nonnegative");
    if (growth_factor < 1.0) fail(errc::bad_argument, "weight growth factor must be >= 1");
}

ScarMetric scar_metric_from_string(const std::string& s) {
    if (s == "l2") return ScarMetric::l2;
    if (s == "hellinger") return ScarMetric::hellinger;
    fail(errc::bad_argument, "unknown scar metric \"" + s + "\"");
}

const char* to_string(ScarMetric m) { return m == ScarMetric::l2 ? "l2" : "hellinger"; }

M2Mode m2_mode_from_string(const std::string& s) {
    if (s == "differentiable") return M2Mode::differentiable;
    if (s == "stop-gradient" || s == "stop_gradient") return M2Mode::stop_gradient;
    fail(errc::bad_argument, "unknown m2 mode \"" + s + "\"");
}

const char* to_string(M2Mode m) { return m == M2Mode::differentiable ? "differentiable" : "stop-gradient"; }

ScalarGrad bce(const Volume3& pred, const LabelVolume& target) {
    require_same_grid(pred, target.vol(), "bce");
    std::vector<double> terms(pred.size());
    ScalarGrad out;
    out.grad = Volume3(pred.dims(), pred.spacing());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        double p = pred[i];
        if (p < 0.0 || p > 1.0) fail(errc::out_of_range, "bce prediction outside [0,1] at flat index " + std::to_string(i));
        p = std::clamp(p, kBceEps, 1.0 - kBceEps);
        const double y = static_cast<double>(target.label_at(i));
        terms[i] = -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
        out.grad[i] = -(y / p - (1.0 - y) / (1.0 - p));
    }
    out.value = pairwise_sum(terms);
    return out;
}

ScalarGrad se_la(const Volume3& pred, const SignedDistanceMap& dtm, double t_la) {
    require_same_grid(pred, dtm.values, "se_la");
    std::vector<double> terms(pred.size());
    ScalarGrad out;
    out.grad = Volume3(pred.dims(), pred.spacing());
    for (std::size_t i = 0; i < pred.size(); ++i) {
        terms[i] = (pred[i] - t_la) * dtm.values[i];
        out.grad[i] = dtm.values[i];
    }
    out.value = pairwise_sum(terms);
    return out;
}

DpmGrads se_scar(const DistanceProbabilityMap& dpm_pred, const DistanceProbabilityMap& dpm_target,
                 ScarMetric metric) {
    require_same_grid(dpm_pred.p_normal, dpm_pred.p_scar, "se_scar");
    require_same_grid(dpm_pred.p_normal, dpm_target.p_normal, "se_scar");
    require_same_grid(dpm_pred.p_normal, dpm_target.p_scar, "se_scar");

    const std::size_t n = dpm_pred.p_normal.size();
    std::vector<double> terms(n);
    DpmGrads out;
    out.grad_normal = Volume3(dpm_pred.p_normal.dims(), dpm_pred.p_normal.spacing());
    out.grad_scar = Volume3(dpm_pred.p_normal.dims(), dpm_pred.p_normal.spacing());

    if (metric == ScarMetric::l2) {
        for (std::size_t i = 0; i < n; ++i) {
            const double dn = dpm_pred.p_normal[i] - dpm_target.p_normal[i];
            const double ds = dpm_pred.p_scar[i] - dpm_target.p_scar[i];
            terms[i] = dn * dn + ds * ds;
            out.grad_normal[i] = 2.0 * dn;
            out.grad_scar[i] = 2.0 * ds;
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            const double pn = dpm_pred.p_normal[i], ps = dpm_pred.p_scar[i];
            const double qn = dpm_target.p_normal[i], qs = dpm_target.p_scar[i];
            if (pn <= 0.0 || ps <= 0.0 || qn < 0.0 || qs < 0.0)
                fail(errc::out_of_range, "hellinger needs positive predicted channels at flat index " + std::to_string(i));
            const double dn = std::sqrt(pn) - std::sqrt(qn);
            const double ds = std::sqrt(ps) - std::sqrt(qs);
            terms[i] = dn * dn + ds * ds;
            out.grad_normal[i] = 1.0 - std::sqrt(qn / pn);
            out.grad_scar[i] = 1.0 - std::sqrt(qs / ps);
        }
    }
    out.value = pairwise_sum(terms);
    return out;
}

SaGrads sa(const DistanceProbabilityMap& dpm_pred, const DistanceProbabilityMap& dpm_target,
           const SurfaceMask& mask) {
    require_same_grid(dpm_pred.p_normal, dpm_pred.p_scar, "sa");
    require_same_grid(dpm_pred.p_normal, dpm_target.p_normal, "sa");
    require_same_grid(dpm_pred.p_normal, mask.mask, "sa");

    const std::size_t n = dpm_pred.p_normal.size();
    std::vector<double> terms(n);
    SaGrads out;
    const Dims d = dpm_pred.p_normal.dims();
    const Spacing sp = dpm_pred.p_normal.spacing();
    out.grad_normal = Volume3(d, sp);
    out.grad_scar = Volume3(d, sp);
    out.grad_mask = Volume3(d, sp);
    for (std::size_t i = 0; i < n; ++i) {
        const double m = mask.mask[i];
        if (m < 0.0 || m > 1.0) fail(errc::out_of_range, "attention mask outside [0,1] at flat index " + std::to_string(i));
        const double diff = (dpm_pred.p_normal[i] - dpm_pred.p_scar[i]) - (dpm_target.p_normal[i] - dpm_target.p_scar[i]);
        terms[i] = m * diff * (m * diff);
        out.grad_normal[i] = 2.0 * m * m * diff;
        out.grad_scar[i] = -out.grad_normal[i];
        out.grad_mask[i] = 2.0 * m * diff * diff;
    }
    out.value = pairwise_sum(terms);
    return out;
}

ScalarGrad dice_loss(const Volume3& pred, const LabelVolume& target) {
    require_same_grid(pred, target.vol(), "dice_loss");
    const std::size_t n = pred.size();
    std::vector<double> inter(n), psum(n);
    double ysum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (pred[i] < 0.0 || pred[i] > 1.0)
            fail(errc::out_of_range, "dice_loss prediction outside [0,1] at flat index " + std::to_string(i));
        const double y = static_cast<double>(target.label_at(i));
        inter[i] = pred[i] * y;
        psum[i] = pred[i];
        ysum += y;
    }
    const double a = pairwise_sum(inter);
    const double b = pairwise_sum(psum) + ysum + kDiceEps;
    ScalarGrad out;
    out.value = 1.0 - 2.0 * a / b;
    out.grad = Volume3(pred.dims(), pred.spacing());
    for (std::size_t i = 0; i < n; ++i) {
        const double y = static_cast<double>(target.label_at(i));
        out.grad[i] = -2.0 * (y * b - a) / (b * b);
    }
    return out;
}

LossReport total_loss(const Volume3& pred_la, const DistanceProbabilityMap& dpm_pred,
                      const LossTargets& targets, const Weights& weights,
                      M2Mode m2_mode, ScarMetric metric) {
    if (!targets.la_label || !targets.la_dtm || !targets.dpm_target || !targets.m1)
        fail(errc::bad_argument, "total_loss needs la_label, la_dtm, dpm_target and m1 targets");
    weights.validate();

    const ScalarGrad b = bce(pred_la, *targets.la_label);
    const ScalarGrad s = se_la(pred_la, *targets.la_dtm);
    const DpmGrads sc = se_scar(dpm_pred, *targets.dpm_target, metric);
    const SaGrads a1 = sa(dpm_pred, *targets.dpm_target, *targets.m1);

    const SurfaceMask m2 = soft_boundary_mask(pred_la);
    const SaGrads a2 = sa(dpm_pred, *targets.dpm_target, m2);

    LossReport r;
    r.weights = weights;
    r.bce_la = b.value;
    r.se_la = s.value;
    r.se_scar = sc.value;
    r.sa_m1 = a1.value;
    r.sa_m2 = a2.value;
    r.total = r.bce_la + weights.lambda_la * r.se_la + weights.lambda_scar * r.se_scar +
              weights.lambda_m1 * r.sa_m1 + weights.lambda_m2 * r.sa_m2;

    const Dims d = pred_la.dims();
    const Spacing sp = pred_la.spacing();
    r.grad_pred_la = Volume3(d, sp);
    r.grad_p_normal = Volume3(d, sp);
    r.grad_p_scar = Volume3(d, sp);
    for (std::size_t i = 0; i < pred_la.size(); ++i) {
        r.grad_pred_la[i] = b.grad[i] + weights.lambda_la * s.grad[i];
        r.grad_p_normal[i] = weights.lambda_scar * sc.grad_normal[i] + weights.lambda_m1 * a1.grad_normal[i] +
                             weights.lambda_m2 * a2.grad_normal[i];
        r.grad_p_scar[i] = weights.lambda_scar * sc.grad_scar[i] + weights.lambda_m1 * a1.grad_scar[i] +
                           weights.lambda_m2 * a2.grad_scar[i];
    }
    if (m2_mode == M2Mode::differentiable) {
        Volume3 up(d, sp);
        for (std::size_t i = 0; i < up.size(); ++i) up[i] = weights.lambda_m2 * a2.grad_mask[i];
        const Volume3 chain = soft_boundary_mask_vjp(pred_la, up);
        for (std::size_t i = 0; i < up.size(); ++i) r.grad_pred_la[i] += chain[i];
    }
    r.grad_pred_la.check_finite("total_loss grad_pred_la");
    r.grad_p_normal.check_finite("total_loss grad_p_normal");
    r.grad_p_scar.check_finite("total_loss grad_p_scar");
    return r;
}

} // namespace lasq
