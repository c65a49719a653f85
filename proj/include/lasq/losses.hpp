#pragma once

#include <string>

#include "lasq/distance.hpp"
#include "lasq/surface.hpp"
#include "lasq/volume.hpp"

namespace lasq {

// Balancing weights of the joint objective, with the growth schedule applied
// to lambda_la and lambda_m2 every `growth_period` iterations.
struct Weights {
    double lambda_la = 0.01;
    double lambda_scar = 10.0;
    double lambda_m1 = 0.01;
    double lambda_m2 = 0.001;
    double growth_factor = 1.1;
    int growth_period = 200;

    Weights at_iteration(int iter) const;
    void validate() const;
};

enum class ScarMetric { l2, hellinger };
ScarMetric scar_metric_from_string(const std::string& s);
const char* to_string(ScarMetric m);

enum class M2Mode { differentiable, stop_gradient };
M2Mode m2_mode_from_string(const std::string& s);
const char* to_string(M2Mode m);

struct ScalarGrad {
    double value = 0.0;
    Volume3 grad;
};

struct DpmGrads {
    double value = 0.0;
    Volume3 grad_normal;
    Volume3 grad_scar;
};

struct SaGrads {
    double value = 0.0;
    Volume3 grad_normal;
    Volume3 grad_scar;
    Volume3 grad_mask;
};

// Negated log-likelihood sum (minimizable); predictions are clamped to
// [eps, 1-eps] inside the logs.
inline constexpr double kBceEps = 1e-7;
ScalarGrad bce(const Volume3& pred, const LabelVolume& target);

// sum_i (pred_i - t_la) * phi_i; the gradient is phi itself.
ScalarGrad se_la(const Volume3& pred, const SignedDistanceMap& dtm, double t_la = 0.5);

DpmGrads se_scar(const DistanceProbabilityMap& dpm_pred, const DistanceProbabilityMap& dpm_target,
                 ScarMetric metric);

// sum_i (M_i * ((pn_i - ps_i) - (qn_i - qs_i)))^2 with q the target channels.
SaGrads sa(const DistanceProbabilityMap& dpm_pred, const DistanceProbabilityMap& dpm_target,
           const SurfaceMask& mask);

inline constexpr double kDiceEps = 1.0;
ScalarGrad dice_loss(const Volume3& pred, const LabelVolume& target);

struct LossTargets {
    const LabelVolume* la_label = nullptr;
    const SignedDistanceMap* la_dtm = nullptr;
    const DistanceProbabilityMap* dpm_target = nullptr;
    const SurfaceMask* m1 = nullptr;
};

struct LossReport {
    double bce_la = 0.0;
    double se_la = 0.0;
    double se_scar = 0.0;
    double sa_m1 = 0.0;
    double sa_m2 = 0.0;
    double total = 0.0;
    Volume3 grad_pred_la;
    Volume3 grad_p_normal;
    Volume3 grad_p_scar;
    Weights weights;
};

// Assembles the joint objective. M2 is recomputed from pred_la; in
// differentiable mode its chain-rule term is folded into grad_pred_la.
LossReport total_loss(const Volume3& pred_la, const DistanceProbabilityMap& dpm_pred,
                      const LossTargets& targets, const Weights& weights,
                      M2Mode m2_mode = M2Mode::differentiable, ScarMetric metric = ScarMetric::l2);

} // namespace lasq
