#pragma once

#include <span>
#include <string>
#include <vector>

#include "bttt/ecm.hpp"
#include "bttt/features.hpp"
#include "bttt/tensor.hpp"

namespace bttt::loss {

/// paper_literal keeps the uncorrected residual theta1*I + theta2*u + du/dt,
/// which carries an OCV forcing bias; ocv_corrected subtracts an OCV prior
/// from the voltage before differencing and is the only mode whose residual
/// vanishes on simulated ground truth.
enum class ResidualMode { PaperLiteral, OcvCorrected };

[[nodiscard]] std::string residual_mode_name(ResidualMode mode);
[[nodiscard]] ResidualMode residual_mode_from_name(const std::string& name);

/// OCV prior for the ocv_corrected penalty: soc_j = soc0 + x_hat_j / c_ref,
/// ocv_j interpolated from (soc, ocv). Reference values, not per-cell truth;
/// the penalty tolerates prior mismatch.
struct OcvPrior {
    std::vector<double> soc;   // strictly increasing breakpoints
    std::vector<double> ocv;   // volts
    double soc0 = 0.0;         // SOC where the recorded window starts
    double c_ref = 1.0;        // Ah mapped onto SOC
};

/// Anchors soc0 by inverting the reference OCV at v_lower minus the ohmic
/// drop (polarization has not built up at the window start).
[[nodiscard]] OcvPrior make_ocv_prior(const ecm::EcmParams& ref, double v_lower,
                                      double current_a,
                                      ecm::SignConvention convention =
                                          ecm::SignConvention::ChargePositive);

struct LossConfig {
    double lambda = 0.1;  // residual weight, >= 0
    ResidualMode residual_mode = ResidualMode::OcvCorrected;
    // Penalize the full generated curve (extrapolated region included) or
    // only the observed overlap.
    bool residual_full_curve = true;
    ecm::SignConvention convention = ecm::SignConvention::ChargePositive;
    ecm::EcmCoefficients coeffs{};  // reference theta for the penalty
    OcvPrior prior;                 // required in ocv_corrected mode
};

void validate(const LossConfig& cfg);

/// Plain-number residual inputs: one charge trajectory as (voltage, time)
/// pairs with the current and reference coefficients.
struct ResidualInputs {
    std::vector<double> v_grid;  // volts
    std::vector<double> t_grid;  // seconds, strictly increasing
    double current = 0.0;        // amps, sign per `convention`
    ecm::EcmCoefficients coeffs{};
    std::vector<double> ocv_at_soc;  // per-point OCV; empty = absent
    ecm::SignConvention convention = ecm::SignConvention::ChargePositive;
};

void validate(const ResidualInputs& in);

/// Raw ODE residual r (length n-2; central differences drop both endpoints).
/// ocv_corrected differences the OCV-subtracted overpotential so that the
/// residual vanishes on exact trajectories instead of plateauing at the OCV
/// drift rate; paper_literal differences the raw voltage.
[[nodiscard]] std::vector<double> ode_residual(const ResidualInputs& in, ResidualMode mode);

/// Mean squared error of x_hat against the observed prefix, masked positions
/// included (targets are pre-mask values); the unobserved tail is excluded.
ad::Val recon_loss(ad::Tape& t, ad::Val x_hat, const features::QdLinearFeature& x,
                   std::span<const int> masked_indices);

/// recon + lambda * mean(residual^2), differentiable through x_hat and
/// t_grid. For fixed predictions the value is affine in lambda with slope
/// mean(r^2). Residual term is skipped when lambda == 0, t_grid is invalid
/// (current <= 0 upstream), or the overlap window is too short in
/// overlap-only mode.
ad::Val pg_ssl_loss(ad::Tape& t, ad::Val x_hat, ad::Val t_grid,
                    const features::QdLinearFeature& x, const features::VoltageGrid& grid,
                    std::span<const int> masked_indices, const LossConfig& cfg);

[[nodiscard]] std::string loss_config_json(const LossConfig& cfg);
[[nodiscard]] LossConfig loss_config_from_json(const std::string& text);

}  // namespace bttt::loss
