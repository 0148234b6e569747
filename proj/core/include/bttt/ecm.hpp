#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace bttt::ecm {

/// Current sign convention for terminal-voltage and residual computations.
/// Charge-positive is the artifact-wide default; the discharge-positive frame
/// exists so both sides of the sign ledger stay unit-tested.
enum class SignConvention { ChargePositive, DischargePositive };

struct OcvPoint {
    double soc;      // fraction, 0..1
    double voltage;  // V
};

/// 1-RC Thevenin cell parameters. Resistances in ohms, capacitance in farads,
/// capacities in amp-hours.
struct EcmParams {
    double r_ohmic = 0.05;
    double r_pol = 0.03;
    double c_pol = 1000.0;
    std::vector<OcvPoint> ocv_table;
    double capacity_nom = 1.1;

    // Arrhenius-style temperature factor exp(k*(1/T_ref - 1/T)) applied to both
    // resistances; k = 0 disables temperature dependence.
    double arrhenius_k = 0.0;
    double temp_ref_c = 25.0;
};

/// Throws std::invalid_argument if any EcmParams invariant fails.
void validate(const EcmParams& params);

struct EcmCoefficients {
    double theta1;  // (R + R_p) / (C_p R_p), V/(A s)
    double theta2;  // 1 / (C_p R_p), 1/s
};

struct CellState {
    double soc = 0.0;
    double u_pol = 0.0;          // V
    double capacity_full = 0.0;  // Ah, current full capacity
};

enum class ChargeMode { Cc, CcCv };

struct ChargeProtocol {
    ChargeMode mode = ChargeMode::CcCv;
    double current_rate = 0.5;       // C-rate, 1/h; current = rate * capacity_nom
    double v_upper = 4.2;            // V
    double v_lower = 2.7;            // V
    double cv_cutoff_current = 0.05; // A, CC-CV termination
    double dt = 10.0;                // s
    double temperature = 25.0;       // degC, constant per cycle
    std::int64_t max_steps = 1'000'000;
};

struct DegradationSchedule {
    double capacity_fade_per_cycle = 0.0;
    double resistance_growth_per_cycle = 0.0;
    double noise_sigma = 0.0;  // V, measurement noise on recorded voltage
};

/// Relative spreads for per-cell multiplicative jitter, uniform in [1-s, 1+s].
struct ParamJitter {
    double r_ohmic = 0.0;
    double r_pol = 0.0;
    double c_pol = 0.0;
    double capacity_nom = 0.0;
};

struct FleetConfig {
    int n_cells = 1;
    int n_cycles = 1;
    EcmParams base_params;
    ParamJitter param_jitter;
    ChargeProtocol protocol;
    DegradationSchedule schedule;
    std::uint64_t seed = 0;
    std::string cell_prefix = "cell";
};

struct CycleSample {
    double t_s;
    double voltage_v;
    double current_a;
    double temp_c;
    double q_ah;  // cumulative charge since recording start
};

struct CycleRecord {
    std::string cell_id;
    int cycle = 0;
    std::vector<CycleSample> samples;
};

struct FleetLabel {
    std::string cell_id;
    int cycle = 0;
    double soh_pct = 0.0;
    double c_full = 0.0;  // Ah
    double c_nom = 0.0;   // Ah
};

struct Fleet {
    std::vector<CycleRecord> cycles;
    std::vector<FleetLabel> labels;
};

/// Piecewise-linear OCV, exact at breakpoints, clamped to the table span.
/// soc outside [0, 1] is a domain error.
[[nodiscard]] double ocv_lookup(const EcmParams& params, double soc);

/// Params with both resistances scaled by the Arrhenius factor at temp_c.
[[nodiscard]] EcmParams with_temperature(const EcmParams& params, double temp_c);

[[nodiscard]] EcmCoefficients derive_coefficients(const EcmParams& params, double temp_c);

/// Exact exponential update of the RC branch over dt with constant current;
/// soc integrates I*dt/(3600*capacity_full) and clamps to [0, 1].
/// Charge current is positive.
[[nodiscard]] CellState step_cell(const CellState& state, const EcmParams& params,
                                  double current_a, double dt_s);

/// Charge-positive: u = OCV(soc) + I*R + u_pol (terminal rises above OCV while
/// charging). Discharge-positive mirrors the signs.
[[nodiscard]] double terminal_voltage(const CellState& state, const EcmParams& params,
                                      double current_a,
                                      SignConvention conv = SignConvention::ChargePositive);

/// Samples every dt from the v_lower crossing until termination: v_upper for
/// CC, cv_cutoff_current for CC-CV. Phase logic runs on the noiseless voltage;
/// noise_sigma perturbs only recorded samples. Throws std::runtime_error if
/// the protocol does not terminate within max_steps.
[[nodiscard]] CycleRecord simulate_charge_cycle(const EcmParams& params, CellState state0,
                                                const ChargeProtocol& protocol,
                                                double noise_sigma = 0.0,
                                                std::uint64_t noise_seed = 0);

struct AgedCell {
    EcmParams params;      // resistances scaled by (1 + growth)^cycle_index
    double capacity_full;  // capacity_nom * (1 - fade)^cycle_index
};

/// Deterministic parametric aging. cycle_index 0 is the fresh cell.
[[nodiscard]] AgedCell apply_degradation(const EcmParams& fresh, int cycle_index,
                                         const DegradationSchedule& schedule);

/// Cycles are numbered from 1; cycle c ages with exponent c-1, so the first
/// label is exactly 100%.
[[nodiscard]] Fleet generate_fleet(const FleetConfig& config);

/// Monotone 11-point table spanning [v_lower, v_upper]. curvature 0 is a
/// straight line; larger values steepen the ends and flatten the plateau.
/// Valid range [0, 0.9].
[[nodiscard]] std::vector<OcvPoint> default_ocv_table(double v_lower, double v_upper,
                                                      double curvature = 0.5);

[[nodiscard]] std::string cycles_csv(const std::vector<CycleRecord>& cycles);
[[nodiscard]] std::string labels_csv(const std::vector<FleetLabel>& labels);
void write_cycles_csv(const std::string& path, const std::vector<CycleRecord>& cycles);
void write_labels_csv(const std::string& path, const std::vector<FleetLabel>& labels);

[[nodiscard]] std::string fleet_config_json(const FleetConfig& config);
[[nodiscard]] FleetConfig fleet_config_from_json(const std::string& text);

}  // namespace bttt::ecm
