#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bttt/ecm.hpp"
#include "bttt/features.hpp"
#include "bttt/loss.hpp"
#include "bttt/model.hpp"
#include "bttt/train.hpp"

namespace bttt::experiment {

/// One source -> target synthetic experiment: fleet recipes, grid, model and
/// training settings, all derived deterministically from `seed`.
struct Preset {
    std::uint64_t seed = 1;
    features::VoltageGrid grid;
    ecm::FleetConfig source;
    ecm::FleetConfig target;
    // Fraction of the grid observed for target samples at test time.
    double target_observed_fraction = 0.7;
    model::ModelConfig model;
    train::OptimConfig optim;
    features::MaskSpec pretrain_mask;  // ratio 0.3
    loss::LossConfig pretrain_loss;    // source-anchored prior
    train::TtaConfig tta;              // default tta_full + pg_ssl, target-anchored prior
};

/// The shipped desk-scale preset. The target fleet shifts OCV curvature,
/// doubles the resistance growth rate, switches CC-CV 0.5C at 25 C to CC 1C
/// at 40 C, and scales nominal capacity 1.1 -> 0.74 Ah.
[[nodiscard]] Preset default_preset(std::uint64_t seed);

/// Re-derives every stage seed (fleets, init, masks, shuffle) from `seed` in
/// the same fixed order default_preset uses; other settings stay untouched.
void reseed(Preset& preset, std::uint64_t seed);

/// Composite configuration for the gradient gate: frozen backbone plus
/// reprogramming plus prompt, small dims so the check stays fast.
[[nodiscard]] model::ModelConfig gradcheck_config();

/// Finite-difference check of the full differentiable path (embed ->
/// reprogram -> encode with prompt -> decode -> pg_ssl loss) on a simulated
/// cycle. Deterministic; passes when max_rel_error < 1e-4.
[[nodiscard]] ad::GradCheckReport run_gradcheck();

/// Simulates the fleet and interpolates every cycle onto the grid.
/// observed_fraction < 1 truncates each feature's observed prefix.
[[nodiscard]] features::Dataset featurize_fleet(const ecm::Fleet& fleet,
                                                const features::VoltageGrid& grid,
                                                double observed_fraction = 1.0);

/// Truncation views of the source set used to fit the linear head; the probe
/// sees every sample at several observed fractions so it cannot key on
/// full-curve idiosyncrasies absent at test time.
[[nodiscard]] features::Dataset probe_views(const features::Dataset& source);

/// Source fleet -> features -> pretrained + probed model, ready for TTA runs.
struct Prepared {
    features::Dataset source;
    features::Dataset target;
    model::Model model;
    train::PretrainReport pretrain_report;
    train::ProbeReport probe_report;
};

[[nodiscard]] Prepared prepare(const Preset& preset);

/// Rebuilds the datasets from the preset and loads the model from a saved
/// checkpoint instead of training; reports stay default-initialized.
[[nodiscard]] Prepared load_prepared(const Preset& preset, const std::string& model_path);

/// Adaptation over the target stream with the given TTA settings; the model
/// inside `prep` is restored afterwards, so variants can share one `prepare`.
[[nodiscard]] train::AdaptationReport run_tta(Prepared& prep, const Preset& preset,
                                              const train::TtaConfig& tta);

/// Ablation matrix row: {ssl objective} x {mode} x {mask ratio}.
struct AblationRow {
    std::string mode;
    std::string ssl;
    double mask_ratio = 0.0;
    double lambda = 0.0;
    double mae = 0.0;
    double rmse = 0.0;
    std::int64_t trainable_count = 0;
};

[[nodiscard]] std::vector<AblationRow> run_ablation(Prepared& prep, const Preset& preset,
                                                    const std::vector<double>& mask_ratios);

[[nodiscard]] std::string ablation_csv(const std::vector<AblationRow>& rows);

[[nodiscard]] std::string preset_json(const Preset& preset);
[[nodiscard]] Preset preset_from_json(const std::string& text);

}  // namespace bttt::experiment
