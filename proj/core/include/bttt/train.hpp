#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "bttt/features.hpp"
#include "bttt/loss.hpp"
#include "bttt/model.hpp"
#include "bttt/tensor.hpp"

namespace bttt::train {

struct SgdMomentumConfig {
    double lr = 1e-2;
    double momentum = 0.9;
};

struct AdamwConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;  // decoupled
};

struct OptimConfig {
    AdamwConfig pretrain_opt;
    SgdMomentumConfig tta_opt;
    int tta_steps = 10;
    int max_epochs = 500;
    int batch_size = 32;
    double plateau_rel = 1e-4;  // stop when 10-epoch relative improvement drops below
    int plateau_epochs = 10;
    // Pretraining truncation augmentation: each sample is cut to a uniform
    // fraction of the grid so the decoder learns to extrapolate the curve
    // beyond short observed windows.
    double truncate_lo = 0.55;
    double truncate_hi = 1.0;
    std::uint64_t shuffle_seed = 0xF00D;
};

void validate(const OptimConfig& cfg);

/// Per-parameter optimizer slots addressed by name; `step` counts adamw
/// bias-correction time. Fresh state = zero momentum.
struct OptState {
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
    std::int64_t step = 0;
};

/// v <- momentum*v + grad; p <- p - lr*v, over the named parameters.
void sgd_momentum_step(ad::ParamStore& params, std::span<const std::string> names,
                       OptState& state, const SgdMomentumConfig& cfg);

/// Bias-corrected adaptive moments with decoupled weight decay.
void adamw_step(ad::ParamStore& params, std::span<const std::string> names, OptState& state,
                const AdamwConfig& cfg);

enum class TtaMode { None, TtaFull, TtaPpa };
enum class SslObjective { ReconOnly, PgSsl };
enum class ResetPolicy { Episodic, Online };

[[nodiscard]] std::string tta_mode_name(TtaMode mode);
[[nodiscard]] TtaMode tta_mode_from_name(const std::string& name);
[[nodiscard]] std::string ssl_objective_name(SslObjective ssl);
[[nodiscard]] SslObjective ssl_objective_from_name(const std::string& name);
[[nodiscard]] std::string reset_policy_name(ResetPolicy policy);
[[nodiscard]] ResetPolicy reset_policy_from_name(const std::string& name);

struct TtaConfig {
    TtaMode mode = TtaMode::TtaFull;
    SslObjective ssl = SslObjective::PgSsl;
    double mask_ratio = 0.8;  // in [0, 0.95]
    ResetPolicy reset_policy = ResetPolicy::Episodic;
    loss::LossConfig loss;
    // Per-sample masks are keyed by (cell_id, cycle, mask_seed), never by
    // stream position, so episodic adaptation is order-invariant.
    std::uint64_t mask_seed = 0x7A7A;
};

void validate(const TtaConfig& cfg);

struct PretrainReport {
    std::vector<double> epoch_loss;
    int epochs_run = 0;
    bool plateaued = false;
    double final_loss = std::numeric_limits<double>::quiet_NaN();
};

/// Minimizes the mean PG-SSL loss over the source set with masking and
/// truncation augmentation; updates the pretrain partition in place.
/// Aborts with a diagnostic if the loss goes non-finite.
PretrainReport pretrain(model::Model& m, const features::Dataset& source,
                        const OptimConfig& optim, const features::MaskSpec& mask_spec,
                        const loss::LossConfig& loss_cfg);

struct ProbeReport {
    double train_mae = 0.0;
    double train_rmse = 0.0;
    int n_samples = 0;
};

/// Closed-form ridge regression of labels on frozen latents; writes only h.*.
ProbeReport linear_probe(model::Model& m, const features::Dataset& labeled,
                         double ridge_lambda = 1e-6);

struct TtaSampleTrace {
    std::string cell_id;
    int cycle = 0;
    double predicted_soh = std::numeric_limits<double>::quiet_NaN();
    std::vector<double> ssl_loss;  // loss after 0..steps updates
    double wall_ms = 0.0;
};

/// Adapts the cfg.mode partition on one unlabeled sample (fixed per-sample
/// mask across steps) and predicts through the frozen head. mode=none skips
/// the updates. The model is left in the adapted state; callers own resets.
TtaSampleTrace tta_adapt(model::Model& m, const features::QdLinearFeature& x,
                         const features::VoltageGrid& grid, const TtaConfig& cfg,
                         const OptimConfig& optim, OptState& opt_state);

struct AdaptationReport {
    struct Sample {
        std::string cell_id;
        int cycle = 0;
        bool has_label = false;
        double true_soh = std::numeric_limits<double>::quiet_NaN();
        double predicted_soh = std::numeric_limits<double>::quiet_NaN();
        std::vector<double> ssl_loss;
        double wall_ms = 0.0;
    };
    std::string mode;
    std::string ssl;
    std::string reset_policy;
    double mask_ratio = 0.0;
    int steps = 0;
    double lambda = 0.0;
    std::string residual_mode;
    std::vector<Sample> samples;
    int n_labeled = 0;
    double mae = std::numeric_limits<double>::quiet_NaN();
    double rmse = std::numeric_limits<double>::quiet_NaN();
    std::int64_t trainable_count = 0;
    double total_ms = 0.0;
};

/// Processes the stream in order: adapt on the unlabeled feature, predict,
/// only then join labels for metrics. Episodic policy restores the pretrained
/// state and momentum before every sample. The model is restored to its
/// incoming state afterwards.
AdaptationReport adapt_and_predict_stream(model::Model& m,
                                          const std::vector<features::QdLinearFeature>& stream,
                                          const std::vector<features::SohLabel>& labels,
                                          const features::VoltageGrid& grid,
                                          const TtaConfig& cfg, const OptimConfig& optim);

[[nodiscard]] double mae(std::span<const double> truth, std::span<const double> pred);
[[nodiscard]] double rmse(std::span<const double> truth, std::span<const double> pred);

/// Deterministic report serialization: wall times live in the separate
/// timings document so reruns stay byte-identical.
[[nodiscard]] std::string adaptation_report_json(const AdaptationReport& report);
[[nodiscard]] std::string adaptation_timings_json(const AdaptationReport& report);

[[nodiscard]] std::string optim_config_json(const OptimConfig& cfg);
[[nodiscard]] OptimConfig optim_config_from_json(const std::string& text);
[[nodiscard]] std::string tta_config_json(const TtaConfig& cfg);
[[nodiscard]] TtaConfig tta_config_from_json(const std::string& text);

}  // namespace bttt::train
