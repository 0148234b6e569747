#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bttt/ecm.hpp"

namespace bttt::features {

/// Uniform voltage grid of T' points spanning [v_lower, v_upper].
struct VoltageGrid {
    double v_lower = 2.7;
    double v_upper = 4.2;
    int n_points = 128;

    [[nodiscard]] double voltage_at(int i) const;
    [[nodiscard]] double spacing() const { return (v_upper - v_lower) / (n_points - 1); }
};

void validate(const VoltageGrid& grid);

/// Capacity-vs-voltage curve on the fixed grid. The observed region is a
/// contiguous prefix; values beyond it are placeholders hidden from the model
/// (zero when produced by qdlinear, the original values after truncate_partial).
struct QdLinearFeature {
    std::vector<double> values;          // Ah, length n_points
    std::vector<std::uint8_t> obs_mask;  // 1 = observed, contiguous prefix
    double current_a = 0.0;
    double temp_c = 25.0;
    std::string cell_id;
    int cycle = 0;

    [[nodiscard]] int t_obs() const;  // observed prefix length T
};

/// Checks prefix contiguity and monotone observed values.
void validate(const QdLinearFeature& feature);

struct SohLabel {
    double soh_pct = 0.0;
    double c_full = 0.0;  // Ah; reconstructed as soh_pct with c_nom=100 when
    double c_nom = 0.0;   // read from CSV, which stores only soh_pct
};

struct MaskSpec {
    double ratio = 0.3;  // in [0, 1)
    std::uint64_t seed = 0;
};

/// Interpolates the cumulative-max voltage curve onto the grid. Grid points
/// below the first recorded voltage read 0 Ah (observed); points above the
/// cycle's max voltage are unobserved. current_a is the median sample current.
[[nodiscard]] QdLinearFeature qdlinear(const ecm::CycleRecord& cycle, const VoltageGrid& grid);

/// Keeps only the first ceil(observed_fraction * n_points) grid points
/// observed (intersected with the existing prefix); hidden values retained.
[[nodiscard]] QdLinearFeature truncate_partial(const QdLinearFeature& feature,
                                               double observed_fraction);

/// Random mask over observed positions. The mask is a flag channel consumed by
/// the embedder, never a sentinel written into values.
struct MaskResult {
    std::vector<std::uint8_t> mask;  // length n_points, 1 = masked
    std::vector<int> indices;       // sorted masked positions, all < T
};

/// Masks exactly ceil(ratio * T) observed positions, deterministic per seed.
[[nodiscard]] MaskResult apply_random_mask(const QdLinearFeature& feature, const MaskSpec& spec);

struct Dataset {
    VoltageGrid grid;
    std::vector<QdLinearFeature> features;
    std::vector<SohLabel> labels;  // parallel to features, or empty if unlabeled
};

/// Parses the cycle CSV format written by the ecm module. Malformed input
/// throws std::runtime_error naming the line and column.
[[nodiscard]] std::vector<ecm::CycleRecord> parse_cycles_csv(const std::string& text);
[[nodiscard]] std::vector<ecm::CycleRecord> read_cycles_csv(const std::string& path);

/// Writes `path` (feature CSV), `path + ".grid.json"`, and, when labels are
/// present, `path + ".labels.csv"`.
void write_features(const std::string& path, const Dataset& dataset);
[[nodiscard]] Dataset read_features(const std::string& path);

[[nodiscard]] std::string features_csv(const Dataset& dataset);
[[nodiscard]] std::string grid_json(const VoltageGrid& grid);
[[nodiscard]] VoltageGrid grid_from_json(const std::string& text);

}  // namespace bttt::features
