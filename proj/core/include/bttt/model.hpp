#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bttt/features.hpp"
#include "bttt/tensor.hpp"

namespace bttt::model {

enum class EncoderKind { Mlp, Gru, Transformer };
enum class BackboneKind { None, FrozenToy };

/// Trainable-partition selector. Partitions are disjoint by name prefix:
/// embed., reprog./proj., prompt.p, f., g., h.; bb. is never trainable.
enum class Mode { Pretrain, Probe, TtaFull, TtaPpa };

struct ModelConfig {
    int t_full = 128;       // T', must be divisible by patch_len
    int patch_len = 16;
    int embed_dim = 32;     // d
    int backbone_dim = 96;  // D
    int n_heads = 4;
    int n_layers = 2;       // transformer encoder depth
    EncoderKind encoder_kind = EncoderKind::Mlp;
    int prompt_len = 8;     // L_p
    int n_prototypes = 32;  // V'
    bool reprogramming = false;
    BackboneKind backbone = BackboneKind::None;
    int vocab_size = 256;   // V, frozen-toy embedding rows

    // tta_full optimizes f+g; this widens it to the embedder/reprogrammer.
    bool tta_full_includes_embed = false;

    std::uint64_t init_seed = 1;
    std::uint64_t backbone_seed = 0xB0B0;
};

void validate(const ModelConfig& cfg);

[[nodiscard]] std::string encoder_kind_name(EncoderKind kind);
[[nodiscard]] EncoderKind encoder_kind_from_name(const std::string& name);
[[nodiscard]] std::string mode_name(Mode mode);
[[nodiscard]] Mode mode_from_name(const std::string& name);

/// Handles into one forward pass; valid while the tape lives.
struct Forward {
    ad::Val tokens;   // (P, d), after positional encoding
    ad::Val aligned;  // (P, D)
    ad::Val latent;   // (D,)
    ad::Val x_hat;    // (T',), strictly increasing
    ad::Val t_grid;   // (T',) seconds; valid only when has_time_grid
    ad::Val soh;      // scalar, percent
    bool has_time_grid = false;
};

class Model {
public:
    explicit Model(const ModelConfig& cfg);

    [[nodiscard]] const ModelConfig& config() const { return cfg_; }
    [[nodiscard]] ad::ParamStore& params() { return params_; }
    [[nodiscard]] const ad::ParamStore& params() const { return params_; }

    /// Patch tokens before positional encoding. Each grid point contributes
    /// three channels: visible value (zeroed when unobserved or masked),
    /// observation flag, mask flag.
    ad::Val embed_patches(ad::Tape& t, const features::QdLinearFeature& x,
                          const std::vector<std::uint8_t>* mask);

    /// Cross-attention onto learned prototypes when reprogramming is on,
    /// otherwise the d -> D linear pathway.
    ad::Val reprogram(ad::Tape& t, ad::Val tokens);

    /// Prepends the prefix prompt (when L_p > 0), runs the frozen backbone
    /// blocks (when configured), then the encoder f; mean over positions.
    ad::Val encode(ad::Tape& t, ad::Val aligned);

    /// Strictly increasing curve: cumsum(softplus(increments) + 1e-6) times a
    /// learnable positive capacity scale.
    ad::Val decode(ad::Tape& t, ad::Val latent);

    /// t_j = x_hat_j * 3600 / I. Requires current_a > 0.
    ad::Val time_grid(ad::Tape& t, ad::Val x_hat, double current_a);

    ad::Val predict_soh(ad::Tape& t, ad::Val latent);

    Forward forward(ad::Tape& t, const features::QdLinearFeature& x,
                    const std::vector<std::uint8_t>* mask = nullptr);

    /// Sorted parameter names trainable in the given mode.
    [[nodiscard]] std::vector<std::string> trainable_partition(Mode mode) const;
    [[nodiscard]] std::int64_t trainable_scalar_count(Mode mode) const;

    [[nodiscard]] int n_patches() const { return cfg_.t_full / cfg_.patch_len; }

    /// Checkpoint: ModelConfig header plus the parameter store.
    void save(const std::string& path) const;
    static Model load(const std::string& path);

    /// Backbone weight-file loader; file uses the checkpoint container with a
    /// frozen flag and only bb.* entries.
    void save_backbone(const std::string& path) const;
    void load_backbone(const std::string& path);

private:
    void init_params();
    ad::Val encoder_mlp(ad::Tape& t, ad::Val seq);
    ad::Val encoder_gru(ad::Tape& t, ad::Val seq);
    ad::Val transformer_block(ad::Tape& t, ad::Val seq, const std::string& prefix);
    ad::Val positional_encoding(ad::Tape& t, int positions, int dim);

    ModelConfig cfg_;
    ad::ParamStore params_;
};

[[nodiscard]] std::string config_json(const ModelConfig& cfg);
[[nodiscard]] ModelConfig config_from_json(const std::string& text);

}  // namespace bttt::model
