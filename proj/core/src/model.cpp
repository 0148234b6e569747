#include "bttt/model.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "bttt/common.hpp"
#include "json_util.hpp"

namespace bttt::model {

using ad::Shape;
using ad::Tape;
using ad::Val;

void validate(const ModelConfig& cfg) {
    if (cfg.t_full < 8) throw std::invalid_argument("t_full must be >= 8");
    if (cfg.patch_len < 1) throw std::invalid_argument("patch_len must be >= 1");
    if (cfg.t_full % cfg.patch_len != 0)
        throw std::invalid_argument("t_full must be divisible by patch_len");
    if (cfg.embed_dim < 1 || cfg.backbone_dim < 1)
        throw std::invalid_argument("embed_dim and backbone_dim must be >= 1");
    if (cfg.embed_dim > cfg.backbone_dim)
        throw std::invalid_argument("embed_dim must be <= backbone_dim");
    if (cfg.n_heads < 1 || cfg.backbone_dim % cfg.n_heads != 0)
        throw std::invalid_argument("n_heads must divide backbone_dim");
    if (cfg.n_layers < 1) throw std::invalid_argument("n_layers must be >= 1");
    if (cfg.prompt_len < 0) throw std::invalid_argument("prompt_len must be >= 0");
    if (cfg.n_prototypes < 1) throw std::invalid_argument("n_prototypes must be >= 1");
    if (cfg.vocab_size < 1) throw std::invalid_argument("vocab_size must be >= 1");
    if (cfg.reprogramming && cfg.backbone == BackboneKind::None)
        throw std::invalid_argument(
            "reprogramming requires a backbone: prototypes are projected from its embedding table");
}

std::string encoder_kind_name(EncoderKind kind) {
    switch (kind) {
        case EncoderKind::Mlp: return "mlp";
        case EncoderKind::Gru: return "gru";
        case EncoderKind::Transformer: return "transformer";
    }
    throw std::logic_error("unreachable encoder kind");
}

EncoderKind encoder_kind_from_name(const std::string& name) {
    if (name == "mlp") return EncoderKind::Mlp;
    if (name == "gru") return EncoderKind::Gru;
    if (name == "transformer") return EncoderKind::Transformer;
    throw std::invalid_argument("unknown encoder kind: " + name);
}

std::string mode_name(Mode mode) {
    switch (mode) {
        case Mode::Pretrain: return "pretrain";
        case Mode::Probe: return "probe";
        case Mode::TtaFull: return "tta_full";
        case Mode::TtaPpa: return "tta_ppa";
    }
    throw std::logic_error("unreachable mode");
}

Mode mode_from_name(const std::string& name) {
    if (name == "pretrain") return Mode::Pretrain;
    if (name == "probe") return Mode::Probe;
    if (name == "tta_full") return Mode::TtaFull;
    if (name == "tta_ppa") return Mode::TtaPpa;
    throw std::invalid_argument("unknown mode: " + name);
}

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
    validate(cfg_);
    init_params();
}

namespace {

void fill_normal(ad::Parameter& p, Rng& rng, double sigma) {
    for (double& v : p.value) v = sigma * rng.normal();
}

}  // namespace

void Model::init_params() {
    Rng rng(cfg_.init_seed);
    const int d = cfg_.embed_dim;
    const int D = cfg_.backbone_dim;
    const int in_ch = 3 * cfg_.patch_len;

    auto matrix = [&](const std::string& name, int rows, int cols) -> ad::Parameter& {
        ad::Parameter& p = params_.add(name, Shape::mat(rows, cols));
        fill_normal(p, rng, 1.0 / std::sqrt(static_cast<double>(rows)));
        return p;
    };
    auto vec_zero = [&](const std::string& name, int n) -> ad::Parameter& {
        return params_.add(name, Shape::vec(n));
    };

    matrix("embed.W", in_ch, d);
    vec_zero("embed.b", d);

    if (cfg_.reprogramming) {
        matrix("reprog.W_proto", cfg_.n_prototypes, cfg_.vocab_size);
        matrix("reprog.Wq", d, D);
        matrix("reprog.Wk", D, D);
        matrix("reprog.Wv", D, D);
    } else {
        matrix("proj.W", d, D);
        vec_zero("proj.b", D);
    }

    if (cfg_.prompt_len > 0) {
        ad::Parameter& p = params_.add("prompt.p", Shape::mat(cfg_.prompt_len, D));
        fill_normal(p, rng, 0.02);
    }

    auto block_params = [&](const std::string& prefix) {
        matrix(prefix + "Wq", D, D);
        matrix(prefix + "Wk", D, D);
        matrix(prefix + "Wv", D, D);
        matrix(prefix + "Wo", D, D);
        auto& g1 = vec_zero(prefix + "ln1.gamma", D);
        std::fill(g1.value.begin(), g1.value.end(), 1.0);
        vec_zero(prefix + "ln1.beta", D);
        matrix(prefix + "W1", D, 4 * D);
        vec_zero(prefix + "b1", 4 * D);
        matrix(prefix + "W2", 4 * D, D);
        vec_zero(prefix + "b2", D);
        auto& g2 = vec_zero(prefix + "ln2.gamma", D);
        std::fill(g2.value.begin(), g2.value.end(), 1.0);
        vec_zero(prefix + "ln2.beta", D);
    };

    switch (cfg_.encoder_kind) {
        case EncoderKind::Mlp:
            matrix("f.W1", D, D);
            vec_zero("f.b1", D);
            matrix("f.W2", D, D);
            vec_zero("f.b2", D);
            break;
        case EncoderKind::Gru:
            matrix("f.Wxz", D, D);
            matrix("f.Whz", D, D);
            vec_zero("f.bz", D);
            matrix("f.Wxr", D, D);
            matrix("f.Whr", D, D);
            vec_zero("f.br", D);
            matrix("f.Wxh", D, D);
            matrix("f.Whh", D, D);
            vec_zero("f.bh", D);
            break;
        case EncoderKind::Transformer:
            for (int i = 0; i < cfg_.n_layers; ++i)
                block_params("f.blk" + std::to_string(i) + ".");
            break;
    }

    matrix("g.W1", D, 128);
    vec_zero("g.b1", 128);
    matrix("g.W2", 128, cfg_.t_full);
    auto& gb2 = vec_zero("g.b2", cfg_.t_full);
    std::fill(gb2.value.begin(), gb2.value.end(), -4.0);  // small initial increments
    auto& scale = params_.add("g.scale_raw", Shape::scalar());
    scale.value[0] = 0.541324854612918;  // softplus -> 1

    params_.add("h.w", Shape::mat(D, 1));  // zero weights with bias 100: fresh cells read 100%
    auto& hb = params_.add("h.b", Shape::vec(1));
    hb.value[0] = 100.0;

    if (cfg_.backbone == BackboneKind::FrozenToy) {
        Rng bb_rng(cfg_.backbone_seed);
        auto bb_matrix = [&](const std::string& name, int rows, int cols, double sigma) {
            ad::Parameter& p = params_.add(name, Shape::mat(rows, cols));
            fill_normal(p, bb_rng, sigma);
        };
        bb_matrix("bb.E", cfg_.vocab_size, D, 0.02);
        for (int b = 0; b < 2; ++b) {
            const std::string prefix = "bb.blk" + std::to_string(b) + ".";
            bb_matrix(prefix + "Wq", D, D, 1.0 / std::sqrt(D));
            bb_matrix(prefix + "Wk", D, D, 1.0 / std::sqrt(D));
            bb_matrix(prefix + "Wv", D, D, 1.0 / std::sqrt(D));
            bb_matrix(prefix + "Wo", D, D, 1.0 / std::sqrt(D));
            auto& g1 = params_.add(prefix + "ln1.gamma", Shape::vec(D));
            std::fill(g1.value.begin(), g1.value.end(), 1.0);
            params_.add(prefix + "ln1.beta", Shape::vec(D));
            bb_matrix(prefix + "W1", D, 4 * D, 1.0 / std::sqrt(D));
            params_.add(prefix + "b1", Shape::vec(4 * D));
            bb_matrix(prefix + "W2", 4 * D, D, 1.0 / std::sqrt(4.0 * D));
            params_.add(prefix + "b2", Shape::vec(D));
            auto& g2 = params_.add(prefix + "ln2.gamma", Shape::vec(D));
            std::fill(g2.value.begin(), g2.value.end(), 1.0);
            params_.add(prefix + "ln2.beta", Shape::vec(D));
        }
        params_.for_each([](ad::Parameter& p) {
            if (p.name.rfind("bb.", 0) == 0) {
                p.trainable = false;
                p.backbone = true;
            }
        });
    }
}

Val Model::embed_patches(Tape& t, const features::QdLinearFeature& x,
                         const std::vector<std::uint8_t>* mask) {
    if (static_cast<int>(x.values.size()) != cfg_.t_full)
        throw std::invalid_argument("feature length " + std::to_string(x.values.size()) +
                                    " does not match configured t_full " +
                                    std::to_string(cfg_.t_full));
    if (x.obs_mask.size() != x.values.size())
        throw std::invalid_argument("feature obs_mask length mismatch");
    if (mask && mask->size() != x.values.size())
        throw std::invalid_argument("mask length does not match feature length");

    const int P = n_patches();
    const int L = cfg_.patch_len;
    std::vector<double> rows(static_cast<std::size_t>(P) * 3 * L);
    for (int p = 0; p < P; ++p) {
        for (int j = 0; j < L; ++j) {
            const int idx = p * L + j;
            const bool obs = x.obs_mask[static_cast<std::size_t>(idx)] != 0;
            const bool mk = mask && (*mask)[static_cast<std::size_t>(idx)] != 0;
            const std::size_t base = static_cast<std::size_t>(p) * 3 * L + 3 * j;
            rows[base + 0] = (obs && !mk) ? x.values[static_cast<std::size_t>(idx)] : 0.0;
            rows[base + 1] = obs ? 1.0 : 0.0;
            rows[base + 2] = mk ? 1.0 : 0.0;
        }
    }
    Val in = t.leaf(Shape::mat(P, 3 * L), std::move(rows));
    Val emb = t.add_rowvec(t.matmul(in, t.param(params_.at("embed.W"))),
                           t.param(params_.at("embed.b")));
    // sqrt(d) embedding scale keeps content above the unit-amplitude
    // positional encoding added downstream.
    return t.scale(emb, std::sqrt(static_cast<double>(cfg_.embed_dim)));
}

Val Model::positional_encoding(Tape& t, int positions, int dim) {
    std::vector<double> pe(static_cast<std::size_t>(positions) * dim, 0.0);
    for (int pos = 0; pos < positions; ++pos) {
        for (int i = 0; 2 * i < dim; ++i) {
            const double w = std::pow(10000.0, -2.0 * i / dim);
            pe[static_cast<std::size_t>(pos) * dim + 2 * i] = std::sin(pos * w);
            if (2 * i + 1 < dim)
                pe[static_cast<std::size_t>(pos) * dim + 2 * i + 1] = std::cos(pos * w);
        }
    }
    return t.leaf(Shape::mat(positions, dim), std::move(pe));
}

namespace {

// Multi-head scaled dot-product attention with concatenated heads.
Val attention(Tape& t, Val q_all, Val k_all, Val v_all, int n_heads) {
    const std::int64_t dm = q_all.shape().cols();
    const std::int64_t dk = dm / n_heads;
    std::vector<Val> heads;
    heads.reserve(static_cast<std::size_t>(n_heads));
    for (int h = 0; h < n_heads; ++h) {
        Val qk = t.slice_cols(q_all, h * dk, (h + 1) * dk);
        Val kk = t.slice_cols(k_all, h * dk, (h + 1) * dk);
        Val vk = t.slice_cols(v_all, h * dk, (h + 1) * dk);
        Val scores = t.scale(t.matmul(qk, t.transpose(kk)), 1.0 / std::sqrt(static_cast<double>(dk)));
        heads.push_back(t.matmul(t.softmax(scores), vk));
    }
    return t.concat_cols(std::span<const Val>(heads.data(), heads.size()));
}

}  // namespace

Val Model::reprogram(Tape& t, Val tokens) {
    if (tokens.shape().rows() != n_patches() || tokens.shape().cols() != cfg_.embed_dim)
        throw std::logic_error("reprogram: tokens shape " + tokens.shape().str() +
                               " does not match (P, d)");
    if (!cfg_.reprogramming) {
        return t.add_rowvec(t.matmul(tokens, t.param(params_.at("proj.W"))),
                            t.param(params_.at("proj.b")));
    }
    Val e = t.param(params_.at("bb.E"));
    Val e_prime = t.matmul(t.param(params_.at("reprog.W_proto")), e);  // (V', D)
    Val q = t.matmul(tokens, t.param(params_.at("reprog.Wq")));        // (P, D)
    Val k = t.matmul(e_prime, t.param(params_.at("reprog.Wk")));       // (V', D)
    Val v = t.matmul(e_prime, t.param(params_.at("reprog.Wv")));       // (V', D)
    return attention(t, q, k, v, cfg_.n_heads);
}

Val Model::transformer_block(Tape& t, Val seq, const std::string& prefix) {
    Val a = t.layer_norm(seq, t.param(params_.at(prefix + "ln1.gamma")),
                         t.param(params_.at(prefix + "ln1.beta")));
    Val q = t.matmul(a, t.param(params_.at(prefix + "Wq")));
    Val k = t.matmul(a, t.param(params_.at(prefix + "Wk")));
    Val v = t.matmul(a, t.param(params_.at(prefix + "Wv")));
    Val att = t.matmul(attention(t, q, k, v, cfg_.n_heads), t.param(params_.at(prefix + "Wo")));
    Val x = t.add(seq, att);
    Val m = t.layer_norm(x, t.param(params_.at(prefix + "ln2.gamma")),
                         t.param(params_.at(prefix + "ln2.beta")));
    Val h = t.gelu(t.add_rowvec(t.matmul(m, t.param(params_.at(prefix + "W1"))),
                                t.param(params_.at(prefix + "b1"))));
    h = t.add_rowvec(t.matmul(h, t.param(params_.at(prefix + "W2"))),
                     t.param(params_.at(prefix + "b2")));
    return t.add(x, h);
}

Val Model::encoder_mlp(Tape& t, Val seq) {
    Val h = t.gelu(t.add_rowvec(t.matmul(seq, t.param(params_.at("f.W1"))),
                                t.param(params_.at("f.b1"))));
    return t.add_rowvec(t.matmul(h, t.param(params_.at("f.W2"))), t.param(params_.at("f.b2")));
}

Val Model::encoder_gru(Tape& t, Val seq) {
    const std::int64_t S = seq.shape().rows();
    const std::int64_t D = seq.shape().cols();
    Val h = t.constant(Shape::mat(1, D), std::vector<double>(static_cast<std::size_t>(D), 0.0));
    Val ones = t.constant(Shape::mat(1, D), std::vector<double>(static_cast<std::size_t>(D), 1.0));
    Val wxz = t.param(params_.at("f.Wxz")), whz = t.param(params_.at("f.Whz"));
    Val wxr = t.param(params_.at("f.Wxr")), whr = t.param(params_.at("f.Whr"));
    Val wxh = t.param(params_.at("f.Wxh")), whh = t.param(params_.at("f.Whh"));
    Val bz = t.param(params_.at("f.bz")), br = t.param(params_.at("f.br"));
    Val bh = t.param(params_.at("f.bh"));
    std::vector<Val> outs;
    outs.reserve(static_cast<std::size_t>(S));
    for (std::int64_t s = 0; s < S; ++s) {
        Val xs = t.slice_rows(seq, s, s + 1);
        Val z = t.sigmoid(t.add_rowvec(t.add(t.matmul(xs, wxz), t.matmul(h, whz)), bz));
        Val r = t.sigmoid(t.add_rowvec(t.add(t.matmul(xs, wxr), t.matmul(h, whr)), br));
        Val hb = t.tanh_act(
            t.add_rowvec(t.add(t.matmul(xs, wxh), t.matmul(t.mul(r, h), whh)), bh));
        h = t.add(t.mul(t.sub(ones, z), h), t.mul(z, hb));
        outs.push_back(h);
    }
    return t.concat_rows(std::span<const Val>(outs.data(), outs.size()));
}

Val Model::encode(Tape& t, Val aligned) {
    if (aligned.shape().rows() != n_patches() || aligned.shape().cols() != cfg_.backbone_dim)
        throw std::logic_error("encode: aligned shape " + aligned.shape().str() +
                               " does not match (P, D)");
    Val seq = aligned;
    if (cfg_.prompt_len > 0)
        seq = t.concat_rows({t.param(params_.at("prompt.p")), aligned});
    if (cfg_.backbone == BackboneKind::FrozenToy) {
        seq = transformer_block(t, seq, "bb.blk0.");
        seq = transformer_block(t, seq, "bb.blk1.");
    }
    switch (cfg_.encoder_kind) {
        case EncoderKind::Mlp: seq = encoder_mlp(t, seq); break;
        case EncoderKind::Gru: seq = encoder_gru(t, seq); break;
        case EncoderKind::Transformer:
            for (int i = 0; i < cfg_.n_layers; ++i)
                seq = transformer_block(t, seq, "f.blk" + std::to_string(i) + ".");
            break;
    }
    Val latent = t.mean_rows(seq);
    if (latent.shape().rank != 1 || latent.shape().dim[0] != cfg_.backbone_dim)
        throw std::logic_error("encode: latent shape " + latent.shape().str());
    return latent;
}

Val Model::decode(Tape& t, Val latent) {
    Val lat = t.reshape(latent, Shape::mat(1, cfg_.backbone_dim));
    Val h = t.gelu(t.add_rowvec(t.matmul(lat, t.param(params_.at("g.W1"))),
                                t.param(params_.at("g.b1"))));
    Val inc = t.add_rowvec(t.matmul(h, t.param(params_.at("g.W2"))),
                           t.param(params_.at("g.b2")));
    Val pos = t.add(t.softplus(inc), t.constant(1e-6));
    Val x = t.mul(t.cumsum(pos), t.softplus(t.param(params_.at("g.scale_raw"))));
    return t.reshape(x, Shape::vec(cfg_.t_full));
}

Val Model::time_grid(Tape& t, Val x_hat, double current_a) {
    if (!(current_a > 0.0))
        throw std::domain_error("time grid undefined: current_a must be > 0, got " +
                                format_double(current_a));
    return t.scale(x_hat, 3600.0 / current_a);
}

Val Model::predict_soh(Tape& t, Val latent) {
    Val lat = t.reshape(latent, Shape::mat(1, cfg_.backbone_dim));
    Val s = t.add(t.matmul(lat, t.param(params_.at("h.w"))),
                  t.reshape(t.param(params_.at("h.b")), Shape::mat(1, 1)));
    return t.reshape(s, Shape::scalar());
}

Forward Model::forward(Tape& t, const features::QdLinearFeature& x,
                       const std::vector<std::uint8_t>* mask) {
    Forward fw;
    Val tok = embed_patches(t, x, mask);
    tok = t.add(tok, positional_encoding(t, n_patches(), cfg_.embed_dim));
    fw.tokens = tok;
    fw.aligned = reprogram(t, tok);
    fw.latent = encode(t, fw.aligned);
    fw.x_hat = decode(t, fw.latent);
    if (x.current_a > 0.0) {
        fw.t_grid = time_grid(t, fw.x_hat, x.current_a);
        fw.has_time_grid = true;
    } else {
        log_warn("residual pathway disabled for " + x.cell_id + "/" + std::to_string(x.cycle) +
                 ": time grid undefined at current_a = " + format_double(x.current_a));
    }
    fw.soh = predict_soh(t, fw.latent);
    return fw;
}

std::vector<std::string> Model::trainable_partition(Mode mode) const {
    std::vector<std::string> prefixes;
    switch (mode) {
        case Mode::Pretrain:
            prefixes = {"embed.", "proj.", "reprog.", "prompt.", "f.", "g."};
            break;
        case Mode::Probe: prefixes = {"h."}; break;
        case Mode::TtaFull:
            prefixes = {"f.", "g."};
            if (cfg_.tta_full_includes_embed) {
                prefixes.push_back("embed.");
                prefixes.push_back("proj.");
                prefixes.push_back("reprog.");
            }
            break;
        case Mode::TtaPpa: prefixes = {"prompt."}; break;
    }
    std::vector<std::string> out;
    params_.for_each([&](const ad::Parameter& p) {
        if (p.backbone) return;
        for (const std::string& pre : prefixes) {
            if (p.name.rfind(pre, 0) == 0) {
                out.push_back(p.name);
                return;
            }
        }
    });
    return out;  // map iteration keeps names sorted
}

std::int64_t Model::trainable_scalar_count(Mode mode) const {
    std::int64_t n = 0;
    for (const std::string& name : trainable_partition(mode))
        n += params_.at(name).shape.size();
    return n;
}

// ---------------------------------------------------------------------------
// Checkpoints

std::string config_json(const ModelConfig& cfg) {
    nlohmann::ordered_json j;
    j["t_full"] = cfg.t_full;
    j["patch_len"] = cfg.patch_len;
    j["embed_dim"] = cfg.embed_dim;
    j["backbone_dim"] = cfg.backbone_dim;
    j["n_heads"] = cfg.n_heads;
    j["n_layers"] = cfg.n_layers;
    j["encoder_kind"] = encoder_kind_name(cfg.encoder_kind);
    j["prompt_len"] = cfg.prompt_len;
    j["n_prototypes"] = cfg.n_prototypes;
    j["reprogramming"] = cfg.reprogramming;
    j["backbone"] = cfg.backbone == BackboneKind::FrozenToy ? "frozen_toy" : "none";
    j["vocab_size"] = cfg.vocab_size;
    j["tta_full_includes_embed"] = cfg.tta_full_includes_embed;
    j["init_seed"] = cfg.init_seed;
    j["backbone_seed"] = cfg.backbone_seed;
    return j.dump(2) + "\n";
}

static ModelConfig config_from_json_impl(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    ModelConfig cfg;
    cfg.t_full = j.at("t_full").get<int>();
    cfg.patch_len = j.at("patch_len").get<int>();
    cfg.embed_dim = j.at("embed_dim").get<int>();
    cfg.backbone_dim = j.at("backbone_dim").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.encoder_kind = encoder_kind_from_name(j.at("encoder_kind").get<std::string>());
    cfg.prompt_len = j.at("prompt_len").get<int>();
    cfg.n_prototypes = j.at("n_prototypes").get<int>();
    cfg.reprogramming = j.at("reprogramming").get<bool>();
    const std::string bk = j.at("backbone").get<std::string>();
    if (bk == "frozen_toy")
        cfg.backbone = BackboneKind::FrozenToy;
    else if (bk == "none")
        cfg.backbone = BackboneKind::None;
    else
        throw std::runtime_error("unknown backbone kind: " + bk);
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.tta_full_includes_embed = j.value("tta_full_includes_embed", false);
    cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
    cfg.backbone_seed = j.at("backbone_seed").get<std::uint64_t>();
    validate(cfg);
    return cfg;
}

ModelConfig config_from_json(const std::string& text) {
    return detail::with_json_errors("model config json",
                                    [&] { return config_from_json_impl(text); });
}

namespace {

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void spit(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f << text;
    if (!f) throw std::runtime_error("write failed for " + path);
}

}  // namespace

void Model::save(const std::string& path) const {
    nlohmann::ordered_json j;
    j["format"] = "bttt-checkpoint";
    j["version"] = 1;
    j["config"] = nlohmann::ordered_json::parse(config_json(cfg_));
    j["params"] = nlohmann::ordered_json::parse(params_.to_json());
    spit(path, j.dump(2) + "\n");
}

Model Model::load(const std::string& path) {
    return detail::with_json_errors(path.c_str(), [&] {
        nlohmann::json j = nlohmann::json::parse(slurp(path));
        if (j.value("format", std::string{}) != "bttt-checkpoint")
            throw std::runtime_error(path + ": not a checkpoint file");
        if (j.value("version", 0) != 1)
            throw std::runtime_error(path + ": unsupported checkpoint version");
        Model m(config_from_json(j.at("config").dump()));
        ad::ParamStore loaded = ad::ParamStore::from_json(j.at("params").dump());
        m.params_.assign_values_from(loaded);
        return m;
    });
}

void Model::save_backbone(const std::string& path) const {
    if (cfg_.backbone != BackboneKind::FrozenToy)
        throw std::logic_error("no backbone configured");
    std::vector<std::string> names;
    params_.for_each([&](const ad::Parameter& p) {
        if (p.backbone) names.push_back(p.name);
    });
    nlohmann::ordered_json j;
    j["format"] = "bttt-checkpoint";
    j["version"] = 1;
    j["frozen"] = true;
    j["params"] = nlohmann::ordered_json::parse(
        params_.to_json(std::span<const std::string>(names.data(), names.size())));
    spit(path, j.dump(2) + "\n");
}

void Model::load_backbone(const std::string& path) {
    if (cfg_.backbone != BackboneKind::FrozenToy)
        throw std::logic_error("no backbone configured");
    detail::with_json_errors(path.c_str(), [&] {
        nlohmann::json j = nlohmann::json::parse(slurp(path));
        if (j.value("format", std::string{}) != "bttt-checkpoint" || !j.value("frozen", false))
            throw std::runtime_error(path + ": not a frozen backbone file");
        ad::ParamStore loaded = ad::ParamStore::from_json(j.at("params").dump());
        params_.for_each([&](ad::Parameter& p) {
            if (!p.backbone) return;
            const ad::Parameter& src = loaded.at(p.name);
            if (src.shape != p.shape)
                throw std::runtime_error(path + ": shape mismatch for " + p.name);
            p.value = src.value;
        });
    });
}

}  // namespace bttt::model
