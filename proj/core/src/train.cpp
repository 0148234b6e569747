#include "bttt/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "bttt/common.hpp"
#include "json_util.hpp"

namespace bttt::train {

void validate(const OptimConfig& cfg) {
    if (!(cfg.pretrain_opt.lr > 0.0) || !(cfg.tta_opt.lr > 0.0))
        throw std::invalid_argument("learning rates must be > 0");
    if (cfg.tta_opt.momentum < 0.0 || cfg.tta_opt.momentum >= 1.0)
        throw std::invalid_argument("momentum must be in [0, 1)");
    if (cfg.tta_steps < 1) throw std::invalid_argument("tta_steps must be >= 1");
    if (cfg.max_epochs < 1) throw std::invalid_argument("max_epochs must be >= 1");
    if (cfg.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (cfg.plateau_epochs < 1) throw std::invalid_argument("plateau_epochs must be >= 1");
    if (!(cfg.truncate_lo > 0.0) || cfg.truncate_lo > cfg.truncate_hi || cfg.truncate_hi > 1.0)
        throw std::invalid_argument("truncation range must satisfy 0 < lo <= hi <= 1");
}

void validate(const TtaConfig& cfg) {
    if (cfg.mask_ratio < 0.0 || cfg.mask_ratio > 0.95)
        throw std::invalid_argument("mask_ratio must be in [0, 0.95]");
    loss::LossConfig effective = cfg.loss;
    if (cfg.ssl == SslObjective::ReconOnly) effective.lambda = 0.0;
    loss::validate(effective);
}

void sgd_momentum_step(ad::ParamStore& params, std::span<const std::string> names,
                       OptState& state, const SgdMomentumConfig& cfg) {
    for (const std::string& name : names) {
        ad::Parameter& p = params.at(name);
        if (p.backbone) continue;
        std::vector<double>& buf = state.m[name];
        if (buf.size() != p.value.size()) buf.assign(p.value.size(), 0.0);
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            buf[i] = cfg.momentum * buf[i] + p.grad[i];
            p.value[i] -= cfg.lr * buf[i];
        }
    }
}

void adamw_step(ad::ParamStore& params, std::span<const std::string> names, OptState& state,
                const AdamwConfig& cfg) {
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (const std::string& name : names) {
        ad::Parameter& p = params.at(name);
        if (p.backbone) continue;
        std::vector<double>& m = state.m[name];
        std::vector<double>& v = state.v[name];
        if (m.size() != p.value.size()) m.assign(p.value.size(), 0.0);
        if (v.size() != p.value.size()) v.assign(p.value.size(), 0.0);
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p.value[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p.value[i]);
        }
    }
}

std::string tta_mode_name(TtaMode mode) {
    switch (mode) {
        case TtaMode::None: return "none";
        case TtaMode::TtaFull: return "tta_full";
        case TtaMode::TtaPpa: return "tta_ppa";
    }
    throw std::logic_error("unreachable tta mode");
}

TtaMode tta_mode_from_name(const std::string& name) {
    if (name == "none") return TtaMode::None;
    if (name == "tta_full") return TtaMode::TtaFull;
    if (name == "tta_ppa") return TtaMode::TtaPpa;
    throw std::invalid_argument("unknown tta mode: " + name);
}

std::string ssl_objective_name(SslObjective ssl) {
    return ssl == SslObjective::ReconOnly ? "recon_only" : "pg_ssl";
}

SslObjective ssl_objective_from_name(const std::string& name) {
    if (name == "recon_only") return SslObjective::ReconOnly;
    if (name == "pg_ssl") return SslObjective::PgSsl;
    throw std::invalid_argument("unknown ssl objective: " + name);
}

std::string reset_policy_name(ResetPolicy policy) {
    return policy == ResetPolicy::Episodic ? "episodic" : "online";
}

ResetPolicy reset_policy_from_name(const std::string& name) {
    if (name == "episodic") return ResetPolicy::Episodic;
    if (name == "online") return ResetPolicy::Online;
    throw std::invalid_argument("unknown reset policy: " + name);
}

namespace {

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

// Mask seed keyed by sample identity, not stream position: episodic
// adaptation must be order-invariant.
std::uint64_t sample_mask_seed(const features::QdLinearFeature& x, std::uint64_t base) {
    std::uint64_t h = fnv1a64(x.cell_id);
    h ^= static_cast<std::uint64_t>(static_cast<std::int64_t>(x.cycle)) * 0x9e3779b97f4a7c15ULL;
    h ^= base + 0xd1b54a32d192ed03ULL;
    h ^= h >> 33;
    h *= 0xff51afd7ed558ccdULL;
    h ^= h >> 33;
    return h;
}

model::Mode partition_mode(TtaMode mode) {
    switch (mode) {
        case TtaMode::TtaFull: return model::Mode::TtaFull;
        case TtaMode::TtaPpa: return model::Mode::TtaPpa;
        case TtaMode::None: break;
    }
    throw std::logic_error("no trainable partition for tta mode none");
}

}  // namespace

PretrainReport pretrain(model::Model& m, const features::Dataset& source,
                        const OptimConfig& optim, const features::MaskSpec& mask_spec,
                        const loss::LossConfig& loss_cfg) {
    validate(optim);
    loss::validate(loss_cfg);
    if (source.features.empty())
        throw std::invalid_argument("pretrain: source dataset is empty");

    const std::vector<std::string> names = m.trainable_partition(model::Mode::Pretrain);
    OptState st;
    Rng shuffle_rng(optim.shuffle_seed);
    Rng aug_master(mask_spec.seed);
    PretrainReport rep;
    const int n = static_cast<int>(source.features.size());
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < optim.max_epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        Rng epoch_rng = aug_master.fork(static_cast<std::uint64_t>(epoch));
        double epoch_sum = 0.0;
        for (int b0 = 0; b0 < n; b0 += optim.batch_size) {
            const int b1 = std::min(n, b0 + optim.batch_size);
            m.params().zero_grads();
            for (int k = b0; k < b1; ++k) {
                const int i = order[static_cast<std::size_t>(k)];
                Rng srng = epoch_rng.fork(static_cast<std::uint64_t>(i));
                const double frac = srng.uniform(optim.truncate_lo, optim.truncate_hi);
                features::QdLinearFeature trunc =
                    features::truncate_partial(source.features[static_cast<std::size_t>(i)], frac);
                features::MaskResult mk =
                    features::apply_random_mask(trunc, {mask_spec.ratio, srng.next_u64()});
                ad::Tape tape;
                model::Forward fw = m.forward(tape, trunc, &mk.mask);
                ad::Val lv = loss::pg_ssl_loss(
                    tape, fw.x_hat, fw.t_grid, trunc, source.grid,
                    std::span<const int>(mk.indices.data(), mk.indices.size()), loss_cfg);
                const double v = lv.scalar();
                if (!std::isfinite(v))
                    throw std::runtime_error(
                        "pretraining diverged: non-finite loss at epoch " + std::to_string(epoch) +
                        ", sample " + source.features[static_cast<std::size_t>(i)].cell_id + "/" +
                        std::to_string(source.features[static_cast<std::size_t>(i)].cycle));
                epoch_sum += v;
                tape.backward(lv);
            }
            const double inv = 1.0 / static_cast<double>(b1 - b0);
            for (const std::string& nm : names) {
                ad::Parameter& p = m.params().at(nm);
                for (double& g : p.grad) g *= inv;
            }
            adamw_step(m.params(), names, st, optim.pretrain_opt);
        }
        const double epoch_mean = epoch_sum / n;
        rep.epoch_loss.push_back(epoch_mean);
        rep.epochs_run = epoch + 1;
        log_debug("pretrain epoch " + std::to_string(epoch) + " loss " + format_double(epoch_mean));
        // Windowed means, not single epochs: per-epoch loss is noisy under
        // re-drawn masks and truncations.
        const std::size_t k = static_cast<std::size_t>(optim.plateau_epochs);
        if (rep.epoch_loss.size() >= 2 * k) {
            double recent = 0.0, earlier = 0.0;
            const std::size_t n_ep = rep.epoch_loss.size();
            for (std::size_t i = 0; i < k; ++i) {
                recent += rep.epoch_loss[n_ep - 1 - i];
                earlier += rep.epoch_loss[n_ep - 1 - k - i];
            }
            recent /= static_cast<double>(k);
            earlier /= static_cast<double>(k);
            const double rel = (earlier - recent) / std::max(std::fabs(earlier), 1e-12);
            if (rel < optim.plateau_rel) {
                rep.plateaued = true;
                break;
            }
        }
    }
    rep.final_loss = rep.epoch_loss.back();
    log_info("pretrain finished after " + std::to_string(rep.epochs_run) + " epochs, loss " +
             format_double(rep.final_loss) + (rep.plateaued ? " (plateau)" : " (epoch cap)"));
    return rep;
}

namespace {

// Solves (G + lambda*I) x = b for symmetric positive definite G, in place.
std::vector<double> cholesky_solve(std::vector<double> g, std::vector<double> b, int n,
                                   double ridge) {
    for (int i = 0; i < n; ++i) g[static_cast<std::size_t>(i) * n + i] += ridge;
    // decompose G = L L^T
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = g[static_cast<std::size_t>(i) * n + j];
            for (int k = 0; k < j; ++k)
                s -= g[static_cast<std::size_t>(i) * n + k] * g[static_cast<std::size_t>(j) * n + k];
            if (i == j) {
                if (s <= 0.0)
                    throw std::runtime_error("linear_probe: normal equations not positive definite");
                g[static_cast<std::size_t>(i) * n + j] = std::sqrt(s);
            } else {
                g[static_cast<std::size_t>(i) * n + j] = s / g[static_cast<std::size_t>(j) * n + j];
            }
        }
    }
    // forward then backward substitution
    for (int i = 0; i < n; ++i) {
        double s = b[static_cast<std::size_t>(i)];
        for (int k = 0; k < i; ++k) s -= g[static_cast<std::size_t>(i) * n + k] * b[static_cast<std::size_t>(k)];
        b[static_cast<std::size_t>(i)] = s / g[static_cast<std::size_t>(i) * n + i];
    }
    for (int i = n - 1; i >= 0; --i) {
        double s = b[static_cast<std::size_t>(i)];
        for (int k = i + 1; k < n; ++k) s -= g[static_cast<std::size_t>(k) * n + i] * b[static_cast<std::size_t>(k)];
        b[static_cast<std::size_t>(i)] = s / g[static_cast<std::size_t>(i) * n + i];
    }
    return b;
}

}  // namespace

ProbeReport linear_probe(model::Model& m, const features::Dataset& labeled, double ridge_lambda) {
    const std::size_t n = labeled.features.size();
    if (n == 0) throw std::invalid_argument("linear_probe: dataset is empty");
    if (labeled.labels.size() != n)
        throw std::invalid_argument("linear_probe: labels must align with features");
    if (!(ridge_lambda > 0.0)) throw std::invalid_argument("ridge_lambda must be > 0");

    const int D = m.config().backbone_dim;
    const int cdim = D + 1;  // bias column
    std::vector<double> a(n * static_cast<std::size_t>(cdim));
    std::vector<double> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        ad::Tape tape;
        model::Forward fw = m.forward(tape, labeled.features[i], nullptr);
        const std::vector<double>& z = fw.latent.data();
        std::copy(z.begin(), z.end(), a.begin() + static_cast<std::ptrdiff_t>(i * cdim));
        a[i * cdim + static_cast<std::size_t>(D)] = 1.0;
        y[i] = labeled.labels[i].soh_pct;
    }

    std::vector<double> gram(static_cast<std::size_t>(cdim) * cdim, 0.0);
    std::vector<double> rhs(static_cast<std::size_t>(cdim), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = a.data() + i * cdim;
        for (int r = 0; r < cdim; ++r) {
            rhs[static_cast<std::size_t>(r)] += row[r] * y[i];
            for (int c = 0; c <= r; ++c)
                gram[static_cast<std::size_t>(r) * cdim + c] += row[r] * row[c];
        }
    }
    for (int r = 0; r < cdim; ++r)
        for (int c = r + 1; c < cdim; ++c)
            gram[static_cast<std::size_t>(r) * cdim + c] = gram[static_cast<std::size_t>(c) * cdim + r];

    std::vector<double> beta = cholesky_solve(std::move(gram), std::move(rhs), cdim, ridge_lambda);

    ad::Parameter& hw = m.params().at("h.w");
    ad::Parameter& hb = m.params().at("h.b");
    std::copy(beta.begin(), beta.begin() + D, hw.value.begin());
    hb.value[0] = beta[static_cast<std::size_t>(D)];

    std::vector<double> truth(n), pred(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = a.data() + i * cdim;
        double s = 0.0;
        for (int c = 0; c < cdim; ++c) s += row[c] * beta[static_cast<std::size_t>(c)];
        truth[i] = y[i];
        pred[i] = s;
    }
    ProbeReport rep;
    rep.n_samples = static_cast<int>(n);
    rep.train_mae = mae(truth, pred);
    rep.train_rmse = rmse(truth, pred);
    log_info("linear probe on " + std::to_string(n) + " samples: train MAE " +
             format_double(rep.train_mae) + ", RMSE " + format_double(rep.train_rmse));
    return rep;
}

TtaSampleTrace tta_adapt(model::Model& m, const features::QdLinearFeature& x,
                         const features::VoltageGrid& grid, const TtaConfig& cfg,
                         const OptimConfig& optim, OptState& opt_state) {
    validate(cfg);
    validate(optim);
    const auto t_start = std::chrono::steady_clock::now();

    TtaSampleTrace tr;
    tr.cell_id = x.cell_id;
    tr.cycle = x.cycle;

    loss::LossConfig lc = cfg.loss;
    if (cfg.ssl == SslObjective::ReconOnly) lc.lambda = 0.0;
    const features::MaskResult mk =
        features::apply_random_mask(x, {cfg.mask_ratio, sample_mask_seed(x, cfg.mask_seed)});
    const std::span<const int> midx(mk.indices.data(), mk.indices.size());

    auto eval_loss = [&]() {
        ad::Tape t;
        model::Forward fw = m.forward(t, x, &mk.mask);
        return loss::pg_ssl_loss(t, fw.x_hat, fw.t_grid, x, grid, midx, lc).scalar();
    };

    if (cfg.mode == TtaMode::None) {
        tr.ssl_loss.push_back(eval_loss());
    } else {
        const std::vector<std::string> names = m.trainable_partition(partition_mode(cfg.mode));
        if (names.empty())
            throw std::runtime_error("tta: trainable partition is empty for mode " +
                                     tta_mode_name(cfg.mode));
        for (int s = 0; s < optim.tta_steps; ++s) {
            ad::Tape t;
            model::Forward fw = m.forward(t, x, &mk.mask);
            ad::Val lv = loss::pg_ssl_loss(t, fw.x_hat, fw.t_grid, x, grid, midx, lc);
            const double v = lv.scalar();
            if (!std::isfinite(v))
                throw std::runtime_error("tta diverged on " + x.cell_id + "/" +
                                         std::to_string(x.cycle) + " at step " + std::to_string(s));
            tr.ssl_loss.push_back(v);
            m.params().zero_grads();
            t.backward(lv);
            sgd_momentum_step(m.params(), std::span<const std::string>(names.data(), names.size()),
                              opt_state, optim.tta_opt);
        }
        tr.ssl_loss.push_back(eval_loss());
    }

    {
        ad::Tape t;
        model::Forward fw = m.forward(t, x, nullptr);
        tr.predicted_soh = fw.soh.scalar();
    }
    tr.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                           t_start)
                     .count();
    return tr;
}

AdaptationReport adapt_and_predict_stream(model::Model& m,
                                          const std::vector<features::QdLinearFeature>& stream,
                                          const std::vector<features::SohLabel>& labels,
                                          const features::VoltageGrid& grid, const TtaConfig& cfg,
                                          const OptimConfig& optim) {
    validate(cfg);
    validate(optim);
    if (!labels.empty() && labels.size() != stream.size())
        throw std::invalid_argument("labels must align with the stream (or be empty)");

    AdaptationReport rep;
    rep.mode = tta_mode_name(cfg.mode);
    rep.ssl = ssl_objective_name(cfg.ssl);
    rep.reset_policy = reset_policy_name(cfg.reset_policy);
    rep.mask_ratio = cfg.mask_ratio;
    rep.steps = optim.tta_steps;
    rep.lambda = cfg.ssl == SslObjective::ReconOnly ? 0.0 : cfg.loss.lambda;
    rep.residual_mode = loss::residual_mode_name(cfg.loss.residual_mode);
    rep.trainable_count =
        cfg.mode == TtaMode::None ? 0 : m.trainable_scalar_count(partition_mode(cfg.mode));

    const ad::ParamStore base = m.params();
    OptState carried;
    for (const features::QdLinearFeature& x : stream) {
        if (cfg.reset_policy == ResetPolicy::Episodic) {
            m.params().assign_values_from(base);
            carried = OptState{};
        }
        TtaSampleTrace tr = tta_adapt(m, x, grid, cfg, optim, carried);
        AdaptationReport::Sample s;
        s.cell_id = tr.cell_id;
        s.cycle = tr.cycle;
        s.predicted_soh = tr.predicted_soh;
        s.ssl_loss = std::move(tr.ssl_loss);
        s.wall_ms = tr.wall_ms;
        rep.total_ms += s.wall_ms;
        rep.samples.push_back(std::move(s));
    }
    m.params().assign_values_from(base);

    std::vector<double> truth, pred;
    for (std::size_t i = 0; i < rep.samples.size(); ++i) {
        if (labels.empty()) break;
        rep.samples[i].has_label = true;
        rep.samples[i].true_soh = labels[i].soh_pct;
        truth.push_back(labels[i].soh_pct);
        pred.push_back(rep.samples[i].predicted_soh);
    }
    rep.n_labeled = static_cast<int>(truth.size());
    if (!truth.empty()) {
        rep.mae = mae(truth, pred);
        rep.rmse = rmse(truth, pred);
    }
    return rep;
}

double mae(std::span<const double> truth, std::span<const double> pred) {
    if (truth.size() != pred.size() || truth.empty())
        throw std::invalid_argument("mae: inputs must be equal-length and non-empty");
    double s = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) s += std::fabs(truth[i] - pred[i]);
    return s / static_cast<double>(truth.size());
}

double rmse(std::span<const double> truth, std::span<const double> pred) {
    if (truth.size() != pred.size() || truth.empty())
        throw std::invalid_argument("rmse: inputs must be equal-length and non-empty");
    double s = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const double d = truth[i] - pred[i];
        s += d * d;
    }
    return std::sqrt(s / static_cast<double>(truth.size()));
}

std::string adaptation_report_json(const AdaptationReport& rep) {
    nlohmann::ordered_json j;
    j["format"] = "bttt-adaptation-report";
    j["version"] = 1;
    nlohmann::ordered_json cfg;
    cfg["mode"] = rep.mode;
    cfg["ssl"] = rep.ssl;
    cfg["reset_policy"] = rep.reset_policy;
    cfg["mask_ratio"] = rep.mask_ratio;
    cfg["steps"] = rep.steps;
    cfg["lambda"] = rep.lambda;
    cfg["residual_mode"] = rep.residual_mode;
    j["config"] = cfg;
    j["trainable_count"] = rep.trainable_count;
    nlohmann::ordered_json metrics;
    metrics["n_samples"] = rep.samples.size();
    metrics["n_labeled"] = rep.n_labeled;
    metrics["mae"] = rep.mae;    // NaN serializes as null
    metrics["rmse"] = rep.rmse;
    j["metrics"] = metrics;
    nlohmann::ordered_json samples = nlohmann::ordered_json::array();
    for (const auto& s : rep.samples) {
        nlohmann::ordered_json e;
        e["cell_id"] = s.cell_id;
        e["cycle"] = s.cycle;
        if (s.has_label)
            e["true_soh"] = s.true_soh;
        else
            e["true_soh"] = nullptr;
        e["predicted_soh"] = s.predicted_soh;
        e["ssl_loss"] = s.ssl_loss;
        samples.push_back(std::move(e));
    }
    j["samples"] = samples;
    return j.dump(2) + "\n";
}

std::string adaptation_timings_json(const AdaptationReport& rep) {
    nlohmann::ordered_json j;
    j["format"] = "bttt-adaptation-timings";
    j["version"] = 1;
    j["total_ms"] = rep.total_ms;
    double mx = 0.0;
    for (const auto& s : rep.samples) mx = std::max(mx, s.wall_ms);
    j["mean_ms_per_sample"] =
        rep.samples.empty() ? 0.0 : rep.total_ms / static_cast<double>(rep.samples.size());
    j["max_ms_per_sample"] = mx;
    nlohmann::ordered_json samples = nlohmann::ordered_json::array();
    for (const auto& s : rep.samples) {
        nlohmann::ordered_json e;
        e["cell_id"] = s.cell_id;
        e["cycle"] = s.cycle;
        e["wall_ms"] = s.wall_ms;
        samples.push_back(std::move(e));
    }
    j["samples"] = samples;
    return j.dump(2) + "\n";
}

std::string optim_config_json(const OptimConfig& cfg) {
    nlohmann::ordered_json j;
    j["pretrain"] = {{"lr", cfg.pretrain_opt.lr},
                     {"beta1", cfg.pretrain_opt.beta1},
                     {"beta2", cfg.pretrain_opt.beta2},
                     {"eps", cfg.pretrain_opt.eps},
                     {"weight_decay", cfg.pretrain_opt.weight_decay}};
    j["tta"] = {{"lr", cfg.tta_opt.lr}, {"momentum", cfg.tta_opt.momentum}};
    j["tta_steps"] = cfg.tta_steps;
    j["max_epochs"] = cfg.max_epochs;
    j["batch_size"] = cfg.batch_size;
    j["plateau_rel"] = cfg.plateau_rel;
    j["plateau_epochs"] = cfg.plateau_epochs;
    j["truncate_lo"] = cfg.truncate_lo;
    j["truncate_hi"] = cfg.truncate_hi;
    j["shuffle_seed"] = cfg.shuffle_seed;
    return j.dump(2) + "\n";
}

static OptimConfig optim_config_from_json_impl(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    OptimConfig cfg;
    const auto& p = j.at("pretrain");
    cfg.pretrain_opt.lr = p.at("lr").get<double>();
    cfg.pretrain_opt.beta1 = p.value("beta1", 0.9);
    cfg.pretrain_opt.beta2 = p.value("beta2", 0.999);
    cfg.pretrain_opt.eps = p.value("eps", 1e-8);
    cfg.pretrain_opt.weight_decay = p.value("weight_decay", 0.01);
    const auto& t = j.at("tta");
    cfg.tta_opt.lr = t.at("lr").get<double>();
    cfg.tta_opt.momentum = t.value("momentum", 0.9);
    cfg.tta_steps = j.at("tta_steps").get<int>();
    cfg.max_epochs = j.at("max_epochs").get<int>();
    cfg.batch_size = j.at("batch_size").get<int>();
    cfg.plateau_rel = j.value("plateau_rel", 1e-4);
    cfg.plateau_epochs = j.value("plateau_epochs", 10);
    cfg.truncate_lo = j.value("truncate_lo", 0.55);
    cfg.truncate_hi = j.value("truncate_hi", 1.0);
    cfg.shuffle_seed = j.value("shuffle_seed", std::uint64_t{0xF00D});
    validate(cfg);
    return cfg;
}

OptimConfig optim_config_from_json(const std::string& text) {
    return detail::with_json_errors("optimizer config json",
                                    [&] { return optim_config_from_json_impl(text); });
}

std::string tta_config_json(const TtaConfig& cfg) {
    nlohmann::ordered_json j;
    j["mode"] = tta_mode_name(cfg.mode);
    j["ssl"] = ssl_objective_name(cfg.ssl);
    j["mask_ratio"] = cfg.mask_ratio;
    j["reset_policy"] = reset_policy_name(cfg.reset_policy);
    j["mask_seed"] = cfg.mask_seed;
    j["loss"] = nlohmann::ordered_json::parse(loss::loss_config_json(cfg.loss));
    return j.dump(2) + "\n";
}

static TtaConfig tta_config_from_json_impl(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    TtaConfig cfg;
    cfg.mode = tta_mode_from_name(j.at("mode").get<std::string>());
    cfg.ssl = ssl_objective_from_name(j.at("ssl").get<std::string>());
    cfg.mask_ratio = j.at("mask_ratio").get<double>();
    cfg.reset_policy = reset_policy_from_name(j.at("reset_policy").get<std::string>());
    cfg.mask_seed = j.value("mask_seed", std::uint64_t{0x7A7A});
    cfg.loss = loss::loss_config_from_json(j.at("loss").dump());
    validate(cfg);
    return cfg;
}

TtaConfig tta_config_from_json(const std::string& text) {
    return detail::with_json_errors("tta config json",
                                    [&] { return tta_config_from_json_impl(text); });
}

}  // namespace bttt::train
