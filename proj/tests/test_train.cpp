#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "bttt/common.hpp"
#include "bttt/features.hpp"
#include "bttt/loss.hpp"
#include "bttt/model.hpp"
#include "bttt/tensor.hpp"
#include "bttt/train.hpp"

using namespace bttt;
using doctest::Approx;

namespace {

model::ModelConfig tiny_config() {
    model::ModelConfig cfg;
    cfg.t_full = 16;
    cfg.patch_len = 4;
    cfg.embed_dim = 8;
    cfg.backbone_dim = 16;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.encoder_kind = model::EncoderKind::Mlp;
    cfg.prompt_len = 4;
    cfg.n_prototypes = 6;
    cfg.vocab_size = 32;
    cfg.init_seed = 7;
    return cfg;
}

features::VoltageGrid tiny_grid() {
    features::VoltageGrid g;
    g.v_lower = 3.0;
    g.v_upper = 3.75;
    g.n_points = 16;
    return g;
}

features::QdLinearFeature ramp(double slope, const std::string& cell, int cycle,
                               int t_obs = 16) {
    features::QdLinearFeature f;
    f.values.resize(16, 0.0);
    f.obs_mask.assign(16, 0);
    for (int i = 0; i < t_obs; ++i) {
        f.values[static_cast<std::size_t>(i)] = slope * i;
        f.obs_mask[static_cast<std::size_t>(i)] = 1;
    }
    f.current_a = 0.5;
    f.temp_c = 25.0;
    f.cell_id = cell;
    f.cycle = cycle;
    return f;
}

train::OptimConfig tiny_optim() {
    train::OptimConfig cfg;
    cfg.tta_opt.lr = 1e-2;
    cfg.tta_opt.momentum = 0.9;
    cfg.tta_steps = 5;
    cfg.max_epochs = 60;
    cfg.batch_size = 4;
    cfg.plateau_epochs = 30;
    cfg.plateau_rel = 1e-12;
    return cfg;
}

train::TtaConfig recon_tta(train::TtaMode mode, train::ResetPolicy reset) {
    train::TtaConfig cfg;
    cfg.mode = mode;
    cfg.ssl = train::SslObjective::ReconOnly;
    cfg.mask_ratio = 0.5;
    cfg.reset_policy = reset;
    cfg.loss.lambda = 0.0;
    return cfg;
}

std::vector<double> snapshot(const model::Model& m, const std::string& name) {
    return m.params().at(name).value;
}

}  // namespace

TEST_CASE("sgd momentum second update compounds the velocity") {
    ad::ParamStore store;
    ad::Parameter& w = store.add("w", ad::Shape::vec(2));
    w.value = {1.0, 2.0};
    train::OptState st;
    train::SgdMomentumConfig cfg{0.1, 0.9};
    std::vector<std::string> names = {"w"};
    auto span = std::span<const std::string>(names.data(), names.size());

    w.grad = {0.1, -0.2};
    train::sgd_momentum_step(store, span, st, cfg);
    CHECK(w.value[0] == Approx(1.0 - 0.1 * 0.1).epsilon(1e-14));
    CHECK(w.value[1] == Approx(2.0 + 0.1 * 0.2).epsilon(1e-14));

    w.grad = {0.1, -0.2};
    train::sgd_momentum_step(store, span, st, cfg);
    // velocity = 0.9*g + g = 1.9*g on the second identical step
    CHECK(w.value[0] == Approx(1.0 - 0.1 * 0.1 - 0.1 * 0.19).epsilon(1e-13));
    CHECK(w.value[1] == Approx(2.0 + 0.1 * 0.2 + 0.1 * 0.38).epsilon(1e-13));
}

TEST_CASE("adamw matches the hand-computed update") {
    ad::ParamStore store;
    ad::Parameter& w = store.add("w", ad::Shape::scalar());
    w.value = {1.0};
    train::OptState st;
    train::AdamwConfig cfg;
    cfg.lr = 0.1;
    std::vector<std::string> names = {"w"};
    auto span = std::span<const std::string>(names.data(), names.size());

    double m = 0.0, v = 0.0, p = 1.0;
    auto reference_step = [&](double g, int t) {
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        const double mh = m / (1.0 - std::pow(cfg.beta1, t));
        const double vh = v / (1.0 - std::pow(cfg.beta2, t));
        // decay acts on the incoming weight, inside one combined update
        p -= cfg.lr * (mh / (std::sqrt(vh) + cfg.eps) + cfg.weight_decay * p);
    };

    w.grad = {0.5};
    train::adamw_step(store, span, st, cfg);
    reference_step(0.5, 1);
    CHECK(w.value[0] == Approx(p).epsilon(1e-12));

    w.grad = {-0.25};
    train::adamw_step(store, span, st, cfg);
    reference_step(-0.25, 2);
    CHECK(w.value[0] == Approx(p).epsilon(1e-12));
}

TEST_CASE("adamw weight decay is decoupled") {
    ad::ParamStore store;
    ad::Parameter& w = store.add("w", ad::Shape::scalar());
    w.value = {4.0};
    w.grad = {0.0};
    train::OptState st;
    train::AdamwConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.5;
    std::vector<std::string> names = {"w"};
    train::adamw_step(store, std::span<const std::string>(names.data(), 1), st, cfg);
    // zero gradient: only the decay term moves the weight
    CHECK(w.value[0] == Approx(4.0 * (1.0 - 0.1 * 0.5)).epsilon(1e-12));
}

TEST_CASE("mae and rmse agree with hand values and order") {
    std::vector<double> truth = {0.0, 3.0};
    std::vector<double> pred = {4.0, 0.0};
    CHECK(train::mae(truth, pred) == Approx(3.5));
    CHECK(train::rmse(truth, pred) == Approx(std::sqrt(12.5)));

    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> a(8), b(8);
        for (std::size_t i = 0; i < 8; ++i) {
            a[i] = rng.normal();
            b[i] = rng.normal();
        }
        CHECK(train::mae(a, b) <= train::rmse(a, b) + 1e-15);
    }
    CHECK_THROWS_AS((void)train::mae(truth, std::vector<double>{1.0}), std::invalid_argument);
}

TEST_CASE("linear probe recovers an exactly linear labeling") {
    model::Model m(tiny_config());
    features::Dataset ds;
    ds.grid = tiny_grid();
    for (int i = 0; i < 10; ++i)
        ds.features.push_back(ramp(0.02 + 0.01 * i, "p" + std::to_string(i), i + 1));

    // labels are a fixed linear readout of the frozen latents
    std::vector<double> w_true(16);
    for (std::size_t i = 0; i < 16; ++i) w_true[i] = 0.1 * (static_cast<double>(i) - 8.0);
    for (const auto& f : ds.features) {
        ad::Tape t;
        auto fw = m.forward(t, f, nullptr);
        const auto& z = fw.latent.data();
        double y = 90.0;
        for (std::size_t i = 0; i < 16; ++i) y += w_true[i] * z[i];
        ds.labels.push_back({y, 0.0, 0.0});
    }

    std::vector<double> f_before = snapshot(m, "f.W1");
    std::vector<double> embed_before = snapshot(m, "embed.W");
    auto rep = train::linear_probe(m, ds);
    CHECK(rep.n_samples == 10);
    // exact up to the ridge shrinkage, three orders below the label scale
    CHECK(rep.train_mae < 5e-3);
    CHECK(rep.train_rmse < 5e-3);
    // only h.* moved
    CHECK(snapshot(m, "f.W1") == f_before);
    CHECK(snapshot(m, "embed.W") == embed_before);

    auto rep2 = train::linear_probe(m, ds);
    CHECK(rep2.train_mae == rep.train_mae);  // deterministic refit

    features::Dataset empty;
    empty.grid = ds.grid;
    CHECK_THROWS_AS((void)train::linear_probe(m, empty), std::invalid_argument);
    features::Dataset misaligned = ds;
    misaligned.labels.pop_back();
    CHECK_THROWS_AS((void)train::linear_probe(m, misaligned), std::invalid_argument);
    CHECK_THROWS_AS((void)train::linear_probe(m, ds, 0.0), std::invalid_argument);
}

TEST_CASE("pretraining overfits a single sample") {
    model::Model m(tiny_config());
    features::Dataset ds;
    ds.grid = tiny_grid();
    ds.features.push_back(ramp(0.07, "train", 1));

    train::OptimConfig optim = tiny_optim();
    optim.batch_size = 1;
    optim.max_epochs = 150;
    optim.pretrain_opt.lr = 3e-3;

    features::MaskSpec mask{0.3, 11};
    loss::LossConfig lc;
    lc.lambda = 0.0;  // reconstruction only: no prior needed

    std::vector<double> h_before = snapshot(m, "h.w");
    auto rep = train::pretrain(m, ds, optim, mask, lc);
    CHECK(rep.epochs_run == static_cast<int>(rep.epoch_loss.size()));
    CHECK(rep.final_loss == rep.epoch_loss.back());
    CHECK(rep.final_loss < 0.05 * rep.epoch_loss.front());
    CHECK(snapshot(m, "h.w") == h_before);  // the probe owns the head
}

TEST_CASE("tta adaptation descends its own objective") {
    model::Model m(tiny_config());
    features::QdLinearFeature x = ramp(0.06, "tta", 3, 12);
    train::TtaConfig cfg = recon_tta(train::TtaMode::TtaFull, train::ResetPolicy::Episodic);
    train::OptimConfig optim = tiny_optim();
    optim.tta_steps = 10;
    train::OptState st;
    auto tr = train::tta_adapt(m, x, tiny_grid(), cfg, optim, st);
    REQUIRE(tr.ssl_loss.size() == 11u);
    CHECK(tr.ssl_loss.back() < tr.ssl_loss.front());
    CHECK(tr.predicted_soh == 100.0);  // zero head reads its bias regardless of adaptation
}

TEST_CASE("mode none evaluates without touching parameters") {
    model::Model m(tiny_config());
    features::QdLinearFeature x = ramp(0.06, "noop", 1, 12);
    train::TtaConfig cfg = recon_tta(train::TtaMode::None, train::ResetPolicy::Episodic);
    train::OptimConfig optim = tiny_optim();
    train::OptState st;
    std::string before = m.params().to_json();
    auto tr = train::tta_adapt(m, x, tiny_grid(), cfg, optim, st);
    CHECK(tr.ssl_loss.size() == 1u);
    CHECK(m.params().to_json() == before);
}

TEST_CASE("tta_full and tta_ppa touch exactly their partitions") {
    for (auto mode : {train::TtaMode::TtaFull, train::TtaMode::TtaPpa}) {
        model::Model m(tiny_config());
        features::QdLinearFeature x = ramp(0.06, "part", 2, 12);
        train::TtaConfig cfg = recon_tta(mode, train::ResetPolicy::Episodic);
        train::OptimConfig optim = tiny_optim();
        train::OptState st;

        std::vector<std::string> names;
        m.params().for_each([&](const ad::Parameter& p) { names.push_back(p.name); });
        std::vector<std::vector<double>> before;
        for (const auto& n : names) before.push_back(snapshot(m, n));

        (void)train::tta_adapt(m, x, tiny_grid(), cfg, optim, st);

        const char* moved_prefix = mode == train::TtaMode::TtaPpa ? "prompt." : "";
        for (std::size_t i = 0; i < names.size(); ++i) {
            const bool is_f_or_g =
                names[i].rfind("f.", 0) == 0 || names[i].rfind("g.", 0) == 0;
            const bool is_prompt = names[i].rfind("prompt.", 0) == 0;
            const bool should_move =
                mode == train::TtaMode::TtaFull ? is_f_or_g : is_prompt;
            INFO("mode ", train::tta_mode_name(mode), " parameter ", names[i]);
            if (should_move)
                CHECK(snapshot(m, names[i]) != before[i]);
            else
                CHECK(snapshot(m, names[i]) == before[i]);
        }
        (void)moved_prefix;
    }
}

TEST_CASE("episodic adaptation is order-invariant") {
    model::Model m(tiny_config());
    // nonzero head so predictions respond to latent movement
    for (double& v : m.params().at("h.w").value) v = 0.05;

    std::vector<features::QdLinearFeature> abc = {ramp(0.05, "a", 1, 12),
                                                  ramp(0.08, "b", 2, 12),
                                                  ramp(0.11, "c", 3, 12)};
    std::vector<features::QdLinearFeature> cab = {abc[2], abc[0], abc[1]};

    train::TtaConfig cfg = recon_tta(train::TtaMode::TtaFull, train::ResetPolicy::Episodic);
    train::OptimConfig optim = tiny_optim();
    auto r1 = train::adapt_and_predict_stream(m, abc, {}, tiny_grid(), cfg, optim);
    auto r2 = train::adapt_and_predict_stream(m, cab, {}, tiny_grid(), cfg, optim);

    auto find = [](const train::AdaptationReport& r, const std::string& cell) {
        for (const auto& s : r.samples)
            if (s.cell_id == cell) return s.predicted_soh;
        throw std::logic_error("sample not found");
    };
    for (const std::string cell : {"a", "b", "c"})
        CHECK(find(r1, cell) == find(r2, cell));
}

TEST_CASE("online adaptation carries state forward") {
    model::Model m(tiny_config());
    for (double& v : m.params().at("h.w").value) v = 0.05;
    std::vector<features::QdLinearFeature> twice = {ramp(0.06, "x", 1, 12),
                                                    ramp(0.06, "x", 1, 12)};
    train::OptimConfig optim = tiny_optim();

    auto epi = train::adapt_and_predict_stream(
        m, twice, {}, tiny_grid(), recon_tta(train::TtaMode::TtaFull, train::ResetPolicy::Episodic),
        optim);
    CHECK(epi.samples[0].predicted_soh == epi.samples[1].predicted_soh);

    auto onl = train::adapt_and_predict_stream(
        m, twice, {}, tiny_grid(), recon_tta(train::TtaMode::TtaFull, train::ResetPolicy::Online),
        optim);
    CHECK(onl.samples[0].predicted_soh != onl.samples[1].predicted_soh);
}

TEST_CASE("stream predictions are causal") {
    model::Model m(tiny_config());
    for (double& v : m.params().at("h.w").value) v = 0.05;
    std::vector<features::QdLinearFeature> ab = {ramp(0.05, "a", 1, 12), ramp(0.09, "b", 2, 12)};
    std::vector<features::QdLinearFeature> a = {ab[0]};
    train::TtaConfig cfg = recon_tta(train::TtaMode::TtaFull, train::ResetPolicy::Online);
    train::OptimConfig optim = tiny_optim();
    auto r_ab = train::adapt_and_predict_stream(m, ab, {}, tiny_grid(), cfg, optim);
    auto r_a = train::adapt_and_predict_stream(m, a, {}, tiny_grid(), cfg, optim);
    CHECK(r_ab.samples[0].predicted_soh == r_a.samples[0].predicted_soh);
}

TEST_CASE("labels only join the metrics, never the predictions") {
    model::Model m(tiny_config());
    for (double& v : m.params().at("h.w").value) v = 0.05;
    std::vector<features::QdLinearFeature> stream = {ramp(0.05, "a", 1, 12),
                                                     ramp(0.09, "b", 2, 12)};
    std::vector<features::SohLabel> labels = {{97.0, 0, 0}, {88.0, 0, 0}};
    std::vector<features::SohLabel> zeroed = {{0.0, 0, 0}, {0.0, 0, 0}};
    train::TtaConfig cfg = recon_tta(train::TtaMode::TtaFull, train::ResetPolicy::Episodic);
    train::OptimConfig optim = tiny_optim();

    auto with = train::adapt_and_predict_stream(m, stream, labels, tiny_grid(), cfg, optim);
    auto without = train::adapt_and_predict_stream(m, stream, {}, tiny_grid(), cfg, optim);
    auto zero = train::adapt_and_predict_stream(m, stream, zeroed, tiny_grid(), cfg, optim);

    for (std::size_t i = 0; i < stream.size(); ++i) {
        CHECK(with.samples[i].predicted_soh == without.samples[i].predicted_soh);
        CHECK(with.samples[i].predicted_soh == zero.samples[i].predicted_soh);
    }
    CHECK(with.n_labeled == 2);
    CHECK(without.n_labeled == 0);
    CHECK(std::isnan(without.mae));
    CHECK(with.mae == train::mae(std::vector<double>{97.0, 88.0},
                                 std::vector<double>{with.samples[0].predicted_soh,
                                                     with.samples[1].predicted_soh}));

    std::vector<features::SohLabel> short_labels = {{97.0, 0, 0}};
    CHECK_THROWS_AS((void)train::adapt_and_predict_stream(m, stream, short_labels, tiny_grid(),
                                                          cfg, optim),
                    std::invalid_argument);
}

TEST_CASE("the stream restores the incoming parameters under both policies") {
    for (auto policy : {train::ResetPolicy::Episodic, train::ResetPolicy::Online}) {
        model::Model m(tiny_config());
        std::vector<features::QdLinearFeature> stream = {ramp(0.05, "a", 1, 12),
                                                         ramp(0.09, "b", 2, 12)};
        std::string before = m.params().to_json();
        (void)train::adapt_and_predict_stream(
            m, stream, {}, tiny_grid(), recon_tta(train::TtaMode::TtaFull, policy), tiny_optim());
        CHECK(m.params().to_json() == before);
    }
}

TEST_CASE("adaptation reports serialize deterministically") {
    model::Model m(tiny_config());
    std::vector<features::QdLinearFeature> stream = {ramp(0.05, "a", 1, 12)};
    std::vector<features::SohLabel> labels = {{95.0, 0, 0}};
    train::TtaConfig cfg = recon_tta(train::TtaMode::TtaFull, train::ResetPolicy::Episodic);
    auto r1 = train::adapt_and_predict_stream(m, stream, labels, tiny_grid(), cfg, tiny_optim());
    auto r2 = train::adapt_and_predict_stream(m, stream, labels, tiny_grid(), cfg, tiny_optim());
    CHECK(train::adaptation_report_json(r1) == train::adaptation_report_json(r2));
    CHECK(train::adaptation_report_json(r1).find("wall_ms") == std::string::npos);
    CHECK(train::adaptation_timings_json(r1).find("total_ms") != std::string::npos);
    CHECK(r1.trainable_count == m.trainable_scalar_count(model::Mode::TtaFull));
}

TEST_CASE("optimizer and tta configs round trip through json") {
    train::OptimConfig optim = tiny_optim();
    optim.pretrain_opt.weight_decay = 0.05;
    optim.truncate_lo = 0.6;
    const std::string text = train::optim_config_json(optim);
    train::OptimConfig back = train::optim_config_from_json(text);
    CHECK(train::optim_config_json(back) == text);
    CHECK(back.tta_steps == optim.tta_steps);
    CHECK(back.truncate_lo == optim.truncate_lo);
    CHECK_THROWS_AS((void)train::optim_config_from_json("{"), std::runtime_error);

    train::TtaConfig tta;
    tta.mode = train::TtaMode::TtaPpa;
    tta.ssl = train::SslObjective::PgSsl;
    tta.mask_ratio = 0.7;
    tta.reset_policy = train::ResetPolicy::Online;
    tta.loss.lambda = 2.0;
    tta.loss.prior.soc = {0.0, 1.0};
    tta.loss.prior.ocv = {3.0, 4.0};
    tta.loss.prior.soc0 = 0.25;
    tta.loss.prior.c_ref = 1.1;
    const std::string ttext = train::tta_config_json(tta);
    train::TtaConfig tback = train::tta_config_from_json(ttext);
    CHECK(train::tta_config_json(tback) == ttext);
    CHECK(tback.mode == tta.mode);
    CHECK(tback.reset_policy == tta.reset_policy);
    CHECK(tback.mask_ratio == tta.mask_ratio);
    CHECK_THROWS_AS((void)train::tta_config_from_json("{"), std::runtime_error);
}

TEST_CASE("enum names round trip") {
    for (auto m : {train::TtaMode::None, train::TtaMode::TtaFull, train::TtaMode::TtaPpa})
        CHECK(train::tta_mode_from_name(train::tta_mode_name(m)) == m);
    for (auto s : {train::SslObjective::ReconOnly, train::SslObjective::PgSsl})
        CHECK(train::ssl_objective_from_name(train::ssl_objective_name(s)) == s);
    for (auto p : {train::ResetPolicy::Episodic, train::ResetPolicy::Online})
        CHECK(train::reset_policy_from_name(train::reset_policy_name(p)) == p);
    CHECK_THROWS_AS((void)train::tta_mode_from_name("bogus"), std::invalid_argument);
    CHECK_THROWS_AS((void)train::ssl_objective_from_name("bogus"), std::invalid_argument);
    CHECK_THROWS_AS((void)train::reset_policy_from_name("bogus"), std::invalid_argument);
}

TEST_CASE("config validation rejects bad optimizer and tta settings") {
    auto bad_optim = [](auto mutate) {
        train::OptimConfig cfg;
        mutate(cfg);
        CHECK_THROWS_AS(train::validate(cfg), std::invalid_argument);
    };
    bad_optim([](train::OptimConfig& c) { c.pretrain_opt.lr = 0.0; });
    bad_optim([](train::OptimConfig& c) { c.tta_opt.lr = -1.0; });
    bad_optim([](train::OptimConfig& c) { c.tta_opt.momentum = 1.0; });
    bad_optim([](train::OptimConfig& c) { c.tta_opt.momentum = -0.1; });
    bad_optim([](train::OptimConfig& c) { c.tta_steps = 0; });
    bad_optim([](train::OptimConfig& c) { c.max_epochs = 0; });
    bad_optim([](train::OptimConfig& c) { c.batch_size = 0; });
    bad_optim([](train::OptimConfig& c) { c.plateau_epochs = 0; });
    bad_optim([](train::OptimConfig& c) { c.truncate_lo = 0.0; });
    bad_optim([](train::OptimConfig& c) { c.truncate_lo = 0.9; c.truncate_hi = 0.8; });
    bad_optim([](train::OptimConfig& c) { c.truncate_hi = 1.2; });

    train::TtaConfig tta = recon_tta(train::TtaMode::TtaFull, train::ResetPolicy::Episodic);
    tta.mask_ratio = 0.96;
    CHECK_THROWS_AS(train::validate(tta), std::invalid_argument);
    tta.mask_ratio = -0.1;
    CHECK_THROWS_AS(train::validate(tta), std::invalid_argument);

    // pg_ssl with a positive lambda needs the prior; recon_only ignores it
    train::TtaConfig ssl = recon_tta(train::TtaMode::TtaFull, train::ResetPolicy::Episodic);
    ssl.ssl = train::SslObjective::PgSsl;
    ssl.loss.lambda = 1.0;
    CHECK_THROWS_AS(train::validate(ssl), std::invalid_argument);
    ssl.ssl = train::SslObjective::ReconOnly;
    CHECK_NOTHROW(train::validate(ssl));
}
