#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "bttt/common.hpp"
#include "bttt/ecm.hpp"
#include "bttt/features.hpp"
#include "bttt/loss.hpp"
#include "bttt/tensor.hpp"

using namespace bttt;
using doctest::Approx;

namespace {

// RC overpotential under constant charge current: w(t) = I(R + Rp(1 - e^-t/tau)).
// theta1*I_dis + theta2*w + dw/dt vanishes identically on this trajectory, so
// any nonzero residual is pure central-difference error, bounded by
// (dt^2/6) * max|w'''| with w''' = -I*Rp*e^-t/tau / tau^3.
struct RcTrajectory {
    double r = 0.05, rp = 0.03, cp = 1000.0, current = 0.55;
    double tau() const { return rp * cp; }
    double w(double t) const { return current * (r + rp * (1.0 - std::exp(-t / tau()))); }
    double ocv(double t) const { return 3.0 + 0.2 * t / 600.0; }
    ecm::EcmCoefficients coeffs() const { return {(r + rp) / (cp * rp), 1.0 / (cp * rp)}; }

    loss::ResidualInputs sample(double dt, double t_end) const {
        loss::ResidualInputs in;
        for (double t = 0.0; t <= t_end + 1e-9; t += dt) {
            in.t_grid.push_back(t);
            in.ocv_at_soc.push_back(ocv(t));
            in.v_grid.push_back(ocv(t) + w(t));
        }
        in.current = current;
        in.coeffs = coeffs();
        in.convention = ecm::SignConvention::ChargePositive;
        return in;
    }
};

double max_abs(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::fabs(x));
    return m;
}

features::VoltageGrid small_grid() {
    features::VoltageGrid g;
    g.v_lower = 3.0;
    g.v_upper = 3.7;
    g.n_points = 8;
    return g;
}

features::QdLinearFeature small_feature(int t_obs) {
    features::QdLinearFeature f;
    f.values = {0.02, 0.05, 0.09, 0.14, 0.2, 0.27, 0.35, 0.44};
    f.obs_mask.assign(8, 0);
    for (int i = 0; i < t_obs; ++i) f.obs_mask[static_cast<std::size_t>(i)] = 1;
    f.current_a = 0.55;
    f.cell_id = "loss";
    f.cycle = 1;
    return f;
}

loss::LossConfig small_config(double lambda) {
    loss::LossConfig cfg;
    cfg.lambda = lambda;
    cfg.residual_mode = loss::ResidualMode::OcvCorrected;
    cfg.convention = ecm::SignConvention::ChargePositive;
    cfg.coeffs = {0.08 / 30.0, 1.0 / 30.0};
    cfg.prior.soc = {0.0, 1.0};
    cfg.prior.ocv = {3.0, 4.0};
    cfg.prior.soc0 = 0.25;
    cfg.prior.c_ref = 1.0;
    return cfg;
}

// Independent reimplementation of the penalty's residual for the slope oracle.
std::vector<double> hand_residual(const std::vector<double>& x_hat,
                                  const std::vector<double>& t_grid,
                                  const features::VoltageGrid& grid,
                                  const loss::LossConfig& cfg, double current) {
    const std::size_t n = x_hat.size();
    std::vector<double> w(n);
    for (std::size_t j = 0; j < n; ++j) {
        const double soc = cfg.prior.soc0 + x_hat[j] / cfg.prior.c_ref;
        const double ocv = cfg.prior.ocv[0] + (cfg.prior.ocv[1] - cfg.prior.ocv[0]) *
                                                  (soc - cfg.prior.soc[0]) /
                                                  (cfg.prior.soc[1] - cfg.prior.soc[0]);
        w[j] = grid.voltage_at(static_cast<int>(j)) - ocv;
    }
    std::vector<double> r(n - 2);
    for (std::size_t j = 1; j + 1 < n; ++j) {
        const double wdot = (w[j + 1] - w[j - 1]) / (t_grid[j + 1] - t_grid[j - 1]);
        r[j - 1] = cfg.coeffs.theta1 * -current + cfg.coeffs.theta2 * w[j] + wdot;
    }
    return r;
}

}  // namespace

TEST_CASE("residual vanishes on the exact RC trajectory as dt shrinks") {
    RcTrajectory traj;
    const double theta1_i = traj.coeffs().theta1 * traj.current;
    double prev = 1e9;
    for (double dt : {4.0, 2.0, 1.0}) {
        auto in = traj.sample(dt, 600.0);
        auto r = loss::ode_residual(in, loss::ResidualMode::OcvCorrected);
        CHECK(r.size() == in.v_grid.size() - 2);
        const double m = max_abs(r);
        // two-sided analytic bound: the error is (dt^2/6)|w'''| at its peak
        const double bound = dt * dt / 6.0 * traj.current * traj.rp /
                             std::pow(traj.tau(), 3.0) * std::exp(-dt / traj.tau());
        CHECK(m < 1.05 * bound);
        CHECK(m > 0.8 * bound);
        CHECK(m < prev);
        prev = m;
    }
    CHECK(prev < 1e-3 * std::fabs(theta1_i));
}

TEST_CASE("paper literal residual plateaus at the OCV drift rate") {
    RcTrajectory traj;
    auto in = traj.sample(1.0, 600.0);
    auto corrected = loss::ode_residual(in, loss::ResidualMode::OcvCorrected);
    auto literal = loss::ode_residual(in, loss::ResidualMode::PaperLiteral);
    // the OCV ramp adds theta2*ocv + d(ocv)/dt that correction removes
    CHECK(max_abs(literal) > 100.0 * max_abs(corrected));
    CHECK(max_abs(literal) > 0.2 / 600.0);  // at least the ramp slope
}

TEST_CASE("residual is affine in the coefficients") {
    RcTrajectory traj;
    auto in = traj.sample(2.0, 120.0);
    auto base = loss::ode_residual(in, loss::ResidualMode::OcvCorrected);
    auto in2 = in;
    in2.coeffs.theta2 += 0.5;
    auto shifted = loss::ode_residual(in2, loss::ResidualMode::OcvCorrected);
    for (std::size_t j = 0; j < base.size(); ++j) {
        const double w_mid = in.v_grid[j + 1] - in.ocv_at_soc[j + 1];
        CHECK(shifted[j] - base[j] == Approx(0.5 * w_mid).epsilon(1e-12));
    }
    auto in3 = in;
    in3.coeffs.theta1 += 0.25;
    auto shifted1 = loss::ode_residual(in3, loss::ResidualMode::OcvCorrected);
    for (std::size_t j = 0; j < base.size(); ++j)
        CHECK(shifted1[j] - base[j] == Approx(0.25 * -traj.current).epsilon(1e-12));
}

TEST_CASE("zero current with v equal to ocv gives an exactly zero residual") {
    loss::ResidualInputs in;
    for (int j = 0; j < 10; ++j) {
        in.t_grid.push_back(10.0 * j);
        in.v_grid.push_back(3.4);
        in.ocv_at_soc.push_back(3.4);
    }
    in.current = 0.0;
    in.coeffs = {0.1, 0.2};
    auto r = loss::ode_residual(in, loss::ResidualMode::OcvCorrected);
    for (double x : r) CHECK(x == 0.0);
}

TEST_CASE("residual inputs are validated") {
    loss::ResidualInputs in;
    in.v_grid = {3.0, 3.1};
    in.t_grid = {0.0, 1.0};
    CHECK_THROWS_AS((void)loss::ode_residual(in, loss::ResidualMode::PaperLiteral),
                    std::invalid_argument);
    in.v_grid = {3.0, 3.1, 3.2};
    CHECK_THROWS_AS((void)loss::ode_residual(in, loss::ResidualMode::PaperLiteral),
                    std::invalid_argument);  // t_grid too short
    in.t_grid = {0.0, 2.0, 1.0};
    CHECK_THROWS_AS((void)loss::ode_residual(in, loss::ResidualMode::PaperLiteral),
                    std::invalid_argument);  // non-increasing time
    in.t_grid = {0.0, 1.0, 2.0};
    CHECK_THROWS_AS((void)loss::ode_residual(in, loss::ResidualMode::OcvCorrected),
                    std::invalid_argument);  // missing ocv_at_soc
    in.ocv_at_soc = {3.0, 3.0};
    CHECK_THROWS_AS((void)loss::ode_residual(in, loss::ResidualMode::OcvCorrected),
                    std::invalid_argument);  // ocv length mismatch
}

TEST_CASE("recon loss is the prefix mse with masked targets kept") {
    features::QdLinearFeature f = small_feature(6);
    ad::Tape t;
    std::vector<double> xh_vals(8);
    for (std::size_t i = 0; i < 8; ++i) xh_vals[i] = f.values[i] + 1.0;
    xh_vals[6] = 500.0;  // outside the observed prefix: must not matter
    xh_vals[7] = -500.0;
    ad::Val xh = t.leaf(ad::Shape::vec(8), std::move(xh_vals));
    std::vector<int> masked = {1, 2};
    ad::Val l = loss::recon_loss(t, xh, f, masked);
    CHECK(l.data()[0] == Approx(1.0).epsilon(1e-15));

    std::vector<int> outside = {6};
    CHECK_THROWS_AS((void)loss::recon_loss(t, xh, f, outside), std::invalid_argument);

    features::QdLinearFeature empty = small_feature(0);
    CHECK_THROWS_AS((void)loss::recon_loss(t, xh, empty, masked), std::invalid_argument);

    ad::Val short_xh = t.leaf(ad::Shape::vec(4), {0.0, 0.1, 0.2, 0.3});
    CHECK_THROWS_AS((void)loss::recon_loss(t, short_xh, f, masked), std::invalid_argument);
}

TEST_CASE("pg_ssl is affine in lambda with slope mean squared residual") {
    features::VoltageGrid grid = small_grid();
    features::QdLinearFeature f = small_feature(6);
    std::vector<double> xh_vals = {0.03, 0.07, 0.12, 0.18, 0.25, 0.33, 0.42, 0.52};
    std::vector<double> tg_vals(8);
    for (std::size_t i = 0; i < 8; ++i) tg_vals[i] = xh_vals[i] * 7200.0;
    std::vector<int> masked = {0, 3};

    auto value_at = [&](double lambda) {
        ad::Tape t;
        ad::Val xh = t.leaf(ad::Shape::vec(8), std::vector<double>(xh_vals));
        ad::Val tg = t.leaf(ad::Shape::vec(8), std::vector<double>(tg_vals));
        return loss::pg_ssl_loss(t, xh, tg, f, grid, masked, small_config(lambda)).data()[0];
    };

    const double l0 = value_at(0.0);
    const double l1 = value_at(1.0);
    const double l25 = value_at(2.5);

    auto r = hand_residual(xh_vals, tg_vals, grid, small_config(1.0), f.current_a);
    double slope = 0.0;
    for (double x : r) slope += x * x;
    slope /= static_cast<double>(r.size());

    CHECK(l1 - l0 == Approx(slope).epsilon(1e-12));
    CHECK(l25 - l0 == Approx(2.5 * slope).epsilon(1e-12));
    CHECK(slope > 0.0);

    // lambda == 0 is exactly the reconstruction term
    ad::Tape t;
    ad::Val xh = t.leaf(ad::Shape::vec(8), std::vector<double>(xh_vals));
    CHECK(l0 == loss::recon_loss(t, xh, f, masked).data()[0]);
}

TEST_CASE("overlap-only residual penalizes just the observed window") {
    features::VoltageGrid grid = small_grid();
    features::QdLinearFeature f = small_feature(6);
    std::vector<double> xh_vals = {0.03, 0.07, 0.12, 0.18, 0.25, 0.33, 0.42, 0.52};
    std::vector<double> tg_vals(8);
    for (std::size_t i = 0; i < 8; ++i) tg_vals[i] = xh_vals[i] * 7200.0;
    std::vector<int> masked;

    loss::LossConfig cfg = small_config(3.0);
    cfg.residual_full_curve = false;

    ad::Tape t;
    ad::Val xh = t.leaf(ad::Shape::vec(8), std::vector<double>(xh_vals));
    ad::Val tg = t.leaf(ad::Shape::vec(8), std::vector<double>(tg_vals));
    const double l = loss::pg_ssl_loss(t, xh, tg, f, grid, masked, cfg).data()[0];
    const double l0 = loss::pg_ssl_loss(t, xh, tg, f, grid, masked, small_config(0.0)).data()[0];

    auto r = hand_residual(xh_vals, tg_vals, grid, cfg, f.current_a);
    double slope = 0.0;
    for (int j = 0; j < 4; ++j) slope += r[static_cast<std::size_t>(j)] * r[static_cast<std::size_t>(j)];
    slope /= 4.0;  // T-2 = 4 interior points inside the prefix
    CHECK(l - l0 == Approx(3.0 * slope).epsilon(1e-12));

    // too-short overlap drops the residual term instead of throwing
    features::QdLinearFeature tiny = small_feature(2);
    const double lt = loss::pg_ssl_loss(t, xh, tg, tiny, grid, masked, cfg).data()[0];
    const double lt0 = loss::pg_ssl_loss(t, xh, tg, tiny, grid, masked, small_config(0.0)).data()[0];
    CHECK(lt == lt0);
}

TEST_CASE("missing time grid reduces pg_ssl to reconstruction") {
    features::VoltageGrid grid = small_grid();
    features::QdLinearFeature f = small_feature(6);
    ad::Tape t;
    ad::Val xh = t.leaf(ad::Shape::vec(8), {0.03, 0.07, 0.12, 0.18, 0.25, 0.33, 0.42, 0.52});
    ad::Val invalid;  // no tape behind it
    std::vector<int> masked = {1};
    const double l = loss::pg_ssl_loss(t, xh, invalid, f, grid, masked, small_config(5.0)).data()[0];
    CHECK(l == loss::recon_loss(t, xh, f, masked).data()[0]);
}

TEST_CASE("pg_ssl rejects a curve that does not span the grid") {
    features::VoltageGrid grid = small_grid();
    grid.n_points = 9;  // feature and x_hat stay at 8
    features::QdLinearFeature f = small_feature(6);
    ad::Tape t;
    ad::Val xh = t.leaf(ad::Shape::vec(8), {0.03, 0.07, 0.12, 0.18, 0.25, 0.33, 0.42, 0.52});
    ad::Val tg = t.scale(xh, 7200.0);
    std::vector<int> masked;
    CHECK_THROWS_AS((void)loss::pg_ssl_loss(t, xh, tg, f, grid, masked, small_config(1.0)),
                    std::invalid_argument);
}

TEST_CASE("pg_ssl gradient matches finite differences") {
    features::VoltageGrid grid = small_grid();
    features::QdLinearFeature f = small_feature(6);
    std::vector<int> masked = {1, 4};
    loss::LossConfig cfg = small_config(2.5);

    ad::ParamStore store;
    ad::Parameter& raw = store.add("raw", ad::Shape::vec(8));
    for (std::size_t i = 0; i < 8; ++i) raw.value[i] = -3.5 + 0.1 * static_cast<double>(i);

    auto build = [&](ad::Tape& t) {
        ad::Val r = t.param(store.at("raw"));
        ad::Val xh = t.cumsum(t.softplus(r));
        ad::Val tg = t.scale(xh, 7200.0);
        return loss::pg_ssl_loss(t, xh, tg, f, grid, masked, cfg);
    };
    ad::Parameter* p = &store.at("raw");
    auto report = ad::grad_check(build, std::span<ad::Parameter*>(&p, 1));
    CHECK(report.coords_checked == 8);
    CHECK(report.max_rel_error < 1e-6);
}

TEST_CASE("ocv prior inverts soc0 from the window-start voltage") {
    ecm::EcmParams ref;
    ref.r_ohmic = 0.05;
    ref.r_pol = 0.03;
    ref.c_pol = 1000.0;
    ref.capacity_nom = 1.1;
    ref.ocv_table = {{0.0, 3.0}, {1.0, 4.0}};

    auto prior = loss::make_ocv_prior(ref, 3.3, 0.5);
    CHECK(prior.soc0 == Approx(0.275).epsilon(1e-12));  // (3.3 - 0.5*0.05 - 3.0) / 1.0
    CHECK(prior.c_ref == 1.1);
    CHECK(prior.soc == std::vector<double>{0.0, 1.0});
    CHECK(prior.ocv == std::vector<double>{3.0, 4.0});

    auto disch = loss::make_ocv_prior(ref, 3.3, 0.5, ecm::SignConvention::DischargePositive);
    CHECK(disch.soc0 == Approx(0.325).epsilon(1e-12));  // ohmic drop flips sign

    CHECK(loss::make_ocv_prior(ref, 2.0, 0.5).soc0 == 0.0);  // clamped below
    CHECK(loss::make_ocv_prior(ref, 5.0, 0.5).soc0 == 1.0);  // clamped above

    ref.ocv_table = {{0.0, 3.0}};
    CHECK_THROWS_AS((void)loss::make_ocv_prior(ref, 3.3, 0.5), std::invalid_argument);
}

TEST_CASE("loss config validation") {
    loss::LossConfig cfg = small_config(0.1);
    CHECK_NOTHROW(loss::validate(cfg));

    cfg.lambda = -0.5;
    CHECK_THROWS_AS(loss::validate(cfg), std::invalid_argument);

    cfg = small_config(0.1);
    cfg.prior.soc.clear();
    cfg.prior.ocv.clear();
    CHECK_THROWS_AS(loss::validate(cfg), std::invalid_argument);
    cfg.lambda = 0.0;  // prior only required when the penalty is active
    CHECK_NOTHROW(loss::validate(cfg));
    cfg.lambda = 0.1;
    cfg.residual_mode = loss::ResidualMode::PaperLiteral;  // no prior needed
    CHECK_NOTHROW(loss::validate(cfg));

    cfg = small_config(0.1);
    cfg.prior.soc = {0.0, 0.0};
    CHECK_THROWS_AS(loss::validate(cfg), std::invalid_argument);

    cfg = small_config(0.1);
    cfg.prior.c_ref = 0.0;
    CHECK_THROWS_AS(loss::validate(cfg), std::invalid_argument);
}

TEST_CASE("residual mode names round trip") {
    for (auto m : {loss::ResidualMode::PaperLiteral, loss::ResidualMode::OcvCorrected})
        CHECK(loss::residual_mode_from_name(loss::residual_mode_name(m)) == m);
    CHECK_THROWS_AS((void)loss::residual_mode_from_name("bogus"), std::invalid_argument);
}

TEST_CASE("loss config json round trips byte for byte") {
    loss::LossConfig cfg = small_config(0.7);
    cfg.residual_full_curve = false;
    cfg.convention = ecm::SignConvention::DischargePositive;
    const std::string text = loss::loss_config_json(cfg);
    loss::LossConfig back = loss::loss_config_from_json(text);
    CHECK(loss::loss_config_json(back) == text);
    CHECK(back.lambda == cfg.lambda);
    CHECK(back.residual_mode == cfg.residual_mode);
    CHECK(back.residual_full_curve == cfg.residual_full_curve);
    CHECK(back.coeffs.theta1 == cfg.coeffs.theta1);
    CHECK(back.prior.soc0 == cfg.prior.soc0);
    CHECK_THROWS_AS((void)loss::loss_config_from_json("{"), std::runtime_error);
}
