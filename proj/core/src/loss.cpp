#include "bttt/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "bttt/common.hpp"
#include "json_util.hpp"

namespace bttt::loss {

using ad::Shape;
using ad::Tape;
using ad::Val;

std::string residual_mode_name(ResidualMode mode) {
    switch (mode) {
        case ResidualMode::PaperLiteral: return "paper_literal";
        case ResidualMode::OcvCorrected: return "ocv_corrected";
    }
    throw std::logic_error("unreachable residual mode");
}

ResidualMode residual_mode_from_name(const std::string& name) {
    if (name == "paper_literal") return ResidualMode::PaperLiteral;
    if (name == "ocv_corrected") return ResidualMode::OcvCorrected;
    throw std::invalid_argument("unknown residual mode: " + name);
}

namespace {

std::string convention_name(ecm::SignConvention conv) {
    return conv == ecm::SignConvention::ChargePositive ? "charge_positive"
                                                       : "discharge_positive";
}

ecm::SignConvention convention_from_name(const std::string& name) {
    if (name == "charge_positive") return ecm::SignConvention::ChargePositive;
    if (name == "discharge_positive") return ecm::SignConvention::DischargePositive;
    throw std::invalid_argument("unknown sign convention: " + name);
}

// Discharge-positive current: the ODE theta1*I + theta2*w + dw/dt = 0 holds
// with I counted positive on discharge.
double discharge_positive(double current, ecm::SignConvention conv) {
    return conv == ecm::SignConvention::ChargePositive ? -current : current;
}

}  // namespace

OcvPrior make_ocv_prior(const ecm::EcmParams& ref, double v_lower, double current_a,
                        ecm::SignConvention convention) {
    if (ref.ocv_table.size() < 2)
        throw std::invalid_argument("reference OCV table needs at least 2 points");
    OcvPrior prior;
    prior.soc.reserve(ref.ocv_table.size());
    prior.ocv.reserve(ref.ocv_table.size());
    for (const auto& pt : ref.ocv_table) {
        prior.soc.push_back(pt.soc);
        prior.ocv.push_back(pt.voltage);
    }
    prior.c_ref = ref.capacity_nom;

    const double i_charge = convention == ecm::SignConvention::ChargePositive
                                ? current_a
                                : -current_a;
    const double v0 = v_lower - i_charge * ref.r_ohmic;
    if (v0 <= prior.ocv.front()) {
        prior.soc0 = prior.soc.front();
    } else if (v0 >= prior.ocv.back()) {
        prior.soc0 = prior.soc.back();
    } else {
        std::size_t k = 1;
        while (k + 1 < prior.ocv.size() && prior.ocv[k] < v0) ++k;
        const double dv = prior.ocv[k] - prior.ocv[k - 1];
        const double f = dv > 0 ? (v0 - prior.ocv[k - 1]) / dv : 0.0;
        prior.soc0 = prior.soc[k - 1] + f * (prior.soc[k] - prior.soc[k - 1]);
    }
    return prior;
}

void validate(const LossConfig& cfg) {
    if (!(cfg.lambda >= 0.0))
        throw std::invalid_argument("lambda must be >= 0");
    if (cfg.residual_mode == ResidualMode::OcvCorrected && cfg.lambda > 0.0) {
        if (cfg.prior.soc.size() != cfg.prior.ocv.size() || cfg.prior.soc.size() < 2)
            throw std::invalid_argument("ocv_corrected mode needs an OCV prior table");
        for (std::size_t i = 1; i < cfg.prior.soc.size(); ++i)
            if (cfg.prior.soc[i] <= cfg.prior.soc[i - 1])
                throw std::invalid_argument("OCV prior soc breakpoints must be strictly increasing");
        if (!(cfg.prior.c_ref > 0.0))
            throw std::invalid_argument("OCV prior c_ref must be > 0");
    }
}

void validate(const ResidualInputs& in) {
    const std::size_t n = in.v_grid.size();
    if (n < 3)
        throw std::invalid_argument("residual needs at least 3 points, got " + std::to_string(n));
    if (in.t_grid.size() != n)
        throw std::invalid_argument("t_grid length does not match v_grid");
    if (!in.ocv_at_soc.empty() && in.ocv_at_soc.size() != n)
        throw std::invalid_argument("ocv_at_soc length does not match v_grid");
    for (std::size_t i = 1; i < n; ++i)
        if (!(in.t_grid[i] > in.t_grid[i - 1]))
            throw std::invalid_argument("non-increasing t_grid at index " + std::to_string(i));
}

std::vector<double> ode_residual(const ResidualInputs& in, ResidualMode mode) {
    validate(in);
    if (mode == ResidualMode::OcvCorrected && in.ocv_at_soc.empty())
        throw std::invalid_argument("ocv_corrected residual requires ocv_at_soc");

    const std::size_t n = in.v_grid.size();
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i)
        w[i] = mode == ResidualMode::OcvCorrected ? in.v_grid[i] - in.ocv_at_soc[i]
                                                  : in.v_grid[i];
    const double base = in.coeffs.theta1 * discharge_positive(in.current, in.convention);
    std::vector<double> r(n - 2);
    for (std::size_t j = 1; j + 1 < n; ++j) {
        const double wdot = (w[j + 1] - w[j - 1]) / (in.t_grid[j + 1] - in.t_grid[j - 1]);
        r[j - 1] = base + in.coeffs.theta2 * w[j] + wdot;
    }
    return r;
}

Val recon_loss(Tape& t, Val x_hat, const features::QdLinearFeature& x,
               std::span<const int> masked_indices) {
    const int T = x.t_obs();
    if (T == 0)
        throw std::invalid_argument("recon_loss: observed prefix is empty");
    if (x_hat.shape().rank != 1 ||
        x_hat.shape().dim[0] != static_cast<std::int64_t>(x.values.size()))
        throw std::invalid_argument("recon_loss: x_hat shape " + x_hat.shape().str() +
                                    " does not match feature length " +
                                    std::to_string(x.values.size()));
    for (int idx : masked_indices)
        if (idx < 0 || idx >= T)
            throw std::invalid_argument("masked index " + std::to_string(idx) +
                                        " outside observed prefix [0, " + std::to_string(T) + ")");
    std::vector<double> target(x.values.begin(), x.values.begin() + T);
    return t.mse(t.slice_rows(x_hat, 0, T), t.leaf(Shape::vec(T), std::move(target)));
}

Val pg_ssl_loss(Tape& t, Val x_hat, Val t_grid, const features::QdLinearFeature& x,
                const features::VoltageGrid& grid, std::span<const int> masked_indices,
                const LossConfig& cfg) {
    validate(cfg);
    Val recon = recon_loss(t, x_hat, x, masked_indices);
    if (cfg.lambda == 0.0) return recon;
    if (!t_grid.valid()) {
        log_debug("pg_ssl_loss: no time grid, residual term skipped");
        return recon;
    }

    const std::int64_t n = grid.n_points;
    if (x_hat.shape().dim[0] != n || t_grid.shape().dim[0] != n)
        throw std::invalid_argument("pg_ssl_loss: curve length does not match grid");

    std::vector<double> volts(static_cast<std::size_t>(n));
    for (std::int64_t j = 0; j < n; ++j)
        volts[static_cast<std::size_t>(j)] = grid.voltage_at(static_cast<int>(j));
    Val v_leaf = t.leaf(Shape::vec(n), std::move(volts));

    Val w;
    if (cfg.residual_mode == ResidualMode::OcvCorrected) {
        Val soc = t.add(t.constant(cfg.prior.soc0), t.scale(x_hat, 1.0 / cfg.prior.c_ref));
        Val ocv = t.lerp_table(soc, cfg.prior.soc, cfg.prior.ocv);
        w = t.sub(v_leaf, ocv);
    } else {
        w = v_leaf;
    }

    Val dw = t.sub(t.slice_rows(w, 2, n), t.slice_rows(w, 0, n - 2));
    Val dt = t.sub(t.slice_rows(t_grid, 2, n), t.slice_rows(t_grid, 0, n - 2));
    Val wdot = t.div(dw, dt);
    Val wmid = t.slice_rows(w, 1, n - 1);
    const double base =
        cfg.coeffs.theta1 * discharge_positive(x.current_a, cfg.convention);
    Val r = t.add(t.add(t.constant(base), t.scale(wmid, cfg.coeffs.theta2)), wdot);

    if (!cfg.residual_full_curve) {
        const int T = x.t_obs();
        if (T < 3) {
            log_debug("pg_ssl_loss: overlap too short for the residual, term skipped");
            return recon;
        }
        r = t.slice_rows(r, 0, T - 2);
    }

    Val term = t.mean_all(t.mul(r, r));
    return t.add(recon, t.scale(term, cfg.lambda));
}

std::string loss_config_json(const LossConfig& cfg) {
    nlohmann::ordered_json j;
    j["lambda"] = cfg.lambda;
    j["residual_mode"] = residual_mode_name(cfg.residual_mode);
    j["residual_full_curve"] = cfg.residual_full_curve;
    j["convention"] = convention_name(cfg.convention);
    j["theta1"] = cfg.coeffs.theta1;
    j["theta2"] = cfg.coeffs.theta2;
    nlohmann::ordered_json p;
    p["soc"] = cfg.prior.soc;
    p["ocv"] = cfg.prior.ocv;
    p["soc0"] = cfg.prior.soc0;
    p["c_ref"] = cfg.prior.c_ref;
    j["prior"] = p;
    return j.dump(2) + "\n";
}

static LossConfig loss_config_from_json_impl(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    LossConfig cfg;
    cfg.lambda = j.at("lambda").get<double>();
    cfg.residual_mode = residual_mode_from_name(j.at("residual_mode").get<std::string>());
    cfg.residual_full_curve = j.value("residual_full_curve", true);
    cfg.convention = convention_from_name(j.at("convention").get<std::string>());
    cfg.coeffs.theta1 = j.at("theta1").get<double>();
    cfg.coeffs.theta2 = j.at("theta2").get<double>();
    const auto& p = j.at("prior");
    cfg.prior.soc = p.at("soc").get<std::vector<double>>();
    cfg.prior.ocv = p.at("ocv").get<std::vector<double>>();
    cfg.prior.soc0 = p.at("soc0").get<double>();
    cfg.prior.c_ref = p.at("c_ref").get<double>();
    validate(cfg);
    return cfg;
}

LossConfig loss_config_from_json(const std::string& text) {
    return detail::with_json_errors("loss config json",
                                    [&] { return loss_config_from_json_impl(text); });
}

}  // namespace bttt::loss
