#include "bttt/ecm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "bttt/common.hpp"
#include "json_util.hpp"

namespace bttt::ecm {

void validate(const EcmParams& params) {
    if (params.r_ohmic <= 0.0) throw std::invalid_argument("r_ohmic must be > 0");
    if (params.r_pol <= 0.0) throw std::invalid_argument("r_pol must be > 0");
    if (params.c_pol <= 0.0) throw std::invalid_argument("c_pol must be > 0");
    if (params.capacity_nom <= 0.0) throw std::invalid_argument("capacity_nom must be > 0");
    if (params.ocv_table.size() < 2)
        throw std::invalid_argument("ocv_table needs at least 2 points");
    for (std::size_t i = 1; i < params.ocv_table.size(); ++i) {
        if (!(params.ocv_table[i].soc > params.ocv_table[i - 1].soc))
            throw std::invalid_argument("ocv_table soc must be strictly increasing");
        if (!(params.ocv_table[i].voltage > params.ocv_table[i - 1].voltage))
            throw std::invalid_argument("ocv_table voltage must be strictly increasing");
    }
}

double ocv_lookup(const EcmParams& params, double soc) {
    if (!(soc >= 0.0 && soc <= 1.0))
        throw std::domain_error("soc " + format_double(soc) + " outside [0, 1]");
    const auto& tab = params.ocv_table;
    if (soc <= tab.front().soc) return tab.front().voltage;
    if (soc >= tab.back().soc) return tab.back().voltage;
    auto it = std::upper_bound(tab.begin(), tab.end(), soc,
                               [](double v, const OcvPoint& p) { return v < p.soc; });
    const OcvPoint& hi = *it;
    const OcvPoint& lo = *(it - 1);
    double f = (soc - lo.soc) / (hi.soc - lo.soc);
    return lo.voltage + f * (hi.voltage - lo.voltage);
}

EcmParams with_temperature(const EcmParams& params, double temp_c) {
    EcmParams out = params;
    if (params.arrhenius_k != 0.0) {
        const double t_ref_k = params.temp_ref_c + 273.15;
        const double t_k = temp_c + 273.15;
        if (t_k <= 0.0) throw std::invalid_argument("temperature below absolute zero");
        const double factor = std::exp(params.arrhenius_k * (1.0 / t_ref_k - 1.0 / t_k));
        out.r_ohmic *= factor;
        out.r_pol *= factor;
    }
    return out;
}

EcmCoefficients derive_coefficients(const EcmParams& params, double temp_c) {
    validate(params);
    EcmParams p = with_temperature(params, temp_c);
    const double tau = p.r_pol * p.c_pol;
    return EcmCoefficients{(p.r_ohmic + p.r_pol) / tau, 1.0 / tau};
}

CellState step_cell(const CellState& state, const EcmParams& params, double current_a,
                    double dt_s) {
    if (dt_s <= 0.0) throw std::invalid_argument("dt must be > 0");
    if (state.capacity_full <= 0.0) throw std::invalid_argument("capacity_full must be > 0");
    const double tau = params.r_pol * params.c_pol;
    const double target = current_a * params.r_pol;  // u_pol steady state
    CellState next = state;
    next.u_pol = target + (state.u_pol - target) * std::exp(-dt_s / tau);
    next.soc = std::clamp(state.soc + current_a * dt_s / (3600.0 * state.capacity_full), 0.0, 1.0);
    return next;
}

double terminal_voltage(const CellState& state, const EcmParams& params, double current_a,
                        SignConvention conv) {
    const double ocv = ocv_lookup(params, state.soc);
    const double drop = current_a * params.r_ohmic + state.u_pol;
    return (conv == SignConvention::ChargePositive) ? ocv + drop : ocv - drop;
}

CycleRecord simulate_charge_cycle(const EcmParams& params_in, CellState state0,
                                  const ChargeProtocol& protocol, double noise_sigma,
                                  std::uint64_t noise_seed) {
    validate(params_in);
    if (protocol.v_lower >= protocol.v_upper)
        throw std::invalid_argument("protocol requires v_lower < v_upper");
    if (protocol.current_rate <= 0.0) throw std::invalid_argument("current_rate must be > 0");
    if (protocol.dt <= 0.0) throw std::invalid_argument("dt must be > 0");
    if (state0.capacity_full <= 0.0) throw std::invalid_argument("capacity_full must be > 0");

    const EcmParams params = with_temperature(params_in, protocol.temperature);
    const double i_cc = protocol.current_rate * params.capacity_nom;
    Rng rng(noise_seed);

    CycleRecord rec;
    CellState s = state0;
    bool recording = false;
    bool cv_phase = false;
    bool done = false;
    double t = 0.0;
    double q = 0.0;

    auto cv_current = [&params, &protocol](const CellState& st) {
        return (protocol.v_upper - ocv_lookup(params, st.soc) - st.u_pol) / params.r_ohmic;
    };

    for (std::int64_t step = 0; step < protocol.max_steps; ++step) {
        double current = cv_phase ? cv_current(s) : i_cc;
        double v_true = terminal_voltage(s, params, current, SignConvention::ChargePositive);
        if (!cv_phase && v_true >= protocol.v_upper) {
            if (protocol.mode == ChargeMode::CcCv) {
                cv_phase = true;
                current = cv_current(s);
                v_true = terminal_voltage(s, params, current, SignConvention::ChargePositive);
            } else {
                done = true;
            }
        }
        if (cv_phase && current <= protocol.cv_cutoff_current) done = true;
        if (!recording && v_true >= protocol.v_lower) recording = true;
        if (recording) {
            double v_meas = v_true;
            if (noise_sigma > 0.0) v_meas += noise_sigma * rng.normal();
            rec.samples.push_back({t, v_meas, current, protocol.temperature, q});
        }
        if (done) return rec;
        s = step_cell(s, params, current, protocol.dt);
        if (recording) q += current * protocol.dt / 3600.0;
        t += protocol.dt;
    }
    throw std::runtime_error("charge protocol did not terminate within max_steps");
}

AgedCell apply_degradation(const EcmParams& fresh, int cycle_index,
                           const DegradationSchedule& schedule) {
    if (cycle_index < 0) throw std::invalid_argument("cycle_index must be >= 0");
    if (schedule.capacity_fade_per_cycle < 0.0 || schedule.resistance_growth_per_cycle < 0.0)
        throw std::invalid_argument("degradation rates must be >= 0");
    const double cap_factor = std::pow(1.0 - schedule.capacity_fade_per_cycle, cycle_index);
    const double res_factor = std::pow(1.0 + schedule.resistance_growth_per_cycle, cycle_index);
    AgedCell out{fresh, fresh.capacity_nom * cap_factor};
    out.params.r_ohmic *= res_factor;
    out.params.r_pol *= res_factor;
    if (out.capacity_full <= 0.0)
        throw std::invalid_argument("degradation schedule drives capacity to zero by cycle " +
                                    std::to_string(cycle_index));
    return out;
}

namespace {

std::string cell_name(const std::string& prefix, int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%03d", index);
    return prefix + "_" + buf;
}

}  // namespace

Fleet generate_fleet(const FleetConfig& config) {
    validate(config.base_params);
    if (config.n_cells < 1) throw std::invalid_argument("n_cells must be >= 1");
    if (config.n_cycles < 1) throw std::invalid_argument("n_cycles must be >= 1");

    Rng root(config.seed);
    Fleet fleet;
    fleet.cycles.reserve(static_cast<std::size_t>(config.n_cells) * config.n_cycles);
    fleet.labels.reserve(fleet.cycles.capacity());

    for (int ci = 0; ci < config.n_cells; ++ci) {
        Rng cell_rng = root.fork(static_cast<std::uint64_t>(ci));
        EcmParams cell_params = config.base_params;
        const ParamJitter& j = config.param_jitter;
        cell_params.r_ohmic *= 1.0 + j.r_ohmic * cell_rng.uniform(-1.0, 1.0);
        cell_params.r_pol *= 1.0 + j.r_pol * cell_rng.uniform(-1.0, 1.0);
        cell_params.c_pol *= 1.0 + j.c_pol * cell_rng.uniform(-1.0, 1.0);
        cell_params.capacity_nom *= 1.0 + j.capacity_nom * cell_rng.uniform(-1.0, 1.0);
        validate(cell_params);
        const std::string cell_id = cell_name(config.cell_prefix, ci);

        for (int cyc = 1; cyc <= config.n_cycles; ++cyc) {
            AgedCell aged = apply_degradation(cell_params, cyc - 1, config.schedule);
            CellState s0{0.0, 0.0, aged.capacity_full};
            const std::uint64_t nseed = cell_rng.next_u64();
            CycleRecord rec = simulate_charge_cycle(aged.params, s0, config.protocol,
                                                    config.schedule.noise_sigma, nseed);
            rec.cell_id = cell_id;
            rec.cycle = cyc;
            fleet.cycles.push_back(std::move(rec));
            fleet.labels.push_back({cell_id, cyc,
                                    100.0 * aged.capacity_full / cell_params.capacity_nom,
                                    aged.capacity_full, cell_params.capacity_nom});
        }
    }
    return fleet;
}

std::vector<OcvPoint> default_ocv_table(double v_lower, double v_upper, double curvature) {
    if (v_lower >= v_upper) throw std::invalid_argument("v_lower must be < v_upper");
    if (curvature < 0.0 || curvature > 0.9)
        throw std::invalid_argument("curvature must be in [0, 0.9]");
    std::vector<OcvPoint> table;
    table.reserve(11);
    for (int i = 0; i <= 10; ++i) {
        double s = i / 10.0;
        double z = 2.0 * s - 1.0;
        double plateau = 0.5 * (1.0 + (z < 0 ? -1.0 : 1.0) * z * z);
        double f = (1.0 - curvature) * s + curvature * plateau;
        table.push_back({s, v_lower + f * (v_upper - v_lower)});
    }
    return table;
}

std::string cycles_csv(const std::vector<CycleRecord>& cycles) {
    std::string out = "cell_id,cycle,idx,t_s,voltage_v,current_a,temp_c,q_ah\n";
    for (const CycleRecord& rec : cycles) {
        for (std::size_t i = 0; i < rec.samples.size(); ++i) {
            const CycleSample& s = rec.samples[i];
            out += rec.cell_id;
            out += ',';
            out += std::to_string(rec.cycle);
            out += ',';
            out += std::to_string(i);
            out += ',';
            out += format_double(s.t_s);
            out += ',';
            out += format_double(s.voltage_v);
            out += ',';
            out += format_double(s.current_a);
            out += ',';
            out += format_double(s.temp_c);
            out += ',';
            out += format_double(s.q_ah);
            out += '\n';
        }
    }
    return out;
}

std::string labels_csv(const std::vector<FleetLabel>& labels) {
    std::string out = "cell_id,cycle,soh_pct\n";
    for (const FleetLabel& l : labels) {
        out += l.cell_id;
        out += ',';
        out += std::to_string(l.cycle);
        out += ',';
        out += format_double(l.soh_pct);
        out += '\n';
    }
    return out;
}

namespace {

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f << text;
    if (!f) throw std::runtime_error("write failed for " + path);
}

}  // namespace

void write_cycles_csv(const std::string& path, const std::vector<CycleRecord>& cycles) {
    write_text_file(path, cycles_csv(cycles));
}

void write_labels_csv(const std::string& path, const std::vector<FleetLabel>& labels) {
    write_text_file(path, labels_csv(labels));
}

namespace {

nlohmann::ordered_json params_json(const EcmParams& p) {
    nlohmann::ordered_json j;
    j["r_ohmic"] = p.r_ohmic;
    j["r_pol"] = p.r_pol;
    j["c_pol"] = p.c_pol;
    nlohmann::ordered_json tab = nlohmann::ordered_json::array();
    for (const OcvPoint& pt : p.ocv_table) tab.push_back({{"soc", pt.soc}, {"voltage", pt.voltage}});
    j["ocv_table"] = std::move(tab);
    j["capacity_nom"] = p.capacity_nom;
    j["arrhenius_k"] = p.arrhenius_k;
    j["temp_ref_c"] = p.temp_ref_c;
    return j;
}

EcmParams params_from_json(const nlohmann::json& j) {
    EcmParams p;
    p.r_ohmic = j.at("r_ohmic").get<double>();
    p.r_pol = j.at("r_pol").get<double>();
    p.c_pol = j.at("c_pol").get<double>();
    p.capacity_nom = j.at("capacity_nom").get<double>();
    p.arrhenius_k = j.value("arrhenius_k", 0.0);
    p.temp_ref_c = j.value("temp_ref_c", 25.0);
    p.ocv_table.clear();
    for (const auto& pt : j.at("ocv_table"))
        p.ocv_table.push_back({pt.at("soc").get<double>(), pt.at("voltage").get<double>()});
    return p;
}

}  // namespace

std::string fleet_config_json(const FleetConfig& c) {
    nlohmann::ordered_json j;
    j["n_cells"] = c.n_cells;
    j["n_cycles"] = c.n_cycles;
    j["base_params"] = params_json(c.base_params);
    j["param_jitter"] = {{"r_ohmic", c.param_jitter.r_ohmic},
                         {"r_pol", c.param_jitter.r_pol},
                         {"c_pol", c.param_jitter.c_pol},
                         {"capacity_nom", c.param_jitter.capacity_nom}};
    j["protocol"] = {{"mode", c.protocol.mode == ChargeMode::CcCv ? "cc_cv" : "cc"},
                     {"current_rate", c.protocol.current_rate},
                     {"v_upper", c.protocol.v_upper},
                     {"v_lower", c.protocol.v_lower},
                     {"cv_cutoff_current", c.protocol.cv_cutoff_current},
                     {"dt", c.protocol.dt},
                     {"temperature", c.protocol.temperature},
                     {"max_steps", c.protocol.max_steps}};
    j["schedule"] = {{"capacity_fade_per_cycle", c.schedule.capacity_fade_per_cycle},
                     {"resistance_growth_per_cycle", c.schedule.resistance_growth_per_cycle},
                     {"noise_sigma", c.schedule.noise_sigma}};
    j["seed"] = c.seed;
    j["cell_prefix"] = c.cell_prefix;
    return j.dump(2) + "\n";
}

static FleetConfig fleet_config_from_json_impl(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    FleetConfig c;
    c.n_cells = j.at("n_cells").get<int>();
    c.n_cycles = j.at("n_cycles").get<int>();
    c.base_params = params_from_json(j.at("base_params"));
    if (j.contains("param_jitter")) {
        const auto& pj = j.at("param_jitter");
        c.param_jitter.r_ohmic = pj.value("r_ohmic", 0.0);
        c.param_jitter.r_pol = pj.value("r_pol", 0.0);
        c.param_jitter.c_pol = pj.value("c_pol", 0.0);
        c.param_jitter.capacity_nom = pj.value("capacity_nom", 0.0);
    }
    const auto& pr = j.at("protocol");
    std::string mode = pr.at("mode").get<std::string>();
    if (mode == "cc_cv")
        c.protocol.mode = ChargeMode::CcCv;
    else if (mode == "cc")
        c.protocol.mode = ChargeMode::Cc;
    else
        throw std::runtime_error("unknown protocol mode: " + mode);
    c.protocol.current_rate = pr.at("current_rate").get<double>();
    c.protocol.v_upper = pr.at("v_upper").get<double>();
    c.protocol.v_lower = pr.at("v_lower").get<double>();
    c.protocol.cv_cutoff_current = pr.value("cv_cutoff_current", 0.05);
    c.protocol.dt = pr.at("dt").get<double>();
    c.protocol.temperature = pr.value("temperature", 25.0);
    c.protocol.max_steps = pr.value("max_steps", std::int64_t{1'000'000});
    const auto& sc = j.at("schedule");
    c.schedule.capacity_fade_per_cycle = sc.value("capacity_fade_per_cycle", 0.0);
    c.schedule.resistance_growth_per_cycle = sc.value("resistance_growth_per_cycle", 0.0);
    c.schedule.noise_sigma = sc.value("noise_sigma", 0.0);
    c.seed = j.at("seed").get<std::uint64_t>();
    c.cell_prefix = j.value("cell_prefix", "cell");
    return c;
}

FleetConfig fleet_config_from_json(const std::string& text) {
    return detail::with_json_errors("fleet config json",
                                    [&] { return fleet_config_from_json_impl(text); });
}

}  // namespace bttt::ecm
