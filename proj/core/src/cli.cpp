#include "bttt/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>
#include <utility>

#include "bttt/common.hpp"
#include "json_util.hpp"

namespace bttt::cli {

namespace {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path + " for reading");
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void spit(const std::string& path, const std::string& text) {
    const fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f << text;
    if (!f) throw std::runtime_error("failed writing " + path);
}

std::string seed_dir(const std::string& output_dir, std::uint64_t seed) {
    return output_dir + "/seed_" + std::to_string(seed);
}

std::string pretrain_report_json(const train::PretrainReport& rep) {
    ordered_json j;
    j["format"] = "bttt-pretrain-report";
    j["version"] = 1;
    j["epochs_run"] = rep.epochs_run;
    j["plateaued"] = rep.plateaued;
    j["final_loss"] = rep.final_loss;
    j["epoch_loss"] = rep.epoch_loss;
    return j.dump(2) + "\n";
}

std::string probe_report_json(const train::ProbeReport& rep) {
    ordered_json j;
    j["format"] = "bttt-probe-report";
    j["version"] = 1;
    j["n_samples"] = rep.n_samples;
    j["train_mae"] = rep.train_mae;
    j["train_rmse"] = rep.train_rmse;
    return j.dump(2) + "\n";
}

std::string variant_name(const train::TtaConfig& tta) {
    if (tta.mode == train::TtaMode::None) return "none";
    return train::tta_mode_name(tta.mode) + "_" + train::ssl_objective_name(tta.ssl) + "_mask" +
           format_double(tta.mask_ratio);
}

/// Seeds the experiment runs over: the single --seed override or the config
/// list.
std::vector<std::uint64_t> run_seeds(const ExperimentConfig& cfg, bool seed_given,
                                     std::uint64_t seed) {
    if (seed_given) return {seed};
    return cfg.seeds;
}

ExperimentConfig load_experiment_config(const std::string& config_path,
                                        const std::string& out_override) {
    ExperimentConfig cfg = config_path.empty() ? default_experiment_config()
                                               : experiment_config_from_json(slurp(config_path));
    if (!out_override.empty()) cfg.output_dir = out_override;
    validate(cfg);
    return cfg;
}

/// The per-seed preset, checked against the config echo a previous stage
/// wrote so artifacts in the directory all belong to one configuration.
experiment::Preset seed_preset(const ExperimentConfig& cfg, std::uint64_t seed,
                               const std::string& dir, bool check_echo) {
    experiment::Preset preset = cfg.preset;
    experiment::reseed(preset, seed);
    if (check_echo) {
        const std::string echo_path = dir + "/config.json";
        if (!fs::exists(echo_path))
            throw std::runtime_error("missing " + echo_path + "; run pretrain first");
        if (slurp(echo_path) != experiment::preset_json(preset))
            throw std::runtime_error(echo_path +
                                     " does not match the given config; re-run pretrain");
    }
    return preset;
}

// ---------------------------------------------------------------------------
// adapt fan-out: episodic samples are independent, so cells can run on worker
// threads against model copies; merged output is byte-identical to --jobs 1.

train::AdaptationReport adapt_parallel(experiment::Prepared& prep,
                                       const experiment::Preset& preset,
                                       const train::TtaConfig& tta, int jobs) {
    const std::vector<features::QdLinearFeature>& stream = prep.target.features;
    const std::vector<features::SohLabel>& labels = prep.target.labels;

    std::vector<std::string> cell_order;
    std::map<std::string, std::vector<std::size_t>> by_cell;
    for (std::size_t i = 0; i < stream.size(); ++i) {
        auto [it, inserted] = by_cell.try_emplace(stream[i].cell_id);
        if (inserted) cell_order.push_back(stream[i].cell_id);
        it->second.push_back(i);
    }

    const int workers = std::min<int>(jobs, static_cast<int>(cell_order.size()));
    std::vector<std::vector<std::string>> assigned(static_cast<std::size_t>(workers));
    for (std::size_t c = 0; c < cell_order.size(); ++c)
        assigned[c % static_cast<std::size_t>(workers)].push_back(cell_order[c]);

    std::vector<std::map<std::string, train::AdaptationReport>> done(
        static_cast<std::size_t>(workers));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                model::Model local = prep.model;
                for (const std::string& cell : assigned[static_cast<std::size_t>(w)]) {
                    std::vector<features::QdLinearFeature> sub;
                    std::vector<features::SohLabel> sub_labels;
                    for (std::size_t i : by_cell[cell]) {
                        sub.push_back(stream[i]);
                        if (!labels.empty()) sub_labels.push_back(labels[i]);
                    }
                    done[static_cast<std::size_t>(w)][cell] = train::adapt_and_predict_stream(
                        local, sub, sub_labels, prep.target.grid, tta, preset.optim);
                }
            } catch (...) {
                errors[static_cast<std::size_t>(w)] = std::current_exception();
            }
        });
    }
    for (std::thread& t : pool) t.join();
    for (const std::exception_ptr& e : errors)
        if (e) std::rethrow_exception(e);

    train::AdaptationReport merged;
    merged.samples.resize(stream.size());
    bool header_set = false;
    for (int w = 0; w < workers; ++w) {
        for (auto& [cell, rep] : done[static_cast<std::size_t>(w)]) {
            if (!header_set) {
                merged.mode = rep.mode;
                merged.ssl = rep.ssl;
                merged.reset_policy = rep.reset_policy;
                merged.mask_ratio = rep.mask_ratio;
                merged.steps = rep.steps;
                merged.lambda = rep.lambda;
                merged.residual_mode = rep.residual_mode;
                merged.trainable_count = rep.trainable_count;
                header_set = true;
            }
            const std::vector<std::size_t>& idx = by_cell[cell];
            for (std::size_t k = 0; k < idx.size(); ++k)
                merged.samples[idx[k]] = std::move(rep.samples[k]);
        }
    }
    std::vector<double> truth, pred;
    for (const train::AdaptationReport::Sample& s : merged.samples) {
        merged.total_ms += s.wall_ms;
        if (!s.has_label) continue;
        truth.push_back(s.true_soh);
        pred.push_back(s.predicted_soh);
    }
    merged.n_labeled = static_cast<int>(truth.size());
    if (!truth.empty()) {
        merged.mae = train::mae(truth, pred);
        merged.rmse = train::rmse(truth, pred);
    }
    return merged;
}

// ---------------------------------------------------------------------------
// commands

int cmd_simulate(const std::string& config_path, const std::string& out_path, bool seed_given,
                 std::uint64_t seed) {
    ecm::FleetConfig cfg;
    if (config_path.empty()) {
        cfg = experiment::default_preset(1).source;
    } else {
        cfg = ecm::fleet_config_from_json(slurp(config_path));
    }
    if (seed_given) cfg.seed = seed;
    ecm::Fleet fleet = ecm::generate_fleet(cfg);
    const fs::path p(out_path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    ecm::write_cycles_csv(out_path, fleet.cycles);
    ecm::write_labels_csv(out_path + ".labels.csv", fleet.labels);
    std::printf("simulate: %d cells x %d cycles -> %s (+ .labels.csv)\n", cfg.n_cells,
                cfg.n_cycles, out_path.c_str());
    return 0;
}

int cmd_featurize(const std::string& input, const std::string& out_path,
                  const std::string& config_path) {
    features::VoltageGrid grid;
    if (!config_path.empty()) grid = features::grid_from_json(slurp(config_path));
    std::vector<ecm::CycleRecord> cycles = features::read_cycles_csv(input);
    features::Dataset ds;
    ds.grid = grid;
    ds.features.reserve(cycles.size());
    for (const ecm::CycleRecord& rec : cycles) ds.features.push_back(features::qdlinear(rec, grid));
    const fs::path p(out_path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    features::write_features(out_path, ds);
    const std::string label_in = input + ".labels.csv";
    if (fs::exists(label_in)) spit(out_path + ".labels.csv", slurp(label_in));
    std::printf("featurize: %zu cycles -> %s (grid %s)\n", ds.features.size(), out_path.c_str(),
                (out_path + ".grid.json").c_str());
    return 0;
}

int cmd_pretrain(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds) {
    for (std::uint64_t s : seeds) {
        const std::string dir = seed_dir(cfg.output_dir, s);
        experiment::Preset preset = seed_preset(cfg, s, dir, false);
        experiment::Prepared prep = experiment::prepare(preset);
        spit(dir + "/config.json", experiment::preset_json(preset));
        prep.model.save(dir + "/model.json");
        spit(dir + "/pretrain.json", pretrain_report_json(prep.pretrain_report));
        spit(dir + "/probe.json", probe_report_json(prep.probe_report));
        std::printf("pretrain: seed %llu epochs=%d final_loss=%s probe_mae=%s -> %s\n",
                    static_cast<unsigned long long>(s), prep.pretrain_report.epochs_run,
                    format_double(prep.pretrain_report.final_loss).c_str(),
                    format_double(prep.probe_report.train_mae).c_str(), dir.c_str());
    }
    return 0;
}

int cmd_probe(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds) {
    for (std::uint64_t s : seeds) {
        const std::string dir = seed_dir(cfg.output_dir, s);
        experiment::Preset preset = seed_preset(cfg, s, dir, true);
        experiment::Prepared prep = experiment::load_prepared(preset, dir + "/model.json");
        train::ProbeReport rep =
            train::linear_probe(prep.model, experiment::probe_views(prep.source));
        prep.model.save(dir + "/model.json");
        spit(dir + "/probe.json", probe_report_json(rep));
        std::printf("probe: seed %llu n=%d train_mae=%s train_rmse=%s\n",
                    static_cast<unsigned long long>(s), rep.n_samples,
                    format_double(rep.train_mae).c_str(), format_double(rep.train_rmse).c_str());
    }
    return 0;
}

struct AdaptOverrides {
    std::string mode;
    std::string ssl;
    double mask = -1.0;
    int steps = 0;
    int jobs = 1;
};

int cmd_adapt(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
              const AdaptOverrides& ov) {
    double mae_sum = 0.0;
    int mae_n = 0;
    for (std::uint64_t s : seeds) {
        const std::string dir = seed_dir(cfg.output_dir, s);
        experiment::Preset preset = seed_preset(cfg, s, dir, true);
        train::TtaConfig tta = preset.tta;
        if (!ov.mode.empty()) tta.mode = train::tta_mode_from_name(ov.mode);
        if (!ov.ssl.empty()) tta.ssl = train::ssl_objective_from_name(ov.ssl);
        if (ov.mask >= 0.0) tta.mask_ratio = ov.mask;
        train::OptimConfig optim = preset.optim;
        if (ov.steps > 0) optim.tta_steps = ov.steps;

        experiment::Prepared prep = experiment::load_prepared(preset, dir + "/model.json");
        train::AdaptationReport rep;
        const bool fan_out = ov.jobs > 1 && tta.mode != train::TtaMode::None &&
                             tta.reset_policy == train::ResetPolicy::Episodic;
        if (ov.jobs > 1 && !fan_out)
            log_warn("adapt: --jobs needs episodic resets and an adapting mode; running "
                     "sequentially");
        if (fan_out) {
            experiment::Preset pre_jobs = preset;
            pre_jobs.optim = optim;
            rep = adapt_parallel(prep, pre_jobs, tta, ov.jobs);
        } else {
            std::vector<features::SohLabel> labels = prep.target.labels;
            rep = train::adapt_and_predict_stream(prep.model, prep.target.features, labels,
                                                  prep.target.grid, tta, optim);
        }
        const std::string base = dir + "/adapt_" + variant_name(tta);
        spit(base + ".json", train::adaptation_report_json(rep));
        spit(base + ".timings.json", train::adaptation_timings_json(rep));
        std::printf("adapt: seed %llu %s mae=%s rmse=%s trainable=%lld -> %s\n",
                    static_cast<unsigned long long>(s), variant_name(tta).c_str(),
                    format_double(rep.mae).c_str(), format_double(rep.rmse).c_str(),
                    static_cast<long long>(rep.trainable_count), (base + ".json").c_str());
        if (rep.n_labeled > 0) {
            mae_sum += rep.mae;
            mae_n += 1;
        }
    }
    if (mae_n > 1)
        std::printf("adapt: mean mae over %d seeds = %s\n", mae_n,
                    format_double(mae_sum / mae_n).c_str());
    return 0;
}

int cmd_ablate(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds) {
    std::vector<std::vector<experiment::AblationRow>> per_seed;
    for (std::uint64_t s : seeds) {
        const std::string dir = seed_dir(cfg.output_dir, s);
        experiment::Preset preset = seed_preset(cfg, s, dir, true);
        experiment::Prepared prep = experiment::load_prepared(preset, dir + "/model.json");
        std::vector<experiment::AblationRow> rows =
            experiment::run_ablation(prep, preset, cfg.mask_ratios);
        spit(dir + "/ablation.csv", experiment::ablation_csv(rows));
        std::printf("ablate: seed %llu -> %s (%zu rows)\n", static_cast<unsigned long long>(s),
                    (dir + "/ablation.csv").c_str(), rows.size());
        per_seed.push_back(std::move(rows));
    }

    // Rows share one matrix order across seeds; aggregate index-wise.
    std::string summary = "mode,ssl,mask_ratio,lambda,trainable_count,mean_mae,mean_rmse,seeds\n";
    const std::size_t n_rows = per_seed.front().size();
    for (std::size_t r = 0; r < n_rows; ++r) {
        double mae_sum = 0.0, rmse_sum = 0.0;
        for (const std::vector<experiment::AblationRow>& rows : per_seed) {
            mae_sum += rows[r].mae;
            rmse_sum += rows[r].rmse;
        }
        const experiment::AblationRow& proto = per_seed.front()[r];
        const double n = static_cast<double>(per_seed.size());
        summary += proto.mode + "," + proto.ssl + "," + format_double(proto.mask_ratio) + "," +
                   format_double(proto.lambda) + "," + std::to_string(proto.trainable_count) +
                   "," + format_double(mae_sum / n) + "," + format_double(rmse_sum / n) + "," +
                   std::to_string(per_seed.size()) + "\n";
    }
    const std::string summary_path = cfg.output_dir + "/ablation_summary.csv";
    spit(summary_path, summary);
    std::printf("ablate: summary over %zu seed(s) -> %s\n", per_seed.size(),
                summary_path.c_str());
    return 0;
}

int cmd_gradcheck(const std::string& out_path) {
    const ad::GradCheckReport rep = experiment::run_gradcheck();
    const bool pass = rep.max_rel_error < 1e-4;
    if (!out_path.empty()) {
        ordered_json j;
        j["format"] = "bttt-gradcheck";
        j["version"] = 1;
        j["max_rel_error"] = rep.max_rel_error;
        j["coords_checked"] = rep.coords_checked;
        j["worst_param"] = rep.worst_param;
        j["worst_index"] = rep.worst_index;
        j["threshold"] = 1e-4;
        j["pass"] = pass;
        spit(out_path, j.dump(2) + "\n");
    }
    std::printf("gradcheck: max_rel_error=%s over %d coords (worst %s[%lld]) -> %s\n",
                format_double(rep.max_rel_error).c_str(), rep.coords_checked,
                rep.worst_param.c_str(), static_cast<long long>(rep.worst_index),
                pass ? "PASS" : "FAIL");
    return pass ? 0 : 1;
}

int cmd_report(const std::string& input, const std::string& out_base_arg) {
    const ordered_json j = detail::with_json_errors(
        "report input", [&] { return ordered_json::parse(slurp(input)); });
    if (j.value("format", "") != "bttt-adaptation-report")
        throw std::runtime_error("report: " + input + " is not a bttt-adaptation-report");

    struct Row {
        std::string cell;
        int cycle;
        bool labeled;
        double truth;
        double pred;
        double ssl_final;
    };
    std::vector<Row> rows;
    std::vector<double> truth, pred;
    for (const ordered_json& s : j.at("samples")) {
        Row r;
        r.cell = s.at("cell_id").get<std::string>();
        r.cycle = s.at("cycle").get<int>();
        r.labeled = !s.at("true_soh").is_null();
        r.truth = r.labeled ? s.at("true_soh").get<double>()
                            : std::numeric_limits<double>::quiet_NaN();
        r.pred = s.at("predicted_soh").get<double>();
        const ordered_json& trace = s.at("ssl_loss");
        r.ssl_final = trace.empty() ? std::numeric_limits<double>::quiet_NaN()
                                    : trace.back().get<double>();
        if (r.labeled) {
            truth.push_back(r.truth);
            pred.push_back(r.pred);
        }
        rows.push_back(std::move(r));
    }

    const ordered_json& metrics = j.at("metrics");
    const int n_labeled = metrics.at("n_labeled").get<int>();
    if (static_cast<std::size_t>(n_labeled) != truth.size())
        throw std::runtime_error("report: stored n_labeled does not match per-sample records");
    if (n_labeled > 0) {
        const double stored_mae = metrics.at("mae").get<double>();
        const double stored_rmse = metrics.at("rmse").get<double>();
        if (std::isnan(stored_mae) || std::isnan(stored_rmse))
            throw std::runtime_error("report: metrics are NaN");
        if (stored_mae != train::mae(truth, pred) || stored_rmse != train::rmse(truth, pred))
            throw std::runtime_error(
                "report: stored totals do not equal recomputation from per-sample records");
    }

    // Aligned text table.
    const std::vector<std::string> head = {"cell_id", "cycle",   "true_soh",
                                           "pred_soh", "abs_err", "ssl_final"};
    std::vector<std::vector<std::string>> cells;
    for (const Row& r : rows) {
        std::vector<std::string> line(6);
        line[0] = r.cell;
        line[1] = std::to_string(r.cycle);
        line[2] = r.labeled ? format_double(r.truth) : "-";
        line[3] = format_double(r.pred);
        line[4] = r.labeled ? format_double(std::fabs(r.pred - r.truth)) : "-";
        line[5] = std::isnan(r.ssl_final) ? "-" : format_double(r.ssl_final);
        cells.push_back(std::move(line));
    }
    std::vector<std::size_t> width(head.size());
    for (std::size_t c = 0; c < head.size(); ++c) {
        width[c] = head[c].size();
        for (const std::vector<std::string>& line : cells) width[c] = std::max(width[c], line[c].size());
    }
    auto pad = [&](const std::vector<std::string>& line) {
        std::string out;
        for (std::size_t c = 0; c < line.size(); ++c) {
            if (c) out += "  ";
            out += line[c];
            out.append(width[c] - line[c].size(), ' ');
        }
        while (!out.empty() && out.back() == ' ') out.pop_back();
        return out + "\n";
    };
    std::string text;
    const ordered_json& conf = j.at("config");
    text += "adaptation report: mode=" + conf.at("mode").get<std::string>() +
            " ssl=" + conf.at("ssl").get<std::string>() +
            " mask_ratio=" + format_double(conf.at("mask_ratio").get<double>()) +
            " steps=" + std::to_string(conf.at("steps").get<int>()) +
            " lambda=" + format_double(conf.at("lambda").get<double>()) + "\n";
    text += pad(head);
    for (const std::vector<std::string>& line : cells) text += pad(line);
    text += "samples " + std::to_string(rows.size()) + ", labeled " + std::to_string(n_labeled);
    if (n_labeled > 0)
        text += ", mae " + format_double(train::mae(truth, pred)) + ", rmse " +
                format_double(train::rmse(truth, pred));
    text += "\n";

    std::string csv = "cell_id,cycle,true_soh,predicted_soh,abs_error,ssl_final\n";
    for (const Row& r : rows) {
        csv += r.cell + "," + std::to_string(r.cycle) + ",";
        csv += (r.labeled ? format_double(r.truth) : "") + ",";
        csv += format_double(r.pred) + ",";
        csv += (r.labeled ? format_double(std::fabs(r.pred - r.truth)) : "") + ",";
        csv += (std::isnan(r.ssl_final) ? "" : format_double(r.ssl_final)) + "\n";
    }

    std::string base = out_base_arg;
    if (base.empty()) {
        base = input;
        if (base.size() > 5 && base.substr(base.size() - 5) == ".json")
            base.resize(base.size() - 5);
    }
    spit(base + ".txt", text);
    spit(base + ".csv", csv);
    std::printf("report: %s -> %s.txt, %s.csv\n", input.c_str(), base.c_str(), base.c_str());
    return 0;
}

}  // namespace

void validate(const ExperimentConfig& cfg) {
    if (cfg.seeds.empty())
        throw std::invalid_argument("experiment config: seeds must be non-empty");
    if (cfg.output_dir.empty())
        throw std::invalid_argument("experiment config: output_dir must be non-empty");
    if (cfg.mask_ratios.empty())
        throw std::invalid_argument("experiment config: mask_ratios must be non-empty");
    for (double r : cfg.mask_ratios)
        if (!(r >= 0.0 && r < 1.0))
            throw std::invalid_argument("experiment config: mask ratios must lie in [0, 1)");
    // Domain shift must be present: compare the fleets with run identity
    // (seed, prefix) normalized away.
    ecm::FleetConfig a = cfg.preset.source;
    ecm::FleetConfig b = cfg.preset.target;
    a.seed = b.seed = 0;
    a.cell_prefix = b.cell_prefix = "cell";
    if (ecm::fleet_config_json(a) == ecm::fleet_config_json(b))
        throw std::invalid_argument(
            "experiment config: target fleet must differ from source fleet in at least one "
            "parameter");
}

ExperimentConfig default_experiment_config() {
    ExperimentConfig cfg;
    cfg.preset = experiment::default_preset(1);
    return cfg;
}

std::string experiment_config_json(const ExperimentConfig& cfg) {
    ordered_json j;
    j["format"] = "bttt-experiment";
    j["version"] = 1;
    j["seeds"] = cfg.seeds;
    j["output_dir"] = cfg.output_dir;
    j["mask_ratios"] = cfg.mask_ratios;
    j["preset"] = ordered_json::parse(experiment::preset_json(cfg.preset));
    return j.dump(2) + "\n";
}

ExperimentConfig experiment_config_from_json(const std::string& text) {
    return detail::with_json_errors("experiment config", [&] {
        ordered_json j = ordered_json::parse(text);
        if (j.value("format", "") != "bttt-experiment")
            throw std::invalid_argument("experiment config: not a bttt-experiment document");
        ExperimentConfig cfg;
        cfg.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        cfg.output_dir = j.at("output_dir").get<std::string>();
        cfg.mask_ratios = j.at("mask_ratios").get<std::vector<double>>();
        cfg.preset = experiment::preset_from_json(j.at("preset").dump());
        validate(cfg);
        return cfg;
    });
}

int run_cli(int argc, char** argv) {
    CLI::App app{"batteryttt: physics-guided test-time training for battery SOH estimation"};
    app.require_subcommand(1);

    std::string config_path, out_path, input_path;
    std::uint64_t seed = 0;
    AdaptOverrides ov;

    CLI::App* sim = app.add_subcommand("simulate", "Generate a synthetic fleet as cycles CSV");
    sim->add_option("--config", config_path, "Fleet config JSON (default: preset source fleet)");
    sim->add_option("--out", out_path, "Cycles CSV path")->required();
    sim->add_option("--seed", seed, "Override the fleet seed");

    CLI::App* feat = app.add_subcommand("featurize", "Interpolate cycles onto the voltage grid");
    feat->add_option("input", input_path, "Cycles CSV from simulate")->required();
    feat->add_option("--config", config_path, "Voltage grid JSON (default: 2.7-4.2 V, 128 pts)");
    feat->add_option("--out", out_path, "Features CSV path")->required();

    CLI::App* pre = app.add_subcommand("pretrain",
                                       "Pretrain + probe one model per seed on the source fleet");
    pre->add_option("--config", config_path, "Experiment config JSON (default: builtin preset)");
    pre->add_option("--out", out_path, "Output directory (overrides config output_dir)");
    pre->add_option("--seed", seed, "Run a single seed instead of the config list");

    CLI::App* prb = app.add_subcommand("probe", "Re-fit the linear head on saved checkpoints");
    prb->add_option("--config", config_path, "Experiment config JSON");
    prb->add_option("--out", out_path, "Output directory");
    prb->add_option("--seed", seed, "Single seed");

    CLI::App* adp = app.add_subcommand("adapt", "Test-time adapt over the target stream");
    adp->add_option("--config", config_path, "Experiment config JSON");
    adp->add_option("--out", out_path, "Output directory");
    adp->add_option("--seed", seed, "Single seed");
    adp->add_option("--mode", ov.mode, "none | tta_full | tta_ppa")
        ->check(CLI::IsMember({"none", "tta_full", "tta_ppa"}));
    adp->add_option("--ssl", ov.ssl, "pg_ssl | recon_only")
        ->check(CLI::IsMember({"pg_ssl", "recon_only"}));
    adp->add_option("--mask", ov.mask, "TTA mask ratio in [0, 1)")
        ->check(CLI::Range(0.0, 0.999999));
    adp->add_option("--steps", ov.steps, "Adaptation steps per sample")->check(CLI::Range(1, 100000));
    adp->add_option("--jobs", ov.jobs, "Worker threads fanning out per cell")
        ->check(CLI::Range(1, 1024));

    CLI::App* abl = app.add_subcommand("ablate",
                                       "Run the {objective} x {mode} x {mask} matrix per seed");
    abl->add_option("--config", config_path, "Experiment config JSON");
    abl->add_option("--out", out_path, "Output directory");
    abl->add_option("--seed", seed, "Single seed");

    CLI::App* grd = app.add_subcommand("gradcheck",
                                       "Finite-difference gate over the composite model path");
    grd->add_option("--out", out_path, "Write the JSON report here");

    CLI::App* rpt = app.add_subcommand("report", "Render an adaptation report to text and CSV");
    rpt->add_option("input", input_path, "Adaptation report JSON")->required();
    rpt->add_option("--out", out_path, "Output base path (default: input minus .json)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        if (sim->parsed()) return cmd_simulate(config_path, out_path, sim->count("--seed") > 0, seed);
        if (feat->parsed()) return cmd_featurize(input_path, out_path, config_path);
        if (grd->parsed()) return cmd_gradcheck(out_path);
        if (rpt->parsed()) return cmd_report(input_path, out_path);

        if (pre->parsed()) {
            ExperimentConfig cfg = load_experiment_config(config_path, out_path);
            return cmd_pretrain(cfg, run_seeds(cfg, pre->count("--seed") > 0, seed));
        }
        if (prb->parsed()) {
            ExperimentConfig cfg = load_experiment_config(config_path, out_path);
            return cmd_probe(cfg, run_seeds(cfg, prb->count("--seed") > 0, seed));
        }
        if (adp->parsed()) {
            ExperimentConfig cfg = load_experiment_config(config_path, out_path);
            return cmd_adapt(cfg, run_seeds(cfg, adp->count("--seed") > 0, seed), ov);
        }
        if (abl->parsed()) {
            ExperimentConfig cfg = load_experiment_config(config_path, out_path);
            return cmd_ablate(cfg, run_seeds(cfg, abl->count("--seed") > 0, seed));
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "error: no command\n";
    return 1;
}

}  // namespace bttt::cli
