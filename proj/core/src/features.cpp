#include "bttt/features.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "bttt/common.hpp"
#include "json_util.hpp"

namespace bttt::features {

double VoltageGrid::voltage_at(int i) const {
    return v_lower + (v_upper - v_lower) * static_cast<double>(i) / (n_points - 1);
}

void validate(const VoltageGrid& grid) {
    if (!(grid.v_lower < grid.v_upper))
        throw std::invalid_argument("voltage grid requires v_lower < v_upper");
    if (grid.n_points < 8) throw std::invalid_argument("voltage grid needs n_points >= 8");
}

int QdLinearFeature::t_obs() const {
    int t = 0;
    while (t < static_cast<int>(obs_mask.size()) && obs_mask[t]) ++t;
    return t;
}

void validate(const QdLinearFeature& feature) {
    if (feature.values.size() != feature.obs_mask.size())
        throw std::invalid_argument("feature values and obs_mask lengths differ");
    const int t = feature.t_obs();
    for (std::size_t i = t; i < feature.obs_mask.size(); ++i)
        if (feature.obs_mask[i])
            throw std::invalid_argument("observed region of feature " + feature.cell_id +
                                        " is not a contiguous prefix");
    for (int i = 1; i < t; ++i)
        if (feature.values[i] < feature.values[i - 1])
            throw std::invalid_argument("observed values of feature " + feature.cell_id +
                                        " are not non-decreasing");
}

QdLinearFeature qdlinear(const ecm::CycleRecord& cycle, const VoltageGrid& grid) {
    validate(grid);
    // Cumulative max makes the charge curve invertible in voltage.
    std::vector<double> v_mono;
    std::vector<double> q;
    std::vector<double> currents;
    v_mono.reserve(cycle.samples.size());
    q.reserve(cycle.samples.size());
    double vmax = -1e300;
    for (const ecm::CycleSample& s : cycle.samples) {
        vmax = std::max(vmax, s.voltage_v);
        v_mono.push_back(vmax);
        q.push_back(s.q_ah);
        currents.push_back(s.current_a);
    }

    int in_range = 0;
    for (double v : v_mono)
        if (v >= grid.v_lower && v <= grid.v_upper) ++in_range;
    if (in_range < 2)
        throw std::runtime_error("cycle " + cycle.cell_id + "/" + std::to_string(cycle.cycle) +
                                 " has fewer than 2 samples inside the grid range");

    QdLinearFeature f;
    f.values.assign(static_cast<std::size_t>(grid.n_points), 0.0);
    f.obs_mask.assign(static_cast<std::size_t>(grid.n_points), 0);
    f.cell_id = cycle.cell_id;
    f.cycle = cycle.cycle;
    f.temp_c = cycle.samples.front().temp_c;

    std::sort(currents.begin(), currents.end());
    f.current_a = currents[currents.size() / 2];

    const double v_first = v_mono.front();
    const double v_last = v_mono.back();
    for (int i = 0; i < grid.n_points; ++i) {
        const double vg = grid.voltage_at(i);
        if (vg > v_last) break;  // unobserved tail
        f.obs_mask[i] = 1;
        if (vg <= v_first) {
            f.values[i] = 0.0;  // below the first recorded sample: no charge yet
            continue;
        }
        // First crossing of vg; flat segments resolve to the earliest sample.
        auto it = std::lower_bound(v_mono.begin(), v_mono.end(), vg);
        std::size_t k = static_cast<std::size_t>(std::distance(v_mono.begin(), it));
        if (k == 0) {
            f.values[i] = q[0];
            continue;
        }
        const double v0 = v_mono[k - 1], v1 = v_mono[k];
        if (v1 > v0) {
            const double w = (vg - v0) / (v1 - v0);
            f.values[i] = q[k - 1] + w * (q[k] - q[k - 1]);
        } else {
            f.values[i] = q[k];
        }
    }
    validate(f);
    return f;
}

QdLinearFeature truncate_partial(const QdLinearFeature& feature, double observed_fraction) {
    if (!(observed_fraction > 0.0 && observed_fraction <= 1.0))
        throw std::invalid_argument("observed_fraction must be in (0, 1]");
    const int t_full = static_cast<int>(feature.values.size());
    const int keep = static_cast<int>(std::ceil(observed_fraction * t_full));
    const int t_new = std::min(feature.t_obs(), keep);
    QdLinearFeature out = feature;
    for (int i = 0; i < t_full; ++i) out.obs_mask[i] = (i < t_new) ? 1 : 0;
    return out;
}

MaskResult apply_random_mask(const QdLinearFeature& feature, const MaskSpec& spec) {
    if (!(spec.ratio >= 0.0 && spec.ratio < 1.0))
        throw std::invalid_argument("mask ratio must be in [0, 1)");
    const int t = feature.t_obs();
    const int n_mask = static_cast<int>(std::ceil(spec.ratio * t));
    MaskResult out;
    out.mask.assign(feature.values.size(), 0);
    if (n_mask == 0) return out;
    std::vector<int> pool(static_cast<std::size_t>(t));
    for (int i = 0; i < t; ++i) pool[static_cast<std::size_t>(i)] = i;
    Rng rng(spec.seed);
    for (int k = 0; k < n_mask; ++k) {
        std::size_t j = static_cast<std::size_t>(k) +
                        static_cast<std::size_t>(rng.below(pool.size() - k));
        std::swap(pool[static_cast<std::size_t>(k)], pool[j]);
    }
    out.indices.assign(pool.begin(), pool.begin() + n_mask);
    std::sort(out.indices.begin(), out.indices.end());
    for (int idx : out.indices) out.mask[static_cast<std::size_t>(idx)] = 1;
    return out;
}

// ---------------------------------------------------------------------------
// CSV / JSON IO

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            cells.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    cells.push_back(cur);
    return cells;
}

std::vector<std::string> read_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::string cur;
    for (char c : text) {
        if (c == '\n') {
            lines.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    if (!cur.empty()) lines.push_back(cur);
    return lines;
}

std::size_t column_index(const std::vector<std::string>& header, const std::string& name) {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end())
        throw std::runtime_error("missing required column '" + name + "' in CSV header");
    return static_cast<std::size_t>(std::distance(header.begin(), it));
}

int parse_int(const std::string& s, const std::string& context) {
    return static_cast<int>(parse_double(s, context));
}

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path + " for writing");
    f << text;
    if (!f) throw std::runtime_error("write failed for " + path);
}

}  // namespace

std::vector<ecm::CycleRecord> parse_cycles_csv(const std::string& text) {
    std::vector<ecm::CycleRecord> out;
    const auto lines = read_lines(text);
    if (lines.empty()) return out;

    const auto header = split_csv_line(lines[0]);
    const std::size_t c_cell = column_index(header, "cell_id");
    const std::size_t c_cycle = column_index(header, "cycle");
    const std::size_t c_t = column_index(header, "t_s");
    const std::size_t c_v = column_index(header, "voltage_v");
    const std::size_t c_i = column_index(header, "current_a");
    const std::size_t c_temp = column_index(header, "temp_c");
    const std::size_t c_q = column_index(header, "q_ah");

    for (std::size_t ln = 1; ln < lines.size(); ++ln) {
        if (lines[ln].empty()) continue;
        const std::string where = "line " + std::to_string(ln + 1);
        const auto cells = split_csv_line(lines[ln]);
        if (cells.size() != header.size())
            throw std::runtime_error(where + ": expected " + std::to_string(header.size()) +
                                     " columns, found " + std::to_string(cells.size()));
        const std::string& cell_id = cells[c_cell];
        const int cycle = parse_int(cells[c_cycle], where + " column cycle");
        ecm::CycleSample s{};
        s.t_s = parse_double(cells[c_t], where + " column t_s");
        s.voltage_v = parse_double(cells[c_v], where + " column voltage_v");
        s.current_a = parse_double(cells[c_i], where + " column current_a");
        s.temp_c = parse_double(cells[c_temp], where + " column temp_c");
        s.q_ah = parse_double(cells[c_q], where + " column q_ah");

        if (out.empty() || out.back().cell_id != cell_id || out.back().cycle != cycle) {
            for (const auto& rec : out)
                if (rec.cell_id == cell_id && rec.cycle == cycle)
                    throw std::runtime_error(where + ": rows for " + cell_id + "/" +
                                             std::to_string(cycle) + " are not contiguous");
            out.push_back({cell_id, cycle, {}});
        }
        if (!out.back().samples.empty() && s.t_s <= out.back().samples.back().t_s)
            throw std::runtime_error(where + ": non-monotone time within " + cell_id + "/" +
                                     std::to_string(cycle));
        out.back().samples.push_back(s);
    }
    return out;
}

std::vector<ecm::CycleRecord> read_cycles_csv(const std::string& path) {
    if (!std::filesystem::exists(path)) throw std::runtime_error("no such file: " + path);
    try {
        return parse_cycles_csv(read_file(path));
    } catch (const std::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
}

std::string grid_json(const VoltageGrid& grid) {
    nlohmann::ordered_json j;
    j["v_lower"] = grid.v_lower;
    j["v_upper"] = grid.v_upper;
    j["n_points"] = grid.n_points;
    return j.dump(2) + "\n";
}

VoltageGrid grid_from_json(const std::string& text) {
    return detail::with_json_errors("voltage grid json", [&] {
        nlohmann::json j = nlohmann::json::parse(text);
        VoltageGrid g;
        g.v_lower = j.at("v_lower").get<double>();
        g.v_upper = j.at("v_upper").get<double>();
        g.n_points = j.at("n_points").get<int>();
        validate(g);
        return g;
    });
}

std::string features_csv(const Dataset& dataset) {
    validate(dataset.grid);
    std::string out = "cell_id,cycle,current_a,temp_c,t_obs";
    for (int i = 0; i < dataset.grid.n_points; ++i) out += ",v" + std::to_string(i);
    out += '\n';
    for (const QdLinearFeature& f : dataset.features) {
        if (static_cast<int>(f.values.size()) != dataset.grid.n_points)
            throw std::invalid_argument("feature " + f.cell_id + " length does not match grid");
        const int t = f.t_obs();
        out += f.cell_id;
        out += ',';
        out += std::to_string(f.cycle);
        out += ',';
        out += format_double(f.current_a);
        out += ',';
        out += format_double(f.temp_c);
        out += ',';
        out += std::to_string(t);
        for (int i = 0; i < dataset.grid.n_points; ++i) {
            out += ',';
            if (i < t) out += format_double(f.values[static_cast<std::size_t>(i)]);
        }
        out += '\n';
    }
    return out;
}

void write_features(const std::string& path, const Dataset& dataset) {
    if (!dataset.labels.empty() && dataset.labels.size() != dataset.features.size())
        throw std::invalid_argument("labels must be empty or parallel to features");
    write_file(path, features_csv(dataset));
    write_file(path + ".grid.json", grid_json(dataset.grid));
    if (!dataset.labels.empty()) {
        std::vector<ecm::FleetLabel> rows;
        rows.reserve(dataset.labels.size());
        for (std::size_t i = 0; i < dataset.labels.size(); ++i) {
            const QdLinearFeature& f = dataset.features[i];
            const SohLabel& l = dataset.labels[i];
            rows.push_back({f.cell_id, f.cycle, l.soh_pct, l.c_full, l.c_nom});
        }
        ecm::write_labels_csv(path + ".labels.csv", rows);
    }
}

Dataset read_features(const std::string& path) {
    Dataset ds;
    ds.grid = grid_from_json(read_file(path + ".grid.json"));

    const auto lines = read_lines(read_file(path));
    if (lines.empty()) return ds;
    const auto header = split_csv_line(lines[0]);
    const std::size_t c_cell = column_index(header, "cell_id");
    const std::size_t c_cycle = column_index(header, "cycle");
    const std::size_t c_i = column_index(header, "current_a");
    const std::size_t c_temp = column_index(header, "temp_c");
    const std::size_t c_tobs = column_index(header, "t_obs");
    const std::size_t c_v0 = column_index(header, "v0");
    if (static_cast<int>(header.size() - c_v0) != ds.grid.n_points)
        throw std::runtime_error(path + ": header value columns do not match grid n_points");

    for (std::size_t ln = 1; ln < lines.size(); ++ln) {
        if (lines[ln].empty()) continue;
        const std::string where = path + " line " + std::to_string(ln + 1);
        const auto cells = split_csv_line(lines[ln]);
        if (cells.size() != header.size())
            throw std::runtime_error(where + ": expected " + std::to_string(header.size()) +
                                     " columns, found " + std::to_string(cells.size()));
        QdLinearFeature f;
        f.cell_id = cells[c_cell];
        f.cycle = parse_int(cells[c_cycle], where + " column cycle");
        f.current_a = parse_double(cells[c_i], where + " column current_a");
        f.temp_c = parse_double(cells[c_temp], where + " column temp_c");
        const int t = parse_int(cells[c_tobs], where + " column t_obs");
        if (t < 0 || t > ds.grid.n_points)
            throw std::runtime_error(where + ": t_obs out of range");
        f.values.assign(static_cast<std::size_t>(ds.grid.n_points), 0.0);
        f.obs_mask.assign(static_cast<std::size_t>(ds.grid.n_points), 0);
        for (int i = 0; i < ds.grid.n_points; ++i) {
            const std::string& cell = cells[c_v0 + static_cast<std::size_t>(i)];
            if (i < t) {
                f.values[static_cast<std::size_t>(i)] =
                    parse_double(cell, where + " column v" + std::to_string(i));
                f.obs_mask[static_cast<std::size_t>(i)] = 1;
            } else if (!cell.empty()) {
                throw std::runtime_error(where + ": unobserved column v" + std::to_string(i) +
                                         " must be empty");
            }
        }
        validate(f);
        ds.features.push_back(std::move(f));
    }

    const std::string label_path = path + ".labels.csv";
    if (std::filesystem::exists(label_path)) {
        const auto llines = read_lines(read_file(label_path));
        if (!llines.empty()) {
            const auto lheader = split_csv_line(llines[0]);
            const std::size_t lc_cell = column_index(lheader, "cell_id");
            const std::size_t lc_cycle = column_index(lheader, "cycle");
            const std::size_t lc_soh = column_index(lheader, "soh_pct");
            struct Key {
                std::string cell;
                int cycle;
                bool operator<(const Key& o) const {
                    return cell != o.cell ? cell < o.cell : cycle < o.cycle;
                }
            };
            std::map<Key, double> by_key;
            for (std::size_t ln = 1; ln < llines.size(); ++ln) {
                if (llines[ln].empty()) continue;
                const std::string where = label_path + " line " + std::to_string(ln + 1);
                const auto cells = split_csv_line(llines[ln]);
                if (cells.size() != lheader.size())
                    throw std::runtime_error(where + ": wrong column count");
                by_key[{cells[lc_cell], parse_int(cells[lc_cycle], where + " column cycle")}] =
                    parse_double(cells[lc_soh], where + " column soh_pct");
            }
            ds.labels.reserve(ds.features.size());
            for (const QdLinearFeature& f : ds.features) {
                auto it = by_key.find({f.cell_id, f.cycle});
                if (it == by_key.end())
                    throw std::runtime_error(label_path + ": no label for " + f.cell_id + "/" +
                                             std::to_string(f.cycle));
                // CSV stores only the percentage; reconstruct a consistent pair.
                ds.labels.push_back({it->second, it->second, 100.0});
            }
        }
    }
    return ds;
}

}  // namespace bttt::features
