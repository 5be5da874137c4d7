#include "flowforge/report.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "flowforge/common.hpp"

namespace flowforge {

using nlohmann::json;

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

double parse_double(const std::string& s, const std::string& where) {
    try {
        size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw DataError(where + ": not a number: \"" + s + "\"");
    }
}

size_t column(const CsvTable& t, const std::string& name, const std::string& path) {
    auto it = std::find(t.header.begin(), t.header.end(), name);
    if (it == t.header.end()) throw DataError(path + ": missing column \"" + name + "\"");
    return static_cast<size_t>(it - t.header.begin());
}

std::string comment_value(const CsvTable& t, const std::string& key) {
    const std::string prefix = "# " + key + "=";
    for (const auto& c : t.comments)
        if (c.rfind(prefix, 0) == 0) return c.substr(prefix.size());
    return "";
}

}  // namespace

CsvTable read_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open metrics file: " + path);
    CsvTable t;
    std::string line;
    bool have_header = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            t.comments.push_back(line);
            continue;
        }
        if (!have_header) {
            t.header = split_csv_line(line);
            have_header = true;
        } else {
            auto fields = split_csv_line(line);
            if (fields.size() != t.header.size())
                throw DataError(path + ": row with " + std::to_string(fields.size()) + " fields, expected " +
                                std::to_string(t.header.size()));
            t.rows.push_back(std::move(fields));
        }
    }
    return t;
}

double chi_squared_uniform(const std::vector<double>& draws, int bins) {
    if (bins < 1) throw std::invalid_argument("bins must be >= 1");
    if (draws.empty()) return 0.0;
    std::vector<long long> counts(static_cast<size_t>(bins), 0);
    for (double t : draws) {
        if (t < 0.0 || t >= 1.0) throw std::invalid_argument("draw outside [0,1)");
        const int b = std::min(bins - 1, static_cast<int>(t * bins));
        ++counts[static_cast<size_t>(b)];
    }
    const double expected = static_cast<double>(draws.size()) / bins;
    double stat = 0.0;
    for (long long c : counts) {
        const double diff = static_cast<double>(c) - expected;
        stat += diff * diff / expected;
    }
    return stat;
}

namespace {

json summarize_train(const CsvTable& t, const std::string& path) {
    json entry;
    entry["kind"] = "train";
    entry["rows"] = t.rows.size();
    entry["config_hash"] = comment_value(t, "config_hash");
    if (t.rows.empty()) return entry;

    const size_t c_stage = column(t, "stage", path);
    const size_t c_loss = column(t, "loss", path);
    const size_t c_flow = column(t, "flow_loss", path);
    const size_t c_reward = column(t, "reward_mean", path);

    entry["stage"] = t.rows.back()[c_stage];
    entry["final_loss"] = parse_double(t.rows.back()[c_loss], path);
    entry["final_flow_loss"] = parse_double(t.rows.back()[c_flow], path);

    bool finite = true;
    double reward_sum = 0.0;
    size_t reward_count = 0;
    for (const auto& row : t.rows) {
        if (!std::isfinite(parse_double(row[c_loss], path))) finite = false;
        if (!row[c_reward].empty()) {
            reward_sum += parse_double(row[c_reward], path);
            ++reward_count;
        }
    }
    entry["finite_losses"] = finite;
    if (reward_count > 0) entry["reward_mean"] = reward_sum / static_cast<double>(reward_count);
    return entry;
}

json summarize_timesteps(const CsvTable& t, const std::string& path) {
    json entry;
    entry["kind"] = "timesteps";
    entry["rows"] = t.rows.size();
    entry["config_hash"] = comment_value(t, "config_hash");
    if (t.rows.empty()) return entry;

    const size_t c_step = column(t, "step", path);
    const size_t c_rank = column(t, "rank", path);
    const size_t c_interval = column(t, "interval", path);
    const size_t c_t = column(t, "t", path);

    std::set<long long> ranks;
    std::vector<double> draws;
    std::map<long long, std::set<long long>> intervals_per_step;
    draws.reserve(t.rows.size());
    for (const auto& row : t.rows) {
        const long long step = static_cast<long long>(parse_double(row[c_step], path));
        const long long rank = static_cast<long long>(parse_double(row[c_rank], path));
        const long long interval = static_cast<long long>(parse_double(row[c_interval], path));
        ranks.insert(rank);
        intervals_per_step[step].insert(interval);
        draws.push_back(parse_double(row[c_t], path));
    }
    const size_t world = ranks.size();
    bool partition_ok = true;
    for (const auto& [step, ivs] : intervals_per_step) {
        (void)step;
        if (ivs.size() != world) partition_ok = false;
    }
    const double chi2 = chi_squared_uniform(draws, 100);
    entry["world_size"] = world;
    entry["partition_ok"] = partition_ok;
    entry["chi2_statistic"] = chi2;
    entry["chi2_bins"] = 100;
    entry["chi2_pass"] = chi2 < kChi2Crit99At01;
    return entry;
}

}  // namespace

json build_report(const std::vector<std::string>& metrics_paths) {
    json report;
    report["runs"] = json::array();
    size_t train_runs = 0, timestep_runs = 0;
    for (const auto& path : metrics_paths) {
        const CsvTable t = read_csv(path);
        json entry;
        const bool is_timesteps =
            std::find(t.header.begin(), t.header.end(), "interval") != t.header.end();
        if (t.header.empty()) {
            entry["kind"] = "empty";
            entry["rows"] = 0;
            entry["config_hash"] = comment_value(t, "config_hash");
        } else if (is_timesteps) {
            entry = summarize_timesteps(t, path);
            ++timestep_runs;
        } else {
            entry = summarize_train(t, path);
            ++train_runs;
        }
        entry["path"] = path;
        report["runs"].push_back(std::move(entry));
    }
    report["counts"] = {{"total", metrics_paths.size()},
                        {"train_runs", train_runs},
                        {"timestep_runs", timestep_runs}};
    return report;
}

void write_report(const json& report, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    {
        std::ofstream out(out_dir + "/summary.json", std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write " + out_dir + "/summary.json");
        out << report.dump(2) << "\n";
    }
    std::ofstream out(out_dir + "/summary.csv", std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + out_dir + "/summary.csv");
    out << "path,kind,rows,stage,config_hash,final_loss,final_flow_loss,reward_mean,chi2_statistic,chi2_pass,"
           "partition_ok,finite_losses\n";
    for (const auto& run : report.at("runs")) {
        auto field = [&](const char* key) -> std::string {
            if (!run.contains(key)) return "";
            const auto& v = run.at(key);
            if (v.is_string()) return v.get<std::string>();
            if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
            if (v.is_number_integer()) return std::to_string(v.get<long long>());
            if (v.is_number()) return fmt_g17(v.get<double>());
            return "";
        };
        out << field("path") << ',' << field("kind") << ',' << field("rows") << ',' << field("stage") << ','
            << field("config_hash") << ',' << field("final_loss") << ',' << field("final_flow_loss") << ','
            << field("reward_mean") << ',' << field("chi2_statistic") << ',' << field("chi2_pass") << ','
            << field("partition_ok") << ',' << field("finite_losses") << "\n";
    }
}

}  // namespace flowforge
