#pragma once

#include <string>
#include <vector>

#include <json.hpp>

namespace flowforge {

// Parsed CSV with leading '#' comment lines peeled off.
struct CsvTable {
    std::vector<std::string> comments;
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const std::string& path);

// Pearson chi-squared statistic of draws in [0,1) against uniform bins.
double chi_squared_uniform(const std::vector<double>& draws, int bins);

// Critical value of the chi-squared distribution, 99 degrees of freedom at
// significance 0.01 (100-bin uniformity test).
inline constexpr double kChi2Crit99At01 = 134.6416168558;

// Summarizes training-metrics and timestep-draw CSVs: final losses, reward
// means, pooled chi-squared uniformity, per-step partition validity, and the
// config hash each file was produced under.
nlohmann::json build_report(const std::vector<std::string>& metrics_paths);

// Writes summary.json and summary.csv under out_dir.
void write_report(const nlohmann::json& report, const std::string& out_dir);

}  // namespace flowforge
