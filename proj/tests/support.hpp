#pragma once

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "flowforge/common.hpp"

namespace testsupport {

// Kolmogorov distance between the empirical CDF of draws and uniform [0,1).
inline double ks_distance_uniform(std::vector<double> draws) {
    std::sort(draws.begin(), draws.end());
    const double n = static_cast<double>(draws.size());
    double dist = 0.0;
    for (size_t i = 0; i < draws.size(); ++i) {
        const double hi = static_cast<double>(i + 1) / n - draws[i];
        const double lo = draws[i] - static_cast<double>(i) / n;
        dist = std::max({dist, hi, lo});
    }
    return dist;
}

// Central finite difference of a scalar function in one coordinate.
inline double central_difference(const std::function<double(double)>& f, double x, double h) {
    return (f(x + h) - f(x - h)) / (2.0 * h);
}

inline double rel_error(double got, double want) {
    const double denom = std::max(std::abs(want), 1e-12);
    return std::abs(got - want) / denom;
}

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = (std::filesystem::temp_directory_path() /
                 ("flowforge_" + tag + "_" + std::to_string(::getpid())))
                    .string();
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    const std::string& path() const { return path_; }
    std::string file(const std::string& name) const { return path_ + "/" + name; }

private:
    std::string path_;
};

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << content;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace testsupport
