#include "flowforge/timesteps.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace flowforge {

namespace {

void check_config(const StratifiedConfig& config) {
    if (config.world_size < 1) throw std::invalid_argument("world_size must be >= 1");
    if (config.rotation_period < 1) throw std::invalid_argument("rotation_period must be >= 1");
}

std::vector<int> base_permutation(const StratifiedConfig& config) {
    std::vector<int> perm(static_cast<size_t>(config.world_size));
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(mix_seed(config.seed, 0x737472617461ULL));
    rng.shuffle(perm);
    return perm;
}

}  // namespace

std::vector<Interval> intervals(int world_size) {
    if (world_size < 1) throw std::invalid_argument("world_size must be >= 1");
    std::vector<Interval> out(static_cast<size_t>(world_size));
    const double k = static_cast<double>(world_size);
    for (int i = 0; i < world_size; ++i)
        out[static_cast<size_t>(i)] = Interval{i / k, (i + 1) / k};
    return out;
}

std::vector<int> rotation_permutation(const StratifiedConfig& config, long long step) {
    check_config(config);
    if (step < 0) throw std::invalid_argument("step must be >= 0");
    const long long epoch = step / config.rotation_period;
    const int k = config.world_size;
    const int offset = static_cast<int>(epoch % k);
    const std::vector<int> base = base_permutation(config);
    std::vector<int> perm(static_cast<size_t>(k));
    for (int rank = 0; rank < k; ++rank)
        perm[static_cast<size_t>(rank)] = base[static_cast<size_t>((rank + offset) % k)];
    return perm;
}

namespace {

double place_in_interval(const Interval& iv, double u) {
    double t = iv.lo + u * (iv.hi - iv.lo);
    if (t >= iv.hi) t = std::nextafter(iv.hi, iv.lo);  // keep the half-open contract
    if (t < iv.lo) t = iv.lo;
    return t;
}

}  // namespace

double draw_timestep(const StratifiedConfig& config, int rank, long long step, Rng& rng) {
    check_config(config);
    if (rank < 0 || rank >= config.world_size) throw std::invalid_argument("rank out of range");
    const int interval_index = rotation_permutation(config, step)[static_cast<size_t>(rank)];
    const Interval iv = intervals(config.world_size)[static_cast<size_t>(interval_index)];
    return place_in_interval(iv, rng.next_double());
}

double draw_timestep(const StratifiedConfig& config, const CurriculumSchedule& schedule,
                     int rank, long long step, Rng& rng) {
    check_config(config);
    if (rank < 0 || rank >= config.world_size) throw std::invalid_argument("rank out of range");
    const int interval_index = rotation_permutation(config, step)[static_cast<size_t>(rank)];
    const Interval iv = intervals(config.world_size)[static_cast<size_t>(interval_index)];
    const double a = curriculum_exponent(schedule, std::min(step, schedule.total_steps));
    const double u = std::pow(rng.next_double(), 1.0 / a);
    return place_in_interval(iv, u);
}

double curriculum_exponent(const CurriculumSchedule& schedule, long long step) {
    if (schedule.bias_exponent_start < 1.0)
        throw std::invalid_argument("bias_exponent_start must be >= 1");
    if (schedule.total_steps <= 0) return 1.0;
    const double frac = std::clamp(static_cast<double>(step) / static_cast<double>(schedule.total_steps), 0.0, 1.0);
    return schedule.bias_exponent_start + (1.0 - schedule.bias_exponent_start) * frac;
}

double curriculum_draw(const CurriculumSchedule& schedule, long long step, Rng& rng) {
    if (step < 0 || (schedule.total_steps > 0 && step > schedule.total_steps))
        throw std::invalid_argument("step outside [0, total_steps]");
    const double a = curriculum_exponent(schedule, step);
    double t = std::pow(rng.next_double(), 1.0 / a);
    if (t >= 1.0) t = std::nextafter(1.0, 0.0);
    return t;
}

double logit_normal_weight(double t, const WeightConfig& config) {
    if (!(config.scale > 0.0)) throw std::invalid_argument("scale must be > 0");
    if (!(config.clamp_eps > 0.0 && config.clamp_eps < 0.5))
        throw std::invalid_argument("clamp_eps must lie in (0, 0.5)");
    const double tc = std::clamp(t, config.clamp_eps, 1.0 - config.clamp_eps);
    const double z = std::log(tc / (1.0 - tc));
    const double dev = (z - config.loc) / config.scale;
    constexpr double sqrt_2pi = 2.5066282746310005024;
    return std::exp(-0.5 * dev * dev) / (tc * (1.0 - tc) * config.scale * sqrt_2pi);
}

}  // namespace flowforge
