#pragma once

#include <cstdint>
#include <vector>

#include "flowforge/common.hpp"

namespace flowforge {

struct Interval {
    double lo = 0.0;
    double hi = 1.0;  // half-open [lo, hi)
};

struct StratifiedConfig {
    int world_size = 1;            // K simulated ranks
    long long rotation_period = 1; // P steps per rotation epoch
    uint64_t seed = 0;
};

// Noise-bias exponent interpolates linearly from bias_exponent_start down to
// 1 (uniform) over total_steps.
struct CurriculumSchedule {
    long long total_steps = 0;
    double bias_exponent_start = 1.0;  // a0 >= 1
};

struct WeightConfig {
    double loc = 0.0;    // m
    double scale = 1.0;  // s > 0
    double clamp_eps = 1e-5;
};

// K equidistant half-open sub-intervals covering [0,1).
std::vector<Interval> intervals(int world_size);

// Interval assignment for rotation epoch floor(step / P): a seeded base
// permutation composed with a cyclic offset by the epoch index. perm[rank]
// is the interval index. Identical (seed, step) inputs give identical
// permutations on every rank, and any K consecutive epochs assign each rank
// every interval exactly once.
std::vector<int> rotation_permutation(const StratifiedConfig& config, long long step);

// Uniform draw from the rank's currently assigned sub-interval.
double draw_timestep(const StratifiedConfig& config, int rank, long long step, Rng& rng);

// Curriculum variant: the biased transform u^(1/a) is applied to the
// within-interval position, preserving the one-draw-per-interval partition.
double draw_timestep(const StratifiedConfig& config, const CurriculumSchedule& schedule,
                     int rank, long long step, Rng& rng);

double curriculum_exponent(const CurriculumSchedule& schedule, long long step);

// t = u^(1/a(step)), biased toward high noise early, exactly uniform at the
// end of the schedule.
double curriculum_draw(const CurriculumSchedule& schedule, long long step, Rng& rng);

// Logit-normal density at t (t clamped to [eps, 1-eps]):
// exp(-(logit(t)-m)^2 / (2 s^2)) / (t (1-t) s sqrt(2 pi)).
double logit_normal_weight(double t, const WeightConfig& config);

}  // namespace flowforge
