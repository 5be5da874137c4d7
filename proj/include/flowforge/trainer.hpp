#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flowforge/objectives.hpp"
#include "flowforge/timesteps.hpp"

namespace flowforge {

// ---------------------------------------------------------------------------
// Velocity model: fixed two-hidden-layer perceptron with tanh activations.
// Input is the state concatenated with the timestep channel.
// ---------------------------------------------------------------------------

struct MlpDims {
    int data_dim = 2;
    int hidden = 64;
    int input_dim() const { return data_dim + 1; }
    int param_count() const {
        return hidden * input_dim() + hidden + hidden * hidden + hidden + data_dim * hidden + data_dim;
    }
};

struct ParameterVector {
    std::vector<double> values;
};

ParameterVector init_params(const MlpDims& dims, uint64_t seed);

// Scratch buffers reused across forward/backward calls.
struct MlpWorkspace {
    std::vector<double> input, z1, a1, z2, a2;
    mutable std::vector<double> d1, d2;  // backward scratch
};

// v = W3 tanh(W2 tanh(W1 [x; t] + b1) + b2) + b3, written into v_out.
void forward_velocity(const MlpDims& dims, std::span<const double> params,
                      std::span<const double> x, double t, MlpWorkspace& ws,
                      std::span<double> v_out);

std::vector<double> forward_velocity(const MlpDims& dims, const ParameterVector& params,
                                     std::span<const double> x, double t);

// Reverse pass for the activations cached in ws by the last forward call;
// accumulates parameter gradients into grad (same layout as params).
void backward_velocity(const MlpDims& dims, std::span<const double> params,
                       const MlpWorkspace& ws, std::span<const double> d_v,
                       std::span<double> grad);

// ---------------------------------------------------------------------------
// Optimizer and weight averaging
// ---------------------------------------------------------------------------

// Clips grad to the given global L2 norm in place; returns the pre-clip norm.
double clip_global_norm(std::vector<double>& grad, double max_norm);

struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    std::vector<double> m, v;
    long long steps = 0;

    // Bias-corrected moment update with decoupled weight decay.
    void step(std::vector<double>& params, const std::vector<double>& grad, double lr);
};

enum class EmaMode { constant_decay, running_mean };

struct EmaState {
    EmaMode mode = EmaMode::constant_decay;
    double decay = 0.999;  // constant_decay mode only
    long long updates_seen = 0;
    std::vector<double> shadow;
    std::vector<double> running_sum;  // running_mean mode keeps the exact sum

    static EmaState constant(double decay, std::span<const double> initial_shadow);
    static EmaState running(size_t size);
};

// constant_decay: shadow <- d * shadow + (1-d) * params.
// running_mean:   shadow <- (sum of all params seen) / count.
void ema_update(EmaState& state, std::span<const double> params);

// ---------------------------------------------------------------------------
// Synthetic data and toy reward
// ---------------------------------------------------------------------------

struct SyntheticConfig {
    int modes = 8;        // >= 2 so preference stages are non-degenerate
    double radius = 4.0;  // mode centers on a circle, offset so none sit on x = 0
    double noise = 0.1;   // per-mode standard deviation
    int count = 8192;
    uint64_t seed = 1;
};

struct SyntheticDataset {
    SyntheticConfig config;
    std::vector<std::array<double, 2>> centers;  // one per mode
    std::vector<std::array<double, 2>> points;
    std::vector<int> labels;  // mode index per point
};

SyntheticDataset make_dataset(const SyntheticConfig& config);

// Labeled mode set defining the preferred region for DPO/NFT stages.
struct TargetRegion {
    std::vector<std::array<double, 2>> target_centers;
    std::vector<std::array<double, 2>> other_centers;
    double logistic_scale = 2.0;
};

TargetRegion make_target_region(const SyntheticDataset& dataset,
                                const std::vector<int>& target_modes, double logistic_scale);

// Logistic of the signed distance to the region boundary (half the gap
// between the nearest non-target and nearest target center): near 1 deep
// inside the region, 0.5 on the boundary, near 0 far outside.
double nft_reward_fn(std::span<const double> sample, const TargetRegion& region);

// Fraction of samples whose nearest mode center belongs to the target set.
double target_fraction(const std::vector<std::array<double, 2>>& samples,
                       const TargetRegion& region);

// ---------------------------------------------------------------------------
// Objective evaluation (loss + parameter gradient per batch)
// ---------------------------------------------------------------------------

// Frozen random linear map standing in for the identity-embedding backbone.
struct LinearEncoder {
    int in_dim = 0;
    int out_dim = 0;
    std::vector<double> weights;  // row-major out_dim x in_dim
    std::vector<double> apply(std::span<const double> x) const;
};

LinearEncoder make_random_linear_encoder(int in_dim, int out_dim, uint64_t seed);

struct FlowItem {
    std::vector<double> x0;   // clean sample (also the identity ground truth)
    std::vector<double> eps;  // noise draw
    double t = 0.0;           // timestep = noise level sigma
    double weight = 1.0;      // per-sample loss weight
};

struct ConsistencyPath {
    ConsistencyConfig config;
    std::vector<std::vector<size_t>> regions;
    LinearEncoder encoder;
};

struct FlowEval {
    double objective = 0.0;  // mean weighted total loss over the batch
    double flow_loss = 0.0;  // mean unweighted flow-matching error
    double id_loss = 0.0;    // mean identity loss (0 when path inactive)
};

// Flow-matching objective sum_i w_i * (|v - v_target|^2 + lambda_id(t) * L_id) / B
// under x_t = (1-t) x0 + t eps, v_target = eps - x0. Fills grad when non-null.
FlowEval eval_flow_objective(const MlpDims& dims, std::span<const double> params,
                             const std::vector<FlowItem>& items,
                             const ConsistencyPath* consistency, std::vector<double>* grad);

struct PairItem {
    std::vector<double> x_win;
    std::vector<double> x_lose;
    std::vector<double> eps;  // shared noise for both members
    double t = 0.0;           // shared timestep
};

struct DpoEval {
    double objective = 0.0;
    double win_policy_loss = 0.0;  // mean L_w under the policy
};

DpoEval eval_dpo_objective(const MlpDims& dims, std::span<const double> policy,
                           std::span<const double> reference, const std::vector<PairItem>& items,
                           const DpoConfig& config, std::vector<double>* grad);

struct NftItem {
    std::vector<double> x0;  // sample drawn from the frozen snapshot policy
    std::vector<double> eps;
    double t = 0.0;
    double reward = 0.0;
};

struct NftEval {
    double objective = 0.0;
    double flow_loss = 0.0;    // mean |v_policy - v_target|^2
    double reward_mean = 0.0;
};

NftEval eval_nft_objective(const MlpDims& dims, std::span<const double> policy,
                           std::span<const double> old_params, const std::vector<NftItem>& items,
                           const NftConfig& config, std::vector<double>* grad);

// ---------------------------------------------------------------------------
// Stage loop
// ---------------------------------------------------------------------------

enum class Stage { pretrain, sft, dpo, nft };

const char* stage_name(Stage s);
Stage stage_from_name(const std::string& name);

struct TrainConfig {
    Stage stage = Stage::pretrain;
    long long steps = 0;
    long long warmup_steps = 0;
    double learning_rate = 1e-3;
    int batch_size = 64;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double grad_clip = 1.0;
    double weight_decay = 0.01;
    uint64_t seed = 0;

    int world_size = 1;
    long long rotation_period = 16;

    bool logit_normal_weighting = true;
    WeightConfig weight;

    double curriculum_start = 3.0;  // pretrain only; 1 disables the bias

    ConsistencyConfig consistency;  // active when eta > 0
    int encoder_dim = 8;
    uint64_t encoder_seed = 7;

    DpoConfig dpo;
    NftConfig nft;
    long long nft_refresh_interval = 0;  // 0: snapshot at stage start only
    int nft_sample_steps = 16;           // Euler steps when sampling from the snapshot

    std::vector<int> target_modes = {0, 1, 6, 7};  // preferred modes (right half)
    double reward_scale = 2.0;

    EmaMode ema_mode = EmaMode::constant_decay;
    double ema_decay = 0.999;
};

struct MetricsRow {
    long long step = 0;
    std::string stage;
    double loss = 0.0;
    double flow_loss = 0.0;
    double id_loss = 0.0;
    double reward_mean = 0.0;
    bool has_reward = false;
    double t_mean = 0.0;
    double t_min = 0.0;
    double t_max = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
};

struct StageResult {
    ParameterVector params;
    EmaState ema;
    std::vector<MetricsRow> log;
};

// Raised when the stage loss turns non-finite; carries the failing step.
class TrainDivergence : public std::runtime_error {
public:
    TrainDivergence(long long step, const std::string& what)
        : std::runtime_error(what), step_(step) {}
    long long step() const { return step_; }

private:
    long long step_;
};

// Runs one stage. dpo uses `reference` as the frozen reference policy and
// nft as the initial frozen snapshot; both default to the initial parameters
// when null.
StageResult train_stage(const TrainConfig& config, const MlpDims& dims,
                        const SyntheticDataset& dataset, const ParameterVector& initial,
                        const ParameterVector* reference);

// Integrates dx = v dt from sigma = 1 (standard normal) down to 0 with
// n_steps uniform Euler steps.
std::vector<std::array<double, 2>> euler_sample(const MlpDims& dims, const ParameterVector& params,
                                                int n_samples, int n_steps, uint64_t seed);

// ---------------------------------------------------------------------------
// Checkpoints: flat little-endian float64 arrays plus a JSON sidecar.
// ---------------------------------------------------------------------------

struct Checkpoint {
    MlpDims dims;
    ParameterVector params;
    EmaState ema;
    std::string config_hash;
};

void save_checkpoint(const std::string& dir, const MlpDims& dims, const ParameterVector& params,
                     const EmaState& ema, const std::string& config_hash);
Checkpoint load_checkpoint(const std::string& dir);

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows,
                       const std::string& config_hash);
void write_samples_csv(const std::string& path, const std::vector<std::array<double, 2>>& samples);

}  // namespace flowforge
