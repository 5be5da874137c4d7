#pragma once

#include <functional>
#include <span>
#include <vector>

#include "flowforge/common.hpp"

namespace flowforge {

struct DpoConfig {
    double beta = 1.0;        // preference temperature, > 0
    double omega = 1.0;       // win-diff amplifier, >= 1
    double lambda_sft = 0.0;  // SFT regularizer on the win sample, >= 0
    // Off by default: subtracts the SFT term instead of adding it, the
    // alternative reading of the published sign convention.
    bool flip_sft_sign = false;
};

struct PreferencePairLosses {
    double win_policy = 0.0;  // L_w under the trained policy
    double win_ref = 0.0;     // L_w under the frozen reference
    double lose_policy = 0.0;
    double lose_ref = 0.0;
};

struct NftConfig {
    double beta_guidance = 1.0;  // in (0, 1]
};

struct NftBatch {
    std::vector<double> v_policy;  // current policy velocity
    std::vector<double> v_old;     // frozen snapshot velocity
    std::vector<double> v_target;  // flow-matching target velocity
    double reward = 0.0;           // optimality probability r in [0,1]
};

struct ConsistencyConfig {
    double eta = 0.0;           // identity-loss scale, >= 0
    double sigma_cutoff = 0.9;  // weight is zero at and above this noise level
};

// Region selectors plus a pluggable embedding. Each transform is an index
// subset derived from the ground truth and applied identically to both the
// prediction and the ground truth.
struct RoiExtraction {
    std::vector<std::vector<size_t>> transforms;
    std::function<std::vector<double>(std::span<const double>)> encoder;
};

// -log sigmoid(beta * [(lose diff) - omega * (win diff)]) + lambda * L_w^theta,
// evaluated through the softplus identity for stability.
double asymmetric_dpo_loss(const PreferencePairLosses& pair, const DpoConfig& config);

// Analytic partials of the loss with respect to the policy-side pair losses.
struct DpoGrads {
    double d_win_policy = 0.0;
    double d_lose_policy = 0.0;
};
DpoGrads asymmetric_dpo_grads(const PreferencePairLosses& pair, const DpoConfig& config);

// r * |v+ - v|^2 + (1-r) * |v- - v|^2 with the implicit policies
// v+ = (1-b) v_old + b v_policy and v- = (1+b) v_old - b v_policy.
// |.|^2 is the mean square over entries.
double nft_loss(const NftBatch& batch, const NftConfig& config);

// Analytic d loss / d v_policy, matching nft_loss.
std::vector<double> nft_loss_grad(const NftBatch& batch, const NftConfig& config);

// x_hat0 = x_t - sigma_t * v_t.
std::vector<double> one_step_denoise(std::span<const double> x_t, double sigma_t,
                                     std::span<const double> v_t);

// eta * sigma^2 below the cutoff, zero at and above it (strict inequality).
double identity_weight(double sigma, const ConsistencyConfig& config);

// Mean cosine distance between encoded regions of prediction and ground
// truth; lies in [0, 2]. Throws on a zero-norm embedding.
double identity_loss(std::span<const double> x_hat, std::span<const double> x_gt,
                     const RoiExtraction& roi);

// mse + identity_weight(sigma) * id_loss.
double total_loss(double mse, double sigma, double id_loss, const ConsistencyConfig& config);

}  // namespace flowforge
