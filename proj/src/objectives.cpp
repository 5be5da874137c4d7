#include "flowforge/objectives.hpp"

#include <cmath>
#include <stdexcept>

namespace flowforge {

namespace {

void check_dpo_config(const DpoConfig& c) {
    if (!(c.beta > 0.0)) throw std::invalid_argument("beta must be > 0");
    if (!(c.omega >= 1.0)) throw std::invalid_argument("omega must be >= 1");
    if (!(c.lambda_sft >= 0.0)) throw std::invalid_argument("lambda_sft must be >= 0");
}

double dpo_margin(const PreferencePairLosses& p, const DpoConfig& c) {
    for (double v : {p.win_policy, p.win_ref, p.lose_policy, p.lose_ref})
        if (!std::isfinite(v)) throw std::invalid_argument("non-finite pair loss");
    const double lose_diff = p.lose_policy - p.lose_ref;
    const double win_diff = p.win_policy - p.win_ref;
    return c.beta * (lose_diff - c.omega * win_diff);
}

}  // namespace

double asymmetric_dpo_loss(const PreferencePairLosses& pair, const DpoConfig& config) {
    check_dpo_config(config);
    const double z = dpo_margin(pair, config);
    const double sft = config.lambda_sft * pair.win_policy;
    return softplus(-z) + (config.flip_sft_sign ? -sft : sft);
}

DpoGrads asymmetric_dpo_grads(const PreferencePairLosses& pair, const DpoConfig& config) {
    check_dpo_config(config);
    const double z = dpo_margin(pair, config);
    const double s = logistic(-z);  // d softplus(-z) / dz = -sigmoid(-z)
    DpoGrads g;
    g.d_lose_policy = -s * config.beta;
    g.d_win_policy = s * config.beta * config.omega +
                     (config.flip_sft_sign ? -config.lambda_sft : config.lambda_sft);
    return g;
}

double nft_loss(const NftBatch& batch, const NftConfig& config) {
    if (!(config.beta_guidance > 0.0 && config.beta_guidance <= 1.0))
        throw std::invalid_argument("beta_guidance must lie in (0, 1]");
    if (batch.reward < 0.0 || batch.reward > 1.0)
        throw std::invalid_argument("reward must lie in [0, 1]");
    const size_t n = batch.v_policy.size();
    if (batch.v_old.size() != n || batch.v_target.size() != n)
        throw std::invalid_argument("velocity dimensionality mismatch");
    if (n == 0) throw std::invalid_argument("empty velocity vectors");

    const double b = config.beta_guidance;
    double pos = 0.0, neg = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double vp = (1.0 - b) * batch.v_old[i] + b * batch.v_policy[i];
        const double vn = (1.0 + b) * batch.v_old[i] - b * batch.v_policy[i];
        const double dp = vp - batch.v_target[i];
        const double dn = vn - batch.v_target[i];
        pos += dp * dp;
        neg += dn * dn;
    }
    const double inv = 1.0 / static_cast<double>(n);
    return batch.reward * pos * inv + (1.0 - batch.reward) * neg * inv;
}

std::vector<double> nft_loss_grad(const NftBatch& batch, const NftConfig& config) {
    const size_t n = batch.v_policy.size();
    if (batch.v_old.size() != n || batch.v_target.size() != n)
        throw std::invalid_argument("velocity dimensionality mismatch");
    const double b = config.beta_guidance;
    const double inv = 2.0 / static_cast<double>(n);
    std::vector<double> grad(n);
    for (size_t i = 0; i < n; ++i) {
        const double vp = (1.0 - b) * batch.v_old[i] + b * batch.v_policy[i];
        const double vn = (1.0 + b) * batch.v_old[i] - b * batch.v_policy[i];
        grad[i] = inv * (batch.reward * (vp - batch.v_target[i]) * b -
                         (1.0 - batch.reward) * (vn - batch.v_target[i]) * b);
    }
    return grad;
}

std::vector<double> one_step_denoise(std::span<const double> x_t, double sigma_t,
                                     std::span<const double> v_t) {
    if (x_t.size() != v_t.size()) throw std::invalid_argument("state/velocity shape mismatch");
    std::vector<double> out(x_t.size());
    for (size_t i = 0; i < x_t.size(); ++i) out[i] = x_t[i] - sigma_t * v_t[i];
    return out;
}

double identity_weight(double sigma, const ConsistencyConfig& config) {
    if (!(config.eta >= 0.0)) throw std::invalid_argument("eta must be >= 0");
    if (!(config.sigma_cutoff > 0.0 && config.sigma_cutoff <= 1.0))
        throw std::invalid_argument("sigma_cutoff must lie in (0, 1]");
    if (sigma < config.sigma_cutoff) return config.eta * sigma * sigma;
    return 0.0;
}

double identity_loss(std::span<const double> x_hat, std::span<const double> x_gt,
                     const RoiExtraction& roi) {
    if (x_hat.size() != x_gt.size()) throw std::invalid_argument("state shape mismatch");
    if (roi.transforms.empty()) throw std::invalid_argument("identity loss requires at least one region");
    if (!roi.encoder) throw std::invalid_argument("identity loss requires an encoder");

    auto gather = [](std::span<const double> x, const std::vector<size_t>& idx) {
        std::vector<double> region(idx.size());
        for (size_t i = 0; i < idx.size(); ++i) {
            if (idx[i] >= x.size()) throw std::invalid_argument("region index out of range");
            region[i] = x[idx[i]];
        }
        return region;
    };

    double sum = 0.0;
    for (const auto& region : roi.transforms) {
        const std::vector<double> ea = roi.encoder(gather(x_hat, region));
        const std::vector<double> eb = roi.encoder(gather(x_gt, region));
        if (ea.size() != eb.size()) throw std::invalid_argument("encoder output size mismatch");
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (size_t i = 0; i < ea.size(); ++i) {
            dot += ea[i] * eb[i];
            na += ea[i] * ea[i];
            nb += eb[i] * eb[i];
        }
        if (!(na > 0.0) || !(nb > 0.0)) throw DataError("identity loss: zero-norm embedding");
        sum += 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
    }
    return sum / static_cast<double>(roi.transforms.size());
}

double total_loss(double mse, double sigma, double id_loss, const ConsistencyConfig& config) {
    if (!(mse >= 0.0) || !(id_loss >= 0.0))
        throw std::invalid_argument("loss terms must be non-negative");
    return mse + identity_weight(sigma, config) * id_loss;
}

}  // namespace flowforge
