#include "flowforge/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace flowforge {

namespace {

constexpr double kPi = 3.14159265358979323846;

struct ParamView {
    std::span<const double> w1, b1, w2, b2, w3, b3;
};
struct MutParamView {
    std::span<double> w1, b1, w2, b2, w3, b3;
};

template <typename Span, typename View>
View make_view(Span params, const MlpDims& d) {
    const size_t in = static_cast<size_t>(d.input_dim());
    const size_t h = static_cast<size_t>(d.hidden);
    const size_t out = static_cast<size_t>(d.data_dim);
    size_t off = 0;
    auto take = [&](size_t n) {
        auto s = params.subspan(off, n);
        off += n;
        return s;
    };
    View v{take(h * in), take(h), take(h * h), take(h), take(out * h), take(out)};
    return v;
}

void check_params(const MlpDims& dims, std::span<const double> params) {
    if (params.size() != static_cast<size_t>(dims.param_count()))
        throw std::invalid_argument("parameter vector length mismatch");
}

}  // namespace

ParameterVector init_params(const MlpDims& dims, uint64_t seed) {
    Rng rng(mix_seed(seed, 0x1417ULL));
    ParameterVector p;
    p.values.assign(static_cast<size_t>(dims.param_count()), 0.0);
    auto v = make_view<std::span<double>, MutParamView>(std::span<double>(p.values), dims);
    auto fill = [&](std::span<double> w, int fan_in) {
        const double scale = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (double& x : w) x = rng.next_gauss() * scale;
    };
    fill(v.w1, dims.input_dim());
    fill(v.w2, dims.hidden);
    fill(v.w3, dims.hidden);
    // biases start at zero
    return p;
}

void forward_velocity(const MlpDims& dims, std::span<const double> params,
                      std::span<const double> x, double t, MlpWorkspace& ws,
                      std::span<double> v_out) {
    check_params(dims, params);
    if (x.size() != static_cast<size_t>(dims.data_dim)) throw std::invalid_argument("state size mismatch");
    if (v_out.size() != static_cast<size_t>(dims.data_dim)) throw std::invalid_argument("output size mismatch");
    const size_t in = static_cast<size_t>(dims.input_dim());
    const size_t h = static_cast<size_t>(dims.hidden);
    const size_t out = static_cast<size_t>(dims.data_dim);
    auto p = make_view<std::span<const double>, ParamView>(params, dims);

    ws.input.resize(in);
    std::copy(x.begin(), x.end(), ws.input.begin());
    ws.input[in - 1] = t;
    ws.z1.resize(h);
    ws.a1.resize(h);
    ws.z2.resize(h);
    ws.a2.resize(h);

    for (size_t i = 0; i < h; ++i) {
        double acc = p.b1[i];
        const double* row = &p.w1[i * in];
        for (size_t j = 0; j < in; ++j) acc += row[j] * ws.input[j];
        ws.z1[i] = acc;
        ws.a1[i] = std::tanh(acc);
    }
    for (size_t i = 0; i < h; ++i) {
        double acc = p.b2[i];
        const double* row = &p.w2[i * h];
        for (size_t j = 0; j < h; ++j) acc += row[j] * ws.a1[j];
        ws.z2[i] = acc;
        ws.a2[i] = std::tanh(acc);
    }
    for (size_t i = 0; i < out; ++i) {
        double acc = p.b3[i];
        const double* row = &p.w3[i * h];
        for (size_t j = 0; j < h; ++j) acc += row[j] * ws.a2[j];
        if (!std::isfinite(acc)) throw std::runtime_error("non-finite velocity output");
        v_out[i] = acc;
    }
}

std::vector<double> forward_velocity(const MlpDims& dims, const ParameterVector& params,
                                     std::span<const double> x, double t) {
    MlpWorkspace ws;
    std::vector<double> v(static_cast<size_t>(dims.data_dim));
    forward_velocity(dims, params.values, x, t, ws, v);
    return v;
}

void backward_velocity(const MlpDims& dims, std::span<const double> params,
                       const MlpWorkspace& ws, std::span<const double> d_v,
                       std::span<double> grad) {
    check_params(dims, params);
    if (grad.size() != params.size()) throw std::invalid_argument("gradient size mismatch");
    const size_t in = static_cast<size_t>(dims.input_dim());
    const size_t h = static_cast<size_t>(dims.hidden);
    const size_t out = static_cast<size_t>(dims.data_dim);
    auto p = make_view<std::span<const double>, ParamView>(params, dims);
    auto g = make_view<std::span<double>, MutParamView>(grad, dims);

    auto& d2 = ws.d2;
    auto& d1 = ws.d1;
    d2.assign(h, 0.0);
    d1.assign(h, 0.0);

    for (size_t i = 0; i < out; ++i) {
        const double dv = d_v[i];
        double* wrow = &g.w3[i * h];
        const double* prow = &p.w3[i * h];
        for (size_t j = 0; j < h; ++j) {
            wrow[j] += dv * ws.a2[j];
            d2[j] += dv * prow[j];
        }
        g.b3[i] += dv;
    }
    for (size_t i = 0; i < h; ++i) d2[i] *= 1.0 - ws.a2[i] * ws.a2[i];
    for (size_t i = 0; i < h; ++i) {
        const double dz = d2[i];
        double* wrow = &g.w2[i * h];
        const double* prow = &p.w2[i * h];
        for (size_t j = 0; j < h; ++j) {
            wrow[j] += dz * ws.a1[j];
            d1[j] += dz * prow[j];
        }
        g.b2[i] += dz;
    }
    for (size_t i = 0; i < h; ++i) d1[i] *= 1.0 - ws.a1[i] * ws.a1[i];
    for (size_t i = 0; i < h; ++i) {
        const double dz = d1[i];
        double* wrow = &g.w1[i * in];
        for (size_t j = 0; j < in; ++j) wrow[j] += dz * ws.input[j];
        g.b1[i] += dz;
    }
}

double clip_global_norm(std::vector<double>& grad, double max_norm) {
    double sq = 0.0;
    for (double gv : grad) sq += gv * gv;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (double& gv : grad) gv *= scale;
    }
    return norm;
}

void AdamW::step(std::vector<double>& params, const std::vector<double>& grad, double lr) {
    if (m.empty()) {
        m.assign(params.size(), 0.0);
        v.assign(params.size(), 0.0);
    }
    if (params.size() != grad.size() || params.size() != m.size())
        throw std::invalid_argument("optimizer size mismatch");
    ++steps;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
    for (size_t i = 0; i < params.size(); ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        params[i] -= lr * (m_hat / (std::sqrt(v_hat) + eps) + weight_decay * params[i]);
    }
}

EmaState EmaState::constant(double decay, std::span<const double> initial_shadow) {
    EmaState s;
    s.mode = EmaMode::constant_decay;
    s.decay = decay;
    s.shadow.assign(initial_shadow.begin(), initial_shadow.end());
    return s;
}

EmaState EmaState::running(size_t size) {
    EmaState s;
    s.mode = EmaMode::running_mean;
    s.decay = 0.0;
    s.shadow.assign(size, 0.0);
    s.running_sum.assign(size, 0.0);
    return s;
}

void ema_update(EmaState& state, std::span<const double> params) {
    if (state.shadow.size() != params.size())
        throw std::invalid_argument("EMA shadow length mismatch");
    if (state.mode == EmaMode::constant_decay) {
        if (state.decay < 0.0 || state.decay > 1.0)
            throw std::invalid_argument("decay must lie in [0,1]");
        const double d = state.decay;
        for (size_t i = 0; i < params.size(); ++i)
            state.shadow[i] = d * state.shadow[i] + (1.0 - d) * params[i];
    } else {
        // Cumulative sum keeps the shadow equal to the arithmetic mean exactly.
        if (state.running_sum.size() != params.size())
            state.running_sum.assign(params.size(), 0.0);
        const double count = static_cast<double>(state.updates_seen + 1);
        for (size_t i = 0; i < params.size(); ++i) {
            state.running_sum[i] += params[i];
            state.shadow[i] = state.running_sum[i] / count;
        }
    }
    ++state.updates_seen;
}

SyntheticDataset make_dataset(const SyntheticConfig& config) {
    if (config.modes < 2) throw std::invalid_argument("dataset needs >= 2 modes");
    if (config.count < 1) throw std::invalid_argument("dataset needs >= 1 sample");
    SyntheticDataset ds;
    ds.config = config;
    // Offset by half a slot keeps every center strictly off the y axis for
    // even mode counts, so left/right preference targets are unambiguous.
    const double offset = kPi / static_cast<double>(config.modes);
    for (int k = 0; k < config.modes; ++k) {
        const double angle = 2.0 * kPi * k / config.modes + offset;
        ds.centers.push_back({config.radius * std::cos(angle), config.radius * std::sin(angle)});
    }
    Rng rng(mix_seed(config.seed, 0xDA7A5E7ULL));
    ds.points.reserve(static_cast<size_t>(config.count));
    ds.labels.reserve(static_cast<size_t>(config.count));
    for (int i = 0; i < config.count; ++i) {
        const int mode = static_cast<int>(rng.next_below(static_cast<uint64_t>(config.modes)));
        const auto& c = ds.centers[static_cast<size_t>(mode)];
        ds.points.push_back({c[0] + config.noise * rng.next_gauss(), c[1] + config.noise * rng.next_gauss()});
        ds.labels.push_back(mode);
    }
    return ds;
}

TargetRegion make_target_region(const SyntheticDataset& dataset,
                                const std::vector<int>& target_modes, double logistic_scale) {
    TargetRegion region;
    region.logistic_scale = logistic_scale;
    std::vector<char> is_target(dataset.centers.size(), 0);
    for (int m : target_modes) {
        if (m < 0 || static_cast<size_t>(m) >= dataset.centers.size())
            throw std::invalid_argument("target mode index out of range");
        is_target[static_cast<size_t>(m)] = 1;
    }
    for (size_t i = 0; i < dataset.centers.size(); ++i)
        (is_target[i] ? region.target_centers : region.other_centers).push_back(dataset.centers[i]);
    if (region.target_centers.empty() || region.other_centers.empty())
        throw std::invalid_argument("target region must split the modes non-trivially");
    return region;
}

namespace {

double nearest_distance(std::span<const double> x, const std::vector<std::array<double, 2>>& centers) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& c : centers) {
        const double dx = x[0] - c[0];
        const double dy = x[1] - c[1];
        best = std::min(best, std::sqrt(dx * dx + dy * dy));
    }
    return best;
}

}  // namespace

double nft_reward_fn(std::span<const double> sample, const TargetRegion& region) {
    const double d_target = nearest_distance(sample, region.target_centers);
    const double d_other = nearest_distance(sample, region.other_centers);
    const double signed_distance = 0.5 * (d_other - d_target);
    return logistic(region.logistic_scale * signed_distance);
}

double target_fraction(const std::vector<std::array<double, 2>>& samples, const TargetRegion& region) {
    if (samples.empty()) return 0.0;
    size_t inside = 0;
    for (const auto& s : samples)
        if (nearest_distance(std::span<const double>(s.data(), 2), region.target_centers) <
            nearest_distance(std::span<const double>(s.data(), 2), region.other_centers))
            ++inside;
    return static_cast<double>(inside) / static_cast<double>(samples.size());
}

std::vector<double> LinearEncoder::apply(std::span<const double> x) const {
    if (x.size() != static_cast<size_t>(in_dim)) throw std::invalid_argument("encoder input size mismatch");
    std::vector<double> out(static_cast<size_t>(out_dim), 0.0);
    for (int r = 0; r < out_dim; ++r) {
        const double* row = &weights[static_cast<size_t>(r) * static_cast<size_t>(in_dim)];
        double acc = 0.0;
        for (int cidx = 0; cidx < in_dim; ++cidx) acc += row[cidx] * x[static_cast<size_t>(cidx)];
        out[static_cast<size_t>(r)] = acc;
    }
    return out;
}

LinearEncoder make_random_linear_encoder(int in_dim, int out_dim, uint64_t seed) {
    if (in_dim < 1 || out_dim < 1) throw std::invalid_argument("encoder dims must be >= 1");
    LinearEncoder enc;
    enc.in_dim = in_dim;
    enc.out_dim = out_dim;
    enc.weights.resize(static_cast<size_t>(in_dim) * static_cast<size_t>(out_dim));
    Rng rng(mix_seed(seed, 0xE2C0DEULL));
    for (double& w : enc.weights) w = rng.next_gauss();
    return enc;
}

namespace {

// d(1 - cos(a,b))/da for fixed b.
std::vector<double> cosine_distance_grad_a(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na2 += a[i] * a[i];
        nb2 += b[i] * b[i];
    }
    const double na = std::sqrt(na2), nb = std::sqrt(nb2);
    if (!(na > 0.0) || !(nb > 0.0)) throw DataError("identity loss: zero-norm embedding");
    const double c = dot / (na * nb);
    std::vector<double> g(a.size());
    for (size_t i = 0; i < a.size(); ++i) g[i] = a[i] * c / na2 - b[i] / (na * nb);
    return g;
}

// Adds the identity-loss gradient with respect to x_hat (scaled by `scale`)
// into d_xhat; returns the loss value computed through the shared kernel.
double identity_term(const ConsistencyPath& path, std::span<const double> x_hat,
                     std::span<const double> x_gt, double scale, std::vector<double>* d_xhat) {
    RoiExtraction roi;
    roi.transforms = path.regions;
    roi.encoder = [&](std::span<const double> region) { return path.encoder.apply(region); };
    const double value = identity_loss(x_hat, x_gt, roi);
    if (d_xhat != nullptr) {
        const double inv_n = 1.0 / static_cast<double>(path.regions.size());
        for (const auto& region : path.regions) {
            std::vector<double> rh(region.size()), rg(region.size());
            for (size_t i = 0; i < region.size(); ++i) {
                rh[i] = x_hat[region[i]];
                rg[i] = x_gt[region[i]];
            }
            const std::vector<double> ea = path.encoder.apply(rh);
            const std::vector<double> eb = path.encoder.apply(rg);
            const std::vector<double> da = cosine_distance_grad_a(ea, eb);
            for (size_t j = 0; j < region.size(); ++j) {
                double acc = 0.0;
                for (int r = 0; r < path.encoder.out_dim; ++r)
                    acc += path.encoder.weights[static_cast<size_t>(r) * static_cast<size_t>(path.encoder.in_dim) + j] *
                           da[static_cast<size_t>(r)];
                (*d_xhat)[region[j]] += scale * inv_n * acc;
            }
        }
    }
    return value;
}

}  // namespace

FlowEval eval_flow_objective(const MlpDims& dims, std::span<const double> params,
                             const std::vector<FlowItem>& items,
                             const ConsistencyPath* consistency, std::vector<double>* grad) {
    check_params(dims, params);
    if (grad != nullptr) grad->assign(params.size(), 0.0);
    FlowEval eval;
    if (items.empty()) return eval;
    const size_t d = static_cast<size_t>(dims.data_dim);
    const double inv_batch = 1.0 / static_cast<double>(items.size());
    const bool use_identity = consistency != nullptr && consistency->config.eta > 0.0;

    MlpWorkspace ws;
    std::vector<double> x_t(d), v(d), v_target(d), d_v(d);
    for (const auto& item : items) {
        if (item.x0.size() != d || item.eps.size() != d)
            throw std::invalid_argument("flow item dimension mismatch");
        const double t = item.t;
        for (size_t i = 0; i < d; ++i) {
            x_t[i] = (1.0 - t) * item.x0[i] + t * item.eps[i];
            v_target[i] = item.eps[i] - item.x0[i];
        }
        forward_velocity(dims, params, x_t, t, ws, v);

        double msd = 0.0;
        for (size_t i = 0; i < d; ++i) {
            const double r = v[i] - v_target[i];
            msd += r * r;
            d_v[i] = item.weight * inv_batch * 2.0 * r / static_cast<double>(d);
        }
        msd /= static_cast<double>(d);

        double id_value = 0.0;
        if (use_identity) {
            const double lambda = identity_weight(t, consistency->config);
            std::vector<double> x_hat = one_step_denoise(x_t, t, v);
            if (lambda > 0.0) {
                std::vector<double> d_xhat(d, 0.0);
                id_value = identity_term(*consistency, x_hat, item.x0,
                                         1.0, grad != nullptr ? &d_xhat : nullptr);
                if (grad != nullptr) {
                    // x_hat = x_t - t v, so d x_hat / d v = -t.
                    for (size_t i = 0; i < d; ++i)
                        d_v[i] += item.weight * inv_batch * lambda * (-t) * d_xhat[i];
                }
            } else {
                id_value = identity_term(*consistency, x_hat, item.x0, 1.0, nullptr);
            }
            eval.objective += item.weight * (msd + lambda * id_value) * inv_batch;
        } else {
            eval.objective += item.weight * msd * inv_batch;
        }
        eval.flow_loss += msd * inv_batch;
        eval.id_loss += id_value * inv_batch;
        if (grad != nullptr) backward_velocity(dims, params, ws, d_v, *grad);
    }
    return eval;
}

DpoEval eval_dpo_objective(const MlpDims& dims, std::span<const double> policy,
                           std::span<const double> reference, const std::vector<PairItem>& items,
                           const DpoConfig& config, std::vector<double>* grad) {
    check_params(dims, policy);
    check_params(dims, reference);
    if (grad != nullptr) grad->assign(policy.size(), 0.0);
    DpoEval eval;
    if (items.empty()) return eval;
    const size_t d = static_cast<size_t>(dims.data_dim);
    const double inv_batch = 1.0 / static_cast<double>(items.size());

    MlpWorkspace ws_win, ws_lose, ws_ref;
    std::vector<double> xt_w(d), xt_l(d), tgt_w(d), tgt_l(d);
    std::vector<double> v_pw(d), v_pl(d), v_r(d), d_v(d);
    for (const auto& item : items) {
        if (item.x_win.size() != d || item.x_lose.size() != d || item.eps.size() != d)
            throw std::invalid_argument("pair item dimension mismatch");
        const double t = item.t;
        for (size_t i = 0; i < d; ++i) {
            xt_w[i] = (1.0 - t) * item.x_win[i] + t * item.eps[i];
            xt_l[i] = (1.0 - t) * item.x_lose[i] + t * item.eps[i];
            tgt_w[i] = item.eps[i] - item.x_win[i];
            tgt_l[i] = item.eps[i] - item.x_lose[i];
        }
        auto msd = [&](std::span<const double> a, std::span<const double> b) {
            double s = 0.0;
            for (size_t i = 0; i < d; ++i) {
                const double r = a[i] - b[i];
                s += r * r;
            }
            return s / static_cast<double>(d);
        };

        forward_velocity(dims, policy, xt_w, t, ws_win, v_pw);
        forward_velocity(dims, policy, xt_l, t, ws_lose, v_pl);
        PreferencePairLosses pair;
        pair.win_policy = msd(v_pw, tgt_w);
        pair.lose_policy = msd(v_pl, tgt_l);
        forward_velocity(dims, reference, xt_w, t, ws_ref, v_r);
        pair.win_ref = msd(v_r, tgt_w);
        forward_velocity(dims, reference, xt_l, t, ws_ref, v_r);
        pair.lose_ref = msd(v_r, tgt_l);

        eval.objective += asymmetric_dpo_loss(pair, config) * inv_batch;
        eval.win_policy_loss += pair.win_policy * inv_batch;

        if (grad != nullptr) {
            const DpoGrads dg = asymmetric_dpo_grads(pair, config);
            for (size_t i = 0; i < d; ++i)
                d_v[i] = inv_batch * dg.d_win_policy * 2.0 * (v_pw[i] - tgt_w[i]) / static_cast<double>(d);
            backward_velocity(dims, policy, ws_win, d_v, *grad);
            for (size_t i = 0; i < d; ++i)
                d_v[i] = inv_batch * dg.d_lose_policy * 2.0 * (v_pl[i] - tgt_l[i]) / static_cast<double>(d);
            backward_velocity(dims, policy, ws_lose, d_v, *grad);
        }
    }
    return eval;
}

NftEval eval_nft_objective(const MlpDims& dims, std::span<const double> policy,
                           std::span<const double> old_params, const std::vector<NftItem>& items,
                           const NftConfig& config, std::vector<double>* grad) {
    check_params(dims, policy);
    check_params(dims, old_params);
    if (grad != nullptr) grad->assign(policy.size(), 0.0);
    NftEval eval;
    if (items.empty()) return eval;
    const size_t d = static_cast<size_t>(dims.data_dim);
    const double inv_batch = 1.0 / static_cast<double>(items.size());

    MlpWorkspace ws, ws_old;
    std::vector<double> x_t(d), d_v(d);
    NftBatch batch;
    batch.v_policy.resize(d);
    batch.v_old.resize(d);
    batch.v_target.resize(d);
    for (const auto& item : items) {
        if (item.x0.size() != d || item.eps.size() != d)
            throw std::invalid_argument("nft item dimension mismatch");
        const double t = item.t;
        for (size_t i = 0; i < d; ++i) {
            x_t[i] = (1.0 - t) * item.x0[i] + t * item.eps[i];
            batch.v_target[i] = item.eps[i] - item.x0[i];
        }
        forward_velocity(dims, old_params, x_t, t, ws_old, batch.v_old);
        forward_velocity(dims, policy, x_t, t, ws, batch.v_policy);
        batch.reward = item.reward;

        eval.objective += nft_loss(batch, config) * inv_batch;
        double msd = 0.0;
        for (size_t i = 0; i < d; ++i) {
            const double r = batch.v_policy[i] - batch.v_target[i];
            msd += r * r;
        }
        eval.flow_loss += msd / static_cast<double>(d) * inv_batch;
        eval.reward_mean += item.reward * inv_batch;

        if (grad != nullptr) {
            const std::vector<double> g = nft_loss_grad(batch, config);
            for (size_t i = 0; i < d; ++i) d_v[i] = g[i] * inv_batch;
            backward_velocity(dims, policy, ws, d_v, *grad);
        }
    }
    return eval;
}

const char* stage_name(Stage s) {
    switch (s) {
        case Stage::pretrain: return "pretrain";
        case Stage::sft: return "sft";
        case Stage::dpo: return "dpo";
        case Stage::nft: return "nft";
    }
    return "?";
}

Stage stage_from_name(const std::string& name) {
    if (name == "pretrain") return Stage::pretrain;
    if (name == "sft") return Stage::sft;
    if (name == "dpo") return Stage::dpo;
    if (name == "nft") return Stage::nft;
    throw DataError("unknown stage \"" + name + "\"");
}

namespace {

std::vector<std::array<double, 2>> euler_sample_impl(const MlpDims& dims,
                                                     std::span<const double> params,
                                                     int n_samples, int n_steps, uint64_t seed) {
    if (n_steps < 1) throw std::invalid_argument("n_steps must be >= 1");
    if (n_samples < 0) throw std::invalid_argument("n_samples must be >= 0");
    Rng rng(mix_seed(seed, 0xE11E2ULL));
    MlpWorkspace ws;
    const size_t d = static_cast<size_t>(dims.data_dim);
    std::vector<double> x(d), v(d);
    std::vector<std::array<double, 2>> out;
    out.reserve(static_cast<size_t>(n_samples));
    for (int s = 0; s < n_samples; ++s) {
        for (size_t i = 0; i < d; ++i) x[i] = rng.next_gauss();
        for (int k = 0; k < n_steps; ++k) {
            const double sigma = 1.0 - static_cast<double>(k) / n_steps;
            const double sigma_next = 1.0 - static_cast<double>(k + 1) / n_steps;
            forward_velocity(dims, params, x, sigma, ws, v);
            for (size_t i = 0; i < d; ++i) {
                x[i] += v[i] * (sigma_next - sigma);
                if (!std::isfinite(x[i])) throw std::runtime_error("non-finite sampling trajectory");
            }
        }
        out.push_back({x[0], x.size() > 1 ? x[1] : 0.0});
    }
    return out;
}

}  // namespace

std::vector<std::array<double, 2>> euler_sample(const MlpDims& dims, const ParameterVector& params,
                                                int n_samples, int n_steps, uint64_t seed) {
    return euler_sample_impl(dims, params.values, n_samples, n_steps, seed);
}

StageResult train_stage(const TrainConfig& config, const MlpDims& dims,
                        const SyntheticDataset& dataset, const ParameterVector& initial,
                        const ParameterVector* reference) {
    check_params(dims, initial.values);
    if (config.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (config.world_size < 1) throw std::invalid_argument("world_size must be >= 1");
    if (dims.data_dim != 2) throw std::invalid_argument("the toy trainer drives planar data");

    StageResult result;
    result.params = initial;
    result.ema = config.ema_mode == EmaMode::constant_decay
                     ? EmaState::constant(config.ema_decay, initial.values)
                     : EmaState::running(initial.values.size());
    if (config.steps == 0) return result;

    AdamW opt;
    opt.beta1 = config.beta1;
    opt.beta2 = config.beta2;
    opt.weight_decay = config.weight_decay;

    const StratifiedConfig strat{config.world_size, config.rotation_period, config.seed};
    const CurriculumSchedule curriculum{config.steps, config.curriculum_start};
    const bool use_curriculum = config.stage == Stage::pretrain && config.curriculum_start > 1.0;

    std::vector<Rng> rank_rngs;
    for (int r = 0; r < config.world_size; ++r)
        rank_rngs.emplace_back(mix_seed(config.seed, 0x7001ULL + static_cast<uint64_t>(r)));
    Rng batch_rng(mix_seed(config.seed, 0xBA7CULL));
    Rng noise_rng(mix_seed(config.seed, 0x9015ULL));

    ConsistencyPath consistency;
    const bool use_identity = config.consistency.eta > 0.0;
    if (use_identity) {
        consistency.config = config.consistency;
        std::vector<size_t> all(static_cast<size_t>(dims.data_dim));
        std::iota(all.begin(), all.end(), size_t{0});
        consistency.regions = {all};
        consistency.encoder = make_random_linear_encoder(dims.data_dim, config.encoder_dim, config.encoder_seed);
    }

    ParameterVector reference_params = reference != nullptr ? *reference : initial;
    ParameterVector old_params = reference_params;  // NFT snapshot

    TargetRegion region;
    std::vector<size_t> target_points, other_points;
    if (config.stage == Stage::dpo || config.stage == Stage::nft) {
        region = make_target_region(dataset, config.target_modes, config.reward_scale);
        std::vector<char> is_target(dataset.centers.size(), 0);
        for (int m : config.target_modes) is_target[static_cast<size_t>(m)] = 1;
        for (size_t i = 0; i < dataset.points.size(); ++i)
            (is_target[static_cast<size_t>(dataset.labels[i])] ? target_points : other_points).push_back(i);
        if (config.stage == Stage::dpo && (target_points.empty() || other_points.empty()))
            throw std::invalid_argument("preference stage needs samples on both sides");
    }

    std::vector<double> grad;
    std::vector<double> ts(static_cast<size_t>(config.batch_size));
    for (long long step = 0; step < config.steps; ++step) {
        if (config.stage == Stage::nft && config.nft_refresh_interval > 0 && step > 0 &&
            step % config.nft_refresh_interval == 0)
            old_params = result.params;

        for (int i = 0; i < config.batch_size; ++i) {
            const int rank = i % config.world_size;
            Rng& rng = rank_rngs[static_cast<size_t>(rank)];
            ts[static_cast<size_t>(i)] = use_curriculum
                                             ? draw_timestep(strat, curriculum, rank, step, rng)
                                             : draw_timestep(strat, rank, step, rng);
        }

        double objective = 0.0;
        MetricsRow row;
        row.step = step;
        row.stage = stage_name(config.stage);

        if (config.stage == Stage::pretrain || config.stage == Stage::sft) {
            std::vector<FlowItem> items(static_cast<size_t>(config.batch_size));
            for (int i = 0; i < config.batch_size; ++i) {
                FlowItem& item = items[static_cast<size_t>(i)];
                const auto& pt = dataset.points[batch_rng.next_below(dataset.points.size())];
                item.x0 = {pt[0], pt[1]};
                item.eps = {noise_rng.next_gauss(), noise_rng.next_gauss()};
                item.t = ts[static_cast<size_t>(i)];
                item.weight = config.logit_normal_weighting
                                  ? logit_normal_weight(item.t, config.weight)
                                  : 1.0;
            }
            const FlowEval ev = eval_flow_objective(dims, result.params.values, items,
                                                    use_identity ? &consistency : nullptr, &grad);
            objective = ev.objective;
            row.flow_loss = ev.flow_loss;
            row.id_loss = ev.id_loss;
        } else if (config.stage == Stage::dpo) {
            std::vector<PairItem> items(static_cast<size_t>(config.batch_size));
            for (int i = 0; i < config.batch_size; ++i) {
                PairItem& item = items[static_cast<size_t>(i)];
                const auto& win = dataset.points[target_points[batch_rng.next_below(target_points.size())]];
                const auto& lose = dataset.points[other_points[batch_rng.next_below(other_points.size())]];
                item.x_win = {win[0], win[1]};
                item.x_lose = {lose[0], lose[1]};
                item.eps = {noise_rng.next_gauss(), noise_rng.next_gauss()};
                item.t = ts[static_cast<size_t>(i)];
            }
            const DpoEval ev = eval_dpo_objective(dims, result.params.values, reference_params.values,
                                                  items, config.dpo, &grad);
            objective = ev.objective;
            row.flow_loss = ev.win_policy_loss;
        } else {
            const auto x0s = euler_sample_impl(dims, old_params.values, config.batch_size,
                                               config.nft_sample_steps,
                                               mix_seed(config.seed, 0x5A3FULL + static_cast<uint64_t>(step)));
            std::vector<NftItem> items(static_cast<size_t>(config.batch_size));
            for (int i = 0; i < config.batch_size; ++i) {
                NftItem& item = items[static_cast<size_t>(i)];
                item.x0 = {x0s[static_cast<size_t>(i)][0], x0s[static_cast<size_t>(i)][1]};
                item.eps = {noise_rng.next_gauss(), noise_rng.next_gauss()};
                item.t = ts[static_cast<size_t>(i)];
                item.reward = nft_reward_fn(item.x0, region);
            }
            const NftEval ev = eval_nft_objective(dims, result.params.values, old_params.values,
                                                  items, config.nft, &grad);
            objective = ev.objective;
            row.flow_loss = ev.flow_loss;
            row.reward_mean = ev.reward_mean;
            row.has_reward = true;
        }

        if (!std::isfinite(objective))
            throw TrainDivergence(step, "non-finite loss at step " + std::to_string(step));

        row.grad_norm = clip_global_norm(grad, config.grad_clip);
        const double warm = config.warmup_steps > 0
                                ? std::min(1.0, static_cast<double>(step + 1) /
                                                    static_cast<double>(config.warmup_steps))
                                : 1.0;
        row.lr = config.learning_rate * warm;
        opt.step(result.params.values, grad, row.lr);
        ema_update(result.ema, result.params.values);

        row.loss = objective;
        row.t_mean = std::accumulate(ts.begin(), ts.end(), 0.0) / static_cast<double>(ts.size());
        row.t_min = *std::min_element(ts.begin(), ts.end());
        row.t_max = *std::max_element(ts.begin(), ts.end());
        result.log.push_back(std::move(row));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

void write_f64_le(const std::string& path, std::span<const double> values) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    for (double v : values) {
        const uint64_t bits = std::bit_cast<uint64_t>(v);
        unsigned char bytes[8];
        for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
        out.write(reinterpret_cast<const char*>(bytes), 8);
    }
    if (!out) throw DataError("short write to " + path);
}

std::vector<double> read_f64_le(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read " + path);
    std::vector<double> values;
    unsigned char bytes[8];
    while (in.read(reinterpret_cast<char*>(bytes), 8)) {
        uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(bytes[i]) << (8 * i);
        values.push_back(std::bit_cast<double>(bits));
    }
    if (in.gcount() != 0) throw DataError("trailing bytes in " + path);
    return values;
}

}  // namespace

void save_checkpoint(const std::string& dir, const MlpDims& dims, const ParameterVector& params,
                     const EmaState& ema, const std::string& config_hash) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    write_f64_le(dir + "/params.bin", params.values);
    write_f64_le(dir + "/ema.bin", ema.shadow);
    if (ema.mode == EmaMode::running_mean) write_f64_le(dir + "/ema_sum.bin", ema.running_sum);

    nlohmann::json j;
    j["version"] = 1;
    j["data_dim"] = dims.data_dim;
    j["hidden"] = dims.hidden;
    j["param_count"] = dims.param_count();
    j["config_hash"] = config_hash;
    j["ema"] = {{"mode", ema.mode == EmaMode::constant_decay ? "constant_decay" : "running_mean"},
                {"decay", ema.decay},
                {"updates_seen", ema.updates_seen}};
    std::ofstream out(dir + "/checkpoint.json", std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + dir + "/checkpoint.json");
    out << j.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& dir) {
    std::ifstream in(dir + "/checkpoint.json", std::ios::binary);
    if (!in) throw DataError("cannot read " + dir + "/checkpoint.json");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(dir + "/checkpoint.json: " + e.what());
    }
    Checkpoint ck;
    ck.dims.data_dim = j.at("data_dim").get<int>();
    ck.dims.hidden = j.at("hidden").get<int>();
    ck.config_hash = j.value("config_hash", "");
    ck.params.values = read_f64_le(dir + "/params.bin");
    if (ck.params.values.size() != static_cast<size_t>(ck.dims.param_count()))
        throw DataError("checkpoint parameter count mismatch in " + dir);
    const auto& ej = j.at("ema");
    const std::string mode = ej.at("mode").get<std::string>();
    if (mode == "constant_decay") {
        ck.ema.mode = EmaMode::constant_decay;
    } else if (mode == "running_mean") {
        ck.ema.mode = EmaMode::running_mean;
    } else {
        throw DataError("unknown EMA mode \"" + mode + "\"");
    }
    ck.ema.decay = ej.at("decay").get<double>();
    ck.ema.updates_seen = ej.at("updates_seen").get<long long>();
    ck.ema.shadow = read_f64_le(dir + "/ema.bin");
    if (ck.ema.mode == EmaMode::running_mean) ck.ema.running_sum = read_f64_le(dir + "/ema_sum.bin");
    return ck;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows,
                       const std::string& config_hash) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    out << "# config_hash=" << config_hash << "\n";
    out << "step,stage,loss,flow_loss,id_loss,reward_mean,t_mean,t_min,t_max,grad_norm,lr\n";
    for (const auto& r : rows) {
        out << r.step << ',' << r.stage << ',' << fmt_g17(r.loss) << ',' << fmt_g17(r.flow_loss) << ','
            << fmt_g17(r.id_loss) << ',' << (r.has_reward ? fmt_g17(r.reward_mean) : std::string()) << ','
            << fmt_g17(r.t_mean) << ',' << fmt_g17(r.t_min) << ',' << fmt_g17(r.t_max) << ','
            << fmt_g17(r.grad_norm) << ',' << fmt_g17(r.lr) << "\n";
    }
}

void write_samples_csv(const std::string& path, const std::vector<std::array<double, 2>>& samples) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path);
    out << "x,y\n";
    for (const auto& s : samples) out << fmt_g17(s[0]) << ',' << fmt_g17(s[1]) << "\n";
}

}  // namespace flowforge
