#include "flowforge/rewards.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace flowforge {

double logit_weighted_score(const NumericTokenLogits& tokens) {
    const size_t n = tokens.values.size();
    if (n < 2 || tokens.logits.size() != n)
        throw std::invalid_argument("token set needs >= 2 values with matching logits");
    for (size_t i = 1; i < n; ++i)
        if (!(tokens.values[i] > tokens.values[i - 1]))
            throw std::invalid_argument("token values must be strictly increasing");
    double zmax = -std::numeric_limits<double>::infinity();
    for (double z : tokens.logits) {
        if (!std::isfinite(z)) throw std::invalid_argument("non-finite logit");
        zmax = std::max(zmax, z);
    }
    // Single division keeps uniform logits exact: sum(v)/n.
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double w = std::exp(tokens.logits[i] - zmax);
        num += tokens.values[i] * w;
        den += w;
    }
    return num / den;
}

double ensemble_reward(const std::vector<NumericTokenLogits>& per_pass, const EnsembleConfig& config) {
    if (config.passes < 1) throw std::invalid_argument("passes must be >= 1");
    if (per_pass.empty()) throw std::invalid_argument("no inference passes supplied");
    if (per_pass.size() != static_cast<size_t>(config.passes))
        throw std::invalid_argument("pass count does not match the ensemble size");
    double sum = 0.0;
    for (const auto& p : per_pass) sum += logit_weighted_score(p);
    return sum / static_cast<double>(per_pass.size());
}

size_t levenshtein(const std::u32string& a, const std::u32string& b) {
    const size_t n = a.size(), m = b.size();
    std::vector<size_t> row(m + 1);
    std::iota(row.begin(), row.end(), size_t{0});
    for (size_t i = 1; i <= n; ++i) {
        size_t diag = row[0];
        row[0] = i;
        for (size_t j = 1; j <= m; ++j) {
            const size_t sub = diag + (a[i - 1] == b[j - 1] ? 0 : 1);
            diag = row[j];
            row[j] = std::min({row[j] + 1, row[j - 1] + 1, sub});
        }
    }
    return row[m];
}

double ocr_text_score(const std::string& pred, const std::string& tgt) {
    const std::u32string p = utf8_decode(pred);
    const std::u32string t = utf8_decode(tgt);
    const double dist = static_cast<double>(levenshtein(p, t));
    const double denom = static_cast<double>(std::max<size_t>(t.size(), 1));
    return std::max(0.0, 1.0 - dist / denom);
}

std::vector<GlyphMatch> match_glyphs(const std::vector<OcrGlyph>& pred,
                                     const std::vector<OcrGlyph>& tgt,
                                     const OcrRewardConfig& config) {
    if (!(config.distance_scale > 0.0)) throw std::invalid_argument("distance_scale must be > 0");
    for (const auto& g : pred)
        if (!(g.scale > 0.0)) throw DataError("predicted glyph with non-positive scale");
    for (const auto& g : tgt)
        if (!(g.scale > 0.0)) throw DataError("target glyph with non-positive scale");

    struct Candidate {
        double dist;
        size_t ti, pi;
    };
    std::vector<Candidate> candidates;
    for (size_t ti = 0; ti < tgt.size(); ++ti)
        for (size_t pi = 0; pi < pred.size(); ++pi) {
            if (pred[pi].ch != tgt[ti].ch) continue;
            const double dx = pred[pi].cx - tgt[ti].cx;
            const double dy = pred[pi].cy - tgt[ti].cy;
            candidates.push_back(Candidate{std::sqrt(dx * dx + dy * dy), ti, pi});
        }
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
        return std::tie(a.dist, a.ti, a.pi) < std::tie(b.dist, b.ti, b.pi);
    });

    std::vector<char> pred_used(pred.size(), 0), tgt_used(tgt.size(), 0);
    std::vector<GlyphMatch> matches;
    for (const auto& c : candidates) {
        if (pred_used[c.pi] || tgt_used[c.ti]) continue;
        pred_used[c.pi] = 1;
        tgt_used[c.ti] = 1;
        GlyphMatch m;
        m.pred_index = c.pi;
        m.tgt_index = c.ti;
        m.d = c.dist / config.distance_scale;
        const double log_ratio = std::log(pred[c.pi].scale / tgt[c.ti].scale);
        m.delta_s = config.one_sided_scale_penalty ? std::max(0.0, log_ratio) : std::abs(log_ratio);
        matches.push_back(m);
    }
    return matches;
}

double layout_aware_ocr_reward(const std::vector<OcrGlyph>& pred_glyphs, const std::string& pred_text,
                               const std::vector<OcrGlyph>& tgt_glyphs, const std::string& tgt_text,
                               const OcrRewardConfig& config) {
    if (!(config.w_text >= 0.0) || !(config.w_layout >= 0.0) || config.w_text + config.w_layout <= 0.0)
        throw std::invalid_argument("weights must be non-negative with positive sum");
    if (config.gate_threshold < 0.0 || config.gate_threshold > 1.0)
        throw std::invalid_argument("gate_threshold must lie in [0,1]");

    const double text_score = ocr_text_score(pred_text, tgt_text);
    const double r_text = config.w_text * text_score;
    if (text_score < config.gate_threshold) return r_text;

    const auto matches = match_glyphs(pred_glyphs, tgt_glyphs, config);
    double layout_sum = 0.0;
    for (const auto& m : matches) layout_sum += std::exp(-m.d) * std::exp(-m.delta_s);
    const double tgt_len = static_cast<double>(std::max<size_t>(tgt_glyphs.size(), 1));
    const double len_ratio = tgt_glyphs.empty()
                                 ? 1.0
                                 : std::min(1.0, static_cast<double>(pred_glyphs.size()) /
                                                     static_cast<double>(tgt_glyphs.size()));
    const double r_layout = config.w_layout * len_ratio * layout_sum / tgt_len;
    return r_text + r_layout;
}

double empirical_quantile(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("quantile of empty sample");
    if (q < 0.0 || q > 1.0) throw std::invalid_argument("quantile fraction outside [0,1]");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    const size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

std::vector<std::string> semi_hard_select(const std::vector<CandidateRewards>& candidates,
                                          const MiningConfig& config) {
    if (!(config.lower_quantile > 0.0 && config.lower_quantile < 0.5))
        throw std::invalid_argument("lower_quantile must lie in (0, 0.5)");
    std::vector<std::string> selected;
    for (const auto& c : candidates) {
        if (c.rewards.size() < 2)
            throw DataError("candidate \"" + c.instruction_id + "\" has fewer than 2 rewards");
        const double mean = std::accumulate(c.rewards.begin(), c.rewards.end(), 0.0) /
                            static_cast<double>(c.rewards.size());
        const double q = empirical_quantile(c.rewards, config.lower_quantile);
        if (mean >= config.mean_min && q <= config.quantile_max)
            selected.push_back(c.instruction_id);
    }
    return selected;
}

}  // namespace flowforge
