#pragma once

#include <string>
#include <vector>

#include "flowforge/manifest.hpp"

namespace flowforge {

// Logits over an ordered set of numeric rating tokens (e.g. 1..5).
struct NumericTokenLogits {
    std::vector<double> values;  // strictly increasing, length >= 2
    std::vector<double> logits;  // same length
};

struct EnsembleConfig {
    int passes = 1;  // K stochastic inference passes
};

struct OcrRewardConfig {
    double w_text = 0.5;
    double w_layout = 0.5;
    double gate_threshold = 0.8;   // layout term activates at this text score
    double distance_scale = 0.1;   // normalizer for center distances
    // The default penalizes |ln(scale ratio)| in both directions; the strict
    // reading penalizes oversize only.
    bool one_sided_scale_penalty = false;
};

struct GlyphMatch {
    size_t pred_index = 0;
    size_t tgt_index = 0;
    double d = 0.0;        // center distance / distance_scale
    double delta_s = 0.0;  // scale penalty
};

struct CandidateRewards {
    std::string instruction_id;
    std::vector<double> rewards;  // in [0,1], length >= 2
};

struct MiningConfig {
    double mean_min = 0.6;
    double lower_quantile = 0.1;  // in (0, 0.5)
    double quantile_max = 0.4;
};

// Softmax expectation of the token values: sum_v v * softmax(z)_v. Always
// lies in [min value, max value].
double logit_weighted_score(const NumericTokenLogits& tokens);

// Mean of logit_weighted_score over the K passes.
double ensemble_reward(const std::vector<NumericTokenLogits>& per_pass, const EnsembleConfig& config);

// Levenshtein distance over Unicode scalar values.
size_t levenshtein(const std::u32string& a, const std::u32string& b);

// max(0, 1 - levenshtein(pred, tgt) / max(|tgt|, 1)), character-level.
double ocr_text_score(const std::string& pred, const std::string& tgt);

// Greedy one-to-one matching: among identical-character pairs, repeatedly
// take the closest centers. Unmatched glyphs simply contribute nothing.
std::vector<GlyphMatch> match_glyphs(const std::vector<OcrGlyph>& pred,
                                     const std::vector<OcrGlyph>& tgt,
                                     const OcrRewardConfig& config);

// w_text * text score + w_layout * gate * (|pred|/|tgt| clamped to <= 1)
// * (1/max(|tgt|,1)) * sum over matches of e^-d * e^-delta_s. Lengths in the
// layout term are glyph counts, which bounds the reward by w_text + w_layout.
double layout_aware_ocr_reward(const std::vector<OcrGlyph>& pred_glyphs, const std::string& pred_text,
                               const std::vector<OcrGlyph>& tgt_glyphs, const std::string& tgt_text,
                               const OcrRewardConfig& config);

// Empirical quantile with linear interpolation between closest ranks.
double empirical_quantile(std::vector<double> values, double q);

// Keeps candidates whose mean reward is at least mean_min while the lower
// quantile sits at or below quantile_max: competent but unstable. Input
// order is preserved.
std::vector<std::string> semi_hard_select(const std::vector<CandidateRewards>& candidates,
                                          const MiningConfig& config);

}  // namespace flowforge
