#pragma once

#include <string>

#include <json.hpp>

#include "flowforge/bucketing.hpp"
#include "flowforge/collation.hpp"
#include "flowforge/rewards.hpp"
#include "flowforge/trainer.hpp"

namespace flowforge {

// Fully-merged run configuration. Every field has a default; a config file
// overrides individual keys. Unknown keys are rejected, and the hash is
// computed over the canonical (key-sorted) rendering, so it is stable under
// key reordering.
struct RunConfig {
    uint64_t seed = 0;

    BucketTable buckets;
    CollationConfig collation;

    int world_size = 8;
    long long rotation_period = 16;
    double curriculum_start = 3.0;
    bool weighting_enabled = true;
    WeightConfig weight;

    DpoConfig dpo;
    NftConfig nft;
    long long nft_refresh_interval = 0;
    int nft_sample_steps = 16;
    ConsistencyConfig consistency;
    int encoder_dim = 8;
    uint64_t encoder_seed = 7;

    OcrRewardConfig ocr;
    MiningConfig mining;

    SyntheticConfig dataset;
    int hidden = 64;
    std::vector<int> target_modes = {0, 1, 6, 7};
    double reward_scale = 2.0;

    struct StagePreset {
        long long steps = 0;
        long long warmup_steps = 0;
        double learning_rate = 1e-3;
        int batch_size = 64;
        int world_size = 1;
        double ema_decay = 0.999;
        EmaMode ema_mode = EmaMode::constant_decay;
    };
    StagePreset pretrain, sft, dpo_stage, nft_stage;

    nlohmann::json merged;  // canonical merged document
    std::string hash;       // 16 hex digits of fnv1a64(merged.dump())
};

nlohmann::json default_config_json();

// Merges overrides into the defaults; throws DataError on unknown keys or
// type mismatches.
RunConfig config_from_json(const nlohmann::json& overrides);

// Empty path loads pure defaults.
RunConfig load_run_config(const std::string& path);

TrainConfig make_train_config(const RunConfig& run, Stage stage, uint64_t seed);

}  // namespace flowforge
