#include "flowforge/config.hpp"

#include <fstream>

namespace flowforge {

using nlohmann::json;

json default_config_json() {
    json j;
    j["version"] = 1;
    j["seed"] = 0;
    j["buckets"] = {
        {"patch_size", 16},
        {"capacity", 8192},
        {"sizes", json::array({json::array({512, 512}), json::array({448, 576}), json::array({576, 448}),
                               json::array({384, 640}), json::array({640, 384}), json::array({320, 704}),
                               json::array({704, 320}), json::array({256, 768}), json::array({768, 256})})},
    };
    j["collation"] = {
        {"drop_prob", 0.2},
        {"shuffle", true},
        {"figure_patterns", json::array({"Figure", "Fig"})},
    };
    j["timesteps"] = {
        {"world_size", 8},
        {"rotation_period", 16},
        {"curriculum", {{"bias_exponent_start", 3.0}}},
        {"weighting", {{"enabled", true}, {"loc", 0.0}, {"scale", 1.0}, {"clamp_eps", 1e-5}}},
    };
    j["objectives"] = {
        {"dpo", {{"beta", 5.0}, {"omega", 2.0}, {"lambda_sft", 0.1}, {"flip_sft_sign", false}}},
        {"nft", {{"beta_guidance", 1.0}, {"refresh_interval", 0}, {"sample_steps", 16}}},
        {"consistency", {{"eta", 0.0}, {"sigma_cutoff", 0.9}, {"encoder_dim", 8}, {"encoder_seed", 7}}},
    };
    j["rewards"] = {
        {"ocr",
         {{"w_text", 0.5},
          {"w_layout", 0.5},
          {"gate_threshold", 0.8},
          {"distance_scale", 0.1},
          {"one_sided_scale_penalty", false}}},
        {"mining", {{"mean_min", 0.6}, {"lower_quantile", 0.1}, {"quantile_max", 0.4}}},
    };
    j["dataset"] = {{"modes", 8}, {"radius", 4.0}, {"noise", 0.1}, {"count", 8192}, {"seed", 1}};
    j["model"] = {{"hidden", 96}};
    j["preference"] = {{"target_modes", json::array({0, 1, 6, 7})}, {"reward_scale", 2.0}};
    // Optimizer constants (moments 0.9/0.999, clip 1, weight decay 0.01) are
    // fixed in TrainConfig; presets carry the per-stage knobs. Pretrain runs
    // unstratified (world_size 1) so the high-noise curriculum governs its
    // timestep distribution globally; the later stages stratify across the
    // simulated ranks.
    auto stage = [](long long steps, long long warmup, double lr, int batch, int world) {
        return json{{"steps", steps},      {"warmup_steps", warmup}, {"learning_rate", lr},
                    {"batch_size", batch}, {"world_size", world},    {"ema_decay", 0.999},
                    {"ema_mode", "constant_decay"}};
    };
    j["stages"] = {
        {"pretrain", stage(2000, 0, 2e-3, 256, 1)},
        {"sft", stage(500, 50, 5e-4, 128, 8)},
        {"dpo", stage(500, 50, 2e-4, 64, 8)},
        {"nft", stage(300, 0, 4e-4, 64, 8)},
    };
    return j;
}

namespace {

void merge_strict(json& base, const json& overrides, const std::string& path) {
    if (!overrides.is_object())
        throw DataError("config" + (path.empty() ? std::string() : " at " + path) + " must be an object");
    for (const auto& [key, value] : overrides.items()) {
        const std::string where = path.empty() ? key : path + "." + key;
        if (!base.contains(key)) throw DataError("unknown config key \"" + where + "\"");
        json& slot = base[key];
        if (slot.is_object()) {
            merge_strict(slot, value, where);
        } else {
            const bool both_numbers = slot.is_number() && value.is_number();
            if (!both_numbers && slot.type() != value.type())
                throw DataError("config key \"" + where + "\" has the wrong type");
            slot = value;
        }
    }
}

EmaMode ema_mode_from(const std::string& s, const std::string& where) {
    if (s == "constant_decay") return EmaMode::constant_decay;
    if (s == "running_mean") return EmaMode::running_mean;
    throw DataError("config key \"" + where + "\": unknown EMA mode \"" + s + "\"");
}

RunConfig::StagePreset preset_from(const json& j, const std::string& where) {
    RunConfig::StagePreset p;
    p.steps = j.at("steps").get<long long>();
    p.warmup_steps = j.at("warmup_steps").get<long long>();
    p.learning_rate = j.at("learning_rate").get<double>();
    p.batch_size = j.at("batch_size").get<int>();
    p.world_size = j.at("world_size").get<int>();
    p.ema_decay = j.at("ema_decay").get<double>();
    p.ema_mode = ema_mode_from(j.at("ema_mode").get<std::string>(), where + ".ema_mode");
    return p;
}

}  // namespace

RunConfig config_from_json(const json& overrides) {
    json merged = default_config_json();
    if (!overrides.is_null() && !(overrides.is_object() && overrides.empty()))
        merge_strict(merged, overrides, "");
    if (merged["version"].get<int>() != 1) throw DataError("unsupported config version");

    RunConfig run;
    run.merged = merged;
    run.hash = to_hex64(fnv1a64(merged.dump()));
    run.seed = merged["seed"].get<uint64_t>();

    const json& bj = merged["buckets"];
    run.buckets.patch_size = bj["patch_size"].get<int>();
    run.buckets.capacity = bj["capacity"].get<long long>();
    for (const auto& s : bj["sizes"]) {
        if (!s.is_array() || s.size() != 2) throw DataError("buckets.sizes entries must be [height, width]");
        run.buckets.buckets.push_back(BucketSpec{s[0].get<int>(), s[1].get<int>()});
    }
    validate_table(run.buckets);

    const json& cj = merged["collation"];
    run.collation.drop_prob = cj["drop_prob"].get<double>();
    run.collation.shuffle = cj["shuffle"].get<bool>();
    run.collation.seed = run.seed;
    run.collation.figure_patterns.clear();
    for (const auto& p : cj["figure_patterns"]) run.collation.figure_patterns.push_back(p.get<std::string>());
    if (run.collation.drop_prob < 0.0 || run.collation.drop_prob > 1.0)
        throw DataError("collation.drop_prob must lie in [0,1]");

    const json& tj = merged["timesteps"];
    run.world_size = tj["world_size"].get<int>();
    run.rotation_period = tj["rotation_period"].get<long long>();
    run.curriculum_start = tj["curriculum"]["bias_exponent_start"].get<double>();
    run.weighting_enabled = tj["weighting"]["enabled"].get<bool>();
    run.weight.loc = tj["weighting"]["loc"].get<double>();
    run.weight.scale = tj["weighting"]["scale"].get<double>();
    run.weight.clamp_eps = tj["weighting"]["clamp_eps"].get<double>();

    const json& oj = merged["objectives"];
    run.dpo.beta = oj["dpo"]["beta"].get<double>();
    run.dpo.omega = oj["dpo"]["omega"].get<double>();
    run.dpo.lambda_sft = oj["dpo"]["lambda_sft"].get<double>();
    run.dpo.flip_sft_sign = oj["dpo"]["flip_sft_sign"].get<bool>();
    run.nft.beta_guidance = oj["nft"]["beta_guidance"].get<double>();
    run.nft_refresh_interval = oj["nft"]["refresh_interval"].get<long long>();
    run.nft_sample_steps = oj["nft"]["sample_steps"].get<int>();
    run.consistency.eta = oj["consistency"]["eta"].get<double>();
    run.consistency.sigma_cutoff = oj["consistency"]["sigma_cutoff"].get<double>();
    run.encoder_dim = oj["consistency"]["encoder_dim"].get<int>();
    run.encoder_seed = oj["consistency"]["encoder_seed"].get<uint64_t>();

    const json& rj = merged["rewards"];
    run.ocr.w_text = rj["ocr"]["w_text"].get<double>();
    run.ocr.w_layout = rj["ocr"]["w_layout"].get<double>();
    run.ocr.gate_threshold = rj["ocr"]["gate_threshold"].get<double>();
    run.ocr.distance_scale = rj["ocr"]["distance_scale"].get<double>();
    run.ocr.one_sided_scale_penalty = rj["ocr"]["one_sided_scale_penalty"].get<bool>();
    run.mining.mean_min = rj["mining"]["mean_min"].get<double>();
    run.mining.lower_quantile = rj["mining"]["lower_quantile"].get<double>();
    run.mining.quantile_max = rj["mining"]["quantile_max"].get<double>();

    const json& dj = merged["dataset"];
    run.dataset.modes = dj["modes"].get<int>();
    run.dataset.radius = dj["radius"].get<double>();
    run.dataset.noise = dj["noise"].get<double>();
    run.dataset.count = dj["count"].get<int>();
    run.dataset.seed = dj["seed"].get<uint64_t>();

    run.hidden = merged["model"]["hidden"].get<int>();
    run.target_modes.clear();
    for (const auto& m : merged["preference"]["target_modes"]) run.target_modes.push_back(m.get<int>());
    run.reward_scale = merged["preference"]["reward_scale"].get<double>();

    run.pretrain = preset_from(merged["stages"]["pretrain"], "stages.pretrain");
    run.sft = preset_from(merged["stages"]["sft"], "stages.sft");
    run.dpo_stage = preset_from(merged["stages"]["dpo"], "stages.dpo");
    run.nft_stage = preset_from(merged["stages"]["nft"], "stages.nft");
    return run;
}

RunConfig load_run_config(const std::string& path) {
    if (path.empty()) return config_from_json(json::object());
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open config: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw DataError(path + ": " + e.what());
    }
    return config_from_json(j);
}

TrainConfig make_train_config(const RunConfig& run, Stage stage, uint64_t seed) {
    const RunConfig::StagePreset* preset = nullptr;
    switch (stage) {
        case Stage::pretrain: preset = &run.pretrain; break;
        case Stage::sft: preset = &run.sft; break;
        case Stage::dpo: preset = &run.dpo_stage; break;
        case Stage::nft: preset = &run.nft_stage; break;
    }
    TrainConfig tc;
    tc.stage = stage;
    tc.steps = preset->steps;
    tc.warmup_steps = preset->warmup_steps;
    tc.learning_rate = preset->learning_rate;
    tc.batch_size = preset->batch_size;
    tc.seed = seed;
    tc.world_size = preset->world_size;
    tc.rotation_period = run.rotation_period;
    tc.logit_normal_weighting = run.weighting_enabled;
    tc.weight = run.weight;
    tc.curriculum_start = run.curriculum_start;
    tc.consistency = run.consistency;
    tc.encoder_dim = run.encoder_dim;
    tc.encoder_seed = run.encoder_seed;
    tc.dpo = run.dpo;
    tc.nft = run.nft;
    tc.nft_refresh_interval = run.nft_refresh_interval;
    tc.nft_sample_steps = run.nft_sample_steps;
    tc.target_modes = run.target_modes;
    tc.reward_scale = run.reward_scale;
    tc.ema_mode = preset->ema_mode;
    tc.ema_decay = preset->ema_decay;
    return tc;
}

}  // namespace flowforge
