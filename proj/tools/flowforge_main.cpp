#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "flowforge/bucketing.hpp"
#include "flowforge/collation.hpp"
#include "flowforge/config.hpp"
#include "flowforge/manifest.hpp"
#include "flowforge/report.hpp"
#include "flowforge/rewards.hpp"
#include "flowforge/timesteps.hpp"
#include "flowforge/trainer.hpp"

namespace ff = flowforge;
using nlohmann::json;

namespace {

// --seed beats FLOWFORGE_SEED beats the config value.
uint64_t resolve_seed(const std::optional<uint64_t>& flag, uint64_t config_seed) {
    if (flag.has_value()) return *flag;
    if (const char* env = std::getenv("FLOWFORGE_SEED")) {
        try {
            return std::stoull(env);
        } catch (const std::exception&) {
            throw ff::DataError("FLOWFORGE_SEED is not an integer: " + std::string(env));
        }
    }
    return config_seed;
}

void write_output(const std::string& path, const std::string& content) {
    if (path.empty()) {
        std::cout << content;
        return;
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ff::DataError("cannot write " + path);
    out << content;
}

struct OcrLine {
    std::string id;
    std::string text;
    std::vector<ff::OcrGlyph> glyphs;
};

std::vector<OcrLine> load_ocr_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ff::DataError("cannot open " + path);
    std::vector<OcrLine> lines;
    std::string raw;
    size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        if (!raw.empty() && raw.back() == '\r') raw.pop_back();
        if (raw.empty()) continue;
        json j;
        try {
            j = json::parse(raw);
        } catch (const json::exception& e) {
            throw ff::DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        OcrLine line;
        try {
            line.id = j.value("id", "line" + std::to_string(line_no));
            line.text = j.at("text").get<std::string>();
            for (const auto& gj : j.value("glyphs", json::array())) {
                ff::OcrGlyph g;
                g.ch = gj.at("char").get<std::string>();
                g.cx = gj.at("cx").get<double>();
                g.cy = gj.at("cy").get<double>();
                g.scale = gj.at("scale").get<double>();
                line.glyphs.push_back(std::move(g));
            }
        } catch (const json::exception& e) {
            throw ff::DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        lines.push_back(std::move(line));
    }
    return lines;
}

ff::NumericTokenLogits tokens_from_json(const json& j, const std::string& where) {
    ff::NumericTokenLogits t;
    try {
        for (const auto& v : j.at("values")) t.values.push_back(v.get<double>());
        for (const auto& z : j.at("logits")) t.logits.push_back(z.get<double>());
    } catch (const json::exception& e) {
        throw ff::DataError(where + ": " + e.what());
    }
    return t;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"flowforge: bucket batching, collation, timestep scheduling, rewards and a toy "
                 "rectified-flow trainer"};
    app.require_subcommand(1);

    int rc = 0;
    std::string config_path, manifest_path, out_path;
    std::optional<uint64_t> seed_flag;

    // ---- plan-batches ----
    auto* plan = app.add_subcommand("plan-batches", "Group a manifest into token-budgeted batches");
    int plan_batch_size = 8;
    std::optional<long long> plan_capacity;
    bool plan_drop_last = false;
    plan->add_option("--manifest", manifest_path, "JSON Lines manifest")->required();
    plan->add_option("--buckets", config_path, "config file with the bucket table");
    plan->add_option("--batch-size", plan_batch_size, "samples per batch")->required();
    plan->add_option("--capacity", plan_capacity, "token capacity per batch (overrides config)");
    plan->add_option("--seed", seed_flag, "shuffle seed");
    plan->add_flag("--drop-last", plan_drop_last, "drop partial trailing batches");
    plan->add_option("--out", out_path, "output file (default stdout)");
    plan->callback([&] {
        ff::RunConfig run = ff::load_run_config(config_path);
        if (plan_capacity.has_value()) run.buckets.capacity = *plan_capacity;
        const uint64_t seed = resolve_seed(seed_flag, run.seed);
        const auto records = ff::load_manifest(manifest_path);
        const auto planned = ff::plan_batches(records, run.buckets, plan_batch_size, plan_drop_last, seed);
        write_output(out_path, ff::batch_plan_to_json(planned, run.buckets, plan_batch_size, plan_drop_last, seed));
    });

    // ---- collate ----
    auto* collate_cmd = app.add_subcommand("collate", "Reference dropout/shuffle with prompt re-indexing");
    std::optional<double> drop_prob;
    bool shuffle_flag = false;
    collate_cmd->add_option("--manifest", manifest_path, "JSON Lines manifest")->required();
    collate_cmd->add_option("--drop-prob", drop_prob, "dropout probability per unmentioned reference");
    collate_cmd->add_flag("--shuffle", shuffle_flag, "permute kept references");
    collate_cmd->add_option("--seed", seed_flag, "collation seed");
    collate_cmd->add_option("--config", config_path, "config file (figure patterns etc.)");
    collate_cmd->add_option("--out", out_path, "output file (default stdout)");
    collate_cmd->callback([&] {
        ff::RunConfig run = ff::load_run_config(config_path);
        ff::CollationConfig cc = run.collation;
        if (drop_prob.has_value()) cc.drop_prob = *drop_prob;
        if (shuffle_flag) cc.shuffle = true;
        cc.seed = resolve_seed(seed_flag, run.seed);
        std::ostringstream out;
        for (const auto& rec : ff::load_manifest(manifest_path)) {
            if (rec.task == ff::TaskType::edit) {
                out << ff::collated_to_json_line(ff::collate(rec, cc)) << "\n";
            } else {
                ff::CollatedSample identity;
                identity.id = rec.id;
                identity.instruction = rec.instruction;
                out << ff::collated_to_json_line(identity) << "\n";
            }
        }
        write_output(out_path, out.str());
    });

    // ---- sample-timesteps ----
    auto* ts_cmd = app.add_subcommand("sample-timesteps", "Emit stratified per-rank timestep draws");
    int ts_world = 8;
    long long ts_period = 16, ts_steps = 100;
    ts_cmd->add_option("--world-size", ts_world, "simulated rank count")->required();
    ts_cmd->add_option("--period", ts_period, "rotation period in steps");
    ts_cmd->add_option("--steps", ts_steps, "steps to draw")->required();
    ts_cmd->add_option("--seed", seed_flag, "sampling seed");
    ts_cmd->add_option("--out", out_path, "output file (default stdout)");
    ts_cmd->callback([&] {
        const uint64_t seed = resolve_seed(seed_flag, 0);
        const ff::StratifiedConfig cfg{ts_world, ts_period, seed};
        const json meta = {{"world_size", ts_world}, {"period", ts_period}, {"steps", ts_steps}, {"seed", seed}};
        std::ostringstream out;
        out << "# config_hash=" << ff::to_hex64(ff::fnv1a64(meta.dump())) << "\n";
        out << "step,rank,interval,t\n";
        std::vector<ff::Rng> rngs;
        for (int r = 0; r < ts_world; ++r) rngs.emplace_back(ff::mix_seed(seed, 0x7001ULL + static_cast<uint64_t>(r)));
        for (long long step = 0; step < ts_steps; ++step) {
            const auto perm = ff::rotation_permutation(cfg, step);
            for (int rank = 0; rank < ts_world; ++rank) {
                const double t = ff::draw_timestep(cfg, rank, step, rngs[static_cast<size_t>(rank)]);
                out << step << ',' << rank << ',' << perm[static_cast<size_t>(rank)] << ',' << ff::fmt_g17(t)
                    << "\n";
            }
        }
        write_output(out_path, out.str());
    });

    // ---- score-ocr ----
    auto* ocr_cmd = app.add_subcommand("score-ocr", "Layout-aware OCR rewards for prediction/target pairs");
    std::string pred_path, tgt_path;
    std::optional<double> w_text, w_layout, gate, dist_scale;
    ocr_cmd->add_option("--pred", pred_path, "predicted OCR JSON Lines")->required();
    ocr_cmd->add_option("--target", tgt_path, "target OCR JSON Lines")->required();
    ocr_cmd->add_option("--w-text", w_text, "text term weight");
    ocr_cmd->add_option("--w-layout", w_layout, "layout term weight");
    ocr_cmd->add_option("--gate", gate, "gate threshold on the text score");
    ocr_cmd->add_option("--distance-scale", dist_scale, "center distance normalizer");
    ocr_cmd->add_option("--config", config_path, "config file");
    ocr_cmd->add_option("--out", out_path, "output file (default stdout)");
    ocr_cmd->callback([&] {
        ff::RunConfig run = ff::load_run_config(config_path);
        ff::OcrRewardConfig cfg = run.ocr;
        if (w_text) cfg.w_text = *w_text;
        if (w_layout) cfg.w_layout = *w_layout;
        if (gate) cfg.gate_threshold = *gate;
        if (dist_scale) cfg.distance_scale = *dist_scale;
        const auto preds = load_ocr_jsonl(pred_path);
        const auto tgts = load_ocr_jsonl(tgt_path);
        if (preds.size() != tgts.size())
            throw ff::DataError("pred and target files differ in length (" + std::to_string(preds.size()) +
                                " vs " + std::to_string(tgts.size()) + ")");
        std::ostringstream out;
        out << "id,text_score,reward\n";
        for (size_t i = 0; i < preds.size(); ++i) {
            const double ts = ff::ocr_text_score(preds[i].text, tgts[i].text);
            const double r = ff::layout_aware_ocr_reward(preds[i].glyphs, preds[i].text, tgts[i].glyphs,
                                                         tgts[i].text, cfg);
            out << tgts[i].id << ',' << ff::fmt_g17(ts) << ',' << ff::fmt_g17(r) << "\n";
        }
        write_output(out_path, out.str());
    });

    // ---- reward ----
    auto* reward_cmd = app.add_subcommand("reward", "Logit-weighted ensemble rewards from judge logits");
    std::string reward_input;
    reward_cmd->add_option("--input", reward_input, "JSON file: passes for one item, or [{id, passes}]")
        ->required();
    reward_cmd->add_option("--out", out_path, "output file (default stdout)");
    reward_cmd->callback([&] {
        std::ifstream in(reward_input, std::ios::binary);
        if (!in) throw ff::DataError("cannot open " + reward_input);
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw ff::DataError(reward_input + ": " + e.what());
        }
        if (!j.is_array() || j.empty()) throw ff::DataError(reward_input + ": expected a non-empty JSON array");
        std::ostringstream out;
        out << "id,reward\n";
        auto score_passes = [&](const json& passes, const std::string& where) {
            std::vector<ff::NumericTokenLogits> per_pass;
            for (const auto& pj : passes) per_pass.push_back(tokens_from_json(pj, where));
            return ff::ensemble_reward(per_pass, ff::EnsembleConfig{static_cast<int>(per_pass.size())});
        };
        if (j[0].is_object() && j[0].contains("passes")) {
            for (const auto& item : j) {
                const std::string id = item.value("id", "item");
                out << id << ',' << ff::fmt_g17(score_passes(item.at("passes"), reward_input + ":" + id)) << "\n";
            }
        } else {
            out << "-," << ff::fmt_g17(score_passes(j, reward_input)) << "\n";
        }
        write_output(out_path, out.str());
    });

    // ---- mine ----
    auto* mine_cmd = app.add_subcommand("mine", "Select semi-hard instructions from candidate rewards");
    std::string rewards_path;
    std::optional<double> mean_min, quantile_max, lower_quantile;
    mine_cmd->add_option("--rewards", rewards_path, "CSV with instruction_id,reward rows")->required();
    mine_cmd->add_option("--mean-min", mean_min, "minimum mean reward");
    mine_cmd->add_option("--quantile-max", quantile_max, "maximum lower-quantile reward");
    mine_cmd->add_option("--lower-quantile", lower_quantile, "quantile fraction (default 0.1)");
    mine_cmd->add_option("--config", config_path, "config file");
    mine_cmd->add_option("--out", out_path, "output file (default stdout)");
    mine_cmd->callback([&] {
        ff::RunConfig run = ff::load_run_config(config_path);
        ff::MiningConfig cfg = run.mining;
        if (mean_min) cfg.mean_min = *mean_min;
        if (quantile_max) cfg.quantile_max = *quantile_max;
        if (lower_quantile) cfg.lower_quantile = *lower_quantile;
        const ff::CsvTable table = ff::read_csv(rewards_path);
        if (table.header != std::vector<std::string>{"instruction_id", "reward"})
            throw ff::DataError(rewards_path + ": expected header instruction_id,reward");
        std::vector<ff::CandidateRewards> candidates;
        std::map<std::string, size_t> index;
        for (const auto& row : table.rows) {
            auto [it, inserted] = index.try_emplace(row[0], candidates.size());
            if (inserted) candidates.push_back(ff::CandidateRewards{row[0], {}});
            double v = 0.0;
            try {
                v = std::stod(row[1]);
            } catch (const std::exception&) {
                throw ff::DataError(rewards_path + ": bad reward \"" + row[1] + "\"");
            }
            candidates[it->second].rewards.push_back(v);
        }
        std::ostringstream out;
        for (const auto& id : ff::semi_hard_select(candidates, cfg)) out << id << "\n";
        write_output(out_path, out.str());
    });

    // ---- train ----
    auto* train_cmd = app.add_subcommand("train", "Run one training stage of the toy rectified-flow model");
    std::string stage_name_arg, out_dir, init_dir, ref_dir;
    train_cmd->add_option("--stage", stage_name_arg, "pretrain|sft|dpo|nft")->required();
    train_cmd->add_option("--config", config_path, "config file");
    train_cmd->add_option("--out", out_dir, "output directory")->required();
    train_cmd->add_option("--init", init_dir, "checkpoint to start from");
    train_cmd->add_option("--ref", ref_dir, "frozen reference/snapshot checkpoint (defaults to --init)");
    train_cmd->add_option("--seed", seed_flag, "training seed");
    train_cmd->callback([&] {
        const ff::Stage stage = ff::stage_from_name(stage_name_arg);
        if ((stage == ff::Stage::dpo || stage == ff::Stage::nft) && init_dir.empty())
            throw ff::DataError(std::string(ff::stage_name(stage)) +
                                " needs --init with the frozen starting checkpoint");
        ff::RunConfig run = ff::load_run_config(config_path);
        const uint64_t seed = resolve_seed(seed_flag, run.seed);
        const ff::MlpDims dims{2, run.hidden};
        const ff::SyntheticDataset dataset = ff::make_dataset(run.dataset);

        ff::ParameterVector initial;
        if (!init_dir.empty()) {
            const ff::Checkpoint ck = ff::load_checkpoint(init_dir);
            if (ck.dims.data_dim != dims.data_dim || ck.dims.hidden != dims.hidden)
                throw ff::DataError("checkpoint model shape does not match the config");
            initial = ck.params;
        } else {
            initial = ff::init_params(dims, seed);
        }
        std::optional<ff::ParameterVector> reference;
        if (!ref_dir.empty()) reference = ff::load_checkpoint(ref_dir).params;

        ff::TrainConfig tc = ff::make_train_config(run, stage, seed);
        const ff::StageResult result =
            ff::train_stage(tc, dims, dataset, initial, reference ? &*reference : nullptr);

        std::filesystem::create_directories(out_dir);
        ff::write_metrics_csv(out_dir + "/metrics.csv", result.log, run.hash);
        ff::save_checkpoint(out_dir, dims, result.params, result.ema, run.hash);
        const auto samples =
            ff::euler_sample(dims, result.params, 1024, 32, ff::mix_seed(seed, 0x5A39ULL));
        ff::write_samples_csv(out_dir + "/samples.csv", samples);
    });

    // ---- report ----
    auto* report_cmd = app.add_subcommand("report", "Summarize metrics files into JSON + CSV");
    std::vector<std::string> metrics_paths;
    std::string report_out = ".";
    report_cmd->add_option("--metrics", metrics_paths, "metrics CSV files")->required()->expected(-1);
    report_cmd->add_option("--out", report_out, "output directory (default .)");
    report_cmd->callback([&] {
        const json report = ff::build_report(metrics_paths);
        ff::write_report(report, report_out);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << std::flush;
        return 1;
    } catch (const ff::DataError& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    } catch (const ff::TrainDivergence& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 2;
    }
    return rc;
}
