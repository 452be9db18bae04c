// Command-line front end: dataset generation, training, decoding, latency
// accounting, scoring, and gradient checking.  All heavy lifting lives in
// the library (mstr/harness.h); this file only parses arguments and maps
// exceptions to exit codes:
//   0  success
//   2  configuration error (bad keys, values, presets, modes)
//   3  data error (unreadable or inconsistent files)
//   4  numerical divergence (non-finite training loss, failed gradient check)
//   1  any other failure

#include <cstdint>
#include <exception>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "mstr/common.h"
#include "mstr/config.h"
#include "mstr/harness.h"

namespace {

std::vector<std::pair<std::string, std::string>> parse_sets(const std::vector<std::string>& items) {
    std::vector<std::pair<std::string, std::string>> kv;
    for (const std::string& item : items) {
        const size_t eq = item.find('=');
        if (eq == std::string::npos || eq == 0)
            throw mstr::ConfigError("--set expects key=value, got '" + item + "'");
        kv.emplace_back(item.substr(0, eq), item.substr(eq + 1));
    }
    return kv;
}

mstr::RunConfig base_config(const std::string& config_path,
                            const std::vector<std::pair<std::string, std::string>>& sets) {
    mstr::RunConfig cfg;
    if (!config_path.empty()) cfg = mstr::RunConfig::from_file(config_path);
    for (const auto& kv : sets) cfg.set_kv(kv.first, kv.second);
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"streaming decoder-only speech recognition on synthetic audio"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path,
                   "key=value config file for gendata/train/dump-config; decode and latency "
                   "read their config from the checkpoint (tweak with --set)")
        ->envname("MSTR_CONFIG");
    std::vector<std::string> set_items;
    app.add_option("--set", set_items, "config override key=value (repeatable, applied last)");

    auto* gen = app.add_subcommand("gendata", "generate train/test datasets with gold alignments");
    std::string gen_out = "data";
    gen->add_option("--out", gen_out, "output directory");

    auto* tr = app.add_subcommand("train", "train a model, logging every step to a CSV");
    std::string tr_data, tr_out = "run", tr_mode, tr_preset = "full";
    tr->add_option("--data", tr_data, "training dataset (.msds)")->required();
    tr->add_option("--out", tr_out, "output directory for checkpoint and loss log");
    tr->add_option("--mode", tr_mode, "joint | stream-only | nonstream-only (overrides the config)");
    tr->add_option("--preset", tr_preset,
                   "ablation preset: full | no-minlt | no-joint | lora-frozen-base | full-finetune");

    auto* de = app.add_subcommand("decode", "transcribe a dataset with a trained checkpoint");
    std::string de_ckpt, de_data, de_mode = "stream-greedy", de_out = "hyps.csv";
    int de_jobs = 1;
    de->add_option("--ckpt", de_ckpt, "checkpoint (.mstr)")->required();
    de->add_option("--data", de_data, "dataset (.msds)")->required();
    de->add_option("--mode", de_mode, "stream-greedy | nonstream-greedy | nonstream-beam");
    de->add_option("--out", de_out, "hypothesis CSV path");
    de->add_option("--jobs", de_jobs, "parallel workers across utterances")
        ->check(CLI::PositiveNumber);

    auto* la = app.add_subcommand("latency", "streaming decode with per-emission latency accounting");
    std::string la_ckpt, la_data, la_out = "latency", la_system = "mstr";
    int la_jobs = 1;
    la->add_option("--ckpt", la_ckpt, "checkpoint (.mstr)")->required();
    la->add_option("--data", la_data, "dataset (.msds)")->required();
    la->add_option("--out", la_out, "output directory for emissions.csv and metrics.csv");
    la->add_option("--system", la_system, "system label for the metrics row");
    la->add_option("--jobs", la_jobs, "parallel workers across utterances")
        ->check(CLI::PositiveNumber);

    auto* ev = app.add_subcommand("eval", "score a hypothesis file against gold transcripts");
    std::string ev_data, ev_hyp, ev_out, ev_system = "mstr";
    ev->add_option("--data", ev_data, "reference dataset (.msds)")->required();
    ev->add_option("--hyp", ev_hyp, "hypothesis CSV from decode")->required();
    ev->add_option("--out", ev_out, "optional metrics CSV to write");
    ev->add_option("--system", ev_system, "system label for the metrics row");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the training objective");
    uint64_t gc_seed = 1;
    gc->add_option("--seed", gc_seed, "fixture seed");

    auto* dc = app.add_subcommand("dump-config", "print the effective configuration with docs");

    // Let --config/--set appear after the subcommand name as well as before.
    for (CLI::App* sub : {gen, tr, de, la, ev, gc, dc}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        const auto sets = parse_sets(set_items);
        if (gen->parsed()) {
            mstr::cmd_gendata(base_config(config_path, sets), gen_out, std::cout);
        } else if (tr->parsed()) {
            for (const mstr::PresetRun& run : mstr::ablation_preset(tr_preset)) {
                mstr::RunConfig cfg;
                if (!config_path.empty()) cfg = mstr::RunConfig::from_file(config_path);
                for (const auto& kv : run.overrides) cfg.set_kv(kv.first, kv.second);
                if (!tr_mode.empty()) cfg.set_kv("train.joint_mode", tr_mode);
                for (const auto& kv : sets) cfg.set_kv(kv.first, kv.second);
                if (!run.suffix.empty())
                    std::cout << "=== preset '" << tr_preset << "', run '" << run.suffix
                              << "' ===\n";
                mstr::cmd_train(cfg, tr_data, tr_out, run.suffix, std::cout);
            }
        } else if (de->parsed()) {
            mstr::cmd_decode(de_ckpt, de_data, mstr::decode_mode_from(de_mode), de_out, de_jobs,
                             sets, std::cout);
        } else if (la->parsed()) {
            mstr::cmd_latency(la_ckpt, la_data, la_out, la_system, la_jobs, sets, std::cout);
        } else if (ev->parsed()) {
            mstr::cmd_eval(ev_data, ev_hyp, ev_out, ev_system, std::cout);
        } else if (gc->parsed()) {
            if (!mstr::cmd_gradcheck(gc_seed, std::cout)) {
                std::cerr << "numerical divergence: gradient check failed\n";
                return 4;
            }
        } else if (dc->parsed()) {
            mstr::RunConfig cfg = base_config(config_path, sets);
            cfg.validate();
            std::cout << cfg.dump(true);
        }
        return 0;
    } catch (const mstr::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const mstr::IoError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const mstr::DivergenceError& e) {
        std::cerr << "numerical divergence: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
