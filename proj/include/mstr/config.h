#pragma once
// Run configuration: one flat key=value namespace covering every component.
//
// All keys live in a table (config_fields) pairing each key with its
// documented default and a parse/print hook, so the same table drives file
// parsing, --set overrides, validation error messages, and the annotated
// dump written next to checkpoints.  Unknown keys are rejected; parsing is
// order-independent (last assignment wins).

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mstr/common.h"

namespace mstr {

struct RunConfig {
    // synth.* — synthetic corpus
    int64_t synth_vocab_size = 16;   // symbols, excluding BOS/EOS
    int64_t synth_len_min = 5;       // symbols per utterance, inclusive range
    int64_t synth_len_max = 20;
    int64_t synth_frames_min = 3;    // frames emitted per token, inclusive range
    int64_t synth_frames_max = 8;
    int64_t synth_feat_dim = 16;
    double synth_noise_sigma = 0.1;
    uint64_t synth_seed = 1234;
    int64_t synth_num_train = 2000;
    int64_t synth_num_test = 200;

    // encoder.*
    int64_t enc_blocks = 2;
    int64_t enc_d_model = 32;
    int64_t enc_heads = 2;
    int64_t enc_ffn = 64;
    int64_t enc_chunk_frames = 4;
    int64_t enc_left_context = 16;
    double enc_frame_ms = 40.0;      // metadata only; no wall-clock anywhere

    // mocha.*
    int64_t mocha_d_att = 32;
    int64_t mocha_d_policy = 32;
    int64_t mocha_window = 4;
    double mocha_threshold = 0.5;
    double mocha_noise_sigma = 1.0;
    double mocha_r_init = -4.0;

    // lm.*
    int64_t lm_layers = 2;
    int64_t lm_d_model = 64;
    int64_t lm_heads = 4;
    int64_t lm_ffn = 128;
    int64_t lm_max_len = 512;
    int64_t lm_lora_rank = 4;
    double lm_lora_alpha = 8.0;
    // full: adapters plus trainable base; adapters-only: frozen base;
    // base-only: no adapters at all.
    std::string lm_train_policy = "full";
    // token: predict y_i at the y_{i-1} position; frame: at the last frame
    // of segment i.
    std::string lm_loss_position = "token";

    // train.*
    double train_lambda = 0.1;
    double train_lr_max = 3e-3;
    double train_lr_min = 0.0;
    int64_t train_cycle_steps = 2000;
    int64_t train_total_steps = 8000;
    int64_t train_batch_size = 8;
    std::string train_joint_mode = "joint";  // stream-only | nonstream-only | joint
    double train_joint_stream_prob = 0.5;
    std::string train_minlt_mode = "expected-boundary";  // | literal
    uint64_t train_seed = 1;
    double train_beta1 = 0.9;
    double train_beta2 = 0.999;
    double train_eps = 1e-8;
    double train_weight_decay = 0.01;
    double train_clip = 1.0;
    std::string train_dtype = "f64";  // f64 | f32
    int64_t train_log_every = 50;     // console echo period; CSV logs every step

    // stream.*
    int64_t stream_finalize_cap = 32;  // forced token cap after audio ends
    int64_t stream_beam_size = 5;      // non-streaming beam decode width

    // Derived vocabulary layout: symbol ids 0..V-1, then BOS, then EOS.
    int64_t vocab_total() const { return synth_vocab_size + 2; }
    int64_t bos_id() const { return synth_vocab_size; }
    int64_t eos_id() const { return synth_vocab_size + 1; }

    // Assign one key (throws ConfigError on unknown key or bad value).
    void set_kv(const std::string& key, const std::string& value);
    // Parse a key=value file ('#' comments, blank lines allowed).
    static RunConfig from_file(const std::string& path);
    // Apply key=value lines from text (same grammar as the file form).
    void apply_text(const std::string& text);
    // Cross-field invariants; throws ConfigError naming the offending key.
    void validate() const;
    // All keys as "key=value" lines; with_docs adds a comment per key.
    std::string dump(bool with_docs) const;
};

struct ConfigField {
    const char* key;
    const char* doc;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
};

const std::vector<ConfigField>& config_fields();

// One training run produced by an ablation preset: a checkpoint/file suffix
// plus the key overrides to apply on top of the base config.
struct PresetRun {
    std::string suffix;  // empty for single-run presets
    std::vector<std::pair<std::string, std::string>> overrides;
};

// Known presets: full, no-minlt, no-joint (two runs), lora-frozen-base,
// full-finetune.  Unknown name throws ConfigError.
std::vector<PresetRun> ablation_preset(const std::string& name);

}  // namespace mstr
