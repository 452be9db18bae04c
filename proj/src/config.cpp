#include "mstr/config.h"

#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace mstr {

namespace {

std::string fmt_i64(int64_t v) { return std::to_string(v); }

std::string fmt_u64(uint64_t v) { return std::to_string(v); }

std::string fmt_f64(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

int64_t parse_i64(const std::string& key, const std::string& s) {
    char* end = nullptr;
    errno = 0;
    long long v = std::strtoll(s.c_str(), &end, 10);
    if (errno != 0 || end == s.c_str() || *end != '\0') {
        throw ConfigError("config key '" + key + "': expected integer, got '" + s + "'");
    }
    return v;
}

uint64_t parse_u64(const std::string& key, const std::string& s) {
    char* end = nullptr;
    errno = 0;
    unsigned long long v = std::strtoull(s.c_str(), &end, 10);
    if (errno != 0 || end == s.c_str() || *end != '\0' || s.find('-') != std::string::npos) {
        throw ConfigError("config key '" + key + "': expected unsigned integer, got '" + s +
                          "'");
    }
    return v;
}

double parse_f64(const std::string& key, const std::string& s) {
    char* end = nullptr;
    errno = 0;
    double v = std::strtod(s.c_str(), &end);
    if (errno != 0 || end == s.c_str() || *end != '\0') {
        throw ConfigError("config key '" + key + "': expected number, got '" + s + "'");
    }
    return v;
}

ConfigField field_i64(const char* key, const char* doc, int64_t RunConfig::* member) {
    return {key, doc, [member](const RunConfig& c) { return fmt_i64(c.*member); },
            [key, member](RunConfig& c, const std::string& s) { c.*member = parse_i64(key, s); }};
}

ConfigField field_u64(const char* key, const char* doc, uint64_t RunConfig::* member) {
    return {key, doc, [member](const RunConfig& c) { return fmt_u64(c.*member); },
            [key, member](RunConfig& c, const std::string& s) { c.*member = parse_u64(key, s); }};
}

ConfigField field_f64(const char* key, const char* doc, double RunConfig::* member) {
    return {key, doc, [member](const RunConfig& c) { return fmt_f64(c.*member); },
            [key, member](RunConfig& c, const std::string& s) { c.*member = parse_f64(key, s); }};
}

ConfigField field_str(const char* key, const char* doc, std::string RunConfig::* member) {
    return {key, doc, [member](const RunConfig& c) { return c.*member; },
            [member](RunConfig& c, const std::string& s) { c.*member = s; }};
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

void require(bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
}

}  // namespace

const std::vector<ConfigField>& config_fields() {
    static const std::vector<ConfigField> fields = {
        field_i64("synth.vocab_size", "symbol vocabulary size (BOS/EOS extra)",
                  &RunConfig::synth_vocab_size),
        field_i64("synth.len_min", "min symbols per utterance", &RunConfig::synth_len_min),
        field_i64("synth.len_max", "max symbols per utterance", &RunConfig::synth_len_max),
        field_i64("synth.frames_min", "min frames emitted per token",
                  &RunConfig::synth_frames_min),
        field_i64("synth.frames_max", "max frames emitted per token",
                  &RunConfig::synth_frames_max),
        field_i64("synth.feat_dim", "feature vector width", &RunConfig::synth_feat_dim),
        field_f64("synth.noise_sigma", "per-dimension Gaussian feature noise",
                  &RunConfig::synth_noise_sigma),
        field_u64("synth.seed", "corpus generation seed", &RunConfig::synth_seed),
        field_i64("synth.num_train", "training utterances", &RunConfig::synth_num_train),
        field_i64("synth.num_test", "test utterances", &RunConfig::synth_num_test),

        field_i64("encoder.blocks", "self-attention blocks", &RunConfig::enc_blocks),
        field_i64("encoder.d_model", "encoder width", &RunConfig::enc_d_model),
        field_i64("encoder.heads", "encoder attention heads", &RunConfig::enc_heads),
        field_i64("encoder.ffn", "encoder feed-forward width", &RunConfig::enc_ffn),
        field_i64("encoder.chunk_frames", "chunk core size in frames",
                  &RunConfig::enc_chunk_frames),
        field_i64("encoder.left_context", "history frames visible to a chunk",
                  &RunConfig::enc_left_context),
        field_f64("encoder.frame_ms", "frame duration metadata (ms)",
                  &RunConfig::enc_frame_ms),

        field_i64("mocha.d_att", "monotonic energy hidden width", &RunConfig::mocha_d_att),
        field_i64("mocha.d_policy", "policy recurrent state width",
                  &RunConfig::mocha_d_policy),
        field_i64("mocha.window", "chunkwise attention window", &RunConfig::mocha_window),
        field_f64("mocha.threshold", "inference trigger threshold on p",
                  &RunConfig::mocha_threshold),
        field_f64("mocha.noise_sigma", "training-time energy noise stddev",
                  &RunConfig::mocha_noise_sigma),
        field_f64("mocha.r_init", "initial energy offset (biases p low)",
                  &RunConfig::mocha_r_init),

        field_i64("lm.layers", "decoder layers", &RunConfig::lm_layers),
        field_i64("lm.d_model", "decoder width", &RunConfig::lm_d_model),
        field_i64("lm.heads", "decoder attention heads", &RunConfig::lm_heads),
        field_i64("lm.ffn", "decoder feed-forward width", &RunConfig::lm_ffn),
        field_i64("lm.max_len", "maximum mixed-sequence length", &RunConfig::lm_max_len),
        field_i64("lm.lora_rank", "low-rank adapter rank (q/k/v/o)",
                  &RunConfig::lm_lora_rank),
        field_f64("lm.lora_alpha", "adapter scaling numerator (s = alpha/rank)",
                  &RunConfig::lm_lora_alpha),
        field_str("lm.train_policy", "full | adapters-only | base-only",
                  &RunConfig::lm_train_policy),
        field_str("lm.loss_position", "token | frame (where each target is scored)",
                  &RunConfig::lm_loss_position),

        field_f64("train.lambda", "latency loss weight", &RunConfig::train_lambda),
        field_f64("train.lr_max", "triangular schedule peak", &RunConfig::train_lr_max),
        field_f64("train.lr_min", "triangular schedule floor", &RunConfig::train_lr_min),
        field_i64("train.cycle_steps", "triangular schedule period",
                  &RunConfig::train_cycle_steps),
        field_i64("train.total_steps", "optimizer steps", &RunConfig::train_total_steps),
        field_i64("train.batch_size", "utterances per step", &RunConfig::train_batch_size),
        field_str("train.joint_mode", "stream-only | nonstream-only | joint",
                  &RunConfig::train_joint_mode),
        field_f64("train.joint_stream_prob", "P(streaming arrangement) in joint mode",
                  &RunConfig::train_joint_stream_prob),
        field_str("train.minlt_mode", "expected-boundary | literal",
                  &RunConfig::train_minlt_mode),
        field_u64("train.seed", "training seed (batching, noise, init)",
                  &RunConfig::train_seed),
        field_f64("train.beta1", "first-moment decay", &RunConfig::train_beta1),
        field_f64("train.beta2", "second-moment decay", &RunConfig::train_beta2),
        field_f64("train.eps", "optimizer denominator floor", &RunConfig::train_eps),
        field_f64("train.weight_decay", "decoupled weight decay", &RunConfig::train_weight_decay),
        field_f64("train.clip", "global gradient-norm clip (0 disables)",
                  &RunConfig::train_clip),
        field_str("train.dtype", "f64 | f32 compute precision", &RunConfig::train_dtype),
        field_i64("train.log_every", "console echo period in steps",
                  &RunConfig::train_log_every),

        field_i64("stream.finalize_cap", "max forced tokens after audio ends",
                  &RunConfig::stream_finalize_cap),
        field_i64("stream.beam_size", "non-streaming beam width", &RunConfig::stream_beam_size),
    };
    return fields;
}

void RunConfig::set_kv(const std::string& key, const std::string& value) {
    for (const auto& f : config_fields()) {
        if (key == f.key) {
            f.set(*this, value);
            return;
        }
    }
    throw ConfigError("unknown config key '" + key + "'");
}

void RunConfig::apply_text(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": expected key=value, got '" + line + "'");
        }
        set_kv(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    RunConfig cfg;
    cfg.apply_text(buf.str());
    cfg.validate();
    return cfg;
}

void RunConfig::validate() const {
    require(synth_vocab_size >= 2, "synth.vocab_size must be >= 2");
    require(synth_len_min >= 1 && synth_len_min <= synth_len_max,
            "synth.len_min/len_max must form a nonempty range");
    require(synth_frames_min >= 1 && synth_frames_min <= synth_frames_max,
            "synth.frames_min/frames_max must form a nonempty range");
    require(synth_feat_dim >= 1, "synth.feat_dim must be >= 1");
    require(synth_noise_sigma >= 0.0, "synth.noise_sigma must be >= 0");
    require(synth_num_train >= 1, "synth.num_train must be >= 1");
    require(synth_num_test >= 1, "synth.num_test must be >= 1");

    require(enc_blocks >= 1, "encoder.blocks must be >= 1");
    require(enc_d_model >= 1, "encoder.d_model must be >= 1");
    require(enc_heads >= 1 && enc_d_model % enc_heads == 0,
            "encoder.heads must divide encoder.d_model");
    require(enc_ffn >= 1, "encoder.ffn must be >= 1");
    require(enc_chunk_frames >= 1, "encoder.chunk_frames must be >= 1");
    require(enc_left_context >= 0, "encoder.left_context must be >= 0");
    require(enc_frame_ms > 0.0, "encoder.frame_ms must be > 0");

    require(mocha_d_att >= 1, "mocha.d_att must be >= 1");
    require(mocha_d_policy >= 1, "mocha.d_policy must be >= 1");
    require(mocha_window >= 1, "mocha.window must be >= 1");
    require(mocha_threshold > 0.0 && mocha_threshold < 1.0,
            "mocha.threshold must be in (0, 1)");
    require(mocha_noise_sigma >= 0.0, "mocha.noise_sigma must be >= 0");

    require(lm_layers >= 1, "lm.layers must be >= 1");
    require(lm_d_model >= 1, "lm.d_model must be >= 1");
    require(lm_heads >= 1 && lm_d_model % lm_heads == 0, "lm.heads must divide lm.d_model");
    require(lm_ffn >= 1, "lm.ffn must be >= 1");
    require(lm_max_len >= 2, "lm.max_len must be >= 2");
    require(lm_lora_rank >= 1, "lm.lora_rank must be >= 1");
    require(lm_lora_alpha > 0.0, "lm.lora_alpha must be > 0");
    require(lm_train_policy == "full" || lm_train_policy == "adapters-only" ||
                lm_train_policy == "base-only",
            "lm.train_policy must be full | adapters-only | base-only");
    require(lm_loss_position == "token" || lm_loss_position == "frame",
            "lm.loss_position must be token | frame");

    require(train_lambda >= 0.0, "train.lambda must be >= 0");
    require(train_lr_min >= 0.0 && train_lr_min <= train_lr_max,
            "train.lr_min must be in [0, train.lr_max]");
    require(train_cycle_steps >= 2, "train.cycle_steps must be >= 2");
    require(train_total_steps >= 1, "train.total_steps must be >= 1");
    require(train_batch_size >= 1, "train.batch_size must be >= 1");
    require(train_joint_mode == "stream-only" || train_joint_mode == "nonstream-only" ||
                train_joint_mode == "joint",
            "train.joint_mode must be stream-only | nonstream-only | joint");
    require(train_joint_stream_prob >= 0.0 && train_joint_stream_prob <= 1.0,
            "train.joint_stream_prob must be in [0, 1]");
    require(train_minlt_mode == "expected-boundary" || train_minlt_mode == "literal",
            "train.minlt_mode must be expected-boundary | literal");
    require(train_beta1 >= 0.0 && train_beta1 < 1.0, "train.beta1 must be in [0, 1)");
    require(train_beta2 >= 0.0 && train_beta2 < 1.0, "train.beta2 must be in [0, 1)");
    require(train_eps > 0.0, "train.eps must be > 0");
    require(train_weight_decay >= 0.0, "train.weight_decay must be >= 0");
    require(train_clip >= 0.0, "train.clip must be >= 0");
    require(train_dtype == "f64" || train_dtype == "f32",
            "train.dtype must be f64 | f32");
    require(train_log_every >= 1, "train.log_every must be >= 1");

    require(stream_finalize_cap >= 1, "stream.finalize_cap must be >= 1");
    require(stream_beam_size >= 1, "stream.beam_size must be >= 1");
}

std::string RunConfig::dump(bool with_docs) const {
    std::ostringstream out;
    for (const auto& f : config_fields()) {
        if (with_docs) out << "# " << f.doc << "\n";
        out << f.key << "=" << f.get(*this) << "\n";
    }
    return out.str();
}

std::vector<PresetRun> ablation_preset(const std::string& name) {
    if (name == "full") return {{"", {}}};
    if (name == "no-minlt") return {{"", {{"train.lambda", "0"}}}};
    if (name == "no-joint") {
        return {{"-stream", {{"train.joint_mode", "stream-only"}}},
                {"-nonstream", {{"train.joint_mode", "nonstream-only"}}}};
    }
    if (name == "lora-frozen-base") return {{"", {{"lm.train_policy", "adapters-only"}}}};
    if (name == "full-finetune") return {{"", {{"lm.train_policy", "base-only"}}}};
    throw ConfigError("unknown ablation preset '" + name + "'");
}

}  // namespace mstr
