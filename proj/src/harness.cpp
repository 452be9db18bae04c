#include "mstr/harness.h"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <stdexcept>

#include "mstr/decoder_lm.h"
#include "mstr/encoder.h"
#include "mstr/fdcheck.h"
#include "mstr/mocha.h"
#include "mstr/rng.h"
#include "mstr/serialize.h"

namespace mstr {
namespace {

// Seed-stream tags, disjoint from the generator/training tags used elsewhere.
constexpr uint64_t kStreamInit = 5;       // model parameter init, from train.seed
constexpr uint64_t kStreamBatch = 6;      // batch index draws, from train.seed
constexpr uint64_t kStreamGradData = 7;   // gradcheck fixture corpus
constexpr uint64_t kStreamGradNoise = 8;  // gradcheck adapter perturbation

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    return out;
}

void finish_out(std::ofstream& out, const std::string& path) {
    out.flush();
    if (!out) throw IoError("write to '" + path + "' failed");
}

void check_geometry(const SynthCorpus& corpus, const RunConfig& cfg) {
    if (corpus.vocab_size != cfg.synth_vocab_size || corpus.feat_dim != cfg.synth_feat_dim)
        throw ConfigError("dataset geometry (vocab=" + std::to_string(corpus.vocab_size) +
                          ", feat=" + std::to_string(corpus.feat_dim) +
                          ") does not match the config (vocab=" +
                          std::to_string(cfg.synth_vocab_size) +
                          ", feat=" + std::to_string(cfg.synth_feat_dim) + ")");
}

// Checkpoint snapshot + decode-time overrides -> validated config.
RunConfig config_from_checkpoint(const std::string& ckpt_path,
                                 const std::vector<std::pair<std::string, std::string>>& overrides) {
    TensorTable table = read_tensor_table(ckpt_path, kCheckpointMagic);
    RunConfig cfg;
    cfg.apply_text(table.text);
    for (const auto& kv : overrides) cfg.set_kv(kv.first, kv.second);
    cfg.validate();
    return cfg;
}

std::string join_tokens(const std::vector<int64_t>& toks) {
    std::string s;
    for (size_t i = 0; i < toks.size(); ++i) {
        if (i) s += ' ';
        s += std::to_string(toks[i]);
    }
    return s;
}

int64_t parse_token_id(const std::string& text) {
    size_t used = 0;
    long long v = 0;
    try {
        v = std::stoll(text, &used);
    } catch (const std::exception&) {
        throw IoError("bad token id '" + text + "' in hypothesis file");
    }
    if (used != text.size()) throw IoError("bad token id '" + text + "' in hypothesis file");
    return static_cast<int64_t>(v);
}

std::vector<int64_t> parse_token_field(const std::string& field) {
    std::vector<int64_t> toks;
    size_t pos = 0;
    while (pos < field.size()) {
        size_t sp = field.find(' ', pos);
        if (sp == std::string::npos) sp = field.size();
        if (sp > pos) toks.push_back(parse_token_id(field.substr(pos, sp - pos)));
        pos = sp + 1;
    }
    return toks;
}

}  // namespace

// ---------------------------------------------------------------------------
// Transcript scoring
// ---------------------------------------------------------------------------

double CerResult::rate() const {
    return static_cast<double>(distance) / static_cast<double>(ref_len);
}

CerResult token_error_rate(const std::vector<int64_t>& ref, const std::vector<int64_t>& hyp) {
    CerResult r;
    if (ref.empty()) {
        r.distance = static_cast<int64_t>(hyp.size());
        r.ref_len = 1;
        r.empty_reference = true;
        return r;
    }
    r.ref_len = static_cast<int64_t>(ref.size());

    // Two-row Levenshtein over (hyp rows) x (ref columns), unit costs.
    std::vector<int64_t> prev(ref.size() + 1), cur(ref.size() + 1);
    for (size_t j = 0; j <= ref.size(); ++j) prev[j] = static_cast<int64_t>(j);
    for (size_t i = 1; i <= hyp.size(); ++i) {
        cur[0] = static_cast<int64_t>(i);
        for (size_t j = 1; j <= ref.size(); ++j) {
            const int64_t sub = prev[j - 1] + (hyp[i - 1] == ref[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    r.distance = prev[ref.size()];
    return r;
}

void CorpusScore::add(const CerResult& r) {
    distance += r.distance;
    ref_len += r.ref_len;
    utterances += 1;
    empty_references += r.empty_reference ? 1 : 0;
}

double CorpusScore::rate() const {
    if (ref_len == 0) return 0.0;
    return static_cast<double>(distance) / static_cast<double>(ref_len);
}

std::vector<int64_t> strip_specials(const std::vector<int64_t>& tokens, int64_t bos, int64_t eos) {
    std::vector<int64_t> out;
    out.reserve(tokens.size());
    for (int64_t t : tokens)
        if (t != bos && t != eos) out.push_back(t);
    return out;
}

// ---------------------------------------------------------------------------
// Deterministic CSV
// ---------------------------------------------------------------------------

std::string csv_num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::vector<std::string>> read_csv_rows(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    std::vector<std::vector<std::string>> rows;
    size_t pos = 0;
    while (pos < text.size()) {
        size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) nl = text.size();
        std::string line = text.substr(pos, nl - pos);
        pos = nl + 1;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        size_t f = 0;
        while (true) {
            size_t c = line.find(',', f);
            if (c == std::string::npos) {
                fields.push_back(line.substr(f));
                break;
            }
            fields.push_back(line.substr(f, c - f));
            f = c + 1;
        }
        rows.push_back(std::move(fields));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Corpus decoding
// ---------------------------------------------------------------------------

DecodeMode decode_mode_from(const std::string& name) {
    if (name == "stream-greedy") return DecodeMode::kStreamGreedy;
    if (name == "nonstream-greedy") return DecodeMode::kNonstreamGreedy;
    if (name == "nonstream-beam") return DecodeMode::kNonstreamBeam;
    throw ConfigError("unknown decode mode '" + name +
                      "' (expected stream-greedy | nonstream-greedy | nonstream-beam)");
}

const char* decode_mode_name(DecodeMode mode) {
    switch (mode) {
        case DecodeMode::kStreamGreedy: return "stream-greedy";
        case DecodeMode::kNonstreamGreedy: return "nonstream-greedy";
        case DecodeMode::kNonstreamBeam: return "nonstream-beam";
    }
    throw ContractError("decode_mode_name: bad mode");
}

TrainModels build_models(ParamStore& store, const RunConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    TrainModels m;
    m.enc = build_encoder(store, cfg, rng);
    m.mocha = build_mocha(store, cfg, rng);
    m.lm = build_lm(store, cfg, rng);
    return m;
}

UttDecode decode_utterance(ParamStore& store, const TrainModels& models, const RunConfig& cfg,
                           const SynthUtterance& utt, DecodeMode mode) {
    UttDecode r;
    r.id = utt.id;
    const int64_t bos = cfg.bos_id(), eos = cfg.eos_id();
    if (mode == DecodeMode::kStreamGreedy) {
        StreamSession sess(store, models.enc, models.mocha, models.lm, cfg);
        sess.feed_audio(utt.frames, true);
        sess.finalize();
        r.emissions = sess.emissions();
        r.truncated = sess.truncated();
        r.hyp = strip_specials(sess.transcript(), bos, eos);
    } else {
        const Tensor h = encode_parallel(store, models.enc, utt.frames);
        const int64_t width = mode == DecodeMode::kNonstreamBeam ? cfg.stream_beam_size : 1;
        // Every symbol owns at least one frame, so the frame count bounds the
        // transcript; the finalize cap supplies slack for a missing EOS.
        const int64_t max_new = utt.num_frames() + cfg.stream_finalize_cap;
        r.hyp = strip_specials(beam_search_nonstream(store, models.lm, h, width, max_new, bos, eos),
                               bos, eos);
    }
    return r;
}

std::vector<UttDecode> decode_corpus(ParamStore& store, const TrainModels& models,
                                     const RunConfig& cfg, const SynthCorpus& corpus,
                                     DecodeMode mode, int jobs) {
    check(jobs >= 1, "decode_corpus: jobs must be >= 1");
    const int64_t n = static_cast<int64_t>(corpus.utterances.size());
    std::vector<UttDecode> out(static_cast<size_t>(n));
    if (jobs == 1) {
        for (int64_t i = 0; i < n; ++i)
            out[static_cast<size_t>(i)] =
                decode_utterance(store, models, cfg, corpus.utterances[static_cast<size_t>(i)], mode);
        return out;
    }

    // Utterances are independent and the store is only read, so they can run
    // concurrently; per-utterance results do not depend on the schedule.
    std::atomic<bool> failed{false};
    std::exception_ptr err;
#pragma omp parallel for schedule(dynamic, 1) num_threads(jobs)
    for (int64_t i = 0; i < n; ++i) {
        if (failed.load(std::memory_order_relaxed)) continue;
        try {
            out[static_cast<size_t>(i)] =
                decode_utterance(store, models, cfg, corpus.utterances[static_cast<size_t>(i)], mode);
        } catch (...) {
#pragma omp critical(mstr_decode_corpus_err)
            {
                if (!failed.exchange(true)) err = std::current_exception();
            }
        }
    }
    if (err) std::rethrow_exception(err);
    return out;
}

// ---------------------------------------------------------------------------
// Latency aggregation and the metrics row
// ---------------------------------------------------------------------------

CorpusLatency aggregate_latency(const std::vector<LatencyReport>& reports) {
    CorpusLatency agg;
    double sum_first = 0.0, sum_mid = 0.0, sum_last = 0.0;
    int64_t delay_sum = 0, with_stats = 0;
    for (const LatencyReport& rep : reports) {
        if (!rep.aligned) {
            agg.unaligned += 1;
            continue;
        }
        agg.aligned += 1;
        if (rep.scored == 0) continue;  // aligned but only EOS was emitted
        with_stats += 1;
        sum_first += rep.first;
        sum_mid += rep.mid;
        sum_last += rep.last;
        agg.scored += rep.scored;
        for (int64_t d : rep.delays) delay_sum += d;
    }
    if (with_stats > 0) {
        agg.first = sum_first / static_cast<double>(with_stats);
        agg.mid = sum_mid / static_cast<double>(with_stats);
        agg.last = sum_last / static_cast<double>(with_stats);
    }
    if (agg.scored > 0) agg.avg = static_cast<double>(delay_sum) / static_cast<double>(agg.scored);
    return agg;
}

const char kMetricsHeader[] = "system,mode,cer,first,mid,last,avg";

std::string metrics_line(const MetricsRow& row) {
    std::string s = row.system + ',' + row.mode + ',' + csv_num(row.cer) + ',';
    if (row.has_latency) {
        s += csv_num(row.first_ms) + ',' + csv_num(row.mid_ms) + ',' + csv_num(row.last_ms) + ',' +
             csv_num(row.avg_ms);
    } else {
        s += ",,,";
    }
    return s;
}

// ---------------------------------------------------------------------------
// Command drivers
// ---------------------------------------------------------------------------

void cmd_gendata(const RunConfig& cfg, const std::string& out_dir, std::ostream& log) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);

    // One generative stream: train and test share symbol prototypes and are
    // disjoint by utterance index (test is the held-out tail).
    const int64_t total = cfg.synth_num_train + cfg.synth_num_test;
    SynthCorpus all = generate_corpus(cfg, cfg.synth_seed, total, "u");

    SynthCorpus train, test;
    train.vocab_size = test.vocab_size = all.vocab_size;
    train.feat_dim = test.feat_dim = all.feat_dim;
    train.utterances.assign(all.utterances.begin(), all.utterances.begin() + cfg.synth_num_train);
    test.utterances.assign(all.utterances.begin() + cfg.synth_num_train, all.utterances.end());

    save_dataset(out_dir + "/train.msds", train);
    save_dataset(out_dir + "/test.msds", test);
    write_sidecar(out_dir + "/train.txt", train);
    write_sidecar(out_dir + "/test.txt", test);

    const Tensor protos = symbol_prototypes(cfg.synth_seed, cfg.synth_vocab_size, cfg.synth_feat_dim);
    const double oracle = nearest_prototype_error(test, protos);
    log << "wrote " << cfg.synth_num_train << " train / " << cfg.synth_num_test
        << " test utterances to " << out_dir << "\n";
    log << "nearest-prototype token error on the held-out split: " << oracle << "\n";
}

int64_t cmd_train(const RunConfig& cfg, const std::string& data_path, const std::string& out_dir,
                  const std::string& suffix, std::ostream& log) {
    cfg.validate();
    const SynthCorpus corpus = load_dataset(data_path);
    check_geometry(corpus, cfg);
    if (corpus.utterances.empty()) throw IoError("dataset '" + data_path + "' holds no utterances");
    std::filesystem::create_directories(out_dir);

    ParamStore store;
    TrainModels models = build_models(store, cfg, derive_seed(cfg.train_seed, kStreamInit));
    Trainer trainer(store, models, cfg);
    Rng batch_rng(derive_seed(cfg.train_seed, kStreamBatch));

    const std::string csv_path = out_dir + "/losses" + suffix + ".csv";
    std::ofstream csv = open_out(csv_path);
    csv << "step,lr,l_llm,l_mocha,l_minlt,l_total\n";

    const int64_t n = static_cast<int64_t>(corpus.utterances.size());
    std::vector<const SynthUtterance*> batch(static_cast<size_t>(cfg.train_batch_size));
    for (int64_t s = 0; s < cfg.train_total_steps; ++s) {
        for (auto& slot : batch)
            slot = &corpus.utterances[static_cast<size_t>(batch_rng.uniform_int(0, n - 1))];
        const StepMode mode = trainer.draw_mode();
        const LossBundle lb = trainer.train_step(batch, mode);
        const double lr = lr_triangular(s, cfg.train_lr_max, cfg.train_lr_min, cfg.train_cycle_steps);
        csv << s << ',' << csv_num(lr) << ',' << csv_num(lb.l_llm) << ',' << csv_num(lb.l_mocha)
            << ',' << csv_num(lb.l_minlt) << ',' << csv_num(lb.l_total) << '\n';
        if (cfg.train_log_every > 0 &&
            ((s + 1) % cfg.train_log_every == 0 || s + 1 == cfg.train_total_steps)) {
            log << "step " << (s + 1) << "/" << cfg.train_total_steps << "  lr=" << lr
                << "  l_llm=" << lb.l_llm << "  l_mocha=" << lb.l_mocha << "  l_minlt=" << lb.l_minlt
                << "  l_total=" << lb.l_total << "\n";
        }
    }
    finish_out(csv, csv_path);
    csv.close();

    const std::string ckpt_path = out_dir + "/ckpt" + suffix + ".mstr";
    checkpoint_save(ckpt_path, store, trainer.step(), cfg);
    log << "saved checkpoint " << ckpt_path << " at step " << trainer.step() << "\n";
    return trainer.step();
}

void cmd_decode(const std::string& ckpt_path, const std::string& data_path, DecodeMode mode,
                const std::string& out_csv, int jobs,
                const std::vector<std::pair<std::string, std::string>>& overrides,
                std::ostream& log) {
    const RunConfig cfg = config_from_checkpoint(ckpt_path, overrides);
    ParamStore store;
    TrainModels models = build_models(store, cfg, derive_seed(cfg.train_seed, kStreamInit));
    const int64_t step = checkpoint_load(ckpt_path, store);

    const SynthCorpus corpus = load_dataset(data_path);
    check_geometry(corpus, cfg);
    const std::vector<UttDecode> results = decode_corpus(store, models, cfg, corpus, mode, jobs);

    std::ofstream csv = open_out(out_csv);
    csv << "utt,mode,tokens\n";
    int64_t truncated = 0;
    for (const UttDecode& r : results) {
        csv << r.id << ',' << decode_mode_name(mode) << ',' << join_tokens(r.hyp) << '\n';
        truncated += r.truncated ? 1 : 0;
    }
    finish_out(csv, out_csv);

    log << "decoded " << results.size() << " utterances with " << decode_mode_name(mode)
        << " (checkpoint step " << step << ") -> " << out_csv << "\n";
    if (truncated > 0) log << truncated << " utterances hit the finalize cap\n";
}

void cmd_latency(const std::string& ckpt_path, const std::string& data_path,
                 const std::string& out_dir, const std::string& system_label, int jobs,
                 const std::vector<std::pair<std::string, std::string>>& overrides,
                 std::ostream& log) {
    const RunConfig cfg = config_from_checkpoint(ckpt_path, overrides);
    ParamStore store;
    TrainModels models = build_models(store, cfg, derive_seed(cfg.train_seed, kStreamInit));
    checkpoint_load(ckpt_path, store);

    const SynthCorpus corpus = load_dataset(data_path);
    check_geometry(corpus, cfg);
    std::filesystem::create_directories(out_dir);
    const std::vector<UttDecode> results =
        decode_corpus(store, models, cfg, corpus, DecodeMode::kStreamGreedy, jobs);

    const std::string em_path = out_dir + "/emissions.csv";
    std::ofstream em = open_out(em_path);
    em << "utt,idx,token,t,avail,b,delay\n";

    std::vector<LatencyReport> reports;
    reports.reserve(results.size());
    CorpusScore score;
    for (size_t i = 0; i < results.size(); ++i) {
        const SynthUtterance& utt = corpus.utterances[i];
        const UttDecode& res = results[i];
        const LatencyReport rep =
            latency_report(res.emissions, utt.boundaries, cfg.eos_id(), cfg.enc_frame_ms);
        reports.push_back(rep);
        score.add(token_error_rate(utt.symbols(), res.hyp));
        for (size_t k = 0; k < res.emissions.size(); ++k) {
            const Emission& e = res.emissions[k];
            em << utt.id << ',' << e.index << ',' << e.token << ',' << e.trigger << ','
               << e.available << ',';
            if (rep.aligned)
                em << utt.boundaries[k] << ',' << (e.trigger - utt.boundaries[k]);
            else
                em << ',';
            em << '\n';
        }
    }
    finish_out(em, em_path);

    const CorpusLatency agg = aggregate_latency(reports);
    MetricsRow row;
    row.system = system_label;
    row.mode = decode_mode_name(DecodeMode::kStreamGreedy);
    row.cer = score.rate();
    row.has_latency = agg.has_stats();
    row.first_ms = agg.first * cfg.enc_frame_ms;
    row.mid_ms = agg.mid * cfg.enc_frame_ms;
    row.last_ms = agg.last * cfg.enc_frame_ms;
    row.avg_ms = agg.avg * cfg.enc_frame_ms;

    const std::string mt_path = out_dir + "/metrics.csv";
    std::ofstream mt = open_out(mt_path);
    mt << kMetricsHeader << '\n' << metrics_line(row) << '\n';
    finish_out(mt, mt_path);

    log << "stream cer=" << row.cer << " over " << results.size() << " utterances; " << agg.aligned
        << " aligned";
    if (agg.unaligned > 0) log << ", " << agg.unaligned << " excluded from latency statistics";
    log << "\n";
    if (row.has_latency) {
        log << "delay ms: first=" << row.first_ms << " mid=" << row.mid_ms
            << " last=" << row.last_ms << " avg=" << row.avg_ms << "\n";
    }
}

MetricsRow cmd_eval(const std::string& data_path, const std::string& hyp_csv,
                    const std::string& out_csv, const std::string& system_label,
                    std::ostream& log) {
    const SynthCorpus corpus = load_dataset(data_path);
    const std::vector<std::vector<std::string>> rows = read_csv_rows(hyp_csv);
    if (rows.empty() || rows[0] != std::vector<std::string>{"utt", "mode", "tokens"})
        throw IoError("hypothesis file '" + hyp_csv + "' lacks the utt,mode,tokens header");

    std::map<std::string, std::vector<int64_t>> hyps;
    std::string mode_name;
    for (size_t i = 1; i < rows.size(); ++i) {
        const auto& row = rows[i];
        if (row.size() != 3)
            throw IoError("hypothesis file '" + hyp_csv + "' row " + std::to_string(i) +
                          " does not have 3 fields");
        if (mode_name.empty())
            mode_name = row[1];
        else if (mode_name != row[1])
            throw IoError("hypothesis file '" + hyp_csv + "' mixes decode modes '" + mode_name +
                          "' and '" + row[1] + "'");
        if (!hyps.emplace(row[0], parse_token_field(row[2])).second)
            throw IoError("hypothesis file '" + hyp_csv + "' repeats utterance '" + row[0] + "'");
    }

    const int64_t bos = corpus.vocab_size, eos = corpus.vocab_size + 1;
    CorpusScore score;
    for (const SynthUtterance& utt : corpus.utterances) {
        auto it = hyps.find(utt.id);
        if (it == hyps.end())
            throw IoError("hypothesis file '" + hyp_csv + "' lacks utterance '" + utt.id + "'");
        score.add(token_error_rate(utt.symbols(), strip_specials(it->second, bos, eos)));
        hyps.erase(it);
    }
    if (!hyps.empty())
        throw IoError("hypothesis file '" + hyp_csv + "' names an unknown utterance '" +
                      hyps.begin()->first + "'");

    MetricsRow row;
    row.system = system_label;
    row.mode = mode_name.empty() ? "unknown" : mode_name;
    row.cer = score.rate();
    if (!out_csv.empty()) {
        std::ofstream mt = open_out(out_csv);
        mt << kMetricsHeader << '\n' << metrics_line(row) << '\n';
        finish_out(mt, out_csv);
    }

    log << "cer=" << csv_num(row.cer) << " (edit distance " << score.distance << " over "
        << score.ref_len << " reference tokens, " << score.utterances << " utterances)\n";
    if (score.empty_references > 0)
        log << score.empty_references << " empty references scored against nominal length 1\n";
    return row;
}

bool cmd_gradcheck(uint64_t seed, std::ostream& log) {
    // Small but fully representative: adapters on, multiple heads, chunked
    // encoding, all three loss components live.
    RunConfig cfg;
    cfg.synth_vocab_size = 4;
    cfg.synth_feat_dim = 6;
    cfg.synth_len_min = 2;
    cfg.synth_len_max = 4;
    cfg.synth_frames_min = 2;
    cfg.synth_frames_max = 3;
    cfg.enc_blocks = 1;
    cfg.enc_d_model = 8;
    cfg.enc_heads = 2;
    cfg.enc_ffn = 12;
    cfg.enc_chunk_frames = 3;
    cfg.enc_left_context = 6;
    cfg.mocha_d_att = 4;
    cfg.mocha_d_policy = 4;
    cfg.mocha_window = 2;
    cfg.lm_layers = 1;
    cfg.lm_d_model = 8;
    cfg.lm_heads = 2;
    cfg.lm_ffn = 12;
    cfg.lm_max_len = 32;
    cfg.lm_lora_rank = 2;
    cfg.lm_lora_alpha = 4.0;
    cfg.validate();

    ParamStore store;
    TrainModels models = build_models(store, cfg, derive_seed(seed, kStreamInit));

    // Fresh adapters are exact no-ops (zero up-factor), which would hide the
    // down-factor gradients; move them off zero first.
    Rng noise(derive_seed(seed, kStreamGradNoise));
    store.for_each([&](ParamStore::Entry& e) {
        if (e.name.find(".lora_up") == std::string::npos) return;
        for (int64_t i = 0; i < e.value.numel(); ++i)
            e.value.set(i, e.value.get(i) + 0.3 * noise.normal());
    });

    const SynthCorpus fixture = generate_corpus(cfg, derive_seed(seed, kStreamGradData), 1, "g");
    const SynthUtterance& utt = fixture.utterances[0];
    const std::vector<const SynthUtterance*> batch = {&utt};

    const LossBuilder build = [&](Tape& tape, Bindings& binds) {
        return batch_loss_on_tape(tape, binds, models, cfg, MinltMode::kExpected,
                                  LossPlacement::kToken, batch, StepMode::kStream,
                                  /*noise_salt=*/7)
            .total;
    };

    std::vector<std::string> names;
    store.for_each([&](ParamStore::Entry& e) { names.push_back(e.name); });
    const std::vector<FdReport> reports = finite_diff_check(store, names, build);

    bool all_pass = true;
    for (const FdReport& r : reports) {
        all_pass = all_pass && r.pass;
        log << (r.pass ? "ok   " : "FAIL ") << r.param << "  max_rel_err=" << r.max_rel_err << "\n";
    }
    log << (all_pass ? "gradient check passed" : "gradient check FAILED") << " ("
        << reports.size() << " parameter tensors)\n";
    return all_pass;
}

}  // namespace mstr
