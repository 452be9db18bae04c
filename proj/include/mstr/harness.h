#pragma once
// Command-level drivers shared by the mstr command-line tool and the test
// suite: transcript scoring, corpus decoding (serial or parallel across
// utterances), latency aggregation, and the gendata / train / decode /
// latency / eval / gradcheck entry points.
//
// Every artifact these commands write is deterministic: CSV files carry no
// timestamps, doubles are printed with "%.17g" so they round-trip exactly,
// and all randomness flows from config seeds.  Rerunning a command with the
// same inputs reproduces every output byte for byte, at any thread count.
//
// Drivers report failure by throwing: ConfigError for bad settings, IoError
// for unreadable or inconsistent files, DivergenceError for non-finite
// training losses.  The CLI maps these to its exit codes.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "mstr/config.h"
#include "mstr/losses.h"
#include "mstr/params.h"
#include "mstr/stream.h"
#include "mstr/synthdata.h"

namespace mstr {

// ---------------------------------------------------------------------------
// Transcript scoring
// ---------------------------------------------------------------------------

// Unit-cost Levenshtein distance over token ids, normalized by reference
// length.  Callers strip BOS/EOS before scoring (strip_specials below).  An
// empty reference is flagged and scored as one insertion per hypothesis
// token against a nominal length of 1.
struct CerResult {
    int64_t distance = 0;
    int64_t ref_len = 0;  // 1 when the reference was empty
    bool empty_reference = false;

    double rate() const;
};

CerResult token_error_rate(const std::vector<int64_t>& ref, const std::vector<int64_t>& hyp);

// Corpus-level pooling: total edit distance over total reference length.
struct CorpusScore {
    int64_t distance = 0;
    int64_t ref_len = 0;
    int64_t utterances = 0;
    int64_t empty_references = 0;

    void add(const CerResult& r);
    double rate() const;
};

// Copy with every occurrence of the two special ids removed.
std::vector<int64_t> strip_specials(const std::vector<int64_t>& tokens, int64_t bos, int64_t eos);

// ---------------------------------------------------------------------------
// Deterministic CSV
// ---------------------------------------------------------------------------

// "%.17g": enough digits to reproduce the double exactly on read-back.
std::string csv_num(double v);

// Whole-file reader, split on newlines then commas (fields never contain
// either).  Throws IoError when the file cannot be read.
std::vector<std::vector<std::string>> read_csv_rows(const std::string& path);

// ---------------------------------------------------------------------------
// Corpus decoding
// ---------------------------------------------------------------------------

enum class DecodeMode {
    kStreamGreedy,     // incremental read/write policy, greedy token picks
    kNonstreamGreedy,  // full-utterance encode, greedy continuation
    kNonstreamBeam,    // full-utterance encode, width from stream.beam_size
};

DecodeMode decode_mode_from(const std::string& name);  // ConfigError on unknown name
const char* decode_mode_name(DecodeMode mode);

struct UttDecode {
    std::string id;
    std::vector<int64_t> hyp;         // symbol ids only; BOS/EOS already stripped
    std::vector<Emission> emissions;  // streaming mode only, in emission order
    bool truncated = false;           // streaming mode hit the finalize cap
};

// Shared model construction: one init stream drives encoder, attention, and
// decoder in that order, so a (cfg, seed) pair names the parameters exactly.
TrainModels build_models(ParamStore& store, const RunConfig& cfg, uint64_t seed);

UttDecode decode_utterance(ParamStore& store, const TrainModels& models, const RunConfig& cfg,
                           const SynthUtterance& utt, DecodeMode mode);

// Decodes every utterance; results are in corpus order regardless of jobs.
// jobs > 1 distributes utterances across threads — outputs are identical to
// the serial run because every kernel is bit-identical at any thread count.
std::vector<UttDecode> decode_corpus(ParamStore& store, const TrainModels& models,
                                     const RunConfig& cfg, const SynthCorpus& corpus,
                                     DecodeMode mode, int jobs);

// ---------------------------------------------------------------------------
// Latency aggregation and the metrics row
// ---------------------------------------------------------------------------

// Mean of per-utterance first/mid/last over aligned utterances; avg pools
// every scored token delay across the corpus.  Values are in frames.
struct CorpusLatency {
    double first = 0.0, mid = 0.0, last = 0.0, avg = 0.0;
    int64_t aligned = 0;    // utterances whose emission count matched the gold
    int64_t unaligned = 0;  // utterances excluded from the statistics
    int64_t scored = 0;     // pooled token count behind `avg`

    bool has_stats() const { return aligned > 0 && scored > 0; }
};

CorpusLatency aggregate_latency(const std::vector<LatencyReport>& reports);

// One line of the metrics table.  Latency columns are milliseconds; they are
// left empty when the row has no latency measurement (pure-CER rows, or no
// aligned utterances).
struct MetricsRow {
    std::string system;
    std::string mode;
    double cer = 0.0;
    bool has_latency = false;
    double first_ms = 0.0, mid_ms = 0.0, last_ms = 0.0, avg_ms = 0.0;
};

extern const char kMetricsHeader[];  // "system,mode,cer,first,mid,last,avg"
std::string metrics_line(const MetricsRow& row);

// ---------------------------------------------------------------------------
// Command drivers
// ---------------------------------------------------------------------------

// Writes train/test datasets plus human-readable sidecars into out_dir:
// train.msds, test.msds, train.txt, test.txt.  Both splits come from one
// generative stream seeded by synth.seed — they share symbol prototypes and
// are disjoint by utterance index (test is the held-out tail).  Logs the
// nearest-prototype oracle error on the held-out split as a solvability
// check.
void cmd_gendata(const RunConfig& cfg, const std::string& out_dir, std::ostream& log);

// Trains cfg.train_total_steps steps on the dataset and writes
// out_dir/losses<suffix>.csv (header step,lr,l_llm,l_mocha,l_minlt,l_total;
// one row per step) plus out_dir/ckpt<suffix>.mstr.  Batches are drawn with
// replacement from a dedicated seed stream.  Returns the final step count.
int64_t cmd_train(const RunConfig& cfg, const std::string& data_path, const std::string& out_dir,
                  const std::string& suffix, std::ostream& log);

// Decodes a dataset with the model stored in a checkpoint.  The checkpoint's
// config snapshot defines the architecture; `overrides` are applied on top
// (decode knobs such as stream.beam_size).  Writes a hypothesis table to
// out_csv: header utt,mode,tokens with space-separated symbol ids.
void cmd_decode(const std::string& ckpt_path, const std::string& data_path, DecodeMode mode,
                const std::string& out_csv, int jobs,
                const std::vector<std::pair<std::string, std::string>>& overrides,
                std::ostream& log);

// Streaming decode plus latency accounting against gold boundaries.  Writes
// out_dir/emissions.csv (utt,idx,token,t,avail,b,delay; b/delay empty for
// utterances whose emission count does not match the gold boundaries) and
// out_dir/metrics.csv (one row, latency in milliseconds).
void cmd_latency(const std::string& ckpt_path, const std::string& data_path,
                 const std::string& out_dir, const std::string& system_label, int jobs,
                 const std::vector<std::pair<std::string, std::string>>& overrides,
                 std::ostream& log);

// Scores a hypothesis table against the dataset's gold transcripts (pooled
// over the corpus).  Every dataset utterance must appear exactly once in the
// hypothesis file and vice versa.  When out_csv is non-empty, writes a
// metrics row with empty latency columns.
MetricsRow cmd_eval(const std::string& data_path, const std::string& hyp_csv,
                    const std::string& out_csv, const std::string& system_label,
                    std::ostream& log);

// Finite-difference check of the full streaming objective on a small model:
// every parameter tensor is perturbed and compared against the analytic
// gradient.  Logs one line per parameter; returns true when all pass.
bool cmd_gradcheck(uint64_t seed, std::ostream& log);

}  // namespace mstr
