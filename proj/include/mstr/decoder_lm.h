#pragma once
// Decoder-only language model over mixed audio/text sequences.
//
// The decoder consumes a single causal sequence in which encoder output rows
// (audio) and token embeddings (text) are interleaved.  Two arrangements are
// supported: the streaming layout [seg_2, y_1, seg_3, y_2, ..., seg_L,
// y_{L-1}], where seg_i covers frames t_{i-1}+1..t_i of the encoder output,
// and the non-streaming layout [h_1..h_N, y_1..y_{L-1}].  In both, the loss
// is taken at exactly L-1 positions with targets y_2..y_L.
//
// Low-rank adapters sit on the attention projections (q/k/v/o): the
// effective map is x -> x@(W + s * down@up) + bias with the up factor
// initialized to zero, so a fresh adapter is an exact no-op.  DecodeCache +
// lm_step provide incremental evaluation that matches lm_forward_masked to
// high precision at every position; beam_search_nonstream is a
// length-normalized beam decode over token continuations of an audio prompt.

#include <cstdint>
#include <string>
#include <vector>

#include "mstr/config.h"
#include "mstr/params.h"
#include "mstr/rng.h"
#include "mstr/tape.h"
#include "mstr/tensor.h"

namespace mstr {

// One position of a mixed sequence.  Audio positions carry a 0-based row
// index into the encoder output they were arranged against; text positions
// carry a token id.
struct MixedPos {
    bool is_text = false;
    int64_t payload = 0;
};

// An arranged decoder input: ordered positions, the ascending list of
// positions where the loss (or a next-token prediction) is taken, and the
// target token id at each of those positions.
struct InterleavedBatch {
    std::vector<MixedPos> positions;
    std::vector<int64_t> mask_positions;
    std::vector<int64_t> targets;

    int64_t size() const { return static_cast<int64_t>(positions.size()); }
    int64_t n_masked() const { return static_cast<int64_t>(mask_positions.size()); }
};

// Where the per-token loss sits in the streaming arrangement: on the text
// position y_{i-1} (default) or on the last frame of segment i.  Either way
// the target is y_i.
enum class LossPlacement { kToken, kFrame };
LossPlacement loss_placement_from(const std::string& name);

// Streaming arrangement.  `path_t` is the 1-based boundary list [t_1..t_L]
// with t_1 = 0, strictly increasing, t_L <= n_frames; `tokens` is
// [y_1..y_L].  Segment i contributes encoder rows t_{i-1}..t_i-1 (0-based),
// followed by the text position y_{i-1}.  Frames past t_L are dropped, so
// the sequence length is t_L + (L-1).
InterleavedBatch interleave(int64_t n_frames, const std::vector<int64_t>& tokens,
                            const std::vector<int64_t>& path_t,
                            LossPlacement placement = LossPlacement::kToken);

// Non-streaming arrangement [h_1..h_N, y_1..y_{L-1}] with the loss at every
// text position.
InterleavedBatch nonstream_arrange(int64_t n_frames, const std::vector<int64_t>& tokens);

// Exact inverse of interleave: reads the boundary list and token ids back
// out of an arranged batch (either loss placement).
struct RecoveredPath {
    std::vector<int64_t> path_t;
    std::vector<int64_t> tokens;
};
RecoveredPath recover_interleave(const InterleavedBatch& batch);

// ---------------------------------------------------------------------------
// Model.

struct LMModel {
    struct Block {
        ParamRef ln1_g, ln1_b;
        ParamRef wq, bq, wk, bk, wv, bv, wo, bo;
        // Adapter factors per projection: down [d_model, rank] random, up
        // [rank, d_model] zero.  Unused (invalid refs) when rank == 0.
        ParamRef qa, qb, ka, kb, va, vb, oa, ob;
        ParamRef ln2_g, ln2_b;
        ParamRef w1, b1, w2, b2;
    };

    int64_t d_model = 0;
    int64_t heads = 0;
    int64_t ffn = 0;
    int64_t vocab_total = 0;
    int64_t max_len = 0;
    int64_t lora_rank = 0;   // 0 = no adapters (full-finetune configuration)
    double lora_scale = 0.0; // alpha / rank

    ParamRef tok_emb;  // [vocab_total, d_model]
    ParamRef pos_emb;  // [max_len, d_model]
    std::vector<Block> blocks;
    ParamRef lnf_g, lnf_b;
    ParamRef head_w, head_b;  // [d_model, vocab_total], [vocab_total]

    bool has_adapters() const { return lora_rank > 0; }
};

// Builds the decoder stack from cfg.lm_* (layers, width, heads, FFN, max
// length, vocabulary cfg.vocab_total()).  Adapters are attached to the
// q/k/v/o projections unless cfg.lm_train_policy == "base-only"; the rank
// must not exceed the projection's smaller dimension.
LMModel build_lm(ParamStore& store, const RunConfig& cfg, Rng& rng);

// Forward over an arranged batch on the caller's tape.  `h` supplies the
// rows for audio positions ([N, d_model]; it may hold more rows than the
// batch references) and must be a valid Var whenever the batch has audio
// positions; gradients flow into it.  Returns logits at the masked
// positions, [n_masked, vocab_total].
Var lm_forward_masked(Tape& tape, Bindings& binds, const LMModel& m,
                      const InterleavedBatch& batch, Var h);

// Same computation on a throwaway tape, values only.
Tensor lm_forward_masked_infer(ParamStore& store, const LMModel& m,
                               const InterleavedBatch& batch, const Tensor& h);

// ---------------------------------------------------------------------------
// Incremental decoding.

// Per-layer attention key/value rows for the positions consumed so far.
// Single-owner: one cache per decode session; fork sessions with clone().
class DecodeCache {
  public:
    DecodeCache(int64_t layers, int64_t d_model);

    int64_t length() const { return len_; }
    int64_t layers() const { return static_cast<int64_t>(k_.size()); }
    int64_t d_model() const { return d_model_; }
    DecodeCache clone() const;

    // Row-major [length, d_model] key/value history for one layer.
    const std::vector<double>& keys(int64_t layer) const { return k_[layer]; }
    const std::vector<double>& values(int64_t layer) const { return v_[layer]; }
    void append(int64_t layer, const Tensor& k_row, const Tensor& v_row);
    void bump_length() { ++len_; }

  private:
    std::vector<std::vector<double>> k_, v_;
    int64_t d_model_ = 0;
    int64_t len_ = 0;
};

// Consume one position (an encoder output row, or a token id) and return
// the next-token logits at that position, [1, vocab_total].  The cache
// grows by exactly one position per call.  A cache built for different
// dimensions, or a sequence running past the model's max length, is an
// error.
Tensor lm_step_audio(ParamStore& store, const LMModel& m, DecodeCache& cache,
                     const Tensor& audio_row);
Tensor lm_step_token(ParamStore& store, const LMModel& m, DecodeCache& cache, int64_t token);

// Materialized effective projection W + s * down@up, for checking merged
// weights against unmerged adapter application.
Tensor lora_merged_matrix(const ParamStore& store, ParamRef w, ParamRef down, ParamRef up,
                          double scale);

// Length-normalized beam search over token continuations of the prompt
// [h_1..h_N, BOS].  Returns the best hypothesis including BOS and, when the
// beam ended naturally, EOS; generation stops after max_new_tokens
// otherwise.  beam_size = 1 reproduces greedy decoding token for token.
std::vector<int64_t> beam_search_nonstream(ParamStore& store, const LMModel& m, const Tensor& h,
                                           int64_t beam_size, int64_t max_new_tokens, int64_t bos,
                                           int64_t eos);

}  // namespace mstr
