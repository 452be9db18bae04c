#pragma once
// Chunked causal encoder with adaptor projection.
//
// The utterance is cut into fixed-size chunk cores; each core is encoded by
// a stack of pre-norm self-attention + feed-forward blocks whose attention
// span is the core plus a trailing history window (bidirectional within the
// span, blind to everything after the core).  Context rows are recomputed
// and discarded, so row i of the output depends only on frames up to the end
// of its chunk.  A per-frame feed-forward adaptor with a linear skip path
// then projects encoder rows into the language-model embedding width.
//
// There is exactly one forward composite (encode_core_on_tape); the parallel
// trainer path and the incremental streaming path both call it, chunk by
// chunk, so their outputs are identical by construction rather than by
// tolerance.  No positional encoding is used: the residual stream keeps each
// frame's identity and the toy task carries no order information within a
// span that attention would need.

#include <cstdint>
#include <vector>

#include "mstr/config.h"
#include "mstr/params.h"
#include "mstr/rng.h"
#include "mstr/tape.h"

namespace mstr {

// One chunk: frames [core_start, core_end) are produced, attending over
// [ctx_start, core_end).  All indices 0-based.
struct Chunk {
    int64_t core_start = 0;
    int64_t core_end = 0;
    int64_t ctx_start = 0;
};

struct ChunkPlan {
    std::vector<Chunk> chunks;
    int64_t n_frames = 0;
};

// Cores partition [0, n_frames) in order; ctx_start = max(0, core_start -
// left_context); the final core may be short.  n_frames == 0 is an error.
ChunkPlan chunk_partition(int64_t n_frames, int64_t chunk_frames, int64_t left_context);

struct EncoderModel {
    struct Block {
        ParamRef ln1_g, ln1_b;
        ParamRef wq, bq, wk, bk, wv, bv, wo, bo;
        ParamRef ln2_g, ln2_b;
        ParamRef w1, b1, w2, b2;
    };
    int64_t d_feat = 0, d_model = 0, heads = 0, d_lm = 0;
    int64_t chunk_frames = 0, left_context = 0;
    ParamRef in_w, in_b;
    std::vector<Block> blocks;
    // adaptor(x) = x@skip_w + skip_b + gelu(x@w1 + b1)@w2 + b2
    ParamRef ad_skip_w, ad_skip_b, ad_w1, ad_b1, ad_w2, ad_b2;
};

// Registers and initializes all encoder parameters (names under "enc.").
EncoderModel build_encoder(ParamStore& store, const RunConfig& cfg, Rng& rng);

// Encode one chunk: span_frames is the raw [ctx+core, d_feat] slab,
// core_offset the first core row within it.  Returns the adaptor-projected
// core rows [core_len, d_lm].
Var encode_core_on_tape(Tape& tape, Bindings& binds, const EncoderModel& m,
                        const Tensor& span_frames, int64_t core_offset);

// Whole utterance on one tape (training path): concatenated core outputs,
// [N, d_lm].
Var encode_utterance_on_tape(Tape& tape, Bindings& binds, const EncoderModel& m,
                             const Tensor& frames);

// Per-row adaptor projection alone (used by the identity-configuration
// contract and kept as the single definition of the adaptor map).
Var adaptor_on_tape(Tape& tape, Bindings& binds, const EncoderModel& m, Var rows);

// Inference wrapper: runs encode_utterance_on_tape on a throwaway tape.
Tensor encode_parallel(ParamStore& store, const EncoderModel& m, const Tensor& frames);

// Incremental encoder: feed frames in any granularity; emits exactly the
// adaptor-projected core rows of each chunk as soon as its core completes
// (every chunk on the final call).  Feeding after the final flag is a
// contract violation.
class EncoderStream {
  public:
    EncoderStream(ParamStore& store, const EncoderModel& m);

    // Returns newly available encoded rows ([k, d_lm], possibly empty).
    Tensor feed(const Tensor& frames, bool final);

    int64_t frames_seen() const { return frames_seen_; }
    int64_t rows_emitted() const { return rows_emitted_; }
    bool closed() const { return closed_; }

  private:
    Tensor encode_ready(bool final);

    ParamStore* store_;
    const EncoderModel* model_;
    std::vector<double> buffer_;  // raw frames from buffer_base_ onward
    int64_t buffer_base_ = 0;     // absolute index of buffer_[0]'s frame
    int64_t frames_seen_ = 0;
    int64_t rows_emitted_ = 0;    // == next core_start
    bool closed_ = false;
};

}  // namespace mstr
