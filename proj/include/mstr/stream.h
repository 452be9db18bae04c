#pragma once
// Streaming inference engine: buffer raw feature frames, encode completed
// chunks incrementally, scan the selection policy over the pending encoded
// rows, and on each trigger feed the buffered audio segment plus the
// previous token to the language model, emitting its greedy next token.
// The emitted token feeds back into both the language model and the policy
// decoder, and the loop repeats until EOS.
//
// The engine's output is invariant to how the caller slices the audio into
// feed calls: every quantity on the way to an emission (encoder rows,
// selection probabilities, window attention, cache contents) depends only on
// frames at or before the trigger, so arrival granularity cannot change it.

#include <cstdint>
#include <vector>

#include "mstr/config.h"
#include "mstr/decoder_lm.h"
#include "mstr/encoder.h"
#include "mstr/mocha.h"
#include "mstr/params.h"
#include "mstr/tensor.h"

namespace mstr {

// One emitted token: its 1-based position among the session's emissions,
// the trigger frame t (1-based encoded frame index), and how many encoded
// rows existed when it was emitted.  Forced end-of-stream emissions carry
// the final frame count as their trigger.
struct Emission {
    int64_t index = 0;
    int64_t token = -1;
    int64_t trigger = 0;
    int64_t available = 0;
};

enum class StreamStatus { kOpen, kFinalizing, kClosed };

// Single-owner, strictly sequential decoding session over shared read-only
// parameters.  Many sessions may run concurrently on one store.
class StreamSession {
  public:
    StreamSession(ParamStore& store, const EncoderModel& enc, const MochaModel& mocha,
                  const LMModel& lm, const RunConfig& cfg);

    // Append raw feature rows ([k, d_feat]; final marks end of audio), encode
    // whatever chunks completed, and run the scan/emit loop until the policy
    // stops triggering or EOS closes the session.  Returns the emissions
    // produced by this call.  Feeding a closed session is an error.
    std::vector<Emission> feed_audio(const Tensor& frames, bool final);

    // After the final audio: if EOS has not been emitted, force one step that
    // consumes all remaining frames (trigger = N), then run token-only steps
    // until EOS or the configured cap of extra tokens.  Hitting the cap sets
    // the truncated flag instead of throwing.  Idempotent once closed.
    std::vector<Emission> finalize();

    const std::vector<Emission>& emissions() const { return emissions_; }
    // Emitted token ids in order (no BOS; includes EOS when emitted).
    std::vector<int64_t> transcript() const;

    StreamStatus status() const { return status_; }
    bool truncated() const { return truncated_; }
    int64_t frames_available() const { return avail_; }
    int64_t frames_consumed() const { return t_prev_; }
    // Language-model cache positions: consumed frames plus one token per
    // emission (each emission feeds back exactly one previous token).
    int64_t lm_positions() const;

  private:
    Tensor h_avail() const;                    // [avail_, d_lm]
    Emission emit_at(int64_t t);               // one trigger->token step
    std::vector<Emission> drain();             // scan/emit until quiet

    ParamStore* store_;
    const EncoderModel* enc_;
    const MochaModel* mocha_;
    const LMModel* lm_;
    EncoderStream enc_stream_;
    DecodeCache lm_cache_;
    Tensor u_prev_;                // policy decoder state [1, d_policy]
    std::vector<double> h_data_;   // encoded rows, row-major [avail_, d_lm]
    int64_t avail_ = 0;
    int64_t t_prev_ = 0;           // last trigger frame (1-based), 0 initially
    int64_t last_token_;           // BOS before the first emission
    std::vector<Emission> emissions_;
    StreamStatus status_ = StreamStatus::kOpen;
    bool audio_done_ = false;
    bool truncated_ = false;
    double threshold_;
    int64_t finalize_cap_;
    int64_t bos_, eos_;
};

// Per-token emission delays against gold boundaries, in frames.  Boundary k
// (1-based frame where token k+1 became audible) pairs with emission k; EOS
// emissions are excluded from the statistics.  `first`, `mid`, and `last`
// are the delays of the first, middle, and last scored tokens, where the
// middle token's position follows the ceil-half convention over the
// utterance's token count; `avg` is the mean over all scored tokens.  When
// the emission count does not match the boundary count the report is marked
// unaligned and carries no statistics.
struct LatencyReport {
    std::vector<int64_t> delays;
    double first = 0.0, mid = 0.0, last = 0.0, avg = 0.0;
    double frame_duration_ms = 40.0;
    int64_t scored = 0;
    bool aligned = false;
};

LatencyReport latency_report(const std::vector<Emission>& emissions,
                             const std::vector<int64_t>& boundaries, int64_t eos_id,
                             double frame_ms);

}  // namespace mstr
