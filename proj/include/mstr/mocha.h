#pragma once
// Read/write policy: monotonic selection probabilities, the strict-monotonic
// marginalized alignment recurrence, chunkwise soft attention, and a small
// recurrent policy decoder with its own vocabulary head.
//
// Frames are 1-based in this module's interfaces (t = 3 means the third
// encoded row, H row index 2); output steps i = 2..L each consume at least
// one new frame, so alignments are strictly increasing and inference always
// advances.  Training marginalizes over all such alignments (alpha), spreads
// each attend point over a short backward-looking window (beta), and teacher
// forces the policy decoder; inference scans selection probabilities against
// a threshold and attends over the hard window.  Both paths are built from
// the same on-tape pieces, so offline and incremental decoding of the same
// rows are bit-identical.

#include <cstdint>
#include <optional>
#include <vector>

#include "mstr/config.h"
#include "mstr/params.h"
#include "mstr/rng.h"
#include "mstr/tape.h"

namespace mstr {

struct MochaModel {
    int64_t d_att = 0, d_policy = 0, d_lm = 0, window = 0, vocab_total = 0;
    double noise_sigma = 0.0;
    // Monotonic selection head: e_j = g * (v/|v|)' tanh(Wu u + Wh h_j + b) + r.
    ParamRef mono_wu, mono_wh, mono_b, mono_v, mono_g, mono_r;
    // Chunk attention head: plain e_j = v' tanh(Wu u + Wh h_j + b).
    ParamRef chunk_wu, chunk_wh, chunk_b, chunk_v;
    // Gated recurrent policy cell over [embedding(prev token); context].
    ParamRef emb;
    ParamRef wz, uz, bz;  // update gate
    ParamRef wr, ur, br;  // reset gate
    ParamRef wn, un, bn;  // candidate state
    ParamRef u0;          // learned initial state [1, d_policy]
    ParamRef head_w, head_b;  // vocabulary head
};

// Registers and initializes all policy parameters (names under "mocha.").
MochaModel build_mocha(ParamStore& store, const RunConfig& cfg, Rng& rng);

// ---- on-tape pieces (training and inference share these) ----

// Selection probabilities for one output step: [1, N] row over the rows of H.
// noise, when nonempty, is a [1, N] pre-sigmoid additive term (already scaled
// by sigma); pass an undefined Tensor for the noiseless path.
Var selection_p_row(Tape& tape, Bindings& binds, const MochaModel& m, Var u_prev,
                    Var h, const Tensor& noise);

// Chunk attention energies for one output step: [1, N].
Var chunk_energy_row(Tape& tape, Bindings& binds, const MochaModel& m, Var u_prev,
                     Var h);

// One row of the alignment recurrence.  prev_row is the previous step's alpha
// ([1, N]); pass an invalid Var for the first output step, whose virtual
// predecessor attends at frame 0 with probability 1.  Division-free: the
// (1-p) survival factors are floored at 1e-12 so the cumulative-product
// telescoping stays exact for the floored surrogate.
Var alpha_row_on_tape(Tape& tape, Var p_row, Var prev_row);

// Whole-matrix alignment recurrence: p [(L-1), N] -> alpha [(L-1), N].
Var alpha_marginalize_on_tape(Tape& tape, Var p);

struct BetaContext {
    Var beta;     // [1, N]
    Var context;  // [1, d_lm]
};
// Chunkwise soft attention: spread an alpha row over a w-frame
// backward-looking window weighted by exp(energy), then mix H rows.
// Mass-conserving: sum(beta) == sum(alpha) up to round-off.  w == 1 returns
// alpha itself.
BetaContext chunkwise_beta_on_tape(Tape& tape, Var alpha_row, Var energy_row, Var h,
                                   int64_t window);

struct CellOut {
    Var state;   // [1, d_policy]
    Var logits;  // [1, vocab_total]
};
// One policy-decoder step: gated recurrent update on [emb(prev); context],
// then the vocabulary head.
CellOut policy_cell_on_tape(Tape& tape, Bindings& binds, const MochaModel& m,
                            Var u_prev, int64_t prev_token, Var context);

// ---- teacher-forced training composite ----

struct PolicyForward {
    Var p;         // [(L-1), N] selection probabilities (noisy when training)
    Var alpha;     // [(L-1), N] alignment marginals
    Var beta;      // [(L-1), N] chunkwise attention weights
    Var contexts;  // [(L-1), d_lm]
    Var logits;    // [(L-1), vocab_total]; row i-2 predicts tokens[i-1]
};
// Run the policy over gold tokens (BOS..EOS) against encoded rows h [N, d_lm].
// Noise draws depend only on (noise_seed, L, N).
PolicyForward policy_teacher_forced(Tape& tape, Bindings& binds, const MochaModel& m,
                                    Var h, const std::vector<int64_t>& tokens,
                                    bool training_noise, uint64_t noise_seed);

// ---- tensor-level wrappers (throwaway tapes; the inference path) ----

// Alignment marginals from selection probabilities; entries must lie in [0,1].
Tensor alpha_marginalize(const Tensor& p);

// Exhaustive-path oracle: enumerates every strictly increasing boundary
// sequence and accumulates path probabilities.  Exponential; rejects
// N > 8 or L > 5.
Tensor alpha_bruteforce(const Tensor& p);

// Smallest frame t >= start_frame (1-based) among the available rows whose
// noiseless selection probability reaches the threshold; absent when none
// does (the caller buffers more audio).
std::optional<int64_t> scan_trigger(ParamStore& store, const MochaModel& m,
                                    const Tensor& u_prev, const Tensor& h_avail,
                                    int64_t start_frame, double threshold);

struct PolicyStep {
    Tensor state;    // [1, d_policy]
    Tensor logits;   // [1, vocab_total]
    Tensor context;  // [1, d_lm]
};
// One inference step of the policy decoder alone (hard path already chosen).
PolicyStep policy_decode_step(ParamStore& store, const MochaModel& m,
                              const Tensor& u_prev, int64_t prev_token,
                              const Tensor& context);

// Hard-path attend at trigger frame t (1-based): soft attention over the
// window of rows ending at t, then the decoder step.  Used by both offline
// and streaming inference so the two are bit-identical on equal rows.
PolicyStep policy_attend_and_step(ParamStore& store, const MochaModel& m,
                                  const Tensor& u_prev, const Tensor& h_avail,
                                  int64_t t, int64_t prev_token);

// Copy of the learned initial state.
Tensor policy_initial_state(ParamStore& store, const MochaModel& m);

}  // namespace mstr
