#pragma once
// Training objective and loop: token-level cross-entropy losses for the
// decoder and the alignment policy, the boundary-latency penalty, the
// triangular cyclic learning-rate schedule, a decoupled-weight-decay
// adaptive-moment optimizer with global-norm clipping, per-batch routing
// between the streaming and non-streaming arrangements, parameter freezing
// for adapter-only finetuning, and checkpoint persistence.
//
// Both arrangements share one parameter store; a training step builds the
// whole batch on a single tape, takes one backward pass, and updates exactly
// the trainable parameters that participated in that step's graph.

#include <cstdint>
#include <string>
#include <vector>

#include "mstr/config.h"
#include "mstr/decoder_lm.h"
#include "mstr/encoder.h"
#include "mstr/mocha.h"
#include "mstr/params.h"
#include "mstr/synthdata.h"
#include "mstr/tape.h"

namespace mstr {

// How the boundary-latency penalty treats the alignment posterior: compare
// the expected trigger frame to the gold boundary (default), or penalize
// every frame's deviation elementwise (the literal reading; degenerate for
// peaked posteriors but kept for ablation).
enum class MinltMode { kExpected, kLiteral };
MinltMode minlt_mode_from(const std::string& name);

enum class StepMode { kStream, kNonstream };

struct LossBundle {
    double l_llm = 0.0;
    double l_mocha = 0.0;
    double l_minlt = 0.0;
    double l_total = 0.0;
    double lambda = 0.0;
};

// Mean negative log-likelihood of one target per logits row.
Var loss_token_nll(Tape& tape, Var logits, const std::vector<int64_t>& targets);

// Boundary-latency penalty over the alignment posterior rows for tokens
// 2..L ([L-1, N]) against gold boundaries b_2..b_L (1-based frames).  Both
// modes normalize by norm_tokens (the full token count L, matching the
// reported objective).
Var loss_minlt_on_tape(Tape& tape, Var alpha, const std::vector<int64_t>& boundaries,
                       MinltMode mode, int64_t norm_tokens);

// Triangular cyclic schedule: lr_min at step 0, lr_max at cycle_steps/2,
// back to lr_min at cycle_steps, then periodic.
double lr_triangular(int64_t step, double lr_max, double lr_min, int64_t cycle_steps);

// Mark parameters non-trainable according to cfg.lm_train_policy:
// "adapters-only" freezes every decoder parameter except the adapter
// factors; "full" and "base-only" freeze nothing.
void apply_freeze_policy(ParamStore& store, const RunConfig& cfg);

// Global L2 norm over the gradients of the given parameters, and in-place
// rescaling to max_norm when it is exceeded.
double global_grad_norm(const ParamStore& store, const std::vector<int32_t>& params);
void clip_global_norm(ParamStore& store, const std::vector<int32_t>& params, double max_norm);

// One decoupled-weight-decay adaptive-moment update on the listed
// parameters (trainable ones only; moments live in the store).  t is the
// 1-based update count used for bias correction.
void adamw_update(ParamStore& store, const std::vector<int32_t>& params, double lr, int64_t t,
                  double beta1, double beta2, double eps, double weight_decay);

struct TrainModels {
    EncoderModel enc;
    MochaModel mocha;
    LMModel lm;
};

// Batch objective on the caller's tape.  Streaming batches route through the
// alignment policy and the interleaved arrangement (gold boundaries as the
// path) and produce all three components; non-streaming batches produce the
// decoder loss only (mocha/minlt stay invalid).  total already includes the
// lambda weighting.  noise_salt decorrelates the selection noise across
// steps; fixing it freezes the noise for gradient checking.
struct BatchLoss {
    Var llm, mocha, minlt, total;
};
BatchLoss batch_loss_on_tape(Tape& tape, Bindings& binds, const TrainModels& models,
                             const RunConfig& cfg, MinltMode minlt_mode, LossPlacement placement,
                             const std::vector<const SynthUtterance*>& batch, StepMode mode,
                             uint64_t noise_salt);

class Trainer {
  public:
    // The store must hold exactly the models' parameters; freezing policy is
    // applied here.  cfg.train_* supplies schedule, optimizer, routing, and
    // seed settings.
    Trainer(ParamStore& store, TrainModels models, const RunConfig& cfg);

    // Draw the arrangement for the next batch.  Always consumes one draw
    // from the routing stream, so degenerate routing probabilities replay
    // identically to the corresponding fixed mode.
    StepMode draw_mode();

    // One optimization step over a batch of utterances: forward, one
    // backward pass, global-norm clip, parameter update.  Streaming batches
    // train all three losses on the interleaved arrangement with gold
    // boundaries as the path; non-streaming batches train the decoder loss
    // only on the prepended arrangement.  Throws DivergenceError when a loss
    // turns non-finite.
    LossBundle train_step(const std::vector<const SynthUtterance*>& batch, StepMode mode);

    int64_t step() const { return step_; }
    const RunConfig& config() const { return cfg_; }
    const TrainModels& models() const { return models_; }

  private:
    ParamStore* store_;
    TrainModels models_;
    RunConfig cfg_;
    MinltMode minlt_mode_;
    LossPlacement placement_;
    Rng route_rng_;
    int64_t step_ = 0;
};

// Checkpoints: every store parameter exactly once, the training step, and a
// config snapshot, in the shared tensor-table container (atomic rename on
// write).  Loading restores tensors bit-exactly into an already-built store
// and fails on unknown, missing, or shape-mismatched tensors, naming the
// offender.
void checkpoint_save(const std::string& path, const ParamStore& store, int64_t step,
                     const RunConfig& cfg);
int64_t checkpoint_load(const std::string& path, ParamStore& store);

}  // namespace mstr
