#include "mstr/losses.h"

#include <cmath>

#include "mstr/serialize.h"

namespace mstr {

namespace {

// Rng stream tags (synthetic data uses 1 and 2).
constexpr uint64_t kStreamRoute = 3;       // batch mode routing
constexpr uint64_t kStreamTrainNoise = 4;  // per-step selection noise

std::string shape_str(const std::vector<int64_t>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

}  // namespace

MinltMode minlt_mode_from(const std::string& name) {
    if (name == "expected-boundary") return MinltMode::kExpected;
    if (name == "literal") return MinltMode::kLiteral;
    throw ConfigError("latency loss mode must be 'expected-boundary' or 'literal', got '" + name +
                      "'");
}

Var loss_token_nll(Tape& tape, Var logits, const std::vector<int64_t>& targets) {
    check(!targets.empty(), "loss_token_nll: no masked positions to score");
    check(tape.value(logits).rows() == static_cast<int64_t>(targets.size()),
          "loss_token_nll: one target per logits row required");
    return tape.mean_all(tape.cross_entropy_rows(logits, targets));
}

Var loss_minlt_on_tape(Tape& tape, Var alpha, const std::vector<int64_t>& boundaries,
                       MinltMode mode, int64_t norm_tokens) {
    const Tensor& a = tape.value(alpha);
    const int64_t rows = a.rows();
    const int64_t n = a.cols();
    check(rows >= 1 && n >= 1, "loss_minlt: empty posterior");
    check(static_cast<int64_t>(boundaries.size()) == rows,
          "loss_minlt: one boundary per posterior row required");
    check(norm_tokens >= 1, "loss_minlt: bad normalization");
    int64_t prev = 0;
    for (int64_t b : boundaries) {
        check(b >= 1 && b <= n, "loss_minlt: boundary outside 1..N");
        check(b > prev, "loss_minlt: boundaries must be strictly increasing");
        prev = b;
    }

    Tensor jrow = Tensor::zeros({1, n});
    for (int64_t j = 0; j < n; ++j) jrow.set(j, static_cast<double>(j + 1));
    Var weighted = tape.mul(alpha, tape.constant(jrow));  // j * alpha_{i,j}

    const double inv_l = 1.0 / static_cast<double>(norm_tokens);
    if (mode == MinltMode::kExpected) {
        Var expected = tape.matmul(weighted, tape.constant(Tensor::full({n, 1}, 1.0)));
        Tensor bcol = Tensor::zeros({rows, 1});
        for (int64_t i = 0; i < rows; ++i) bcol.set(i, static_cast<double>(boundaries[i]));
        Var diff = tape.sub(expected, tape.constant(bcol));
        return tape.affine(tape.sum_all(tape.abs(diff)), inv_l, 0.0);
    }
    Tensor bmat = Tensor::zeros({rows, n});
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < n; ++j) bmat.set(i * n + j, static_cast<double>(boundaries[i]));
    Var diff = tape.sub(weighted, tape.constant(bmat));
    return tape.affine(tape.sum_all(tape.abs(diff)), inv_l, 0.0);
}

double lr_triangular(int64_t step, double lr_max, double lr_min, int64_t cycle_steps) {
    check(step >= 0, "lr_triangular: negative step");
    check(cycle_steps >= 2, "lr_triangular: cycle must span at least two steps");
    check(lr_min <= lr_max, "lr_triangular: lr_min must not exceed lr_max");
    const double pos = static_cast<double>(step % cycle_steps);
    const double half = static_cast<double>(cycle_steps) * 0.5;
    const double frac = pos <= half ? pos / half : (static_cast<double>(cycle_steps) - pos) / half;
    return lr_min + (lr_max - lr_min) * frac;
}

void apply_freeze_policy(ParamStore& store, const RunConfig& cfg) {
    if (cfg.lm_train_policy != "adapters-only") return;
    store.for_each([](ParamStore::Entry& e) {
        if (e.name.rfind("lm.", 0) == 0 && e.name.find(".lora_") == std::string::npos)
            e.trainable = false;
    });
}

double global_grad_norm(const ParamStore& store, const std::vector<int32_t>& params) {
    double sq = 0.0;
    for (int32_t idx : params) {
        const ParamStore::Entry& e = store.entry(static_cast<size_t>(idx));
        if (!e.trainable || !e.grad.defined()) continue;
        for (int64_t i = 0; i < e.grad.numel(); ++i) {
            double g = e.grad.get(i);
            sq += g * g;
        }
    }
    return std::sqrt(sq);
}

void clip_global_norm(ParamStore& store, const std::vector<int32_t>& params, double max_norm) {
    check(max_norm > 0.0, "clip_global_norm: max_norm must be positive");
    const double norm = global_grad_norm(store, params);
    if (norm <= max_norm) return;
    const double scale = max_norm / norm;
    for (int32_t idx : params) {
        ParamStore::Entry& e = store.entry(static_cast<size_t>(idx));
        if (!e.trainable || !e.grad.defined()) continue;
        for (int64_t i = 0; i < e.grad.numel(); ++i) e.grad.set(i, e.grad.get(i) * scale);
    }
}

void adamw_update(ParamStore& store, const std::vector<int32_t>& params, double lr, int64_t t,
                  double beta1, double beta2, double eps, double weight_decay) {
    check(t >= 1, "adamw_update: update count is 1-based");
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (int32_t idx : params) {
        ParamStore::Entry& e = store.entry(static_cast<size_t>(idx));
        if (!e.trainable || !e.grad.defined()) continue;
        if (!e.adam_m.defined()) e.adam_m = Tensor::zeros(e.value.shape());
        if (!e.adam_v.defined()) e.adam_v = Tensor::zeros(e.value.shape());
        for (int64_t i = 0; i < e.value.numel(); ++i) {
            const double g = e.grad.get(i);
            const double m = beta1 * e.adam_m.get(i) + (1.0 - beta1) * g;
            const double v = beta2 * e.adam_v.get(i) + (1.0 - beta2) * g * g;
            e.adam_m.set(i, m);
            e.adam_v.set(i, v);
            const double update = (m / bc1) / (std::sqrt(v / bc2) + eps);
            const double w = e.value.get(i);
            e.value.set(i, w - lr * (update + weight_decay * w));
        }
    }
}

Trainer::Trainer(ParamStore& store, TrainModels models, const RunConfig& cfg)
    : store_(&store),
      models_(std::move(models)),
      cfg_(cfg),
      minlt_mode_(minlt_mode_from(cfg.train_minlt_mode)),
      placement_(loss_placement_from(cfg.lm_loss_position)),
      route_rng_(derive_seed(cfg.train_seed, kStreamRoute)) {
    cfg_.validate();
    if (cfg_.train_joint_mode != "joint" && cfg_.train_joint_mode != "stream-only" &&
        cfg_.train_joint_mode != "nonstream-only")
        throw ConfigError("train mode must be joint, stream-only, or nonstream-only, got '" +
                          cfg_.train_joint_mode + "'");
    apply_freeze_policy(store, cfg_);
}

StepMode Trainer::draw_mode() {
    // One draw per batch regardless of routing, so fixed modes replay the
    // same stream as their degenerate joint counterparts.
    const double u = route_rng_.uniform();
    if (cfg_.train_joint_mode == "stream-only") return StepMode::kStream;
    if (cfg_.train_joint_mode == "nonstream-only") return StepMode::kNonstream;
    return u < cfg_.train_joint_stream_prob ? StepMode::kStream : StepMode::kNonstream;
}

BatchLoss batch_loss_on_tape(Tape& tape, Bindings& binds, const TrainModels& models,
                             const RunConfig& cfg, MinltMode minlt_mode, LossPlacement placement,
                             const std::vector<const SynthUtterance*>& batch, StepMode mode,
                             uint64_t noise_salt) {
    check(!batch.empty(), "batch_loss_on_tape: empty batch");
    Var llm_sum, mocha_sum, minlt_sum;
    auto acc = [&](Var& sum, Var v) { sum = sum.valid() ? tape.add(sum, v) : v; };
    for (size_t u = 0; u < batch.size(); ++u) {
        const SynthUtterance& utt = *batch[u];
        Var h = encode_utterance_on_tape(tape, binds, models.enc, utt.frames);
        if (mode == StepMode::kStream) {
            const uint64_t noise_seed =
                derive_seed(cfg.train_seed, kStreamTrainNoise, noise_salt, u);
            PolicyForward pf = policy_teacher_forced(tape, binds, models.mocha, h, utt.tokens,
                                                     /*training_noise=*/true, noise_seed);
            std::vector<int64_t> path = {0};
            path.insert(path.end(), utt.boundaries.begin(), utt.boundaries.end());
            InterleavedBatch ib = interleave(utt.num_frames(), utt.tokens, path, placement);
            Var lm_logits = lm_forward_masked(tape, binds, models.lm, ib, h);
            acc(llm_sum, loss_token_nll(tape, lm_logits, ib.targets));
            std::vector<int64_t> targets(utt.tokens.begin() + 1, utt.tokens.end());
            acc(mocha_sum, loss_token_nll(tape, pf.logits, targets));
            acc(minlt_sum, loss_minlt_on_tape(tape, pf.alpha, utt.boundaries, minlt_mode,
                                              static_cast<int64_t>(utt.tokens.size())));
        } else {
            InterleavedBatch ib = nonstream_arrange(utt.num_frames(), utt.tokens);
            Var lm_logits = lm_forward_masked(tape, binds, models.lm, ib, h);
            acc(llm_sum, loss_token_nll(tape, lm_logits, ib.targets));
        }
    }

    const double inv_b = 1.0 / static_cast<double>(batch.size());
    BatchLoss out;
    out.llm = tape.affine(llm_sum, inv_b, 0.0);
    out.total = out.llm;
    if (mode == StepMode::kStream) {
        out.mocha = tape.affine(mocha_sum, inv_b, 0.0);
        out.minlt = tape.affine(minlt_sum, inv_b, 0.0);
        out.total = tape.add(out.total,
                             tape.add(out.mocha, tape.affine(out.minlt, cfg.train_lambda, 0.0)));
    }
    return out;
}

LossBundle Trainer::train_step(const std::vector<const SynthUtterance*>& batch, StepMode mode) {
    store_->zero_grads();
    Tape tape;
    Bindings binds(*store_);
    BatchLoss loss = batch_loss_on_tape(tape, binds, models_, cfg_, minlt_mode_, placement_, batch,
                                        mode, static_cast<uint64_t>(step_));
    Var total = loss.total;
    LossBundle bundle;
    bundle.lambda = cfg_.train_lambda;
    bundle.l_llm = tape.value(loss.llm).get(0);
    if (mode == StepMode::kStream) {
        bundle.l_mocha = tape.value(loss.mocha).get(0);
        bundle.l_minlt = tape.value(loss.minlt).get(0);
    }
    bundle.l_total = tape.value(total).get(0);
    if (!std::isfinite(bundle.l_llm) || !std::isfinite(bundle.l_mocha) ||
        !std::isfinite(bundle.l_minlt) || !std::isfinite(bundle.l_total))
        throw DivergenceError("training diverged at step " + std::to_string(step_) +
                              ": llm=" + std::to_string(bundle.l_llm) +
                              " mocha=" + std::to_string(bundle.l_mocha) +
                              " minlt=" + std::to_string(bundle.l_minlt));

    tape.backward(total, Tensor::scalar(1.0));
    binds.accumulate_grads(tape);
    clip_global_norm(*store_, binds.bound(), cfg_.train_clip);
    const double lr =
        lr_triangular(step_, cfg_.train_lr_max, cfg_.train_lr_min, cfg_.train_cycle_steps);
    adamw_update(*store_, binds.bound(), lr, step_ + 1, cfg_.train_beta1, cfg_.train_beta2,
                 cfg_.train_eps, cfg_.train_weight_decay);
    ++step_;
    return bundle;
}

void checkpoint_save(const std::string& path, const ParamStore& store, int64_t step,
                     const RunConfig& cfg) {
    check(step >= 0, "checkpoint_save: negative step");
    TensorTable table;
    table.step = static_cast<uint64_t>(step);
    table.text = cfg.dump(false);
    for (size_t i = 0; i < store.size(); ++i) {
        const ParamStore::Entry& e = store.entry(i);
        table.items.emplace_back(e.name, e.value);
    }
    write_tensor_table(path, kCheckpointMagic, table);
}

int64_t checkpoint_load(const std::string& path, ParamStore& store) {
    TensorTable table = read_tensor_table(path, kCheckpointMagic);
    if (table.items.size() != store.size())
        throw IoError("checkpoint holds " + std::to_string(table.items.size()) +
                      " tensors but the model has " + std::to_string(store.size()));
    for (const auto& [name, value] : table.items) {
        if (!store.contains(name)) throw IoError("checkpoint contains unknown tensor '" + name + "'");
        ParamStore::Entry& e = store.at(name);
        if (value.shape() != e.value.shape())
            throw IoError("checkpoint tensor '" + name + "' has shape " +
                          shape_str(value.shape()) + " but the model expects " +
                          shape_str(e.value.shape()));
        e.value = value.clone();
    }
    return static_cast<int64_t>(table.step);
}

}  // namespace mstr
