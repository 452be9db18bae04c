#include "mstr/encoder.h"

#include <cmath>

namespace mstr {

namespace {

// Fan-in scaled normal init for weight matrices; biases start at zero.
Tensor init_weight(Rng& rng, int64_t rows, int64_t cols) {
    Tensor w = Tensor::zeros({rows, cols});
    double scale = 1.0 / std::sqrt(static_cast<double>(rows));
    for (int64_t i = 0; i < w.numel(); ++i) w.set(i, scale * rng.normal());
    return w;
}

Tensor zeros1(int64_t n) { return Tensor::zeros({n}); }
Tensor ones1(int64_t n) { return Tensor::full({n}, 1.0); }

// Multi-head bidirectional attention over the whole span (no mask: the span
// itself is the visibility boundary).
Var span_attention(Tape& t, Var x, Var wq, Var bq, Var wk, Var bk, Var wv, Var bv, Var wo,
                   Var bo, int64_t heads) {
    Var q = t.add(t.matmul(x, wq), bq);
    Var k = t.add(t.matmul(x, wk), bk);
    Var v = t.add(t.matmul(x, wv), bv);
    const int64_t d_model = t.value(q).cols();
    const int64_t dh = d_model / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> ctx;
    ctx.reserve(heads);
    for (int64_t h = 0; h < heads; ++h) {
        Var qh = t.slice_cols(q, h * dh, (h + 1) * dh);
        Var kh = t.slice_cols(k, h * dh, (h + 1) * dh);
        Var vh = t.slice_cols(v, h * dh, (h + 1) * dh);
        Var scores = t.affine(t.matmul_nt(qh, kh), inv_sqrt_dh, 0.0);
        Var probs = t.softmax_masked(scores);
        ctx.push_back(t.matmul(probs, vh));
    }
    return t.add(t.matmul(t.concat_cols(ctx), wo), bo);
}

}  // namespace

ChunkPlan chunk_partition(int64_t n_frames, int64_t chunk_frames, int64_t left_context) {
    check(n_frames >= 1, "chunk_partition: empty input");
    check(chunk_frames >= 1, "chunk_partition: chunk_frames must be >= 1");
    check(left_context >= 0, "chunk_partition: left_context must be >= 0");
    ChunkPlan plan;
    plan.n_frames = n_frames;
    for (int64_t start = 0; start < n_frames; start += chunk_frames) {
        Chunk c;
        c.core_start = start;
        c.core_end = std::min(start + chunk_frames, n_frames);
        c.ctx_start = std::max<int64_t>(0, start - left_context);
        plan.chunks.push_back(c);
    }
    return plan;
}

EncoderModel build_encoder(ParamStore& store, const RunConfig& cfg, Rng& rng) {
    EncoderModel m;
    m.d_feat = cfg.synth_feat_dim;
    m.d_model = cfg.enc_d_model;
    m.heads = cfg.enc_heads;
    m.d_lm = cfg.lm_d_model;
    m.chunk_frames = cfg.enc_chunk_frames;
    m.left_context = cfg.enc_left_context;

    const int64_t d = m.d_model;
    m.in_w = store.add("enc.in_proj.w", init_weight(rng, m.d_feat, d));
    m.in_b = store.add("enc.in_proj.b", zeros1(d));
    for (int64_t i = 0; i < cfg.enc_blocks; ++i) {
        std::string p = "enc.b" + std::to_string(i) + ".";
        EncoderModel::Block b;
        b.ln1_g = store.add(p + "ln1.gain", ones1(d));
        b.ln1_b = store.add(p + "ln1.bias", zeros1(d));
        b.wq = store.add(p + "attn.wq", init_weight(rng, d, d));
        b.bq = store.add(p + "attn.bq", zeros1(d));
        b.wk = store.add(p + "attn.wk", init_weight(rng, d, d));
        b.bk = store.add(p + "attn.bk", zeros1(d));
        b.wv = store.add(p + "attn.wv", init_weight(rng, d, d));
        b.bv = store.add(p + "attn.bv", zeros1(d));
        b.wo = store.add(p + "attn.wo", init_weight(rng, d, d));
        b.bo = store.add(p + "attn.bo", zeros1(d));
        b.ln2_g = store.add(p + "ln2.gain", ones1(d));
        b.ln2_b = store.add(p + "ln2.bias", zeros1(d));
        b.w1 = store.add(p + "ffn.w1", init_weight(rng, d, cfg.enc_ffn));
        b.b1 = store.add(p + "ffn.b1", zeros1(cfg.enc_ffn));
        b.w2 = store.add(p + "ffn.w2", init_weight(rng, cfg.enc_ffn, d));
        b.b2 = store.add(p + "ffn.b2", zeros1(d));
        m.blocks.push_back(b);
    }
    m.ad_skip_w = store.add("enc.adaptor.skip.w", init_weight(rng, d, m.d_lm));
    m.ad_skip_b = store.add("enc.adaptor.skip.b", zeros1(m.d_lm));
    m.ad_w1 = store.add("enc.adaptor.w1", init_weight(rng, d, cfg.enc_ffn));
    m.ad_b1 = store.add("enc.adaptor.b1", zeros1(cfg.enc_ffn));
    m.ad_w2 = store.add("enc.adaptor.w2", init_weight(rng, cfg.enc_ffn, m.d_lm));
    m.ad_b2 = store.add("enc.adaptor.b2", zeros1(m.d_lm));
    return m;
}

Var adaptor_on_tape(Tape& t, Bindings& binds, const EncoderModel& m, Var rows) {
    Var skip = t.add(t.matmul(rows, binds.bind(t, m.ad_skip_w)), binds.bind(t, m.ad_skip_b));
    Var hidden = t.gelu(t.add(t.matmul(rows, binds.bind(t, m.ad_w1)), binds.bind(t, m.ad_b1)));
    Var deep = t.add(t.matmul(hidden, binds.bind(t, m.ad_w2)), binds.bind(t, m.ad_b2));
    return t.add(skip, deep);
}

Var encode_core_on_tape(Tape& t, Bindings& binds, const EncoderModel& m,
                        const Tensor& span_frames, int64_t core_offset) {
    check(span_frames.ndim() == 2 && span_frames.cols() == m.d_feat,
          "encode_core_on_tape: span must be [S, d_feat]");
    const int64_t span = span_frames.rows();
    check(core_offset >= 0 && core_offset < span, "encode_core_on_tape: bad core offset");

    Var x = t.add(t.matmul(t.constant(span_frames), binds.bind(t, m.in_w)),
                  binds.bind(t, m.in_b));
    for (const auto& b : m.blocks) {
        Var normed = t.layer_norm(x, binds.bind(t, b.ln1_g), binds.bind(t, b.ln1_b));
        Var attn = span_attention(t, normed, binds.bind(t, b.wq), binds.bind(t, b.bq),
                                  binds.bind(t, b.wk), binds.bind(t, b.bk),
                                  binds.bind(t, b.wv), binds.bind(t, b.bv),
                                  binds.bind(t, b.wo), binds.bind(t, b.bo), m.heads);
        x = t.add(x, attn);
        Var normed2 = t.layer_norm(x, binds.bind(t, b.ln2_g), binds.bind(t, b.ln2_b));
        Var hidden = t.gelu(t.add(t.matmul(normed2, binds.bind(t, b.w1)),
                                  binds.bind(t, b.b1)));
        Var ffn = t.add(t.matmul(hidden, binds.bind(t, b.w2)), binds.bind(t, b.b2));
        x = t.add(x, ffn);
    }
    Var core = t.slice_rows(x, core_offset, span);
    return adaptor_on_tape(t, binds, m, core);
}

Var encode_utterance_on_tape(Tape& t, Bindings& binds, const EncoderModel& m,
                             const Tensor& frames) {
    ChunkPlan plan = chunk_partition(frames.rows(), m.chunk_frames, m.left_context);
    std::vector<Var> cores;
    cores.reserve(plan.chunks.size());
    for (const Chunk& c : plan.chunks) {
        const int64_t span = c.core_end - c.ctx_start;
        Tensor slab = Tensor::zeros({span, m.d_feat});
        for (int64_t r = 0; r < span; ++r) {
            for (int64_t col = 0; col < m.d_feat; ++col) {
                slab.set(r * m.d_feat + col, frames.at(c.ctx_start + r, col));
            }
        }
        cores.push_back(encode_core_on_tape(t, binds, m, slab, c.core_start - c.ctx_start));
    }
    return cores.size() == 1 ? cores[0] : t.concat_rows(cores);
}

Tensor encode_parallel(ParamStore& store, const EncoderModel& m, const Tensor& frames) {
    Tape t;
    Bindings binds(store);
    return t.value(encode_utterance_on_tape(t, binds, m, frames)).clone();
}

EncoderStream::EncoderStream(ParamStore& store, const EncoderModel& m)
    : store_(&store), model_(&m) {}

Tensor EncoderStream::feed(const Tensor& frames, bool final) {
    check(!closed_, "EncoderStream::feed: stream is closed");
    if (frames.defined() && frames.numel() > 0) {
        check(frames.ndim() == 2 && frames.cols() == model_->d_feat,
              "EncoderStream::feed: frames must be [k, d_feat]");
        const double* src = frames.f64();
        buffer_.insert(buffer_.end(), src, src + frames.numel());
        frames_seen_ += frames.rows();
    }
    Tensor out = encode_ready(final);
    if (final) closed_ = true;
    return out;
}

Tensor EncoderStream::encode_ready(bool final) {
    const int64_t d_feat = model_->d_feat;
    std::vector<double> rows;
    while (true) {
        int64_t core_start = rows_emitted_;
        int64_t core_end = std::min(core_start + model_->chunk_frames, frames_seen_);
        if (core_end <= core_start) break;
        // Wait for a full core unless this is the final flush.
        if (core_end - core_start < model_->chunk_frames && !final) break;

        int64_t ctx_start = std::max<int64_t>(0, core_start - model_->left_context);
        check(ctx_start >= buffer_base_, "EncoderStream: context frames already dropped");
        const int64_t span = core_end - ctx_start;
        Tensor slab = Tensor::zeros({span, d_feat});
        const int64_t at = (ctx_start - buffer_base_) * d_feat;
        for (int64_t i = 0; i < span * d_feat; ++i) slab.set(i, buffer_[at + i]);

        Tape tape;
        Bindings binds(*store_);
        Tensor core = tape.value(
            encode_core_on_tape(tape, binds, *model_, slab, core_start - ctx_start));
        const double* src = core.f64();
        rows.insert(rows.end(), src, src + core.numel());
        rows_emitted_ = core_end;

        // Drop raw frames no chunk will ever look back at.
        int64_t keep_from = std::max<int64_t>(0, rows_emitted_ - model_->left_context);
        if (keep_from > buffer_base_) {
            buffer_.erase(buffer_.begin(),
                          buffer_.begin() + (keep_from - buffer_base_) * d_feat);
            buffer_base_ = keep_from;
        }
    }
    const int64_t n = static_cast<int64_t>(rows.size()) / model_->d_lm;
    Tensor out = Tensor::zeros({n, model_->d_lm});
    for (size_t i = 0; i < rows.size(); ++i) out.set(static_cast<int64_t>(i), rows[i]);
    return out;
}

}  // namespace mstr
