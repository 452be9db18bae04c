#include "mstr/decoder_lm.h"

#include <algorithm>
#include <cmath>

namespace mstr {

namespace {

Tensor init_weight(Rng& rng, int64_t rows, int64_t cols) {
    Tensor w = Tensor::zeros({rows, cols});
    double scale = 1.0 / std::sqrt(static_cast<double>(rows));
    for (int64_t i = 0; i < w.numel(); ++i) w.set(i, scale * rng.normal());
    return w;
}

// Embedding tables are scaled by width rather than fan-in: each looked-up
// row feeds the residual stream directly.
Tensor init_embed(Rng& rng, int64_t rows, int64_t cols) {
    Tensor w = Tensor::zeros({rows, cols});
    double scale = 1.0 / std::sqrt(static_cast<double>(cols));
    for (int64_t i = 0; i < w.numel(); ++i) w.set(i, scale * rng.normal());
    return w;
}

Tensor zeros1(int64_t n) { return Tensor::zeros({n}); }
Tensor ones1(int64_t n) { return Tensor::full({n}, 1.0); }

// x @ (W + s * down@up) + bias, with the low-rank delta applied
// unmaterialized.  With no adapters this is the plain affine map.
Var lora_proj(Tape& t, Bindings& bi, const LMModel& m, Var x, ParamRef w, ParamRef b,
              ParamRef down, ParamRef up) {
    Var y = t.add(t.matmul(x, bi.bind(t, w)), bi.bind(t, b));
    if (m.has_adapters()) {
        Var delta = t.matmul(t.matmul(x, bi.bind(t, down)), bi.bind(t, up));
        y = t.add(y, t.affine(delta, m.lora_scale, 0.0));
    }
    return y;
}

// Multi-head attention of the rows of `x` over the rows of `kv_src`, with an
// optional visibility mask ([rows(x), rows(kv_src)]; invalid Var = all
// visible).  Query projections come from `x`, key/value projections from
// `kv_src`; the caller chooses both to realize full-sequence or incremental
// evaluation with identical arithmetic.
Var attention(Tape& t, Bindings& bi, const LMModel& m, const LMModel::Block& blk, Var x,
              Var k_all, Var v_all, Var mask) {
    Var q = lora_proj(t, bi, m, x, blk.wq, blk.bq, blk.qa, blk.qb);
    const int64_t dh = m.d_model / m.heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> ctx;
    ctx.reserve(m.heads);
    for (int64_t h = 0; h < m.heads; ++h) {
        Var qh = t.slice_cols(q, h * dh, (h + 1) * dh);
        Var kh = t.slice_cols(k_all, h * dh, (h + 1) * dh);
        Var vh = t.slice_cols(v_all, h * dh, (h + 1) * dh);
        Var scores = t.affine(t.matmul_nt(qh, kh), inv_sqrt_dh, 0.0);
        Var probs = mask.valid() ? t.softmax_masked(scores, mask) : t.softmax_masked(scores);
        ctx.push_back(t.matmul(probs, vh));
    }
    return lora_proj(t, bi, m, t.concat_cols(ctx), blk.wo, blk.bo, blk.oa, blk.ob);
}

Var ffn_block(Tape& t, Bindings& bi, const LMModel::Block& blk, Var x) {
    Var h1 = t.gelu(t.add(t.matmul(x, bi.bind(t, blk.w1)), bi.bind(t, blk.b1)));
    return t.add(t.matmul(h1, bi.bind(t, blk.w2)), bi.bind(t, blk.b2));
}

Tensor causal_mask(int64_t n) {
    Tensor m = Tensor::zeros({n, n});
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j <= i; ++j) m.set(i * n + j, 1.0);
    return m;
}

void validate_batch(const InterleavedBatch& batch, int64_t vocab_total) {
    const int64_t s = batch.size();
    check(s >= 1, "lm: empty sequence");
    check(batch.mask_positions.size() == batch.targets.size(),
          "lm: mask/target lists differ in length");
    check(batch.n_masked() >= 1, "lm: no masked positions");
    int64_t prev = -1;
    for (size_t i = 0; i < batch.mask_positions.size(); ++i) {
        int64_t p = batch.mask_positions[i];
        check(p > prev && p < s, "lm: mask positions must be ascending and in range");
        prev = p;
        int64_t y = batch.targets[i];
        check(y >= 0 && y < vocab_total, "lm: target token out of range");
    }
    for (const MixedPos& pos : batch.positions) {
        if (pos.is_text)
            check(pos.payload >= 0 && pos.payload < vocab_total, "lm: token id out of range");
        else
            check(pos.payload >= 0, "lm: audio row index out of range");
    }
}

}  // namespace

LossPlacement loss_placement_from(const std::string& name) {
    if (name == "token") return LossPlacement::kToken;
    if (name == "frame") return LossPlacement::kFrame;
    throw ContractError("loss placement must be 'token' or 'frame', got '" + name + "'");
}

InterleavedBatch interleave(int64_t n_frames, const std::vector<int64_t>& tokens,
                            const std::vector<int64_t>& path_t, LossPlacement placement) {
    const int64_t l = static_cast<int64_t>(tokens.size());
    check(l >= 2, "interleave: need at least two tokens");
    check(static_cast<int64_t>(path_t.size()) == l, "interleave: path length must equal token count");
    check(path_t[0] == 0, "interleave: path must start at 0");
    for (int64_t i = 1; i < l; ++i)
        check(path_t[i] > path_t[i - 1], "interleave: path must be strictly increasing");
    check(path_t[l - 1] <= n_frames, "interleave: path exceeds available frames");

    InterleavedBatch b;
    b.positions.reserve(path_t[l - 1] + l - 1);
    for (int64_t i = 1; i < l; ++i) {
        for (int64_t f = path_t[i - 1]; f < path_t[i]; ++f)
            b.positions.push_back({false, f});
        if (placement == LossPlacement::kFrame) {
            b.mask_positions.push_back(static_cast<int64_t>(b.positions.size()) - 1);
            b.targets.push_back(tokens[i]);
        }
        b.positions.push_back({true, tokens[i - 1]});
        if (placement == LossPlacement::kToken) {
            b.mask_positions.push_back(static_cast<int64_t>(b.positions.size()) - 1);
            b.targets.push_back(tokens[i]);
        }
    }
    return b;
}

InterleavedBatch nonstream_arrange(int64_t n_frames, const std::vector<int64_t>& tokens) {
    const int64_t l = static_cast<int64_t>(tokens.size());
    check(n_frames >= 1, "nonstream_arrange: empty audio");
    check(l >= 2, "nonstream_arrange: need at least two tokens");
    InterleavedBatch b;
    b.positions.reserve(n_frames + l - 1);
    for (int64_t f = 0; f < n_frames; ++f) b.positions.push_back({false, f});
    for (int64_t i = 0; i + 1 < l; ++i) {
        b.positions.push_back({true, tokens[i]});
        b.mask_positions.push_back(n_frames + i);
        b.targets.push_back(tokens[i + 1]);
    }
    return b;
}

RecoveredPath recover_interleave(const InterleavedBatch& batch) {
    check(!batch.targets.empty(), "recover_interleave: batch has no targets");
    RecoveredPath r;
    r.path_t.push_back(0);
    int64_t run = 0;  // audio frames since the previous text position
    for (const MixedPos& p : batch.positions) {
        if (p.is_text) {
            r.path_t.push_back(r.path_t.back() + run);
            r.tokens.push_back(p.payload);
            run = 0;
        } else {
            ++run;
        }
    }
    check(run == 0, "recover_interleave: trailing audio after last text position");
    r.tokens.push_back(batch.targets.back());
    return r;
}

LMModel build_lm(ParamStore& store, const RunConfig& cfg, Rng& rng) {
    LMModel m;
    m.d_model = cfg.lm_d_model;
    m.heads = cfg.lm_heads;
    m.ffn = cfg.lm_ffn;
    m.vocab_total = cfg.vocab_total();
    m.max_len = cfg.lm_max_len;
    check(m.d_model >= 1 && m.heads >= 1 && m.d_model % m.heads == 0,
          "build_lm: width must be a positive multiple of the head count");
    check(cfg.lm_layers >= 1, "build_lm: need at least one layer");
    check(m.max_len >= 1, "build_lm: max length must be positive");

    const bool with_adapters = cfg.lm_train_policy != "base-only";
    if (cfg.lm_train_policy != "full" && cfg.lm_train_policy != "adapters-only" &&
        cfg.lm_train_policy != "base-only")
        throw ContractError("build_lm: unknown train policy '" + cfg.lm_train_policy + "'");
    if (with_adapters) {
        check(cfg.lm_lora_rank >= 1, "build_lm: adapter rank must be >= 1");
        check(cfg.lm_lora_rank <= m.d_model, "build_lm: adapter rank exceeds projection dimension");
        m.lora_rank = cfg.lm_lora_rank;
        m.lora_scale = cfg.lm_lora_alpha / static_cast<double>(cfg.lm_lora_rank);
    }

    const int64_t d = m.d_model;
    m.tok_emb = store.add("lm.tok_emb", init_embed(rng, m.vocab_total, d));
    m.pos_emb = store.add("lm.pos_emb", init_embed(rng, m.max_len, d));
    for (int64_t i = 0; i < cfg.lm_layers; ++i) {
        std::string p = "lm.b" + std::to_string(i) + ".";
        LMModel::Block b;
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
        if (with_adapters) {
            const int64_t r = m.lora_rank;
            b.qa = store.add(p + "attn.wq.lora_down", init_weight(rng, d, r));
            b.qb = store.add(p + "attn.wq.lora_up", Tensor::zeros({r, d}));
            b.ka = store.add(p + "attn.wk.lora_down", init_weight(rng, d, r));
            b.kb = store.add(p + "attn.wk.lora_up", Tensor::zeros({r, d}));
            b.va = store.add(p + "attn.wv.lora_down", init_weight(rng, d, r));
            b.vb = store.add(p + "attn.wv.lora_up", Tensor::zeros({r, d}));
            b.oa = store.add(p + "attn.wo.lora_down", init_weight(rng, d, r));
            b.ob = store.add(p + "attn.wo.lora_up", Tensor::zeros({r, d}));
        }
        b.ln2_g = store.add(p + "ln2.gain", ones1(d));
        b.ln2_b = store.add(p + "ln2.bias", zeros1(d));
        b.w1 = store.add(p + "ffn.w1", init_weight(rng, d, m.ffn));
        b.b1 = store.add(p + "ffn.b1", zeros1(m.ffn));
        b.w2 = store.add(p + "ffn.w2", init_weight(rng, m.ffn, d));
        b.b2 = store.add(p + "ffn.b2", zeros1(d));
        m.blocks.push_back(b);
    }
    m.lnf_g = store.add("lm.final_ln.gain", ones1(d));
    m.lnf_b = store.add("lm.final_ln.bias", zeros1(d));
    m.head_w = store.add("lm.head.w", init_weight(rng, d, m.vocab_total));
    m.head_b = store.add("lm.head.b", zeros1(m.vocab_total));
    return m;
}

Var lm_forward_masked(Tape& tape, Bindings& binds, const LMModel& m,
                      const InterleavedBatch& batch, Var h) {
    validate_batch(batch, m.vocab_total);
    const int64_t s = batch.size();
    check(s <= m.max_len, "lm_forward: sequence length " + std::to_string(s) +
                              " exceeds configured max length " + std::to_string(m.max_len));

    // Source rows for the mixed sequence: encoder rows first (if any), then
    // the looked-up token embeddings, gathered into sequence order.
    std::vector<int64_t> text_ids;
    bool has_audio = false;
    for (const MixedPos& p : batch.positions) {
        if (p.is_text)
            text_ids.push_back(p.payload);
        else
            has_audio = true;
    }
    int64_t n_h = 0;
    if (has_audio) {
        check(h.valid(), "lm_forward: batch has audio positions but no encoder output");
        n_h = tape.value(h).rows();
        check(tape.value(h).cols() == m.d_model, "lm_forward: encoder output width mismatch");
    }
    std::vector<int64_t> order;
    order.reserve(s);
    int64_t text_seen = 0;
    for (const MixedPos& p : batch.positions) {
        if (p.is_text) {
            order.push_back(n_h + text_seen);
            ++text_seen;
        } else {
            check(p.payload < n_h, "lm_forward: audio row index out of range");
            order.push_back(p.payload);
        }
    }
    std::vector<Var> parts;
    if (has_audio) parts.push_back(h);
    if (!text_ids.empty())
        parts.push_back(tape.gather_rows(binds.bind(tape, m.tok_emb), text_ids));
    Var base = parts.size() == 1 ? parts[0] : tape.concat_rows(parts);
    Var x = tape.add(tape.gather_rows(base, order),
                     tape.slice_rows(binds.bind(tape, m.pos_emb), 0, s));

    Var mask = tape.constant(causal_mask(s));
    for (const LMModel::Block& blk : m.blocks) {
        Var xn = tape.layer_norm(x, binds.bind(tape, blk.ln1_g), binds.bind(tape, blk.ln1_b));
        Var k = lora_proj(tape, binds, m, xn, blk.wk, blk.bk, blk.ka, blk.kb);
        Var v = lora_proj(tape, binds, m, xn, blk.wv, blk.bv, blk.va, blk.vb);
        x = tape.add(x, attention(tape, binds, m, blk, xn, k, v, mask));
        Var xn2 = tape.layer_norm(x, binds.bind(tape, blk.ln2_g), binds.bind(tape, blk.ln2_b));
        x = tape.add(x, ffn_block(tape, binds, blk, xn2));
    }
    Var xf = tape.layer_norm(x, binds.bind(tape, m.lnf_g), binds.bind(tape, m.lnf_b));
    Var rows = tape.gather_rows(xf, batch.mask_positions);
    return tape.add(tape.matmul(rows, binds.bind(tape, m.head_w)), binds.bind(tape, m.head_b));
}

Tensor lm_forward_masked_infer(ParamStore& store, const LMModel& m, const InterleavedBatch& batch,
                               const Tensor& h) {
    Tape tape;
    Bindings binds(store);
    Var hv;
    if (h.defined()) hv = tape.constant(h);
    return tape.value(lm_forward_masked(tape, binds, m, batch, hv));
}

DecodeCache::DecodeCache(int64_t layers, int64_t d_model) : d_model_(d_model) {
    check(layers >= 1 && d_model >= 1, "DecodeCache: bad dimensions");
    k_.resize(layers);
    v_.resize(layers);
}

DecodeCache DecodeCache::clone() const { return *this; }

void DecodeCache::append(int64_t layer, const Tensor& k_row, const Tensor& v_row) {
    check(layer >= 0 && layer < layers(), "DecodeCache: layer out of range");
    check(k_row.numel() == d_model_ && v_row.numel() == d_model_, "DecodeCache: row width mismatch");
    for (int64_t i = 0; i < d_model_; ++i) {
        k_[layer].push_back(k_row.get(i));
        v_[layer].push_back(v_row.get(i));
    }
}

namespace {

Tensor history_tensor(const std::vector<double>& buf, int64_t rows, int64_t d) {
    Tensor t = Tensor::zeros({rows, d});
    for (int64_t i = 0; i < rows * d; ++i) t.set(i, buf[i]);
    return t;
}

Tensor lm_step_impl(ParamStore& store, const LMModel& m, DecodeCache& cache, bool is_text,
                    int64_t token, const Tensor& audio_row) {
    check(cache.layers() == static_cast<int64_t>(m.blocks.size()) && cache.d_model() == m.d_model,
          "lm_step: cache does not match model");
    check(cache.length() < m.max_len, "lm_step: sequence exceeds configured max length");
    if (is_text)
        check(token >= 0 && token < m.vocab_total, "lm_step: token id out of range");
    else
        check(audio_row.rows() == 1 && audio_row.cols() == m.d_model,
              "lm_step: audio row must be [1, width]");

    const int64_t len = cache.length();
    Tape t;
    Bindings bi(store);
    Var x0 = is_text ? t.gather_rows(bi.bind(t, m.tok_emb), {token}) : t.constant(audio_row);
    Var x = t.add(x0, t.gather_rows(bi.bind(t, m.pos_emb), {len}));

    for (size_t l = 0; l < m.blocks.size(); ++l) {
        const LMModel::Block& blk = m.blocks[l];
        Var xn = t.layer_norm(x, bi.bind(t, blk.ln1_g), bi.bind(t, blk.ln1_b));
        Var k_new = lora_proj(t, bi, m, xn, blk.wk, blk.bk, blk.ka, blk.kb);
        Var v_new = lora_proj(t, bi, m, xn, blk.wv, blk.bv, blk.va, blk.vb);
        Var k_all = k_new;
        Var v_all = v_new;
        if (len > 0) {
            Var k_hist = t.constant(history_tensor(cache.keys(l), len, m.d_model));
            Var v_hist = t.constant(history_tensor(cache.values(l), len, m.d_model));
            k_all = t.concat_rows({k_hist, k_new});
            v_all = t.concat_rows({v_hist, v_new});
        }
        x = t.add(x, attention(t, bi, m, blk, xn, k_all, v_all, Var{}));
        Var xn2 = t.layer_norm(x, bi.bind(t, blk.ln2_g), bi.bind(t, blk.ln2_b));
        x = t.add(x, ffn_block(t, bi, blk, xn2));
        cache.append(static_cast<int64_t>(l), t.value(k_new), t.value(v_new));
    }
    Var xf = t.layer_norm(x, bi.bind(t, m.lnf_g), bi.bind(t, m.lnf_b));
    Var logits = t.add(t.matmul(xf, bi.bind(t, m.head_w)), bi.bind(t, m.head_b));
    cache.bump_length();
    return t.value(logits);
}

}  // namespace

Tensor lm_step_audio(ParamStore& store, const LMModel& m, DecodeCache& cache,
                     const Tensor& audio_row) {
    return lm_step_impl(store, m, cache, false, 0, audio_row);
}

Tensor lm_step_token(ParamStore& store, const LMModel& m, DecodeCache& cache, int64_t token) {
    return lm_step_impl(store, m, cache, true, token, Tensor());
}

Tensor lora_merged_matrix(const ParamStore& store, ParamRef w, ParamRef down, ParamRef up,
                          double scale) {
    const Tensor& base = store.at(w).value;
    const Tensor& a = store.at(down).value;
    const Tensor& b = store.at(up).value;
    check(a.rows() == base.rows() && b.cols() == base.cols() && a.cols() == b.rows(),
          "lora_merged_matrix: factor shapes do not conform");
    Tensor out = base.clone();
    for (int64_t i = 0; i < base.rows(); ++i)
        for (int64_t j = 0; j < base.cols(); ++j) {
            double acc = 0.0;
            for (int64_t r = 0; r < a.cols(); ++r) acc += a.at(i, r) * b.at(r, j);
            out.set(i * base.cols() + j, out.get(i * base.cols() + j) + scale * acc);
        }
    return out;
}

namespace {

std::vector<double> log_softmax_row(const Tensor& logits) {
    const int64_t n = logits.numel();
    double mx = logits.get(0);
    for (int64_t i = 1; i < n; ++i) mx = std::max(mx, logits.get(i));
    double sum = 0.0;
    for (int64_t i = 0; i < n; ++i) sum += std::exp(logits.get(i) - mx);
    const double lse = mx + std::log(sum);
    std::vector<double> lp(n);
    for (int64_t i = 0; i < n; ++i) lp[i] = logits.get(i) - lse;
    return lp;
}

}  // namespace

std::vector<int64_t> beam_search_nonstream(ParamStore& store, const LMModel& m, const Tensor& h,
                                           int64_t beam_size, int64_t max_new_tokens, int64_t bos,
                                           int64_t eos) {
    check(beam_size >= 1, "beam_search: beam size must be >= 1");
    check(max_new_tokens >= 1, "beam_search: need room for at least one token");
    check(bos >= 0 && bos < m.vocab_total && eos >= 0 && eos < m.vocab_total,
          "beam_search: sentinel token out of range");

    DecodeCache root(static_cast<int64_t>(m.blocks.size()), m.d_model);
    if (h.defined()) {
        check(h.cols() == m.d_model, "beam_search: encoder output width mismatch");
        for (int64_t f = 0; f < h.rows(); ++f) {
            Tensor row = Tensor::zeros({1, m.d_model});
            for (int64_t j = 0; j < m.d_model; ++j) row.set(j, h.at(f, j));
            lm_step_audio(store, m, root, row);
        }
    }

    struct Hyp {
        DecodeCache cache;
        Tensor logits;  // next-token logits at the hypothesis tip
        std::vector<int64_t> toks;
        double logp = 0.0;
        bool done = false;
        double norm() const {
            return logp / static_cast<double>(std::max<size_t>(toks.size() - 1, 1));
        }
    };
    std::vector<Hyp> beams;
    Tensor first = lm_step_token(store, m, root, bos);
    beams.push_back({std::move(root), first, {bos}, 0.0, false});

    for (int64_t round = 0; round < max_new_tokens; ++round) {
        bool all_done = true;
        for (const Hyp& b : beams) all_done = all_done && b.done;
        if (all_done) break;

        struct Cand {
            int64_t parent;
            int64_t tok;  // -1 = carry a finished hypothesis forward
            double logp;
            double norm;
        };
        std::vector<Cand> cands;
        for (int64_t i = 0; i < static_cast<int64_t>(beams.size()); ++i) {
            if (beams[i].done) {
                cands.push_back({i, -1, beams[i].logp, beams[i].norm()});
                continue;
            }
            std::vector<double> lp = log_softmax_row(beams[i].logits);
            const double emitted = static_cast<double>(beams[i].toks.size());  // incl. next
            for (int64_t tok = 0; tok < m.vocab_total; ++tok) {
                double score = beams[i].logp + lp[tok];
                cands.push_back({i, tok, score, score / emitted});
            }
        }
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.norm != b.norm) return a.norm > b.norm;
            if (a.parent != b.parent) return a.parent < b.parent;
            return a.tok < b.tok;
        });
        const size_t keep = std::min<size_t>(beam_size, cands.size());
        std::vector<Hyp> next;
        next.reserve(keep);
        for (size_t c = 0; c < keep; ++c) {
            const Cand& cd = cands[c];
            if (cd.tok < 0) {
                next.push_back(beams[cd.parent]);
                continue;
            }
            Hyp h2{beams[cd.parent].cache.clone(), Tensor(), beams[cd.parent].toks, cd.logp,
                   cd.tok == eos};
            h2.logits = lm_step_token(store, m, h2.cache, cd.tok);
            h2.toks.push_back(cd.tok);
            next.push_back(std::move(h2));
        }
        beams = std::move(next);
    }

    size_t best = 0;
    for (size_t i = 1; i < beams.size(); ++i)
        if (beams[i].norm() > beams[best].norm()) best = i;
    return beams[best].toks;
}

}  // namespace mstr
