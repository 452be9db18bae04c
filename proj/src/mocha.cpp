#include "mstr/mocha.h"

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

Tensor init_rows(Rng& rng, int64_t rows, int64_t cols, double scale) {
    Tensor w = Tensor::zeros({rows, cols});
    for (int64_t i = 0; i < w.numel(); ++i) w.set(i, scale * rng.normal());
    return w;
}

// x shifted right by one within its single row, with `lead` in front.
Var shift_right(Tape& t, Var x, double lead) {
    const int64_t n = t.value(x).cols();
    Var head = t.constant(Tensor::full({1, 1}, lead));
    if (n == 1) return head;
    return t.concat_cols({head, t.slice_cols(x, 0, n - 1)});
}

// tanh(Wu u_prev + Wh h + b) @ direction, as an [N, 1] column of energies.
Var energy_column(Tape& t, Bindings& binds, Var u_prev, Var h, ParamRef wu,
                  ParamRef wh, ParamRef b, Var direction) {
    Var arg = t.add(t.add(t.matmul(h, binds.bind(t, wh)), t.matmul(u_prev, binds.bind(t, wu))),
                    binds.bind(t, b));
    return t.matmul(t.tanh(arg), direction);
}

}  // namespace

MochaModel build_mocha(ParamStore& store, const RunConfig& cfg, Rng& rng) {
    MochaModel m;
    m.d_att = cfg.mocha_d_att;
    m.d_policy = cfg.mocha_d_policy;
    m.d_lm = cfg.lm_d_model;
    m.window = cfg.mocha_window;
    m.vocab_total = cfg.vocab_total();
    m.noise_sigma = cfg.mocha_noise_sigma;

    const int64_t da = m.d_att, dp = m.d_policy, dl = m.d_lm;
    m.mono_wu = store.add("mocha.mono.wu", init_weight(rng, dp, da));
    m.mono_wh = store.add("mocha.mono.wh", init_weight(rng, dl, da));
    m.mono_b = store.add("mocha.mono.b", Tensor::zeros({da}));
    m.mono_v = store.add("mocha.mono.v", init_weight(rng, da, 1));
    m.mono_g = store.add("mocha.mono.g",
                         Tensor::full({1}, 1.0 / std::sqrt(static_cast<double>(da))));
    m.mono_r = store.add("mocha.mono.r", Tensor::full({1}, cfg.mocha_r_init));
    m.chunk_wu = store.add("mocha.chunk.wu", init_weight(rng, dp, da));
    m.chunk_wh = store.add("mocha.chunk.wh", init_weight(rng, dl, da));
    m.chunk_b = store.add("mocha.chunk.b", Tensor::zeros({da}));
    m.chunk_v = store.add("mocha.chunk.v", init_weight(rng, da, 1));

    const int64_t dx = dp + dl;  // cell input: [embedding; context]
    m.emb = store.add("mocha.policy.emb",
                      init_rows(rng, m.vocab_total, dp, 1.0 / std::sqrt(double(dp))));
    m.wz = store.add("mocha.policy.wz", init_weight(rng, dx, dp));
    m.uz = store.add("mocha.policy.uz", init_weight(rng, dp, dp));
    m.bz = store.add("mocha.policy.bz", Tensor::zeros({dp}));
    m.wr = store.add("mocha.policy.wr", init_weight(rng, dx, dp));
    m.ur = store.add("mocha.policy.ur", init_weight(rng, dp, dp));
    m.br = store.add("mocha.policy.br", Tensor::zeros({dp}));
    m.wn = store.add("mocha.policy.wn", init_weight(rng, dx, dp));
    m.un = store.add("mocha.policy.un", init_weight(rng, dp, dp));
    m.bn = store.add("mocha.policy.bn", Tensor::zeros({dp}));
    m.u0 = store.add("mocha.policy.u0", Tensor::zeros({1, dp}));
    m.head_w = store.add("mocha.policy.head.w", init_weight(rng, dp, m.vocab_total));
    m.head_b = store.add("mocha.policy.head.b", Tensor::zeros({m.vocab_total}));
    return m;
}

Var selection_p_row(Tape& t, Bindings& binds, const MochaModel& m, Var u_prev, Var h,
                    const Tensor& noise) {
    const int64_t n = t.value(h).rows();
    check(n >= 1, "selection_p_row: no encoded rows");
    Var v = binds.bind(t, m.mono_v);
    // Norm floored so an all-zero direction degrades to zero instead of 0/0.
    Var vn = t.div(v, t.clamp(t.sqrt(t.sum_all(t.mul(v, v))), 1e-12, 1e300));
    Var scores = energy_column(t, binds, u_prev, h, m.mono_wu, m.mono_wh, m.mono_b, vn);
    Var e = t.add(t.mul(scores, binds.bind(t, m.mono_g)), binds.bind(t, m.mono_r));
    Var row = t.reshape(e, {1, n});
    if (noise.defined() && noise.numel() > 0) {
        check(noise.rows() == 1 && noise.cols() == n, "selection_p_row: noise shape");
        row = t.add(row, t.constant(noise));
    }
    return t.sigmoid(row);
}

Var chunk_energy_row(Tape& t, Bindings& binds, const MochaModel& m, Var u_prev, Var h) {
    const int64_t n = t.value(h).rows();
    check(n >= 1, "chunk_energy_row: no encoded rows");
    Var col = energy_column(t, binds, u_prev, h, m.chunk_wu, m.chunk_wh, m.chunk_b,
                            binds.bind(t, m.chunk_v));
    return t.reshape(col, {1, n});
}

Var alpha_row_on_tape(Tape& t, Var p_row, Var prev_row) {
    const int64_t n = t.value(p_row).cols();
    // Survival factors floored so the cumulative product can be divided out
    // exactly; the floor (and the much lower underflow guard on the product)
    // perturbs alpha by O(N * 1e-12) at most.
    Var survive = t.clamp(t.affine(p_row, -1.0, 1.0), 1e-12, 2.0);
    Var ecp = t.clamp(shift_right(t, t.cumprod(survive), 1.0), 1e-250, 2.0);
    Var incoming;  // previous step's alpha at frame j-1 (frame 0 virtual)
    if (prev_row.valid()) {
        incoming = shift_right(t, prev_row, 0.0);
    } else {
        Tensor first = Tensor::zeros({1, n});
        first.set(0, 1.0);
        incoming = t.constant(first);
    }
    Var carry = t.cumsum(t.div(incoming, ecp));
    return t.mul(t.mul(p_row, ecp), carry);
}

Var alpha_marginalize_on_tape(Tape& t, Var p) {
    const int64_t rows = t.value(p).rows();
    std::vector<Var> out;
    Var prev;  // invalid: first step uses the virtual frame-0 attend
    for (int64_t r = 0; r < rows; ++r) {
        prev = alpha_row_on_tape(t, t.slice_rows(p, r, r + 1), prev);
        out.push_back(prev);
    }
    return t.concat_rows(out);
}

BetaContext chunkwise_beta_on_tape(Tape& t, Var alpha_row, Var energy_row, Var h,
                                   int64_t window) {
    check(window >= 1, "chunkwise_beta: window must be >= 1");
    const int64_t n = t.value(alpha_row).cols();
    if (window == 1) {
        return {alpha_row, t.matmul(alpha_row, h)};  // window collapses to the attend frame
    }
    // Stabilize by the row max, which cancels exactly in every term, then
    // guard the exponent range so no window sum can underflow to zero.
    double mx = 0.0;
    {
        const Tensor& ev = t.value(energy_row);
        mx = ev.get(0);
        for (int64_t i = 1; i < n; ++i) mx = std::max(mx, ev.get(i));
    }
    Var e = t.exp(t.clamp(t.affine(energy_row, 1.0, -mx), -700.0, 1.0));
    Var ce = t.cumsum(e);
    Var denom = ce;  // window sum over [k-w+1, k]
    if (n > window) {
        Tensor zeros = Tensor::zeros({1, window});
        denom = t.sub(ce, t.concat_cols({t.constant(zeros), t.slice_cols(ce, 0, n - window)}));
    }
    Var ratio = t.div(alpha_row, denom);
    Var carry = t.cumsum(ratio);
    // Forward window sum over [j, j+w-1]: carry[min(j+w-1, n)] - carry[j-1].
    Var last = t.slice_cols(carry, n - 1, n);
    std::vector<Var> upper_parts;
    if (n > window - 1) upper_parts.push_back(t.slice_cols(carry, window - 1, n));
    const int64_t tail = std::min(window - 1, n);
    for (int64_t i = 0; i < tail; ++i) upper_parts.push_back(last);
    Var upper = t.concat_cols(upper_parts);
    Var beta = t.mul(e, t.sub(upper, shift_right(t, carry, 0.0)));
    return {beta, t.matmul(beta, h)};
}

CellOut policy_cell_on_tape(Tape& t, Bindings& binds, const MochaModel& m, Var u_prev,
                            int64_t prev_token, Var context) {
    if (prev_token < 0 || prev_token >= m.vocab_total) {
        throw DomainError("policy cell: token id " + std::to_string(prev_token) +
                          " outside vocabulary of " + std::to_string(m.vocab_total));
    }
    Var x = t.concat_cols({t.gather_rows(binds.bind(t, m.emb), {prev_token}), context});
    auto gate = [&](ParamRef w, ParamRef u, ParamRef b) {
        return t.add(t.add(t.matmul(x, binds.bind(t, w)), t.matmul(u_prev, binds.bind(t, u))),
                     binds.bind(t, b));
    };
    Var z = t.sigmoid(gate(m.wz, m.uz, m.bz));
    Var r = t.sigmoid(gate(m.wr, m.ur, m.br));
    Var cand = t.tanh(t.add(t.add(t.matmul(x, binds.bind(t, m.wn)),
                                  t.matmul(t.mul(r, u_prev), binds.bind(t, m.un))),
                            binds.bind(t, m.bn)));
    Var state = t.add(t.mul(z, cand), t.mul(t.affine(z, -1.0, 1.0), u_prev));
    Var logits = t.add(t.matmul(state, binds.bind(t, m.head_w)), binds.bind(t, m.head_b));
    return {state, logits};
}

PolicyForward policy_teacher_forced(Tape& t, Bindings& binds, const MochaModel& m, Var h,
                                    const std::vector<int64_t>& tokens, bool training_noise,
                                    uint64_t noise_seed) {
    const int64_t big_l = static_cast<int64_t>(tokens.size());
    const int64_t n = t.value(h).rows();
    check(big_l >= 2, "policy_teacher_forced: need at least BOS and one target");

    Tensor noise;
    if (training_noise) {
        Rng rng(noise_seed);
        noise = Tensor::zeros({big_l - 1, n});
        for (int64_t i = 0; i < noise.numel(); ++i)
            noise.set(i, m.noise_sigma * rng.normal());
    }

    Var u = binds.bind(t, m.u0);
    Var prev_alpha;
    std::vector<Var> ps, alphas, betas, contexts, logits;
    for (int64_t i = 2; i <= big_l; ++i) {
        Tensor noise_row;
        if (training_noise) {
            noise_row = Tensor::zeros({1, n});
            for (int64_t j = 0; j < n; ++j) noise_row.set(j, noise.at(i - 2, j));
        }
        Var p_row = selection_p_row(t, binds, m, u, h, noise_row);
        Var a_row = alpha_row_on_tape(t, p_row, prev_alpha);
        Var e_row = chunk_energy_row(t, binds, m, u, h);
        BetaContext bc = chunkwise_beta_on_tape(t, a_row, e_row, h, m.window);
        CellOut cell = policy_cell_on_tape(t, binds, m, u, tokens[i - 2], bc.context);
        u = cell.state;
        prev_alpha = a_row;
        ps.push_back(p_row);
        alphas.push_back(a_row);
        betas.push_back(bc.beta);
        contexts.push_back(bc.context);
        logits.push_back(cell.logits);
    }
    PolicyForward out;
    out.p = t.concat_rows(ps);
    out.alpha = t.concat_rows(alphas);
    out.beta = t.concat_rows(betas);
    out.contexts = t.concat_rows(contexts);
    out.logits = t.concat_rows(logits);
    return out;
}

Tensor alpha_marginalize(const Tensor& p) {
    check(p.ndim() == 2, "alpha_marginalize: p must be 2-D");
    for (int64_t i = 0; i < p.numel(); ++i) {
        double v = p.get(i);
        if (!(v >= 0.0 && v <= 1.0)) {
            throw DomainError("alpha_marginalize: selection probability " +
                              std::to_string(v) + " outside [0, 1]");
        }
    }
    Tape t;
    return t.value(alpha_marginalize_on_tape(t, t.constant(p))).clone();
}

Tensor alpha_bruteforce(const Tensor& p) {
    check(p.ndim() == 2, "alpha_bruteforce: p must be 2-D");
    const int64_t rows = p.rows(), n = p.cols();
    if (n > 8 || rows > 4) {
        throw ContractError("alpha_bruteforce: oracle size bounds exceeded (N <= 8, L <= 5)");
    }
    Tensor alpha = Tensor::zeros({rows, n});
    // Depth-first over strictly increasing prefixes t_2 < ... < t_i; each
    // prefix's probability is added to alpha at its last attend point.
    auto dfs = [&](auto&& self, int64_t row, int64_t t_prev, double prob) -> void {
        if (row == rows) return;
        double survive = 1.0;
        for (int64_t j = t_prev + 1; j <= n; ++j) {
            double pj = p.at(row, j - 1);
            double here = prob * survive * pj;
            alpha.set(row * n + (j - 1), alpha.at(row, j - 1) + here);
            if (here > 0.0) self(self, row + 1, j, here);
            survive *= 1.0 - pj;
        }
    };
    dfs(dfs, 0, 0, 1.0);
    return alpha;
}

std::optional<int64_t> scan_trigger(ParamStore& store, const MochaModel& m,
                                    const Tensor& u_prev, const Tensor& h_avail,
                                    int64_t start_frame, double threshold) {
    check(threshold > 0.0 && threshold < 1.0, "scan_trigger: threshold must lie in (0, 1)");
    check(start_frame >= 1, "scan_trigger: frames are 1-based");
    const int64_t avail = h_avail.defined() ? h_avail.rows() : 0;
    if (start_frame > avail) return std::nullopt;
    Tape t;
    Bindings binds(store);
    Var p = selection_p_row(t, binds, m, t.constant(u_prev), t.constant(h_avail), Tensor());
    const Tensor& pv = t.value(p);
    for (int64_t j = start_frame; j <= avail; ++j) {
        if (pv.get(j - 1) >= threshold) return j;
    }
    return std::nullopt;
}

PolicyStep policy_decode_step(ParamStore& store, const MochaModel& m, const Tensor& u_prev,
                              int64_t prev_token, const Tensor& context) {
    Tape t;
    Bindings binds(store);
    CellOut cell = policy_cell_on_tape(t, binds, m, t.constant(u_prev), prev_token,
                                       t.constant(context));
    return {t.value(cell.state).clone(), t.value(cell.logits).clone(), context.clone()};
}

PolicyStep policy_attend_and_step(ParamStore& store, const MochaModel& m,
                                  const Tensor& u_prev, const Tensor& h_avail, int64_t t,
                                  int64_t prev_token) {
    check(t >= 1 && t <= h_avail.rows(), "policy_attend_and_step: trigger frame " +
                                             std::to_string(t) + " outside available rows");
    const int64_t lo = std::max<int64_t>(0, t - m.window);  // 0-based window start
    const int64_t span = t - lo;
    Tensor slab = Tensor::zeros({span, h_avail.cols()});
    for (int64_t r = 0; r < span; ++r)
        for (int64_t c = 0; c < h_avail.cols(); ++c) slab.set(r * h_avail.cols() + c, h_avail.at(lo + r, c));
    Tensor onehot = Tensor::zeros({1, span});
    onehot.set(span - 1, 1.0);

    Tape tape;
    Bindings binds(store);
    Var hw = tape.constant(slab);
    Var u = tape.constant(u_prev);
    Var e_row = chunk_energy_row(tape, binds, m, u, hw);
    BetaContext bc = chunkwise_beta_on_tape(tape, tape.constant(onehot), e_row, hw, m.window);
    CellOut cell = policy_cell_on_tape(tape, binds, m, u, prev_token, bc.context);
    return {tape.value(cell.state).clone(), tape.value(cell.logits).clone(),
            tape.value(bc.context).clone()};
}

Tensor policy_initial_state(ParamStore& store, const MochaModel& m) {
    return store.at(m.u0).value.clone();
}

}  // namespace mstr
