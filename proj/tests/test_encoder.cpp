// Chunk partitioning, encoder causality, streaming/parallel equivalence, and
// encoder gradient checks.
#include "doctest.h"

#include <vector>

#include "mstr/encoder.h"
#include "mstr/fdcheck.h"

using namespace mstr;

namespace {

RunConfig tiny_encoder_cfg() {
    RunConfig cfg;
    cfg.synth_feat_dim = 6;
    cfg.enc_blocks = 2;
    cfg.enc_d_model = 8;
    cfg.enc_heads = 2;
    cfg.enc_ffn = 12;
    cfg.enc_chunk_frames = 3;
    cfg.enc_left_context = 4;
    cfg.lm_d_model = 10;
    return cfg;
}

Tensor random_frames(int64_t n, int64_t d, uint64_t seed) {
    Rng rng(seed);
    Tensor x = Tensor::zeros({n, d});
    for (int64_t i = 0; i < x.numel(); ++i) x.set(i, rng.normal());
    return x;
}

void fill_value(ParamStore& store, ParamRef r, double v) {
    Tensor& t = store.at(r).value;
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, v);
}

void fill_identity(ParamStore& store, ParamRef r) {
    Tensor& t = store.at(r).value;
    REQUIRE(t.rows() == t.cols());
    for (int64_t i = 0; i < t.rows(); ++i)
        for (int64_t j = 0; j < t.cols(); ++j) t.set(i * t.cols() + j, i == j ? 1.0 : 0.0);
}

// Feed `frames` to a fresh stream in pieces of the given sizes (0 means an
// empty call); the final piece carries the end-of-input flag.  Returns the
// concatenated emissions.
Tensor run_stream(ParamStore& store, const EncoderModel& m, const Tensor& frames,
                  const std::vector<int64_t>& pieces) {
    EncoderStream stream(store, m);
    std::vector<Tensor> emitted;
    int64_t taken = 0;
    for (size_t p = 0; p < pieces.size(); ++p) {
        int64_t k = pieces[p];
        Tensor piece = Tensor::zeros({k, frames.cols()});
        for (int64_t i = 0; i < k * frames.cols(); ++i)
            piece.set(i, frames.get(taken * frames.cols() + i));
        taken += k;
        emitted.push_back(stream.feed(piece, p + 1 == pieces.size()));
    }
    REQUIRE(taken == frames.rows());
    int64_t total = 0;
    for (const Tensor& e : emitted) total += e.rows();
    Tensor out = Tensor::zeros({total, m.d_lm});
    int64_t at = 0;
    for (const Tensor& e : emitted)
        for (int64_t i = 0; i < e.numel(); ++i) out.set(at++, e.get(i));
    return out;
}

}  // namespace

TEST_CASE("chunk partition covers the input with clamped context") {
    SUBCASE("three even chunks, context clamped to the start") {
        ChunkPlan p = chunk_partition(10, 4, 8);
        REQUIRE(p.chunks.size() == 3);
        CHECK(p.chunks[0].core_start == 0);
        CHECK(p.chunks[0].core_end == 4);
        CHECK(p.chunks[0].ctx_start == 0);
        CHECK(p.chunks[1].core_start == 4);
        CHECK(p.chunks[1].core_end == 8);
        CHECK(p.chunks[1].ctx_start == 0);
        CHECK(p.chunks[2].core_start == 8);
        CHECK(p.chunks[2].core_end == 10);
        CHECK(p.chunks[2].ctx_start == 0);
    }
    SUBCASE("whole input inside one chunk") {
        ChunkPlan p = chunk_partition(4, 4, 8);
        REQUIRE(p.chunks.size() == 1);
        CHECK(p.chunks[0].core_start == 0);
        CHECK(p.chunks[0].core_end == 4);
        CHECK(p.chunks[0].ctx_start == 0);
    }
    SUBCASE("short trailing chunk with partial history") {
        ChunkPlan p = chunk_partition(5, 2, 2);
        REQUIRE(p.chunks.size() == 3);
        CHECK(p.chunks[0].ctx_start == 0);
        CHECK(p.chunks[1].ctx_start == 0);
        CHECK(p.chunks[2].core_start == 4);
        CHECK(p.chunks[2].core_end == 5);
        CHECK(p.chunks[2].ctx_start == 2);
    }
    SUBCASE("cores tile the input for many shapes") {
        for (int64_t n : {1, 2, 3, 7, 16, 31}) {
            for (int64_t c : {1, 2, 4, 5, 40}) {
                ChunkPlan p = chunk_partition(n, c, 3);
                CHECK(p.chunks.front().core_start == 0);
                CHECK(p.chunks.back().core_end == n);
                for (size_t i = 1; i < p.chunks.size(); ++i) {
                    CHECK(p.chunks[i].core_start == p.chunks[i - 1].core_end);
                    CHECK(p.chunks[i].ctx_start == std::max<int64_t>(0, p.chunks[i].core_start - 3));
                }
            }
        }
    }
    SUBCASE("rejects empty input and bad sizes") {
        CHECK_THROWS_AS(chunk_partition(0, 4, 8), ContractError);
        CHECK_THROWS_AS(chunk_partition(5, 0, 8), ContractError);
        CHECK_THROWS_AS(chunk_partition(5, 4, -1), ContractError);
    }
}

TEST_CASE("identity-configured encoder passes frames through unchanged") {
    RunConfig cfg = tiny_encoder_cfg();
    cfg.synth_feat_dim = 8;
    cfg.lm_d_model = 8;  // d_feat == d_model == d_lm so identity maps exist
    ParamStore store;
    Rng rng(7);
    EncoderModel m = build_encoder(store, cfg, rng);

    fill_identity(store, m.in_w);
    for (const auto& b : m.blocks) {
        for (ParamRef r : {b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo, b.w1, b.b1,
                           b.w2, b.b2}) {
            fill_value(store, r, 0.0);
        }
    }
    fill_identity(store, m.ad_skip_w);
    fill_value(store, m.ad_skip_b, 0.0);
    fill_value(store, m.ad_w2, 0.0);
    fill_value(store, m.ad_b2, 0.0);

    Tensor frames = random_frames(9, 8, 11);
    Tensor out = encode_parallel(store, m, frames);
    REQUIRE(out.rows() == frames.rows());
    REQUIRE(out.cols() == 8);
    CHECK(out.bit_equal(frames));
}

TEST_CASE("zeroed adaptor maps every row to zero") {
    RunConfig cfg = tiny_encoder_cfg();
    ParamStore store;
    Rng rng(7);
    EncoderModel m = build_encoder(store, cfg, rng);
    for (ParamRef r : {m.ad_skip_w, m.ad_skip_b, m.ad_w2, m.ad_b2}) fill_value(store, r, 0.0);
    Tensor out = encode_parallel(store, m, random_frames(7, cfg.synth_feat_dim, 3));
    for (int64_t i = 0; i < out.numel(); ++i) CHECK(out.get(i) == 0.0);
}

TEST_CASE("encoded rows ignore frames after their own chunk") {
    RunConfig cfg = tiny_encoder_cfg();
    ParamStore store;
    Rng rng(21);
    EncoderModel m = build_encoder(store, cfg, rng);

    Tensor frames = random_frames(11, cfg.synth_feat_dim, 5);
    Tensor base = encode_parallel(store, m, frames);
    ChunkPlan plan = chunk_partition(11, cfg.enc_chunk_frames, cfg.enc_left_context);
    REQUIRE(plan.chunks.size() == 4);

    for (size_t c = 0; c + 1 < plan.chunks.size(); ++c) {
        // Perturb the first frame after chunk c's core.
        Tensor poked = frames.clone();
        int64_t f = plan.chunks[c].core_end;
        for (int64_t col = 0; col < cfg.synth_feat_dim; ++col)
            poked.set(f * cfg.synth_feat_dim + col, poked.at(f, col) + 2.5);
        Tensor out = encode_parallel(store, m, poked);

        bool prefix_same = true;
        for (int64_t r = 0; r < plan.chunks[c].core_end; ++r)
            for (int64_t col = 0; col < m.d_lm; ++col)
                if (out.at(r, col) != base.at(r, col)) prefix_same = false;
        CHECK(prefix_same);

        bool suffix_differs = false;
        for (int64_t r = plan.chunks[c].core_end; r < 11; ++r)
            for (int64_t col = 0; col < m.d_lm; ++col)
                if (out.at(r, col) != base.at(r, col)) suffix_differs = true;
        CHECK(suffix_differs);
    }
}

TEST_CASE("streaming emission matches the parallel encoder bit for bit") {
    RunConfig cfg = tiny_encoder_cfg();
    ParamStore store;
    Rng rng(33);
    EncoderModel m = build_encoder(store, cfg, rng);

    Tensor frames = random_frames(11, cfg.synth_feat_dim, 17);
    Tensor parallel = encode_parallel(store, m, frames);

    SUBCASE("several feed granularities") {
        std::vector<std::vector<int64_t>> splits = {
            {11},                                // everything at once
            {1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1},   // frame by frame
            {2, 2, 2, 2, 2, 1},                  // pairs
            {4, 7},                              // off-phase blocks
            {0, 5, 0, 6},                        // with empty calls
            {11, 0},                             // empty final flush
        };
        for (const auto& split : splits) {
            CAPTURE(split.size());
            Tensor streamed = run_stream(store, m, frames, split);
            REQUIRE(streamed.rows() == parallel.rows());
            CHECK(streamed.bit_equal(parallel));
        }
    }

    SUBCASE("rows appear exactly when a chunk core completes") {
        EncoderStream stream(store, m);
        Tensor two = Tensor::zeros({2, cfg.synth_feat_dim});
        for (int64_t i = 0; i < two.numel(); ++i) two.set(i, frames.get(i));
        CHECK(stream.feed(two, false).rows() == 0);  // chunk needs 3 frames
        Tensor one = Tensor::zeros({1, cfg.synth_feat_dim});
        for (int64_t i = 0; i < one.numel(); ++i)
            one.set(i, frames.get(2 * cfg.synth_feat_dim + i));
        CHECK(stream.feed(one, false).rows() == 3);
        CHECK(stream.rows_emitted() == 3);
        CHECK(stream.frames_seen() == 3);
    }

    SUBCASE("short input held back until the final flush") {
        EncoderStream stream(store, m);
        Tensor two = Tensor::zeros({2, cfg.synth_feat_dim});
        for (int64_t i = 0; i < two.numel(); ++i) two.set(i, frames.get(i));
        CHECK(stream.feed(two, false).rows() == 0);
        Tensor tail = stream.feed(Tensor::zeros({0, cfg.synth_feat_dim}), true);
        CHECK(tail.rows() == 2);
        CHECK(stream.closed());
    }

    SUBCASE("feeding a closed stream is a contract violation") {
        EncoderStream stream(store, m);
        stream.feed(frames, true);
        CHECK(stream.closed());
        CHECK_THROWS_AS(stream.feed(frames, false), ContractError);
    }

    SUBCASE("history wider than the whole utterance still matches") {
        RunConfig wide = cfg;
        wide.enc_left_context = 100;
        ParamStore store2;
        Rng rng2(33);
        EncoderModel m2 = build_encoder(store2, wide, rng2);
        Tensor par = encode_parallel(store2, m2, frames);
        Tensor streamed = run_stream(store2, m2, frames, {3, 3, 3, 2});
        CHECK(streamed.bit_equal(par));
    }
}

TEST_CASE("repeated parallel encodes are bit-identical") {
    RunConfig cfg = tiny_encoder_cfg();
    ParamStore store;
    Rng rng(2);
    EncoderModel m = build_encoder(store, cfg, rng);
    Tensor frames = random_frames(10, cfg.synth_feat_dim, 9);
    CHECK(encode_parallel(store, m, frames).bit_equal(encode_parallel(store, m, frames)));
}

TEST_CASE("adaptor gradients match finite differences") {
    RunConfig cfg = tiny_encoder_cfg();
    cfg.enc_d_model = 5;
    cfg.enc_ffn = 7;
    cfg.lm_d_model = 4;
    cfg.enc_heads = 1;
    ParamStore store;
    Rng rng(13);
    EncoderModel m = build_encoder(store, cfg, rng);

    Tensor rows = random_frames(3, 5, 40);
    Tensor w = random_frames(3, 4, 41);
    auto build = [&](Tape& t, Bindings& binds) {
        Var out = adaptor_on_tape(t, binds, m, t.constant(rows));
        return t.sum_all(t.mul(out, t.constant(w)));
    };
    std::vector<std::string> names = {"enc.adaptor.skip.w", "enc.adaptor.skip.b",
                                      "enc.adaptor.w1", "enc.adaptor.b1",
                                      "enc.adaptor.w2", "enc.adaptor.b2"};
    auto reports = finite_diff_check(store, names, build);
    for (const auto& r : reports) {
        CAPTURE(r.param);
        CAPTURE(r.max_rel_err);
        CHECK(r.pass);
    }
}

TEST_CASE("full encoder gradients match finite differences") {
    RunConfig cfg;
    cfg.synth_feat_dim = 3;
    cfg.enc_blocks = 1;
    cfg.enc_d_model = 4;
    cfg.enc_heads = 2;
    cfg.enc_ffn = 6;
    cfg.enc_chunk_frames = 2;
    cfg.enc_left_context = 2;
    cfg.lm_d_model = 5;
    ParamStore store;
    Rng rng(19);
    EncoderModel m = build_encoder(store, cfg, rng);

    Tensor frames = random_frames(5, 3, 50);
    Tensor w = random_frames(5, 5, 51);
    auto build = [&](Tape& t, Bindings& binds) {
        Var out = encode_utterance_on_tape(t, binds, m, frames);
        return t.sum_all(t.mul(out, t.constant(w)));
    };
    std::vector<std::string> names;
    for (size_t i = 0; i < store.size(); ++i) names.push_back(store.entry(i).name);
    auto reports = finite_diff_check(store, names, build);
    for (const auto& r : reports) {
        CAPTURE(r.param);
        CAPTURE(r.max_rel_err);
        CAPTURE(r.analytic);
        CAPTURE(r.numeric);
        CHECK(r.pass);
    }
}
