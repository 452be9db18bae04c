// Tensor, tape, kernel and finite-difference tests.
#include "doctest.h"

#include <cmath>
#include <vector>

#include "mstr/fdcheck.h"
#include "mstr/kernels.h"
#include "mstr/kernels_ref.h"
#include "mstr/rng.h"
#include "mstr/tape.h"

using namespace mstr;

namespace {

Tensor rand_tensor(std::vector<int64_t> shape, Rng& rng, double lo = -2.0, double hi = 2.0,
                   double keep_away_from_zero = 0.0) {
    Tensor t = Tensor::zeros(shape);
    for (int64_t i = 0; i < t.numel(); ++i) {
        double v;
        do {
            v = rng.uniform(lo, hi);
        } while (std::fabs(v) < keep_away_from_zero);
        t.set(i, v);
    }
    return t;
}

// Generic per-op gradient check: loss = sum(out * W) with a fixed random
// weight so that every output element influences the scalar loss.
void check_op_grads(const char* op_name, ParamStore& store,
                    const std::vector<std::string>& params,
                    const std::function<Var(Tape&, Bindings&)>& apply_op, uint64_t seed) {
    Rng rng(derive_seed(seed, 0xFD));
    Tensor weights;  // lazily sized from the first forward
    auto build = [&](Tape& t, Bindings& b) -> Var {
        Var out = apply_op(t, b);
        if (!weights.defined()) {
            weights = rand_tensor(t.value(out).shape(), rng, -1.0, 1.0);
        }
        return t.sum_all(t.mul(out, t.constant(weights)));
    };
    auto reports = finite_diff_check(store, params, build, 1e-5, 1e-5);
    for (const auto& r : reports) {
        INFO("op=" << op_name << " param=" << r.param << " max_rel_err=" << r.max_rel_err
                   << " analytic=" << r.analytic << " numeric=" << r.numeric);
        CHECK(r.pass);
    }
}

}  // namespace

TEST_CASE("tensor basics") {
    Tensor t = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 3);
    CHECK(t.at(1, 2) == 6.0);
    Tensor c = t.clone();
    c.set(0, 99.0);
    CHECK(t.get(0) == 1.0);  // deep copy
    Tensor r = t.reshaped({3, 2});
    CHECK(r.at(2, 1) == 6.0);
    r.set(0, 42.0);
    CHECK(t.get(0) == 42.0);  // reshape shares storage
    CHECK_THROWS_AS(t.reshaped({4, 2}), ContractError);
    CHECK_THROWS_AS(Tensor::from_values({2}, {1, 2, 3}), ContractError);

    Tensor f = Tensor::from_values({2}, {1.5, -0.25}, Dtype::f32);
    CHECK(f.get(0) == 1.5);
    CHECK_THROWS_AS(f.f64(), ContractError);
}

TEST_CASE("forward ops match hand-computed values") {
    Tape t;

    SUBCASE("sigmoid at zero") {
        Var x = t.constant(Tensor::from_values({1}, {0.0}));
        CHECK(t.value(t.sigmoid(x)).get(0) == 0.5);
    }
    SUBCASE("cumulative product of halves") {
        Var x = t.constant(Tensor::from_values({3}, {0.5, 0.5, 0.5}));
        Tensor y = t.value(t.cumprod(x));
        CHECK(y.get(0) == 0.5);
        CHECK(y.get(1) == 0.25);
        CHECK(y.get(2) == 0.125);
    }
    SUBCASE("masked softmax puts all mass on the unmasked entry") {
        Var x = t.constant(Tensor::from_values({1, 2}, {1.0, 1.0}));
        Var m = t.constant(Tensor::from_values({1, 2}, {1.0, 0.0}));
        Tensor y = t.value(t.softmax_masked(x, m));
        CHECK(y.get(0) == 1.0);
        CHECK(y.get(1) == 0.0);
    }
    SUBCASE("cumsum") {
        Var x = t.constant(Tensor::from_values({1, 4}, {1, 2, 3, 4}));
        Tensor y = t.value(t.cumsum(x));
        CHECK(y.get(3) == 10.0);
    }
}

TEST_CASE("backward matches hand-computed gradients") {
    SUBCASE("sigmoid at zero, seed one") {
        Tape t;
        Var x = t.leaf(Tensor::from_values({1}, {0.0}));
        Var y = t.sigmoid(x);
        t.backward(y, Tensor::scalar(1.0));
        CHECK(t.grad(x).get(0) == 0.25);
    }
    SUBCASE("sum of identity-matmul propagates ones to the right factor") {
        Tape t;
        Var a = t.constant(Tensor::from_values({2, 2}, {1, 0, 0, 1}));
        Var b = t.leaf(Tensor::from_values({2, 2}, {3, -1, 2, 7}));
        Var loss = t.sum_all(t.matmul(a, b));
        t.backward(loss, Tensor::scalar(1.0));
        Tensor g = t.grad(b);
        for (int64_t i = 0; i < 4; ++i) CHECK(g.get(i) == 1.0);
    }
}

TEST_CASE("finite_diff_check on x squared at three") {
    ParamStore store;
    store.add("x", Tensor::from_values({1}, {3.0}));
    auto build = [](Tape& t, Bindings& b) -> Var {
        Var x = b.bind(t, ParamRef{0});
        return t.sum_all(t.mul(x, x));
    };
    auto reports = finite_diff_check(store, {"x"}, build, 1e-5, 1e-5);
    REQUIRE(reports.size() == 1);
    CHECK(reports[0].pass);
    CHECK(std::fabs(reports[0].analytic - 6.0) < 1e-12);
    CHECK(std::fabs(reports[0].numeric - 6.0) < 1e-6);
}

TEST_CASE("contract and domain errors") {
    Tape t;
    SUBCASE("stale handle after reset") {
        Var x = t.constant(Tensor::scalar(1.0));
        t.reset();
        CHECK_THROWS_AS(t.sigmoid(x), ContractError);
    }
    SUBCASE("shape mismatch") {
        Var a = t.constant(Tensor::zeros({2, 3}));
        Var b = t.constant(Tensor::zeros({3, 2}));
        CHECK_THROWS_AS(t.add(a, b), ContractError);
        CHECK_THROWS_AS(t.matmul(a, a), ContractError);
    }
    SUBCASE("log domain") {
        Var x = t.constant(Tensor::from_values({2}, {1.0, -1.0}));
        CHECK_THROWS_AS(t.log(x), DomainError);
    }
    SUBCASE("sqrt domain") {
        Var x = t.constant(Tensor::from_values({1}, {-0.5}));
        CHECK_THROWS_AS(t.sqrt(x), DomainError);
    }
    SUBCASE("division by zero") {
        Var a = t.constant(Tensor::scalar(1.0));
        Var z = t.constant(Tensor::scalar(0.0));
        CHECK_THROWS_AS(t.div(a, z), DomainError);
    }
    SUBCASE("softmax with a fully masked row") {
        Var x = t.constant(Tensor::zeros({1, 3}));
        Var m = t.constant(Tensor::zeros({1, 3}));
        CHECK_THROWS_AS(t.softmax_masked(x, m), DomainError);
    }
    SUBCASE("gather out of range") {
        Var x = t.constant(Tensor::zeros({3, 2}));
        CHECK_THROWS_AS(t.gather_rows(x, {3}), ContractError);
    }
    SUBCASE("backward before grad") {
        Var x = t.constant(Tensor::scalar(1.0));
        CHECK_THROWS_AS(t.grad(x), ContractError);
    }
}

TEST_CASE("re-running a traced forward is bit-identical") {
    Rng rng(11);
    Tensor a = rand_tensor({5, 7}, rng);
    Tensor b = rand_tensor({7, 3}, rng);
    Tensor g = rand_tensor({3}, rng, 0.5, 1.5);
    Tensor bias = rand_tensor({3}, rng);
    auto run = [&]() {
        Tape t;
        Var va = t.constant(a);
        Var vb = t.constant(b);
        Var h = t.matmul(va, vb);
        Var n = t.layer_norm(h, t.constant(g), t.constant(bias));
        return t.value(t.sigmoid(n)).clone();
    };
    Tensor first = run();
    Tensor second = run();
    CHECK(first.bit_equal(second));
}

TEST_CASE("masked softmax rows are a probability distribution over unmasked entries") {
    Rng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        int64_t R = rng.uniform_int(1, 5);
        int64_t C = rng.uniform_int(1, 8);
        Tensor x = rand_tensor({R, C}, rng, -5.0, 5.0);
        Tensor m = Tensor::zeros({R, C});
        for (int64_t r = 0; r < R; ++r) {
            int64_t keep = rng.uniform_int(0, C - 1);
            for (int64_t c = 0; c < C; ++c) {
                m.set(r * C + c, (c == keep || rng.uniform() < 0.5) ? 1.0 : 0.0);
            }
        }
        Tape t;
        Tensor y = t.value(t.softmax_masked(t.constant(x), t.constant(m)));
        for (int64_t r = 0; r < R; ++r) {
            double sum = 0.0;
            for (int64_t c = 0; c < C; ++c) {
                double v = y.at(r, c);
                CHECK(v >= 0.0);
                if (m.at(r, c) < 0.5) CHECK(v == 0.0);
                sum += v;
            }
            CHECK(std::fabs(sum - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("openmp kernels are bit-identical to the serial reference") {
    Rng rng(13);
    for (auto [M, K, N] : {std::tuple<int64_t, int64_t, int64_t>{1, 1, 1},
                           {3, 5, 7},
                           {17, 31, 13},
                           {64, 64, 64}}) {
        Tensor a = rand_tensor({M, K}, rng);
        Tensor bt = rand_tensor({K, N}, rng);
        Tensor bn = rand_tensor({N, K}, rng);
        Tensor at = rand_tensor({K, M}, rng);

        Tensor o1 = Tensor::zeros({M, N}), o2 = Tensor::zeros({M, N});
        kern::mm_nn(M, K, N, a.f64(), bt.f64(), o1.f64());
        kern_ref::mm_nn(M, K, N, a.f64(), bt.f64(), o2.f64());
        CHECK(o1.bit_equal(o2));

        kern::mm_nt(M, K, N, a.f64(), bn.f64(), o1.f64());
        kern_ref::mm_nt(M, K, N, a.f64(), bn.f64(), o2.f64());
        CHECK(o1.bit_equal(o2));

        kern::mm_tn(M, K, N, at.f64(), bt.f64(), o1.f64());
        kern_ref::mm_tn(M, K, N, at.f64(), bt.f64(), o2.f64());
        CHECK(o1.bit_equal(o2));
    }

    int64_t R = 19, C = 23;
    Tensor x = rand_tensor({R, C}, rng, -4.0, 4.0);
    Tensor mask = Tensor::zeros({R, C});
    for (int64_t i = 0; i < R * C; ++i) mask.set(i, rng.uniform() < 0.7 ? 1.0 : 0.0);
    for (int64_t r = 0; r < R; ++r) mask.set(r * C, 1.0);
    Tensor s1 = Tensor::zeros({R, C}), s2 = Tensor::zeros({R, C});
    CHECK(kern::softmax_masked_rows(R, C, x.f64(), mask.f64(), C, s1.f64()) == 0);
    CHECK(kern_ref::softmax_masked_rows(R, C, x.f64(), mask.f64(), C, s2.f64()) == 0);
    CHECK(s1.bit_equal(s2));

    Tensor gain = rand_tensor({C}, rng, 0.5, 1.5);
    Tensor bias = rand_tensor({C}, rng);
    Tensor l1 = Tensor::zeros({R, C}), l2 = Tensor::zeros({R, C});
    Tensor m1 = Tensor::zeros({R}), m2 = Tensor::zeros({R});
    Tensor r1 = Tensor::zeros({R}), r2 = Tensor::zeros({R});
    kern::layer_norm_rows(R, C, x.f64(), gain.f64(), bias.f64(), 1e-5, l1.f64(), m1.f64(),
                          r1.f64());
    kern_ref::layer_norm_rows(R, C, x.f64(), gain.f64(), bias.f64(), 1e-5, l2.f64(), m2.f64(),
                              r2.f64());
    CHECK(l1.bit_equal(l2));
    CHECK(m1.bit_equal(m2));
    CHECK(r1.bit_equal(r2));

    Tensor gout = rand_tensor({R, C}, rng);
    Tensor gx1 = Tensor::zeros({R, C}), gx2 = Tensor::zeros({R, C});
    Tensor gg1 = Tensor::zeros({C}), gg2 = Tensor::zeros({C});
    Tensor gb1 = Tensor::zeros({C}), gb2 = Tensor::zeros({C});
    kern::layer_norm_rows_bwd(R, C, x.f64(), gain.f64(), m1.f64(), r1.f64(), gout.f64(),
                              gx1.f64(), gg1.f64(), gb1.f64());
    kern_ref::layer_norm_rows_bwd(R, C, x.f64(), gain.f64(), m2.f64(), r2.f64(), gout.f64(),
                                  gx2.f64(), gg2.f64(), gb2.f64());
    CHECK(gx1.bit_equal(gx2));
    CHECK(gg1.bit_equal(gg2));
    CHECK(gb1.bit_equal(gb2));

    Tensor c1 = Tensor::zeros({R, C}), c2 = Tensor::zeros({R, C});
    kern::cumsum_rows(R, C, x.f64(), c1.f64());
    kern_ref::cumsum_rows(R, C, x.f64(), c2.f64());
    CHECK(c1.bit_equal(c2));
    kern::cumprod_rows(R, C, x.f64(), c1.f64());
    kern_ref::cumprod_rows(R, C, x.f64(), c2.f64());
    CHECK(c1.bit_equal(c2));

    Tensor u1 = Tensor::zeros({R, C}), u2 = Tensor::zeros({R, C});
    auto f = [](double v) { return std::tanh(v) + 0.5 * v; };
    kern::ew_unary(R * C, x.f64(), u1.f64(), f);
    kern_ref::ew_unary(R * C, x.f64(), u2.f64(), f);
    CHECK(u1.bit_equal(u2));

    CHECK(kern::reduce_sum(R * C, x.f64()) == kern_ref::reduce_sum(R * C, x.f64()));
}

TEST_CASE("every exported op passes a central finite-difference check") {
    Rng seed_rng(1000);

    SUBCASE("add same shape") {
        ParamStore s;
        s.add("a", rand_tensor({3, 4}, seed_rng));
        s.add("b", rand_tensor({3, 4}, seed_rng));
        check_op_grads("add", s, {"a", "b"}, [&](Tape& t, Bindings& b) {
            return t.add(b.bind(t, s.ref("a")), b.bind(t, s.ref("b")));
        }, 1);
    }
    SUBCASE("add row broadcast") {
        ParamStore s;
        s.add("a", rand_tensor({3, 4}, seed_rng));
        s.add("b", rand_tensor({4}, seed_rng));
        check_op_grads("add_row", s, {"a", "b"}, [&](Tape& t, Bindings& b) {
            return t.add(b.bind(t, s.ref("a")), b.bind(t, s.ref("b")));
        }, 2);
    }
    SUBCASE("add scalar broadcast") {
        ParamStore s;
        s.add("a", rand_tensor({3, 4}, seed_rng));
        s.add("b", rand_tensor({1}, seed_rng));
        check_op_grads("add_scalar", s, {"a", "b"}, [&](Tape& t, Bindings& b) {
            return t.add(b.bind(t, s.ref("a")), b.bind(t, s.ref("b")));
        }, 3);
    }
    SUBCASE("sub row broadcast") {
        ParamStore s;
        s.add("a", rand_tensor({2, 5}, seed_rng));
        s.add("b", rand_tensor({5}, seed_rng));
        check_op_grads("sub_row", s, {"a", "b"}, [&](Tape& t, Bindings& b) {
            return t.sub(b.bind(t, s.ref("a")), b.bind(t, s.ref("b")));
        }, 4);
    }
    SUBCASE("mul all broadcast kinds") {
        ParamStore s;
        s.add("a", rand_tensor({3, 4}, seed_rng));
        s.add("row", rand_tensor({4}, seed_rng));
        s.add("sc", rand_tensor({1}, seed_rng));
        check_op_grads("mul", s, {"a", "row", "sc"}, [&](Tape& t, Bindings& b) {
            Var m1 = t.mul(b.bind(t, s.ref("a")), b.bind(t, s.ref("row")));
            return t.mul(m1, b.bind(t, s.ref("sc")));
        }, 5);
    }
    SUBCASE("div") {
        ParamStore s;
        s.add("a", rand_tensor({2, 3}, seed_rng));
        s.add("b", rand_tensor({2, 3}, seed_rng, -2.0, 2.0, 0.3));
        s.add("sc", rand_tensor({1}, seed_rng, -2.0, 2.0, 0.5));
        check_op_grads("div", s, {"a", "b", "sc"}, [&](Tape& t, Bindings& b) {
            Var d = t.div(b.bind(t, s.ref("a")), b.bind(t, s.ref("b")));
            return t.div(d, b.bind(t, s.ref("sc")));
        }, 6);
    }
    SUBCASE("affine") {
        ParamStore s;
        s.add("x", rand_tensor({4, 2}, seed_rng));
        check_op_grads("affine", s, {"x"}, [&](Tape& t, Bindings& b) {
            return t.affine(b.bind(t, s.ref("x")), -1.7, 0.3);
        }, 7);
    }
    SUBCASE("matmul and matmul_nt") {
        ParamStore s;
        s.add("a", rand_tensor({3, 4}, seed_rng));
        s.add("b", rand_tensor({4, 5}, seed_rng));
        s.add("c", rand_tensor({6, 5}, seed_rng));
        check_op_grads("matmul", s, {"a", "b", "c"}, [&](Tape& t, Bindings& b) {
            Var m = t.matmul(b.bind(t, s.ref("a")), b.bind(t, s.ref("b")));  // [3,5]
            return t.matmul_nt(m, b.bind(t, s.ref("c")));                    // [3,6]
        }, 8);
    }
    SUBCASE("pointwise nonlinearities") {
        ParamStore s;
        s.add("x", rand_tensor({3, 5}, seed_rng));
        check_op_grads("sig_tanh_gelu", s, {"x"}, [&](Tape& t, Bindings& b) {
            Var x = b.bind(t, s.ref("x"));
            return t.gelu(t.add(t.sigmoid(x), t.tanh(x)));
        }, 9);
    }
    SUBCASE("exp log sqrt on positive inputs") {
        ParamStore s;
        s.add("x", rand_tensor({2, 4}, seed_rng, 0.1, 2.0));
        check_op_grads("exp_log_sqrt", s, {"x"}, [&](Tape& t, Bindings& b) {
            Var x = b.bind(t, s.ref("x"));
            return t.add(t.exp(x), t.add(t.log(x), t.sqrt(x)));
        }, 10);
    }
    SUBCASE("abs away from the kink") {
        ParamStore s;
        s.add("x", rand_tensor({3, 3}, seed_rng, -2.0, 2.0, 0.05));
        check_op_grads("abs", s, {"x"}, [&](Tape& t, Bindings& b) {
            return t.abs(b.bind(t, s.ref("x")));
        }, 11);
    }
    SUBCASE("clamp away from the boundaries") {
        ParamStore s;
        Tensor x = Tensor::zeros({2, 6});
        Rng r2(77);
        for (int64_t i = 0; i < 12; ++i) {
            double v;
            do {
                v = r2.uniform(-2.0, 2.0);
            } while (std::fabs(std::fabs(v) - 1.0) < 0.05);
            x.set(i, v);
        }
        s.add("x", x);
        check_op_grads("clamp", s, {"x"}, [&](Tape& t, Bindings& b) {
            return t.clamp(b.bind(t, s.ref("x")), -1.0, 1.0);
        }, 12);
    }
    SUBCASE("softmax with mask") {
        ParamStore s;
        s.add("x", rand_tensor({3, 6}, seed_rng));
        Tensor m = Tensor::zeros({3, 6});
        Rng r2(78);
        for (int64_t r = 0; r < 3; ++r) {
            m.set(r * 6, 1.0);
            for (int64_t c = 1; c < 6; ++c) m.set(r * 6 + c, r2.uniform() < 0.6 ? 1.0 : 0.0);
        }
        check_op_grads("softmax_masked", s, {"x"}, [&, m](Tape& t, Bindings& b) {
            return t.softmax_masked(b.bind(t, s.ref("x")), t.constant(m));
        }, 13);
    }
    SUBCASE("layer norm") {
        ParamStore s;
        s.add("x", rand_tensor({4, 6}, seed_rng));
        s.add("g", rand_tensor({6}, seed_rng, 0.5, 1.5));
        s.add("b", rand_tensor({6}, seed_rng));
        check_op_grads("layer_norm", s, {"x", "g", "b"}, [&](Tape& t, Bindings& b) {
            return t.layer_norm(b.bind(t, s.ref("x")), b.bind(t, s.ref("g")),
                                b.bind(t, s.ref("b")));
        }, 14);
    }
    SUBCASE("cumsum and cumprod") {
        ParamStore s;
        s.add("x", rand_tensor({2, 5}, seed_rng, -1.5, 1.5, 0.2));
        check_op_grads("cumsum_cumprod", s, {"x"}, [&](Tape& t, Bindings& b) {
            Var x = b.bind(t, s.ref("x"));
            return t.add(t.cumsum(x), t.cumprod(x));
        }, 15);
    }
    SUBCASE("gather with repeated rows") {
        ParamStore s;
        s.add("table", rand_tensor({5, 3}, seed_rng));
        check_op_grads("gather_rows", s, {"table"}, [&](Tape& t, Bindings& b) {
            return t.gather_rows(b.bind(t, s.ref("table")), {0, 2, 2, 4, 0});
        }, 16);
    }
    SUBCASE("concat and slice") {
        ParamStore s;
        s.add("a", rand_tensor({2, 4}, seed_rng));
        s.add("b", rand_tensor({3, 4}, seed_rng));
        s.add("c", rand_tensor({5, 2}, seed_rng));
        check_op_grads("concat_slice", s, {"a", "b", "c"}, [&](Tape& t, Bindings& b) {
            Var rows = t.concat_rows({b.bind(t, s.ref("a")), b.bind(t, s.ref("b"))});  // [5,4]
            Var cols = t.concat_cols({rows, b.bind(t, s.ref("c"))});                   // [5,6]
            Var sr = t.slice_rows(cols, 1, 4);                                         // [3,6]
            return t.slice_cols(sr, 2, 5);                                             // [3,3]
        }, 17);
    }
    SUBCASE("reshape, sum, mean") {
        ParamStore s;
        s.add("x", rand_tensor({3, 4}, seed_rng));
        check_op_grads("reshape_sum_mean", s, {"x"}, [&](Tape& t, Bindings& b) {
            Var x = b.bind(t, s.ref("x"));
            Var r = t.reshape(x, {2, 6});
            return t.concat_cols({t.reshape(t.sum_all(r), {1, 1}),
                                  t.reshape(t.mean_all(x), {1, 1})});
        }, 18);
    }
    SUBCASE("cross entropy rows") {
        ParamStore s;
        s.add("logits", rand_tensor({4, 5}, seed_rng));
        check_op_grads("cross_entropy", s, {"logits"}, [&](Tape& t, Bindings& b) {
            return t.cross_entropy_rows(b.bind(t, s.ref("logits")), {1, 0, 4, 2});
        }, 19);
    }
}

TEST_CASE("f32 mode computes and rejects mixing") {
    Tape t;
    Var x = t.constant(Tensor::from_values({2}, {0.0, 1.0}, Dtype::f32));
    Tensor y = t.value(t.sigmoid(x));
    CHECK(y.dtype() == Dtype::f32);
    CHECK(y.get(0) == 0.5);
    Var d = t.constant(Tensor::from_values({2}, {0.0, 1.0}, Dtype::f64));
    CHECK_THROWS_AS(t.add(x, d), ContractError);
}

TEST_CASE("indeterminate loss is rejected by the checker") {
    ParamStore store;
    store.add("x", Tensor::scalar(1.0));
    int calls = 0;
    auto build = [&](Tape& t, Bindings& b) -> Var {
        Var x = b.bind(t, store.ref("x"));
        // Different constant every call: not a function of the parameters.
        return t.sum_all(t.add(x, t.scalar_const(0.001 * ++calls)));
    };
    CHECK_THROWS_AS(finite_diff_check(store, {"x"}, build), IndeterminacyError);
}
