#include "mstr/tape.h"

#include <cmath>
#include <cstring>

#include "mstr/kernels.h"

namespace mstr {

namespace {

// Dispatch a generic lambda on the runtime dtype.
template <typename F>
void dispatch(Dtype dt, F&& f) {
    if (dt == Dtype::f64) {
        f(double{});
    } else {
        f(float{});
    }
}

// Interpret a tensor as rows: 1-D [C] is one row, 2-D is [R,C].
std::pair<int64_t, int64_t> row_view(const Tensor& t) {
    if (t.ndim() == 1) return {1, t.shape()[0]};
    if (t.ndim() == 2) return {t.shape()[0], t.shape()[1]};
    throw ContractError("tape: expected 1-D or 2-D tensor, got " + t.shape_str());
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

// ---------------------------------------------------------------- plumbing

const Tape::Node& Tape::node(Var v) const {
    check(v.valid() && v.gen == gen_ && v.id < static_cast<int32_t>(nodes_.size()),
          "tape: stale or invalid handle (tape was reset or handle belongs to another tape)");
    return nodes_[v.id];
}

int32_t Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<int32_t>(nodes_.size() - 1);
}

void Tape::reset() {
    nodes_.clear();
    grads_.clear();
    ++gen_;
}

Var Tape::leaf(Tensor v) {
    check(v.defined(), "tape: leaf from undefined tensor");
    Node n;
    n.op = Op::leaf;
    n.value = std::move(v);
    n.needs_grad = true;
    return wrap(push(std::move(n)));
}

Var Tape::constant(Tensor v) {
    check(v.defined(), "tape: constant from undefined tensor");
    Node n;
    n.op = Op::leaf;
    n.value = std::move(v);
    n.needs_grad = false;
    return wrap(push(std::move(n)));
}

Var Tape::scalar_const(double v, Dtype dt) { return constant(Tensor::scalar(v, dt)); }

const Tensor& Tape::value(Var v) const { return node(v).value; }

// ------------------------------------------------------- elementwise + bcast

Var Tape::binary_bcast(Op op, Var va, Var vb) {
    const Node& na = node(va);
    const Node& nb = node(vb);
    const Tensor& a = na.value;
    const Tensor& b = nb.value;
    check(a.dtype() == b.dtype(), "tape: dtype mismatch in elementwise op");

    uint8_t kind;
    if (a.same_shape(b)) {
        kind = 0;
    } else if (b.numel() == 1) {
        kind = 2;
    } else if (a.ndim() == 2 &&
               ((b.ndim() == 1 && b.shape()[0] == a.shape()[1]) ||
                (b.ndim() == 2 && b.shape()[0] == 1 && b.shape()[1] == a.shape()[1]))) {
        kind = 1;
    } else {
        throw ContractError("tape: incompatible shapes " + a.shape_str() + " and " +
                            b.shape_str() + " in elementwise op");
    }
    if (op == Op::div_ && kind == 1) {
        throw ContractError("tape: div supports same-shape or scalar denominators only");
    }

    Node n;
    n.op = op;
    n.a = va.id;
    n.b = vb.id;
    n.bcast = kind;
    n.needs_grad = na.needs_grad || nb.needs_grad;
    Tensor out = Tensor::zeros(a.shape(), a.dtype());
    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* pa = a.data<T>();
        const T* pb = b.data<T>();
        T* po = out.data<T>();
        int64_t total = a.numel();
        if (kind == 0) {
            switch (op) {
                case Op::add:
                    kern::ew_binary(total, pa, pb, po, [](T x, T y) { return x + y; });
                    break;
                case Op::sub:
                    kern::ew_binary(total, pa, pb, po, [](T x, T y) { return x - y; });
                    break;
                case Op::mul:
                    kern::ew_binary(total, pa, pb, po, [](T x, T y) { return x * y; });
                    break;
                case Op::div_:
                    for (int64_t i = 0; i < total; ++i) {
                        if (pb[i] == T(0)) throw DomainError("tape: division by zero");
                    }
                    kern::ew_binary(total, pa, pb, po, [](T x, T y) { return x / y; });
                    break;
                default:
                    throw ContractError("tape: bad elementwise op");
            }
        } else if (kind == 2) {
            T s = pb[0];
            switch (op) {
                case Op::add:
                    kern::ew_unary(total, pa, po, [s](T x) { return x + s; });
                    break;
                case Op::sub:
                    kern::ew_unary(total, pa, po, [s](T x) { return x - s; });
                    break;
                case Op::mul:
                    kern::ew_unary(total, pa, po, [s](T x) { return x * s; });
                    break;
                case Op::div_:
                    if (s == T(0)) throw DomainError("tape: division by zero");
                    kern::ew_unary(total, pa, po, [s](T x) { return x / s; });
                    break;
                default:
                    throw ContractError("tape: bad elementwise op");
            }
        } else {  // kind == 1: [R,C] op row [C]
            auto rc = row_view(a);
            const int64_t R = rc.first, C = rc.second;
#pragma omp parallel for schedule(static)
            for (int64_t r = 0; r < R; ++r) {
                const T* ar = pa + r * C;
                T* orow = po + r * C;
                switch (op) {
                    case Op::add:
                        for (int64_t j = 0; j < C; ++j) orow[j] = ar[j] + pb[j];
                        break;
                    case Op::sub:
                        for (int64_t j = 0; j < C; ++j) orow[j] = ar[j] - pb[j];
                        break;
                    case Op::mul:
                        for (int64_t j = 0; j < C; ++j) orow[j] = ar[j] * pb[j];
                        break;
                    default:
                        break;  // div rejected above
                }
            }
        }
    });
    n.value = std::move(out);
    return wrap(push(std::move(n)));
}

Var Tape::add(Var a, Var b) { return binary_bcast(Op::add, a, b); }
Var Tape::sub(Var a, Var b) { return binary_bcast(Op::sub, a, b); }
Var Tape::mul(Var a, Var b) { return binary_bcast(Op::mul, a, b); }
Var Tape::div(Var a, Var b) { return binary_bcast(Op::div_, a, b); }

Var Tape::affine(Var x, double m, double c) {
    const Node& nx = node(x);
    Node n;
    n.op = Op::affine;
    n.a = x.id;
    n.d0 = m;
    n.d1 = c;
    n.needs_grad = nx.needs_grad;
    Tensor out = Tensor::zeros(nx.value.shape(), nx.value.dtype());
    dispatch(nx.value.dtype(), [&](auto tag) {
        using T = decltype(tag);
        T tm = static_cast<T>(m), tc = static_cast<T>(c);
        kern::ew_unary(nx.value.numel(), nx.value.data<T>(), out.data<T>(),
                       [tm, tc](T v) { return tm * v + tc; });
    });
    n.value = std::move(out);
    return wrap(push(std::move(n)));
}

// --------------------------------------------------------------- matmuls

Var Tape::matmul(Var a, Var b) {
    const Node& na = node(a);
    const Node& nb = node(b);
    const Tensor& ta = na.value;
    const Tensor& tb = nb.value;
    check(ta.ndim() == 2 && tb.ndim() == 2, "tape: matmul needs 2-D inputs");
    check(ta.dtype() == tb.dtype(), "tape: dtype mismatch in matmul");
    check(ta.shape()[1] == tb.shape()[0], "tape: matmul shape mismatch " + ta.shape_str() +
                                              " @ " + tb.shape_str());
    Node n;
    n.op = Op::matmul;
    n.a = a.id;
    n.b = b.id;
    n.needs_grad = na.needs_grad || nb.needs_grad;
    Tensor out = Tensor::zeros({ta.shape()[0], tb.shape()[1]}, ta.dtype());
    dispatch(ta.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kern::mm_nn(ta.shape()[0], ta.shape()[1], tb.shape()[1], ta.data<T>(), tb.data<T>(),
                    out.data<T>());
    });
    n.value = std::move(out);
    return wrap(push(std::move(n)));
}

Var Tape::matmul_nt(Var a, Var b) {
    const Node& na = node(a);
    const Node& nb = node(b);
    const Tensor& ta = na.value;
    const Tensor& tb = nb.value;
    check(ta.ndim() == 2 && tb.ndim() == 2, "tape: matmul_nt needs 2-D inputs");
    check(ta.dtype() == tb.dtype(), "tape: dtype mismatch in matmul_nt");
    check(ta.shape()[1] == tb.shape()[1], "tape: matmul_nt shape mismatch " + ta.shape_str() +
                                              " @ " + tb.shape_str() + "^T");
    Node n;
    n.op = Op::matmul_nt;
    n.a = a.id;
    n.b = b.id;
    n.needs_grad = na.needs_grad || nb.needs_grad;
    Tensor out = Tensor::zeros({ta.shape()[0], tb.shape()[0]}, ta.dtype());
    dispatch(ta.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kern::mm_nt(ta.shape()[0], ta.shape()[1], tb.shape()[0], ta.data<T>(), tb.data<T>(),
                    out.data<T>());
    });
    n.value = std::move(out);
    return wrap(push(std::move(n)));
}

// ----------------------------------------------------------------- unaries

namespace {
template <typename T>
T sigmoid_scalar(T x) {
    if (x >= T(0)) {
        T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    T e = std::exp(x);
    return e / (T(1) + e);
}
}  // namespace

#define MSTR_UNARY_OP(NAME, OPCODE, EXPR, DOMAIN_CHECK)                                   \
    Var Tape::NAME(Var x) {                                                              \
        const Node& nx = node(x);                                                        \
        const Tensor& tx = nx.value;                                                     \
        Node n;                                                                          \
        n.op = OPCODE;                                                                   \
        n.a = x.id;                                                                      \
        n.needs_grad = nx.needs_grad;                                                    \
        Tensor out = Tensor::zeros(tx.shape(), tx.dtype());                              \
        dispatch(tx.dtype(), [&](auto tag) {                                             \
            using T = decltype(tag);                                                     \
            const T* px = tx.data<T>();                                                  \
            int64_t total = tx.numel();                                                  \
            DOMAIN_CHECK;                                                                \
            kern::ew_unary(total, px, out.data<T>(), [](T v) { return EXPR; });          \
        });                                                                              \
        n.value = std::move(out);                                                        \
        return wrap(push(std::move(n)));                                                 \
    }

MSTR_UNARY_OP(sigmoid, Op::sigmoid, sigmoid_scalar(v), {})
MSTR_UNARY_OP(tanh, Op::tanh_, std::tanh(v), {})
MSTR_UNARY_OP(exp, Op::exp_, std::exp(v), {})
MSTR_UNARY_OP(log, Op::log_, std::log(v), {
    for (int64_t i = 0; i < total; ++i)
        if (!(px[i] > T(0))) throw DomainError("tape: log of non-positive value");
})
MSTR_UNARY_OP(sqrt, Op::sqrt_, std::sqrt(v), {
    for (int64_t i = 0; i < total; ++i)
        if (px[i] < T(0)) throw DomainError("tape: sqrt of negative value");
})
MSTR_UNARY_OP(abs, Op::abs_, std::fabs(v), {})

#undef MSTR_UNARY_OP

Var Tape::gelu(Var x) {
    const Node& nx = node(x);
    const Tensor& tx = nx.value;
    Node n;
    n.op = Op::gelu;
    n.a = x.id;
    n.needs_grad = nx.needs_grad;
    Tensor out = Tensor::zeros(tx.shape(), tx.dtype());
    dispatch(tx.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T c = static_cast<T>(kGeluC), a = static_cast<T>(kGeluA);
        kern::ew_unary(tx.numel(), tx.data<T>(), out.data<T>(), [c, a](T v) {
            T u = c * (v + a * v * v * v);
            return T(0.5) * v * (T(1) + std::tanh(u));
        });
    });
    n.value = std::move(out);
    return wrap(push(std::move(n)));
}

// ----------------------------------------------------- softmax / layer norm

Var Tape::softmax_masked(Var x) { return softmax_masked(x, Var{}); }

Var Tape::softmax_masked(Var x, Var mask) {
    const Node& nx = node(x);
    const Tensor& tx = nx.value;
    auto rc = row_view(tx);
    const int64_t R = rc.first, C = rc.second;
    int64_t mask_stride = 0;
    const Tensor* tm = nullptr;
    if (mask.valid()) {
        const Node& nm = node(mask);
        tm = &nm.value;
        check(tm->dtype() == tx.dtype(), "tape: mask dtype mismatch");
        auto [MR, MC] = row_view(*tm);
        check(MC == C && (MR == 1 || MR == R),
              "tape: mask shape " + tm->shape_str() + " does not match rows of " +
                  tx.shape_str());
        mask_stride = (MR == R) ? C : 0;
        // A [R,C] mask with R==1 degenerates to the shared-row case; both have
        // stride semantics handled above.
        if (R == 1) mask_stride = 0;
    }
    Node n;
    n.op = Op::softmax_masked;
    n.a = x.id;
    n.b = mask.valid() ? mask.id : -1;
    n.i0 = mask_stride;
    n.needs_grad = nx.needs_grad;
    Tensor out = Tensor::zeros(tx.shape(), tx.dtype());
    dispatch(tx.dtype(), [&](auto tag) {
        using T = decltype(tag);
        int64_t empty = kern::softmax_masked_rows(R, C, tx.data<T>(),
                                                  tm ? tm->data<T>() : nullptr, mask_stride,
                                                  out.data<T>());
        if (empty > 0) throw DomainError("tape: softmax row with every entry masked");
    });
    n.value = std::move(out);
    return wrap(push(std::move(n)));
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
    const Node& nx = node(x);
    const Node& ng = node(gain);
    const Node& nb = node(bias);
    const Tensor& tx = nx.value;
    auto rc = row_view(tx);
    const int64_t R = rc.first, C = rc.second;
    check(ng.value.numel() == C && nb.value.numel() == C,
          "tape: layer_norm gain/bias must have width " + std::to_string(C));
    check(tx.dtype() == ng.value.dtype() && tx.dtype() == nb.value.dtype(),
          "tape: dtype mismatch in layer_norm");
    Node n;
    n.op = Op::layer_norm;
    n.a = x.id;
    n.b = gain.id;
    n.c = bias.id;
    n.d0 = eps;
    n.needs_grad = nx.needs_grad || ng.needs_grad || nb.needs_grad;
    Tensor out = Tensor::zeros(tx.shape(), tx.dtype());
    Tensor aux = Tensor::zeros({2, R}, tx.dtype());  // row 0: mean, row 1: rstd
    dispatch(tx.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kern::layer_norm_rows(R, C, tx.data<T>(), ng.value.data<T>(), nb.value.data<T>(),
                              static_cast<T>(eps), out.data<T>(), aux.data<T>(),
                              aux.data<T>() + R);
    });
    n.value = std::move(out);
    n.aux = std::move(aux);
    return wrap(push(std::move(n)));
}

// --------------------------------------------------------- cumulative ops

Var Tape::cumsum(Var x) {
    const Node& nx = node(x);
    auto rc = row_view(nx.value);
    const int64_t R = rc.first, C = rc.second;
    Node n;
    n.op = Op::cumsum;
    n.a = x.id;
    n.needs_grad = nx.needs_grad;
    Tensor out = Tensor::zeros(nx.value.shape(), nx.value.dtype());
    dispatch(nx.value.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kern::cumsum_rows(R, C, nx.value.data<T>(), out.data<T>());
    });
    n.value = std::move(out);
    return wrap(push(std::move(n)));
}

Var Tape::cumprod(Var x) {
    const Node& nx = node(x);
    auto rc = row_view(nx.value);
    const int64_t R = rc.first, C = rc.second;
    Node n;
    n.op = Op::cumprod;
    n.a = x.id;
    n.needs_grad = nx.needs_grad;
    Tensor out = Tensor::zeros(nx.value.shape(), nx.value.dtype());
    dispatch(nx.value.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kern::cumprod_rows(R, C, nx.value.data<T>(), out.data<T>());
    });
    n.value = std::move(out);
    return wrap(push(std::move(n)));
}

Var Tape::clamp(Var x, double lo, double hi) {
    check(lo <= hi, "tape: clamp with lo > hi");
    const Node& nx = node(x);
    Node n;
    n.op = Op::clamp;
    n.a = x.id;
    n.d0 = lo;
    n.d1 = hi;
    n.needs_grad = nx.needs_grad;
    Tensor out = Tensor::zeros(nx.value.shape(), nx.value.dtype());
    dispatch(nx.value.dtype(), [&](auto tag) {
        using T = decltype(tag);
        T tlo = static_cast<T>(lo), thi = static_cast<T>(hi);
        kern::ew_unary(nx.value.numel(), nx.value.data<T>(), out.data<T>(),
                       [tlo, thi](T v) { return v < tlo ? tlo : (v > thi ? thi : v); });
    });
    n.value = std::move(out);
    return wrap(push(std::move(n)));
}

// ------------------------------------------------------ structural ops

Var Tape::gather_rows(Var x, std::vector<int64_t> rows) {
    const Node& nx = node(x);
    const Tensor& tx = nx.value;
    check(tx.ndim() == 2, "tape: gather_rows needs a 2-D table");
    int64_t R = tx.shape()[0], C = tx.shape()[1];
    for (int64_t r : rows) {
        check(r >= 0 && r < R, "tape: gather_rows index " + std::to_string(r) +
                                   " out of range [0," + std::to_string(R) + ")");
    }
    Node n;
    n.op = Op::gather_rows;
    n.a = x.id;
    n.idx = std::move(rows);
    n.needs_grad = nx.needs_grad;
    int64_t K = static_cast<int64_t>(n.idx.size());
    Tensor out = Tensor::zeros({K, C}, tx.dtype());
    dispatch(tx.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = tx.data<T>();
        T* po = out.data<T>();
        for (int64_t k = 0; k < K; ++k) {
            std::memcpy(po + k * C, px + n.idx[static_cast<size_t>(k)] * C,
                        sizeof(T) * static_cast<size_t>(C));
        }
    });
    n.value = std::move(out);
    return wrap(push(std::move(n)));
}

Var Tape::concat_rows(const std::vector<Var>& parts) {
    check(!parts.empty(), "tape: concat_rows of nothing");
    Node n;
    n.op = Op::concat_rows;
    int64_t R = 0, C = -1;
    Dtype dt = Dtype::f64;
    for (size_t i = 0; i < parts.size(); ++i) {
        const Node& p = node(parts[i]);
        check(p.value.ndim() == 2, "tape: concat_rows needs 2-D parts");
        if (i == 0) {
            C = p.value.shape()[1];
            dt = p.value.dtype();
        } else {
            check(p.value.shape()[1] == C, "tape: concat_rows width mismatch");
            check(p.value.dtype() == dt, "tape: concat_rows dtype mismatch");
        }
        R += p.value.shape()[0];
        n.list.push_back(parts[i].id);
        n.needs_grad = n.needs_grad || p.needs_grad;
    }
    Tensor out = Tensor::zeros({R, C}, dt);
    dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        T* po = out.data<T>();
        int64_t row = 0;
        for (int32_t id : n.list) {
            const Tensor& tp = nodes_[id].value;
            int64_t pr = tp.shape()[0];
            std::memcpy(po + row * C, tp.data<T>(),
                        sizeof(T) * static_cast<size_t>(pr * C));
            row += pr;
        }
    });
    n.value = std::move(out);
    return wrap(push(std::move(n)));
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
    check(!parts.empty(), "tape: concat_cols of nothing");
    Node n;
    n.op = Op::concat_cols;
    int64_t R = -1, C = 0;
    Dtype dt = Dtype::f64;
    for (size_t i = 0; i < parts.size(); ++i) {
        const Node& p = node(parts[i]);
        check(p.value.ndim() == 2, "tape: concat_cols needs 2-D parts");
        if (i == 0) {
            R = p.value.shape()[0];
            dt = p.value.dtype();
        } else {
            check(p.value.shape()[0] == R, "tape: concat_cols height mismatch");
            check(p.value.dtype() == dt, "tape: concat_cols dtype mismatch");
        }
        C += p.value.shape()[1];
        n.list.push_back(parts[i].id);
        n.needs_grad = n.needs_grad || p.needs_grad;
    }
    Tensor out = Tensor::zeros({R, C}, dt);
    dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        T* po = out.data<T>();
        int64_t col = 0;
        for (int32_t id : n.list) {
            const Tensor& tp = nodes_[id].value;
            int64_t pc = tp.shape()[1];
            const T* pp = tp.data<T>();
            for (int64_t r = 0; r < R; ++r) {
                std::memcpy(po + r * C + col, pp + r * pc,
                            sizeof(T) * static_cast<size_t>(pc));
            }
            col += pc;
        }
    });
    n.value = std::move(out);
    return wrap(push(std::move(n)));
}

Var Tape::slice_rows(Var x, int64_t r0, int64_t r1) {
    const Node& nx = node(x);
    const Tensor& tx = nx.value;
    check(tx.ndim() == 2, "tape: slice_rows needs a 2-D tensor");
    check(0 <= r0 && r0 < r1 && r1 <= tx.shape()[0],
          "tape: slice_rows range [" + std::to_string(r0) + "," + std::to_string(r1) +
              ") invalid for " + tx.shape_str());
    Node n;
    n.op = Op::slice_rows;
    n.a = x.id;
    n.i0 = r0;
    n.i1 = r1;
    n.needs_grad = nx.needs_grad;
    int64_t C = tx.shape()[1];
    Tensor out = Tensor::zeros({r1 - r0, C}, tx.dtype());
    dispatch(tx.dtype(), [&](auto tag) {
        using T = decltype(tag);
        std::memcpy(out.data<T>(), tx.data<T>() + r0 * C,
                    sizeof(T) * static_cast<size_t>((r1 - r0) * C));
    });
    n.value = std::move(out);
    return wrap(push(std::move(n)));
}

Var Tape::slice_cols(Var x, int64_t c0, int64_t c1) {
    const Node& nx = node(x);
    const Tensor& tx = nx.value;
    check(tx.ndim() == 2, "tape: slice_cols needs a 2-D tensor");
    check(0 <= c0 && c0 < c1 && c1 <= tx.shape()[1],
          "tape: slice_cols range [" + std::to_string(c0) + "," + std::to_string(c1) +
              ") invalid for " + tx.shape_str());
    Node n;
    n.op = Op::slice_cols;
    n.a = x.id;
    n.i0 = c0;
    n.i1 = c1;
    n.needs_grad = nx.needs_grad;
    int64_t R = tx.shape()[0], C = tx.shape()[1], W = c1 - c0;
    Tensor out = Tensor::zeros({R, W}, tx.dtype());
    dispatch(tx.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* px = tx.data<T>();
        T* po = out.data<T>();
        for (int64_t r = 0; r < R; ++r) {
            std::memcpy(po + r * W, px + r * C + c0, sizeof(T) * static_cast<size_t>(W));
        }
    });
    n.value = std::move(out);
    return wrap(push(std::move(n)));
}

Var Tape::reshape(Var x, std::vector<int64_t> shape) {
    const Node& nx = node(x);
    Node n;
    n.op = Op::reshape;
    n.a = x.id;
    n.needs_grad = nx.needs_grad;
    n.value = nx.value.clone().reshaped(std::move(shape));
    return wrap(push(std::move(n)));
}

// ------------------------------------------------------------- reductions

Var Tape::sum_all(Var x) {
    const Node& nx = node(x);
    Node n;
    n.op = Op::sum_all;
    n.a = x.id;
    n.needs_grad = nx.needs_grad;
    Tensor out = Tensor::zeros({1}, nx.value.dtype());
    dispatch(nx.value.dtype(), [&](auto tag) {
        using T = decltype(tag);
        out.data<T>()[0] = kern::reduce_sum(nx.value.numel(), nx.value.data<T>());
    });
    n.value = std::move(out);
    return wrap(push(std::move(n)));
}

Var Tape::mean_all(Var x) {
    const Node& nx = node(x);
    check(nx.value.numel() > 0, "tape: mean_all of empty tensor");
    Node n;
    n.op = Op::mean_all;
    n.a = x.id;
    n.needs_grad = nx.needs_grad;
    Tensor out = Tensor::zeros({1}, nx.value.dtype());
    dispatch(nx.value.dtype(), [&](auto tag) {
        using T = decltype(tag);
        out.data<T>()[0] =
            kern::reduce_sum(nx.value.numel(), nx.value.data<T>()) / static_cast<T>(nx.value.numel());
    });
    n.value = std::move(out);
    return wrap(push(std::move(n)));
}

Var Tape::cross_entropy_rows(Var logits, std::vector<int64_t> targets) {
    const Node& nx = node(logits);
    const Tensor& tx = nx.value;
    check(tx.ndim() == 2, "tape: cross_entropy_rows needs 2-D logits");
    int64_t R = tx.shape()[0], C = tx.shape()[1];
    check(static_cast<int64_t>(targets.size()) == R,
          "tape: cross_entropy_rows needs one target per row");
    for (int64_t t : targets) {
        check(t >= 0 && t < C, "tape: cross_entropy_rows target out of range");
    }
    Node n;
    n.op = Op::cross_entropy;
    n.a = logits.id;
    n.idx = std::move(targets);
    n.needs_grad = nx.needs_grad;
    Tensor out = Tensor::zeros({R}, tx.dtype());
    Tensor probs = Tensor::zeros({R, C}, tx.dtype());
    dispatch(tx.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kern::softmax_masked_rows(R, C, tx.data<T>(), static_cast<const T*>(nullptr), 0,
                                  probs.data<T>());
        const T* px = tx.data<T>();
        T* po = out.data<T>();
#pragma omp parallel for schedule(static)
        for (int64_t r = 0; r < R; ++r) {
            const T* row = px + r * C;
            T mx = row[0];
            for (int64_t j = 1; j < C; ++j) mx = row[j] > mx ? row[j] : mx;
            T denom = T(0);
            for (int64_t j = 0; j < C; ++j) denom += std::exp(row[j] - mx);
            po[r] = mx + std::log(denom) - row[n.idx[static_cast<size_t>(r)]];
        }
    });
    n.value = std::move(out);
    n.aux = std::move(probs);
    return wrap(push(std::move(n)));
}

// ---------------------------------------------------------------- backward

void Tape::accumulate(int32_t id, const Tensor& g) {
    Tensor& slot = grads_[id];
    if (!slot.defined()) {
        slot = Tensor::zeros(nodes_[id].value.shape(), nodes_[id].value.dtype());
    }
    dispatch(slot.dtype(), [&](auto tag) {
        using T = decltype(tag);
        kern::axpy(slot.numel(), T(1), g.data<T>(), slot.data<T>());
    });
}

Tensor Tape::grad(Var v) const {
    const Node& n = node(v);
    check(!grads_.empty(), "tape: grad() before backward()");
    const Tensor& g = grads_[v.id];
    if (g.defined()) return g;
    return Tensor::zeros(n.value.shape(), n.value.dtype());
}

void Tape::backward(Var root, const Tensor& seed) {
    const Node& r = node(root);
    check(seed.same_shape(r.value) && seed.dtype() == r.value.dtype(),
          "tape: backward seed must match root shape and dtype");
    grads_.assign(nodes_.size(), Tensor());
    accumulate(root.id, seed);
    for (int32_t i = root.id; i >= 0; --i) {
        if (!grads_[i].defined() || !nodes_[i].needs_grad) continue;
        if (nodes_[i].op == Op::leaf) continue;
        dispatch(nodes_[i].value.dtype(), [&](auto tag) {
            using T = decltype(tag);
            backward_node<T>(i);
        });
    }
}

template <typename T>
void Tape::backward_node(int32_t id) {
    Node& n = nodes_[id];
    const Tensor& g = grads_[id];
    const T* pg = g.data<T>();

    auto in_needs = [&](int32_t in) { return in >= 0 && nodes_[in].needs_grad; };
    // Ensure a zero-initialized gradient buffer for an input and return it.
    auto buf = [&](int32_t in) -> Tensor& {
        Tensor& slot = grads_[in];
        if (!slot.defined()) {
            slot = Tensor::zeros(nodes_[in].value.shape(), nodes_[in].value.dtype());
        }
        return slot;
    };
    // Reduce a full-shape gradient onto a broadcast right operand.
    auto reduce_onto_b = [&](int32_t bid, const std::vector<T>& full, int64_t R, int64_t C,
                             uint8_t kind) {
        T* gb = buf(bid).template data<T>();
        if (kind == 1) {
            for (int64_t r = 0; r < R; ++r) {
                const T* row = full.data() + r * C;
                for (int64_t j = 0; j < C; ++j) gb[j] += row[j];
            }
        } else {  // scalar
            T acc = T(0);
            for (size_t i = 0; i < full.size(); ++i) acc += full[i];
            gb[0] += acc;
        }
    };

    switch (n.op) {
        case Op::add:
        case Op::sub: {
            T sign = n.op == Op::add ? T(1) : T(-1);
            if (in_needs(n.a)) {
                kern::axpy(g.numel(), T(1), pg, buf(n.a).template data<T>());
            }
            if (in_needs(n.b)) {
                if (n.bcast == 0) {
                    kern::axpy(g.numel(), sign, pg, buf(n.b).template data<T>());
                } else {
                    int64_t R = 0, C = 0;
                    if (n.bcast == 1) {
                        auto rc = row_view(n.value);
                        R = rc.first;
                        C = rc.second;
                    }
                    std::vector<T> full(pg, pg + g.numel());
                    if (sign < T(0)) {
                        for (auto& v : full) v = -v;
                    }
                    reduce_onto_b(n.b, full, R, C, n.bcast);
                }
            }
            break;
        }
        case Op::mul: {
            const Tensor& a = nodes_[n.a].value;
            const Tensor& b = nodes_[n.b].value;
            const T* pa = a.data<T>();
            const T* pb = b.data<T>();
            int64_t R = 0, C = 0;
            if (n.bcast == 1) {
                auto rc = row_view(n.value);
                R = rc.first;
                C = rc.second;
            }
            if (in_needs(n.a)) {
                T* ga = buf(n.a).template data<T>();
                if (n.bcast == 0) {
                    for (int64_t i = 0; i < g.numel(); ++i) ga[i] += pg[i] * pb[i];
                } else if (n.bcast == 2) {
                    kern::axpy(g.numel(), pb[0], pg, ga);
                } else {
                    for (int64_t r = 0; r < R; ++r)
                        for (int64_t j = 0; j < C; ++j) ga[r * C + j] += pg[r * C + j] * pb[j];
                }
            }
            if (in_needs(n.b)) {
                std::vector<T> full(static_cast<size_t>(g.numel()));
                for (int64_t i = 0; i < g.numel(); ++i) full[static_cast<size_t>(i)] = pg[i] * pa[i];
                if (n.bcast == 0) {
                    kern::axpy(g.numel(), T(1), full.data(), buf(n.b).template data<T>());
                } else {
                    reduce_onto_b(n.b, full, R, C, n.bcast);
                }
            }
            break;
        }
        case Op::div_: {
            const Tensor& a = nodes_[n.a].value;
            const Tensor& b = nodes_[n.b].value;
            const T* pa = a.data<T>();
            const T* pb = b.data<T>();
            if (in_needs(n.a)) {
                T* ga = buf(n.a).template data<T>();
                if (n.bcast == 0) {
                    for (int64_t i = 0; i < g.numel(); ++i) ga[i] += pg[i] / pb[i];
                } else {
                    kern::axpy(g.numel(), T(1) / pb[0], pg, ga);
                }
            }
            if (in_needs(n.b)) {
                if (n.bcast == 0) {
                    T* gb = buf(n.b).template data<T>();
                    for (int64_t i = 0; i < g.numel(); ++i)
                        gb[i] -= pg[i] * pa[i] / (pb[i] * pb[i]);
                } else {
                    T acc = T(0);
                    for (int64_t i = 0; i < g.numel(); ++i) acc -= pg[i] * pa[i];
                    buf(n.b).template data<T>()[0] += acc / (pb[0] * pb[0]);
                }
            }
            break;
        }
        case Op::affine: {
            if (in_needs(n.a)) {
                kern::axpy(g.numel(), static_cast<T>(n.d0), pg, buf(n.a).template data<T>());
            }
            break;
        }
        case Op::matmul: {
            const Tensor& a = nodes_[n.a].value;
            const Tensor& b = nodes_[n.b].value;
            int64_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
            if (in_needs(n.a)) {
                Tensor tmp = Tensor::zeros({M, K}, a.dtype());
                kern::mm_nt(M, N, K, pg, b.data<T>(), tmp.data<T>());
                kern::axpy(tmp.numel(), T(1), tmp.data<T>(), buf(n.a).template data<T>());
            }
            if (in_needs(n.b)) {
                Tensor tmp = Tensor::zeros({K, N}, b.dtype());
                kern::mm_tn(K, M, N, a.data<T>(), pg, tmp.data<T>());
                kern::axpy(tmp.numel(), T(1), tmp.data<T>(), buf(n.b).template data<T>());
            }
            break;
        }
        case Op::matmul_nt: {
            const Tensor& a = nodes_[n.a].value;
            const Tensor& b = nodes_[n.b].value;
            int64_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[0];
            if (in_needs(n.a)) {
                Tensor tmp = Tensor::zeros({M, K}, a.dtype());
                kern::mm_nn(M, N, K, pg, b.data<T>(), tmp.data<T>());
                kern::axpy(tmp.numel(), T(1), tmp.data<T>(), buf(n.a).template data<T>());
            }
            if (in_needs(n.b)) {
                Tensor tmp = Tensor::zeros({N, K}, b.dtype());
                kern::mm_tn(N, M, K, pg, a.data<T>(), tmp.data<T>());
                kern::axpy(tmp.numel(), T(1), tmp.data<T>(), buf(n.b).template data<T>());
            }
            break;
        }
        case Op::sigmoid: {
            const T* py = n.value.data<T>();
            T* ga = buf(n.a).template data<T>();
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += pg[i] * py[i] * (T(1) - py[i]);
            break;
        }
        case Op::tanh_: {
            const T* py = n.value.data<T>();
            T* ga = buf(n.a).template data<T>();
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += pg[i] * (T(1) - py[i] * py[i]);
            break;
        }
        case Op::exp_: {
            const T* py = n.value.data<T>();
            T* ga = buf(n.a).template data<T>();
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += pg[i] * py[i];
            break;
        }
        case Op::log_: {
            const T* px = nodes_[n.a].value.data<T>();
            T* ga = buf(n.a).template data<T>();
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += pg[i] / px[i];
            break;
        }
        case Op::sqrt_: {
            const T* py = n.value.data<T>();
            T* ga = buf(n.a).template data<T>();
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += pg[i] / (T(2) * py[i]);
            break;
        }
        case Op::abs_: {
            const T* px = nodes_[n.a].value.data<T>();
            T* ga = buf(n.a).template data<T>();
            for (int64_t i = 0; i < g.numel(); ++i) {
                T s = px[i] > T(0) ? T(1) : (px[i] < T(0) ? T(-1) : T(0));
                ga[i] += pg[i] * s;
            }
            break;
        }
        case Op::gelu: {
            const T* px = nodes_[n.a].value.data<T>();
            T* ga = buf(n.a).template data<T>();
            const T c = static_cast<T>(kGeluC), a = static_cast<T>(kGeluA);
            for (int64_t i = 0; i < g.numel(); ++i) {
                T x = px[i];
                T u = c * (x + a * x * x * x);
                T t = std::tanh(u);
                T du = c * (T(1) + T(3) * a * x * x);
                T d = T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
                ga[i] += pg[i] * d;
            }
            break;
        }
        case Op::softmax_masked: {
            if (!in_needs(n.a)) break;
            const T* py = n.value.data<T>();
            auto [R, C] = row_view(n.value);
            T* ga = buf(n.a).template data<T>();
            for (int64_t r = 0; r < R; ++r) {
                const T* yrow = py + r * C;
                const T* grow = pg + r * C;
                T dot = T(0);
                for (int64_t j = 0; j < C; ++j) dot += grow[j] * yrow[j];
                T* garow = ga + r * C;
                for (int64_t j = 0; j < C; ++j) garow[j] += yrow[j] * (grow[j] - dot);
            }
            break;
        }
        case Op::layer_norm: {
            const Tensor& x = nodes_[n.a].value;
            const Tensor& gain = nodes_[n.b].value;
            auto [R, C] = row_view(x);
            Tensor gx = Tensor::zeros(x.shape(), x.dtype());
            Tensor ggain = Tensor::zeros(gain.shape(), gain.dtype());
            Tensor gbias = Tensor::zeros(gain.shape(), gain.dtype());
            kern::layer_norm_rows_bwd(R, C, x.data<T>(), gain.data<T>(), n.aux.data<T>(),
                                      n.aux.data<T>() + R, pg, gx.data<T>(),
                                      ggain.data<T>(), gbias.data<T>());
            if (in_needs(n.a)) {
                kern::axpy(gx.numel(), T(1), gx.data<T>(), buf(n.a).template data<T>());
            }
            if (in_needs(n.b)) {
                kern::axpy(ggain.numel(), T(1), ggain.data<T>(), buf(n.b).template data<T>());
            }
            if (in_needs(n.c)) {
                kern::axpy(gbias.numel(), T(1), gbias.data<T>(), buf(n.c).template data<T>());
            }
            break;
        }
        case Op::cumsum: {
            auto [R, C] = row_view(n.value);
            T* ga = buf(n.a).template data<T>();
            for (int64_t r = 0; r < R; ++r) {
                const T* grow = pg + r * C;
                T* garow = ga + r * C;
                T acc = T(0);
                for (int64_t j = C - 1; j >= 0; --j) {
                    acc += grow[j];
                    garow[j] += acc;
                }
            }
            break;
        }
        case Op::cumprod: {
            // d(out_k)/d(x_j) = out_k / x_j for j <= k; denominators are
            // clamped in magnitude at 1e-12 (sign preserved, zeros treated as
            // +1e-12) per the exclusive-product decomposition.
            const T* px = nodes_[n.a].value.data<T>();
            const T* py = n.value.data<T>();
            auto [R, C] = row_view(n.value);
            T* ga = buf(n.a).template data<T>();
            const T tiny = static_cast<T>(1e-12);
            for (int64_t r = 0; r < R; ++r) {
                const T* xrow = px + r * C;
                const T* yrow = py + r * C;
                const T* grow = pg + r * C;
                T* garow = ga + r * C;
                T acc = T(0);
                for (int64_t j = C - 1; j >= 0; --j) {
                    acc += grow[j] * yrow[j];
                    T d = xrow[j];
                    if (d >= T(0) && d < tiny) d = tiny;
                    if (d < T(0) && d > -tiny) d = -tiny;
                    garow[j] += acc / d;
                }
            }
            break;
        }
        case Op::clamp: {
            const T* px = nodes_[n.a].value.data<T>();
            T* ga = buf(n.a).template data<T>();
            T lo = static_cast<T>(n.d0), hi = static_cast<T>(n.d1);
            for (int64_t i = 0; i < g.numel(); ++i) {
                if (px[i] > lo && px[i] < hi) ga[i] += pg[i];
            }
            break;
        }
        case Op::gather_rows: {
            if (!in_needs(n.a)) break;
            int64_t C = n.value.shape()[1];
            T* ga = buf(n.a).template data<T>();
            // Serial scatter-add: repeated indices must accumulate in a fixed
            // order for bit-reproducibility.
            for (size_t k = 0; k < n.idx.size(); ++k) {
                const T* grow = pg + static_cast<int64_t>(k) * C;
                T* garow = ga + n.idx[k] * C;
                for (int64_t j = 0; j < C; ++j) garow[j] += grow[j];
            }
            break;
        }
        case Op::concat_rows: {
            int64_t C = n.value.shape()[1];
            int64_t row = 0;
            for (int32_t in : n.list) {
                int64_t pr = nodes_[in].value.shape()[0];
                if (in_needs(in)) {
                    T* gi = buf(in).template data<T>();
                    kern::axpy(pr * C, T(1), pg + row * C, gi);
                }
                row += pr;
            }
            break;
        }
        case Op::concat_cols: {
            int64_t R = n.value.shape()[0];
            int64_t C = n.value.shape()[1];
            int64_t col = 0;
            for (int32_t in : n.list) {
                int64_t pc = nodes_[in].value.shape()[1];
                if (in_needs(in)) {
                    T* gi = buf(in).template data<T>();
                    for (int64_t r = 0; r < R; ++r) {
                        const T* grow = pg + r * C + col;
                        T* girow = gi + r * pc;
                        for (int64_t j = 0; j < pc; ++j) girow[j] += grow[j];
                    }
                }
                col += pc;
            }
            break;
        }
        case Op::slice_rows: {
            int64_t C = n.value.shape()[1];
            T* ga = buf(n.a).template data<T>();
            kern::axpy((n.i1 - n.i0) * C, T(1), pg, ga + n.i0 * C);
            break;
        }
        case Op::slice_cols: {
            int64_t R = n.value.shape()[0];
            int64_t W = n.i1 - n.i0;
            int64_t C = nodes_[n.a].value.shape()[1];
            T* ga = buf(n.a).template data<T>();
            for (int64_t r = 0; r < R; ++r) {
                const T* grow = pg + r * W;
                T* garow = ga + r * C + n.i0;
                for (int64_t j = 0; j < W; ++j) garow[j] += grow[j];
            }
            break;
        }
        case Op::reshape: {
            T* ga = buf(n.a).template data<T>();
            kern::axpy(g.numel(), T(1), pg, ga);
            break;
        }
        case Op::sum_all: {
            T* ga = buf(n.a).template data<T>();
            T gv = pg[0];
            int64_t total = nodes_[n.a].value.numel();
            for (int64_t i = 0; i < total; ++i) ga[i] += gv;
            break;
        }
        case Op::mean_all: {
            T* ga = buf(n.a).template data<T>();
            int64_t total = nodes_[n.a].value.numel();
            T gv = pg[0] / static_cast<T>(total);
            for (int64_t i = 0; i < total; ++i) ga[i] += gv;
            break;
        }
        case Op::cross_entropy: {
            if (!in_needs(n.a)) break;
            const T* probs = n.aux.data<T>();
            auto [R, C] = row_view(n.aux);
            T* ga = buf(n.a).template data<T>();
            for (int64_t r = 0; r < R; ++r) {
                T gv = pg[r];
                const T* prow = probs + r * C;
                T* garow = ga + r * C;
                for (int64_t j = 0; j < C; ++j) garow[j] += gv * prow[j];
                garow[n.idx[static_cast<size_t>(r)]] -= gv;
            }
            break;
        }
        case Op::leaf:
            break;
    }
}

template void Tape::backward_node<double>(int32_t);
template void Tape::backward_node<float>(int32_t);

}  // namespace mstr
