#pragma once
// Reverse-mode autodiff over Tensor values.
//
// Define-by-run: every operation appends a node to the tape (append order is
// a valid topological order), records its inputs and whatever the backward
// pass needs, and returns a Var handle.  backward(root, seed) walks the nodes
// in reverse and accumulates gradients; grad(v) reads them back.
//
// Handles are invalidated by reset(); using one afterwards is a contract
// violation ("stale tape").  A tape is single-threaded; distinct tapes may
// run concurrently.  Kernels inside an op may use OpenMP internally.
//
// Broadcasting is deliberately minimal and right-sided only:
//   add/sub/mul:  [R,C] op [C] (or [1,C]) row vector, or anything op [1].
//   div:          same shape, or anything / [1].
// Everything else requires exact shapes, documented per op.

#include <cstdint>
#include <vector>

#include "mstr/tensor.h"

namespace mstr {

struct Var {
    int32_t id = -1;
    uint64_t gen = 0;
    bool valid() const { return id >= 0; }
};

class Tape {
  public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Inputs.  leaf() participates in gradients, constant() does not.
    Var leaf(Tensor v);
    Var constant(Tensor v);
    Var scalar_const(double v, Dtype dt = Dtype::f64);

    // Elementwise with right-sided broadcast (see top comment).
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var div(Var a, Var b);
    // m * x + c with compile-time constants (no extra node inputs).
    Var affine(Var x, double m, double c);

    // out = a @ b, a:[M,K] b:[K,N].
    Var matmul(Var a, Var b);
    // out = a @ b^T, a:[M,K] b:[N,K].
    Var matmul_nt(Var a, Var b);

    Var sigmoid(Var x);
    Var tanh(Var x);
    Var exp(Var x);
    Var log(Var x);    // domain: x > 0
    Var sqrt(Var x);   // domain: x >= 0
    Var abs(Var x);
    Var gelu(Var x);   // tanh approximation

    // Row-wise softmax; mask entries <= 0.5 are excluded and produce exact
    // zeros.  The mask is data, not a differentiable input.  mask may be a
    // [R,C] tensor or a single [C] / [1,C] row shared by all rows.  A row
    // with no unmasked entry is a domain error.
    Var softmax_masked(Var x);
    Var softmax_masked(Var x, Var mask);

    // Row-wise layer normalization with learnable gain/bias of width C.
    Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

    // Along the last axis of a 2-D tensor (or a 1-D tensor as one row).
    Var cumsum(Var x);
    Var cumprod(Var x);

    Var clamp(Var x, double lo, double hi);

    // Row selection; indices may repeat (gradients scatter-add).  Also the
    // embedding lookup: gather_rows(table, token_ids).
    Var gather_rows(Var x, std::vector<int64_t> rows);

    Var concat_rows(const std::vector<Var>& parts);
    Var concat_cols(const std::vector<Var>& parts);
    Var slice_rows(Var x, int64_t r0, int64_t r1);
    Var slice_cols(Var x, int64_t c0, int64_t c1);
    Var reshape(Var x, std::vector<int64_t> shape);

    Var sum_all(Var x);   // -> [1]
    Var mean_all(Var x);  // -> [1]

    // Per-row negative log-likelihood with a numerically stable log-sum-exp;
    // gradient is softmax(logits) - onehot(target).  -> [R]
    Var cross_entropy_rows(Var logits, std::vector<int64_t> targets);

    const Tensor& value(Var v) const;
    size_t size() const { return nodes_.size(); }

    // Reverse sweep from root.  seed must match the root's shape.  Gradients
    // from any previous backward call on this tape are discarded.
    void backward(Var root, const Tensor& seed);
    // Gradient accumulated at v; zeros if the node was not reached.
    Tensor grad(Var v) const;

    // Invalidate all handles and clear the graph.
    void reset();
    uint64_t generation() const { return gen_; }

  private:
    enum class Op : uint8_t {
        leaf, add, sub, mul, div_, affine, matmul, matmul_nt,
        sigmoid, tanh_, exp_, log_, sqrt_, abs_, gelu,
        softmax_masked, layer_norm, cumsum, cumprod, clamp,
        gather_rows, concat_rows, concat_cols, slice_rows, slice_cols,
        reshape, sum_all, mean_all, cross_entropy
    };

    struct Node {
        Op op = Op::leaf;
        int32_t a = -1, b = -1, c = -1;
        std::vector<int32_t> list;     // concat inputs
        Tensor value;
        Tensor aux;                    // op-specific saved state
        std::vector<int64_t> idx;      // gather rows / CE targets
        double d0 = 0.0, d1 = 0.0;     // clamp lo/hi, affine m/c, LN eps
        int64_t i0 = 0, i1 = 0;        // slice bounds
        uint8_t bcast = 0;             // 0 same, 1 row vector, 2 scalar
        bool needs_grad = false;
    };

    const Node& node(Var v) const;
    int32_t push(Node n);
    Var wrap(int32_t id) const { return Var{id, gen_}; }
    Var binary_bcast(Op op, Var a, Var b);
    void accumulate(int32_t id, const Tensor& g);
    template <typename T>
    void backward_node(int32_t id);

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    uint64_t gen_ = 1;
};

}  // namespace mstr
