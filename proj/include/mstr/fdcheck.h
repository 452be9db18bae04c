#pragma once
// Central finite-difference gradient checking.
//
// Compares tape gradients against (f(x+h) - f(x-h)) / 2h elementwise for a
// chosen set of parameters.  The loss builder must construct the forward pass
// on the given tape and return a scalar ([1]) Var; it must be deterministic
// (any noise frozen by seed) -- the checker evaluates the baseline twice and
// throws IndeterminacyError if the values differ.

#include <functional>
#include <string>
#include <vector>

#include "mstr/params.h"

namespace mstr {

struct FdReport {
    std::string param;
    double max_rel_err = 0.0;
    int64_t worst_index = -1;
    double analytic = 0.0;  // at the worst element
    double numeric = 0.0;
    bool pass = true;
};

using LossBuilder = std::function<Var(Tape&, Bindings&)>;

// Check d(loss)/d(param) for every element of every named parameter.
// Parameters must be f64.  An element passes when
//   |analytic - numeric| <= abs_tol + rel_tol * max(|analytic|, |numeric|);
// the absolute term absorbs central-difference cancellation noise (roughly
// eps * |loss| / step), which dominates whenever the true derivative is zero.
// max_rel_err reports the scaled error whose rel_tol comparison encodes
// exactly that criterion.
std::vector<FdReport> finite_diff_check(ParamStore& store,
                                        const std::vector<std::string>& params,
                                        const LossBuilder& build, double step = 1e-5,
                                        double rel_tol = 1e-5, double abs_tol = 1e-7);

bool fd_all_pass(const std::vector<FdReport>& reports);

}  // namespace mstr
