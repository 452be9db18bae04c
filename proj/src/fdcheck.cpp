#include "mstr/fdcheck.h"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace mstr {

namespace {
double eval_loss(ParamStore& store, const LossBuilder& build) {
    Tape tape;
    Bindings binds(store);
    Var loss = build(tape, binds);
    const Tensor& v = tape.value(loss);
    check(v.numel() == 1, "finite_diff_check: loss must be scalar");
    return v.get(0);
}
}  // namespace

std::vector<FdReport> finite_diff_check(ParamStore& store,
                                        const std::vector<std::string>& params,
                                        const LossBuilder& build, double step,
                                        double rel_tol, double abs_tol) {
    check(step > 0, "finite_diff_check: step must be positive");
    check(rel_tol > 0 && abs_tol >= 0, "finite_diff_check: bad tolerances");

    double base0 = eval_loss(store, build);
    double base1 = eval_loss(store, build);
    if (std::memcmp(&base0, &base1, sizeof(double)) != 0) {
        throw IndeterminacyError(
            "finite_diff_check: loss is not deterministic under frozen inputs (" +
            std::to_string(base0) + " vs " + std::to_string(base1) + ")");
    }

    // Analytic gradients once.
    std::map<std::string, Tensor> analytic;
    {
        Tape tape;
        Bindings binds(store);
        Var loss = build(tape, binds);
        tape.backward(loss, Tensor::scalar(1.0));
        analytic = binds.grad_map(tape);
    }

    std::vector<FdReport> reports;
    for (const std::string& name : params) {
        ParamStore::Entry& e = store.at(name);
        check(e.value.dtype() == Dtype::f64,
              "finite_diff_check: parameter '" + name + "' must be f64");
        FdReport rep;
        rep.param = name;

        Tensor ga;
        auto it = analytic.find(name);
        if (it != analytic.end()) {
            ga = it->second;
        } else {
            ga = Tensor::zeros(e.value.shape(), Dtype::f64);  // never bound -> zero grad
        }

        int64_t n = e.value.numel();
        double* pv = e.value.f64();
        for (int64_t i = 0; i < n; ++i) {
            double orig = pv[i];
            pv[i] = orig + step;
            double fp = eval_loss(store, build);
            pv[i] = orig - step;
            double fm = eval_loss(store, build);
            pv[i] = orig;

            double numeric = (fp - fm) / (2.0 * step);
            double a = ga.get(i);
            // Scaled error such that (err <= rel_tol) is exactly the isclose
            // criterion |a - n| <= abs_tol + rel_tol * max(|a|, |n|).  The
            // absolute term absorbs central-difference cancellation noise
            // (roughly eps * |loss| / step), which dominates whenever the
            // true derivative is zero -- e.g. a bias softmax is invariant to.
            double mag = std::max(std::fabs(a), std::fabs(numeric));
            double rel = std::fabs(a - numeric) / (abs_tol / rel_tol + mag);
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_index = i;
                rep.analytic = a;
                rep.numeric = numeric;
            }
        }
        rep.pass = rep.max_rel_err <= rel_tol;
        reports.push_back(rep);
    }
    return reports;
}

bool fd_all_pass(const std::vector<FdReport>& reports) {
    return std::all_of(reports.begin(), reports.end(),
                       [](const FdReport& r) { return r.pass; });
}

}  // namespace mstr
