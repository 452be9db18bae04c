#pragma once
// Named parameter storage shared by all model components.
//
// Parameters live outside any tape.  Each forward pass binds the parameters
// it touches onto the tape as leaves (sharing the underlying buffer, no copy)
// through a Bindings object; after backward(), Bindings::accumulate_grads
// folds the tape gradients into the per-parameter grad buffers in
// registration order, which keeps training bit-reproducible.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mstr/tape.h"
#include "mstr/tensor.h"

namespace mstr {

struct ParamRef {
    int32_t idx = -1;
    bool valid() const { return idx >= 0; }
};

class ParamStore {
  public:
    struct Entry {
        std::string name;
        Tensor value;
        Tensor grad;        // allocated on demand, same shape as value
        Tensor adam_m;      // optimizer state, allocated on demand
        Tensor adam_v;
        bool trainable = true;
    };

    ParamRef add(const std::string& name, Tensor init, bool trainable = true);
    bool contains(const std::string& name) const;
    ParamRef ref(const std::string& name) const;

    Entry& at(ParamRef r);
    const Entry& at(ParamRef r) const;
    Entry& at(const std::string& name) { return at(ref(name)); }

    size_t size() const { return entries_.size(); }
    Entry& entry(size_t i) { return entries_[i]; }
    const Entry& entry(size_t i) const { return entries_[i]; }

    // Zero every allocated gradient buffer.
    void zero_grads();
    // Apply fn to every entry (registration order).
    void for_each(const std::function<void(Entry&)>& fn);

    int64_t total_elements() const;

  private:
    std::vector<Entry> entries_;
    std::map<std::string, int32_t> index_;
};

// Records which parameters a forward pass bound onto a tape.  Binding the
// same parameter twice returns the already-created leaf, so each parameter
// appears on the tape at most once per pass.
class Bindings {
  public:
    explicit Bindings(ParamStore& store) : store_(&store) {}

    Var bind(Tape& tape, ParamRef r);

    // Fold tape gradients into store grad buffers.  Unreached parameters
    // contribute zeros.  scale multiplies every gradient (batch averaging).
    void accumulate_grads(const Tape& tape, double scale = 1.0);

    // Parameter indices bound so far, in first-use order.
    const std::vector<int32_t>& bound() const { return order_; }

    // Gradients as a name -> tensor map (zeros for bound-but-unreached).
    std::map<std::string, Tensor> grad_map(const Tape& tape) const;

    void reset_tape_bindings();

  private:
    ParamStore* store_;
    std::map<int32_t, Var> var_of_;
    std::vector<int32_t> order_;
};

}  // namespace mstr
