#include "mstr/params.h"

#include "mstr/kernels.h"

namespace mstr {

ParamRef ParamStore::add(const std::string& name, Tensor init, bool trainable) {
    check(!name.empty(), "ParamStore: empty parameter name");
    check(index_.find(name) == index_.end(), "ParamStore: duplicate parameter '" + name + "'");
    check(init.defined(), "ParamStore: undefined init tensor for '" + name + "'");
    Entry e;
    e.name = name;
    e.value = std::move(init);
    e.trainable = trainable;
    entries_.push_back(std::move(e));
    int32_t idx = static_cast<int32_t>(entries_.size() - 1);
    index_[name] = idx;
    return ParamRef{idx};
}

bool ParamStore::contains(const std::string& name) const {
    return index_.find(name) != index_.end();
}

ParamRef ParamStore::ref(const std::string& name) const {
    auto it = index_.find(name);
    check(it != index_.end(), "ParamStore: unknown parameter '" + name + "'");
    return ParamRef{it->second};
}

ParamStore::Entry& ParamStore::at(ParamRef r) {
    check(r.valid() && r.idx < static_cast<int32_t>(entries_.size()),
          "ParamStore: invalid ParamRef");
    return entries_[r.idx];
}

const ParamStore::Entry& ParamStore::at(ParamRef r) const {
    check(r.valid() && r.idx < static_cast<int32_t>(entries_.size()),
          "ParamStore: invalid ParamRef");
    return entries_[r.idx];
}

void ParamStore::zero_grads() {
    for (Entry& e : entries_) {
        if (!e.grad.defined()) continue;
        int64_t n = e.grad.numel();
        if (e.grad.dtype() == Dtype::f64) {
            double* p = e.grad.f64();
            for (int64_t i = 0; i < n; ++i) p[i] = 0.0;
        } else {
            float* p = e.grad.f32();
            for (int64_t i = 0; i < n; ++i) p[i] = 0.0f;
        }
    }
}

void ParamStore::for_each(const std::function<void(Entry&)>& fn) {
    for (Entry& e : entries_) fn(e);
}

int64_t ParamStore::total_elements() const {
    int64_t n = 0;
    for (const Entry& e : entries_) n += e.value.numel();
    return n;
}

Var Bindings::bind(Tape& tape, ParamRef r) {
    ParamStore::Entry& e = store_->at(r);
    auto it = var_of_.find(r.idx);
    if (it != var_of_.end() && it->second.gen == tape.generation()) {
        return it->second;
    }
    Var v = tape.leaf(e.value);  // shares the parameter buffer
    var_of_[r.idx] = v;
    if (it == var_of_.end()) order_.push_back(r.idx);
    return v;
}

void Bindings::accumulate_grads(const Tape& tape, double scale) {
    for (int32_t idx : order_) {
        auto it = var_of_.find(idx);
        if (it == var_of_.end() || it->second.gen != tape.generation()) continue;
        ParamStore::Entry& e = store_->at(ParamRef{idx});
        Tensor g = tape.grad(it->second);
        if (!e.grad.defined()) {
            e.grad = Tensor::zeros(e.value.shape(), e.value.dtype());
        }
        if (e.grad.dtype() == Dtype::f64) {
            kern::axpy(g.numel(), scale, g.f64(), e.grad.f64());
        } else {
            kern::axpy(g.numel(), static_cast<float>(scale), g.f32(), e.grad.f32());
        }
    }
}

std::map<std::string, Tensor> Bindings::grad_map(const Tape& tape) const {
    std::map<std::string, Tensor> out;
    for (int32_t idx : order_) {
        auto it = var_of_.find(idx);
        if (it == var_of_.end() || it->second.gen != tape.generation()) continue;
        const ParamStore::Entry& e = store_->at(ParamRef{idx});
        out[e.name] = tape.grad(it->second);
    }
    return out;
}

void Bindings::reset_tape_bindings() {
    var_of_.clear();
    order_.clear();
}

}  // namespace mstr
