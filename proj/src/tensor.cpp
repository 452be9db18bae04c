#include "mstr/tensor.h"

#include <cstring>
#include <sstream>

namespace mstr {

namespace {
int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t e : shape) {
        check(e >= 0, "Tensor: negative extent");
        n *= e;
    }
    return n;
}
}  // namespace

void Tensor::alloc() {
    int64_t n = shape_numel(shape_);
    if (dtype_ == Dtype::f64) {
        d64_ = std::make_shared<std::vector<double>>(static_cast<size_t>(n), 0.0);
    } else {
        d32_ = std::make_shared<std::vector<float>>(static_cast<size_t>(n), 0.0f);
    }
}

Tensor Tensor::zeros(std::vector<int64_t> shape, Dtype dt) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.dtype_ = dt;
    t.alloc();
    return t;
}

Tensor Tensor::full(std::vector<int64_t> shape, double value, Dtype dt) {
    Tensor t = zeros(std::move(shape), dt);
    int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) t.set(i, value);
    return t;
}

Tensor Tensor::from_values(std::vector<int64_t> shape, const std::vector<double>& values,
                           Dtype dt) {
    Tensor t = zeros(std::move(shape), dt);
    check(t.numel() == static_cast<int64_t>(values.size()),
          "Tensor::from_values: element count " + std::to_string(values.size()) +
              " does not match shape " + t.shape_str());
    for (size_t i = 0; i < values.size(); ++i) t.set(static_cast<int64_t>(i), values[i]);
    return t;
}

Tensor Tensor::scalar(double value, Dtype dt) { return from_values({1}, {value}, dt); }

int64_t Tensor::numel() const { return shape_numel(shape_); }

int64_t Tensor::rows() const {
    check(ndim() == 2, "Tensor::rows: tensor " + shape_str() + " is not 2-D");
    return shape_[0];
}

int64_t Tensor::cols() const {
    check(ndim() == 2, "Tensor::cols: tensor " + shape_str() + " is not 2-D");
    return shape_[1];
}

double* Tensor::f64() {
    check(dtype_ == Dtype::f64 && d64_, "Tensor: f64 access on " + std::string(dtype_name(dtype_)));
    return d64_->data();
}

const double* Tensor::f64() const {
    check(dtype_ == Dtype::f64 && d64_, "Tensor: f64 access on " + std::string(dtype_name(dtype_)));
    return d64_->data();
}

float* Tensor::f32() {
    check(dtype_ == Dtype::f32 && d32_, "Tensor: f32 access on " + std::string(dtype_name(dtype_)));
    return d32_->data();
}

const float* Tensor::f32() const {
    check(dtype_ == Dtype::f32 && d32_, "Tensor: f32 access on " + std::string(dtype_name(dtype_)));
    return d32_->data();
}

double Tensor::get(int64_t flat) const {
    check(flat >= 0 && flat < numel(), "Tensor::get: index out of range");
    return dtype_ == Dtype::f64 ? (*d64_)[static_cast<size_t>(flat)]
                                : static_cast<double>((*d32_)[static_cast<size_t>(flat)]);
}

void Tensor::set(int64_t flat, double v) {
    check(flat >= 0 && flat < numel(), "Tensor::set: index out of range");
    if (dtype_ == Dtype::f64) {
        (*d64_)[static_cast<size_t>(flat)] = v;
    } else {
        (*d32_)[static_cast<size_t>(flat)] = static_cast<float>(v);
    }
}

Tensor Tensor::clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.dtype_ = dtype_;
    if (dtype_ == Dtype::f64) {
        t.d64_ = std::make_shared<std::vector<double>>(*d64_);
    } else {
        t.d32_ = std::make_shared<std::vector<float>>(*d32_);
    }
    return t;
}

Tensor Tensor::reshaped(std::vector<int64_t> new_shape) const {
    check(shape_numel(new_shape) == numel(),
          "Tensor::reshaped: element count mismatch for " + shape_str());
    Tensor t = *this;
    t.shape_ = std::move(new_shape);
    return t;
}

Tensor Tensor::cast(Dtype dt) const {
    if (dt == dtype_) return clone();
    Tensor t = zeros(shape_, dt);
    int64_t n = numel();
    for (int64_t i = 0; i < n; ++i) t.set(i, get(i));
    return t;
}

std::vector<double> Tensor::to_vector() const {
    std::vector<double> out(static_cast<size_t>(numel()));
    for (size_t i = 0; i < out.size(); ++i) out[i] = get(static_cast<int64_t>(i));
    return out;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << ",";
        os << shape_[i];
    }
    os << "]";
    return os.str();
}

bool Tensor::bit_equal(const Tensor& o) const {
    if (shape_ != o.shape_ || dtype_ != o.dtype_) return false;
    size_t bytes = static_cast<size_t>(numel()) * dtype_size(dtype_);
    if (bytes == 0) return true;
    const void* a = dtype_ == Dtype::f64 ? static_cast<const void*>(d64_->data())
                                         : static_cast<const void*>(d32_->data());
    const void* b = o.dtype_ == Dtype::f64 ? static_cast<const void*>(o.d64_->data())
                                           : static_cast<const void*>(o.d32_->data());
    return std::memcmp(a, b, bytes) == 0;
}

}  // namespace mstr
