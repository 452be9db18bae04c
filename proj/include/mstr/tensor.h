#pragma once
// Dense row-major tensors.
//
// Storage is shared (shallow copies alias the same buffer), which makes it
// cheap to hand a parameter tensor to an autodiff tape without copying.
// Operations always allocate fresh outputs; the only code that mutates a
// tensor in place is the optimizer, which owns its parameters.
//
// dtype is 64-bit float by default; 32-bit float is an opt-in for speed.
// Mixing dtypes in one operation is a contract violation.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mstr/common.h"

namespace mstr {

enum class Dtype : uint8_t { f64 = 0, f32 = 1 };

inline const char* dtype_name(Dtype d) { return d == Dtype::f64 ? "f64" : "f32"; }
inline size_t dtype_size(Dtype d) { return d == Dtype::f64 ? 8 : 4; }

class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(std::vector<int64_t> shape, Dtype dt = Dtype::f64);
    static Tensor full(std::vector<int64_t> shape, double value, Dtype dt = Dtype::f64);
    static Tensor from_values(std::vector<int64_t> shape, const std::vector<double>& values,
                              Dtype dt = Dtype::f64);
    // Scalar wrapped as a [1] tensor.
    static Tensor scalar(double value, Dtype dt = Dtype::f64);

    bool defined() const { return !shape_.empty() || d64_ || d32_; }
    Dtype dtype() const { return dtype_; }
    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
    int64_t numel() const;

    // 2-D helpers; throw on other ranks.
    int64_t rows() const;
    int64_t cols() const;

    // Typed raw access.  The dtype must match or a ContractError is thrown.
    double* f64();
    const double* f64() const;
    float* f32();
    const float* f32() const;

    template <typename T>
    T* data();
    template <typename T>
    const T* data() const;

    // Element read/write as double regardless of dtype (convenience for
    // tests, serialization, and scalar plumbing; not for hot loops).
    double get(int64_t flat) const;
    void set(int64_t flat, double v);
    double at(int64_t r, int64_t c) const { return get(r * cols() + c); }

    // Deep copy.
    Tensor clone() const;
    // Same data buffer, new shape with identical element count.
    Tensor reshaped(std::vector<int64_t> new_shape) const;
    // Copy converted to the given dtype.
    Tensor cast(Dtype dt) const;
    std::vector<double> to_vector() const;

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    std::string shape_str() const;

    // True when both tensors have equal shape, dtype and bit-identical
    // payloads.
    bool bit_equal(const Tensor& o) const;

  private:
    void alloc();

    std::vector<int64_t> shape_;
    Dtype dtype_ = Dtype::f64;
    std::shared_ptr<std::vector<double>> d64_;
    std::shared_ptr<std::vector<float>> d32_;
};

template <>
inline double* Tensor::data<double>() {
    return f64();
}
template <>
inline const double* Tensor::data<double>() const {
    return f64();
}
template <>
inline float* Tensor::data<float>() {
    return f32();
}
template <>
inline const float* Tensor::data<float>() const {
    return f32();
}

}  // namespace mstr
