// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "ptml/errors.hpp"

namespace ptml {

class Rng;

enum class DType : uint8_t { f32 = 0, f64 = 1 };

inline constexpr size_t dtype_size(DType dt) { return dt == DType::f32 ? 4 : 8; }
inline constexpr std::string_view dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);  // validates positive extents

// Dense row-major tensor, f32 by default with an f64 switch for gradient
// checks. Value semantics; treat instances as immutable once built and copy
// when a modified version is needed.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, DType dtype);  // zero-filled

    static Tensor zeros(Shape shape, DType dtype = DType::f32);
    static Tensor ones(Shape shape, DType dtype = DType::f32);
    static Tensor full(Shape shape, double value, DType dtype = DType::f32);
    static Tensor scalar(double value, DType dtype = DType::f32);
    static Tensor from(Shape shape, std::span<const double> values, DType dtype = DType::f32);
    static Tensor from(Shape shape, std::initializer_list<double> values, DType dtype = DType::f32);
    static Tensor gaussian(Shape shape, Rng& rng, double mean = 0.0, double stddev = 1.0,
                           DType dtype = DType::f32);
    static Tensor identity(int64_t n, DType dtype = DType::f32);

    bool defined() const { return !std::holds_alternative<std::monostate>(storage_); }
    const Shape& shape() const { return shape_; }
    int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
    int64_t dim(int64_t i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return numel_; }
    DType dtype() const { return dtype_; }

    template <class T>
    std::span<T> data() {
        return std::span<T>(vec<T>().data(), vec<T>().size());
    }
    template <class T>
    std::span<const T> data() const {
        return std::span<const T>(vec<T>().data(), vec<T>().size());
    }

    // dtype-erased element access (slow path for tests and glue code)
    double get(int64_t flat) const;
    void set(int64_t flat, double v);
    double at2(int64_t r, int64_t c) const { return get(check_rc(r, c)); }
    void set2(int64_t r, int64_t c, double v) { set(check_rc(r, c), v); }
    double item() const;
    int64_t check_rc(int64_t r, int64_t c) const;

    Tensor to(DType dt) const;
    Tensor with_requires_grad(bool flag) const;

    bool requires_grad = false;

    // Throws NumericError naming `op` if any element is NaN/Inf.
    void check_finite(std::string_view op) const;

private:
    template <class T>
    std::vector<T>& vec() {
        auto* p = std::get_if<std::vector<T>>(&storage_);
        if (!p) throw ShapeError("tensor dtype mismatch");
        return *p;
    }
    template <class T>
    const std::vector<T>& vec() const {
        auto* p = std::get_if<std::vector<T>>(&storage_);
        if (!p) throw ShapeError("tensor dtype mismatch");
        return *p;
    }

    Shape shape_;
    int64_t numel_ = 0;
    DType dtype_ = DType::f32;
    std::variant<std::monostate, std::vector<float>, std::vector<double>> storage_;
};

template <class F>
decltype(auto) dtype_dispatch(DType dt, F&& f) {
    if (dt == DType::f32) {
        return f(std::type_identity<float>{});
    }
    return f(std::type_identity<double>{});
}

// Boolean attention/selection mask, true = allowed.
struct BoolMask {
    int64_t rows = 0;
    int64_t cols = 0;
    std::vector<uint8_t> allow;

    BoolMask() = default;
    BoolMask(int64_t r, int64_t c, bool init = false)
        : rows(r), cols(c), allow(static_cast<size_t>(r * c), init ? 1 : 0) {}
    bool at(int64_t r, int64_t c) const { return allow[static_cast<size_t>(r * cols + c)] != 0; }
    void set(int64_t r, int64_t c, bool v) { allow[static_cast<size_t>(r * cols + c)] = v ? 1 : 0; }
    static BoolMask full_causal(int64_t n);
};

// Value-level kernels. Pure functions; the autodiff tape wraps these.
namespace ops {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Elementwise; binary ops accept equal shapes or a scalar (numel==1) operand.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
void add_inplace(Tensor& acc, const Tensor& t);

Tensor softmax(const Tensor& x, int axis);
Tensor masked_softmax(const Tensor& logits, const BoolMask& mask);
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps);

Tensor reshape(const Tensor& x, Shape new_shape);
Tensor slice_rows(const Tensor& x, int64_t lo, int64_t hi);
Tensor slice_cols(const Tensor& x, int64_t lo, int64_t hi);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);

Tensor gather_rows(const Tensor& x, std::span<const int64_t> idx);
Tensor scatter_rows_sum(const Tensor& rows, std::span<const int64_t> idx, int64_t out_rows);
Tensor gather_flat(const Tensor& x, std::span<const int64_t> flat_idx);
Tensor scale_rows(const Tensor& x, const Tensor& row_scales);

Tensor sum(const Tensor& x);   // -> scalar [1]
Tensor mean(const Tensor& x);  // -> scalar [1]

double max_abs(const Tensor& x);
double max_abs_diff(const Tensor& a, const Tensor& b);
double frobenius_norm(const Tensor& x);
bool bit_equal(const Tensor& a, const Tensor& b);

}  // namespace ops

}  // namespace ptml
