// SPDX-License-Identifier: Apache-2.0
#include "ptml/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <fmt/format.h>

#include "ptml/rng.hpp"

namespace ptml {

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        out += fmt::format("{}{}", i ? "x" : "", s[i]);
    }
    return out + "]";
}

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) {
        if (e <= 0) throw ShapeError(fmt::format("non-positive extent in shape {}", shape_str(s)));
        n *= e;
    }
    return n;
}

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)), dtype_(dtype) {
    numel_ = shape_numel(shape_);
    if (dtype == DType::f32) {
        storage_ = std::vector<float>(static_cast<size_t>(numel_), 0.0f);
    } else {
        storage_ = std::vector<double>(static_cast<size_t>(numel_), 0.0);
    }
}

Tensor Tensor::zeros(Shape shape, DType dtype) { return Tensor(std::move(shape), dtype); }

Tensor Tensor::ones(Shape shape, DType dtype) { return full(std::move(shape), 1.0, dtype); }

Tensor Tensor::full(Shape shape, double value, DType dtype) {
    Tensor t(std::move(shape), dtype);
    dtype_dispatch(dtype, [&](auto tag) {
        using T = typename decltype(tag)::type;
        std::ranges::fill(t.data<T>(), static_cast<T>(value));
    });
    return t;
}

Tensor Tensor::scalar(double value, DType dtype) { return full({1}, value, dtype); }

Tensor Tensor::from(Shape shape, std::span<const double> values, DType dtype) {
    Tensor t(std::move(shape), dtype);
    if (static_cast<int64_t>(values.size()) != t.numel()) {
        throw ShapeError(fmt::format("from(): {} values for shape {}", values.size(), shape_str(t.shape())));
    }
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, values[static_cast<size_t>(i)]);
    return t;
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values, DType dtype) {
    return from(std::move(shape), std::span<const double>(values.begin(), values.size()), dtype);
}

Tensor Tensor::gaussian(Shape shape, Rng& rng, double mean, double stddev, DType dtype) {
    Tensor t(std::move(shape), dtype);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.gauss(mean, stddev));
    return t;
}

Tensor Tensor::identity(int64_t n, DType dtype) {
    Tensor t({n, n}, dtype);
    for (int64_t i = 0; i < n; ++i) t.set(i * n + i, 1.0);
    return t;
}

double Tensor::get(int64_t flat) const {
    return dtype_dispatch(dtype_, [&](auto tag) -> double {
        using T = typename decltype(tag)::type;
        return static_cast<double>(data<T>()[static_cast<size_t>(flat)]);
    });
}

void Tensor::set(int64_t flat, double v) {
    dtype_dispatch(dtype_, [&](auto tag) {
        using T = typename decltype(tag)::type;
        data<T>()[static_cast<size_t>(flat)] = static_cast<T>(v);
    });
}

double Tensor::item() const {
    if (numel_ != 1) throw ShapeError(fmt::format("item() on shape {}", shape_str(shape_)));
    return get(0);
}

int64_t Tensor::check_rc(int64_t r, int64_t c) const {
    if (rank() != 2 || r < 0 || r >= dim(0) || c < 0 || c >= dim(1)) {
        throw ShapeError(fmt::format("element ({}, {}) outside shape {}", r, c, shape_str(shape_)));
    }
    return r * dim(1) + c;
}

Tensor Tensor::to(DType dt) const {
    if (dt == dtype_) return *this;
    Tensor out(shape_, dt);
    for (int64_t i = 0; i < numel_; ++i) out.set(i, get(i));
    out.requires_grad = requires_grad;
    return out;
}

Tensor Tensor::with_requires_grad(bool flag) const {
    Tensor t = *this;
    t.requires_grad = flag;
    return t;
}

void Tensor::check_finite(std::string_view op) const {
    const bool ok = dtype_dispatch(dtype_, [&](auto tag) {
        using T = typename decltype(tag)::type;
        for (T v : data<T>()) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    });
    if (!ok) {
        throw NumericError(fmt::format("{}: produced non-finite values (shape {})", op, shape_str(shape_)));
    }
}

BoolMask BoolMask::full_causal(int64_t n) {
    BoolMask m(n, n, false);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j <= i; ++j) m.set(i, j, true);
    }
    return m;
}

namespace ops {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
    require(a.dtype() == b.dtype(), fmt::format("{}: dtype mismatch", op));
}

bool is_scalar(const Tensor& t) { return t.numel() == 1; }

template <class T, class F>
Tensor unary_impl(const Tensor& a, F&& f) {
    Tensor out(a.shape(), a.dtype());
    auto av = a.data<T>();
    auto ov = out.data<T>();
    for (size_t i = 0; i < av.size(); ++i) ov[i] = f(av[i]);
    return out;
}

template <class F>
Tensor unary(const Tensor& a, F&& f) {
    return dtype_dispatch(a.dtype(), [&](auto tag) {
        using T = typename decltype(tag)::type;
        return unary_impl<T>(a, f);
    });
}

// Binary with the broadcasting rule: equal shapes, or one side scalar.
template <class F>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F&& f) {
    require_same_dtype(a, b, op);
    return dtype_dispatch(a.dtype(), [&](auto tag) {
        using T = typename decltype(tag)::type;
        if (a.shape() == b.shape()) {
            Tensor out(a.shape(), a.dtype());
            auto av = a.data<T>();
            auto bv = b.data<T>();
            auto ov = out.data<T>();
            for (size_t i = 0; i < av.size(); ++i) ov[i] = f(av[i], bv[i]);
            return out;
        }
        if (is_scalar(b)) {
            const T s = b.data<T>()[0];
            return unary_impl<T>(a, [&](T x) { return f(x, s); });
        }
        if (is_scalar(a)) {
            const T s = a.data<T>()[0];
            Tensor out(b.shape(), b.dtype());
            auto bv = b.data<T>();
            auto ov = out.data<T>();
            for (size_t i = 0; i < bv.size(); ++i) ov[i] = f(s, bv[i]);
            return out;
        }
        throw ShapeError(fmt::format("{}: incompatible shapes {} vs {} (only equal-shape or scalar broadcast)",
                                     op, shape_str(a.shape()), shape_str(b.shape())));
    });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2,
            fmt::format("matmul: need rank-2 operands, got {} and {}", shape_str(a.shape()), shape_str(b.shape())));
    require(a.dim(1) == b.dim(0),
            fmt::format("matmul: inner extents differ, {} vs {}", shape_str(a.shape()), shape_str(b.shape())));
    require_same_dtype(a, b, "matmul");
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n}, a.dtype());
    dtype_dispatch(a.dtype(), [&](auto tag) {
        using T = typename decltype(tag)::type;
        auto av = a.data<T>();
        auto bv = b.data<T>();
        auto ov = out.data<T>();
        for (int64_t i = 0; i < m; ++i) {
            for (int64_t p = 0; p < k; ++p) {
                const T aip = av[static_cast<size_t>(i * k + p)];
                if (aip == T(0)) continue;
                const size_t brow = static_cast<size_t>(p * n);
                const size_t orow = static_cast<size_t>(i * n);
                for (int64_t j = 0; j < n; ++j) {
                    ov[orow + static_cast<size_t>(j)] += aip * bv[brow + static_cast<size_t>(j)];
                }
            }
        }
    });
    return out;
}

Tensor transpose(const Tensor& a) {
    require(a.rank() == 2, "transpose: rank-2 only");
    const int64_t m = a.dim(0), n = a.dim(1);
    Tensor out({n, m}, a.dtype());
    dtype_dispatch(a.dtype(), [&](auto tag) {
        using T = typename decltype(tag)::type;
        auto av = a.data<T>();
        auto ov = out.data<T>();
        for (int64_t i = 0; i < m; ++i) {
            for (int64_t j = 0; j < n; ++j) {
                ov[static_cast<size_t>(j * m + i)] = av[static_cast<size_t>(i * n + j)];
            }
        }
    });
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, "add", [](auto x, auto y) { return x + y; }); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, "sub", [](auto x, auto y) { return x - y; }); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, "mul", [](auto x, auto y) { return x * y; }); }
Tensor neg(const Tensor& a) { return unary(a, [](auto x) { return -x; }); }
Tensor exp(const Tensor& a) { return unary(a, [](auto x) { return std::exp(x); }); }
Tensor log(const Tensor& a) { return unary(a, [](auto x) { return std::log(x); }); }

Tensor silu(const Tensor& a) {
    return unary(a, [](auto x) {
        using T = decltype(x);
        return static_cast<T>(static_cast<double>(x) / (1.0 + std::exp(-static_cast<double>(x))));
    });
}

// tanh form of gelu
Tensor gelu(const Tensor& a) {
    return unary(a, [](auto x) {
        using T = decltype(x);
        const double v = static_cast<double>(x);
        constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
        return static_cast<T>(0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v))));
    });
}

Tensor add_scalar(const Tensor& a, double s) {
    return unary(a, [s](auto x) { using T = decltype(x); return static_cast<T>(x + static_cast<T>(s)); });
}

Tensor mul_scalar(const Tensor& a, double s) {
    return unary(a, [s](auto x) { using T = decltype(x); return static_cast<T>(x * static_cast<T>(s)); });
}

void add_inplace(Tensor& acc, const Tensor& t) {
    if (!acc.defined()) {
        acc = t;
        return;
    }
    require(acc.shape() == t.shape() && acc.dtype() == t.dtype(), "add_inplace: layout mismatch");
    dtype_dispatch(acc.dtype(), [&](auto tag) {
        using T = typename decltype(tag)::type;
        auto av = acc.data<T>();
        auto tv = t.data<T>();
        for (size_t i = 0; i < av.size(); ++i) av[i] += tv[i];
    });
}

Tensor softmax(const Tensor& x, int axis) {
    require(x.rank() == 1 || x.rank() == 2, "softmax: rank-1 or rank-2");
    if (x.rank() == 1) {
        require(axis == 0, "softmax: axis out of range");
        Tensor row = reshape(x, {1, x.dim(0)});
        return reshape(softmax(row, 1), x.shape());
    }
    require(axis == 0 || axis == 1, "softmax: axis out of range");
    if (axis == 0) {
        return transpose(softmax(transpose(x), 1));
    }
    const int64_t rows = x.dim(0), cols = x.dim(1);
    Tensor out(x.shape(), x.dtype());
    dtype_dispatch(x.dtype(), [&](auto tag) {
        using T = typename decltype(tag)::type;
        auto xv = x.data<T>();
        auto ov = out.data<T>();
        for (int64_t r = 0; r < rows; ++r) {
            const size_t base = static_cast<size_t>(r * cols);
            double mx = -std::numeric_limits<double>::infinity();
            for (int64_t c = 0; c < cols; ++c) mx = std::max(mx, static_cast<double>(xv[base + c]));
            double denom = 0.0;
            for (int64_t c = 0; c < cols; ++c) denom += std::exp(static_cast<double>(xv[base + c]) - mx);
            for (int64_t c = 0; c < cols; ++c) {
                ov[base + c] = static_cast<T>(std::exp(static_cast<double>(xv[base + c]) - mx) / denom);
            }
        }
    });
    return out;
}

Tensor masked_softmax(const Tensor& logits, const BoolMask& mask) {
    require(logits.rank() == 2, "masked_softmax: rank-2 logits");
    require(logits.dim(0) == mask.rows && logits.dim(1) == mask.cols,
            fmt::format("masked_softmax: mask {}x{} does not cover logits {}", mask.rows, mask.cols,
                        shape_str(logits.shape())));
    const int64_t rows = logits.dim(0), cols = logits.dim(1);
    Tensor out(logits.shape(), logits.dtype());
    dtype_dispatch(logits.dtype(), [&](auto tag) {
        using T = typename decltype(tag)::type;
        auto xv = logits.data<T>();
        auto ov = out.data<T>();
        for (int64_t r = 0; r < rows; ++r) {
            const size_t base = static_cast<size_t>(r * cols);
            double mx = -std::numeric_limits<double>::infinity();
            int64_t allowed = 0;
            for (int64_t c = 0; c < cols; ++c) {
                if (mask.at(r, c)) {
                    mx = std::max(mx, static_cast<double>(xv[base + c]));
                    ++allowed;
                }
            }
            if (allowed == 0) {
                throw NumericError(fmt::format("masked_softmax: row {} fully masked, cannot normalize", r));
            }
            double denom = 0.0;
            for (int64_t c = 0; c < cols; ++c) {
                if (mask.at(r, c)) denom += std::exp(static_cast<double>(xv[base + c]) - mx);
            }
            for (int64_t c = 0; c < cols; ++c) {
                ov[base + c] = mask.at(r, c)
                                   ? static_cast<T>(std::exp(static_cast<double>(xv[base + c]) - mx) / denom)
                                   : T(0);
            }
        }
    });
    return out;
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
    require(x.rank() == 2, "rmsnorm: rank-2 input");
    require(gain.rank() == 1 && gain.dim(0) == x.dim(1),
            fmt::format("rmsnorm: gain {} does not match width of {}", shape_str(gain.shape()), shape_str(x.shape())));
    require(eps > 0.0, "rmsnorm: eps must be positive");
    require_same_dtype(x, gain, "rmsnorm");
    const int64_t rows = x.dim(0), cols = x.dim(1);
    Tensor out(x.shape(), x.dtype());
    dtype_dispatch(x.dtype(), [&](auto tag) {
        using T = typename decltype(tag)::type;
        auto xv = x.data<T>();
        auto gv = gain.data<T>();
        auto ov = out.data<T>();
        for (int64_t r = 0; r < rows; ++r) {
            const size_t base = static_cast<size_t>(r * cols);
            double ss = 0.0;
            for (int64_t c = 0; c < cols; ++c) {
                const double v = static_cast<double>(xv[base + c]);
                ss += v * v;
            }
            const double inv = 1.0 / std::sqrt(ss / static_cast<double>(cols) + eps);
            for (int64_t c = 0; c < cols; ++c) {
                ov[base + c] = static_cast<T>(static_cast<double>(xv[base + c]) * inv * static_cast<double>(gv[c]));
            }
        }
    });
    return out;
}

Tensor reshape(const Tensor& x, Shape new_shape) {
    require(shape_numel(new_shape) == x.numel(),
            fmt::format("reshape: {} -> {} changes element count", shape_str(x.shape()), shape_str(new_shape)));
    Tensor fresh(new_shape, x.dtype());
    dtype_dispatch(x.dtype(), [&](auto tag) {
        using T = typename decltype(tag)::type;
        std::ranges::copy(x.data<T>(), fresh.data<T>().begin());
    });
    fresh.requires_grad = x.requires_grad;
    return fresh;
}

Tensor slice_rows(const Tensor& x, int64_t lo, int64_t hi) {
    require(x.rank() == 2, "slice_rows: rank-2 only");
    require(0 <= lo && lo < hi && hi <= x.dim(0), fmt::format("slice_rows: [{}, {}) out of range", lo, hi));
    const int64_t cols = x.dim(1);
    Tensor out({hi - lo, cols}, x.dtype());
    dtype_dispatch(x.dtype(), [&](auto tag) {
        using T = typename decltype(tag)::type;
        auto xv = x.data<T>();
        auto ov = out.data<T>();
        std::copy(xv.begin() + static_cast<size_t>(lo * cols), xv.begin() + static_cast<size_t>(hi * cols),
                  ov.begin());
    });
    return out;
}

Tensor slice_cols(const Tensor& x, int64_t lo, int64_t hi) {
    require(x.rank() == 2, "slice_cols: rank-2 only");
    require(0 <= lo && lo < hi && hi <= x.dim(1), fmt::format("slice_cols: [{}, {}) out of range", lo, hi));
    const int64_t rows = x.dim(0), cols = x.dim(1), w = hi - lo;
    Tensor out({rows, w}, x.dtype());
    dtype_dispatch(x.dtype(), [&](auto tag) {
        using T = typename decltype(tag)::type;
        auto xv = x.data<T>();
        auto ov = out.data<T>();
        for (int64_t r = 0; r < rows; ++r) {
            std::copy(xv.begin() + static_cast<size_t>(r * cols + lo), xv.begin() + static_cast<size_t>(r * cols + hi),
                      ov.begin() + static_cast<size_t>(r * w));
        }
    });
    return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
    require(!parts.empty(), "concat_rows: no parts");
    const int64_t cols = parts[0].dim(1);
    int64_t rows = 0;
    for (const Tensor& p : parts) {
        require(p.rank() == 2 && p.dim(1) == cols, "concat_rows: column widths differ");
        require(p.dtype() == parts[0].dtype(), "concat_rows: dtype mismatch");
        rows += p.dim(0);
    }
    Tensor out({rows, cols}, parts[0].dtype());
    int64_t at = 0;
    for (const Tensor& p : parts) {
        dtype_dispatch(p.dtype(), [&](auto tag) {
            using T = typename decltype(tag)::type;
            std::ranges::copy(p.data<T>(), out.data<T>().begin() + static_cast<size_t>(at * cols));
        });
        at += p.dim(0);
    }
    return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
    require(!parts.empty(), "concat_cols: no parts");
    const int64_t rows = parts[0].dim(0);
    int64_t cols = 0;
    for (const Tensor& p : parts) {
        require(p.rank() == 2 && p.dim(0) == rows, "concat_cols: row counts differ");
        require(p.dtype() == parts[0].dtype(), "concat_cols: dtype mismatch");
        cols += p.dim(1);
    }
    Tensor out({rows, cols}, parts[0].dtype());
    int64_t at = 0;
    for (const Tensor& p : parts) {
        const int64_t w = p.dim(1);
        dtype_dispatch(p.dtype(), [&](auto tag) {
            using T = typename decltype(tag)::type;
            auto pv = p.data<T>();
            auto ov = out.data<T>();
            for (int64_t r = 0; r < rows; ++r) {
                std::copy(pv.begin() + static_cast<size_t>(r * w), pv.begin() + static_cast<size_t>((r + 1) * w),
                          ov.begin() + static_cast<size_t>(r * cols + at));
            }
        });
        at += w;
    }
    return out;
}

Tensor gather_rows(const Tensor& x, std::span<const int64_t> idx) {
    require(x.rank() == 2, "gather_rows: rank-2 only");
    const int64_t rows = x.dim(0), cols = x.dim(1);
    Tensor out({static_cast<int64_t>(idx.size()), cols}, x.dtype());
    dtype_dispatch(x.dtype(), [&](auto tag) {
        using T = typename decltype(tag)::type;
        auto xv = x.data<T>();
        auto ov = out.data<T>();
        for (size_t i = 0; i < idx.size(); ++i) {
            const int64_t r = idx[i];
            require(0 <= r && r < rows, fmt::format("gather_rows: index {} out of range [0, {})", r, rows));
            std::copy(xv.begin() + static_cast<size_t>(r * cols), xv.begin() + static_cast<size_t>((r + 1) * cols),
                      ov.begin() + i * static_cast<size_t>(cols));
        }
    });
    return out;
}

Tensor scatter_rows_sum(const Tensor& rows, std::span<const int64_t> idx, int64_t out_rows) {
    require(rows.rank() == 2, "scatter_rows_sum: rank-2 only");
    require(static_cast<int64_t>(idx.size()) == rows.dim(0), "scatter_rows_sum: index count != row count");
    const int64_t cols = rows.dim(1);
    Tensor out({out_rows, cols}, rows.dtype());
    dtype_dispatch(rows.dtype(), [&](auto tag) {
        using T = typename decltype(tag)::type;
        auto rv = rows.data<T>();
        auto ov = out.data<T>();
        for (size_t i = 0; i < idx.size(); ++i) {
            const int64_t r = idx[i];
            require(0 <= r && r < out_rows, fmt::format("scatter_rows_sum: index {} out of range [0, {})", r, out_rows));
            for (int64_t c = 0; c < cols; ++c) {
                ov[static_cast<size_t>(r * cols + c)] += rv[i * static_cast<size_t>(cols) + static_cast<size_t>(c)];
            }
        }
    });
    return out;
}

Tensor gather_flat(const Tensor& x, std::span<const int64_t> flat_idx) {
    Tensor out({static_cast<int64_t>(flat_idx.size())}, x.dtype());
    for (size_t i = 0; i < flat_idx.size(); ++i) {
        const int64_t f = flat_idx[i];
        if (f < 0 || f >= x.numel()) {
            throw ShapeError(fmt::format("gather_flat: index {} out of range [0, {})", f, x.numel()));
        }
        out.set(static_cast<int64_t>(i), x.get(f));
    }
    return out;
}

Tensor scale_rows(const Tensor& x, const Tensor& row_scales) {
    require(x.rank() == 2, "scale_rows: rank-2 only");
    require(row_scales.rank() == 1 && row_scales.dim(0) == x.dim(0),
            fmt::format("scale_rows: scales {} vs rows {}", shape_str(row_scales.shape()), x.dim(0)));
    require_same_dtype(x, row_scales, "scale_rows");
    const int64_t rows = x.dim(0), cols = x.dim(1);
    Tensor out(x.shape(), x.dtype());
    dtype_dispatch(x.dtype(), [&](auto tag) {
        using T = typename decltype(tag)::type;
        auto xv = x.data<T>();
        auto sv = row_scales.data<T>();
        auto ov = out.data<T>();
        for (int64_t r = 0; r < rows; ++r) {
            const T s = sv[static_cast<size_t>(r)];
            for (int64_t c = 0; c < cols; ++c) {
                ov[static_cast<size_t>(r * cols + c)] = xv[static_cast<size_t>(r * cols + c)] * s;
            }
        }
    });
    return out;
}

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) acc += x.get(i);
    return Tensor::scalar(acc, x.dtype());
}

Tensor mean(const Tensor& x) {
    return Tensor::scalar(sum(x).item() / static_cast<double>(x.numel()), x.dtype());
}

double max_abs(const Tensor& x) {
    double m = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) m = std::max(m, std::abs(x.get(i)));
    return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(fmt::format("max_abs_diff: shapes {} vs {}", shape_str(a.shape()), shape_str(b.shape())));
    }
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.get(i) - b.get(i)));
    return m;
}

double frobenius_norm(const Tensor& x) {
    double ss = 0.0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        const double v = x.get(i);
        ss += v * v;
    }
    return std::sqrt(ss);
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
    return dtype_dispatch(a.dtype(), [&](auto tag) {
        using T = typename decltype(tag)::type;
        auto av = a.data<T>();
        auto bv = b.data<T>();
        return std::memcmp(av.data(), bv.data(), av.size() * sizeof(T)) == 0;
    });
}

}  // namespace ops

}  // namespace ptml
