#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "slimrec/common.hpp"
#include "slimrec/rng.hpp"

namespace slimrec {

// Keeps vector growth from value-initializing elements, so hot-path tensors
// that are fully overwritten skip the zeroing pass. Zero-filled construction
// stays the default and is requested explicitly.
template <typename T>
struct DefaultInitAllocator : std::allocator<T> {
    template <typename U>
    struct rebind {
        using other = DefaultInitAllocator<U>;
    };
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        if constexpr (sizeof...(Args) == 0)
            ::new (static_cast<void*>(p)) U;
        else
            ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

using RealVec = std::vector<real, DefaultInitAllocator<real>>;

// Dense row-major tensor with value semantics. Once built, tensors are
// treated as immutable values by the differentiation machinery; mutation is
// reserved for parameter updates.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(numel_of(shape_), real(0));
    }

    Tensor(std::vector<int> shape, std::vector<real> data)
        : shape_(std::move(shape)) {
        if (data.size() != numel_of(shape_)) {
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape_));
        }
        data_.assign(data.begin(), data.end());
    }

    // Allocates without zeroing; the caller must write every element.
    static Tensor uninit(std::vector<int> shape) {
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_.resize(numel_of(t.shape_));
        return t;
    }

    static Tensor scalar(real v) { return Tensor({1}, {v}); }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int> shape, real v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    static Tensor uniform(std::vector<int> shape, real lo, real hi, Rng& rng) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = static_cast<real>(rng.uniform(lo, hi));
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape_.size()); }
    size_t numel() const { return data_.size(); }

    real* data() { return data_.data(); }
    const real* data() const { return data_.data(); }
    RealVec& vec() { return data_; }
    const RealVec& vec() const { return data_; }

    real& operator[](size_t i) { return data_[i]; }
    real operator[](size_t i) const { return data_[i]; }

    // 2-d / 3-d accessors, used where index arithmetic would obscure the math.
    real& at2(int r, int c) { return data_[static_cast<size_t>(r) * dim(1) + c]; }
    real at2(int r, int c) const { return data_[static_cast<size_t>(r) * dim(1) + c]; }
    real& at3(int b, int r, int c) {
        return data_[(static_cast<size_t>(b) * dim(1) + r) * dim(2) + c];
    }
    real at3(int b, int r, int c) const {
        return data_[(static_cast<size_t>(b) * dim(1) + r) * dim(2) + c];
    }

    real item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of " + std::to_string(numel()) + " elements");
        return data_[0];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (real v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    // Rows = product of all leading extents, cols = last extent. Lets 2-d
    // kernels run unchanged over batched inputs.
    size_t lead_rows() const {
        size_t r = 1;
        for (size_t i = 0; i + 1 < shape_.size(); ++i) r *= static_cast<size_t>(shape_[i]);
        return r;
    }
    int last_dim() const { return shape_.empty() ? 1 : shape_.back(); }

    static size_t numel_of(const std::vector<int>& shape) {
        size_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw ShapeError("non-positive extent in " + shape_str(shape));
            n *= static_cast<size_t>(d);
        }
        return n;
    }

    static std::string shape_str(const std::vector<int>& shape) {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << "]";
        return os.str();
    }

    std::string shape_str() const { return shape_str(shape_); }

private:
    std::vector<int> shape_;
    RealVec data_;
};

inline bool bit_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (size_t i = 0; i < a.numel(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

inline real max_rel_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("max_rel_diff shapes " + a.shape_str() + " vs " + b.shape_str());
    real worst = 0;
    for (size_t i = 0; i < a.numel(); ++i) {
        real denom = std::max<real>(std::max(std::abs(a[i]), std::abs(b[i])), real(1));
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

// Named trainable tensor. Parameters own their values between steps; the
// tape references them during a forward/backward pass.
struct Parameter {
    std::string name;
    Tensor value;

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}
};

}  // namespace slimrec
